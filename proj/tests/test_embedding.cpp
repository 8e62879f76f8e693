#include "dcn/embedding.hpp"
#include "test_util.hpp"

using namespace dcn;
using dcn::testing::random_tensor;
using dcn::testing::relative_error;
using dcn::testing::tiny_embedding;

namespace {

Tensor<float> random_images(std::size_t b, std::size_t size, Rng& rng) {
  std::normal_distribution<float> normal(0.f, 1.f);
  Tensor<float> t({b, 3, size, size});
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

}  // namespace

TEST(Embedding, DeskConfigLevelShapes) {
  Rng rng(21);
  EmbeddingConfig config;
  EmbeddingColumn<float> net(config);
  net.init(rng);
  const auto h = net.embed(random_images(8, 32, rng), NoiseMode::sample, rng);
  ASSERT_EQ(h.levels.size(), 4u);
  const std::vector<std::size_t> sizes{16, 8, 4, 2}, channels{16, 32, 64, 128};
  for (std::size_t v = 0; v < 4; ++v) EXPECT_EQ(h.levels[v].shape(), (Shape{8, channels[v], sizes[v], sizes[v]}));
  EXPECT_EQ(net.level_sizes(32), sizes);
}

TEST(Embedding, ImagenetScaleLevelSizes) {
  EmbeddingColumn<float> net(EmbeddingConfig::imagenet_scale());
  EXPECT_EQ(net.level_sizes(224), (std::vector<std::size_t>{56, 28, 14, 7}));
}

TEST(Embedding, InputTooSmallForStagesThrows) {
  Rng rng(22);
  EmbeddingColumn<float> net(tiny_embedding());
  net.init(rng);
  EXPECT_NO_THROW(net.embed(random_images(1, 16, rng), NoiseMode::deterministic, rng));
  try {
    net.embed(random_images(1, 8, rng), NoiseMode::deterministic, rng);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("too small"), std::string::npos);
  }
}

TEST(Embedding, ConfigValidation) {
  EmbeddingConfig c = tiny_embedding();
  c.blocks_per_stage.pop_back();
  EXPECT_THROW(EmbeddingColumn<float>{c}, Error);
  c = tiny_embedding({16, 8, 32, 32});
  EXPECT_THROW(EmbeddingColumn<float>{c}, Error);
  c = tiny_embedding();
  c.stages = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Embedding, DeterministicModeIgnoresRng) {
  Rng rng(23);
  EmbeddingColumn<float> net(tiny_embedding());
  net.init(rng);
  const auto images = random_images(3, 16, rng);
  Rng a(1), b(999);
  const auto ha = net.embed(images, NoiseMode::deterministic, a);
  const auto hb = net.embed(images, NoiseMode::deterministic, b);
  for (std::size_t v = 0; v < 4; ++v) EXPECT_EQ(ha.levels[v], hb.levels[v]);
  EXPECT_EQ(a(), Rng(1)());
}

TEST(Embedding, SampleModeDrawsNoise) {
  Rng rng(24);
  EmbeddingColumn<float> net(tiny_embedding());
  net.init(rng);
  const auto images = random_images(2, 16, rng);
  Rng a(1), b(2), a2(1);
  const auto det = net.embed(images, NoiseMode::deterministic, a);
  const auto sa = net.embed(images, NoiseMode::sample, a2);
  const auto sb = net.embed(images, NoiseMode::sample, b);
  EXPECT_NE(sa.levels[0], det.levels[0]);
  EXPECT_NE(sa.levels[0], sb.levels[0]);
  Rng a3(1);
  EXPECT_EQ(net.embed(images, NoiseMode::sample, a3).levels[3], sa.levels[3]);
}

TEST(Embedding, NoiseDisabledSampleEqualsDeterministic) {
  Rng rng(25);
  auto config = tiny_embedding();
  config.noise_enabled = false;
  EmbeddingColumn<float> net(config);
  net.init(rng);
  const auto images = random_images(2, 16, rng);
  Rng a(1), b(2);
  EXPECT_EQ(net.embed(images, NoiseMode::sample, a).levels[3], net.embed(images, NoiseMode::deterministic, b).levels[3]);
}

TEST(Embedding, SamplesAreEmbeddedIndependently) {
  // One parameter set serves support and query alike; eval-mode outputs of a
  // batch equal the outputs of its members embedded one by one.
  Rng rng(26);
  EmbeddingColumn<float> net(tiny_embedding());
  net.init(rng);
  const auto images = random_images(3, 16, rng);
  const auto all = net.embed(images, NoiseMode::deterministic, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto one = net.embed(slice_rows(images, i, i + 1), NoiseMode::deterministic, rng);
    for (std::size_t v = 0; v < 4; ++v) {
      const auto expected = slice_rows(all.levels[v], i, i + 1);
      for (std::size_t j = 0; j < expected.size(); ++j) EXPECT_NEAR(one.levels[v][j], expected[j], 1e-5);
    }
  }
}

TEST(Embedding, ClassifierLogits) {
  Rng rng(27);
  auto config = tiny_embedding();
  EmbeddingColumn<float> headless(config);
  EXPECT_THROW(headless.classify_logits(Tensor<float>({4, 32, 1, 1})), Error);

  config.num_pretrain_classes = 10;
  EmbeddingColumn<float> net(config);
  net.init(rng);
  auto images = random_images(4, 16, rng);
  std::copy_n(images.data(), 3 * 16 * 16, images.data() + 3 * 16 * 16);  // image 1 := image 0
  const auto h = net.embed(images, NoiseMode::deterministic, rng);
  const auto logits = net.classify_logits(h.levels.back());
  ASSERT_EQ(logits.shape(), (Shape{4, 10}));
  for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(logits.at(0, j), logits.at(1, j));
}

TEST(Embedding, ClassifierPoolsBeforeTheAffineMap) {
  Rng rng(28);
  auto config = tiny_embedding();
  config.num_pretrain_classes = 3;
  EmbeddingColumn<double> net(config);
  net.init(rng);
  const auto constant = net.classify_logits(Tensor<double>({1, 32, 2, 2}, 0.7));
  const auto pooled = net.classify_logits(Tensor<double>({1, 32, 1, 1}, 0.7));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(constant[j], pooled[j]);
}

TEST(Embedding, ParameterNamesAreUniqueAndHeadWidthFollowsClasses) {
  Rng rng(29);
  auto config = EmbeddingConfig::imagenet_scale();
  config.num_pretrain_classes = 64;
  EmbeddingColumn<float> net(config);
  std::set<std::string> names;
  for (auto* p : net.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_TRUE(names.count("stem.conv.weight"));
  net.reset_classifier(80, rng);
  EXPECT_EQ(net.config().num_pretrain_classes, 80u);
  EXPECT_EQ(net.classify_logits(Tensor<float>({2, 512, 7, 7})).shape(), (Shape{2, 80}));
}

TEST(Embedding, LastBlockOfEachStageCarriesTheNoiseChannel) {
  auto config = tiny_embedding();
  config.num_pretrain_classes = 2;
  EmbeddingColumn<float> net(config);
  for (auto* p : net.parameters())
    if (p->name.find(".conv2.weight") != std::string::npos) {
      const std::size_t stage = static_cast<std::size_t>(p->name[std::string("embed.stage").size()] - '1');
      EXPECT_EQ(p->value.dim(0), config.channels_per_stage[stage] + 1) << p->name;
    }
}

TEST(Embedding, BackwardThroughSampledHierarchyMatchesFiniteDifferences) {
  Rng rng(30);
  auto config = tiny_embedding({3, 4, 4, 5});
  config.num_pretrain_classes = 3;
  config.se_reduction = 2;
  EmbeddingColumn<double> net(config);
  net.init(rng);
  const auto images = random_tensor({3, 3, 16, 16}, rng);
  const auto r = random_tensor({3, 3}, rng);
  auto loss = [&] {
    Rng noise(77);
    const auto h = net.embed(images, NoiseMode::sample, noise, true);
    return dcn::testing::dot(net.classify_logits(h.levels.back()), r);
  };
  loss();
  const auto params = net.parameters();
  zero_grad(params);
  net.backward_logits(r);

  std::uniform_int_distribution<std::size_t> pick;
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = pick(rng) % p->value.size();
      const double saved = p->value[i], h = 1e-6;
      p->value[i] = saved + h;
      const double up = loss();
      p->value[i] = saved - h;
      const double down = loss();
      p->value[i] = saved;
      worst = std::max(worst, relative_error(p->grad[i], (up - down) / (2 * h)));
      ++checked;
    }
  }
  EXPECT_GT(checked, 50u);
  EXPECT_LT(worst, 1e-4);
}
