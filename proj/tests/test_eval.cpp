#include <cmath>
#include <fstream>
#include <sstream>

#include "dcn/eval.hpp"
#include "easy_fixture.hpp"
#include "test_util.hpp"

using namespace dcn;
using dcn::testing::scratch_dir;

namespace {

const std::vector<double> kWeights{0.3, 0.4, 0.5, 1.0};

// Scores 1 for the true class at every level and 0 elsewhere.
ScoreTable oracle_scores(const Episode& ep) {
  ScoreTable t(ep.query.size(), ep.ways(), 4);
  for (std::size_t q = 0; q < t.queries; ++q)
    for (std::size_t v = 0; v < 4; ++v) t.at(q, ep.query_labels[q], v) = 1.0;
  return t;
}

// Uniform random scores, seeded from the episode's contents so reruns agree.
ScoreTable random_scores(const Episode& ep) {
  std::seed_seq seq(ep.query.begin(), ep.query.end());
  Rng rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ScoreTable t(ep.query.size(), ep.ways(), 4);
  for (auto& v : t.values) v = u(rng);
  return t;
}

struct Fixture {
  Dataset ds = make_synthetic_dataset(30, 20, 4, 0.2, 1);
  DatasetSplit split = split_classes(30, {0.2, 0.2, 0.6}, 1);
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Evaluate, OracleScoresArePerfect) {
  Fixture f;
  const auto r = evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 1, 15}, 50, kWeights, 3);
  EXPECT_EQ(r.mean_accuracy, 1.0);
  EXPECT_EQ(r.ci95, 0.0);
  for (std::size_t v = 1; v <= 4; ++v) EXPECT_EQ(per_module_accuracy(r, v), 1.0);
  EXPECT_EQ(r.episode_accuracies.size(), 50u);
}

TEST(Evaluate, RandomScoresSitAtChance) {
  Fixture f;
  const auto r = evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 1, 15}, 600, kWeights, 4);
  EXPECT_GE(r.mean_accuracy, 0.17);
  EXPECT_LE(r.mean_accuracy, 0.23);
}

TEST(Evaluate, MeanAndIntervalFollowTheEpisodeList) {
  Fixture f;
  const auto r = evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{4, 2, 3}, 37, kWeights, 5);
  double sum = 0.0;
  for (double a : r.episode_accuracies) sum += a;
  EXPECT_NEAR(r.mean_accuracy, sum / 37.0, 1e-12);
  EXPECT_NEAR(r.ci95, ci95(r.episode_accuracies), 0.0);
  EXPECT_GE(r.mean_accuracy, 0.0);
  EXPECT_LE(r.mean_accuracy, 1.0);
}

TEST(Evaluate, IntervalHandComputation) {
  const std::vector<double> xs{0.2, 0.4, 0.6, 0.8, 1.0};
  EXPECT_NEAR(ci95(xs), 0.2771858582251266, 1e-12);
  EXPECT_EQ(ci95(std::vector<double>{0.7, 0.7, 0.7}), 0.0);
  EXPECT_EQ(ci95(std::vector<double>{0.7}), 0.0);
}

TEST(Evaluate, DeterministicUnderSeed) {
  Fixture f;
  const EpisodeSpec spec{5, 1, 4};
  const auto a = evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, spec, 30, kWeights, 9);
  const auto b = evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, spec, 30, kWeights, 9);
  EXPECT_EQ(a.episode_accuracies, b.episode_accuracies);
  EXPECT_EQ(report_json(a).dump(), report_json(b).dump());
  const auto c = evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, spec, 30, kWeights, 10);
  EXPECT_NE(a.episode_accuracies, c.episode_accuracies);
}

TEST(Evaluate, Errors) {
  Fixture f;
  const EpisodeSpec spec{5, 1, 4};
  EXPECT_THROW(evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_test, spec, 0, kWeights, 1), Error);
  EXPECT_THROW(evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_val, EpisodeSpec{7, 1, 4}, 1, kWeights, 1),
               Error);
  EXPECT_THROW(evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 10, 11}, 1, kWeights, 1),
               Error);
  EXPECT_THROW(evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_test, spec, 1, std::vector<double>{1.0}, 1),
               Error);
}

TEST(CrossWay, SameWaysMatchesEvaluate) {
  Fixture f;
  const EpisodeSpec spec{5, 1, 3};
  const auto a = evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, spec, 20, kWeights, 2);
  const auto b = cross_way_evaluate(random_scores, 5, f.ds, f.split, SplitPart::meta_test, spec, 20, kWeights, 2);
  EXPECT_EQ(a.episode_accuracies, b.episode_accuracies);
  EXPECT_EQ(a.mean_accuracy, b.mean_accuracy);
  EXPECT_THROW(cross_way_evaluate(random_scores, 0, f.ds, f.split, SplitPart::meta_test, spec, 20, kWeights, 2),
               Error);
}

TEST(CrossWay, LeavesModelParametersUntouched) {
  auto s = dcn::testing::easy_setup();
  Rng rng(3);
  auto model = make_model(s.embedding, s.relation, rng);
  std::vector<std::uint64_t> before;
  for (auto* p : model.parameters()) before.push_back(checksum<Real>(p->value.values()));
  cross_way_evaluate(model_scorer(model, s.ds), 5, s.ds, s.split, SplitPart::meta_test, EpisodeSpec{20, 1, 2}, 2,
                     kWeights, 1);
  std::size_t i = 0;
  for (auto* p : model.parameters()) EXPECT_EQ(checksum<Real>(p->value.values()), before[i++]) << p->name;
}

TEST(CrossWay, FiveWayTrainedModelTransfersToTwentyWay) {
  auto s = dcn::testing::easy_setup();
  auto tm = run_pipeline(s.ds, s.split, s.embedding, s.relation, s.train);
  ASSERT_EQ(s.train.relation.episode.ways, 5u);
  const auto r = cross_way_evaluate(model_scorer(tm.model, s.ds), 5, s.ds, s.split, SplitPart::meta_test,
                                    EpisodeSpec{20, 1, 5}, 20, tm.model.relation.config().score_weights, 11);
  EXPECT_GT(r.mean_accuracy, 0.15);
  // Every single module trails the combination by at most 0.05.
  for (std::size_t v = 1; v <= 4; ++v) EXPECT_LE(per_module_accuracy(r, v), r.mean_accuracy + 0.05) << "module " << v;
}

TEST(PerModule, IndexGuards) {
  Fixture f;
  const auto r = evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{3, 1, 2}, 3, kWeights, 1);
  EXPECT_THROW(per_module_accuracy(r, 0), Error);
  EXPECT_THROW(per_module_accuracy(r, 5), Error);
  EXPECT_EQ(per_module_accuracy(oracle_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{3, 1, 2}, 3, kWeights,
                                1, 4),
            1.0);
}

TEST(PerModule, SingleModulePredictionIgnoresOtherLevels) {
  Fixture f;
  // Level 2 is perfect; every other level prefers class 0.
  auto scorer = [](const Episode& ep) {
    ScoreTable t(ep.query.size(), ep.ways(), 4);
    for (std::size_t q = 0; q < t.queries; ++q) {
      t.at(q, ep.query_labels[q], 1) = 1.0;
      for (std::size_t v : {0u, 2u, 3u}) t.at(q, 0, v) = 1.0;
    }
    return t;
  };
  const auto r = evaluate(scorer, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 1, 3}, 10, kWeights, 1);
  EXPECT_EQ(per_module_accuracy(r, 2), 1.0);
  EXPECT_NEAR(per_module_accuracy(r, 1), 0.2, 1e-12);
  EXPECT_NEAR(r.mean_accuracy, 0.2, 1e-12);
}

TEST(Spearman, Examples) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6, 7}, b{2, 1, 4, 3, 7, 6, 5};
  EXPECT_DOUBLE_EQ(spearman(a, a), 1.0);
  std::vector<double> rev(a.rbegin(), a.rend());
  EXPECT_DOUBLE_EQ(spearman(a, rev), -1.0);
  // Frozen brute-force rank-Pearson oracles.
  EXPECT_NEAR(spearman(a, b), 0.7857142857142857, 1e-12);
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 2, 3, 5}, std::vector<double>{5, 3, 4, 4, 1}), -0.7631578947368421,
              1e-12);
}

TEST(Spearman, AverageRanksForTies) {
  EXPECT_EQ(average_ranks(std::vector<double>{3.0, 1.0, 3.0, 2.0}), (std::vector<double>{3.5, 1.0, 3.5, 2.0}));
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), Error);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), Error);
  EXPECT_THROW(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), Error);
}

TEST(Spearman, InvariantUnderMonotoneTransformsAndBounded) {
  Rng rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(2, 60);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = len(rng);
    std::vector<double> a(k), b(k);
    for (auto& x : a) x = std::round(n(rng) * 4.0) / 4.0;  // quantised to produce ties
    for (auto& x : b) x = n(rng);
    double rho = 0.0;
    try {
      rho = spearman(a, b);
    } catch (const Error&) {
      continue;  // constant draw
    }
    EXPECT_GE(rho, -1.0);
    EXPECT_LE(rho, 1.0);
    std::vector<double> ta(k), tb(k);
    for (std::size_t i = 0; i < k; ++i) {
      ta[i] = std::exp(a[i]) + 3.0;
      tb[i] = b[i] * b[i] * b[i] - 10.0;
    }
    EXPECT_NEAR(spearman(ta, tb), rho, 1e-12);
  }
}

TEST(Correlation, MatrixShapeDiagonalAndSymmetry) {
  Fixture f;
  const auto m = module_correlation_matrix(random_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 1, 3}, 4,
                                           500, 1);
  EXPECT_EQ(m.modules, 4u);
  EXPECT_EQ(m.sample_size, 500u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(m.at(i, i), 1.0);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(m.at(i, j), m.at(j, i));
      EXPECT_GE(m.at(i, j), -1.0);
      EXPECT_LE(m.at(i, j), 1.0);
    }
  }
  const auto csv = correlation_csv(m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), ",RM1,RM2,RM3,RM4");
  EXPECT_THROW(module_correlation_matrix(random_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 1, 3}, 4,
                                         1, 1),
               Error);
}

TEST(Scatter, OneRowPerClassAndOracleAtOneOne) {
  Fixture f;
  const auto r = evaluate(oracle_scores, f.ds, f.split, SplitPart::meta_test, EpisodeSpec{5, 1, 3}, 60, kWeights, 1);
  const auto rows = per_class_scatter(r, f.ds, f.split, 1, 4);
  EXPECT_EQ(rows.size(), f.split.meta_test.size());
  for (const auto& row : rows) {
    ASSERT_GT(row.queries, 0u) << row.name;
    EXPECT_EQ(row.accuracy_a, 1.0);
    EXPECT_EQ(row.accuracy_b, 1.0);
  }
  const auto csv = scatter_csv(rows, 1, 4);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), rows.size() + 1);
  EXPECT_EQ(csv, scatter_csv(per_class_scatter(r, f.ds, f.split, 1, 4), 1, 4));
  EXPECT_NE(scatter_svg(rows, 1, 4).find("<svg"), std::string::npos);
  EXPECT_THROW(per_class_scatter(r, f.ds, f.split, 0, 4), Error);
  EXPECT_THROW(per_class_scatter(r, f.ds, f.split, 1, 5), Error);
}

TEST(Report, FilesAreByteIdenticalAcrossRuns) {
  Fixture f;
  const EpisodeSpec spec{5, 1, 3};
  const auto a = scratch_dir("report_a"), b = scratch_dir("report_b");
  write_eval_report(evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, spec, 12, kWeights, 4), a);
  write_eval_report(evaluate(random_scores, f.ds, f.split, SplitPart::meta_test, spec, 12, kWeights, 4), b);
  for (const char* name : {"report.jsonl", "episodes.csv"}) {
    const auto text = read_file(a / name);
    EXPECT_FALSE(text.empty()) << name;
    EXPECT_EQ(text, read_file(b / name)) << name;
  }
  const auto json = nlohmann::json::parse(read_file(a / "report.jsonl"));
  EXPECT_EQ(json["num_episodes"], 12);
  const auto episodes = read_file(a / "episodes.csv");
  EXPECT_EQ(episodes.substr(0, episodes.find('\n')), "episode,accuracy,rm1,rm2,rm3,rm4");
  EXPECT_EQ(static_cast<std::size_t>(std::count(episodes.begin(), episodes.end(), '\n')), 13u);
}
