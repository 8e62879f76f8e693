#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dcn/cli.hpp"

using namespace dcn;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s  %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

template <typename F>
void criterion(int id, const std::string& name, F&& body) {
  try {
    std::string detail;
    const bool pass = body(detail);
    report(id, name, pass, detail);
  } catch (const std::exception& e) {
    report(id, name, false, std::string("threw ") + e.what());
  }
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool episode_protocol(std::string& detail) {
  const auto ds = make_synthetic_dataset(30, 20, 4, 0.2, 5);
  const auto split = split_classes(30, {0.5, 0.25, 0.25}, 5);
  Rng gen(2024);
  auto uniform = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(gen); };
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto part = static_cast<SplitPart>(uniform(0, 2));
    const auto& classes = split.classes(part);
    EpisodeSpec s{uniform(2, classes.size()), uniform(1, 5), 0};
    s.queries = uniform(1, 20 - s.shots);
    Rng rng(uniform(0, 1u << 30));
    const Episode ep = sample_episode(ds, classes, s, rng, trial % 2 == 0);

    bool ok = ep.ways() == s.ways && ep.support.size() == s.support_size() && ep.query.size() == s.query_size() &&
              ep.support_labels.size() == ep.support.size() && ep.query_labels.size() == ep.query.size();
    const std::set<std::size_t> distinct_classes(ep.classes.begin(), ep.classes.end());
    ok = ok && distinct_classes.size() == ep.ways();
    for (auto c : ep.classes) ok = ok && std::find(classes.begin(), classes.end(), c) != classes.end();
    std::set<std::size_t> images;
    std::vector<std::size_t> support_count(ep.ways(), 0), query_count(ep.ways(), 0);
    auto check = [&](const std::vector<std::size_t>& ids, const std::vector<std::size_t>& labels,
                     std::vector<std::size_t>& counts) {
      for (std::size_t i = 0; ok && i < ids.size(); ++i) {
        ok = labels[i] < ep.ways() && images.insert(ids[i]).second &&
             ds.images.at(ids[i]).label == ep.classes[labels[i]];
        if (ok) ++counts[labels[i]];
      }
    };
    check(ep.support, ep.support_labels, support_count);
    check(ep.query, ep.query_labels, query_count);
    for (std::size_t c = 0; ok && c < ep.ways(); ++c) ok = support_count[c] == s.shots && query_count[c] == s.queries;
    violations += !ok;
  }
  detail = fmt("%zu violations in 1000 random episodes", violations);
  return violations == 0;
}

bool shape_conformance(std::string& detail) {
  auto ec = EmbeddingConfig::imagenet_scale();
  ec.num_pretrain_classes = 64;
  Rng rng(3);
  Model model = make_model(ec, RelationConfig{}, rng);
  Tensor<Real> image({1, 3, 224, 224});
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& v : image.values()) v = static_cast<Real>(normal(rng));
  const auto features = model.embedding.embed(image, NoiseMode::deterministic, rng, false);
  const auto protos = class_prototypes(features, std::vector<std::size_t>{0}, 1);
  model.relation.forward(features, protos, false);

  std::vector<std::size_t> embed_sizes, relation_sizes;
  for (const auto& level : features.levels) embed_sizes.push_back(level.dim(2));
  for (std::size_t v = 0; v < model.relation.config().stages; ++v)
    relation_sizes.push_back(model.relation.last_output_shape(v)[2]);
  auto join = [](const std::vector<std::size_t>& xs) {
    std::string s;
    for (auto x : xs) s += (s.empty() ? "" : ",") + std::to_string(x);
    return "[" + s + "]";
  };
  detail = "embedding " + join(embed_sizes) + ", relation " + join(relation_sizes);
  return embed_sizes == std::vector<std::size_t>{56, 28, 14, 7} && relation_sizes == std::vector<std::size_t>{28, 14, 7, 7};
}

bool reparameterization(std::string& detail) {
  Rng rng(8);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = normal(rng);
    return t;
  };
  Tensor<double> mean = random({2, 3, 4, 4}), pre = random({2, 1, 4, 4});
  const Tensor<double> eps = random({2, 1, 4, 4}), r = random({2, 3, 4, 4});
  auto loss = [&] {
    const auto y = sample_stochastic(StochasticFeature<double>{mean, std_from_preactivation(pre)}, eps);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  const StochasticFeature<double> sf{mean, std_from_preactivation(pre)};
  const auto g = sample_stochastic_backward(sf, eps, r);
  const auto d_pre = std_preactivation_backward(sf.std, g.std);

  double worst = 0.0;
  const double h = 1e-6;
  auto probe = [&](Tensor<double>& x, const Tensor<double>& analytic) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = loss();
      x[i] = saved - h;
      const double down = loss();
      x[i] = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max({1e-6, std::abs(analytic[i]), std::abs(numeric)}));
    }
  };
  probe(mean, g.mean);
  probe(pre, d_pre);

  const auto zero = sample_stochastic(sf, Tensor<double>({2, 1, 4, 4}));
  const bool exact = zero == mean;
  detail = fmt("max relative error %.2e, eps=0 reproduces mean %s", worst, exact ? "bit-exactly" : "NOT exactly");
  return worst <= 1e-5 && exact;
}

bool loss_oracle(std::string& detail) {
  const std::vector<double> weights{0.3, 0.4, 0.5, 1.0};
  Tensor<double> scores({1, 4});
  for (auto& v : scores.values()) v = 0.5;
  const std::vector<int> label{1};
  const auto l = deep_supervised_loss(scores, std::span<const int>(label), std::span<const double>(weights), true);
  const double oracle = 2.2 * std::numbers::ln2;
  const double loss_error = std::abs(l.value - oracle);

  // BCE of sigmoid(z) against finite differences in the pre-activation.
  Rng rng(4);
  std::normal_distribution<double> normal(0.0, 2.0);
  const std::size_t pairs = 6;
  Tensor<double> pre({pairs, 4});
  for (auto& v : pre.values()) v = normal(rng);
  std::vector<int> labels{1, 0, 0, 1, 0, 1};
  auto value = [&] {
    Tensor<double> s(pre.shape());
    for (std::size_t i = 0; i < pre.size(); ++i) s[i] = sigmoid(pre[i]);
    return deep_supervised_loss(s, std::span<const int>(labels), std::span<const double>(weights), true);
  };
  const auto analytic = value().grad;
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const double saved = pre[i];
    pre[i] = saved + h;
    const double up = value().value;
    pre[i] = saved - h;
    const double down = value().value;
    pre[i] = saved;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max({1e-6, std::abs(analytic[i]), std::abs(numeric)}));
  }
  detail = fmt("loss %.12f vs 2.2 ln 2 = %.12f (|diff| %.1e), BCE gradient error %.2e", l.value, oracle, loss_error, worst);
  return loss_error <= 1e-9 && worst <= 1e-5;
}

bool freeze_contract(std::string& detail) {
  auto ds = make_synthetic_dataset(20, 10, 16, 0.1, 4);
  const auto split = split_classes(20, {0.5, 0.25, 0.25}, 4);
  center_on_classes(ds, split.meta_train);
  EmbeddingConfig ec;
  ec.channels_per_stage = {4, 8, 8, 8};
  ec.blocks_per_stage = {1, 1, 1, 1};
  RelationConfig rc;
  rc.blocks_per_stage = 1;
  TrainConfig tc;
  tc.pretrain.epochs = 2;
  tc.relation.episodes = 20;
  tc.relation.eval_every = 5;
  tc.relation.val_episodes = 2;
  tc.relation.val_queries = 2;
  tc.relation.episode.queries = 2;

  std::vector<std::uint64_t> before, after;
  PipelineHooks hooks;
  hooks.checkpoint = [&](const std::string& name, TrainedModel& tm) {
    auto& target = name == "pretrain" ? before : after;
    if (name == "pretrain" || name == "relation")
      for (auto* p : tm.model.embedding.parameters()) target.push_back(checksum<Real>(p->value.values()));
  };
  const auto a = run_pipeline(ds, split, ec, rc, tc, hooks);
  const auto b = run_pipeline(ds, split, ec, rc, tc);
  const bool frozen = !before.empty() && before == after;
  const bool same_history = !a.history.empty() && a.history == b.history;
  auto pa = const_cast<Model&>(a.model).parameters(), pb = const_cast<Model&>(b.model).parameters();
  bool same_weights = pa.size() == pb.size();
  for (std::size_t i = 0; same_weights && i < pa.size(); ++i) same_weights = pa[i]->value == pb[i]->value;
  detail = fmt("embedding %s during relation training (%zu tensors), reruns %s histories (%zu records) and %s weights",
               frozen ? "bit-identical" : "CHANGED", before.size(), same_history ? "match" : "DIFFER in",
               a.history.size(), same_weights ? "identical" : "different");
  return frozen && same_history && same_weights;
}

const char* kDeskConfig =
    "[dataset]\nclasses = 20\nper_class = 40\nimage_size = 32\ndifficulty = 0.3\nsplit = 0.25,0.25,0.5\nseed = 7\n"
    "[embedding]\nchannels = 16,32,64,64\nblocks = 1,1,1,1\nstem = false\n"
    "[relation]\nblocks = 1\n"
    "[train]\nseed = 1\npretrain_epochs = 20\npretrain_lr_every = 13\nepisodes = 600\nrelation_lr_every = 400\n"
    "eval_every = 100\nval_episodes = 20\npatience = 100\n"
    "[eval]\nways = 5\nshots = 1\nqueries = 15\nepisodes = 100\nseed = 11\n"
    "[ablation]\nretrain = true\n";

struct DeskRun {
  std::filesystem::path dir;
  double train_seconds = 0.0;
  std::optional<LoadedModel> loaded;
  Dataset ds;
  DatasetSplit split;
  std::optional<EvalReport> report;
  double total_seconds = 0.0;
};

DeskRun desk_run() {
  DeskRun run;
  run.dir = std::filesystem::temp_directory_path() / "dcn_acceptance";
  std::filesystem::remove_all(run.dir);
  std::filesystem::create_directories(run.dir);
  {
    std::ofstream(run.dir / "desk.ini", std::ios::binary) << kDeskConfig;
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream out, err;
  const int code = run_cli({"train", "--config", (run.dir / "desk.ini").string(), "--out", (run.dir / "run").string()},
                           out, err);
  if (code != 0) throw Error("desk training failed: " + err.str());
  run.train_seconds = seconds_since(t0);
  std::printf("      desk run trained in %.0f s\n", run.train_seconds);

  run.loaded.emplace(load_model(run.dir / "run" / "final.ckpt"));
  const auto config = parse_experiment_config(run.loaded->checkpoint.texts.at("experiment"));
  run.ds = build_dataset(config.dataset);
  apply_channel_mean(run.ds, run.loaded->channel_mean);
  run.split = parse_split_manifest(run.loaded->checkpoint.texts.at("split"), run.ds.class_names);
  run.report = evaluate(model_scorer(run.loaded->model, run.ds), run.ds, run.split, SplitPart::meta_test,
                        config.eval.episode, config.eval.episodes, run.loaded->model.relation.config().score_weights,
                        config.eval.seed);
  run.total_seconds = seconds_since(t0);
  return run;
}

bool spearman_oracle(std::string& detail, const std::optional<CorrelationMatrix>& matrix) {
  // Brute force: average ranks by counting, then Pearson on the ranks.
  auto ranks = [](const std::vector<double>& xs) {
    std::vector<double> r(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double less = 0, equal = 0;
      for (double y : xs) {
        less += y < xs[i];
        equal += y == xs[i];
      }
      r[i] = less + (equal + 1) / 2.0;
    }
    return r;
  };
  auto pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
  };
  Rng rng(99);
  std::uniform_int_distribution<int> digit(0, 9);
  double worst = 0.0;
  std::size_t done = 0;
  while (done < 20) {
    std::vector<double> a(7), b(7);
    for (auto& x : a) x = digit(rng);
    for (auto& x : b) x = digit(rng);
    if (std::all_of(a.begin(), a.end(), [&](double x) { return x == a[0]; }) ||
        std::all_of(b.begin(), b.end(), [&](double x) { return x == b[0]; }))
      continue;
    worst = std::max(worst, std::abs(spearman(a, b) - pearson(ranks(a), ranks(b))));
    ++done;
  }
  const std::vector<double> xs{3, 1, 4, 1, 5, 9, 2}, rev{-3, -1, -4, -1, -5, -9, -2};
  const double same = spearman(xs, xs), reversed = spearman(xs, rev);
  bool diagonal = matrix.has_value();
  if (matrix)
    for (std::size_t i = 0; i < matrix->modules; ++i) diagonal = diagonal && matrix->at(i, i) == 1.0;
  detail = fmt("max |spearman - brute force| %.1e over 20 lists, identical %.3f, reversed %.3f, diagonal %s", worst,
               same, reversed, diagonal ? "all 1" : "NOT 1");
  return worst <= 1e-12 && same == 1.0 && reversed == -1.0 && diagonal;
}

ScoreTable oracle_scores(const Episode& ep) {
  ScoreTable t(ep.query.size(), ep.ways(), 4);
  for (std::size_t q = 0; q < t.queries; ++q)
    for (std::size_t v = 0; v < 4; ++v) t.at(q, ep.query_labels[q], v) = 1.0;
  return t;
}

bool statistics(std::string& detail) {
  const std::vector<double> weights{0.3, 0.4, 0.5, 1.0};
  auto ds = make_synthetic_dataset(20, 20, 16, 0.3, 12);
  const auto split = split_classes(20, {0.25, 0.25, 0.5}, 12);
  center_on_classes(ds, split.meta_train);
  const auto oracle = evaluate(oracle_scores, ds, split, SplitPart::meta_test, EpisodeSpec{5, 1, 15}, 100, weights, 1);

  auto ec = EmbeddingConfig{};
  ec.channels_per_stage = {8, 16, 32, 32};
  ec.blocks_per_stage = {1, 1, 1, 1};
  ec.num_pretrain_classes = 5;
  RelationConfig rc;
  rc.blocks_per_stage = 1;
  Rng rng(13);
  Model untrained = make_model(ec, rc, rng);
  const auto chance =
      evaluate(model_scorer(untrained, ds), ds, split, SplitPart::meta_test, EpisodeSpec{5, 1, 15}, 600, weights, 2);

  const std::vector<double> xs{0.2, 0.4, 0.6, 0.8, 1.0};
  // Sample std of xs is sqrt(0.1); 1.96 * sqrt(0.1) / sqrt(5).
  const double hand = 1.96 * std::sqrt(0.1) / std::sqrt(5.0);
  const double ci_error = std::abs(ci95(xs) - hand);
  detail = fmt("oracle %.3f with ci95 %.3g, untrained 5-way over 600 episodes %.4f, ci95 hand error %.1e",
               oracle.mean_accuracy, oracle.ci95, chance.mean_accuracy, ci_error);
  return oracle.mean_accuracy == 1.0 && oracle.ci95 == 0.0 && chance.mean_accuracy >= 0.17 &&
         chance.mean_accuracy <= 0.23 && ci_error <= 1e-12;
}

bool artifact_determinism(std::string& detail, const std::filesystem::path& checkpoint,
                          const std::filesystem::path& root) {
  std::vector<std::string> common{"eval", "--checkpoint", checkpoint.string(), "--episodes", "20", "--seed", "5",
                                  "--analyses", "modules,correlation,scatter", "--pairs", "300", "--force"};
  for (const char* name : {"a", "b"}) {
    auto args = common;
    args.insert(args.end(), {"--out", (root / name).string()});
    std::ostringstream out, err;
    if (run_cli(args, out, err) != 0) throw Error("eval failed: " + err.str());
  }
  std::size_t files = 0, identical = 0;
  for (const auto& e : std::filesystem::directory_iterator(root / "a")) {
    ++files;
    identical += slurp(e.path()) == slurp(root / "b" / e.path().filename());
  }
  detail = fmt("%zu of %zu report files byte-identical across two runs", identical, files);
  return files >= 5 && identical == files;
}

}  // namespace

int main() {
  criterion(1, "episode protocol", episode_protocol);
  criterion(2, "shape conformance", shape_conformance);
  criterion(3, "reparameterization gradients", reparameterization);
  criterion(4, "loss oracle", loss_oracle);
  criterion(5, "freeze contract", freeze_contract);

  std::optional<DeskRun> run;
  std::optional<CorrelationMatrix> matrix;
  criterion(6, "end-to-end desk run", [&](std::string& detail) {
    run.emplace(desk_run());
    const auto& r = *run->report;
    detail = fmt("5-way 1-shot %.4f +- %.4f over %zu episodes, %.0f s total (limit 0.90, 1200 s)", r.mean_accuracy,
                 r.ci95, r.num_episodes, run->total_seconds);
    return r.mean_accuracy >= 0.90 && run->total_seconds <= 1200.0;
  });
  criterion(7, "ablation sanity", [&](std::string& detail) {
    if (!run) throw Error("no desk run");
    const auto& r = *run->report;
    const double best = *std::max_element(r.per_module_accuracy.begin(), r.per_module_accuracy.end());
    const double worst = *std::min_element(r.per_module_accuracy.begin(), r.per_module_accuracy.end());
    detail = "modules";
    for (double a : r.per_module_accuracy) detail += fmt(" %.4f", a);
    detail += fmt(", combined %.4f (need modules > 0.40, combined >= %.4f)", r.mean_accuracy, best - 0.05);
    return worst > 0.40 && r.mean_accuracy >= best - 0.05;
  });
  criterion(8, "cross-way transfer", [&](std::string& detail) {
    if (!run) throw Error("no desk run");
    const auto r = cross_way_evaluate(model_scorer(run->loaded->model, run->ds), 5, run->ds, run->split,
                                      SplitPart::meta_test, EpisodeSpec{10, 1, 15}, 100,
                                      run->loaded->model.relation.config().score_weights, 11);
    detail = fmt("10-way 1-shot %.4f +- %.4f (limit 0.25)", r.mean_accuracy, r.ci95);
    return r.mean_accuracy >= 0.25;
  });
  if (run) {
    try {
      matrix = module_correlation_matrix(model_scorer(run->loaded->model, run->ds), run->ds, run->split,
                                         SplitPart::meta_test, EpisodeSpec{5, 1, 15}, 4, 2000, 11);
      std::printf("      module score Spearman correlation over %zu pairs:\n", matrix->sample_size);
      for (std::size_t i = 0; i < matrix->modules; ++i) {
        std::printf("        RM%zu", i + 1);
        for (std::size_t j = 0; j < matrix->modules; ++j) std::printf(" %6.3f", matrix->at(i, j));
        std::printf("\n");
      }
    } catch (const std::exception& e) {
      std::printf("      correlation matrix failed: %s\n", e.what());
    }
  }
  criterion(9, "spearman oracle", [&](std::string& detail) { return spearman_oracle(detail, matrix); });
  criterion(10, "statistics", statistics);
  criterion(11, "artifact determinism", [&](std::string& detail) {
    if (!run) throw Error("no desk run");
    return artifact_determinism(detail, run->dir / "run" / "final.ckpt", run->dir / "eval");
  });

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
