#pragma once

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "dcn/checkpoint.hpp"
#include "dcn/data/image_io.hpp"

namespace dcn {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// Default parent of run directories: $DCN_RUN_ROOT, else ./runs.
inline std::filesystem::path run_root() {
  const char* env = std::getenv("DCN_RUN_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

/// Run directories are append-only: an existing non-empty directory is refused unless forced.
inline void prepare_output_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError({"--out: " + dir.string() + " is not a directory"});
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw ConfigError({"--out: " + dir.string() + " already exists (pass --force to write into it)"});
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
}

/// Loads or generates the dataset described by `c`.
inline Dataset build_dataset(const DatasetConfig& c) {
  if (c.source == DataSource::directory) return load_directory_dataset(c.path, c.image_size);
  return make_synthetic_dataset(c.classes, c.per_class, c.image_size, c.difficulty, c.seed);
}

inline std::string history_json(const HistoryRecord& r) {
  nlohmann::json j = {{"phase", r.phase}, {"step", r.step}, {"loss", r.loss}, {"lr", r.lr}};
  if (r.val_acc) j["val_acc"] = *r.val_acc;
  if (r.train_acc) j["train_acc"] = *r.train_acc;
  return j.dump();
}

struct SynthArgs {
  std::size_t classes = 100, per_class = 40, size = 32;
  double difficulty = 0.3;
  std::uint64_t seed = 1;
  std::string out;
  bool force = false;
};

inline int cmd_synth_data(const SynthArgs& a, std::ostream& out) {
  if (a.classes < 2) throw ConfigError({"--classes: need at least 2 classes"});
  if (a.per_class < 2) throw ConfigError({"--per-class: must be >= 2"});
  if (a.size < 1) throw ConfigError({"--size: must be >= 1"});
  if (a.difficulty < 0) throw ConfigError({"--difficulty: must be >= 0"});
  const std::filesystem::path dir = a.out.empty() ? run_root() / "synthetic" : std::filesystem::path(a.out);
  prepare_output_dir(dir, a.force);
  const auto ds = make_synthetic_dataset(a.classes, a.per_class, a.size, a.difficulty, a.seed);
  write_dataset_directory(ds, dir);
  out << "wrote " << ds.images.size() << " images in " << ds.num_classes() << " class folders to " << dir.string()
      << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool dump_config = false;
};

inline std::string meta_ini(const std::string& phase, const TrainedModel& tm) {
  std::string s = "[run]\nphase = " + phase + "\nbest_episode_count = " + std::to_string(tm.best_episode_count) + "\n";
  if (tm.best_val_accuracy) s += "best_val_accuracy = " + format_number(*tm.best_val_accuracy) + "\n";
  return s;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  ExperimentConfig config = a.config.empty() ? parse_experiment_config("") : load_experiment_config(a.config);
  if (a.seed) config.train.seed = *a.seed;
  if (a.dump_config) {
    out << to_ini(config, true);
    return kExitOk;
  }
  const std::filesystem::path dir =
      a.out.empty() ? run_root() / ("train-seed" + std::to_string(config.train.seed)) : std::filesystem::path(a.out);
  prepare_output_dir(dir, a.force);

  const std::string resolved = to_ini(config);
  write_text(dir / "config.resolved.ini", resolved);
  Dataset ds = build_dataset(config.dataset);
  const auto split = split_classes(ds.num_classes(), config.dataset.split, config.dataset.seed);
  std::vector<std::string> problems;
  config.check_split_ways(split, problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  center_on_classes(ds, split.meta_train);
  const std::string manifest = split_manifest(split, ds.class_names);
  write_text(dir / "split.txt", manifest);

  std::ofstream log(dir / "train.log", std::ios::binary);
  if (!log) throw Error("cannot write " + (dir / "train.log").string());
  PipelineHooks hooks;
  hooks.log = [&](const HistoryRecord& r) {
    log << history_json(r) << "\n";
    log.flush();
    if (r.val_acc) out << r.phase << " episode " << r.step << ": val accuracy " << *r.val_acc << "\n";
    if (r.train_acc) out << r.phase << " epoch " << r.step << ": train accuracy " << *r.train_acc << "\n";
  };
  hooks.checkpoint = [&](const std::string& name, TrainedModel& tm) {
    write_checkpoint_file(dir / (name + ".ckpt"),
                          make_checkpoint(tm.model, tm.channel_mean, resolved, manifest, meta_ini(name, tm)));
    out << "wrote " << (dir / (name + ".ckpt")).string() << "\n";
  };
  const auto tm = run_pipeline(ds, split, config.embedding, config.relation, config.train, hooks);
  out << "best episode count " << tm.best_episode_count;
  if (tm.best_val_accuracy) out << ", best val accuracy " << *tm.best_val_accuracy;
  out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::optional<std::size_t> ways, shots, queries, episodes;
  std::optional<std::uint64_t> seed;
  std::string part = "test";
  std::vector<std::string> analyses;
  std::size_t pairs = 10000;
  std::vector<std::size_t> scatter_modules;
  std::string out;
  bool force = false;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.episodes && *a.episodes == 0) throw ConfigError({"--episodes: must be >= 1"});
  for (const auto& name : a.analyses)
    if (name != "modules" && name != "correlation" && name != "scatter")
      throw ConfigError({"--analyses: unknown analysis '" + name + "' (modules|correlation|scatter)"});
  const SplitPart part = [&] {
    try {
      return parse_split_part(a.part);
    } catch (const Error& e) {
      throw ConfigError({std::string("--part: ") + e.what()});
    }
  }();

  auto loaded = load_model(a.checkpoint);
  ExperimentConfig config = parse_experiment_config(loaded.checkpoint.texts.at("experiment"));
  EvalConfig ev = a.config.empty() ? config.eval : load_experiment_config(a.config).eval;
  if (a.ways) ev.episode.ways = *a.ways;
  if (a.shots) ev.episode.shots = *a.shots;
  if (a.queries) ev.episode.queries = *a.queries;
  if (a.episodes) ev.episodes = *a.episodes;
  if (a.seed) ev.seed = *a.seed;
  try {
    ev.episode.validate(false);
  } catch (const Error& e) {
    throw ConfigError({e.what()});
  }
  if (!a.data.empty()) {
    config.dataset.source = DataSource::directory;
    config.dataset.path = a.data;
  }

  Dataset ds = build_dataset(config.dataset);
  apply_channel_mean(ds, loaded.channel_mean);
  const auto split = parse_split_manifest(loaded.checkpoint.texts.at("split"), ds.class_names);
  if (split.classes(part).size() < ev.episode.ways)
    throw ConfigError({std::string(to_string(part)) + " has " + std::to_string(split.classes(part).size()) +
                       " classes, too few for " + std::to_string(ev.episode.ways) + "-way episodes"});
  for (auto c : split.classes(part))
    if (ds.by_class[c].size() < ev.episode.shots + ev.episode.queries)
      throw ConfigError({"class " + ds.class_names[c] + " has " + std::to_string(ds.by_class[c].size()) +
                         " images, episodes need " + std::to_string(ev.episode.shots + ev.episode.queries)});

  const std::filesystem::path dir =
      a.out.empty() ? std::filesystem::path(a.checkpoint).parent_path() /
                          ("eval-" + std::to_string(ev.episode.ways) + "way-" + std::to_string(ev.episode.shots) +
                           "shot-seed" + std::to_string(ev.seed))
                    : std::filesystem::path(a.out);
  const auto& weights = loaded.model.relation.config().score_weights;
  const std::size_t levels = weights.size();
  std::vector<std::size_t> modules = a.scatter_modules.empty() ? std::vector<std::size_t>{1, levels} : a.scatter_modules;
  if (modules.size() != 2 || modules[0] < 1 || modules[1] < 1 || modules[0] > levels || modules[1] > levels)
    throw ConfigError({"--scatter-modules: need two module indices in 1.." + std::to_string(levels)});
  prepare_output_dir(dir, a.force);

  const auto scorer = model_scorer(loaded.model, ds);
  const auto report = evaluate(scorer, ds, split, part, ev.episode, ev.episodes, weights, ev.seed);
  write_eval_report(report, dir);
  char line[128];
  std::snprintf(line, sizeof line, "%zu-way %zu-shot accuracy: %.4f ± %.4f (%zu episodes)\n", ev.episode.ways,
                ev.episode.shots, report.mean_accuracy, report.ci95, report.num_episodes);
  out << line;

  auto wants = [&](const char* name) { return std::find(a.analyses.begin(), a.analyses.end(), name) != a.analyses.end(); };
  if (wants("modules")) {
    for (std::size_t v = 0; v < levels; ++v) {
      std::snprintf(line, sizeof line, "  RM%zu alone: %.4f ± %.4f\n", v + 1, report.per_module_accuracy[v],
                    report.per_module_ci95[v]);
      out << line;
    }
  }
  if (wants("correlation")) {
    const auto m = module_correlation_matrix(scorer, ds, split, part, ev.episode, levels, a.pairs, ev.seed);
    write_text(dir / "correlation.csv", correlation_csv(m));
    out << "  module score correlation written to " << (dir / "correlation.csv").string() << "\n";
  }
  if (wants("scatter")) {
    const auto rows = per_class_scatter(report, ds, split, modules[0], modules[1]);
    write_text(dir / "scatter.csv", scatter_csv(rows, modules[0], modules[1]));
    write_text(dir / "scatter.svg", scatter_svg(rows, modules[0], modules[1]));
    out << "  per-class scatter written to " << (dir / "scatter.csv").string() << "\n";
  }
  return kExitOk;
}

/// Entry point shared by the `dcn` binary and the tests.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Deeply supervised few-shot relation networks"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "write a synthetic class-per-folder image dataset");
  s->add_option("--classes", synth.classes, "number of classes")->capture_default_str();
  s->add_option("--per-class", synth.per_class, "images per class")->capture_default_str();
  s->add_option("--size", synth.size, "image side length in pixels")->capture_default_str();
  s->add_option("--difficulty", synth.difficulty, "within-class jitter")->capture_default_str();
  s->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  s->add_option("--out", synth.out, "output directory (default $DCN_RUN_ROOT/synthetic)");
  s->add_flag("--force", synth.force, "write into an existing directory");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "pretrain, relation-train and retrain a model");
  t->add_option("--config", train.config, "experiment config (INI); defaults when omitted");
  t->add_option("--seed", train.seed, "override [train] seed");
  t->add_option("--out", train.out, "run directory (default $DCN_RUN_ROOT/train-seed<seed>)");
  t->add_flag("--force", train.force, "write into an existing run directory");
  t->add_flag("--dump-config", train.dump_config, "print the documented resolved config and exit");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "episodic evaluation of a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  e->add_option("--config", eval.config, "config whose [eval] section replaces the checkpoint's");
  e->add_option("--data", eval.data, "dataset directory overriding the one in the checkpoint");
  e->add_option("--ways", eval.ways, "classes per episode");
  e->add_option("--shots", eval.shots, "support images per class");
  e->add_option("--queries", eval.queries, "query images per class");
  e->add_option("--episodes", eval.episodes, "number of episodes");
  e->add_option("--seed", eval.seed, "episode sampling seed");
  e->add_option("--part", eval.part, "train | val | test")->capture_default_str();
  e->add_option("--analyses", eval.analyses, "modules, correlation, scatter")->delimiter(',');
  e->add_option("--pairs", eval.pairs, "pairs for the correlation matrix")->capture_default_str();
  e->add_option("--scatter-modules", eval.scatter_modules, "two 1-based modules for the scatter")->delimiter(',');
  e->add_option("--out", eval.out, "report directory (default next to the checkpoint)");
  e->add_flag("--force", eval.force, "write into an existing report directory");

  std::vector<const char*> argv{"dcn"};
  for (const auto& arg : args) argv.push_back(arg.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitValidation;
  }

  try {
    if (s->parsed()) return cmd_synth_data(synth, out);
    if (t->parsed()) return cmd_train(train, out);
    return cmd_eval(eval, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
}

inline int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace dcn
