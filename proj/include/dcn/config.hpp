#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "dcn/eval.hpp"
#include "dcn/train.hpp"

namespace dcn {

/// Invalid configuration; carries one message per offending field.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& problems) {
    std::string out = "invalid configuration:";
    for (const auto& p : problems) out += "\n  " + p;
    return out;
  }
  std::vector<std::string> problems_;
};

enum class DataSource { synthetic, directory };

struct DatasetConfig {
  DataSource source = DataSource::synthetic;
  std::string path;
  std::size_t image_size = 32;
  std::size_t classes = 100;
  std::size_t per_class = 40;
  double difficulty = 0.3;
  std::array<double, 3> split{0.64, 0.16, 0.20};
  std::uint64_t seed = 1;
};

struct EvalConfig {
  EpisodeSpec episode{5, 1, 15};
  std::size_t episodes = 600;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  EmbeddingConfig embedding;
  RelationConfig relation;
  TrainConfig train;
  EvalConfig eval;

  /// Semantic checks across sections; collects every problem before throwing.
  void validate() const;
  /// Appends a problem for every split part too small for the episodes drawn from it.
  void check_split_ways(const DatasetSplit& parts, std::vector<std::string>& problems) const;
};

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds share the size_t codec");

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& raw) {
  const std::string s = trim(raw);
  T value{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error("'" + raw + "' is not a valid " + (std::is_floating_point_v<T> ? "number" : "non-negative integer"));
  return value;
}

inline std::string format(std::size_t v) { return std::to_string(v); }
inline std::string format(double v) { return format_number(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }
inline std::string format(BlockKind v) { return to_string(v); }
inline std::string format(DataSource v) { return v == DataSource::synthetic ? "synthetic" : "directory"; }
template <typename T>
std::string format(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format(v[i]);
  return out;
}
template <typename T, std::size_t N>
std::string format(const std::array<T, N>& v) {
  return format(std::vector<T>(v.begin(), v.end()));
}

inline void parse(const std::string& s, std::size_t& out) { out = parse_number<std::size_t>(s); }
inline void parse(const std::string& s, double& out) { out = parse_number<double>(s); }
inline void parse(const std::string& raw, bool& out) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes" || s == "on") out = true;
  else if (s == "false" || s == "0" || s == "no" || s == "off") out = false;
  else throw Error("'" + raw + "' is not a boolean (true/false)");
}
inline void parse(const std::string& s, std::string& out) { out = trim(s); }
inline void parse(const std::string& s, BlockKind& out) { out = parse_block_kind(trim(s)); }
inline void parse(const std::string& raw, DataSource& out) {
  const std::string s = trim(raw);
  if (s == "synthetic") out = DataSource::synthetic;
  else if (s == "directory") out = DataSource::directory;
  else throw Error("'" + raw + "' is not a data source (synthetic|directory)");
}
template <typename T>
void parse(const std::string& s, std::vector<T>& out) {
  std::vector<T> values;
  for (const auto& item : split_list(s)) parse(item, values.emplace_back());
  out = std::move(values);
}
template <typename T, std::size_t N>
void parse(const std::string& s, std::array<T, N>& out) {
  std::vector<T> values;
  parse(s, values);
  if (values.size() != N) throw Error("expected " + std::to_string(N) + " comma-separated values");
  std::copy(values.begin(), values.end(), out.begin());
}

}  // namespace detail

/// One `[section] key` of a config type, with its documentation.
template <typename C>
struct ConfigField {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string(const C&)> get;
  std::function<void(C&, const std::string&)> set;
};

/// Builds a field from an accessor usable on both const and mutable configs.
template <typename C, typename Access>
ConfigField<C> config_field(std::string section, std::string key, std::string doc, Access access) {
  return {std::move(section), std::move(key), std::move(doc),
          [access](const C& c) { return detail::format(access(c)); },
          [access](C& c, const std::string& s) { detail::parse(s, access(c)); }};
}

#define DCN_FIELD(C, section, key, doc, expr) \
  config_field<C>(section, key, doc, [](auto& c) -> auto& { return c.expr; })

inline const std::vector<ConfigField<ExperimentConfig>>& experiment_fields() {
  using C = ExperimentConfig;
  static const std::vector<ConfigField<C>> fields = {
      DCN_FIELD(C, "dataset", "source", "synthetic | directory", dataset.source),
      DCN_FIELD(C, "dataset", "path", "class-per-folder image root (source = directory)", dataset.path),
      DCN_FIELD(C, "dataset", "image_size", "images are resized to image_size x image_size", dataset.image_size),
      DCN_FIELD(C, "dataset", "classes", "number of synthetic classes", dataset.classes),
      DCN_FIELD(C, "dataset", "per_class", "synthetic images per class", dataset.per_class),
      DCN_FIELD(C, "dataset", "difficulty", "synthetic within-class jitter, 0 = identical images", dataset.difficulty),
      DCN_FIELD(C, "dataset", "split", "meta_train,meta_val,meta_test class fractions", dataset.split),
      DCN_FIELD(C, "dataset", "seed", "seed of the synthetic generator and the class split", dataset.seed),

      DCN_FIELD(C, "embedding", "stages", "number of embedding stages V", embedding.stages),
      DCN_FIELD(C, "embedding", "blocks", "blocks per stage", embedding.blocks_per_stage),
      DCN_FIELD(C, "embedding", "channels", "output channels per stage", embedding.channels_per_stage),
      DCN_FIELD(C, "embedding", "se_reduction", "squeeze-excitation reduction ratio", embedding.se_reduction),
      DCN_FIELD(C, "embedding", "stem", "7x7 stride-2 conv + max-pool before stage 1", embedding.stem),
      DCN_FIELD(C, "embedding", "noise_samples", "noise draws averaged per forward pass", embedding.noise_samples),

      DCN_FIELD(C, "relation", "blocks", "blocks per relation module", relation.blocks_per_stage),
      DCN_FIELD(C, "relation", "channels", "module output widths; empty derives them from the embedding",
                relation.channels_per_stage),
      DCN_FIELD(C, "relation", "score_weights", "per-module weights of the loss and the combined score",
                relation.score_weights),
      DCN_FIELD(C, "relation", "se_reduction", "squeeze-excitation reduction ratio", relation.se_reduction),

      DCN_FIELD(C, "train", "seed", "training seed", train.seed),
      DCN_FIELD(C, "train", "pretrain_epochs", "classifier pre-training epochs", train.pretrain.epochs),
      DCN_FIELD(C, "train", "batch_size", "pre-training batch size", train.pretrain.batch_size),
      DCN_FIELD(C, "train", "pretrain_lr", "pre-training initial learning rate", train.pretrain.initial_lr),
      DCN_FIELD(C, "train", "pretrain_lr_decay", "pre-training lr divisor", train.pretrain.lr_decay_factor),
      DCN_FIELD(C, "train", "pretrain_lr_every", "epochs between pre-training lr decays",
                train.pretrain.lr_decay_every),
      DCN_FIELD(C, "train", "pretrain_augment", "random crop + flip during pre-training", train.pretrain.augment),
      DCN_FIELD(C, "train", "pretrain_sampled_features", "classifier reads sampled (noisy) features",
                train.pretrain.sampled_features),
      DCN_FIELD(C, "train", "momentum", "SGD momentum for both phases", train.pretrain.momentum),
      DCN_FIELD(C, "train", "weight_decay", "L2 weight decay for both phases", train.pretrain.weight_decay),
      DCN_FIELD(C, "train", "episodes", "maximum relation training episodes", train.relation.episodes),
      DCN_FIELD(C, "train", "ways", "classes per training episode", train.relation.episode.ways),
      DCN_FIELD(C, "train", "shots", "support images per class", train.relation.episode.shots),
      DCN_FIELD(C, "train", "queries", "query images per class", train.relation.episode.queries),
      DCN_FIELD(C, "train", "relation_lr", "relation initial learning rate", train.relation.initial_lr),
      DCN_FIELD(C, "train", "relation_lr_decay", "relation lr divisor", train.relation.lr_decay_factor),
      DCN_FIELD(C, "train", "relation_lr_every", "episodes between relation lr decays",
                train.relation.lr_decay_every),
      DCN_FIELD(C, "train", "relation_augment", "random crop + flip during relation training",
                train.relation.augment),
      DCN_FIELD(C, "train", "eval_every", "episodes between meta_val evaluations", train.relation.eval_every),
      DCN_FIELD(C, "train", "val_episodes", "meta_val episodes per evaluation", train.relation.val_episodes),
      DCN_FIELD(C, "train", "val_queries", "query images per class in meta_val episodes",
                train.relation.val_queries),
      DCN_FIELD(C, "train", "patience", "evaluations without improvement before stopping", train.relation.patience),
      DCN_FIELD(C, "train", "crop_scale_min", "smallest random-crop area fraction", train.augment.scale_min),

      DCN_FIELD(C, "eval", "ways", "classes per test episode", eval.episode.ways),
      DCN_FIELD(C, "eval", "shots", "support images per class", eval.episode.shots),
      DCN_FIELD(C, "eval", "queries", "query images per class", eval.episode.queries),
      DCN_FIELD(C, "eval", "episodes", "test episodes", eval.episodes),
      DCN_FIELD(C, "eval", "seed", "episode sampling seed", eval.seed),

      DCN_FIELD(C, "ablation", "noise", "stochastic feature regularizer", embedding.noise_enabled),
      DCN_FIELD(C, "ablation", "deep_supervision", "loss on every relation module (else last only)",
                train.deep_supervision),
      DCN_FIELD(C, "ablation", "retrain", "retrain on meta_train + meta_val after early stopping", train.retrain),
      config_field<C>("ablation", "block_kind", "plain_conv | residual | squeeze_excite, for both columns",
                      [](auto& c) -> auto& { return c.embedding.block_kind; }),
  };
  return fields;
}

struct ModelConfig {
  EmbeddingConfig embedding;
  RelationConfig relation;
};

inline const std::vector<ConfigField<ModelConfig>>& model_fields() {
  using C = ModelConfig;
  static const std::vector<ConfigField<C>> fields = {
      DCN_FIELD(C, "embedding", "stages", "", embedding.stages),
      DCN_FIELD(C, "embedding", "blocks", "", embedding.blocks_per_stage),
      DCN_FIELD(C, "embedding", "channels", "", embedding.channels_per_stage),
      DCN_FIELD(C, "embedding", "block_kind", "", embedding.block_kind),
      DCN_FIELD(C, "embedding", "se_reduction", "", embedding.se_reduction),
      DCN_FIELD(C, "embedding", "stem", "", embedding.stem),
      DCN_FIELD(C, "embedding", "noise", "", embedding.noise_enabled),
      DCN_FIELD(C, "embedding", "noise_samples", "", embedding.noise_samples),
      DCN_FIELD(C, "embedding", "pretrain_classes", "", embedding.num_pretrain_classes),
      DCN_FIELD(C, "embedding", "in_channels", "", embedding.in_channels),
      DCN_FIELD(C, "relation", "stages", "", relation.stages),
      DCN_FIELD(C, "relation", "blocks", "", relation.blocks_per_stage),
      DCN_FIELD(C, "relation", "channels", "", relation.channels_per_stage),
      DCN_FIELD(C, "relation", "score_weights", "", relation.score_weights),
      DCN_FIELD(C, "relation", "block_kind", "", relation.block_kind),
      DCN_FIELD(C, "relation", "se_reduction", "", relation.se_reduction),
  };
  return fields;
}

#undef DCN_FIELD

/// Sectioned `key = value` text; `documented` prefixes each key with its doc line.
template <typename C>
std::string fields_to_ini(const C& config, const std::vector<ConfigField<C>>& fields, bool documented) {
  std::string out, section;
  for (const auto& f : fields) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    if (documented && !f.doc.empty()) out += "; " + f.doc + "\n";
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

/// Overlays the keys present in `text` onto `config`. Unknown sections or keys
/// and unparsable values are all reported together.
template <typename C>
void fields_from_ini(C& config, const std::vector<ConfigField<C>>& fields, const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({"line " + std::to_string(e.line()) + ": " + e.message()});
  }
  std::vector<std::string> problems;
  for (const auto& [section, entries] : tree) {
    if (!entries.data().empty()) {
      problems.push_back("key '" + section + "' must live inside a [section]");
      continue;
    }
    for (const auto& [key, value] : entries) {
      auto it = std::find_if(fields.begin(), fields.end(),
                             [&](const auto& f) { return f.section == section && f.key == key; });
      if (it == fields.end()) {
        problems.push_back("[" + section + "] " + key + ": unknown key");
        continue;
      }
      try {
        it->set(config, value.data());
      } catch (const std::exception& e) {
        problems.push_back("[" + section + "] " + key + ": " + e.what());
      }
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

inline void ExperimentConfig::check_split_ways(const DatasetSplit& parts, std::vector<std::string>& problems) const {
  const std::size_t ways = train.relation.episode.ways;
  auto need = [&](SplitPart part, std::size_t n, const char* what) {
    if (parts.classes(part).size() < n)
      problems.push_back("[dataset] split: " + std::string(to_string(part)) + " gets " +
                         std::to_string(parts.classes(part).size()) + " classes, " + what + " need " +
                         std::to_string(n));
  };
  need(SplitPart::meta_train, ways, "training episodes");
  need(SplitPart::meta_val, ways, "validation episodes");
  need(SplitPart::meta_test, eval.episode.ways, "test episodes");
}

inline void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  auto check = [&](const char* where, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      problems.push_back(std::string(where) + ": " + e.what());
    }
  };
  const auto& d = dataset;
  if (d.source == DataSource::directory && d.path.empty())
    problems.push_back("[dataset] path: required when source = directory");
  if (d.image_size < 1) problems.push_back("[dataset] image_size: must be >= 1");
  if (d.source == DataSource::synthetic && d.classes < 2) problems.push_back("[dataset] classes: must be >= 2");
  if (d.difficulty < 0.0) problems.push_back("[dataset] difficulty: must be >= 0");
  double total = 0.0;
  for (double f : d.split) {
    if (f < 0.0) problems.push_back("[dataset] split: fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) problems.push_back("[dataset] split: fractions must sum to 1");
  check("[embedding]", [&] { embedding.validate(); });
  check("[relation]", [&] { relation.validate(); });
  check("[train]", [&] { train.validate(); });
  check("[eval]", [&] { eval.episode.validate(false); });
  if (eval.episodes < 1) problems.push_back("[eval] episodes: must be >= 1");
  if (d.source == DataSource::synthetic) {
    const auto& te = train.relation.episode;
    if (d.per_class < te.shots + te.queries)
      problems.push_back("[dataset] per_class: training episodes need " + std::to_string(te.shots + te.queries) +
                         " images per class");
    if (d.per_class < eval.episode.shots + eval.episode.queries)
      problems.push_back("[dataset] per_class: test episodes need " +
                         std::to_string(eval.episode.shots + eval.episode.queries) + " images per class");
  }
  if (problems.empty() && d.source == DataSource::synthetic) {
    const auto parts = split_classes(d.classes, d.split, d.seed);
    check_split_ways(parts, problems);
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

/// Keeps derived settings consistent: block_kind drives both columns and the
/// weight decay / momentum of the relation phase follow the pre-training ones.
inline void resolve(ExperimentConfig& c) {
  c.relation.block_kind = c.embedding.block_kind;
  c.relation.stages = c.embedding.stages;
  c.train.relation.momentum = c.train.pretrain.momentum;
  c.train.relation.weight_decay = c.train.pretrain.weight_decay;
  c.train.augment.out_size = c.dataset.image_size;
}

inline std::string to_ini(const ExperimentConfig& c, bool documented = false) {
  return fields_to_ini(c, experiment_fields(), documented);
}

/// Defaults overlaid with `text`, resolved and validated.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig c;
  fields_from_ini(c, experiment_fields(), text);
  resolve(c);
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({"cannot read config file " + path.string()});
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

inline std::string to_ini(const ModelConfig& c) { return fields_to_ini(c, model_fields(), false); }

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig c;
  fields_from_ini(c, model_fields(), text);
  c.embedding.validate();
  c.relation.validate();
  return c;
}

}  // namespace dcn
