#pragma once

#include <openssl/evp.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "dcn/config.hpp"

namespace dcn {

inline constexpr char kCheckpointMagic[8] = {'D', 'C', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Hex SHA-256 of `bytes`.
inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

/// Everything needed to rebuild a trained model and the data view it was trained on.
struct Checkpoint {
  std::map<std::string, std::string> texts;  // "experiment", "model", "split", "meta" ini blobs
  std::map<std::string, Tensor<Real>> arrays;

  std::string digest() const {
    std::string all;
    for (const auto& [name, text] : texts) all += name + '\0' + text + '\0';
    return sha256_hex(all);
  }
};

namespace detail {

template <typename T>
void put(std::string& out, T value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof value);
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (bytes.size() - pos < n) throw Error("checkpoint " + path + " is truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof value);
    pos += sizeof value;
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put(out, kCheckpointVersion);
  detail::put_string(out, ck.digest());
  detail::put<std::uint64_t>(out, ck.texts.size());
  for (const auto& [name, text] : ck.texts) {
    detail::put_string(out, name);
    detail::put_string(out, text);
  }
  detail::put<std::uint64_t>(out, ck.arrays.size());
  for (const auto& [name, t] : ck.arrays) {
    detail::put_string(out, name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(Real));
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader in{bytes, 0, path};
  in.need(sizeof kCheckpointMagic);
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw Error(path + " is not a checkpoint (bad magic)");
  in.pos = sizeof kCheckpointMagic;
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error("checkpoint " + path + " has version " + std::to_string(version) + ", expected " +
                std::to_string(kCheckpointVersion));
  const std::string digest = in.get_string();
  Checkpoint ck;
  const auto num_texts = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < num_texts; ++i) {
    auto name = in.get_string();
    ck.texts[name] = in.get_string();
  }
  if (ck.digest() != digest) throw Error("checkpoint " + path + ": config digest mismatch");
  const auto num_arrays = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < num_arrays; ++i) {
    auto name = in.get_string();
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw Error("checkpoint " + path + ": array " + name + " has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint64_t>();
    const std::size_t count = element_count(shape);
    in.need(count * sizeof(Real));
    Tensor<Real> t(shape);
    std::memcpy(t.data(), bytes.data() + in.pos, count * sizeof(Real));
    in.pos += count * sizeof(Real);
    ck.arrays.emplace(std::move(name), std::move(t));
  }
  if (in.pos != bytes.size()) throw Error("checkpoint " + path + " has trailing bytes");
  return ck;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), path.string());
}

/// Packs a model, its architecture, and the data context of the run.
inline Checkpoint make_checkpoint(Model& model, const std::array<float, 3>& channel_mean,
                                  const std::string& experiment_ini, const std::string& split_manifest,
                                  const std::string& meta_ini = {}) {
  Checkpoint ck;
  ck.texts["experiment"] = experiment_ini;
  ck.texts["model"] = to_ini(ModelConfig{model.embedding.config(), model.relation.config()});
  ck.texts["split"] = split_manifest;
  ck.texts["meta"] = meta_ini;
  for (auto* p : model.parameters()) {
    if (!ck.arrays.emplace(p->name, p->value).second) throw Error("checkpoint: duplicate parameter " + p->name);
  }
  ck.arrays.emplace("data.channel_mean", Tensor<Real>({3}, {channel_mean[0], channel_mean[1], channel_mean[2]}));
  return ck;
}

/// Copies the stored parameters into `model`. Every parameter must be present
/// with a matching shape, and the stored architecture must equal the model's.
inline void load_parameters(const Checkpoint& ck, Model& model) {
  const auto stored = parse_model_config(ck.texts.at("model"));
  if (!(stored.embedding == model.embedding.config()) || !(stored.relation == model.relation.config()))
    throw Error("checkpoint architecture does not match the model:\n" + ck.texts.at("model"));
  std::size_t used = 0;
  for (auto* p : model.parameters()) {
    auto it = ck.arrays.find(p->name);
    if (it == ck.arrays.end()) throw Error("checkpoint is missing parameter " + p->name);
    if (it->second.shape() != p->value.shape())
      throw Error("checkpoint parameter " + p->name + " has shape " + to_string(it->second.shape()) + ", expected " +
                  to_string(p->value.shape()));
    p->value = it->second;
    ++used;
  }
  if (used + 1 != ck.arrays.size()) throw Error("checkpoint holds parameters the model does not have");
}

struct LoadedModel {
  Model model;
  std::array<float, 3> channel_mean;
  Checkpoint checkpoint;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  auto ck = read_checkpoint_file(path);
  for (const char* key : {"experiment", "model", "split", "meta"})
    if (!ck.texts.count(key)) throw Error("checkpoint " + path.string() + " lacks the '" + key + "' section");
  const auto mc = parse_model_config(ck.texts.at("model"));
  LoadedModel out{Model(mc.embedding, mc.relation), {}, std::move(ck)};
  load_parameters(out.checkpoint, out.model);
  const auto& mean = out.checkpoint.arrays.at("data.channel_mean");
  if (mean.size() != 3) throw Error("checkpoint channel mean must have 3 values");
  out.channel_mean = {mean[0], mean[1], mean[2]};
  return out;
}

}  // namespace dcn
