// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: manifest.json (layer list, lambda/L, tensor table with
// byte offsets) plus weights.bin holding the encoded tensors back to back.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "fas/ann_model.hpp"
#include "fas/dataset.hpp"
#include "fas/errors.hpp"
#include "fas/rng.hpp"
#include "fas/snn.hpp"
#include "fas/tensor_io.hpp"

namespace fas {

namespace detail {

using nlohmann::json;

inline std::uint64_t blob_hash(const std::vector<std::uint8_t>& blob) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(blob.data()), blob.size()));
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

class WeightWriter {
 public:
  json add(const std::string& name, const Tensor& t) {
    const auto bytes = encode_tensor(t);
    json entry = {{"name", name}, {"shape", t.shape()}, {"offset", blob_.size()}, {"bytes", bytes.size()}};
    blob_.insert(blob_.end(), bytes.begin(), bytes.end());
    table_.push_back(entry);
    return name;
  }
  const std::vector<std::uint8_t>& blob() const { return blob_; }
  const json& table() const { return table_; }

 private:
  std::vector<std::uint8_t> blob_;
  json table_ = json::array();
};

class WeightReader {
 public:
  WeightReader(const json& manifest, std::vector<std::uint8_t> blob) : blob_(std::move(blob)) {
    const auto expected = manifest.at("weights_bytes").get<std::size_t>();
    if (blob_.size() != expected) {
      throw IntegrityError("checkpoint: weights.bin has " + std::to_string(blob_.size()) + " bytes, manifest says " +
                           std::to_string(expected));
    }
    if (hex64(blob_hash(blob_)) != manifest.at("weights_fnv1a").get<std::string>()) {
      throw IntegrityError("checkpoint: weights.bin content hash does not match the manifest");
    }
    for (const auto& e : manifest.at("tensors")) entries_[e.at("name").get<std::string>()] = e;
  }

  Tensor get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IntegrityError("checkpoint: manifest has no tensor '" + name + "'");
    const auto& e = it->second;
    const auto off = e.at("offset").get<std::size_t>();
    const auto len = e.at("bytes").get<std::size_t>();
    if (off + len > blob_.size()) throw IntegrityError("checkpoint: tensor '" + name + "' extends past weights.bin");
    Tensor t;
    try {
      t = decode_tensor(std::span<const std::uint8_t>(blob_).subspan(off, len));
    } catch (const DecodeError& err) {
      throw IntegrityError("checkpoint: tensor '" + name + "': " + err.what());
    }
    if (t.shape() != e.at("shape").get<Shape>()) {
      throw IntegrityError("checkpoint: tensor '" + name + "' shape " + shape_str(t.shape()) +
                           " disagrees with the manifest");
    }
    return t;
  }

 private:
  std::vector<std::uint8_t> blob_;
  std::map<std::string, json> entries_;
};

inline void write_checkpoint(const std::filesystem::path& dir, json manifest, const WeightWriter& w) {
  std::filesystem::create_directories(dir);
  manifest["tensors"] = w.table();
  manifest["weights_bytes"] = w.blob().size();
  manifest["weights_fnv1a"] = hex64(blob_hash(w.blob()));
  {
    std::ofstream out(dir / "weights.bin", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "weights.bin").string());
    out.write(reinterpret_cast<const char*>(w.blob().data()), static_cast<std::streamsize>(w.blob().size()));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

inline json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read " + (dir / "manifest.json").string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IntegrityError("checkpoint: manifest.json is not valid JSON: " + std::string(e.what()));
  }
}

inline std::vector<std::uint8_t> read_blob(const std::filesystem::path& dir) {
  return read_bytes((dir / "weights.bin").string());
}

inline std::string tensor_name(std::size_t layer, const char* field) {
  return "layers." + std::to_string(layer) + "." + field;
}

// Layers shared by both model kinds.
inline bool encode_common(const auto& layer, std::size_t i, json& j, WeightWriter& w) {
  using L = std::decay_t<decltype(layer)>;
  if constexpr (std::is_same_v<L, LinearLayer>) {
    j = {{"type", "linear"}, {"weight", w.add(tensor_name(i, "weight"), layer.weight)},
         {"bias", w.add(tensor_name(i, "bias"), layer.bias)}};
    return true;
  } else if constexpr (std::is_same_v<L, ResidualLayer>) {
    j = {{"type", "residual"}, {"from", layer.from}};
    return true;
  } else if constexpr (std::is_same_v<L, EmbeddingLayer>) {
    j = {{"type", "embedding"}, {"context", layer.context}, {"table", w.add(tensor_name(i, "table"), layer.table)}};
    return true;
  }
  return false;
}

inline ActivationKind parse_activation_kind(const std::string& s) {
  if (s == "relu") return ActivationKind::ReLU;
  if (s == "gelu") return ActivationKind::GELU;
  if (s == "qcfs") return ActivationKind::QCFS;
  throw IntegrityError("checkpoint: unknown activation '" + s + "'");
}

inline float read_float(const json& j, const char* key) {
  return static_cast<float>(j.at(key).get<double>());
}

}  // namespace detail

inline void save_checkpoint(const AnnModel& model, const std::filesystem::path& dir) {
  detail::WeightWriter w;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < model.size(); ++i) {
    nlohmann::json j;
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, ActivationLayer>) {
            j = {{"type", "activation"}, {"kind", to_string(layer.kind)}, {"lambda", layer.lambda},
                 {"levels", layer.levels}};
          } else {
            detail::encode_common(layer, i, j, w);
          }
        },
        model.layers()[i]);
    layers.push_back(j);
  }
  detail::write_checkpoint(dir, {{"format", "fas-checkpoint"}, {"version", 1}, {"kind", "ann"}, {"layers", layers}}, w);
}

inline void save_checkpoint(const SnnNetwork& net, const std::filesystem::path& dir) {
  detail::WeightWriter w;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    nlohmann::json j;
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, IfLayer>) {
            j = {{"type", "if"}, {"lambda", layer.lambda}, {"levels", layer.levels},
                 {"threshold", w.add(detail::tensor_name(i, "threshold"), layer.threshold)},
                 {"v_init", w.add(detail::tensor_name(i, "v_init"), layer.v_init)}};
          } else {
            detail::encode_common(layer, i, j, w);
          }
        },
        net.layers()[i]);
    layers.push_back(j);
  }
  detail::write_checkpoint(
      dir, {{"format", "fas-checkpoint"}, {"version", 1}, {"kind", "snn"}, {"timesteps", net.timesteps()}, {"layers", layers}},
      w);
}

/// "ann" or "snn".
inline std::string checkpoint_kind(const std::filesystem::path& dir) {
  return detail::read_manifest(dir).at("kind").get<std::string>();
}

namespace detail {

template <class Layer>
Layer decode_common(const json& j, const WeightReader& r, const std::string& type) {
  if constexpr (std::is_same_v<Layer, LinearLayer>) {
    LinearLayer l{r.get(j.at("weight")), r.get(j.at("bias"))};
    if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.weight.dim(1)) {
      throw IntegrityError("checkpoint: linear layer tensors have inconsistent shapes");
    }
    return l;
  } else if constexpr (std::is_same_v<Layer, ResidualLayer>) {
    return ResidualLayer{j.at("from").get<std::size_t>()};
  } else {
    (void)type;
    return EmbeddingLayer{r.get(j.at("table")), j.at("context").get<std::size_t>()};
  }
}

template <class Fn>
auto guarded(const std::filesystem::path& dir, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw IntegrityError("checkpoint " + dir.string() + ": malformed manifest: " + e.what());
  }
}

}  // namespace detail

inline AnnModel load_ann_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = detail::read_manifest(dir);
  return detail::guarded(dir, [&] {
    if (manifest.at("kind") != "ann") throw IntegrityError("checkpoint " + dir.string() + " is not an ANN checkpoint");
    detail::WeightReader r(manifest, detail::read_blob(dir));
    std::vector<AnnLayer> layers;
    for (const auto& j : manifest.at("layers")) {
      const auto type = j.at("type").get<std::string>();
      if (type == "linear") layers.emplace_back(detail::decode_common<LinearLayer>(j, r, type));
      else if (type == "residual") layers.emplace_back(detail::decode_common<ResidualLayer>(j, r, type));
      else if (type == "embedding") layers.emplace_back(detail::decode_common<EmbeddingLayer>(j, r, type));
      else if (type == "activation")
        layers.emplace_back(ActivationLayer{detail::parse_activation_kind(j.at("kind")), detail::read_float(j, "lambda"),
                                            j.at("levels").get<std::size_t>()});
      else throw IntegrityError("checkpoint: unknown layer type '" + type + "' in an ANN checkpoint");
    }
    return AnnModel(std::move(layers));
  });
}

inline SnnNetwork load_snn_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = detail::read_manifest(dir);
  return detail::guarded(dir, [&] {
    if (manifest.at("kind") != "snn") throw IntegrityError("checkpoint " + dir.string() + " is not an SNN checkpoint");
    detail::WeightReader r(manifest, detail::read_blob(dir));
    std::vector<SnnLayer> layers;
    for (const auto& j : manifest.at("layers")) {
      const auto type = j.at("type").get<std::string>();
      if (type == "linear") layers.emplace_back(detail::decode_common<LinearLayer>(j, r, type));
      else if (type == "residual") layers.emplace_back(detail::decode_common<ResidualLayer>(j, r, type));
      else if (type == "embedding") layers.emplace_back(detail::decode_common<EmbeddingLayer>(j, r, type));
      else if (type == "if") {
        IfLayer l;
        l.threshold = r.get(j.at("threshold"));
        l.v_init = r.get(j.at("v_init"));
        l.lambda = detail::read_float(j, "lambda");
        l.levels = j.at("levels").get<std::size_t>();
        if (l.threshold.shape() != l.v_init.shape()) throw IntegrityError("checkpoint: IF threshold/v_init shapes differ");
        layers.emplace_back(std::move(l));
      } else {
        throw IntegrityError("checkpoint: unknown layer type '" + type + "' in an SNN checkpoint");
      }
    }
    return SnnNetwork(std::move(layers), manifest.at("timesteps").get<std::size_t>());
  });
}

}  // namespace fas
