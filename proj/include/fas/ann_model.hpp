// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fas/autodiff.hpp"
#include "fas/errors.hpp"
#include "fas/rng.hpp"
#include "fas/tensor.hpp"
#include "fas/tensor_io.hpp"

namespace fas {

enum class ActivationKind { ReLU, GELU, QCFS };

inline const char* to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::GELU: return "gelu";
    case ActivationKind::QCFS: return "qcfs";
  }
  return "?";
}

/// y = x W + b with W stored [in, out].
struct LinearLayer {
  Tensor weight;
  Tensor bias;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

/// Activation. For QCFS, `lambda` is the trainable clip ceiling and `levels` is L.
struct ActivationLayer {
  ActivationKind kind = ActivationKind::ReLU;
  float lambda = 1.0f;
  std::size_t levels = 0;
};

/// Adds the output of an earlier layer (by index) to the running signal.
struct ResidualLayer {
  std::size_t from = 0;
};

/// Maps [B, context] byte ids to concatenated embedding rows [B, context * dim].
struct EmbeddingLayer {
  Tensor table;  // [vocab, dim]
  std::size_t context = 1;
};

using AnnLayer = std::variant<LinearLayer, ActivationLayer, ResidualLayer, EmbeddingLayer>;

/// Scalar QCFS forward on a tensor. Validates lambda > 0 and L >= 1.
inline Tensor qcfs_forward(const Tensor& x, float lambda, std::size_t levels) {
  if (!(lambda > 0.0f)) throw ParameterError("qcfs_forward: lambda must be positive, got " + std::to_string(lambda));
  if (levels < 1) throw ParameterError("qcfs_forward: L must be >= 1");
  return map(x, [lambda, levels](float v) { return qcfs_value(v, lambda, levels); });
}

inline float qcfs_forward(float x, float lambda, std::size_t levels) {
  return qcfs_forward(Tensor::scalar(x), lambda, levels)[0];
}

inline LinearLayer make_linear(std::size_t in, std::size_t out, Rng& rng) {
  // He-uniform: keeps ReLU activations at unit scale.
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  return LinearLayer{rng_uniform(rng, -bound, bound, {in, out}), Tensor({out})};
}

class AnnModel {
 public:
  AnnModel() = default;
  explicit AnnModel(std::vector<AnnLayer> layers) : layers_(std::move(layers)) {}

  /// Fully connected stack: dims[0] -> dims[1] -> ... with `act` after every hidden layer.
  static AnnModel mlp(const std::vector<std::size_t>& dims, ActivationKind act, Rng& rng) {
    if (dims.size() < 2) throw ParameterError("mlp: need at least input and output widths");
    std::vector<AnnLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      layers.emplace_back(make_linear(dims[i], dims[i + 1], rng));
      if (i + 2 < dims.size()) layers.emplace_back(ActivationLayer{act});
    }
    return AnnModel(std::move(layers));
  }

  /// Byte-level next-character model: embedding -> FC -> act -> FC -> act (+ residual
  /// from the first act) -> FC over 256 classes.
  static AnnModel char_lm(std::size_t context, std::size_t embed_dim, std::size_t hidden, ActivationKind act, Rng& rng) {
    if (context < 1 || embed_dim < 1 || hidden < 1) throw ParameterError("char_lm: sizes must be positive");
    std::vector<AnnLayer> layers;
    layers.emplace_back(EmbeddingLayer{rng_normal(rng, 1.0, {256, embed_dim}), context});
    layers.emplace_back(make_linear(context * embed_dim, hidden, rng));
    layers.emplace_back(ActivationLayer{act});
    layers.emplace_back(make_linear(hidden, hidden, rng));
    layers.emplace_back(ActivationLayer{act});
    layers.emplace_back(ResidualLayer{2});
    layers.emplace_back(make_linear(hidden, 256, rng));
    return AnnModel(std::move(layers));
  }

  std::vector<AnnLayer>& layers() noexcept { return layers_; }
  const std::vector<AnnLayer>& layers() const noexcept { return layers_; }
  std::size_t size() const noexcept { return layers_.size(); }

  bool record_activations() const noexcept { return record_; }
  void set_record_activations(bool on) noexcept { record_ = on; }

  std::vector<std::size_t> activation_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<ActivationLayer>(layers_[i])) out.push_back(i);
    return out;
  }

  bool is_qcfs() const {
    auto idx = activation_indices();
    if (idx.empty()) return false;
    for (auto i : idx)
      if (std::get<ActivationLayer>(layers_[i]).kind != ActivationKind::QCFS) return false;
    return true;
  }

  std::vector<float> lambdas() const {
    std::vector<float> out;
    for (auto i : activation_indices()) out.push_back(std::get<ActivationLayer>(layers_[i]).lambda);
    return out;
  }

  /// Hash over all non-activation parameters.
  std::uint64_t weight_hash() const;

 private:
  std::vector<AnnLayer> layers_;
  bool record_ = true;
};

struct AnnForward {
  Tensor output;
  std::vector<Tensor> activations;      // a^l, one per activation layer
  std::vector<Tensor> pre_activations;  // input to each activation layer
  std::vector<std::size_t> layer_index; // model index of each activation layer
};

namespace detail {

inline std::string layer_tag(std::size_t i) { return "layer " + std::to_string(i); }

inline void check_residual(std::size_t i, const ResidualLayer& r, const std::vector<Shape>& shapes, const Shape& cur) {
  if (r.from >= i) throw DimensionError(layer_tag(i) + ": residual source " + std::to_string(r.from) + " is not earlier");
  if (shapes[r.from] != cur) {
    throw DimensionError(layer_tag(i) + ": residual shape " + shape_str(shapes[r.from]) + " vs " + shape_str(cur));
  }
}

}  // namespace detail

inline Tensor embedding_forward(const EmbeddingLayer& e, const Tensor& ids, std::size_t layer) {
  if (ids.rank() != 2 || ids.dim(1) != e.context) {
    throw DimensionError(detail::layer_tag(layer) + ": embedding expects [B, " + std::to_string(e.context) +
                         "] token ids, got " + shape_str(ids.shape()));
  }
  Tape<float> tape;
  return ops::embedding(tape.constant(e.table), ids).value();
}

inline Tensor linear_forward(const LinearLayer& lin, const Tensor& x, std::size_t layer) {
  if (x.rank() != 2 || x.dim(1) != lin.in_features()) {
    throw DimensionError(detail::layer_tag(layer) + ": expected input width " + std::to_string(lin.in_features()) +
                         ", got shape " + shape_str(x.shape()));
  }
  return add_row(matmul(x, lin.weight), lin.bias);
}

inline Tensor activation_forward(const ActivationLayer& act, const Tensor& x) {
  switch (act.kind) {
    case ActivationKind::ReLU: return map(x, [](float v) { return v > 0.0f ? v : 0.0f; });
    case ActivationKind::GELU: return map(x, [](float v) { return ops::gelu_value(v); });
    case ActivationKind::QCFS: return qcfs_forward(x, act.lambda, act.levels);
  }
  return x;
}

/// Inference pass. Records a^l and the pre-activations when the model's record toggle is on.
inline AnnForward ann_forward(const AnnModel& model, const Tensor& batch) {
  AnnForward out;
  Tensor x = batch;
  std::vector<Tensor> outputs;
  outputs.reserve(model.size());
  std::vector<Shape> shapes;
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      x = linear_forward(*lin, x, i);
    } else if (auto* act = std::get_if<ActivationLayer>(&layer)) {
      if (model.record_activations()) out.pre_activations.push_back(x);
      x = activation_forward(*act, x);
      if (model.record_activations()) {
        out.activations.push_back(x);
        out.layer_index.push_back(i);
      }
    } else if (auto* res = std::get_if<ResidualLayer>(&layer)) {
      detail::check_residual(i, *res, shapes, x.shape());
      x = x + outputs[res->from];
    } else if (auto* emb = std::get_if<EmbeddingLayer>(&layer)) {
      if (i != 0) throw DimensionError(detail::layer_tag(i) + ": embedding must be the first layer");
      x = embedding_forward(*emb, x, i);
    }
    shapes.push_back(x.shape());
    outputs.push_back(x);
  }
  out.output = std::move(x);
  return out;
}

inline std::uint64_t AnnModel::weight_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& layer : layers_) {
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      h = tensor_hash(lin->weight, h);
      h = tensor_hash(lin->bias, h);
    } else if (auto* emb = std::get_if<EmbeddingLayer>(&layer)) {
      h = tensor_hash(emb->table, h);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Differentiable forward for training
// ---------------------------------------------------------------------------

/// Tape leaves for every trainable tensor of a model, indexed by layer.
struct AnnParams {
  std::vector<std::optional<Var<float>>> weight, bias, lambda, table;
};

inline AnnParams bind_params(Tape<float>& tape, const AnnModel& model, bool train_lambda = true) {
  AnnParams p;
  const auto n = model.size();
  p.weight.resize(n);
  p.bias.resize(n);
  p.lambda.resize(n);
  p.table.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& layer = model.layers()[i];
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      p.weight[i] = tape.parameter(lin->weight);
      p.bias[i] = tape.parameter(lin->bias);
    } else if (auto* act = std::get_if<ActivationLayer>(&layer)) {
      if (act->kind == ActivationKind::QCFS) {
        auto lam = Tensor::scalar(act->lambda);
        p.lambda[i] = train_lambda ? tape.parameter(lam) : tape.constant(lam);
      }
    } else if (auto* emb = std::get_if<EmbeddingLayer>(&layer)) {
      p.table[i] = tape.parameter(emb->table);
    }
  }
  return p;
}

struct AnnTapeForward {
  Var<float> output;
  std::vector<Var<float>> activations;
};

inline AnnTapeForward ann_forward_tape(Tape<float>& tape, const AnnModel& model, const AnnParams& p,
                                       const Tensor& batch) {
  AnnTapeForward out;
  Var<float> x = tape.constant(batch);
  std::vector<Var<float>> outputs;
  std::vector<Shape> shapes;
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      if (x.value().rank() != 2 || x.value().dim(1) != lin->in_features()) {
        throw DimensionError(detail::layer_tag(i) + ": expected input width " + std::to_string(lin->in_features()) +
                             ", got shape " + shape_str(x.shape()));
      }
      x = ops::add_row(ops::matmul(x, *p.weight[i]), *p.bias[i]);
    } else if (auto* act = std::get_if<ActivationLayer>(&layer)) {
      switch (act->kind) {
        case ActivationKind::ReLU: x = ops::relu(x); break;
        case ActivationKind::GELU: x = ops::gelu(x); break;
        case ActivationKind::QCFS: x = ops::qcfs(x, *p.lambda[i], act->levels); break;
      }
      out.activations.push_back(x);
    } else if (auto* res = std::get_if<ResidualLayer>(&layer)) {
      detail::check_residual(i, *res, shapes, x.shape());
      x = ops::add(x, outputs[res->from]);
    } else if (std::holds_alternative<EmbeddingLayer>(layer)) {
      x = ops::embedding(*p.table[i], batch);
    }
    shapes.push_back(x.shape());
    outputs.push_back(x);
  }
  out.output = x;
  return out;
}

// ---------------------------------------------------------------------------
// Activation replacement
// ---------------------------------------------------------------------------

/// Swaps every ReLU/GELU for QCFS with `levels` quantization steps. Each lambda is
/// initialised to the 99.9th percentile of that layer's pre-activation values on
/// `init_batch` (falling back to the largest magnitude, or 1, when that is not positive).
inline AnnModel replace_activations(const AnnModel& model, std::size_t levels, const Tensor& init_batch,
                                    double percentile_rank = 99.9) {
  if (levels < 1) throw ParameterError("replace_activations: L must be >= 1");
  std::size_t replaceable = 0;
  for (auto i : model.activation_indices())
    if (std::get<ActivationLayer>(model.layers()[i]).kind != ActivationKind::QCFS) ++replaceable;
  if (replaceable == 0) throw ParameterError("replace_activations: model has no ReLU/GELU layers to replace");
  AnnModel probe = model;
  probe.set_record_activations(true);
  const AnnForward fwd = ann_forward(probe, init_batch);
  AnnModel out = model;
  for (std::size_t k = 0; k < fwd.layer_index.size(); ++k) {
    auto& act = std::get<ActivationLayer>(out.layers()[fwd.layer_index[k]]);
    if (act.kind == ActivationKind::QCFS) continue;
    const auto& pre = fwd.pre_activations[k];
    std::vector<double> vals(pre.data().begin(), pre.data().end());
    double lam = percentile(vals, percentile_rank);
    if (!(lam > 0.0)) {
      double mx = 0.0;
      for (double v : vals) mx = std::max(mx, std::abs(v));
      lam = mx > 0.0 ? mx : 1.0;
    }
    act.kind = ActivationKind::QCFS;
    act.lambda = static_cast<float>(lam);
    act.levels = levels;
  }
  return out;
}

}  // namespace fas
