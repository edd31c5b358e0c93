// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "fas/ann_model.hpp"
#include "fas/errors.hpp"
#include "fas/tensor.hpp"
#include "fas/tensor_io.hpp"

namespace fas {

/// Integrate-and-fire neurons with per-neuron threshold and initial potential.
/// `potential` is the mutable runtime state, one row per sample.
struct IfLayer {
  Tensor threshold;  // [N], > 0
  Tensor v_init;     // [N]
  Tensor potential;  // [B, N]
  float lambda = 1.0f;     // QCFS ceiling this layer was converted from
  std::size_t levels = 0;  // QCFS L of the source layer

  std::size_t width() const { return threshold.size(); }

  void reset(std::size_t batch) { potential = broadcast_rows(v_init, batch); }

  void validate(std::size_t layer) const {
    if (threshold.size() != v_init.size()) {
      throw DimensionError("layer " + std::to_string(layer) + ": threshold/initial-potential width mismatch");
    }
    for (std::size_t i = 0; i < threshold.size(); ++i) {
      if (!(threshold[i] > 0.0f)) {
        throw ParameterError("layer " + std::to_string(layer) + ": threshold of neuron " + std::to_string(i) +
                             " must be positive");
      }
    }
  }
};

/// One timestep: v += current; fire where v >= theta; subtract theta from fired neurons.
inline Tensor if_step(IfLayer& layer, const Tensor& current, std::size_t step = 0) {
  if (layer.potential.empty()) layer.reset(current.rows());
  if (current.size() != layer.potential.size() || current.cols() != layer.width()) {
    throw DimensionError("if_step: current " + shape_str(current.shape()) + " vs layer state " +
                         shape_str(layer.potential.shape()));
  }
  const std::size_t n = layer.width();
  Tensor spikes(layer.potential.shape());
  for (std::size_t i = 0; i < current.size(); ++i) {
    float& v = layer.potential[i];
    v += current[i];
    if (!std::isfinite(v)) {
      throw SimulationError("non-finite membrane potential at neuron " + std::to_string(i % n) + " (sample " +
                            std::to_string(i / n) + ") at step " + std::to_string(step));
    }
    const float th = layer.threshold[i % n];
    if (v >= th) {
      spikes[i] = 1.0f;
      v -= th;
    }
  }
  return spikes;
}

using SnnLayer = std::variant<LinearLayer, IfLayer, ResidualLayer, EmbeddingLayer>;

class SnnNetwork {
 public:
  SnnNetwork() = default;
  SnnNetwork(std::vector<SnnLayer> layers, std::size_t timesteps) : layers_(std::move(layers)), timesteps_(timesteps) {}

  std::vector<SnnLayer>& layers() noexcept { return layers_; }
  const std::vector<SnnLayer>& layers() const noexcept { return layers_; }
  std::size_t timesteps() const noexcept { return timesteps_; }
  void set_timesteps(std::size_t t) noexcept { timesteps_ = t; }

  std::vector<std::size_t> if_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<IfLayer>(layers_[i])) out.push_back(i);
    return out;
  }

  IfLayer& if_layer(std::size_t k) { return std::get<IfLayer>(layers_.at(if_indices().at(k))); }
  const IfLayer& if_layer(std::size_t k) const { return std::get<IfLayer>(layers_.at(if_indices().at(k))); }

  std::uint64_t weight_hash() const {
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

 private:
  std::vector<SnnLayer> layers_;
  std::size_t timesteps_ = 0;
};

/// Spikes of one IF layer, stored [T][B][N] as 0/1 bytes.
struct LayerSpikes {
  std::size_t layer_index = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> spikes;
  Tensor threshold;              // [N] used during the run
  Tensor v_init;                 // [N]
  Tensor v_final;                // [B, N]
  std::vector<Tensor> membrane;  // per step, after reset (optional)
  std::vector<Tensor> currents;  // per step input current (optional)
  std::uint64_t total_spikes = 0;

  std::uint8_t at(std::size_t t, std::size_t b, std::size_t n, std::size_t batch) const {
    return spikes[(t * batch + b) * width + n];
  }
};

struct SpikeRecord {
  std::size_t timesteps = 0;
  std::size_t batch = 0;
  std::string encoding = "constant-current";
  std::vector<LayerSpikes> layers;
  Tensor output;  // time-averaged final signal [B, out]

  /// Spike count of each (sample, neuron) over the first `window` steps.
  Tensor counts(std::size_t layer, std::size_t window) const {
    const auto& l = layers.at(layer);
    Tensor out({batch, l.width});
    for (std::size_t t = 0; t < window; ++t)
      for (std::size_t i = 0; i < batch * l.width; ++i) out[i] += static_cast<float>(l.spikes[t * batch * l.width + i]);
    return out;
  }

  Tensor counts(std::size_t layer) const { return counts(layer, timesteps); }
};

struct SimOptions {
  bool record_membrane = false;
  bool record_currents = false;
};

/// Runs the network for T steps. The analog input is injected as the same current
/// at every step; each IF layer passes spikes * theta downstream; the prediction is
/// the final signal averaged over time.
inline SpikeRecord simulate(SnnNetwork& net, const Tensor& input, std::size_t timesteps, const SimOptions& opts = {}) {
  if (timesteps < 1) throw ParameterError("simulate: horizon T must be >= 1");
  auto& layers = net.layers();
  const std::size_t batch = input.rows();
  SpikeRecord rec;
  rec.timesteps = timesteps;
  rec.batch = batch;

  std::vector<std::size_t> record_slot(layers.size(), 0);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (auto* ifl = std::get_if<IfLayer>(&layers[i])) {
      ifl->validate(i);
      ifl->reset(batch);
      LayerSpikes ls;
      ls.layer_index = i;
      ls.width = ifl->width();
      ls.spikes.assign(timesteps * batch * ls.width, 0);
      ls.threshold = ifl->threshold;
      ls.v_init = ifl->v_init;
      record_slot[i] = rec.layers.size();
      rec.layers.push_back(std::move(ls));
    }
  }

  // The embedding lookup is analog and time-invariant.
  Tensor source = input;
  std::size_t first = 0;
  if (!layers.empty()) {
    if (auto* emb = std::get_if<EmbeddingLayer>(&layers[0])) {
      source = embedding_forward(*emb, input, 0);
      first = 1;
    }
  }

  Tensor accum;
  std::vector<Tensor> outputs(layers.size());
  for (std::size_t t = 0; t < timesteps; ++t) {
    Tensor x = source;
    if (first == 1) outputs[0] = source;
    for (std::size_t i = first; i < layers.size(); ++i) {
      auto& layer = layers[i];
      if (auto* lin = std::get_if<LinearLayer>(&layer)) {
        x = linear_forward(*lin, x, i);
      } else if (auto* ifl = std::get_if<IfLayer>(&layer)) {
        auto& ls = rec.layers[record_slot[i]];
        if (opts.record_currents) ls.currents.push_back(x);
        Tensor s = if_step(*ifl, x, t + 1);
        if (opts.record_membrane) ls.membrane.push_back(ifl->potential);
        auto* dst = ls.spikes.data() + t * batch * ls.width;
        for (std::size_t k = 0; k < s.size(); ++k) {
          dst[k] = s[k] > 0.0f ? 1 : 0;
          ls.total_spikes += dst[k];
        }
        x = mul_row(s, ifl->threshold);
      } else if (auto* res = std::get_if<ResidualLayer>(&layer)) {
        if (res->from >= i || outputs[res->from].shape() != x.shape()) {
          throw DimensionError("layer " + std::to_string(i) + ": residual source shape mismatch");
        }
        x = x + outputs[res->from];
      } else {
        throw DimensionError("layer " + std::to_string(i) + ": embedding must be the first layer");
      }
      outputs[i] = x;
    }
    accum = accum.empty() ? x : accum + x;
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (auto* ifl = std::get_if<IfLayer>(&layers[i])) rec.layers[record_slot[i]].v_final = ifl->potential;
  }
  rec.output = accum * (1.0f / static_cast<float>(timesteps));
  return rec;
}

enum class DenominatorMode { Rho, T };

inline const char* to_string(DenominatorMode m) { return m == DenominatorMode::Rho ? "rho" : "T"; }

/// r_i = theta_i * sum_{t <= rho} s_i(t) / denom for IF layer `layer` (index among IF layers).
inline Tensor firing_rate(const SpikeRecord& rec, std::size_t layer, std::size_t rho,
                          DenominatorMode mode = DenominatorMode::Rho) {
  if (rho < 1 || rho > rec.timesteps) {
    throw ParameterError("firing_rate: window rho=" + std::to_string(rho) + " outside [1, " +
                         std::to_string(rec.timesteps) + "]");
  }
  if (layer >= rec.layers.size()) throw ParameterError("firing_rate: no IF layer " + std::to_string(layer));
  const float denom = static_cast<float>(mode == DenominatorMode::Rho ? rho : rec.timesteps);
  Tensor c = rec.counts(layer, rho);
  return map(mul_row(c, rec.layers[layer].threshold), [denom](float v) { return v / denom; });
}

/// tau_theor = a * T / lambda, elementwise and not rounded.
inline Tensor theoretical_spike_count(const Tensor& a, float lambda, std::size_t timesteps) {
  if (!(lambda > 0.0f)) throw ParameterError("theoretical_spike_count: lambda must be positive");
  const float k = static_cast<float>(timesteps) / lambda;
  return map(a, [k](float v) { return v * k; });
}

/// Per-neuron maximum theoretical spike count. All tau values are pooled; the top
/// `exclude_top` fraction (by rank) is discarded, and each neuron's psi is the max of
/// its remaining values (or the global cut-off when none of its values survive).
/// Each sample tensor is [B, N] or [N].
inline Tensor psi_max(const std::vector<Tensor>& samples, double exclude_top = 0.01) {
  if (samples.empty()) throw ParameterError("psi_max: no samples");
  if (exclude_top < 0.0 || exclude_top >= 0.5) throw ParameterError("psi_max: exclusion fraction must lie in [0, 0.5)");
  const std::size_t n = samples[0].cols();
  std::vector<std::pair<float, std::size_t>> pooled;  // (tau, neuron)
  for (const auto& s : samples) {
    if (s.cols() != n) throw DimensionError("psi_max: samples disagree on neuron count");
    for (std::size_t i = 0; i < s.size(); ++i) pooled.emplace_back(s[i], i % n);
  }
  if (pooled.empty()) throw ParameterError("psi_max: no values");
  std::stable_sort(pooled.begin(), pooled.end(), [](auto& a, auto& b) { return a.first < b.first; });
  const auto drop = static_cast<std::size_t>(std::floor(exclude_top * static_cast<double>(pooled.size())));
  const std::size_t keep = pooled.size() - drop;
  const float cutoff = pooled[keep - 1].first;
  Tensor psi({n}, -INFINITY);
  for (std::size_t k = 0; k < keep; ++k) psi[pooled[k].second] = std::max(psi[pooled[k].second], pooled[k].first);
  for (float& v : psi.data())
    if (v == -INFINITY) v = cutoff;
  return psi;
}

}  // namespace fas
