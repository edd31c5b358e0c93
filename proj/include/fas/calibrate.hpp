// SPDX-License-Identifier: Apache-2.0
//
// ANN -> SNN conversion and the two calibration passes: layer-wise scaling of
// thresholds / initial potentials, then neuron-wise training of both by BPTT
// with all synaptic weights frozen.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fas/ann_model.hpp"
#include "fas/autodiff.hpp"
#include "fas/dataset.hpp"
#include "fas/optim.hpp"
#include "fas/rng.hpp"
#include "fas/snn.hpp"
#include "fas/train.hpp"

namespace fas {

struct CalibConfig {
  std::size_t timesteps = 8;  // T
  std::size_t rho = 8;        // calibration window
  std::vector<float> alpha;   // per IF layer; empty -> default_alpha everywhere
  std::vector<float> beta;
  float default_alpha = 0.6f;
  float default_beta = 0.1f;
  bool alpha_heuristic = false;  // use select_alpha instead of default_alpha
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double temperature = 1.0;  // logits distillation temperature (not the horizon T)
  double lr = 0.01;
  std::size_t steps = 100;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  DenominatorMode denominator = DenominatorMode::Rho;
  SurrogateSpec surrogate;

  void validate() const {
    if (timesteps < 1) throw ParameterError("calibration: T must be >= 1");
    if (rho < 1 || rho > timesteps) {
      throw ParameterError("calibration: rho=" + std::to_string(rho) + " must lie in [1, T=" + std::to_string(timesteps) + "]");
    }
    auto check_alpha = [](float a) {
      if (!(a > 0.0f && a <= 1.0f)) throw ParameterError("calibration: alpha must lie in (0, 1], got " + std::to_string(a));
    };
    check_alpha(default_alpha);
    for (float a : alpha) check_alpha(a);
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ParameterError("calibration: loss weights must be non-negative");
    if (lambda1 == 0.0 && lambda2 == 0.0) throw ParameterError("calibration: lambda1 and lambda2 are both zero");
    if (!(temperature > 0.0)) throw ParameterError("calibration: temperature must be positive");
    if (batch_size == 0) throw ParameterError("calibration: batch size must be positive");
    surrogate.validate();
  }
};

// ---------------------------------------------------------------------------
// Conversion and layer-wise calibration
// ---------------------------------------------------------------------------

/// Copies weights bit-exactly, maps each QCFS ceiling to a per-neuron threshold,
/// and sets v(0) = theta / 2.
inline SnnNetwork convert(const AnnModel& ann, std::size_t timesteps) {
  if (!ann.is_qcfs()) {
    throw ParameterError("convert: every activation must be QCFS; run stage 1 (replace_activations + fine-tune) first");
  }
  std::vector<SnnLayer> layers;
  std::optional<std::size_t> width;
  for (std::size_t i = 0; i < ann.size(); ++i) {
    const auto& layer = ann.layers()[i];
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      layers.emplace_back(*lin);
      width = lin->out_features();
    } else if (auto* act = std::get_if<ActivationLayer>(&layer)) {
      if (!width) throw DimensionError("convert: layer " + std::to_string(i) + " has no known width");
      IfLayer ifl;
      ifl.threshold = Tensor({*width}, act->lambda);
      ifl.v_init = Tensor({*width}, act->lambda * 0.5f);
      ifl.lambda = act->lambda;
      ifl.levels = act->levels;
      layers.emplace_back(std::move(ifl));
    } else if (auto* res = std::get_if<ResidualLayer>(&layer)) {
      layers.emplace_back(*res);
    } else if (auto* emb = std::get_if<EmbeddingLayer>(&layer)) {
      layers.emplace_back(*emb);
      width = emb->context * emb->table.dim(1);
    }
  }
  return SnnNetwork(std::move(layers), timesteps);
}

namespace detail {

inline float per_layer(const std::vector<float>& v, std::size_t k, float fallback) {
  if (v.empty()) return fallback;
  if (v.size() == 1) return v[0];
  return v.at(k);
}

}  // namespace detail

/// theta_hat = alpha * theta, v_hat(0) = beta * theta_hat, per IF layer.
/// A single-element alpha/beta vector applies to every layer.
inline SnnNetwork lwc(SnnNetwork snn, const std::vector<float>& alpha, const std::vector<float>& beta) {
  const std::size_t n = snn.if_indices().size();
  if (alpha.size() > 1 && alpha.size() != n) throw ParameterError("lwc: need one alpha per IF layer");
  if (beta.size() > 1 && beta.size() != n) throw ParameterError("lwc: need one beta per IF layer");
  for (std::size_t k = 0; k < n; ++k) {
    const float a = detail::per_layer(alpha, k, 1.0f);
    const float b = detail::per_layer(beta, k, 0.5f);
    if (!(a > 0.0f)) throw ParameterError("lwc: alpha must be positive, got " + std::to_string(a));
    IfLayer& l = snn.if_layer(k);
    for (std::size_t i = 0; i < l.width(); ++i) {
      l.threshold[i] = a * l.threshold[i];
      l.v_init[i] = b * l.threshold[i];
    }
  }
  return snn;
}

/// Threshold scale from the spread of theoretical spike counts:
/// clip(p99(tau) / T + margin, 0.5, 1.0). A heuristic, margin defaults to 1/T.
inline float select_alpha(const std::vector<Tensor>& tau_samples, std::size_t timesteps,
                          std::optional<double> margin = std::nullopt) {
  std::vector<double> pooled;
  for (const auto& t : tau_samples) pooled.insert(pooled.end(), t.data().begin(), t.data().end());
  if (pooled.empty()) throw ParameterError("select_alpha: no spike-count samples");
  const double m = margin.value_or(1.0 / static_cast<double>(timesteps));
  const double a = percentile(std::move(pooled), 99.0) / static_cast<double>(timesteps) + m;
  return static_cast<float>(std::clamp(a, 0.5, 1.0));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// MSE between ANN activations a[B, N] and the firing rate of per-step spikes
/// (first rho entries of `spikes`, each [B, N]) weighted by theta[N].
inline double activation_align_loss(const Tensor& a, const std::vector<Tensor>& spikes, const Tensor& theta,
                                    std::size_t rho, std::size_t timesteps, DenominatorMode mode,
                                    std::size_t layer = 0) {
  if (rho < 1 || rho > timesteps || rho > spikes.size()) {
    throw ParameterError("activation_align_loss: rho out of range");
  }
  Tensor count(a.shape());
  for (std::size_t t = 0; t < rho; ++t) {
    if (spikes[t].shape() != a.shape()) {
      throw DimensionError("activation_align_loss: layer " + std::to_string(layer) + " spikes " +
                           shape_str(spikes[t].shape()) + " vs activations " + shape_str(a.shape()));
    }
    count = count + spikes[t];
  }
  if (theta.size() != a.cols()) {
    throw DimensionError("activation_align_loss: layer " + std::to_string(layer) + " theta width mismatch");
  }
  const float denom = static_cast<float>(mode == DenominatorMode::Rho ? rho : timesteps);
  Tensor rate = map(mul_row(count, theta), [denom](float v) { return v / denom; });
  return mse(a, rate);
}

/// -sum_i softmax(a_i / temp) log softmax(r_i / temp), averaged over the batch.
inline double logits_loss(const Tensor& ann_logits, const Tensor& snn_out, double temperature) {
  if (ann_logits.cols() == 0) throw ParameterError("logits_loss: zero classes");
  if (ann_logits.shape() != snn_out.shape()) {
    throw DimensionError("logits_loss: shapes " + shape_str(ann_logits.shape()) + " vs " + shape_str(snn_out.shape()));
  }
  if (!(temperature > 0.0)) throw ParameterError("logits_loss: temperature must be positive");
  const Tensor64 a = ann_logits.cast<double>(), r = snn_out.cast<double>();
  const Tensor64 p = softmax_rows(a, temperature);
  const Tensor64 lq = log_softmax_rows(r, temperature);
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) loss -= p[i] * lq[i];
  return loss / static_cast<double>(a.rows());
}

struct LossParts {
  double align = 0.0;   // sum over IF layers of per-layer MSE
  double logits = 0.0;
  double total = 0.0;   // lambda1 * align + lambda2 * logits
};

/// L_all of a simulated SNN against the ANN on one batch, without gradients.
inline LossParts calibration_loss(SnnNetwork snn, const AnnModel& ann, const Tensor& inputs, std::size_t timesteps,
                                  std::size_t rho, DenominatorMode mode, double lambda1, double lambda2,
                                  double temperature) {
  AnnModel teacher = ann;
  teacher.set_record_activations(true);
  const AnnForward fwd = ann_forward(teacher, inputs);
  SpikeRecord rec = simulate(snn, inputs, timesteps);
  if (rec.layers.size() != fwd.activations.size()) {
    throw DimensionError("calibration_loss: SNN has " + std::to_string(rec.layers.size()) + " IF layers, ANN has " +
                         std::to_string(fwd.activations.size()) + " activations");
  }
  LossParts parts;
  for (std::size_t k = 0; k < rec.layers.size(); ++k) {
    parts.align += mse(fwd.activations[k], firing_rate(rec, k, rho, mode));
  }
  // Head output over the same window and denominator as the rates.
  SnnNetwork window = snn;
  SpikeRecord wrec = simulate(window, inputs, rho);
  Tensor out = wrec.output;
  if (mode == DenominatorMode::T) out = out * (static_cast<float>(rho) / static_cast<float>(timesteps));
  parts.logits = logits_loss(fwd.output, out, temperature);
  parts.total = lambda1 * parts.align + lambda2 * parts.logits;
  return parts;
}

// ---------------------------------------------------------------------------
// Neuron-wise calibration
// ---------------------------------------------------------------------------

struct CalibLogRecord {
  std::size_t step = 0;
  double l_al = 0.0;
  double l_logits = 0.0;
  double l_all = 0.0;
  double mean_theta = 0.0;
  double mean_v0 = 0.0;
};

struct UnrolledSnn {
  Var<float> output;               // head signal summed over rho steps / denom
  std::vector<Var<float>> rates;   // per IF layer
  std::vector<Var<float>> theta;   // leaves
  std::vector<Var<float>> v_init;  // leaves
};

/// Builds the rho-step simulation on a tape. Thresholds and initial potentials are
/// leaves; weights are constants. The reset term S(t) * theta treats S(t) as a
/// constant, so threshold sensitivity reaches the spike only through the surrogate.
inline UnrolledSnn unroll_snn(Tape<float>& tape, const SnnNetwork& snn, const Tensor& inputs, std::size_t rho,
                              float denom, const SurrogateSpec& spec) {
  UnrolledSnn u;
  const auto& layers = snn.layers();
  const std::size_t batch = inputs.rows();
  std::vector<std::optional<Var<float>>> weight(layers.size()), bias(layers.size()), potential(layers.size()),
      spike_sum(layers.size());
  std::vector<std::size_t> slot(layers.size(), 0);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (auto* lin = std::get_if<LinearLayer>(&layers[i])) {
      weight[i] = tape.constant(lin->weight);
      bias[i] = tape.constant(lin->bias);
    } else if (auto* ifl = std::get_if<IfLayer>(&layers[i])) {
      ifl->validate(i);
      slot[i] = u.theta.size();
      u.theta.push_back(tape.parameter(ifl->threshold));
      u.v_init.push_back(tape.parameter(ifl->v_init));
      potential[i] = ops::add_row(tape.constant(Tensor({batch, ifl->width()})), u.v_init.back());
    }
  }
  Tensor src = inputs;
  std::size_t first = 0;
  if (!layers.empty()) {
    if (auto* emb = std::get_if<EmbeddingLayer>(&layers[0])) {
      src = embedding_forward(*emb, inputs, 0);
      first = 1;
    }
  }
  Var<float> source = tape.constant(src);
  std::optional<Var<float>> out_sum;
  std::vector<std::optional<Var<float>>> outputs(layers.size());
  for (std::size_t t = 0; t < rho; ++t) {
    Var<float> x = source;
    if (first == 1) outputs[0] = source;
    for (std::size_t i = first; i < layers.size(); ++i) {
      const auto& layer = layers[i];
      if (std::holds_alternative<LinearLayer>(layer)) {
        x = ops::add_row(ops::matmul(x, *weight[i]), *bias[i]);
      } else if (std::holds_alternative<IfLayer>(layer)) {
        Var<float> theta = u.theta[slot[i]];
        Var<float> v = ops::add(*potential[i], x);
        Var<float> s = ops::spike(v, theta, spec);
        potential[i] = ops::sub(v, ops::mul_row(ops::detach(s), theta));
        x = ops::mul_row(s, theta);
        spike_sum[i] = spike_sum[i] ? ops::add(*spike_sum[i], x) : x;
      } else if (auto* res = std::get_if<ResidualLayer>(&layer)) {
        x = ops::add(x, *outputs[res->from]);
      }
      outputs[i] = x;
    }
    out_sum = out_sum ? ops::add(*out_sum, x) : x;
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (spike_sum[i]) u.rates.push_back(ops::scale(*spike_sum[i], 1.0f / denom));
  }
  u.output = ops::scale(*out_sum, 1.0f / denom);
  return u;
}

struct NwcResult {
  SnnNetwork net;
  std::vector<CalibLogRecord> log;
};

/// Trains per-neuron thresholds and initial potentials to minimise
/// lambda1 * sum_l mse(a^l, r^l) + lambda2 * L_logits over minibatches of `calib`.
inline NwcResult nwc_calibrate(SnnNetwork snn, const AnnModel& ann, const Dataset& calib, const CalibConfig& cfg,
                               const std::function<void(const CalibLogRecord&)>& on_step = nullptr) {
  cfg.validate();
  if (calib.size() == 0) throw ParameterError("nwc_calibrate: empty calibration set");
  const std::uint64_t frozen = snn.weight_hash();
  AnnModel teacher = ann;
  teacher.set_record_activations(true);
  const std::size_t n_if = snn.if_indices().size();
  if (teacher.activation_indices().size() != n_if) {
    throw DimensionError("nwc_calibrate: ANN/SNN layer mismatch");
  }
  const float denom = static_cast<float>(cfg.denominator == DenominatorMode::Rho ? cfg.rho : cfg.timesteps);
  const AdamConfig adam{cfg.lr};
  std::vector<AdamState<float>> theta_state(n_if), v_state(n_if);
  Rng rng = Rng(cfg.seed).substream("calibration");
  NwcResult res;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor + cfg.batch_size > order.size()) {
      order = rng.permutation<std::size_t>(calib.size());
      cursor = 0;
    }
    const std::size_t take = std::min(cfg.batch_size, order.size());
    const Dataset batch = calib.subset(std::span<const std::size_t>(order).subspan(cursor, take));
    cursor += take;
    const AnnForward target = ann_forward(teacher, batch.inputs);

    Tape<float> tape;
    UnrolledSnn u = unroll_snn(tape, snn, batch.inputs, cfg.rho, denom, cfg.surrogate);
    std::optional<Var<float>> align;
    for (std::size_t k = 0; k < n_if; ++k) {
      Var<float> l = ops::mse(u.rates[k], tape.constant(target.activations[k]));
      align = align ? ops::add(*align, l) : l;
    }
    Var<float> logit = ops::soft_cross_entropy(tape.constant(target.output), u.output,
                                               static_cast<float>(cfg.temperature));
    Var<float> total = ops::add_scalar_nodes(*align, logit, static_cast<float>(cfg.lambda1),
                                             static_cast<float>(cfg.lambda2));
    CalibLogRecord rec;
    rec.step = step;
    rec.l_al = align->value().item();
    rec.l_logits = logit.value().item();
    rec.l_all = total.value().item();
    double th_sum = 0.0, v_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < n_if; ++k) {
      const IfLayer& l = snn.if_layer(k);
      for (std::size_t i = 0; i < l.width(); ++i) {
        th_sum += l.threshold[i];
        v_sum += l.v_init[i];
      }
      count += l.width();
    }
    rec.mean_theta = count ? th_sum / static_cast<double>(count) : 0.0;
    rec.mean_v0 = count ? v_sum / static_cast<double>(count) : 0.0;
    if (!std::isfinite(rec.l_all)) {
      throw TrainingError("nwc_calibrate: non-finite loss at step " + std::to_string(step) +
                          " (L_al=" + std::to_string(rec.l_al) + ", L_logits=" + std::to_string(rec.l_logits) + ")");
    }
    res.log.push_back(rec);
    if (on_step) on_step(rec);

    Gradients<float> grads = backward(tape, total);
    for (std::size_t k = 0; k < n_if; ++k) {
      IfLayer& l = snn.if_layer(k);
      adam_step(l.threshold, grads.of(u.theta[k]), theta_state[k], adam);
      adam_step(l.v_init, grads.of(u.v_init[k]), v_state[k], adam);
      for (float& th : l.threshold.data()) th = std::max(th, 1e-4f);
    }
  }
  if (snn.weight_hash() != frozen) throw InternalError("nwc_calibrate: synaptic weights changed");
  res.net = std::move(snn);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

/// Time-averaged SNN output, simulated in chunks of `chunk` samples.
inline Tensor snn_predict(const SnnNetwork& snn, const Tensor& inputs, std::size_t timesteps, std::size_t chunk = 1000) {
  std::vector<float> data;
  std::size_t cols = 0;
  for (std::size_t b = 0; b < inputs.rows(); b += chunk) {
    SnnNetwork net = snn;
    const std::size_t e = std::min(inputs.rows(), b + chunk);
    SpikeRecord rec = simulate(net, slice_rows(inputs, b, e), timesteps);
    cols = rec.output.cols();
    data.insert(data.end(), rec.output.data().begin(), rec.output.data().end());
  }
  return Tensor({inputs.rows(), cols}, std::move(data));
}

inline double snn_accuracy(const SnnNetwork& snn, const Dataset& data, std::size_t timesteps) {
  return accuracy_of(snn_predict(snn, data.inputs, timesteps), data.labels);
}

}  // namespace fas
