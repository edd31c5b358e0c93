// SPDX-License-Identifier: Apache-2.0
//
// Two-layer ReLU approximators for non-linearities (softmax rows, layernorm,
// GELU) so that they become convertible like any other ReLU network.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fas/ann_model.hpp"
#include "fas/dataset.hpp"
#include "fas/train.hpp"

namespace fas {

enum class UgoTarget { SoftmaxRow, LayerNorm, GeluScalar, Custom };

inline const char* to_string(UgoTarget t) {
  switch (t) {
    case UgoTarget::SoftmaxRow: return "softmax-row";
    case UgoTarget::LayerNorm: return "layernorm";
    case UgoTarget::GeluScalar: return "gelu-scalar";
    case UgoTarget::Custom: return "custom";
  }
  return "?";
}

/// Per-dimension sampling interval.
using Domain = std::vector<std::pair<double, double>>;

/// Maps one input row to one output row.
using RowFunction = std::function<std::vector<double>(std::span<const double>)>;

struct UgoApproximator {
  AnnModel model;  // Linear -> ReLU -> Linear
  UgoTarget target = UgoTarget::Custom;
  Domain domain;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  double heldout_mse = 0.0;
};

struct UgoFitOptions {
  std::size_t steps = 4000;
  std::size_t batch_size = 128;
  double lr = 3e-3;
  double heldout_fraction = 0.2;
  bool refit_readout = true;  // least-squares solve of the last layer after Adam
  // Relative to the largest Gram diagonal. Large readout weights amplify the hidden
  // layer's quantization error once converted, so this is not just numerical jitter.
  double readout_ridge = 1e-4;
};

namespace detail {

// Replaces the readout of a Linear -> act -> Linear model by the ridge least-squares
// solution on the hidden features of `fit`, solved in double precision. The bias
// column is not penalised.
inline void refit_readout(AnnModel& model, const Dataset& fit, double ridge) {
  AnnModel body(std::vector<AnnLayer>(model.layers().begin(), model.layers().end() - 1));
  body.set_record_activations(false);
  const Tensor h = ann_forward(body, fit.inputs).output;
  const auto n = static_cast<Eigen::Index>(h.rows()), w = static_cast<Eigen::Index>(h.cols());
  const auto k = static_cast<Eigen::Index>(fit.targets.cols());
  Eigen::MatrixXd X(n, w + 1), Y(n, k);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) X(r, c) = h.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    X(r, w) = 1.0;
    for (Eigen::Index c = 0; c < k; ++c) Y(r, c) = fit.targets.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  }
  Eigen::MatrixXd gram = X.transpose() * X;
  const double shift = ridge * std::max(1.0, gram.diagonal().head(w).maxCoeff());
  gram.diagonal().head(w).array() += shift;
  gram(w, w) += 1e-12 * std::max(1.0, gram(w, w));
  const Eigen::MatrixXd beta = gram.ldlt().solve(X.transpose() * Y);
  if (!beta.allFinite()) return;  // keep the Adam solution
  auto& head = std::get<LinearLayer>(model.layers().back());
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index r = 0; r < w; ++r) head.weight.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(beta(r, c));
    head.bias[static_cast<std::size_t>(c)] = static_cast<float>(beta(w, c));
  }
}

}  // namespace detail

inline std::vector<double> layernorm_row(std::span<const double> x, double eps = 1e-5) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / std::sqrt(var + eps);
  return out;
}

inline std::vector<double> softmax_row(std::span<const double> x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(x[i] - mx);
  for (double& v : out) v /= z;
  return out;
}

inline RowFunction target_function(UgoTarget t) {
  switch (t) {
    case UgoTarget::SoftmaxRow: return [](std::span<const double> x) { return softmax_row(x); };
    case UgoTarget::LayerNorm: return [](std::span<const double> x) { return layernorm_row(x); };
    case UgoTarget::GeluScalar:
      return [](std::span<const double> x) { return std::vector<double>{ops::gelu_value(x[0])}; };
    case UgoTarget::Custom: break;
  }
  throw ParameterError("target_function: custom targets need an explicit function");
}

/// Samples the domain, evaluates the target, and fits a width-`width` two-layer
/// ReLU network by Adam on MSE. Reports MSE on a held-out sample.
inline UgoApproximator fit_ugo(const RowFunction& fn, UgoTarget tag, std::size_t width, std::size_t sample_count,
                               const Domain& domain, Rng& rng, const UgoFitOptions& opts = {}) {
  if (width < 1) throw ParameterError("fit_ugo: width must be >= 1");
  if (sample_count < 10) throw ParameterError("fit_ugo: need at least 10 samples");
  if (domain.empty()) throw ParameterError("fit_ugo: empty domain");
  const std::size_t d = domain.size();

  Rng draw = rng.substream("ugo-samples");
  Tensor xs({sample_count, d});
  for (std::size_t i = 0; i < sample_count; ++i)
    for (std::size_t j = 0; j < d; ++j) xs.at(i, j) = static_cast<float>(draw.uniform(domain[j].first, domain[j].second));

  std::vector<double> row(d);
  std::size_t out_dim = 0;
  std::vector<float> ys;
  for (std::size_t i = 0; i < sample_count; ++i) {
    for (std::size_t j = 0; j < d; ++j) row[j] = xs.at(i, j);
    std::vector<double> y = fn(row);
    if (i == 0) out_dim = y.size();
    if (y.size() != out_dim || out_dim == 0) throw DomainError("fit_ugo: target output width changes across inputs");
    for (double v : y) {
      if (!std::isfinite(v)) throw DomainError(std::string("fit_ugo: target ") + to_string(tag) + " is non-finite on the domain");
      ys.push_back(static_cast<float>(v));
    }
    if (!xs.all_finite()) throw DomainError("fit_ugo: non-finite sample inside the domain");
  }

  Dataset all;
  all.task = Task::Regression;
  all.inputs = xs;
  all.targets = Tensor({sample_count, out_dim}, std::move(ys));
  const auto n_held = std::max<std::size_t>(1, static_cast<std::size_t>(opts.heldout_fraction * sample_count));
  Dataset fit = all.slice(0, sample_count - n_held);
  Dataset held = all.slice(sample_count - n_held, sample_count);

  Rng init = rng.substream("ugo-init");
  UgoApproximator ugo;
  ugo.model = AnnModel::mlp({d, width, out_dim}, ActivationKind::ReLU, init);
  ugo.target = tag;
  ugo.domain = domain;
  ugo.in_dim = d;
  ugo.out_dim = out_dim;

  TrainConfig cfg;
  cfg.batch_size = opts.batch_size;
  cfg.lr = opts.lr;
  cfg.max_steps = opts.steps;
  cfg.epochs = (opts.steps * opts.batch_size) / std::max<std::size_t>(1, fit.size()) + 1;
  cfg.cosine_decay = true;
  Rng order = rng.substream("ugo-order");
  ugo.model = train_ann(std::move(ugo.model), fit, nullptr, cfg, order).model;
  if (opts.refit_readout) detail::refit_readout(ugo.model, fit, opts.readout_ridge);
  ugo.heldout_mse = evaluate_loss(ugo.model, held);
  return ugo;
}

inline UgoApproximator fit_ugo(UgoTarget tag, std::size_t width, std::size_t sample_count, const Domain& domain,
                               Rng& rng, const UgoFitOptions& opts = {}) {
  if (tag == UgoTarget::GeluScalar && domain.size() != 1) {
    throw ParameterError("fit_ugo: gelu-scalar takes a one-dimensional domain");
  }
  return fit_ugo(target_function(tag), tag, width, sample_count, domain, rng, opts);
}

}  // namespace fas
