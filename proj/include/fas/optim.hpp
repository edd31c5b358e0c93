// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

#include "fas/errors.hpp"
#include "fas/tensor.hpp"

namespace fas {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW); 0 disables
};

template <class T>
struct AdamState {
  BasicTensor<T> m;
  BasicTensor<T> v;
  std::size_t step = 0;
};

/// One AdamW update of `param` in place.
template <class T>
void adam_step(BasicTensor<T>& param, const BasicTensor<T>& grad, AdamState<T>& state, const AdamConfig& cfg) {
  if (param.shape() != grad.shape()) {
    throw ParameterError("adam_step: parameter " + shape_str(param.shape()) + " vs gradient " +
                         shape_str(grad.shape()));
  }
  if (state.m.empty() && state.v.empty()) {
    state.m = BasicTensor<T>(param.shape());
    state.v = BasicTensor<T>(param.shape());
  } else if (state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw ParameterError("adam_step: optimizer state shape " + shape_str(state.m.shape()) +
                         " vs parameter " + shape_str(param.shape()));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    double p = static_cast<double>(param[i]);
    p -= cfg.lr * cfg.weight_decay * p;
    p -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    param[i] = static_cast<T>(p);
  }
}

}  // namespace fas
