// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over an explicit tape. Nodes are appended in
// evaluation order, so the node id order is a valid topological order and
// backward is a single reverse sweep.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fas/errors.hpp"
#include "fas/tensor.hpp"

namespace fas {

using NodeId = std::size_t;

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  /// Maps the upstream gradient to one gradient per input (empty tensor = none).
  using BackwardFn = std::function<std::vector<TensorT>(const TensorT& grad_out)>;

  struct Node {
    const char* op;
    TensorT value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(TensorT value) { return push("constant", std::move(value), {}, nullptr, false); }
  Var<T> parameter(TensorT value) { return push("parameter", std::move(value), {}, nullptr, true); }

  Var<T> push(const char* op, TensorT value, std::vector<NodeId> inputs, BackwardFn backward,
              std::optional<bool> requires_grad = std::nullopt) {
    bool needs = requires_grad.value_or(false);
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) {
        throw InternalError(std::string("tape: node '") + op + "' references undefined node " +
                            std::to_string(in) + " (tape has " + std::to_string(nodes_.size()) + ")");
      }
      if (!requires_grad) needs = needs || nodes_[in].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), std::move(backward), needs});
    return Var<T>{this, nodes_.size() - 1};
  }

  const TensorT& value(NodeId id) const { return node(id).value; }
  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw InternalError("tape: undefined node " + std::to_string(id));
    return nodes_[id];
  }
  std::size_t size() const noexcept { return nodes_.size(); }

  void check_owner(const Var<T>& v) const {
    if (v.tape != this) throw InternalError("tape: variable belongs to a different tape");
    node(v.id);
  }

 private:
  std::vector<Node> nodes_;
};

/// Gradient map produced by backward. Nodes that received no gradient report zeros.
template <class T>
class Gradients {
 public:
  using TensorT = BasicTensor<T>;

  explicit Gradients(const Tape<T>& tape) : tape_(&tape), grads_(tape.size()) {}

  TensorT of(const Var<T>& v) const { return of(v.id); }
  TensorT of(NodeId id) const {
    if (id >= grads_.size()) throw InternalError("gradients: undefined node " + std::to_string(id));
    if (grads_[id]) return *grads_[id];
    return TensorT(tape_->value(id).shape());
  }
  bool has(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }

  void accumulate(NodeId id, TensorT g) {
    auto& slot = grads_.at(id);
    if (!slot) {
      slot = std::move(g);
    } else {
      detail::require_same_shape(*slot, g, "gradient accumulation");
      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
    }
  }

  std::optional<TensorT>& slot(NodeId id) { return grads_.at(id); }

 private:
  const Tape<T>* tape_;
  std::vector<std::optional<TensorT>> grads_;
};

/// d(output)/d(node) for every node on the tape. A scalar output needs no seed.
template <class T>
Gradients<T> backward(Tape<T>& tape, Var<T> output, std::optional<BasicTensor<T>> seed = std::nullopt) {
  tape.check_owner(output);
  const auto& out_value = tape.value(output.id);
  BasicTensor<T> g0;
  if (seed) {
    detail::require_same_shape(*seed, out_value, "backward seed");
    g0 = std::move(*seed);
  } else {
    if (out_value.size() != 1) {
      throw DimensionError("backward: non-scalar output " + shape_str(out_value.shape()) + " needs a seed");
    }
    g0 = BasicTensor<T>(out_value.shape(), T{1});
  }
  Gradients<T> grads(tape);
  grads.accumulate(output.id, std::move(g0));
  for (NodeId id = output.id + 1; id-- > 0;) {
    const auto& node = tape.node(id);
    if (!node.requires_grad || !node.backward || !grads.has(id)) continue;
    const auto& g = *grads.slot(id);
    std::vector<BasicTensor<T>> in_grads = node.backward(g);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      if (k < in_grads.size() && !in_grads[k].empty() && tape.node(node.inputs[k]).requires_grad) {
        grads.accumulate(node.inputs[k], std::move(in_grads[k]));
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace ops {

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  BasicTensor<T> av = a.value(), bv = b.value();
  return tape.push("matmul", fas::matmul(av, bv), {a.id, b.id},
                   [av, bv](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                     return {fas::matmul(g, transpose(bv)), fas::matmul(transpose(av), g)};
                   });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return a.tape->push("add", a.value() + b.value(), {a.id, b.id},
                      [](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> { return {g, g}; });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return a.tape->push("sub", a.value() - b.value(), {a.id, b.id},
                      [](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> { return {g, g * T{-1}}; });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  BasicTensor<T> av = a.value(), bv = b.value();
  return a.tape->push("mul", hadamard(av, bv), {a.id, b.id},
                      [av, bv](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {hadamard(g, bv), hadamard(g, av)};
                      });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return a.tape->push("scale", a.value() * s, {a.id},
                      [s](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> { return {g * s}; });
}

/// a[B, N] + v[N] broadcast over rows.
template <class T>
Var<T> add_row(Var<T> a, Var<T> v) {
  return a.tape->push("add_row", fas::add_row(a.value(), v.value()), {a.id, v.id},
                      [](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {g, column_sum(g)};
                      });
}

/// a[B, N] * v[N] broadcast over rows.
template <class T>
Var<T> mul_row(Var<T> a, Var<T> v) {
  BasicTensor<T> av = a.value(), vv = v.value();
  return a.tape->push("mul_row", fas::mul_row(av, vv), {a.id, v.id},
                      [av, vv](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {fas::mul_row(g, vv), column_sum(hadamard(g, av))};
                      });
}

template <class T>
Var<T> detach(Var<T> a) {
  return a.tape->push("detach", a.value(), {}, nullptr, false);
}

template <class T>
Var<T> relu(Var<T> a) {
  BasicTensor<T> av = a.value();
  return a.tape->push("relu", map(av, [](T x) { return x > T{0} ? x : T{0}; }), {a.id},
                      [av](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {zip(g, av, [](T gi, T x) { return x > T{0} ? gi : T{0}; })};
                      });
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
Var<T> gelu(Var<T> a) {
  BasicTensor<T> av = a.value();
  return a.tape->push("gelu", map(av, [](T x) { return gelu_value(x); }), {a.id},
                      [av](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {zip(g, av, [](T gi, T x) { return gi * gelu_derivative(x); })};
                      });
}

template <class T>
Var<T> tanh(Var<T> a) {
  BasicTensor<T> yv = map(a.value(), [](T x) { return std::tanh(x); });
  return a.tape->push("tanh", yv, {a.id}, [yv](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
    return {zip(g, yv, [](T gi, T y) { return gi * (T{1} - y * y); })};
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  const Shape shape = a.shape();
  return a.tape->push("sum", BasicTensor<T>::scalar(fas::sum(a.value())), {a.id},
                      [shape](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {BasicTensor<T>(shape, g[0])};
                      });
}

template <class T>
Var<T> mean(Var<T> a) {
  const Shape shape = a.shape();
  const T n = static_cast<T>(a.value().size());
  return a.tape->push("mean", BasicTensor<T>::scalar(fas::mean(a.value())), {a.id},
                      [shape, n](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {BasicTensor<T>(shape, g[0] / n)};
                      });
}

/// mean((a - b)^2) as a scalar node.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  BasicTensor<T> diff = a.value() - b.value();
  const T n = static_cast<T>(diff.size());
  T acc{0};
  for (T d : diff.data()) acc += d * d;
  return a.tape->push("mse", BasicTensor<T>::scalar(acc / n), {a.id, b.id},
                      [diff, n](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        BasicTensor<T> ga = diff * (T{2} * g[0] / n);
                        return {ga, ga * T{-1}};
                      });
}

template <class T>
Var<T> add_scalar_nodes(Var<T> a, Var<T> b, T wa, T wb) {
  return a.tape->push("weighted_sum", BasicTensor<T>::scalar(wa * a.value().item() + wb * b.value().item()),
                      {a.id, b.id}, [wa, wb](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        return {BasicTensor<T>::scalar(wa * g[0]), BasicTensor<T>::scalar(wb * g[0])};
                      });
}

}  // namespace ops

/// Row-wise softmax of logits / temperature, computed stably in T precision.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits, T temperature = T{1}) {
  const std::size_t n = logits.rows(), c = logits.cols();
  BasicTensor<T> out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    T mx = logits[r * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[r * c + j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) {
      out[r * c + j] = std::exp((logits[r * c + j] - mx) / temperature);
      z += out[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  return out;
}

template <class T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& logits, T temperature = T{1}) {
  const std::size_t n = logits.rows(), c = logits.cols();
  BasicTensor<T> out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    T mx = logits[r * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[r * c + j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp((logits[r * c + j] - mx) / temperature);
    const T lz = std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (logits[r * c + j] - mx) / temperature - lz;
  }
  return out;
}

namespace ops {

/// Batch mean of -sum_i softmax(target/temp)_i * log softmax(logits/temp)_i.
template <class T>
Var<T> soft_cross_entropy(Var<T> target_logits, Var<T> logits, T temperature) {
  const auto& lv = logits.value();
  detail::require_same_shape(target_logits.value(), lv, "soft_cross_entropy");
  const std::size_t n = lv.rows(), c = lv.cols();
  BasicTensor<T> p = softmax_rows(target_logits.value(), temperature);
  BasicTensor<T> logq = log_softmax_rows(lv, temperature);
  T loss{0};
  for (std::size_t i = 0; i < p.size(); ++i) loss -= p[i] * logq[i];
  loss /= static_cast<T>(n);
  return logits.tape->push(
      "soft_cross_entropy", BasicTensor<T>::scalar(loss), {target_logits.id, logits.id},
      [p, logq, n, c, temperature](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
        const T k = g[0] / (static_cast<T>(n) * temperature);
        BasicTensor<T> g_logits(p.shape()), g_target(p.shape());
        for (std::size_t r = 0; r < n; ++r) {
          T cross{0};
          for (std::size_t j = 0; j < c; ++j) cross += p[r * c + j] * logq[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            g_logits[i] = k * (std::exp(logq[i]) - p[i]);
            g_target[i] = -k * p[i] * (logq[i] - cross);
          }
        }
        return {g_target, g_logits};
      });
}

/// Batch mean cross-entropy against integer class labels.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  const auto& lv = logits.value();
  const std::size_t n = lv.rows(), c = lv.cols();
  if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match batch");
  BasicTensor<T> logq = log_softmax_rows(lv);
  T loss{0};
  std::vector<std::size_t> y(labels.begin(), labels.end());
  for (std::size_t r = 0; r < n; ++r) {
    if (y[r] >= c) throw ParameterError("cross_entropy: label out of range");
    loss -= logq[r * c + y[r]];
  }
  loss /= static_cast<T>(n);
  return logits.tape->push("cross_entropy", BasicTensor<T>::scalar(loss), {logits.id},
                           [logq, y, n, c](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                             BasicTensor<T> out(logq.shape());
                             const T k = g[0] / static_cast<T>(n);
                             for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * std::exp(logq[i]);
                             for (std::size_t r = 0; r < n; ++r) out[r * c + y[r]] -= k;
                             return {out};
                           });
}

/// Looks up `context` token rows per sample and concatenates them: [B, context * dim].
template <class T>
Var<T> embedding(Var<T> table, const BasicTensor<T>& token_ids) {
  const auto& tv = table.value();
  const std::size_t vocab = tv.dim(0), dim = tv.dim(1);
  const std::size_t n = token_ids.rows(), ctx = token_ids.cols();
  std::vector<std::size_t> ids(token_ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T raw = token_ids[i];
    if (!(raw >= T{0}) || static_cast<std::size_t>(raw) >= vocab) {
      throw ParameterError("embedding: token id " + std::to_string(raw) + " outside vocabulary");
    }
    ids[i] = static_cast<std::size_t>(raw);
  }
  BasicTensor<T> out({n, ctx * dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data().begin() + ids[i] * dim, dim, out.data().begin() + i * dim);
  }
  const Shape table_shape = tv.shape();
  return table.tape->push("embedding", std::move(out), {table.id},
                          [ids, dim, table_shape](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                            BasicTensor<T> gt(table_shape);
                            for (std::size_t i = 0; i < ids.size(); ++i)
                              for (std::size_t d = 0; d < dim; ++d) gt[ids[i] * dim + d] += g[i * dim + d];
                            return {gt};
                          });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Non-standard gradients: QCFS straight-through and spike surrogate
// ---------------------------------------------------------------------------

/// Rectangular surrogate: g = (1/theta) * 1{|v - theta| < half_width * theta}.
struct SurrogateSpec {
  double half_width = 0.5;

  void validate() const {
    if (!(half_width > 0.0 && half_width <= 1.0)) {
      throw ParameterError("surrogate half-width must lie in (0, 1], got " + std::to_string(half_width));
    }
  }
};

template <class T>
T surrogate_value(T v, T theta, const SurrogateSpec& spec) {
  return std::abs(v - theta) < static_cast<T>(spec.half_width) * theta ? T{1} / theta : T{0};
}

/// Elementwise surrogate derivative of the spike function for v[B, N] and theta[N] (or theta shaped like v).
template <class T>
BasicTensor<T> surrogate_spike_grad(const BasicTensor<T>& v, const BasicTensor<T>& theta, const SurrogateSpec& spec) {
  spec.validate();
  const bool per_column = theta.size() != v.size();
  if (per_column && theta.size() != v.cols()) {
    throw DimensionError("surrogate_spike_grad: theta " + shape_str(theta.shape()) + " vs v " + shape_str(v.shape()));
  }
  for (T th : theta.data()) {
    if (!(th > T{0})) throw ParameterError("surrogate_spike_grad: threshold must be positive");
  }
  BasicTensor<T> out(v.shape());
  const std::size_t m = v.cols();
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = surrogate_value(v[i], per_column ? theta[i % m] : theta[i], spec);
  }
  return out;
}

/// Scalar QCFS: clip(lambda/L * floor(x*L/lambda + 1/2), 0, lambda).
template <class T>
T qcfs_value(T x, T lambda, std::size_t levels) {
  const T l = static_cast<T>(levels);
  const T q = lambda / l * std::floor(x * l / lambda + T(0.5));
  return std::clamp(q, T{0}, lambda);
}

namespace ops {

/// Heaviside spike H(v - theta) (ties fire). Forward is exact; backward uses the
/// surrogate for both v (+g) and theta (-g, summed over the batch).
template <class T>
Var<T> spike(Var<T> v, Var<T> theta, const SurrogateSpec& spec) {
  const auto& vv = v.value();
  const auto& th = theta.value();
  if (th.size() != vv.cols()) {
    throw DimensionError("spike: theta " + shape_str(th.shape()) + " vs potential " + shape_str(vv.shape()));
  }
  const std::size_t m = vv.cols();
  BasicTensor<T> s(vv.shape());
  for (std::size_t i = 0; i < vv.size(); ++i) s[i] = vv[i] >= th[i % m] ? T{1} : T{0};
  BasicTensor<T> sg = surrogate_spike_grad(vv, th, spec);
  return v.tape->push("spike", std::move(s), {v.id, theta.id},
                      [sg](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        BasicTensor<T> gv = hadamard(g, sg);
                        return {gv, column_sum(gv) * T{-1}};
                      });
}

/// QCFS with a trainable per-layer lambda (shape [1]). The floor uses a
/// straight-through estimator: d/dx = 1 strictly inside (0, lambda), 0 where
/// clipped; d/dlambda = q/lambda - x/lambda inside, 1 above, 0 below.
template <class T>
Var<T> qcfs(Var<T> x, Var<T> lambda, std::size_t levels) {
  const T lam = lambda.value().item();
  if (!(lam > T{0}) || levels < 1) throw ParameterError("qcfs: require lambda > 0 and L >= 1");
  BasicTensor<T> xv = x.value();
  BasicTensor<T> y = map(xv, [lam, levels](T xi) { return qcfs_value(xi, lam, levels); });
  return x.tape->push("qcfs", y, {x.id, lambda.id},
                      [xv, y, lam](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> {
                        BasicTensor<T> gx(xv.shape());
                        T glam{0};
                        for (std::size_t i = 0; i < xv.size(); ++i) {
                          const T xi = xv[i];
                          if (xi > T{0} && xi < lam) {
                            gx[i] = g[i];
                            glam += g[i] * (y[i] - xi) / lam;
                          } else if (xi >= lam) {
                            glam += g[i];
                          }
                        }
                        return {gx, BasicTensor<T>::scalar(glam)};
                      });
}

/// Elementwise floor with identity gradient (the raw STE primitive).
template <class T>
Var<T> ste_floor(Var<T> u) {
  return u.tape->push("ste_floor", map(u.value(), [](T x) { return std::floor(x); }), {u.id},
                      [](const BasicTensor<T>& g) -> std::vector<BasicTensor<T>> { return {g}; });
}

}  // namespace ops

}  // namespace fas
