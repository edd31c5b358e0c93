// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "fas/ann_model.hpp"
#include "fas/errors.hpp"
#include "fas/snn.hpp"

namespace fas {

/// |tau_real * theta - tau_theor * lambda| / T
inline double temporal_error(double tau_real, double theta, double tau_theor, double lambda, std::size_t timesteps) {
  return std::abs(tau_real * theta - tau_theor * lambda) / static_cast<double>(timesteps);
}

struct LayerErrors {
  std::size_t layer = 0;          // index among IF layers
  double quantization = 0.0;      // mean |z - qcfs(z)| over z in [0, lambda]
  double clipping = 0.0;          // mean max(0, z - lambda)
  double temporal = 0.0;          // mean |tau_real theta - tau_theor lambda| / T
  double tau_real_mean = 0.0;
  double tau_theor_mean = 0.0;
  double a_max = 0.0;             // global max pre-activation over the measured data
};

struct ErrorReport {
  std::vector<LayerErrors> layers;
  std::size_t timesteps = 0;
};

/// Splits the conversion error of each IF layer into its quantization, clipping and
/// temporal parts. `ann` must come from a recording forward pass on the same inputs
/// that produced `rec`.
inline ErrorReport decompose_errors(const AnnForward& ann, const SpikeRecord& rec, const SnnNetwork& net) {
  const auto if_idx = net.if_indices();
  if (ann.activations.size() != rec.layers.size() || rec.layers.size() != if_idx.size()) {
    throw ParameterError("decompose_errors: ANN has " + std::to_string(ann.activations.size()) +
                         " activation layers, record has " + std::to_string(rec.layers.size()));
  }
  ErrorReport report;
  report.timesteps = rec.timesteps;
  const auto T = rec.timesteps;
  for (std::size_t k = 0; k < rec.layers.size(); ++k) {
    const Tensor& z = ann.pre_activations.at(k);
    const Tensor& a = ann.activations[k];
    if (a.rows() != rec.batch) {
      throw ParameterError("decompose_errors: ANN saw " + std::to_string(a.rows()) + " samples, SNN saw " +
                           std::to_string(rec.batch));
    }
    const IfLayer& ifl = net.if_layer(k);
    const double lam = ifl.lambda;
    const std::size_t levels = ifl.levels > 0 ? ifl.levels : T;
    const Tensor counts = rec.counts(k);
    const Tensor& theta = rec.layers[k].threshold;
    const std::size_t n = theta.size();

    LayerErrors e;
    e.layer = k;
    e.a_max = -INFINITY;
    std::size_t in_range = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double zi = z[i];
      e.a_max = std::max(e.a_max, zi);
      if (zi >= 0.0 && zi <= lam) {
        e.quantization += std::abs(zi - qcfs_value(zi, lam, levels));
        ++in_range;
      }
      e.clipping += std::max(0.0, zi - lam);
      const double tau_theor = static_cast<double>(a[i]) * static_cast<double>(T) / lam;
      const double tau_real = counts[i];
      e.temporal += temporal_error(tau_real, theta[i % n], tau_theor, lam, T);
      e.tau_real_mean += tau_real;
      e.tau_theor_mean += tau_theor;
    }
    const auto total = static_cast<double>(z.size());
    e.quantization = in_range ? e.quantization / static_cast<double>(in_range) : 0.0;
    e.clipping /= total;
    e.temporal /= total;
    e.tau_real_mean /= total;
    e.tau_theor_mean /= total;
    report.layers.push_back(e);
  }
  return report;
}

struct TauHistogram {
  std::size_t layer = 0;
  std::size_t timesteps = 0;
  std::vector<double> edges;         // bins + 1 edges over [0, T]
  std::vector<std::size_t> counts;   // last bin is closed on the right
  double fraction_at_most_half = 0;  // share of tau_theor <= T / 2
};

/// Histogram of tau_theor = a T / lambda for each activation layer; values outside
/// [0, T] land in the end bins. `bins` = 0 uses unit-width bins.
inline std::vector<TauHistogram> tau_histogram(const std::vector<Tensor>& acts, const std::vector<float>& lambdas,
                                               std::size_t timesteps, std::size_t bins = 0) {
  if (timesteps < 1) throw ParameterError("tau_histogram: T must be >= 1");
  if (acts.size() != lambdas.size()) throw ParameterError("tau_histogram: need one lambda per layer");
  if (bins == 0) bins = timesteps;
  std::vector<TauHistogram> out;
  for (std::size_t k = 0; k < acts.size(); ++k) {
    const Tensor tau = theoretical_spike_count(acts[k], lambdas[k], timesteps);
    TauHistogram h;
    h.layer = k;
    h.timesteps = timesteps;
    const double width = static_cast<double>(timesteps) / static_cast<double>(bins);
    for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(width * static_cast<double>(b));
    h.counts.assign(bins, 0);
    std::size_t half = 0;
    for (float t : tau.data()) {
      const double pos = std::floor(static_cast<double>(t) / width);
      const auto bin = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
      ++h.counts[bin];
      if (static_cast<double>(t) <= static_cast<double>(timesteps) / 2.0) ++half;
    }
    h.fraction_at_most_half = tau.empty() ? 0.0 : static_cast<double>(half) / static_cast<double>(tau.size());
    out.push_back(std::move(h));
  }
  return out;
}

struct LayerMse {
  std::size_t layer = 0;
  double mse_before = 0.0;
  double mse_after = 0.0;
  double reduction_pct = 0.0;
};

inline std::vector<LayerMse> layer_mse_report(const std::vector<Tensor>& acts, const std::vector<Tensor>& before,
                                              const std::vector<Tensor>& after) {
  if (acts.size() != before.size() || acts.size() != after.size()) {
    throw ParameterError("layer_mse_report: layer count mismatch (" + std::to_string(acts.size()) + ", " +
                         std::to_string(before.size()) + ", " + std::to_string(after.size()) + ")");
  }
  std::vector<LayerMse> out;
  for (std::size_t k = 0; k < acts.size(); ++k) {
    LayerMse m;
    m.layer = k;
    m.mse_before = mse(acts[k], before[k]);
    m.mse_after = mse(acts[k], after[k]);
    m.reduction_pct = m.mse_before > 0.0 ? 100.0 * (m.mse_before - m.mse_after) / m.mse_before : 0.0;
    out.push_back(m);
  }
  return out;
}

inline double output_cosine(const Tensor& ann_out, const Tensor& snn_out) {
  if (ann_out.size() != snn_out.size()) {
    throw DimensionError("output_cosine: sizes " + shape_str(ann_out.shape()) + " vs " + shape_str(snn_out.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ann_out.size(); ++i) {
    dot += static_cast<double>(ann_out[i]) * snn_out[i];
    na += static_cast<double>(ann_out[i]) * ann_out[i];
    nb += static_cast<double>(snn_out[i]) * snn_out[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("output_cosine: similarity undefined for a zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct NeuronShift {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  double theta_ratio = 1.0;
  double v0_after = 0.0;
};

struct ThresholdShiftReport {
  std::vector<NeuronShift> neurons;
  std::vector<double> ratio_edges;  // histogram of theta_after / theta_before
  std::vector<std::size_t> ratio_counts;
  std::vector<double> v0_edges;
  std::vector<std::size_t> v0_counts;
};

namespace detail {

inline void fill_histogram(const std::vector<double>& values, std::size_t bins, std::vector<double>& edges,
                           std::vector<std::size_t>& counts) {
  edges.clear();
  counts.assign(bins, 0);
  if (values.empty()) return;
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) edges.push_back(lo + w * static_cast<double>(b));
  for (double v : values) {
    const auto bin = static_cast<std::size_t>(std::clamp(std::floor((v - lo) / w), 0.0, static_cast<double>(bins - 1)));
    ++counts[bin];
  }
}

}  // namespace detail

inline ThresholdShiftReport threshold_shift_report(const SnnNetwork& before, const SnnNetwork& after, std::size_t bins = 20) {
  const auto bi = before.if_indices(), ai = after.if_indices();
  if (bi.size() != ai.size()) throw ParameterError("threshold_shift_report: IF layer count mismatch");
  ThresholdShiftReport r;
  std::vector<double> ratios, v0s;
  for (std::size_t k = 0; k < bi.size(); ++k) {
    const IfLayer& b = before.if_layer(k);
    const IfLayer& a = after.if_layer(k);
    if (a.width() != b.width()) throw ParameterError("threshold_shift_report: layer " + std::to_string(k) + " width mismatch");
    for (std::size_t i = 0; i < a.width(); ++i) {
      NeuronShift s{k, i, static_cast<double>(a.threshold[i]) / b.threshold[i], a.v_init[i]};
      ratios.push_back(s.theta_ratio);
      v0s.push_back(s.v0_after);
      r.neurons.push_back(s);
    }
  }
  detail::fill_histogram(ratios, bins, r.ratio_edges, r.ratio_counts);
  detail::fill_histogram(v0s, bins, r.v0_edges, r.v0_counts);
  return r;
}

// CSV exports ---------------------------------------------------------------

inline void write_errors_csv(std::ostream& os, const ErrorReport& r) {
  os << "layer,quant,clip,temporal\n";
  for (const auto& e : r.layers) os << e.layer << ',' << e.quantization << ',' << e.clipping << ',' << e.temporal << '\n';
}

inline void write_tau_csv(std::ostream& os, const std::vector<TauHistogram>& hs) {
  os << "layer,bin,count\n";
  for (const auto& h : hs)
    for (std::size_t b = 0; b < h.counts.size(); ++b) os << h.layer << ',' << b << ',' << h.counts[b] << '\n';
}

inline void write_layer_mse_csv(std::ostream& os, const std::vector<LayerMse>& ms) {
  os << "layer,mse_before,mse_after,reduction_pct\n";
  for (const auto& m : ms) os << m.layer << ',' << m.mse_before << ',' << m.mse_after << ',' << m.reduction_pct << '\n';
}

inline void write_threshold_shift_csv(std::ostream& os, const ThresholdShiftReport& r) {
  os << "layer,neuron,theta_ratio,v0\n";
  for (const auto& s : r.neurons) os << s.layer << ',' << s.neuron << ',' << s.theta_ratio << ',' << s.v0_after << '\n';
}

}  // namespace fas
