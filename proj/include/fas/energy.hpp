// SPDX-License-Identifier: Apache-2.0
//
// Synaptic operation counts and the AC/MAC energy comparison. Only linear
// layers fed by spikes are counted on either side; analog front layers (fed by
// the raw input or an embedding) are excluded, as are bias additions.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fas/errors.hpp"
#include "fas/snn.hpp"

namespace fas {

struct EnergyConstants {
  double ac_pj = 0.9;
  double mac_pj = 4.6;
};

struct OpCounts {
  std::uint64_t ac = 0;
  std::uint64_t mac = 0;
  std::vector<std::uint64_t> layer_ac;   // per IF layer
  std::vector<std::uint64_t> layer_mac;  // per spike-fed linear layer, in model order
};

struct EnergyReport {
  std::uint64_t ac_count = 0;
  std::uint64_t mac_count = 0;
  double snn_energy_pj = 0.0;
  double ann_energy_pj = 0.0;
  double ratio_percent = 0.0;
  std::vector<double> rates;  // per IF layer mean spike rate
};

namespace detail {

// Linear layers that receive the output of layer `i`, following residual sums.
inline void signal_consumers(const std::vector<SnnLayer>& layers, std::size_t i, std::vector<std::size_t>& out) {
  if (i + 1 < layers.size()) {
    const auto& next = layers[i + 1];
    if (std::holds_alternative<LinearLayer>(next)) out.push_back(i + 1);
    else if (std::holds_alternative<ResidualLayer>(next)) signal_consumers(layers, i + 1, out);
  }
  for (std::size_t r = i + 2; r < layers.size(); ++r) {
    auto* res = std::get_if<ResidualLayer>(&layers[r]);
    if (res && res->from == i) signal_consumers(layers, r, out);
  }
}

}  // namespace detail

/// For each IF layer (index among IF layers), the model indices of the linear layers
/// its spikes reach, directly or through residual additions.
inline std::vector<std::vector<std::size_t>> spike_consumers(const SnnNetwork& net) {
  std::vector<std::vector<std::size_t>> out;
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!std::holds_alternative<IfLayer>(layers[i])) continue;
    std::vector<std::size_t> c;
    detail::signal_consumers(layers, i, c);
    out.push_back(std::move(c));
  }
  return out;
}

/// Synapses per neuron of each IF layer: summed output width of its consumers.
inline std::vector<std::size_t> spiking_fan_out(const SnnNetwork& net) {
  std::vector<std::size_t> fan;
  for (const auto& c : spike_consumers(net)) {
    std::size_t f = 0;
    for (auto j : c) f += std::get<LinearLayer>(net.layers()[j]).out_features();
    fan.push_back(f);
  }
  return fan;
}

/// AC = sum over spikes of the firing neuron's fan-out. MAC = in*out of every linear
/// layer fed by spikes, once per sample per inference.
inline OpCounts count_ops(const SpikeRecord& rec, const SnnNetwork& net) {
  const auto fan = spiking_fan_out(net);
  if (fan.size() != rec.layers.size()) {
    throw ParameterError("count_ops: record has " + std::to_string(rec.layers.size()) + " IF layers, network has " +
                         std::to_string(fan.size()));
  }
  OpCounts c;
  for (std::size_t k = 0; k < fan.size(); ++k) {
    const auto& ls = rec.layers[k];
    if (ls.width != net.if_layer(k).width()) throw ParameterError("count_ops: layer width mismatch with record");
    const std::uint64_t ac = ls.total_spikes * fan[k];
    c.layer_ac.push_back(ac);
    c.ac += ac;
  }
  std::vector<std::size_t> fed;
  for (const auto& cons : spike_consumers(net)) fed.insert(fed.end(), cons.begin(), cons.end());
  std::sort(fed.begin(), fed.end());
  fed.erase(std::unique(fed.begin(), fed.end()), fed.end());
  for (auto j : fed) {
    const auto& lin = std::get<LinearLayer>(net.layers()[j]);
    const std::uint64_t mac = static_cast<std::uint64_t>(lin.in_features()) * lin.out_features() * rec.batch;
    c.layer_mac.push_back(mac);
    c.mac += mac;
  }
  return c;
}

/// Mean spike indicator over samples, neurons and timesteps for each IF layer.
inline std::vector<double> spike_rate_stats(const SpikeRecord& rec) {
  std::vector<double> out;
  for (const auto& ls : rec.layers) {
    const std::size_t n = ls.spikes.size();
    out.push_back(n ? static_cast<double>(ls.total_spikes) / static_cast<double>(n) : 0.0);
  }
  return out;
}

inline EnergyReport energy_report(const OpCounts& counts, const EnergyConstants& k = {}) {
  EnergyReport r;
  r.ac_count = counts.ac;
  r.mac_count = counts.mac;
  r.snn_energy_pj = k.ac_pj * static_cast<double>(counts.ac);
  r.ann_energy_pj = k.mac_pj * static_cast<double>(counts.mac);
  r.ratio_percent = r.ann_energy_pj > 0.0 ? 100.0 * r.snn_energy_pj / r.ann_energy_pj : 0.0;
  return r;
}

}  // namespace fas
