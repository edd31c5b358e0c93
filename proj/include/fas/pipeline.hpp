// SPDX-License-Identifier: Apache-2.0
//
// End-to-end composition: stage 1 (QCFS replacement + fine-tuning), conversion,
// stage 2 (LWC then NWC), evaluation. Each stage rethrows failures tagged with
// its name.
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fas/calibrate.hpp"
#include "fas/diagnostics.hpp"
#include "fas/errors.hpp"
#include "fas/train.hpp"

namespace fas {

enum class Ablation { None, Lwc, Nwc, Both };

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::Lwc: return "lwc";
    case Ablation::Nwc: return "nwc";
    case Ablation::Both: return "both";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::None;
  if (s == "lwc") return Ablation::Lwc;
  if (s == "nwc") return Ablation::Nwc;
  if (s == "both") return Ablation::Both;
  throw ConfigError("unknown ablation '" + s + "' (expected none|lwc|nwc|both)");
}

inline bool uses_lwc(Ablation a) { return a == Ablation::Lwc || a == Ablation::Both; }
inline bool uses_nwc(Ablation a) { return a == Ablation::Nwc || a == Ablation::Both; }

struct PipelineConfig {
  std::size_t levels = 8;        // QCFS L
  std::size_t init_batch = 512;  // rows of the training split used to initialise lambda
  TrainConfig pretrain;          // analog ReLU/GELU training; epochs = 0 skips it
  TrainConfig stage1;
  CalibConfig calib;
  Ablation ablation = Ablation::Both;
};

template <class F>
auto run_stage(const char* stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

struct Stage1Result {
  AnnModel analog;  // trained ReLU/GELU model
  AnnModel qcfs;    // replaced and fine-tuned
  std::vector<EpochLog> pretrain_log;
  std::vector<EpochLog> finetune_log;
};

/// Trains the analog model (optional), swaps in QCFS and fine-tunes. `order`
/// drives minibatch shuffling for both trainings.
inline Stage1Result run_stage1(AnnModel analog, const Splits& data, const PipelineConfig& cfg, Rng& order) {
  Stage1Result r;
  if (cfg.pretrain.epochs > 0) {
    auto t = run_stage("train", [&] { return train_ann(std::move(analog), data.train, &data.test, cfg.pretrain, order); });
    analog = std::move(t.model);
    r.pretrain_log = std::move(t.epochs);
  }
  r.analog = analog;
  r.qcfs = run_stage("stage1", [&] {
    const std::size_t n = std::min(cfg.init_batch, data.train.size());
    return replace_activations(analog, cfg.levels, slice_rows(data.train.inputs, 0, n));
  });
  if (cfg.stage1.epochs > 0) {
    auto t = run_stage("stage1", [&] { return stage1_finetune(r.qcfs, data.train, &data.test, cfg.stage1, order); });
    r.qcfs = std::move(t.model);
    r.finetune_log = std::move(t.epochs);
  }
  return r;
}

struct LwcParams {
  std::vector<float> alpha;  // one per IF layer
  std::vector<float> beta;
};

/// Per-layer alpha/beta: explicit vectors win, then the spike-count heuristic
/// (measured on `probe`), then the configured defaults.
inline LwcParams choose_lwc_params(const AnnModel& ann, const Tensor& probe, const CalibConfig& cfg) {
  const std::size_t n = ann.activation_indices().size();
  LwcParams p;
  AnnForward fwd;
  if (cfg.alpha.empty() && cfg.alpha_heuristic) {
    AnnModel rec = ann;
    rec.set_record_activations(true);
    fwd = ann_forward(rec, probe);
  }
  const auto lambdas = ann.lambdas();
  for (std::size_t k = 0; k < n; ++k) {
    if (!cfg.alpha.empty()) {
      p.alpha.push_back(detail::per_layer(cfg.alpha, k, cfg.default_alpha));
    } else if (cfg.alpha_heuristic) {
      p.alpha.push_back(select_alpha({theoretical_spike_count(fwd.activations[k], lambdas[k], cfg.timesteps)},
                                     cfg.timesteps));
    } else {
      p.alpha.push_back(cfg.default_alpha);
    }
    p.beta.push_back(detail::per_layer(cfg.beta, k, cfg.default_beta));
  }
  return p;
}

struct Stage2Result {
  SnnNetwork converted;  // straight after conversion
  SnnNetwork snn;        // after the enabled calibration passes
  LwcParams lwc;         // empty when LWC is disabled
  std::vector<CalibLogRecord> log;
};

/// LWC and/or NWC applied to an already converted network.
inline Stage2Result calibrate_converted(const SnnNetwork& converted, const AnnModel& qcfs, const Dataset& calib,
                                        const CalibConfig& cfg, Ablation ablation,
                                        const std::function<void(const CalibLogRecord&)>& on_step = nullptr) {
  Stage2Result r;
  run_stage("calibrate", [&] { cfg.validate(); return 0; });
  r.converted = converted;
  r.snn = converted;
  r.snn.set_timesteps(cfg.timesteps);
  if (uses_lwc(ablation)) {
    const std::size_t n = std::min<std::size_t>(calib.size(), 2048);
    r.lwc = run_stage("lwc", [&] { return choose_lwc_params(qcfs, slice_rows(calib.inputs, 0, n), cfg); });
    r.snn = run_stage("lwc", [&] { return lwc(r.snn, r.lwc.alpha, r.lwc.beta); });
  }
  if (uses_nwc(ablation)) {
    auto res = run_stage("nwc", [&] { return nwc_calibrate(r.snn, qcfs, calib, cfg, on_step); });
    r.snn = std::move(res.net);
    r.log = std::move(res.log);
  }
  return r;
}

inline Stage2Result run_stage2(const AnnModel& qcfs, const Dataset& calib, const CalibConfig& cfg, Ablation ablation,
                               const std::function<void(const CalibLogRecord&)>& on_step = nullptr) {
  const SnnNetwork converted = run_stage("convert", [&] { return convert(qcfs, cfg.timesteps); });
  return calibrate_converted(converted, qcfs, calib, cfg, ablation, on_step);
}

/// Scalar metrics of an SNN against its QCFS teacher on `test`, simulated for T steps.
/// L_all is always measured over the full horizon (window and denominator T).
inline std::map<std::string, double> evaluate_snn(const SnnNetwork& snn, const AnnModel& qcfs, const Dataset& test,
                                                  const CalibConfig& cfg) {
  return run_stage("eval", [&] {
    std::map<std::string, double> m;
    const std::size_t T = cfg.timesteps;
    const Tensor pred = snn_predict(snn, test.inputs, T);
    AnnModel plain = qcfs;
    plain.set_record_activations(false);
    const Tensor ann_out = ann_forward(plain, test.inputs).output;
    if (test.task == Task::Classification) {
      m["snn_accuracy"] = accuracy_of(pred, test.labels);
    } else {
      m["snn_mse"] = mse(pred, test.targets);
    }
    const auto lp = calibration_loss(snn, qcfs, test.inputs, T, T, DenominatorMode::Rho, cfg.lambda1, cfg.lambda2,
                                     cfg.temperature);
    m["l_all"] = lp.total;
    m["l_align"] = lp.align;
    m["l_logits"] = lp.logits;
    m["output_cosine"] = output_cosine(ann_out, pred);
    m["timesteps"] = static_cast<double>(T);
    return m;
  });
}

/// Task metric of an analog model: accuracy for classification, MSE for regression.
inline double ann_task_metric(const AnnModel& model, const Dataset& data) {
  return data.task == Task::Classification ? evaluate_accuracy(model, data) : evaluate_loss(model, data);
}

struct PipelineResult {
  Stage1Result stage1;
  Stage2Result stage2;
  ErrorReport errors;
  std::map<std::string, double> metrics;
};

/// Error decomposition of a converted SNN on (at most 1000 rows of) `data`.
inline ErrorReport measure_errors(const SnnNetwork& snn, const AnnModel& qcfs, const Dataset& data, std::size_t timesteps) {
  return run_stage("analyze", [&] {
    const Tensor x = slice_rows(data.inputs, 0, std::min<std::size_t>(data.size(), 1000));
    AnnModel rec = qcfs;
    rec.set_record_activations(true);
    SnnNetwork net = snn;
    const SpikeRecord sr = simulate(net, x, timesteps);
    return decompose_errors(ann_forward(rec, x), sr, net);
  });
}

inline PipelineResult run_pipeline(AnnModel analog, const Splits& data, const PipelineConfig& cfg, Rng& order,
                                   const std::function<void(const CalibLogRecord&)>& on_step = nullptr) {
  PipelineResult r;
  r.stage1 = run_stage1(std::move(analog), data, cfg, order);
  r.stage2 = run_stage2(r.stage1.qcfs, data.calib, cfg.calib, cfg.ablation, on_step);
  r.errors = measure_errors(r.stage2.snn, r.stage1.qcfs, data.test, cfg.calib.timesteps);
  r.metrics = evaluate_snn(r.stage2.snn, r.stage1.qcfs, data.test, cfg.calib);
  const char* suffix = data.test.task == Task::Classification ? "accuracy" : "mse";
  r.metrics[std::string("ann_") + suffix] = ann_task_metric(r.stage1.analog, data.test);
  r.metrics[std::string("qcfs_") + suffix] = ann_task_metric(r.stage1.qcfs, data.test);
  return r;
}

struct AblationRow {
  Ablation ablation = Ablation::None;
  std::map<std::string, double> metrics;
};

/// Stage 2 under each of none / LWC / NWC / both from one shared stage-1 model.
inline std::vector<AblationRow> run_ablation_grid(const AnnModel& qcfs, const Splits& data, const CalibConfig& cfg) {
  std::vector<AblationRow> rows;
  for (Ablation a : {Ablation::None, Ablation::Lwc, Ablation::Nwc, Ablation::Both}) {
    const Stage2Result s2 = run_stage2(qcfs, data.calib, cfg, a);
    rows.push_back({a, evaluate_snn(s2.snn, qcfs, data.test, cfg)});
  }
  return rows;
}

}  // namespace fas
