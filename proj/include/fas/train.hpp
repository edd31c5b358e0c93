// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "fas/ann_model.hpp"
#include "fas/autodiff.hpp"
#include "fas/dataset.hpp"
#include "fas/optim.hpp"
#include "fas/rng.hpp"

namespace fas {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0: no cap
  std::size_t batch_size = 64;
  double lr = 1e-3;           // weights and biases
  double lr_lambda = 1e-2;    // QCFS ceilings
  double weight_decay = 0.0;
  bool cosine_decay = false;  // anneal both rates to 0 over the run
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  AnnModel model;
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  std::size_t steps = 0;
};

inline Var<float> task_loss(Var<float> output, const Dataset& batch) {
  if (batch.task == Task::Classification) return ops::cross_entropy(output, batch.labels);
  return ops::mse(output, output.tape->constant(batch.targets));
}

/// Mean loss of the model over a dataset (no gradient).
inline double evaluate_loss(const AnnModel& model, const Dataset& data, std::size_t batch_size = 512) {
  if (data.size() == 0) return 0.0;
  AnnModel m = model;
  m.set_record_activations(false);
  double acc = 0.0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    Dataset part = data.slice(b, e);
    Tape<float> tape;
    Var<float> out = tape.constant(ann_forward(m, part.inputs).output);
    acc += static_cast<double>(task_loss(out, part).value().item()) * static_cast<double>(e - b);
  }
  return acc / static_cast<double>(data.size());
}

inline double accuracy_of(const Tensor& logits, std::span<const std::size_t> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline double evaluate_accuracy(const AnnModel& model, const Dataset& data) {
  AnnModel m = model;
  m.set_record_activations(false);
  return accuracy_of(ann_forward(m, data.inputs).output, data.labels);
}

namespace detail {

inline std::string first_nonfinite_layer(const AnnModel& model, const Tensor& inputs) {
  for (std::size_t i = 0; i < model.size(); ++i) {
    AnnModel one(std::vector<AnnLayer>(model.layers().begin(), model.layers().begin() + static_cast<long>(i) + 1));
    one.set_record_activations(false);
    if (!ann_forward(one, inputs).output.all_finite()) return "layer " + std::to_string(i);
  }
  return "loss only (all layer outputs finite)";
}

}  // namespace detail

/// Minibatch Adam on the task loss. Weights use `lr`, QCFS ceilings use `lr_lambda`.
inline TrainResult train_ann(AnnModel model, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                             Rng& rng) {
  if (train.size() == 0) throw ParameterError("train_ann: empty dataset");
  if (cfg.batch_size == 0) throw ParameterError("train_ann: batch size must be positive");
  TrainResult result;
  std::map<std::pair<std::size_t, int>, AdamState<float>> states;
  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    auto perm = rng.permutation<std::size_t>(train.size());
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t b = 0; b < train.size() && step < total; b += cfg.batch_size) {
      const std::size_t e = std::min(train.size(), b + cfg.batch_size);
      Dataset batch = train.subset(std::span<const std::size_t>(perm).subspan(b, e - b));
      Tape<float> tape;
      AnnParams params = bind_params(tape, model);
      auto fwd = ann_forward_tape(tape, model, params, batch.inputs);
      Var<float> loss = task_loss(fwd.output, batch);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + "; first non-finite output at " +
                            detail::first_nonfinite_layer(model, batch.inputs));
      }
      result.step_losses.push_back(lv);
      epoch_loss += lv;
      ++epoch_batches;
      Gradients<float> grads = backward(tape, loss);

      const double frac = total > 1 ? static_cast<double>(step) / static_cast<double>(total) : 0.0;
      const double sched = cfg.cosine_decay ? 0.5 * (1.0 + std::cos(std::numbers::pi * frac)) : 1.0;
      AdamConfig wcfg{cfg.lr * sched, 0.9, 0.999, 1e-8, cfg.weight_decay};
      AdamConfig lcfg{cfg.lr_lambda * sched};
      for (std::size_t i = 0; i < model.size(); ++i) {
        auto& layer = model.layers()[i];
        if (auto* lin = std::get_if<LinearLayer>(&layer)) {
          adam_step(lin->weight, grads.of(*params.weight[i]), states[{i, 0}], wcfg);
          adam_step(lin->bias, grads.of(*params.bias[i]), states[{i, 1}], wcfg);
        } else if (auto* act = std::get_if<ActivationLayer>(&layer); act && act->kind == ActivationKind::QCFS) {
          Tensor lam = Tensor::scalar(act->lambda);
          adam_step(lam, grads.of(*params.lambda[i]), states[{i, 2}], lcfg);
          act->lambda = std::max(lam[0], 1e-3f);
        } else if (auto* emb = std::get_if<EmbeddingLayer>(&layer)) {
          adam_step(emb->table, grads.of(*params.table[i]), states[{i, 3}], wcfg);
        }
      }
      ++step;
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : 0.0;
    log.val_loss = val ? evaluate_loss(model, *val) : 0.0;
    result.epochs.push_back(log);
  }
  result.steps = step;
  result.model = std::move(model);
  return result;
}

/// Stage 1: full-parameter fine-tuning of a QCFS-replaced model.
inline TrainResult stage1_finetune(AnnModel model, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                                   Rng& rng) {
  if (!model.is_qcfs()) {
    throw ParameterError("stage1_finetune: model must have every activation replaced by QCFS first");
  }
  return train_ann(std::move(model), train, val, cfg, rng);
}

}  // namespace fas
