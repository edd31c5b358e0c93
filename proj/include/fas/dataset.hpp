// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fas/ann_model.hpp"
#include "fas/errors.hpp"
#include "fas/rng.hpp"
#include "fas/tensor.hpp"

namespace fas {

enum class Task { Classification, Regression };

/// Inputs plus either class labels or regression targets.
struct Dataset {
  Task task = Task::Classification;
  Tensor inputs;                    // [N, d] (token ids for char-lm)
  std::vector<std::size_t> labels;  // classification
  Tensor targets;                   // regression, [N, k]
  std::size_t num_classes = 0;

  std::size_t size() const { return inputs.empty() ? 0 : inputs.dim(0); }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.task = task;
    out.num_classes = num_classes;
    out.inputs = take_rows(inputs, rows);
    if (task == Task::Classification) {
      out.labels.reserve(rows.size());
      for (auto r : rows) out.labels.push_back(labels.at(r));
    } else {
      out.targets = take_rows(targets, rows);
    }
    return out;
  }

  Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
    return subset(rows);
  }
};

struct Splits {
  Dataset train;
  Dataset calib;
  Dataset test;
};

/// Shuffles with `rng` and holds out `test_fraction` of the samples as the test split.
/// The calibration split is a copy of the training split unless `calib_fraction`
/// carves a separate part out of it.
inline Splits split_dataset(const Dataset& all, Rng& rng, double test_fraction = 0.1, double calib_fraction = 0.0) {
  const std::size_t n = all.size();
  if (n < 2) throw ParameterError("split_dataset: need at least two samples");
  auto perm = rng.permutation<std::size_t>(n);
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(test_fraction * n)));
  const std::size_t n_train = n - n_test;
  const auto n_calib = static_cast<std::size_t>(std::llround(calib_fraction * n_train));
  std::span<const std::size_t> p(perm);
  Splits s;
  s.test = all.subset(p.subspan(n_train, n_test));
  if (n_calib > 0) {
    s.train = all.subset(p.subspan(0, n_train - n_calib));
    s.calib = all.subset(p.subspan(n_train - n_calib, n_calib));
  } else {
    s.train = all.subset(p.subspan(0, n_train));
    s.calib = s.train;
  }
  return s;
}

struct TeacherSpec {
  std::size_t samples = 10000;
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t outputs = 4;  // classes, or regression targets
  Task task = Task::Classification;
};

/// Labels (or targets) come from a random ReLU MLP evaluated on N(0, 1) inputs.
/// The teacher's output bias is centred on a probe batch so classes are balanced.
inline Dataset make_teacher_dataset(const TeacherSpec& spec, Rng& rng) {
  Rng init = rng.substream("teacher-init");
  Rng draw = rng.substream("teacher-inputs");
  std::vector<std::size_t> dims = {spec.input_dim};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.outputs);
  AnnModel teacher = AnnModel::mlp(dims, ActivationKind::ReLU, init);
  teacher.set_record_activations(false);

  Dataset d;
  d.task = spec.task;
  d.inputs = rng_normal(draw, 1.0, {spec.samples, spec.input_dim});
  Tensor out = ann_forward(teacher, d.inputs).output;
  auto& head = std::get<LinearLayer>(teacher.layers().back());
  const Tensor centre = column_sum(out) * (-1.0f / static_cast<float>(spec.samples));
  head.bias = head.bias + centre;
  out = add_row(out, centre);
  if (spec.task == Task::Classification) {
    d.num_classes = spec.outputs;
    d.labels = argmax_rows(out);
  } else {
    d.targets = std::move(out);
  }
  return d;
}

/// Two Gaussian clusters at +/-offset along a random unit direction.
inline Dataset make_two_class_dataset(std::size_t samples, std::size_t dim, double offset, Rng& rng) {
  Rng draw = rng.substream("two-class");
  Tensor dir = rng_normal(draw, 1.0, {dim});
  double norm = 0.0;
  for (float v : dir.data()) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  Dataset d;
  d.num_classes = 2;
  d.inputs = rng_normal(draw, 1.0, {samples, dim});
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t y = draw.below(2);
    const double sign = y == 0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < dim; ++j) d.inputs.at(i, j) += static_cast<float>(sign * offset * dir[j] / norm);
    d.labels.push_back(y);
  }
  return d;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file: " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Byte-level next-character samples: each row holds `context` byte ids, the label is the next byte.
inline Dataset make_char_lm_dataset(const std::string& path, std::size_t context, std::size_t max_samples = 0) {
  const auto bytes = read_bytes(path);
  if (bytes.size() <= context) {
    throw IoError("corpus " + path + " has " + std::to_string(bytes.size()) + " bytes; need more than the context (" +
                  std::to_string(context) + ")");
  }
  std::size_t n = bytes.size() - context;
  if (max_samples > 0) n = std::min(n, max_samples);
  Dataset d;
  d.num_classes = 256;
  d.inputs = Tensor({n, context});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < context; ++j) d.inputs.at(i, j) = static_cast<float>(bytes[i + j]);
    d.labels[i] = bytes[i + context];
  }
  return d;
}

}  // namespace fas
