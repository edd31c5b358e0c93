// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: strict JSON (every key known, every type checked)
// with a schema_version field, plus the dataset and model factories it drives.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fas/ann_model.hpp"
#include "fas/calibrate.hpp"
#include "fas/dataset.hpp"
#include "fas/energy.hpp"
#include "fas/errors.hpp"
#include "fas/pipeline.hpp"
#include "fas/rng.hpp"

namespace fas {

inline constexpr int kSchemaVersion = 1;

/// A value of the right type outside its accepted range.
struct ConfigRangeError : ConfigError {
  using ConfigError::ConfigError;
};

struct ModelSpec {
  std::string kind = "mlp";  // mlp | char-lm
  std::vector<std::size_t> hidden = {64, 64};
  ActivationKind activation = ActivationKind::ReLU;
  std::size_t levels = 8;
  std::size_t embed_dim = 16;  // char-lm only
};

struct DatasetSpec {
  std::string kind;  // synthetic-teacher | two-class-synthetic | char-lm
  std::size_t samples = 10000;
  std::size_t input_dim = 8;
  std::size_t outputs = 4;
  std::vector<std::size_t> teacher_hidden = {64, 64};
  Task task = Task::Classification;
  double offset = 1.0;  // two-class cluster offset
  std::string path;     // char-lm corpus, resolved against the config file's directory
  std::size_t context = 8;
  std::size_t max_samples = 0;
  double test_fraction = 0.1;
  double calib_fraction = 0.0;  // 0: calibrate on the training split
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  ModelSpec model;
  DatasetSpec dataset;
  PipelineConfig pipeline;
  EnergyConstants energy;
  bool rho_explicit = false;  // false: rho follows T, including CLI overrides of T
  std::string source;         // raw config text, hashed into reports
};

namespace detail {

using nlohmann::json;

/// Walks one JSON object, records which keys were read, and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), key);
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError("missing required field " + child_path(key));
    return convert<T>(j_.at(key), key);
  }

  ObjectReader object(const std::string& key, bool required = false) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw ConfigError("missing required field " + child_path(key));
      return ObjectReader(empty(), child_path(key));
    }
    return ObjectReader(j_.at(key), child_path(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key \"" + k + "\" at " + where());
    }
  }

  std::string child_path(const std::string& key) const { return (path_ == "/" ? "" : path_) + "/" + key; }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  std::string where() const { return path_; }

  template <class T>
  T convert(const json& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, int>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(child_path(key) + " has the wrong type (" + std::string(v.type_name()) + ")");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::vector<float> float_or_list(ObjectReader& r, const std::string& key) {
  if (!r.has(key)) return {};
  const json& v = r.raw(key);
  std::vector<float> out;
  if (v.is_number()) {
    out.push_back(v.get<float>());
  } else if (v.is_array()) {
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(r.child_path(key) + " must hold numbers");
      out.push_back(e.get<float>());
    }
  } else {
    throw ConfigError(r.child_path(key) + " must be a number or a list of numbers");
  }
  return out;
}

inline std::vector<std::size_t> size_list(ObjectReader& r, const std::string& key, std::vector<std::size_t> fallback) {
  if (!r.has(key)) return fallback;
  const json& v = r.raw(key);
  if (!v.is_array()) throw ConfigError(r.child_path(key) + " must be a list of positive integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || e.get<long long>() < 1) {
      throw ConfigRangeError(r.child_path(key) + " entries must be positive integers");
    }
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

inline void range_check(bool ok, const std::string& path, const std::string& rule) {
  if (!ok) throw ConfigRangeError(path + " out of range: " + rule);
}

inline TrainConfig read_train(ObjectReader r, TrainConfig d) {
  d.epochs = r.get<std::size_t>("epochs", d.epochs);
  d.max_steps = r.get<std::size_t>("max_steps", d.max_steps);
  d.batch_size = r.get<std::size_t>("batch_size", d.batch_size);
  d.lr = r.get<double>("lr", d.lr);
  d.lr_lambda = r.get<double>("lr_lambda", d.lr_lambda);
  d.weight_decay = r.get<double>("weight_decay", d.weight_decay);
  d.cosine_decay = r.get<bool>("cosine_decay", d.cosine_decay);
  range_check(d.batch_size >= 1, r.child_path("batch_size"), "must be >= 1");
  range_check(d.lr >= 0.0, r.child_path("lr"), "must be >= 0");
  range_check(d.lr_lambda >= 0.0, r.child_path("lr_lambda"), "must be >= 0");
  r.finish();
  return d;
}

inline ActivationKind read_activation(const std::string& s, const std::string& path) {
  if (s == "relu") return ActivationKind::ReLU;
  if (s == "gelu") return ActivationKind::GELU;
  throw ConfigRangeError(path + " out of range: expected relu or gelu, got \"" + s + "\"");
}

}  // namespace detail

/// Parses and validates a config document. `base_dir` resolves relative corpus paths.
inline ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = ".") {
  using detail::range_check;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  cfg.source = text;
  detail::ObjectReader root(doc, "/");
  cfg.schema_version = root.require<int>("schema_version");
  if (cfg.schema_version != kSchemaVersion) {
    throw ConfigRangeError("/schema_version out of range: this build reads version " + std::to_string(kSchemaVersion) +
                           ", got " + std::to_string(cfg.schema_version));
  }
  cfg.seed = root.require<std::uint64_t>("seed");
  cfg.output_dir = root.get<std::string>("output_dir", cfg.output_dir);

  {
    auto m = root.object("model", true);
    cfg.model.kind = m.get<std::string>("kind", cfg.model.kind);
    range_check(cfg.model.kind == "mlp" || cfg.model.kind == "char-lm", m.child_path("kind"), "expected mlp or char-lm");
    cfg.model.hidden = detail::size_list(m, "hidden", cfg.model.hidden);
    range_check(!cfg.model.hidden.empty(), m.child_path("hidden"), "need at least one hidden layer");
    cfg.model.activation = detail::read_activation(m.get<std::string>("activation", "relu"), m.child_path("activation"));
    cfg.model.levels = m.get<std::size_t>("levels", cfg.model.levels);
    range_check(cfg.model.levels >= 1, m.child_path("levels"), "L must be >= 1");
    cfg.model.embed_dim = m.get<std::size_t>("embed_dim", cfg.model.embed_dim);
    range_check(cfg.model.embed_dim >= 1, m.child_path("embed_dim"), "must be >= 1");
    m.finish();
  }
  {
    auto d = root.object("dataset", true);
    auto& ds = cfg.dataset;
    ds.kind = d.require<std::string>("kind");
    range_check(ds.kind == "synthetic-teacher" || ds.kind == "two-class-synthetic" || ds.kind == "char-lm",
                d.child_path("kind"), "expected synthetic-teacher, two-class-synthetic or char-lm");
    ds.samples = d.get<std::size_t>("samples", ds.samples);
    ds.input_dim = d.get<std::size_t>("input_dim", ds.input_dim);
    ds.outputs = d.get<std::size_t>("outputs", ds.outputs);
    ds.teacher_hidden = detail::size_list(d, "teacher_hidden", ds.teacher_hidden);
    const auto task = d.get<std::string>("task", "classification");
    range_check(task == "classification" || task == "regression", d.child_path("task"),
                "expected classification or regression");
    ds.task = task == "classification" ? Task::Classification : Task::Regression;
    ds.offset = d.get<double>("offset", ds.offset);
    ds.context = d.get<std::size_t>("context", ds.context);
    ds.max_samples = d.get<std::size_t>("max_samples", ds.max_samples);
    ds.test_fraction = d.get<double>("test_fraction", ds.test_fraction);
    ds.calib_fraction = d.get<double>("calib_fraction", ds.calib_fraction);
    range_check(ds.samples >= 10, d.child_path("samples"), "need at least 10 samples");
    range_check(ds.input_dim >= 1 && ds.outputs >= 1, d.child_path("input_dim"), "dimensions must be >= 1");
    range_check(ds.test_fraction > 0.0 && ds.test_fraction < 1.0, d.child_path("test_fraction"), "must lie in (0, 1)");
    range_check(ds.calib_fraction >= 0.0 && ds.calib_fraction < 1.0, d.child_path("calib_fraction"), "must lie in [0, 1)");
    range_check(ds.context >= 1, d.child_path("context"), "must be >= 1");
    if (ds.kind == "char-lm") {
      const auto p = d.require<std::string>("path");
      std::filesystem::path full(p);
      if (full.is_relative()) full = base_dir / full;
      if (!std::filesystem::is_regular_file(full)) throw IoError("corpus file not found: " + full.string());
      ds.path = full.string();
    } else {
      ds.path = d.get<std::string>("path", "");
    }
    if (ds.kind == "two-class-synthetic" && !d.has("outputs")) ds.outputs = 2;
    if (ds.kind == "two-class-synthetic") range_check(ds.outputs == 2, d.child_path("outputs"), "two-class data has 2 outputs");
    d.finish();
    if (ds.kind == "char-lm" && cfg.model.kind != "char-lm") {
      throw ConfigRangeError("/model/kind out of range: char-lm data needs the char-lm model");
    }
    if (ds.kind != "char-lm" && cfg.model.kind == "char-lm") {
      throw ConfigRangeError("/model/kind out of range: the char-lm model needs char-lm data");
    }
  }
  {
    auto s1 = root.object("stage1");
    auto& p = cfg.pipeline;
    TrainConfig pre;
    pre.epochs = 30;
    pre.lr = 2e-3;
    pre.cosine_decay = true;
    TrainConfig ft = pre;
    ft.epochs = 10;
    ft.lr = 5e-4;
    ft.lr_lambda = 1e-2;
    p.pretrain = detail::read_train(s1.object("pretrain"), pre);
    p.stage1 = detail::read_train(s1.object("finetune"), ft);
    p.init_batch = s1.get<std::size_t>("init_batch", p.init_batch);
    range_check(p.init_batch >= 1, s1.child_path("init_batch"), "must be >= 1");
    s1.finish();
    p.levels = cfg.model.levels;
  }
  {
    auto s2 = root.object("stage2");
    auto& c = cfg.pipeline.calib;
    c.timesteps = s2.get<std::size_t>("timesteps", c.timesteps);
    range_check(c.timesteps >= 1, s2.child_path("timesteps"), "T must be >= 1");
    cfg.rho_explicit = s2.has("rho");
    c.rho = s2.get<std::size_t>("rho", c.timesteps);
    range_check(c.rho >= 1 && c.rho <= c.timesteps, s2.child_path("rho"), "rho must lie in [1, T]");
    c.alpha = detail::float_or_list(s2, "alpha");
    c.beta = detail::float_or_list(s2, "beta");
    for (float a : c.alpha) range_check(a > 0.0f && a <= 1.0f, s2.child_path("alpha"), "alpha must lie in (0, 1]");
    c.alpha_heuristic = s2.get<bool>("alpha_heuristic", c.alpha_heuristic);
    c.lambda1 = s2.get<double>("lambda1", c.lambda1);
    c.lambda2 = s2.get<double>("lambda2", c.lambda2);
    range_check(c.lambda1 >= 0.0 && c.lambda2 >= 0.0, s2.child_path("lambda1"), "loss weights must be >= 0");
    range_check(c.lambda1 > 0.0 || c.lambda2 > 0.0, s2.child_path("lambda2"), "lambda1 and lambda2 cannot both be 0");
    c.temperature = s2.get<double>("temperature", c.temperature);
    range_check(c.temperature > 0.0, s2.child_path("temperature"), "must be > 0");
    c.lr = s2.get<double>("lr", 0.05);
    range_check(c.lr >= 0.0, s2.child_path("lr"), "must be >= 0");
    c.steps = s2.get<std::size_t>("steps", 300);
    c.batch_size = s2.get<std::size_t>("batch_size", 128);
    range_check(c.batch_size >= 1, s2.child_path("batch_size"), "must be >= 1");
    const auto denom = s2.get<std::string>("denominator", "rho");
    range_check(denom == "rho" || denom == "T", s2.child_path("denominator"), "expected rho or T");
    c.denominator = denom == "rho" ? DenominatorMode::Rho : DenominatorMode::T;
    c.surrogate.half_width = s2.get<double>("surrogate_half_width", c.surrogate.half_width);
    range_check(c.surrogate.half_width > 0.0 && c.surrogate.half_width <= 1.0, s2.child_path("surrogate_half_width"),
                "must lie in (0, 1]");
    const auto abl = s2.get<std::string>("ablation", "both");
    try {
      cfg.pipeline.ablation = parse_ablation(abl);
    } catch (const ConfigError&) {
      throw ConfigRangeError(s2.child_path("ablation") + " out of range: expected none, lwc, nwc or both");
    }
    s2.finish();
    c.seed = cfg.seed;
  }
  {
    auto e = root.object("energy");
    cfg.energy.ac_pj = e.get<double>("ac_pj", cfg.energy.ac_pj);
    cfg.energy.mac_pj = e.get<double>("mac_pj", cfg.energy.mac_pj);
    range_check(cfg.energy.ac_pj >= 0.0 && cfg.energy.mac_pj >= 0.0, e.child_path("ac_pj"), "energies must be >= 0");
    e.finish();
  }
  root.finish();
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

/// Sets T and keeps rho tied to it unless rho was given explicitly.
inline void override_timesteps(ExperimentConfig& cfg, std::size_t T) {
  cfg.pipeline.calib.timesteps = T;
  if (!cfg.rho_explicit || cfg.pipeline.calib.rho > T) cfg.pipeline.calib.rho = T;
}

/// Builds the full dataset from `rng` (the "data" stream) and splits it 90/10 (by default).
inline Splits make_dataset(const DatasetSpec& spec, Rng& rng) {
  Dataset all;
  if (spec.kind == "synthetic-teacher") {
    TeacherSpec t;
    t.samples = spec.samples;
    t.input_dim = spec.input_dim;
    t.hidden = spec.teacher_hidden;
    t.outputs = spec.outputs;
    t.task = spec.task;
    all = make_teacher_dataset(t, rng);
  } else if (spec.kind == "two-class-synthetic") {
    all = make_two_class_dataset(spec.samples, spec.input_dim, spec.offset, rng);
  } else if (spec.kind == "char-lm") {
    all = make_char_lm_dataset(spec.path, spec.context, spec.max_samples);
  } else {
    throw ConfigError("unknown dataset kind \"" + spec.kind + "\"");
  }
  Rng split = rng.substream("split");
  return split_dataset(all, split, spec.test_fraction, spec.calib_fraction);
}

/// Fresh analog model for the configured architecture, initialised from `rng`.
inline AnnModel make_model(const ExperimentConfig& cfg, const Dataset& train, Rng& rng) {
  if (cfg.model.kind == "char-lm") {
    return AnnModel::char_lm(cfg.dataset.context, cfg.model.embed_dim, cfg.model.hidden.front(), cfg.model.activation, rng);
  }
  std::vector<std::size_t> dims = {train.inputs.cols()};
  dims.insert(dims.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
  dims.push_back(train.task == Task::Classification ? train.num_classes : train.targets.cols());
  return AnnModel::mlp(dims, cfg.model.activation, rng);
}

}  // namespace fas
