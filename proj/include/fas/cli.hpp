// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the `fas` executable. Every subcommand reads
// the config, regenerates the (deterministic) dataset, and reads/writes its
// artifacts under the output directory:
//
//   analog/ ann/ snn_converted/ snn/    checkpoints
//   calibration.jsonl lwc.json          stage-2 logs
//   metrics.json energy.json            evaluation
//   reports/*.csv reports/spikes/       diagnostics
#pragma once

#include <openssl/evp.h>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fas/calibrate.hpp"
#include "fas/checkpoint.hpp"
#include "fas/config.hpp"
#include "fas/diagnostics.hpp"
#include "fas/energy.hpp"
#include "fas/pipeline.hpp"

namespace fas::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// SHA-1 of "blob <size>\0<content>", the object id git assigns to a file.
inline std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw InternalError("git_blob_sha1: digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

struct Options {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> timesteps;
  std::optional<std::size_t> rho;
  std::optional<std::string> denominator;
  std::optional<std::string> ablate;
  std::optional<std::string> seeds;  // "A..B", pipeline only
};

/// Config file plus command-line overrides, with the dataset already generated.
struct Context {
  ExperimentConfig cfg;
  fs::path out;
  Splits data;
  std::string config_sha1;
};

inline ExperimentConfig load_config(const Options& o) {
  ExperimentConfig cfg = parse_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.pipeline.calib.seed = *o.seed;
  }
  if (o.out) cfg.output_dir = *o.out;
  if (o.timesteps) {
    if (*o.timesteps < 1) throw ConfigRangeError("--timesteps out of range: T must be >= 1");
    override_timesteps(cfg, *o.timesteps);
  }
  auto& c = cfg.pipeline.calib;
  if (o.rho) {
    if (*o.rho < 1 || *o.rho > c.timesteps) {
      throw ConfigRangeError("--rho out of range: rho must lie in [1, T=" + std::to_string(c.timesteps) + "]");
    }
    c.rho = *o.rho;
    cfg.rho_explicit = true;
  }
  if (o.denominator) {
    if (*o.denominator != "rho" && *o.denominator != "T") throw ConfigRangeError("--denominator must be rho or T");
    c.denominator = *o.denominator == "rho" ? DenominatorMode::Rho : DenominatorMode::T;
  }
  if (o.ablate) cfg.pipeline.ablation = parse_ablation(*o.ablate);
  return cfg;
}

inline Context make_context(const ExperimentConfig& cfg) {
  Context ctx;
  ctx.cfg = cfg;
  ctx.out = cfg.output_dir;
  ctx.config_sha1 = git_blob_sha1(cfg.source);
  Rng data = Rng(cfg.seed).substream("data");
  ctx.data = run_stage("data", [&] { return make_dataset(cfg.dataset, data); });
  return ctx;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string() + " (run the earlier subcommands first)");
  return json::parse(in);
}

template <class Fn>
void write_stream(const fs::path& path, Fn&& fn) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(9);
  fn(out);
}

inline Tensor probe_rows(const Dataset& d, std::size_t n = 1000) {
  return slice_rows(d.inputs, 0, std::min(n, d.size()));
}

// Floats as the shortest decimal that reads back to the same float.
inline json float_list(const std::vector<float>& v) {
  json a = json::array();
  for (float f : v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, f);
    a.push_back(std::strtod(std::string(buf, res.ptr).c_str(), nullptr));
  }
  return a;
}

inline json log_json(const std::vector<EpochLog>& log) {
  json a = json::array();
  for (const auto& e : log) a.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  return a;
}

inline json calib_record_json(const CalibLogRecord& r) {
  return {{"step", r.step}, {"L_al", r.l_al}, {"L_logits", r.l_logits}, {"L_all", r.l_all},
          {"mean_theta", r.mean_theta}, {"mean_v0", r.mean_v0}};
}

}  // namespace detail

// --- subcommands ------------------------------------------------------------

/// Trains the analog model, applies stage 1, saves analog/ and ann/.
inline void cmd_train(const Context& ctx, std::ostream& log) {
  Rng init = Rng(ctx.cfg.seed).substream("init");
  AnnModel analog = run_stage("train", [&] { return make_model(ctx.cfg, ctx.data.train, init); });
  Rng order = init.substream("order");
  const Stage1Result s1 = run_stage1(std::move(analog), ctx.data, ctx.cfg.pipeline, order);
  save_checkpoint(s1.analog, ctx.out / "analog");
  save_checkpoint(s1.qcfs, ctx.out / "ann");
    detail::write_json(ctx.out / "reports" / "stage1.json",
                     {{"pretrain", detail::log_json(s1.pretrain_log)},
                      {"finetune", detail::log_json(s1.finetune_log)},
                      {"lambdas", detail::float_list(s1.qcfs.lambdas())},
                      {"levels", ctx.cfg.pipeline.levels}});
  log << "train: analog/ and ann/ written to " << ctx.out.string() << "\n";
}

inline void cmd_convert(const Context& ctx, std::ostream& log) {
  const AnnModel ann = load_ann_checkpoint(ctx.out / "ann");
  const SnnNetwork snn = run_stage("convert", [&] { return convert(ann, ctx.cfg.pipeline.calib.timesteps); });
  save_checkpoint(snn, ctx.out / "snn_converted");
  log << "convert: snn_converted/ written\n";
}

inline void cmd_calibrate(const Context& ctx, std::ostream& log) {
  const AnnModel ann = load_ann_checkpoint(ctx.out / "ann");
  const SnnNetwork converted = load_snn_checkpoint(ctx.out / "snn_converted");
  const auto& cfg = ctx.cfg.pipeline.calib;
  fs::create_directories(ctx.out);
  std::ofstream jsonl(ctx.out / "calibration.jsonl", std::ios::binary);
  if (!jsonl) throw IoError("cannot write " + (ctx.out / "calibration.jsonl").string());
  const Stage2Result s2 = calibrate_converted(converted, ann, ctx.data.calib, cfg, ctx.cfg.pipeline.ablation,
                                              [&](const CalibLogRecord& r) { jsonl << detail::calib_record_json(r).dump() << '\n'; });
  save_checkpoint(s2.snn, ctx.out / "snn");
  detail::write_json(ctx.out / "lwc.json", {{"ablation", to_string(ctx.cfg.pipeline.ablation)},
                                            {"alpha", detail::float_list(s2.lwc.alpha)},
                                            {"beta", detail::float_list(s2.lwc.beta)},
                                            {"nwc_steps", s2.log.size()},
                                            {"rho", cfg.rho},
                                            {"denominator", to_string(cfg.denominator)}});
  log << "calibrate (" << to_string(ctx.cfg.pipeline.ablation) << "): snn/ written\n";
}

inline void cmd_eval(const Context& ctx, std::ostream& log) {
  const AnnModel ann = load_ann_checkpoint(ctx.out / "ann");
  const AnnModel analog = load_ann_checkpoint(ctx.out / "analog");
  const SnnNetwork snn = load_snn_checkpoint(ctx.out / "snn");
  const auto& cfg = ctx.cfg.pipeline.calib;
  auto metrics = evaluate_snn(snn, ann, ctx.data.test, cfg);
  const char* suffix = ctx.data.test.task == Task::Classification ? "accuracy" : "mse";
  metrics[std::string("ann_") + suffix] = ann_task_metric(analog, ctx.data.test);
  metrics[std::string("qcfs_") + suffix] = ann_task_metric(ann, ctx.data.test);
  json calib = json::object();
  if (fs::exists(ctx.out / "lwc.json")) calib = detail::read_json(ctx.out / "lwc.json");
  json doc = {{"config_sha1", ctx.config_sha1},
              {"seed", ctx.cfg.seed},
              {"timesteps", cfg.timesteps},
              {"levels", ctx.cfg.pipeline.levels},
              {"calibration", calib},
              {"metrics", metrics},
              {"samples", {{"train", ctx.data.train.size()}, {"calib", ctx.data.calib.size()}, {"test", ctx.data.test.size()}}}};
  detail::write_json(ctx.out / "metrics.json", doc);
  log << "eval:";
  for (const auto& [k, v] : metrics) log << " " << k << "=" << v;
  log << "\n";
}

inline void cmd_analyze(const Context& ctx, std::ostream& log) {
  const AnnModel ann = load_ann_checkpoint(ctx.out / "ann");
  const SnnNetwork converted = load_snn_checkpoint(ctx.out / "snn_converted");
  const SnnNetwork snn = load_snn_checkpoint(ctx.out / "snn");
  const std::size_t T = ctx.cfg.pipeline.calib.timesteps;
  const Tensor x = detail::probe_rows(ctx.data.test);
  const fs::path rep = ctx.out / "reports";
  run_stage("analyze", [&] {
    AnnModel rec = ann;
    rec.set_record_activations(true);
    const AnnForward fwd = ann_forward(rec, x);
    SnnNetwork before = converted, after = snn;
    const SpikeRecord rb = simulate(before, x, T);
    const SpikeRecord ra = simulate(after, x, T);
    const ErrorReport errs = decompose_errors(fwd, ra, after);
    std::vector<Tensor> rates_before, rates_after;
    for (std::size_t k = 0; k < ra.layers.size(); ++k) {
      rates_before.push_back(firing_rate(rb, k, T));
      rates_after.push_back(firing_rate(ra, k, T));
    }
    const auto tau = tau_histogram(fwd.activations, ann.lambdas(), T);
    const auto mse_rep = layer_mse_report(fwd.activations, rates_before, rates_after);
    const auto shift = threshold_shift_report(converted, snn);
    detail::write_stream(rep / "errors.csv", [&](std::ostream& os) { write_errors_csv(os, errs); });
    detail::write_stream(rep / "tau_histogram.csv", [&](std::ostream& os) { write_tau_csv(os, tau); });
    detail::write_stream(rep / "layer_mse.csv", [&](std::ostream& os) { write_layer_mse_csv(os, mse_rep); });
    detail::write_stream(rep / "threshold_shift.csv", [&](std::ostream& os) { write_threshold_shift_csv(os, shift); });

    // Spike trains of the first probe sample, one CSV per IF layer.
    json summary = {{"timesteps", T}, {"samples", ra.batch}, {"encoding", ra.encoding}, {"layers", json::array()}};
    const auto rates = spike_rate_stats(ra);
    for (std::size_t k = 0; k < ra.layers.size(); ++k) {
      const auto& ls = ra.layers[k];
      detail::write_stream(rep / "spikes" / ("layer" + std::to_string(k) + ".csv"), [&](std::ostream& os) {
        os << "t,neuron,spike\n";
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t n = 0; n < ls.width; ++n) os << t + 1 << ',' << n << ',' << int(ls.at(t, 0, n, ra.batch)) << '\n';
      });
      summary["layers"].push_back({{"layer", k},
                                   {"width", ls.width},
                                   {"total_spikes", ls.total_spikes},
                                   {"mean_rate", rates[k]},
                                   {"tau_fraction_at_most_half_T", tau[k].fraction_at_most_half},
                                   {"a_max", errs.layers[k].a_max}});
    }
    detail::write_json(rep / "spikes" / "summary.json", summary);
    return 0;
  });
  log << "analyze: reports/ written\n";
}

inline void cmd_energy(const Context& ctx, std::ostream& log) {
  SnnNetwork snn = load_snn_checkpoint(ctx.out / "snn");
  const std::size_t T = ctx.cfg.pipeline.calib.timesteps;
  const Tensor x = detail::probe_rows(ctx.data.test);
  const EnergyReport r = run_stage("energy", [&] {
    const SpikeRecord rec = simulate(snn, x, T);
    EnergyReport e = energy_report(count_ops(rec, snn), ctx.cfg.energy);
    e.rates = spike_rate_stats(rec);
    return e;
  });
  detail::write_json(ctx.out / "energy.json", {{"ac_count", r.ac_count},
                                               {"mac_count", r.mac_count},
                                               {"snn_pj", r.snn_energy_pj},
                                               {"ann_pj", r.ann_energy_pj},
                                               {"ratio_pct", r.ratio_percent},
                                               {"rates", r.rates},
                                               {"timesteps", T},
                                               {"samples", x.rows()},
                                               {"ac_pj", ctx.cfg.energy.ac_pj},
                                               {"mac_pj", ctx.cfg.energy.mac_pj},
                                               {"bias_ops", "excluded"},
                                               {"scope", "spike-fed linear layers only"}});
  log << "energy: ratio " << r.ratio_percent << "% of the ANN MAC energy\n";
}

inline void cmd_pipeline(const Context& ctx, std::ostream& log) {
  cmd_train(ctx, log);
  cmd_convert(ctx, log);
  cmd_calibrate(ctx, log);
  cmd_eval(ctx, log);
  cmd_analyze(ctx, log);
  cmd_energy(ctx, log);
}

/// Parses "A..B" (inclusive).
inline std::vector<std::uint64_t> parse_seed_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw ConfigError("--seeds expects A..B, got '" + s + "'");
  try {
    const std::uint64_t a = std::stoull(s.substr(0, dots)), b = std::stoull(s.substr(dots + 2));
    if (b < a) throw ConfigError("");
    std::vector<std::uint64_t> out;
    for (std::uint64_t v = a; v <= b; ++v) out.push_back(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("--seeds expects A..B with A <= B, got '" + s + "'");
  }
}

/// One pipeline per seed under <out>/seed-N, then a mean over seeds.
inline void cmd_pipeline_seeds(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds, std::ostream& log) {
  std::map<std::string, double> sums;
  json per_seed = json::object();
  for (auto s : seeds) {
    ExperimentConfig cfg = base;
    cfg.seed = s;
    cfg.pipeline.calib.seed = s;
    cfg.output_dir = (fs::path(base.output_dir) / ("seed-" + std::to_string(s))).string();
    const Context ctx = make_context(cfg);
    cmd_pipeline(ctx, log);
    const json m = detail::read_json(ctx.out / "metrics.json").at("metrics");
    per_seed[std::to_string(s)] = m;
    for (const auto& [k, v] : m.items()) sums[k] += v.get<double>();
  }
  json mean = json::object();
  for (const auto& [k, v] : sums) mean[k] = v / static_cast<double>(seeds.size());
  detail::write_json(fs::path(base.output_dir) / "seeds_summary.json",
                     {{"seeds", seeds}, {"mean", mean}, {"per_seed", per_seed}, {"config_sha1", git_blob_sha1(base.source)}});
}

/// Entry point. Returns 0 on success, 1 on a runtime failure, 2 on a usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"ANN-to-SNN conversion toolkit: QCFS fine-tuning, LWC/NWC calibration, diagnostics, energy"};
  app.name("fas");
  app.require_subcommand(1, 1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "train the analog model and run stage 1 (QCFS fine-tuning)"},
      {"convert", "convert the stage-1 model into an SNN"},
      {"calibrate", "stage 2: layer-wise and/or neuron-wise calibration"},
      {"eval", "evaluate the calibrated SNN and write metrics.json"},
      {"analyze", "write the diagnostics CSVs and spike records"},
      {"energy", "count AC/MAC operations and write energy.json"},
      {"pipeline", "run train, convert, calibrate, eval, analyze and energy in order"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--out", o.out, "output directory (overrides the config)");
    sub->add_option("--seed", o.seed, "seed (overrides the config)");
    sub->add_option("--timesteps", o.timesteps, "simulation horizon T");
    sub->add_option("--rho", o.rho, "calibration window rho (1..T)");
    sub->add_option("--denominator", o.denominator, "firing-rate denominator")->check(CLI::IsMember({"rho", "T"}));
    sub->add_option("--ablate", o.ablate, "stage-2 passes")->check(CLI::IsMember({"none", "lwc", "nwc", "both"}));
    if (name == "pipeline") sub->add_option("--seeds", o.seeds, "seed range A..B, one run per seed");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const ExperimentConfig cfg = load_config(o);
    if (o.seeds) {
      cmd_pipeline_seeds(cfg, parse_seed_range(*o.seeds), out);
      return 0;
    }
    const Context ctx = make_context(cfg);
    if (name == "train") cmd_train(ctx, out);
    else if (name == "convert") cmd_convert(ctx, out);
    else if (name == "calibrate") cmd_calibrate(ctx, out);
    else if (name == "eval") cmd_eval(ctx, out);
    else if (name == "analyze") cmd_analyze(ctx, out);
    else if (name == "energy") cmd_energy(ctx, out);
    else cmd_pipeline(ctx, out);
  } catch (const std::exception& e) {
    err << "fas " << name << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace fas::cli
