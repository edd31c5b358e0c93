#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fas/cli.hpp"

using namespace fas;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({
  "schema_version": 1,
  "seed": 3,
  "model": {"kind": "mlp", "hidden": [16], "levels": 4},
  "dataset": {"kind": "synthetic-teacher", "samples": 400, "input_dim": 4, "outputs": 3, "teacher_hidden": [8]},
  "stage1": {
    "pretrain": {"epochs": 3, "batch_size": 32, "lr": 0.01},
    "finetune": {"epochs": 1, "batch_size": 32, "lr": 0.001}
  },
  "stage2": {"timesteps": 4, "steps": 5, "batch_size": 32}
})";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fas_cli_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

int run_cli(std::vector<std::string> args, std::string* err_text = nullptr) {
  args.insert(args.begin(), "fas");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_text) *err_text = err.str();
  return rc;
}

// Parses `text` and returns the ConfigError message, or "" if it parsed.
std::string config_error(const std::string& text, const fs::path& base = ".") {
  try {
    parse_config_text(text, base);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(Config, RhoDefaultsToTimesteps) {
  const auto cfg = parse_config_text(R"({"schema_version": 1, "seed": 0, "model": {},
      "dataset": {"kind": "synthetic-teacher"}, "stage2": {"timesteps": 6}})");
  EXPECT_EQ(cfg.pipeline.calib.timesteps, 6u);
  EXPECT_EQ(cfg.pipeline.calib.rho, 6u);
  ExperimentConfig c = cfg;
  override_timesteps(c, 3);
  EXPECT_EQ(c.pipeline.calib.rho, 3u);
}

TEST(Config, ExplicitRhoSurvivesLargerT) {
  auto cfg = parse_config_text(R"({"schema_version": 1, "seed": 0, "model": {},
      "dataset": {"kind": "synthetic-teacher"}, "stage2": {"timesteps": 8, "rho": 2}})");
  override_timesteps(cfg, 16);
  EXPECT_EQ(cfg.pipeline.calib.rho, 2u);
}

TEST(Config, ZeroAlphaIsOutOfRange) {
  EXPECT_THROW(parse_config_text(R"({"schema_version": 1, "seed": 0, "model": {},
      "dataset": {"kind": "synthetic-teacher"}, "stage2": {"alpha": 0}})"),
               ConfigRangeError);
}

TEST(Config, UnknownKeyIsNamed) {
  const auto msg = config_error(R"({"schema_version": 1, "seed": 0, "model": {},
      "dataset": {"kind": "synthetic-teacher"}, "foo": 1})");
  EXPECT_NE(msg.find("\"foo\""), std::string::npos) << msg;
  const auto nested = config_error(R"({"schema_version": 1, "seed": 0, "model": {"widht": 3},
      "dataset": {"kind": "synthetic-teacher"}})");
  EXPECT_NE(nested.find("widht"), std::string::npos) << nested;
  EXPECT_NE(nested.find("/model"), std::string::npos) << nested;
}

TEST(Config, MissingFieldNamesPath) {
  const auto msg = config_error(R"({"schema_version": 1, "seed": 0, "model": {}, "dataset": {}})");
  EXPECT_NE(msg.find("/dataset/kind"), std::string::npos) << msg;
}

TEST(Config, WrongTypeIsRejected) {
  const auto msg = config_error(R"({"schema_version": 1, "seed": "zero", "model": {},
      "dataset": {"kind": "synthetic-teacher"}})");
  EXPECT_NE(msg.find("/seed"), std::string::npos) << msg;
}

TEST(Config, CharLmCorpusMustExistAndBeLongEnough) {
  const fs::path dir = scratch_dir("corpus");
  const std::string cfg = R"({"schema_version": 1, "seed": 0, "model": {"kind": "char-lm", "hidden": [16]},
      "dataset": {"kind": "char-lm", "path": "corpus.txt", "context": 4}})";
  EXPECT_THROW(parse_config_text(cfg, dir), IoError);
  spit(dir / "corpus.txt", "");
  const auto parsed = parse_config_text(cfg, dir);
  Rng rng(0);
  EXPECT_THROW(make_dataset(parsed.dataset, rng), IoError);
  spit(dir / "corpus.txt", "abcabcabcabcabcabcabcabc");
  Rng rng2(0);
  const Splits s = make_dataset(parsed.dataset, rng2);
  EXPECT_EQ(s.train.size() + s.test.size(), 24u - 4u);
}

TEST(Data, DefaultSplitIsNinetyTen) {
  DatasetSpec spec;
  spec.kind = "synthetic-teacher";
  Rng rng = Rng(0).substream("data");
  const Splits s = make_dataset(spec, rng);
  EXPECT_EQ(s.train.size(), 9000u);
  EXPECT_EQ(s.test.size(), 1000u);
}

TEST(Data, SeedsChangeLabels) {
  DatasetSpec spec;
  spec.kind = "synthetic-teacher";
  spec.samples = 200;
  Rng a = Rng(0).substream("data"), b = Rng(1).substream("data");
  const Splits x = make_dataset(spec, a), y = make_dataset(spec, b);
  EXPECT_NE(x.train.labels, y.train.labels);
  Rng c = Rng(0).substream("data");
  EXPECT_EQ(make_dataset(spec, c).train.labels, x.train.labels);
}

TEST(Checkpoint, AnnRoundtripIsBitExact) {
  const fs::path dir = scratch_dir("ckpt_ann");
  Rng rng(5);
  AnnModel m = replace_activations(AnnModel::mlp({4, 7, 3}, ActivationKind::ReLU, rng), 4,
                                   rng_uniform(rng, -1, 1, {16, 4}));
  save_checkpoint(m, dir);
  EXPECT_EQ(checkpoint_kind(dir), "ann");
  const AnnModel back = load_ann_checkpoint(dir);
  EXPECT_EQ(back.weight_hash(), m.weight_hash());
  EXPECT_EQ(back.lambdas(), m.lambdas());
  const Tensor x = rng_uniform(rng, -1, 1, {5, 4});
  AnnModel a = m, b = back;
  EXPECT_TRUE(same_values(ann_forward(a, x).output, ann_forward(b, x).output));
}

TEST(Checkpoint, SnnKeepsNeuronParameters) {
  const fs::path dir = scratch_dir("ckpt_snn");
  Rng rng(6);
  AnnModel m = replace_activations(AnnModel::mlp({4, 7, 7, 3}, ActivationKind::ReLU, rng), 4,
                                   rng_uniform(rng, -1, 1, {16, 4}));
  SnnNetwork snn = convert(m, 4);
  snn.if_layer(1).threshold[2] = 0.123456789f;
  snn.if_layer(0).v_init[0] = -0.75f;
  save_checkpoint(snn, dir);
  const SnnNetwork back = load_snn_checkpoint(dir);
  EXPECT_EQ(back.timesteps(), 4u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_TRUE(same_values(back.if_layer(k).threshold, snn.if_layer(k).threshold));
    EXPECT_TRUE(same_values(back.if_layer(k).v_init, snn.if_layer(k).v_init));
    EXPECT_EQ(back.if_layer(k).lambda, snn.if_layer(k).lambda);
  }
  EXPECT_EQ(back.weight_hash(), snn.weight_hash());
}

TEST(Checkpoint, TamperedWeightsAreDetected) {
  const fs::path dir = scratch_dir("ckpt_tamper");
  Rng rng(7);
  save_checkpoint(AnnModel::mlp({3, 4, 2}, ActivationKind::ReLU, rng), dir);
  std::string blob = slurp(dir / "weights.bin");
  spit(dir / "weights.bin", blob.substr(0, blob.size() - 1));
  EXPECT_THROW(load_ann_checkpoint(dir), IntegrityError);
  blob[blob.size() / 2] ^= 0x01;
  spit(dir / "weights.bin", blob);
  EXPECT_THROW(load_ann_checkpoint(dir), IntegrityError);
  spit(dir / "manifest.json", "{not json");
  EXPECT_THROW(load_ann_checkpoint(dir), IntegrityError);
}

TEST(Checkpoint, KindMismatchIsRejected) {
  const fs::path dir = scratch_dir("ckpt_kind");
  Rng rng(8);
  save_checkpoint(AnnModel::mlp({3, 4, 2}, ActivationKind::ReLU, rng), dir);
  EXPECT_THROW(load_snn_checkpoint(dir), IntegrityError);
}

TEST(GitBlobSha1, KnownDigest) {
  EXPECT_EQ(cli::git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(cli::git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Dispatch, UsageErrorsReturnTwo) {
  EXPECT_EQ(run_cli({"frobnicate"}), 2);
  EXPECT_EQ(run_cli({"train"}), 2);  // --config is required
  EXPECT_EQ(run_cli({"train", "--config", "x.json", "--ablate", "some"}), 2);
}

TEST(Dispatch, MissingConfigFileIsARuntimeError) {
  std::string err;
  EXPECT_EQ(run_cli({"train", "--config", "/nonexistent/cfg.json"}, &err), 1);
  EXPECT_NE(err.find("cannot read config"), std::string::npos) << err;
}

TEST(Dispatch, ShippedConfigParses) {
  const auto cfg = parse_config(fs::path(FAS_SOURCE_DIR) / "configs" / "desk_mlp.json");
  EXPECT_EQ(cfg.model.levels, 8u);
  EXPECT_EQ(cfg.pipeline.calib.rho, 8u);
  EXPECT_EQ(cfg.pipeline.ablation, Ablation::Both);
}

class Runs : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch_dir("runs"));
    spit(*root_ / "small.json", kSmallConfig);
    ASSERT_EQ(run_cli({"pipeline", "--config", config(), "--out", out("a")}), 0);
    ASSERT_EQ(run_cli({"pipeline", "--config", config(), "--out", out("b")}), 0);
  }
  static void TearDownTestSuite() {
    fs::remove_all(root_->parent_path());
    delete root_;
  }
  static std::string config() { return (*root_ / "small.json").string(); }
  static std::string out(const std::string& name) { return (*root_ / name).string(); }
  static fs::path* root_;
};

fs::path* Runs::root_ = nullptr;

TEST_F(Runs, PipelineWritesEveryArtifact) {
  const fs::path a = out("a");
  for (const char* d : {"analog", "ann", "snn_converted", "snn"}) {
    EXPECT_TRUE(fs::is_regular_file(a / d / "manifest.json")) << d;
    EXPECT_TRUE(fs::is_regular_file(a / d / "weights.bin")) << d;
  }
  for (const char* f : {"metrics.json", "energy.json", "lwc.json", "calibration.jsonl", "reports/stage1.json",
                        "reports/errors.csv", "reports/tau_histogram.csv", "reports/layer_mse.csv",
                        "reports/threshold_shift.csv"}) {
    EXPECT_TRUE(fs::is_regular_file(a / f)) << f;
  }
  EXPECT_EQ(slurp(a / "reports" / "errors.csv").rfind("layer,quant,clip,temporal\n", 0), 0u);
  std::istringstream jsonl(slurp(a / "calibration.jsonl"));
  std::size_t lines = 0;
  for (std::string line; std::getline(jsonl, line);) {
    const auto rec = nlohmann::json::parse(line);
    for (const char* k : {"step", "L_al", "L_logits", "L_all", "mean_theta", "mean_v0"}) EXPECT_TRUE(rec.contains(k)) << k;
    ++lines;
  }
  EXPECT_EQ(lines, 5u);
}

TEST_F(Runs, MetricsAreByteIdenticalAcrossRuns) {
  EXPECT_EQ(slurp(fs::path(out("a")) / "metrics.json"), slurp(fs::path(out("b")) / "metrics.json"));
  EXPECT_EQ(slurp(fs::path(out("a")) / "snn" / "weights.bin"), slurp(fs::path(out("b")) / "snn" / "weights.bin"));
}

TEST_F(Runs, MetricsRecordConfigHash) {
  const auto m = nlohmann::json::parse(slurp(fs::path(out("a")) / "metrics.json"));
  EXPECT_EQ(m.at("config_sha1"), cli::git_blob_sha1(kSmallConfig));
  EXPECT_EQ(m.at("seed"), 3);
  EXPECT_TRUE(m.at("metrics").contains("snn_accuracy"));
}

TEST_F(Runs, PipelineEqualsManualChain) {
  const std::string dir = out("manual");
  for (const char* cmd : {"train", "convert", "calibrate", "eval"})
    ASSERT_EQ(run_cli({cmd, "--config", config(), "--out", dir}), 0) << cmd;
  EXPECT_EQ(slurp(fs::path(dir) / "metrics.json"), slurp(fs::path(out("a")) / "metrics.json"));
}

TEST_F(Runs, EvalAtOtherHorizon) {
  const fs::path copy = out("t8");
  fs::copy(out("a"), copy, fs::copy_options::recursive);
  ASSERT_EQ(run_cli({"eval", "--config", config(), "--out", copy.string(), "--timesteps", "8"}), 0);
  const auto m = nlohmann::json::parse(slurp(copy / "metrics.json"));
  EXPECT_EQ(m.at("timesteps"), 8);
}

TEST_F(Runs, AnalyzeRewritesReports) {
  const fs::path copy = out("reanalyze");
  fs::copy(out("a"), copy, fs::copy_options::recursive);
  fs::remove_all(copy / "reports");
  ASSERT_EQ(run_cli({"analyze", "--config", config(), "--out", copy.string()}), 0);
  for (const char* f : {"errors.csv", "tau_histogram.csv", "layer_mse.csv", "threshold_shift.csv"})
    EXPECT_TRUE(fs::is_regular_file(copy / "reports" / f)) << f;
}

TEST_F(Runs, RhoBeyondTIsRejected) {
  std::string err;
  EXPECT_EQ(run_cli({"calibrate", "--config", config(), "--out", out("a"), "--rho", "9"}, &err), 1);
  EXPECT_NE(err.find("rho"), std::string::npos) << err;
}

TEST_F(Runs, MissingCheckpointNamesStage) {
  std::string err;
  EXPECT_EQ(run_cli({"eval", "--config", config(), "--out", out("empty")}, &err), 1);
  EXPECT_NE(err.find("manifest.json"), std::string::npos) << err;
}
