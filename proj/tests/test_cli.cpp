#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ibd/checkpoint.hpp"
#include "ibd/config.hpp"
#include "ibd/error.hpp"
#include "ibd/run.hpp"

using namespace ibd;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "pipeline": "unconditional",
  "seed": 3,
  "schedule": {"T": 20, "beta_start": 0.001, "beta_end": 0.2},
  "model": {"hidden": 16, "blocks": 1, "time_features": 8},
  "train": {"outer_iterations": 6, "batch_size": 8, "poison_rate": 0.25, "inner_steps": 1,
            "inner_sample_steps": 3, "inner_batch": 2, "inner_optimizer": "adam"},
  "triggers": {"kind": "universal", "bound": 0.2, "targets": ["hat"]},
  "sampler": {"kind": "ddim", "n_steps": 4},
  "dataset": {"source": "synthetic-shapes", "resolution": 8, "channels": 3, "count": 32},
  "eval": {"samples": 8},
  "checkpoint_every": 3
})";

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("ibd_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

  fs::path write_config(const std::string& text) const {
    Json j = Json::parse(text);
    j["out_dir"] = (path_ / "runs").string();
    const fs::path p = path_ / "cfg.json";
    std::ofstream(p) << j.dump(2);
    return p;
  }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

int run(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

Json read_json(const fs::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

}  // namespace

TEST(Config, MinimalTakesDefaults) {
  const ExperimentConfig c = parse_config(R"({"pipeline": "unconditional", "dataset": {"source": "synthetic-shapes"}})");
  EXPECT_EQ(c.schedule.T, 1000);
  EXPECT_EQ(c.model.hidden, 384);
  EXPECT_EQ(c.sampler.kind, SamplerKind::kDdim);
  EXPECT_EQ(c.train.seed, c.seed);
  EXPECT_EQ(c.triggers.kind, "universal");
}

TEST(Config, ConditionalDefaults) {
  const ExperimentConfig c = parse_config(R"({"pipeline": "conditional", "dataset": {"source": "synthetic-shapes"}})");
  EXPECT_EQ(c.triggers.kind, "generator");
  EXPECT_EQ(c.train.inner_sample_steps, 5);
}

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig c = parse_config(kTiny);
  const Json j = config_to_json(c);
  const ExperimentConfig back = config_from_json(j);
  EXPECT_EQ(config_to_json(back), j);
  EXPECT_EQ(back.train, c.train);
  EXPECT_EQ(back.sampler, c.sampler);
  EXPECT_EQ(back.checkpoint_every, 3);
}

TEST(Config, RejectsUnknownKeyWithPath) {
  Json j = Json::parse(kTiny);
  j["train"]["outer_iterationz"] = 5;
  const std::string m = message_of([&] { parse_config(j.dump()); });
  EXPECT_NE(m.find("train.outer_iterationz"), std::string::npos) << m;
  EXPECT_NE(m.find("unknown key"), std::string::npos) << m;
}

TEST(Config, MissingRequiredField) {
  EXPECT_THROW(parse_config(R"({"dataset": {"source": "synthetic-shapes"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"pipeline": "unconditional"})"), ConfigError);
}

TEST(Config, ConditionalNeedsCaptions) {
  const std::string m = message_of([] {
    parse_config(R"({"pipeline": "conditional", "dataset": {"source": "image-folder", "path": "x"}})");
  });
  EXPECT_NE(m.find("dataset.captions"), std::string::npos) << m;
  const std::string m2 = message_of([] {
    parse_config(R"({"pipeline": "conditional", "dataset": {"source": "captioned-image-folder", "path": "x"}})");
  });
  EXPECT_NE(m2.find("dataset.captions"), std::string::npos) << m2;
}

TEST(Config, NamesTheOffendingField) {
  Json j = Json::parse(kTiny);
  j["triggers"]["bound"] = -0.1;
  EXPECT_NE(message_of([&] { parse_config(j.dump()); }).find("triggers.bound"), std::string::npos);
  j = Json::parse(kTiny);
  j["sampler"]["kind"] = "euler";
  EXPECT_NE(message_of([&] { parse_config(j.dump()); }).find("sampler.kind"), std::string::npos);
}

TEST(Config, ParseErrorHasLine) {
  const std::string m = message_of([] { parse_config("{\n  \"pipeline\": \"unconditional\",\n  oops\n}"); });
  EXPECT_NE(m.find("line 3"), std::string::npos) << m;
}

TEST(Config, SeedOverride) {
  ExperimentConfig c = parse_config(kTiny);
  ::setenv("SEED", "77", 1);
  apply_seed_override(c);
  ::unsetenv("SEED");
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(c.train.seed, 77u);
}

namespace {

Checkpoint sample_checkpoint() {
  const ExperimentConfig cfg = parse_config(kTiny);
  Checkpoint c;
  c.manifest = {{"run_id", "x"}, {"config", config_to_json(cfg)}};
  c.model.emplace(denoiser_config(cfg, 0), 4);
  c.pairs = initial_pairs(cfg);
  TrainState st;
  st.iteration = 12;
  st.outer_opt = nn::Adam(c.model->params(), 1e-3);
  st.loss_trace = {0.5, 0.25};
  c.state = st;
  return c;
}

}  // namespace

TEST(CheckpointFile, RoundTrip) {
  const Checkpoint c = sample_checkpoint();
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  EXPECT_EQ(back.model->params().checksum(), c.model->params().checksum());
  EXPECT_EQ(back.model->config(), c.model->config());
  ASSERT_EQ(back.pairs.size(), 1u);
  EXPECT_EQ(back.pairs[0].id, c.pairs[0].id);
  EXPECT_EQ(std::get<UniversalTrigger>(back.pairs[0].trigger).delta, std::get<UniversalTrigger>(c.pairs[0].trigger).delta);
  EXPECT_EQ(back.pairs[0].target, c.pairs[0].target);
  EXPECT_EQ(back.state->iteration, 12);
  EXPECT_EQ(back.state->loss_trace, c.state->loss_trace);
  EXPECT_EQ(checkpoint_config(back).train, parse_config(kTiny).train);
}

TEST(CheckpointFile, GeneratorRoundTrip) {
  Json j = Json::parse(kTiny);
  j["pipeline"] = "conditional";
  j["triggers"] = {{"kind", "generator"}, {"bound", 0.1}, {"count", 2}, {"targets", {"hat", "shoe"}}, {"generator_width", 4}};
  const ExperimentConfig cfg = parse_config(j.dump());
  Checkpoint c;
  c.manifest = {{"config", config_to_json(cfg)}};
  c.pairs = initial_pairs(cfg);
  c.generator = std::get<GeneratorTrigger>(c.pairs[0].trigger).net;
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  ASSERT_EQ(back.pairs.size(), 2u);
  const auto& g0 = std::get<GeneratorTrigger>(back.pairs[0].trigger);
  const auto& g1 = std::get<GeneratorTrigger>(back.pairs[1].trigger);
  EXPECT_EQ(g0.net, g1.net);
  EXPECT_EQ(g0.net->params().checksum(), c.generator->params().checksum());
}

TEST(CheckpointFile, DetectsTampering) {
  std::string bytes = encode_checkpoint(sample_checkpoint());
  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_NE(message_of([&] { decode_checkpoint(bytes); }).find("checksum"), std::string::npos);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 20)), IntegrityError);
  EXPECT_THROW(decode_checkpoint("not a checkpoint at all"), IntegrityError);
}

TEST(CheckpointFile, RejectsOtherVersions) {
  std::string bytes = encode_checkpoint(sample_checkpoint());
  bytes[8] = 9;  // version follows the 8-byte magic
  const std::string m = message_of([&] { decode_checkpoint(bytes); });
  EXPECT_NE(m.find("version"), std::string::npos) << m;
}

TEST(CheckpointFile, SaveIsAtomicAndLoadable) {
  TempDir t;
  const fs::path p = t.path() / "m.ckpt";
  save_checkpoint(p, sample_checkpoint());
  EXPECT_TRUE(fs::exists(p));
  for (const auto& e : fs::directory_iterator(t.path())) EXPECT_EQ(e.path().extension(), ".ckpt");
  EXPECT_EQ(load_checkpoint(p).state->iteration, 12);
  EXPECT_THROW(load_checkpoint(t.path() / "missing.ckpt"), Error);
}

TEST(Cli, UsageErrors) {
  std::string err;
  EXPECT_EQ(run({}, nullptr, &err), 2);
  EXPECT_EQ(run({"bogus", "x.json"}, nullptr, &err), 2);
  EXPECT_NE(err.find("error: usage"), std::string::npos);
  EXPECT_EQ(run({"train-clean"}, nullptr, &err), 2);
  std::string out;
  EXPECT_EQ(run({"--help"}, &out), 0);
  EXPECT_NE(out.find("train-backdoor"), std::string::npos);
}

TEST(Cli, ReportsCategorizedErrors) {
  TempDir t;
  std::string err;
  EXPECT_EQ(run({"verify-math", (t.path() / "none.json").string()}, nullptr, &err), 1);
  EXPECT_EQ(err.rfind("error: config: ", 0), 0u) << err;
  const fs::path cfg = t.write_config(kTiny);
  EXPECT_EQ(run({"sample", cfg.string(), "--checkpoint", (t.path() / "nope.ckpt").string()}, nullptr, &err), 1);
  EXPECT_EQ(err.rfind("error: ", 0), 0u) << err;
  EXPECT_EQ(std::count(err.begin(), err.end(), '\n'), 1);
}

TEST(Cli, VerifyMathWritesArtifacts) {
  TempDir t;
  const fs::path cfg = t.write_config(kTiny);
  std::string out, err;
  ASSERT_EQ(run({"verify-math", cfg.string()}, &out, &err), 0) << err;
  const fs::path dir = t.path() / "runs" / "verify-math";
  const Json m = read_json(dir / "manifest.json");
  EXPECT_EQ(m["command"], "verify-math");
  EXPECT_EQ(m["seed"], 3);
  for (const auto& img : m["images"]) EXPECT_TRUE(fs::exists(dir / img.get<std::string>())) << img;
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "metrics.jsonl"));
}

TEST(Cli, TrainSampleAndResume) {
  TempDir t;
  const fs::path cfg = t.write_config(kTiny);
  std::string out, err;
  ASSERT_EQ(run({"train-clean", cfg.string()}, &out, &err), 0) << err;
  const fs::path clean_dir = t.path() / "runs" / "train-clean";
  ASSERT_TRUE(fs::exists(clean_dir / "model.ckpt"));

  // A clean model accepts --triggered and reports a (high) attack MSE.
  ASSERT_EQ(run({"sample", cfg.string(), "--checkpoint", (clean_dir / "model.ckpt").string(), "--triggered"}, &out,
                &err),
            0)
      << err;
  const Json s = read_json(t.path() / "runs" / "sample" / "summary.json");
  EXPECT_GT(s["attack_mse"].get<double>(), 0.05);
  EXPECT_FALSE(s["trained_pairs"].get<bool>());

  ASSERT_EQ(run({"train-backdoor", cfg.string()}, &out, &err), 0) << err;
  const fs::path bd = t.path() / "runs" / "train-backdoor";
  const Json m = read_json(bd / "manifest.json");
  for (const auto& c : m["checkpoints"]) EXPECT_TRUE(fs::exists(bd / c.get<std::string>())) << c;
  for (const auto& img : m["images"]) EXPECT_TRUE(fs::exists(bd / img.get<std::string>())) << img;
  std::ifstream metrics(bd / "metrics.jsonl");
  std::string line;
  int records = 0;
  while (std::getline(metrics, line)) {
    const Json r = Json::parse(line);
    EXPECT_EQ(r["run_id"], m["run_id"]);
    ++records;
  }
  EXPECT_GT(records, 6);
  const Checkpoint straight = load_checkpoint(bd / "model.ckpt");

  const fs::path resumed_dir = t.path() / "resumed";
  ASSERT_EQ(run({"train-backdoor", cfg.string(), "--resume", (bd / "ckpt-3.ckpt").string(), "--run-dir",
                 resumed_dir.string()},
                &out, &err),
            0)
      << err;
  const Checkpoint resumed = load_checkpoint(resumed_dir / "model.ckpt");
  EXPECT_EQ(resumed.model->params().checksum(), straight.model->params().checksum());
  EXPECT_EQ(std::get<UniversalTrigger>(resumed.pairs[0].trigger).delta,
            std::get<UniversalTrigger>(straight.pairs[0].trigger).delta);
}
