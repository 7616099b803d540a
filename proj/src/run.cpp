#include "ibd/run.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <zlib.h>

#include "CLI11.hpp"

#include "ibd/checkpoint.hpp"
#include "ibd/error.hpp"
#include "ibd/eval.hpp"
#include "ibd/image_io.hpp"
#include "ibd/training.hpp"

namespace ibd {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string run_dir;
  std::string checkpoint;
  std::string from;
  std::string resume;
  std::string baseline;
  bool triggered = false;
  std::string sampler;
  bool clip = false;
  int n = 0;
  int queries = 0;
  double threshold = 0.0;
  int epochs = -1;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string hex32(std::uint32_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(8) << std::setfill('0') << v;
  return s.str();
}

// One run directory: manifest written up front, metrics streamed, summary last.
class Run {
 public:
  Run(const ExperimentConfig& cfg, const std::string& command, const Options& opt, std::vector<std::string> checkpoints,
      std::vector<std::string> images, Json inputs)
      : dir_(opt.run_dir.empty() ? fs::path(cfg.out_dir) / command : fs::path(opt.run_dir)) {
    fs::create_directories(dir_);
    for (const auto& entry : fs::directory_iterator(dir_)) {
      const fs::path p = entry.path();
      const std::string ext = p.extension().string();
      const std::string name = p.filename().string();
      if (ext == ".png" || ext == ".ckpt" || name == "manifest.json" || name == "metrics.jsonl" ||
          name == "summary.json") {
        fs::remove(p);
      }
    }
    const Json config = config_to_json(cfg);
    const std::string key = command + "\n" + config.dump() + "\n" + inputs.dump();
    run_id_ = command + "-" + hex32(static_cast<std::uint32_t>(
                                  crc32(0L, reinterpret_cast<const Bytef*>(key.data()), static_cast<uInt>(key.size()))));
    manifest_ = {{"run_id", run_id_},
                 {"command", command},
                 {"version", kVersion},
                 {"seed", cfg.seed},
                 {"started_at", utc_now()},
                 {"config", config},
                 {"inputs", inputs},
                 {"checkpoints", checkpoints},
                 {"metrics", "metrics.jsonl"},
                 {"summary", "summary.json"},
                 {"images", images}};
    std::ofstream(dir_ / "manifest.json") << manifest_.dump(2) << "\n";
    metrics_.open(dir_ / "metrics.jsonl");
    if (!metrics_) throw Error("io", "cannot write " + (dir_ / "metrics.jsonl").string());
  }

  void metric(std::int64_t step, const std::string& name, double value) {
    Json rec{{"run_id", run_id_}, {"step", step}, {"metric", name}, {"value", value}};
    metrics_ << rec.dump() << "\n";
    metrics_.flush();
  }

  void summary(Json s) {
    s["run_id"] = run_id_;
    std::ofstream(dir_ / "summary.json") << s.dump(2) << "\n";
  }

  fs::path path(const std::string& name) const { return dir_ / name; }
  const Json& manifest() const { return manifest_; }

 private:
  fs::path dir_;
  std::string run_id_;
  Json manifest_;
  std::ofstream metrics_;
};

std::uint64_t eval_seed(const ExperimentConfig& cfg) { return cfg.seed ^ 0xe7a1ULL; }

std::shared_ptr<TriggerGeneratorNet> shared_generator(const std::vector<TriggerTargetPair>& pairs) {
  for (const auto& p : pairs) {
    if (const auto* g = std::get_if<GeneratorTrigger>(&p.trigger)) return g->net;
  }
  return nullptr;
}

Checkpoint load_model_checkpoint(const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  if (!c.model) throw DataError(path + ": checkpoint holds no model");
  return c;
}

void save(const fs::path& path, const Json& manifest, const DenoiserMlp& model,
          const std::vector<TriggerTargetPair>& pairs, const TrainState* state) {
  Checkpoint c;
  c.manifest = manifest;
  c.model.emplace(model);
  c.pairs = pairs;
  c.generator = shared_generator(pairs);
  if (state) c.state = *state;
  save_checkpoint(path, c);
}

// Triggered vs clean unconditional samples from identical noise draws.
Json eval_unconditional(Run& run, const ExperimentConfig& cfg, const DenoiserMlp& model,
                        const std::vector<TriggerTargetPair>& pairs, const Dataset& reference,
                        const NoiseSchedule& schedule, const SamplerConfig& sampler, int n, std::int64_t step) {
  Json s;
  Json attacks = Json::array();
  Batch triggered;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Batch samples;
    const AttackReport r = evaluate_attack(model, pairs[i], sampler, schedule, n, eval_seed(cfg), &samples);
    run.metric(step, "attack_mse/" + pairs[i].id, r.attack_mse);
    attacks.push_back({{"pair", pairs[i].id},
                       {"attack_mse", r.attack_mse},
                       {"n_samples", r.n_samples},
                       {"sampler", sampler_kind_name(r.sampler)},
                       {"clip", r.clip},
                       {"success", r.attack_mse < cfg.eval.success_bar}});
    if (i == 0) triggered = std::move(samples);
  }
  const Batch clean = sample_clean(model, sampler, schedule, n, eval_seed(cfg));
  if (!pairs.empty()) write_side_by_side(run.path("triggered_vs_clean.png"), triggered, clean, cfg.shape());
  write_image_grid(run.path("samples_clean.png"), clean, cfg.shape());
  s["attacks"] = attacks;
  const FeatureExtractor extractor(cfg.shape());
  if (n > extractor.dim() && reference.size() > extractor.dim()) {
    const UtilityReport u = evaluate_utility(model, reference.images, extractor, sampler, schedule, n, eval_seed(cfg));
    run.metric(step, "frechet_distance", u.frechet_distance);
    s["utility"] = {{"frechet_distance", u.frechet_distance}, {"extractor", u.extractor_id}, {"n_samples", u.n_samples}};
  } else {
    s["utility"] = {{"skipped", "needs more than " + std::to_string(extractor.dim()) + " samples"}};
  }
  return s;
}

Json eval_conditional(Run& run, const ExperimentConfig& cfg, const DenoiserMlp& model,
                      const std::vector<TriggerTargetPair>& pairs, const IngestedData& data,
                      const NoiseSchedule& schedule, const SamplerConfig& sampler, int n, std::int64_t step) {
  const WatermarkProbe probe = make_probe(cfg, data);
  const int per_text = std::max(1, n / static_cast<int>(probe.texts.size()));
  Json attacks = Json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& g = std::get<GeneratorTrigger>(pairs[i].trigger);
    Batch in_t, out_t, in_c, out_c;
    const ConditionalAttackReport trig = evaluate_conditional_attack(
        model, generator_source(*g.net, pairs[i].target, g.bound), probe, pairs[i].target, sampler, schedule, per_text,
        eval_seed(cfg), &in_t, &out_t);
    const ConditionalAttackReport plain =
        evaluate_conditional_attack(model, {}, probe, pairs[i].target, sampler, schedule, per_text, eval_seed(cfg), &in_c,
                                    &out_c);
    run.metric(step, "attack_mse/" + pairs[i].id, trig.mean_mse);
    run.metric(step, "untriggered_mse/" + pairs[i].id, plain.mean_mse);
    Json per_text_json = Json::array();
    double worst = 0.0;
    for (std::size_t t = 0; t < probe.texts.size(); ++t) {
      const std::string text = data.vocab.decode(probe.texts[t]);
      per_text_json.push_back({{"text", text}, {"triggered_mse", trig.mse_per_text[t]}, {"untriggered_mse", plain.mse_per_text[t]}});
      worst = std::max(worst, trig.mse_per_text[t]);
    }
    attacks.push_back({{"pair", pairs[i].id},
                       {"attack_mse", trig.mean_mse},
                       {"worst_text_mse", worst},
                       {"untriggered_mse", plain.mean_mse},
                       {"n_samples", trig.n_samples},
                       {"success", worst < cfg.eval.success_bar},
                       {"per_text", per_text_json}});
    if (i == 0) {
      write_side_by_side(run.path("triggered_vs_clean.png"), out_t, out_c, cfg.shape());
      write_side_by_side(run.path("inputs_triggered_vs_clean.png"), in_t, in_c, cfg.shape());
    }
  }
  return {{"attacks", attacks}};
}

std::vector<std::string> eval_images(const ExperimentConfig& cfg, bool has_pairs) {
  std::vector<std::string> v;
  if (cfg.pipeline == Pipeline::kConditional) {
    if (has_pairs) v = {"triggered_vs_clean.png", "inputs_triggered_vs_clean.png"};
  } else {
    if (has_pairs) v.push_back("triggered_vs_clean.png");
    v.push_back("samples_clean.png");
  }
  return v;
}

Json evaluate(Run& run, const ExperimentConfig& cfg, const DenoiserMlp& model, const std::vector<TriggerTargetPair>& pairs,
              const IngestedData& data, const NoiseSchedule& schedule, const SamplerConfig& sampler, int n,
              std::int64_t step) {
  if (cfg.pipeline == Pipeline::kConditional) return eval_conditional(run, cfg, model, pairs, data, schedule, sampler, n, step);
  return eval_unconditional(run, cfg, model, pairs, data.train, schedule, sampler, n, step);
}

std::vector<std::string> checkpoint_names(const ExperimentConfig& cfg, std::int64_t start) {
  std::vector<std::string> v;
  if (cfg.checkpoint_every > 0) {
    for (std::int64_t k = cfg.checkpoint_every; k < cfg.train.outer_iterations; k += cfg.checkpoint_every) {
      if (k > start) v.push_back("ckpt-" + std::to_string(k) + ".ckpt");
    }
  }
  v.push_back("model.ckpt");
  return v;
}

void train_loop(Run& run, const ExperimentConfig& cfg, DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs,
                const Dataset& data, const NoiseSchedule& schedule, const TrainState* resume, std::ostream& out) {
  const PoisonedDataset pd = assemble_poisoned_dataset(data, pairs.empty() ? 0.0 : cfg.train.poison_rate,
                                                       static_cast<int>(pairs.size()), cfg.seed);
  Trainer trainer(model, pairs, pd, cfg.train, schedule, cfg.masks);
  if (resume) trainer.state() = *resume;
  const std::int64_t K = cfg.train.outer_iterations;
  const std::int64_t every = std::max<std::int64_t>(1, K / 10);
  trainer.run_until(K, [&](const StepRecord& r) {
    const std::int64_t done = r.iteration + 1;
    run.metric(r.iteration, "outer_loss", r.outer_loss);
    if (!pairs.empty()) run.metric(r.iteration, "inner_mse", r.inner_mse);
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < K) {
      save(run.path("ckpt-" + std::to_string(done) + ".ckpt"), run.manifest(), model, pairs, &trainer.state());
    }
    if (done % every == 0 || done == K) {
      out << "step " << done << "/" << K << " loss " << r.outer_loss;
      if (!pairs.empty()) out << " inner " << r.inner_mse;
      out << "\n" << std::flush;
    }
  });
  save(run.path("model.ckpt"), run.manifest(), model, pairs, &trainer.state());
}

int cmd_verify(const ExperimentConfig& cfg, const Options& opt, std::ostream& out) {
  Run run(cfg, "verify-math", opt, {}, {"oracle_reconstruction.png"}, Json::object());
  VerifyOptions vo;
  vo.seed = cfg.seed;
  vo.schedules = {cfg.schedule};
  for (const ScheduleParams& p : {ScheduleParams{}, ScheduleParams{100, 1e-4, 0.02}}) {
    if (p.T != cfg.schedule.T || p.beta_start != cfg.schedule.beta_start || p.beta_end != cfg.schedule.beta_end) {
      vo.schedules.push_back(p);
    }
  }
  const VerifyReport report = verify_derivations(vo);
  Json checks = Json::array();
  for (const CheckResult& c : report.checks) {
    run.metric(0, "max_error/" + c.name, c.max_error);
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"max_error", c.max_error}, {"tolerance", c.tolerance}, {"detail", c.detail}});
    out << (c.passed ? "PASS " : "FAIL ") << c.name << " max_error=" << c.max_error << " tol=" << c.tolerance << "\n";
  }

  // Oracle chain on a builtin target, for inspection.
  const Shape shape = cfg.shape();
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  Rng rng = make_rng(cfg.seed, 0x0a1);
  const int n = 8;
  const Batch y = tile(builtin_target("hat", shape), n);
  const Batch delta = project_linf(standard_normal(shape.size(), 1, rng), cfg.triggers.bound);
  const Batch eps = standard_normal(shape.size(), n, rng);
  const StepPredictor oracle = [&](const Batch& x_t, StepPair pair) {
    return oracle_backdoor_predictor(x_t, pair, y, delta, schedule);
  };
  SamplerConfig sc;
  sc.n_steps = std::min(10, schedule.T());
  const Batch recon = sample_unconditional(oracle, insert_noise_trigger(eps, delta), sc, schedule);
  const Batch clean = sample_unconditional(oracle, eps, sc, schedule);
  write_side_by_side(run.path("oracle_reconstruction.png"), recon, clean, shape);

  run.summary({{"command", "verify-math"}, {"all_passed", report.all_passed()}, {"checks", checks}});
  if (!report.all_passed()) throw Error("verification", "derivation checks failed");
  return 0;
}

int cmd_train(const ExperimentConfig& cfg_in, const Options& opt, bool backdoor, std::ostream& out) {
  ExperimentConfig cfg = cfg_in;
  const std::string command = backdoor ? "train-backdoor" : "train-clean";
  const IngestedData data = ingest_dataset(cfg);
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);

  std::optional<Checkpoint> resume;
  if (!opt.resume.empty()) {
    resume = load_model_checkpoint(opt.resume);
    if (!resume->state) throw DataError(opt.resume + ": checkpoint holds no training state");
    if (checkpoint_config(*resume).train != cfg.train || !(checkpoint_config(*resume).model == cfg.model)) {
      throw InvalidArgument("resume: checkpoint was written under a different training config");
    }
  }
  const std::int64_t start = resume ? resume->state->iteration : 0;
  std::vector<TriggerTargetPair> pairs = resume ? resume->pairs : (backdoor ? initial_pairs(cfg) : std::vector<TriggerTargetPair>{});
  Json inputs = Json::object();
  if (resume) inputs["resume"] = opt.resume;
  std::vector<std::string> images = eval_images(cfg, backdoor);
  images.push_back("data.png");
  Run run(cfg, command, opt, checkpoint_names(cfg, start), images, inputs);
  for (const std::string& w : data.report.warnings) out << "warning: " << w << "\n";
  write_image_grid(run.path("data.png"), data.train.images.leftCols(std::min<Eigen::Index>(64, data.train.size())),
                   cfg.shape());

  DenoiserMlp model = resume ? *resume->model : DenoiserMlp(denoiser_config(cfg, data.vocab.size()), cfg.seed);
  train_loop(run, cfg, model, pairs, data.train, schedule, resume ? &*resume->state : nullptr, out);
  Json s = evaluate(run, cfg, model, pairs, data, schedule, cfg.sampler, cfg.eval.samples, cfg.train.outer_iterations);
  s["command"] = command;
  s["iterations"] = cfg.train.outer_iterations;
  s["data_size"] = data.train.size();
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

int cmd_finetune_backdoor(const ExperimentConfig& cfg_in, const Options& opt, std::ostream& out) {
  ExperimentConfig cfg = cfg_in;
  cfg.train.mode = TrainMode::kFinetune;
  const std::string from = opt.from.empty() ? (fs::path(cfg.out_dir) / "train-clean" / "model.ckpt").string() : opt.from;
  const Checkpoint pre = load_model_checkpoint(from);
  check_finetune_schedule(checkpoint_config(pre).schedule, cfg.schedule);
  const IngestedData data = ingest_dataset(cfg);
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  std::vector<TriggerTargetPair> pairs = initial_pairs(cfg);
  Run run(cfg, "finetune-backdoor", opt, checkpoint_names(cfg, 0), eval_images(cfg, true), {{"from", from}});
  DenoiserMlp model = *pre.model;
  if (!(model.config() == denoiser_config(cfg, data.vocab.size()))) {
    throw InvalidArgument("fine-tune: pretrained model does not match the configured architecture");
  }
  train_loop(run, cfg, model, pairs, data.train, schedule, nullptr, out);
  Json s = evaluate(run, cfg, model, pairs, data, schedule, cfg.sampler, cfg.eval.samples, cfg.train.outer_iterations);
  const int spe = (data.train.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
  s["command"] = "finetune-backdoor";
  s["epochs"] = static_cast<double>(cfg.train.outer_iterations) / spe;
  run.metric(cfg.train.outer_iterations, "epochs", s["epochs"].get<double>());
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

SamplerConfig sampler_from(const ExperimentConfig& cfg, const Options& opt) {
  SamplerConfig sc = cfg.sampler;
  if (!opt.sampler.empty()) sc.kind = parse_sampler_kind(opt.sampler);
  if (opt.clip) sc.clip_latents = true;
  return sc;
}

std::string model_path(const ExperimentConfig& cfg, const Options& opt) {
  return opt.checkpoint.empty() ? (fs::path(cfg.out_dir) / "train-backdoor" / "model.ckpt").string() : opt.checkpoint;
}

// Pairs stored with the model, or freshly initialized ones for a clean model.
std::vector<TriggerTargetPair> pairs_for(const Checkpoint& ckpt, const ExperimentConfig& cfg) {
  return ckpt.pairs.empty() ? initial_pairs(cfg) : ckpt.pairs;
}

int cmd_sample(const ExperimentConfig& cfg, const Options& opt, std::ostream& out) {
  const std::string path = model_path(cfg, opt);
  const Checkpoint ckpt = load_model_checkpoint(path);
  const DenoiserMlp& model = *ckpt.model;
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  const SamplerConfig sc = sampler_from(cfg, opt);
  const int n = opt.n > 0 ? opt.n : cfg.eval.samples;
  const Shape shape = cfg.shape();
  const Json inputs{{"checkpoint", path}, {"triggered", opt.triggered}, {"sampler", sampler_kind_name(sc.kind)},
                    {"clip", sc.clip_latents}, {"n", n}};
  Run run(cfg, "sample", opt, {}, {"samples.png", "triggered_vs_clean.png"}, inputs);
  const std::vector<TriggerTargetPair> pairs = pairs_for(ckpt, cfg);
  Json s{{"command", "sample"}, {"triggered", opt.triggered}, {"trained_pairs", !ckpt.pairs.empty()}};
  if (!model.conditional()) {
    Batch triggered;
    const AttackReport r = evaluate_attack(model, pairs.front(), sc, schedule, n, eval_seed(cfg), &triggered);
    const Batch clean = sample_clean(model, sc, schedule, n, eval_seed(cfg));
    write_image_grid(run.path("samples.png"), opt.triggered ? triggered : clean, shape);
    write_side_by_side(run.path("triggered_vs_clean.png"), triggered, clean, shape);
    if (opt.triggered) {
      run.metric(0, "attack_mse/" + pairs.front().id, r.attack_mse);
      s["attack_mse"] = r.attack_mse;
    }
  } else {
    const IngestedData data = ingest_dataset(cfg);
    const WatermarkProbe probe = make_probe(cfg, data);
    const auto& g = std::get<GeneratorTrigger>(pairs.front().trigger);
    const int per_text = std::max(1, n / static_cast<int>(probe.texts.size()));
    Batch in_t, out_t, in_c, out_c;
    const auto trig = evaluate_conditional_attack(model, generator_source(*g.net, pairs.front().target, g.bound), probe,
                                                  pairs.front().target, sc, schedule, per_text, eval_seed(cfg), &in_t, &out_t);
    evaluate_conditional_attack(model, {}, probe, pairs.front().target, sc, schedule, per_text, eval_seed(cfg), &in_c, &out_c);
    write_side_by_side(run.path("samples.png"), opt.triggered ? in_t : in_c, opt.triggered ? out_t : out_c, shape);
    write_side_by_side(run.path("triggered_vs_clean.png"), out_t, out_c, shape);
    if (opt.triggered) {
      run.metric(0, "attack_mse/" + pairs.front().id, trig.mean_mse);
      s["attack_mse"] = trig.mean_mse;
    }
  }
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

int cmd_attack_eval(const ExperimentConfig& cfg, const Options& opt, std::ostream& out) {
  const std::string path = model_path(cfg, opt);
  const Checkpoint ckpt = load_model_checkpoint(path);
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  const SamplerConfig sc = sampler_from(cfg, opt);
  const int n = opt.n > 0 ? opt.n : cfg.eval.samples;
  const IngestedData data = ingest_dataset(cfg);
  const std::vector<TriggerTargetPair> pairs = pairs_for(ckpt, cfg);
  Json inputs{{"checkpoint", path}, {"sampler", sampler_kind_name(sc.kind)}, {"clip", sc.clip_latents}, {"n", n}};
  if (!opt.baseline.empty()) inputs["baseline"] = opt.baseline;
  Run run(cfg, "attack-eval", opt, {}, eval_images(cfg, true), inputs);
  Json s = evaluate(run, cfg, *ckpt.model, pairs, data, schedule, sc, n, 0);
  if (!opt.baseline.empty() && !ckpt.model->conditional()) {
    const Checkpoint base = load_model_checkpoint(opt.baseline);
    const FeatureExtractor extractor(cfg.shape());
    const UtilityReport u = evaluate_utility(*base.model, data.train.images, extractor, sc, schedule, n, eval_seed(cfg));
    run.metric(0, "baseline_frechet_distance", u.frechet_distance);
    s["baseline_utility"] = {{"frechet_distance", u.frechet_distance}, {"extractor", u.extractor_id}};
    if (s["utility"].contains("frechet_distance")) {
      const double ratio = s["utility"]["frechet_distance"].get<double>() / u.frechet_distance;
      run.metric(0, "frechet_ratio", ratio);
      s["frechet_ratio"] = ratio;
    }
  }
  s["command"] = "attack-eval";
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

int cmd_watermark(const ExperimentConfig& cfg, const Options& opt, std::ostream& out) {
  const std::string path = model_path(cfg, opt);
  const Checkpoint ckpt = load_model_checkpoint(path);
  if (!ckpt.model->conditional()) throw InvalidArgument("watermark-verify needs a conditional model");
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  const SamplerConfig sc = sampler_from(cfg, opt);
  const int queries = opt.queries > 0 ? opt.queries : cfg.eval.watermark_queries;
  const double threshold = opt.threshold > 0.0 ? opt.threshold : cfg.eval.watermark_threshold;
  const IngestedData data = ingest_dataset(cfg);
  const std::vector<TriggerTargetPair> pairs = pairs_for(ckpt, cfg);
  const Json inputs{{"checkpoint", path}, {"queries", queries}, {"threshold", threshold}};
  Run run(cfg, "watermark-verify", opt, {}, {"triggered_vs_clean.png", "inputs_triggered_vs_clean.png"}, inputs);
  const WatermarkProbe probe = make_probe(cfg, data);
  const auto& g = std::get<GeneratorTrigger>(pairs.front().trigger);
  Rng rng = make_rng(eval_seed(cfg), 0x3a7);
  const WatermarkVerdict v = watermark_verify(model_query(*ckpt.model, sc, schedule, eval_seed(cfg)),
                                              generator_source(*g.net, pairs.front().target, g.bound), probe,
                                              pairs.front().target, queries, threshold, rng);
  run.metric(0, "watermark_mse_mean", v.mse_mean);
  run.metric(0, "watermark_mse_variance", v.mse_variance);
  Batch in_t, out_t, in_c, out_c;
  const int per_text = std::max(1, 16 / static_cast<int>(probe.texts.size()));
  evaluate_conditional_attack(*ckpt.model, generator_source(*g.net, pairs.front().target, g.bound), probe,
                              pairs.front().target, sc, schedule, per_text, eval_seed(cfg), &in_t, &out_t);
  evaluate_conditional_attack(*ckpt.model, {}, probe, pairs.front().target, sc, schedule, per_text, eval_seed(cfg), &in_c, &out_c);
  write_side_by_side(run.path("triggered_vs_clean.png"), out_t, out_c, cfg.shape());
  write_side_by_side(run.path("inputs_triggered_vs_clean.png"), in_t, in_c, cfg.shape());
  Json s{{"command", "watermark-verify"},
         {"mse_mean", v.mse_mean},
         {"mse_variance", v.mse_variance},
         {"n_queries", v.n_queries},
         {"failed_queries", v.failed_queries},
         {"threshold", v.threshold},
         {"is_derived", v.is_derived}};
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

int cmd_defend_clip(const ExperimentConfig& cfg, const Options& opt, std::ostream& out) {
  const std::string path = model_path(cfg, opt);
  const Checkpoint ckpt = load_model_checkpoint(path);
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  SamplerConfig sc = sampler_from(cfg, opt);
  const int n = opt.n > 0 ? opt.n : cfg.eval.samples;
  const std::vector<TriggerTargetPair> pairs = pairs_for(ckpt, cfg);
  Run run(cfg, "defend-clip", opt, {}, {"unclipped_vs_clipped.png"}, {{"checkpoint", path}, {"n", n}});
  Json arms = Json::array();
  if (!ckpt.model->conditional()) {
    for (const auto& pair : pairs) {
      const ClipDefenseReport r = eval_clip_defense(*ckpt.model, pair, sc, schedule, n, eval_seed(cfg));
      run.metric(0, "attack_mse_unclipped/" + pair.id, r.unclipped.attack_mse);
      run.metric(0, "attack_mse_clipped/" + pair.id, r.clipped.attack_mse);
      arms.push_back({{"pair", pair.id}, {"unclipped", r.unclipped.attack_mse}, {"clipped", r.clipped.attack_mse},
                      {"ratio", r.clipped.attack_mse / r.unclipped.attack_mse}});
    }
    Batch a, b;
    sc.clip_latents = false;
    evaluate_attack(*ckpt.model, pairs.front(), sc, schedule, n, eval_seed(cfg), &a);
    sc.clip_latents = true;
    evaluate_attack(*ckpt.model, pairs.front(), sc, schedule, n, eval_seed(cfg), &b);
    write_side_by_side(run.path("unclipped_vs_clipped.png"), a, b, cfg.shape());
  } else {
    const IngestedData data = ingest_dataset(cfg);
    const WatermarkProbe probe = make_probe(cfg, data);
    const int per_text = std::max(1, n / static_cast<int>(probe.texts.size()));
    Batch outs[2];
    double mse[2];
    for (int arm = 0; arm < 2; ++arm) {
      sc.clip_latents = arm == 1;
      const auto& g = std::get<GeneratorTrigger>(pairs.front().trigger);
      mse[arm] = evaluate_conditional_attack(*ckpt.model, generator_source(*g.net, pairs.front().target, g.bound), probe,
                                             pairs.front().target, sc, schedule, per_text, eval_seed(cfg), nullptr, &outs[arm])
                     .mean_mse;
    }
    run.metric(0, "attack_mse_unclipped/" + pairs.front().id, mse[0]);
    run.metric(0, "attack_mse_clipped/" + pairs.front().id, mse[1]);
    arms.push_back({{"pair", pairs.front().id}, {"unclipped", mse[0]}, {"clipped", mse[1]}, {"ratio", mse[1] / mse[0]}});
    write_side_by_side(run.path("unclipped_vs_clipped.png"), outs[0], outs[1], cfg.shape());
  }
  Json s{{"command", "defend-clip"}, {"arms", arms}};
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

int cmd_defend_finetune(const ExperimentConfig& cfg, const Options& opt, std::ostream& out) {
  const std::string path = model_path(cfg, opt);
  const Checkpoint ckpt = load_model_checkpoint(path);
  if (ckpt.model->conditional()) throw InvalidArgument("defend-finetune supports unconditional models");
  if (ckpt.pairs.empty()) throw InvalidArgument("defend-finetune needs a backdoored checkpoint with its triggers");
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  const SamplerConfig sc = sampler_from(cfg, opt);
  const int n = opt.n > 0 ? opt.n : cfg.eval.samples;
  const int epochs = opt.epochs >= 0 ? opt.epochs : cfg.eval.defense_epochs;
  const IngestedData data = ingest_dataset(cfg);
  Run run(cfg, "defend-finetune", opt, {"model.ckpt"}, {"before_vs_after.png"},
          {{"checkpoint", path}, {"epochs", epochs}, {"n", n}});
  DenoiserMlp model = *ckpt.model;
  Batch before;
  evaluate_attack(model, ckpt.pairs.front(), sc, schedule, n, eval_seed(cfg), &before);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed ^ 0xdefULL;
  const DefenseReport r = finetune_clean_defense(model, ckpt.pairs.front(), data.train, epochs, tc, schedule, sc, n,
                                                 cfg.eval.success_bar);
  Batch after;
  evaluate_attack(model, ckpt.pairs.front(), sc, schedule, n, eval_seed(cfg), &after);
  write_side_by_side(run.path("before_vs_after.png"), before, after, cfg.shape());
  save(run.path("model.ckpt"), run.manifest(), model, ckpt.pairs, nullptr);
  run.metric(0, "attack_mse_before", r.before.attack_mse);
  run.metric(epochs, "attack_mse_after", r.after.attack_mse);
  Json s{{"command", "defend-finetune"},
         {"epochs", epochs},
         {"attack_mse_before", r.before.attack_mse},
         {"attack_mse_after", r.after.attack_mse},
         {"success_bar", cfg.eval.success_bar},
         {"defense_failed", r.defense_failed}};
  run.summary(s);
  out << s.dump(2) << "\n";
  return 0;
}

}  // namespace

WatermarkProbe make_probe(const ExperimentConfig& cfg, const IngestedData& data) {
  WatermarkProbe p;
  p.images = data.held_out.size() > 0 ? data.held_out.images : data.train.images;
  p.shape = cfg.shape();
  p.masks = cfg.masks;
  p.texts.push_back(TextCondition::null());
  std::set<std::vector<int>> seen;
  for (const auto& c : data.train.captions) {
    if (!c.is_null() && seen.insert(c.tokens).second) p.texts.push_back(c);
  }
  return p;
}

std::vector<TriggerTargetPair> initial_pairs(const ExperimentConfig& cfg) {
  const Shape shape = cfg.shape();
  const std::vector<Eigen::VectorXd> targets = load_targets(cfg.triggers, shape);
  const double C = cfg.triggers.bound;
  std::shared_ptr<TriggerGeneratorNet> net;
  if (cfg.triggers.kind == "generator") {
    net = std::make_shared<TriggerGeneratorNet>(GeneratorConfig{shape, cfg.triggers.generator_width}, C, cfg.seed);
  }
  std::vector<TriggerTargetPair> pairs;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    TriggerTargetPair p;
    p.id = "pair" + std::to_string(i) + "-" + fs::path(cfg.triggers.targets[i]).stem().string();
    p.target = targets[i];
    if (net) {
      p.trigger = GeneratorTrigger{net, C};
    } else {
      Rng rng = make_rng(cfg.seed, 0x7219 + i);
      std::uniform_real_distribution<double> u(-C, C);
      Eigen::VectorXd delta(shape.size());
      for (Eigen::Index k = 0; k < delta.size(); ++k) delta[k] = u(rng);
      if (cfg.triggers.kind == "universal") {
        p.trigger = UniversalTrigger{delta, C};
      } else {
        p.trigger = DistributionalTrigger{delta, C};
      }
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Invisible backdoor triggers for diffusion models", "ibd"};
  app.require_subcommand(1);
  Options opt;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", opt.config, "experiment config (JSON)")->required();
    sub->add_option("--run-dir", opt.run_dir, "output directory (default <out_dir>/<command>)");
  };
  const auto add_model = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", opt.checkpoint, "model checkpoint (default <out_dir>/train-backdoor/model.ckpt)");
    sub->add_option("--sampler", opt.sampler, "ddim | dpm-solver-2");
    sub->add_flag("--clip", opt.clip, "clip latents to [-1, 1] after every step");
    sub->add_option("--n", opt.n, "number of samples");
  };
  CLI::App* verify = app.add_subcommand("verify-math", "run the derivation checks");
  CLI::App* train_clean_cmd = app.add_subcommand("train-clean", "train without a backdoor");
  CLI::App* train_backdoor = app.add_subcommand("train-backdoor", "bi-level backdoor training");
  CLI::App* finetune = app.add_subcommand("finetune-backdoor", "inject a backdoor into a pretrained model");
  CLI::App* sample = app.add_subcommand("sample", "draw clean or triggered samples");
  CLI::App* attack = app.add_subcommand("attack-eval", "attack MSE and utility");
  CLI::App* watermark = app.add_subcommand("watermark-verify", "black-box watermark verification");
  CLI::App* clip = app.add_subcommand("defend-clip", "inference-time clipping defense");
  CLI::App* defend_ft = app.add_subcommand("defend-finetune", "clean fine-tuning defense");
  for (CLI::App* sub : {verify, train_clean_cmd, train_backdoor, finetune, sample, attack, watermark, clip, defend_ft}) {
    add_common(sub);
  }
  for (CLI::App* sub : {sample, attack, watermark, clip, defend_ft}) add_model(sub);
  train_clean_cmd->add_option("--resume", opt.resume, "continue from a checkpoint with training state");
  train_backdoor->add_option("--resume", opt.resume, "continue from a checkpoint with training state");
  finetune->add_option("--from", opt.from, "pretrained clean checkpoint (default <out_dir>/train-clean/model.ckpt)");
  sample->add_flag("--triggered", opt.triggered, "insert the trigger and report MSE to the target");
  attack->add_option("--baseline", opt.baseline, "clean checkpoint for the utility ratio");
  watermark->add_option("--queries", opt.queries, "number of queries");
  watermark->add_option("--threshold", opt.threshold, "MSE threshold");
  defend_ft->add_option("--epochs", opt.epochs, "clean fine-tuning epochs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    ExperimentConfig cfg = load_config(opt.config);
    apply_seed_override(cfg);
    if (verify->parsed()) return cmd_verify(cfg, opt, out);
    if (train_clean_cmd->parsed()) return cmd_train(cfg, opt, false, out);
    if (train_backdoor->parsed()) return cmd_train(cfg, opt, true, out);
    if (finetune->parsed()) return cmd_finetune_backdoor(cfg, opt, out);
    if (sample->parsed()) return cmd_sample(cfg, opt, out);
    if (attack->parsed()) return cmd_attack_eval(cfg, opt, out);
    if (watermark->parsed()) return cmd_watermark(cfg, opt, out);
    if (clip->parsed()) return cmd_defend_clip(cfg, opt, out);
    return cmd_defend_finetune(cfg, opt, out);
  } catch (const Error& e) {
    err << "error: " << e.category() << ": " << e.what() << "\n";
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace ibd
