#include "ibd/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ibd/error.hpp"
#include "ibd/image_io.hpp"

namespace ibd {

namespace {

// Reads one JSON object, tracking which keys were consumed so leftovers can
// be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(name_or_root() + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + ": wrong type (got " + std::string(it->type_name()) + ")");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const Json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

 private:
  std::string name_or_root() const { return path_.empty() ? "config" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<Pipeline> kPipelines[] = {{Pipeline::kUnconditional, "unconditional"},
                                             {Pipeline::kConditional, "conditional"}};
constexpr EnumName<SamplerKind> kSamplers[] = {{SamplerKind::kDdim, "ddim"}, {SamplerKind::kDpmSolver2, "dpm-solver-2"}};
constexpr EnumName<MaskKind> kMaskKinds[] = {
    {MaskKind::kRect, "rect"}, {MaskKind::kFreeForm, "free-form"}, {MaskKind::kMixed, "mixed"}};
constexpr EnumName<TrainMode> kModes[] = {{TrainMode::kScratch, "scratch"}, {TrainMode::kFinetune, "finetune"}};
constexpr EnumName<InnerObjective> kObjectives[] = {{InnerObjective::kSquaredNorm, "squared-norm"},
                                                    {InnerObjective::kMeanSquared, "mean-squared"}};
constexpr EnumName<LrSchedule> kLrSchedules[] = {{LrSchedule::kConstant, "constant"}, {LrSchedule::kCosine, "cosine"}};
constexpr EnumName<InnerOptimizer> kOptimizers[] = {{InnerOptimizer::kSgd, "sgd"}, {InnerOptimizer::kAdam, "adam"}};

template <typename E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <typename E, std::size_t N>
void read_enum(ObjectReader& r, const char* key, const EnumName<E> (&table)[N], E& out) {
  std::string name = enum_name(table, out);
  r.read(key, name);
  for (const auto& e : table) {
    if (name == e.name) {
      out = e.value;
      return;
    }
  }
  std::string options;
  for (const auto& e : table) options += (options.empty() ? "" : ", ") + std::string(e.name);
  throw ConfigError(r.field(key) + ": '" + name + "' is not one of " + options);
}

int line_of(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

[[noreturn]] void invalid(const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); }

}  // namespace

std::string sampler_kind_name(SamplerKind kind) { return enum_name(kSamplers, kind); }

SamplerKind parse_sampler_kind(const std::string& name) {
  for (const auto& e : kSamplers) {
    if (name == e.name) return e.value;
  }
  throw InvalidArgument("unknown sampler '" + name + "' (ddim, dpm-solver-2)");
}

Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["pipeline"] = enum_name(kPipelines, c.pipeline);
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["model"] = {{"hidden", c.model.hidden}, {"blocks", c.model.blocks}, {"time_features", c.model.time_features}};
  const TrainConfig& t = c.train;
  j["train"] = {{"outer_iterations", t.outer_iterations},
                {"inner_steps", t.inner_steps},
                {"inner_lr", t.inner_lr},
                {"outer_lr", t.outer_lr},
                {"batch_size", t.batch_size},
                {"poison_rate", t.poison_rate},
                {"inner_sample_steps", t.inner_sample_steps},
                {"inner_batch", t.inner_batch},
                {"null_text_prob", t.null_text_prob},
                {"mode", enum_name(kModes, t.mode)},
                {"inner_objective", enum_name(kObjectives, t.inner_objective)},
                {"inner_optimizer", enum_name(kOptimizers, t.inner_optimizer)},
                {"grad_clip", t.grad_clip},
                {"inner_grad_clip", t.inner_grad_clip},
                {"outer_lr_schedule", enum_name(kLrSchedules, t.outer_lr_schedule)}};
  j["triggers"] = {{"kind", c.triggers.kind},
                   {"bound", c.triggers.bound},
                   {"count", c.triggers.count},
                   {"targets", c.triggers.targets},
                   {"generator_width", c.triggers.generator_width}};
  const FreeFormParams& f = c.masks.free_form;
  j["masks"] = {{"kind", enum_name(kMaskKinds, c.masks.kind)},
                {"rect_min_area", c.masks.rect_min_area},
                {"rect_max_area", c.masks.rect_max_area},
                {"free_form",
                 {{"min_strokes", f.min_strokes},
                  {"max_strokes", f.max_strokes},
                  {"min_width_frac", f.min_width_frac},
                  {"max_width_frac", f.max_width_frac},
                  {"max_vertices", f.max_vertices},
                  {"max_angle", f.max_angle},
                  {"max_length_frac", f.max_length_frac}}}};
  j["sampler"] = {{"kind", sampler_kind_name(c.sampler.kind)},
                  {"n_steps", c.sampler.n_steps},
                  {"eta", c.sampler.eta},
                  {"guidance_scale", c.sampler.guidance_scale},
                  {"clip_latents", c.sampler.clip_latents}};
  j["dataset"] = {{"source", c.dataset.source},
                  {"path", c.dataset.path},
                  {"captions", c.dataset.captions},
                  {"vocabulary", c.dataset.vocabulary},
                  {"resolution", c.dataset.resolution},
                  {"channels", c.dataset.channels},
                  {"count", c.dataset.count},
                  {"held_out", c.dataset.held_out},
                  {"max_failures", c.dataset.max_failures}};
  j["eval"] = {{"samples", c.eval.samples},
               {"success_bar", c.eval.success_bar},
               {"watermark_queries", c.eval.watermark_queries},
               {"watermark_threshold", c.eval.watermark_threshold},
               {"defense_epochs", c.eval.defense_epochs}};
  return j;
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  ObjectReader root(j, "");
  if (!root.has("pipeline")) invalid("pipeline", "required");
  if (!root.has("dataset")) invalid("dataset", "required");
  read_enum(root, "pipeline", kPipelines, c.pipeline);
  root.read("seed", c.seed);
  root.read("out_dir", c.out_dir);
  root.read("checkpoint_every", c.checkpoint_every);

  if (const Json* s = root.child("schedule")) {
    ObjectReader r(*s, "schedule");
    r.read("T", c.schedule.T);
    r.read("beta_start", c.schedule.beta_start);
    r.read("beta_end", c.schedule.beta_end);
    r.finish();
  }
  if (const Json* s = root.child("model")) {
    ObjectReader r(*s, "model");
    r.read("hidden", c.model.hidden);
    r.read("blocks", c.model.blocks);
    r.read("time_features", c.model.time_features);
    r.finish();
  }
  // The conditional inner chain defaults to 5 steps, the unconditional one to 10.
  if (c.pipeline == Pipeline::kConditional) c.train.inner_sample_steps = 5;
  if (c.pipeline == Pipeline::kConditional) c.triggers.kind = "generator";
  if (const Json* s = root.child("train")) {
    ObjectReader r(*s, "train");
    TrainConfig& t = c.train;
    r.read("outer_iterations", t.outer_iterations);
    r.read("inner_steps", t.inner_steps);
    r.read("inner_lr", t.inner_lr);
    r.read("outer_lr", t.outer_lr);
    r.read("batch_size", t.batch_size);
    r.read("poison_rate", t.poison_rate);
    r.read("inner_sample_steps", t.inner_sample_steps);
    r.read("inner_batch", t.inner_batch);
    r.read("null_text_prob", t.null_text_prob);
    read_enum(r, "mode", kModes, t.mode);
    read_enum(r, "inner_objective", kObjectives, t.inner_objective);
    read_enum(r, "inner_optimizer", kOptimizers, t.inner_optimizer);
    r.read("grad_clip", t.grad_clip);
    r.read("inner_grad_clip", t.inner_grad_clip);
    read_enum(r, "outer_lr_schedule", kLrSchedules, t.outer_lr_schedule);
    r.finish();
  }
  if (const Json* s = root.child("triggers")) {
    ObjectReader r(*s, "triggers");
    r.read("kind", c.triggers.kind);
    r.read("bound", c.triggers.bound);
    r.read("count", c.triggers.count);
    r.read("targets", c.triggers.targets);
    r.read("generator_width", c.triggers.generator_width);
    r.finish();
  }
  if (const Json* s = root.child("masks")) {
    ObjectReader r(*s, "masks");
    read_enum(r, "kind", kMaskKinds, c.masks.kind);
    r.read("rect_min_area", c.masks.rect_min_area);
    r.read("rect_max_area", c.masks.rect_max_area);
    if (const Json* ff = r.child("free_form")) {
      ObjectReader q(*ff, "masks.free_form");
      FreeFormParams& f = c.masks.free_form;
      q.read("min_strokes", f.min_strokes);
      q.read("max_strokes", f.max_strokes);
      q.read("min_width_frac", f.min_width_frac);
      q.read("max_width_frac", f.max_width_frac);
      q.read("max_vertices", f.max_vertices);
      q.read("max_angle", f.max_angle);
      q.read("max_length_frac", f.max_length_frac);
      q.finish();
    }
    r.finish();
  }
  if (const Json* s = root.child("sampler")) {
    ObjectReader r(*s, "sampler");
    read_enum(r, "kind", kSamplers, c.sampler.kind);
    r.read("n_steps", c.sampler.n_steps);
    r.read("eta", c.sampler.eta);
    r.read("guidance_scale", c.sampler.guidance_scale);
    r.read("clip_latents", c.sampler.clip_latents);
    r.finish();
  }
  {
    ObjectReader r(*root.child("dataset"), "dataset");
    DatasetSpec& d = c.dataset;
    r.read("source", d.source);
    r.read("path", d.path);
    r.read("captions", d.captions);
    r.read("vocabulary", d.vocabulary);
    r.read("resolution", d.resolution);
    r.read("channels", d.channels);
    r.read("count", d.count);
    r.read("held_out", d.held_out);
    r.read("max_failures", d.max_failures);
    r.finish();
  }
  if (const Json* s = root.child("eval")) {
    ObjectReader r(*s, "eval");
    r.read("samples", c.eval.samples);
    r.read("success_bar", c.eval.success_bar);
    r.read("watermark_queries", c.eval.watermark_queries);
    r.read("watermark_threshold", c.eval.watermark_threshold);
    r.read("defense_epochs", c.eval.defense_epochs);
    r.finish();
  }
  root.finish();
  c.train.seed = c.seed;
  validate_config(c);
  return c;
}

void validate_config(const ExperimentConfig& c) {
  if (c.schedule.T < 1) invalid("schedule.T", "must be >= 1");
  if (!(c.schedule.beta_start > 0.0 && c.schedule.beta_start < 1.0)) invalid("schedule.beta_start", "must lie in (0, 1)");
  if (!(c.schedule.beta_end > 0.0 && c.schedule.beta_end < 1.0)) invalid("schedule.beta_end", "must lie in (0, 1)");
  if (c.model.hidden < 1) invalid("model.hidden", "must be >= 1");
  if (c.model.blocks < 0) invalid("model.blocks", "must be >= 0");
  if (c.model.time_features < 2 || c.model.time_features % 2) invalid("model.time_features", "must be even and >= 2");
  if (c.checkpoint_every < 0) invalid("checkpoint_every", "must be >= 0");
  if (c.out_dir.empty()) invalid("out_dir", "must not be empty");

  const NoiseSchedule schedule = build_linear_schedule(c.schedule);
  try {
    validate_train_config(c.train, schedule);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string(e.what()));
  }

  const TriggerSpec& t = c.triggers;
  const bool conditional = c.pipeline == Pipeline::kConditional;
  if (conditional && t.kind != "generator") invalid("triggers.kind", "the conditional pipeline uses 'generator'");
  if (!conditional && t.kind != "universal" && t.kind != "distributional") {
    invalid("triggers.kind", "the unconditional pipeline uses 'universal' or 'distributional'");
  }
  if (!(t.bound > 0.0) || !std::isfinite(t.bound)) invalid("triggers.bound", "must be finite and > 0");
  if (t.count < 1) invalid("triggers.count", "must be >= 1");
  if (static_cast<int>(t.targets.size()) != t.count) invalid("triggers.targets", "needs exactly `count` entries");
  if (t.generator_width < 1) invalid("triggers.generator_width", "must be >= 1");

  const DatasetSpec& d = c.dataset;
  if (d.resolution < 2) invalid("dataset.resolution", "must be >= 2");
  if (d.channels != 1 && d.channels != 3) invalid("dataset.channels", "must be 1 or 3");
  if (!(d.held_out >= 0.0 && d.held_out < 1.0)) invalid("dataset.held_out", "must lie in [0, 1)");
  if (d.max_failures < 0) invalid("dataset.max_failures", "must be >= 0");
  if (d.source == "synthetic-shapes") {
    if (d.count < 2) invalid("dataset.count", "must be >= 2");
  } else if (d.source == "image-folder" || d.source == "captioned-image-folder") {
    if (d.path.empty()) invalid("dataset.path", "required for source '" + d.source + "'");
  } else {
    invalid("dataset.source", "'" + d.source + "' is not one of synthetic-shapes, image-folder, captioned-image-folder");
  }
  if (d.source == "captioned-image-folder" && d.captions.empty()) {
    invalid("dataset.captions", "required for source 'captioned-image-folder'");
  }
  if (conditional) {
    if (d.source == "image-folder") invalid("dataset.captions", "the conditional pipeline needs a caption table");
    if (d.resolution % 2) invalid("dataset.resolution", "the conditional pipeline needs an even resolution");
    try {
      validate_mask_params(c.masks, d.resolution, d.resolution);
    } catch (const InvalidArgument& e) {
      throw ConfigError("masks: " + std::string(e.what()));
    }
  }

  if (c.sampler.n_steps < 1 || c.sampler.n_steps > c.schedule.T) invalid("sampler.n_steps", "must lie in [1, T]");
  if (c.sampler.eta != 0.0) invalid("sampler.eta", "must be 0 (deterministic sampling)");
  if (!std::isfinite(c.sampler.guidance_scale)) invalid("sampler.guidance_scale", "must be finite");

  if (c.eval.samples < 1) invalid("eval.samples", "must be >= 1");
  if (!(c.eval.success_bar > 0.0)) invalid("eval.success_bar", "must be > 0");
  if (c.eval.watermark_queries < 1) invalid("eval.watermark_queries", "must be >= 1");
  if (!(c.eval.watermark_threshold > 0.0)) invalid("eval.watermark_threshold", "must be > 0");
  if (c.eval.defense_epochs < 0) invalid("eval.defense_epochs", "must be >= 0");
}

ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::string msg = e.what();
    const auto pos = msg.find("parse error");
    if (pos != std::string::npos) msg = msg.substr(pos);
    throw ConfigError("line " + std::to_string(line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + ": " + msg);
  }
  return config_from_json(j);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_seed_override(ExperimentConfig& cfg) {
  const char* env = std::getenv("SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw ConfigError("SEED: expected an unsigned integer, got '" + std::string(env) + "'");
  cfg.seed = v;
  cfg.train.seed = v;
}

DenoiserConfig denoiser_config(const ExperimentConfig& cfg, int vocab_size) {
  DenoiserConfig m;
  m.shape = cfg.shape();
  m.hidden = cfg.model.hidden;
  m.blocks = cfg.model.blocks;
  m.time_features = cfg.model.time_features;
  m.conditional = cfg.pipeline == Pipeline::kConditional;
  m.vocab_size = m.conditional ? vocab_size : 0;
  return m;
}

namespace {

Vocabulary caption_vocabulary(const DatasetSpec& d) {
  if (!d.vocabulary.empty()) {
    std::vector<std::string> words{"<null>"};
    words.insert(words.end(), d.vocabulary.begin(), d.vocabulary.end());
    return Vocabulary(words);
  }
  if (d.source == "synthetic-shapes") return shapes_vocabulary();
  std::ifstream in(d.captions);
  if (!in) throw DataError("cannot read caption table " + d.captions);
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (line.empty() || line[0] == '#' || tab == std::string::npos) continue;
    std::istringstream words(line.substr(tab + 1));
    for (std::string w; words >> w;) seen.insert(w);
  }
  std::vector<std::string> words{"<null>"};
  words.insert(words.end(), seen.begin(), seen.end());
  return Vocabulary(words);
}

}  // namespace

IngestedData ingest_dataset(const ExperimentConfig& cfg) {
  const DatasetSpec& d = cfg.dataset;
  const Shape shape = cfg.shape();
  IngestReport report;
  const bool captioned = d.source != "image-folder";
  Vocabulary vocab = captioned ? caption_vocabulary(d) : shapes_vocabulary();
  Dataset all;
  if (d.source == "synthetic-shapes") {
    all = synthetic_shapes(shape, d.count, cfg.seed);
  } else if (d.source == "image-folder") {
    all = load_image_folder(d.path, shape, d.max_failures, &report);
  } else {
    all = load_captioned_folder(d.path, d.captions, vocab, shape, d.max_failures, &report);
  }
  auto [train, held_out] = split_dataset(all, d.held_out, cfg.seed);
  return {std::move(train), std::move(held_out), std::move(vocab), std::move(report)};
}

std::vector<Eigen::VectorXd> load_targets(const TriggerSpec& spec, Shape shape) {
  std::vector<Eigen::VectorXd> out;
  const std::vector<std::string> builtin = builtin_target_names();
  for (const std::string& name : spec.targets) {
    if (std::find(builtin.begin(), builtin.end(), name) != builtin.end()) {
      out.push_back(builtin_target(name, shape));
    } else {
      out.push_back(raw_to_grid(read_png(name), shape));
    }
  }
  return out;
}

}  // namespace ibd
