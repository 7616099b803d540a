#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ibd/dataset.hpp"
#include "ibd/mask.hpp"
#include "ibd/model.hpp"
#include "ibd/sampling.hpp"
#include "ibd/schedule.hpp"
#include "ibd/training.hpp"

namespace ibd {

using Json = nlohmann::ordered_json;

enum class Pipeline { kUnconditional, kConditional };

struct ModelSpec {
  int hidden = 384;
  int blocks = 2;
  int time_features = 64;

  bool operator==(const ModelSpec&) const = default;
};

struct TriggerSpec {
  std::string kind = "universal";  // universal | distributional | generator
  double bound = 0.2;              // C
  int count = 1;
  std::vector<std::string> targets{"hat"};  // builtin names or PNG paths, one per pair
  int generator_width = 16;

  bool operator==(const TriggerSpec&) const = default;
};

struct DatasetSpec {
  std::string source = "synthetic-shapes";  // synthetic-shapes | image-folder | captioned-image-folder
  std::string path;
  std::string captions;  // TSV; required by captioned-image-folder
  std::vector<std::string> vocabulary;  // words after "<null>"; empty: builtin or taken from the captions
  int resolution = 16;
  int channels = 3;
  int count = 512;  // synthetic-shapes only
  double held_out = 0.1;
  int max_failures = 10;

  bool operator==(const DatasetSpec&) const = default;
};

struct EvalSpec {
  int samples = 64;             // chains per attack / utility evaluation
  double success_bar = 0.05;    // attack MSE below this counts as success
  int watermark_queries = 50;
  double watermark_threshold = 0.1;
  int defense_epochs = 5;

  bool operator==(const EvalSpec&) const = default;
};

struct ExperimentConfig {
  Pipeline pipeline = Pipeline::kUnconditional;
  ScheduleParams schedule;
  ModelSpec model;
  TrainConfig train;
  TriggerSpec triggers;
  MaskParams masks;
  SamplerConfig sampler;
  DatasetSpec dataset;
  EvalSpec eval;
  std::string out_dir = "runs";
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // outer iterations; 0 keeps only the final checkpoint

  Shape shape() const { return {dataset.resolution, dataset.resolution, dataset.channels}; }
};

/// Parses and validates. Missing keys take defaults; unknown keys are rejected.
/// The resulting `train.seed` equals the root seed.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
Json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const Json& j);
void validate_config(const ExperimentConfig& cfg);

/// Applies the SEED environment variable, if set, to the root seed.
void apply_seed_override(ExperimentConfig& cfg);

std::string sampler_kind_name(SamplerKind kind);
SamplerKind parse_sampler_kind(const std::string& name);

/// Builds the network described by the config (conditional models size their
/// text embedding from `vocab_size`).
DenoiserConfig denoiser_config(const ExperimentConfig& cfg, int vocab_size);

struct IngestedData {
  Dataset train;
  Dataset held_out;
  Vocabulary vocab;
  IngestReport report;
};

IngestedData ingest_dataset(const ExperimentConfig& cfg);

/// Target images for every configured pair.
std::vector<Eigen::VectorXd> load_targets(const TriggerSpec& spec, Shape shape);

}  // namespace ibd
