#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "ibd/config.hpp"
#include "ibd/model.hpp"
#include "ibd/training.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything a checkpoint file holds. `manifest` carries the run manifest,
/// including the config snapshot.
struct Checkpoint {
  Json manifest;
  std::optional<DenoiserMlp> model;
  std::vector<TriggerTargetPair> pairs;
  std::shared_ptr<TriggerGeneratorNet> generator;
  std::optional<TrainState> state;
};

/// Layout: magic, version, manifest JSON, tagged sections, CRC-32 of all
/// preceding bytes. Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Verifies magic, version and checksum over the whole file before decoding
/// anything. Throws IntegrityError on corruption and a version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Serialized bytes, as written by save_checkpoint.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

/// The config snapshot recorded in a checkpoint's manifest.
ExperimentConfig checkpoint_config(const Checkpoint& ckpt);

}  // namespace ibd
