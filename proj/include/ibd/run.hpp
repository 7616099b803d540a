#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "ibd/config.hpp"
#include "ibd/eval.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

inline constexpr const char* kVersion = "0.1.0";

/// Entry point of the `ibd` tool. args excludes the program name. Errors are
/// reported on `err` as one line "error: <category>: <message>".
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Freshly initialized trigger-target pairs for a config: noise-space
/// triggers uniform in [-C, C], or one shared generator.
std::vector<TriggerTargetPair> initial_pairs(const ExperimentConfig& cfg);

/// Conditional evaluation probe: held-out images, the configured masks, and
/// the null text followed by every distinct training caption.
WatermarkProbe make_probe(const ExperimentConfig& cfg, const IngestedData& data);

}  // namespace ibd
