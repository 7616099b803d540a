#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ibd/grid.hpp"
#include "ibd/model.hpp"

namespace ibd {

/// Word-level vocabulary; index 0 is always the null token "<null>".
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  /// Splits on whitespace. The empty caption maps to the null condition.
  /// Throws DataError on out-of-vocabulary words.
  TextCondition encode(const std::string& caption) const;
  std::string decode(const TextCondition& text) const;

 private:
  std::vector<std::string> words_;
};

/// "<null>", five colors, three shapes.
Vocabulary shapes_vocabulary();

/// Images as columns in [-1, 1]; captions present only for captioned sources.
struct Dataset {
  Shape shape;
  Batch images;
  std::vector<TextCondition> captions;
  std::vector<std::string> names;

  int size() const { return static_cast<int>(images.cols()); }
  bool captioned() const { return !captions.empty(); }
  Dataset subset(const std::vector<int>& indices) const;
};

/// Colored circles, squares and triangles on dark gray backgrounds, each
/// captioned "<color> <shape>". Fully determined by (shape, count, seed).
Dataset synthetic_shapes(Shape shape, int count, std::uint64_t seed);

struct IngestReport {
  std::vector<std::string> warnings;
};

/// Loads every *.png under `dir` (sorted by name). Undecodable files are
/// skipped with a warning; more than `max_failures` of them aborts with DataError.
Dataset load_image_folder(const std::filesystem::path& dir, Shape shape, int max_failures, IngestReport* report);

/// As load_image_folder, with captions from a tab-separated file of
/// "<file name>\t<caption>" lines. Images without a caption line are skipped
/// with a warning.
Dataset load_captioned_folder(const std::filesystem::path& dir, const std::filesystem::path& captions,
                              const Vocabulary& vocab, Shape shape, int max_failures, IngestReport* report);

/// Deterministic shuffle then split; the first part holds round((1 - f) N) items.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double held_out_fraction, std::uint64_t seed);

/// Builtin target images ("hat", "shoe", "checker") on bright backgrounds.
Eigen::VectorXd builtin_target(const std::string& name, Shape shape);
std::vector<std::string> builtin_target_names();

}  // namespace ibd
