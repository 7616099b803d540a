#include "ibd/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "ibd/error.hpp"
#include "ibd/image_io.hpp"

namespace ibd {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.empty() || words_.front() != "<null>") throw InvalidArgument("vocabulary must start with <null>");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i].empty() || words_[i].find_first_of(" \t\n") != std::string::npos) {
      throw InvalidArgument("vocabulary words must be non-empty and contain no whitespace");
    }
    if (std::find(words_.begin(), words_.begin() + static_cast<std::ptrdiff_t>(i), words_[i]) !=
        words_.begin() + static_cast<std::ptrdiff_t>(i)) {
      throw InvalidArgument("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

TextCondition Vocabulary::encode(const std::string& caption) const {
  std::istringstream in(caption);
  TextCondition text;
  text.tokens.clear();
  for (std::string w; in >> w;) {
    const auto it = std::find(words_.begin(), words_.end(), w);
    if (it == words_.end()) throw DataError("caption word '" + w + "' is not in the vocabulary");
    text.tokens.push_back(static_cast<int>(it - words_.begin()));
  }
  if (text.tokens.empty()) return TextCondition::null();
  return text;
}

std::string Vocabulary::decode(const TextCondition& text) const {
  std::string out;
  for (int t : text.tokens) {
    if (t < 0 || t >= size()) throw InvalidArgument("token out of vocabulary");
    if (!out.empty()) out += ' ';
    out += words_[static_cast<std::size_t>(t)];
  }
  return out;
}

namespace {

const std::array<const char*, 5> kColors{"red", "green", "blue", "yellow", "white"};
const std::array<const char*, 3> kShapes{"circle", "square", "triangle"};
const std::array<std::array<double, 3>, 5> kPalette{{
    {0.9, -0.7, -0.7},
    {-0.7, 0.9, -0.7},
    {-0.7, -0.7, 0.9},
    {0.9, 0.9, -0.7},
    {0.9, 0.9, 0.9},
}};

double channel_value(const std::array<double, 3>& rgb, int c, int channels) {
  if (channels == 1) return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
  return rgb[static_cast<std::size_t>(c % 3)];
}

bool inside_shape(int kind, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx;
  const double dy = py - cy;
  switch (kind) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    default: {
      // Upward triangle with apex at cy - r and base at cy + r.
      if (dy < -r || dy > r) return false;
      const double half = r * (dy + r) / (2.0 * r);
      return std::abs(dx) <= half;
    }
  }
}

}  // namespace

Vocabulary shapes_vocabulary() {
  std::vector<std::string> words{"<null>"};
  for (const char* c : kColors) words.emplace_back(c);
  for (const char* s : kShapes) words.emplace_back(s);
  return Vocabulary(words);
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
  Dataset out;
  out.shape = shape;
  out.images.resize(images.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const int i = indices[j];
    if (i < 0 || i >= size()) throw InvalidArgument("dataset subset index out of range");
    out.images.col(static_cast<Eigen::Index>(j)) = images.col(i);
    if (captioned()) out.captions.push_back(captions[static_cast<std::size_t>(i)]);
    if (!names.empty()) out.names.push_back(names[static_cast<std::size_t>(i)]);
  }
  return out;
}

Dataset synthetic_shapes(Shape shape, int count, std::uint64_t seed) {
  if (shape.size() <= 0 || count < 1) throw InvalidArgument("synthetic_shapes: empty request");
  if (shape.channels != 1 && shape.channels != 3) throw InvalidArgument("synthetic_shapes: 1 or 3 channels");
  const Vocabulary vocab = shapes_vocabulary();
  Rng rng = make_rng(seed, 0x5a9e);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Dataset d;
  d.shape = shape;
  d.images.resize(shape.size(), count);
  const double side = std::min(shape.height, shape.width);
  for (int i = 0; i < count; ++i) {
    const double bg = -0.8 + 0.6 * unit(rng);
    const int color = static_cast<int>(unit(rng) * kColors.size()) % static_cast<int>(kColors.size());
    const int kind = static_cast<int>(unit(rng) * kShapes.size()) % static_cast<int>(kShapes.size());
    const double r = side * (0.2 + 0.15 * unit(rng));
    const double cx = r + unit(rng) * (shape.width - 2 * r);
    const double cy = r + unit(rng) * (shape.height - 2 * r);
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const bool in = inside_shape(kind, x + 0.5, y + 0.5, cx, cy, r);
        for (int c = 0; c < shape.channels; ++c) {
          d.images((c * shape.height + y) * shape.width + x, i) =
              in ? channel_value(kPalette[static_cast<std::size_t>(color)], c, shape.channels) : bg;
        }
      }
    }
    d.captions.push_back(vocab.encode(std::string(kColors[static_cast<std::size_t>(color)]) + " " +
                                      kShapes[static_cast<std::size_t>(kind)]));
    d.names.push_back("shape_" + std::to_string(i));
  }
  return d;
}

namespace {

std::vector<std::filesystem::path> png_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("image folder " + dir.string() + " does not exist");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

void warn(IngestReport* report, std::string message) {
  if (report) report->warnings.push_back(std::move(message));
}

}  // namespace

Dataset load_image_folder(const std::filesystem::path& dir, Shape shape, int max_failures, IngestReport* report) {
  Dataset d;
  d.shape = shape;
  std::vector<Eigen::VectorXd> cols;
  int failures = 0;
  for (const auto& file : png_files(dir)) {
    try {
      cols.push_back(raw_to_grid(read_png(file), shape));
      d.names.push_back(file.filename().string());
    } catch (const DataError& e) {
      warn(report, std::string("skipped: ") + e.what());
      if (++failures > max_failures) {
        throw DataError("more than " + std::to_string(max_failures) + " undecodable files in " + dir.string());
      }
    }
  }
  if (cols.empty()) throw DataError("no decodable images in " + dir.string());
  d.images.resize(shape.size(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) d.images.col(static_cast<Eigen::Index>(j)) = cols[j];
  return d;
}

Dataset load_captioned_folder(const std::filesystem::path& dir, const std::filesystem::path& captions,
                              const Vocabulary& vocab, Shape shape, int max_failures, IngestReport* report) {
  std::ifstream in(captions);
  if (!in) throw DataError("cannot read caption table " + captions.string());
  std::map<std::string, TextCondition> table;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(captions.string() + ":" + std::to_string(n) + ": expected '<file>\\t<caption>'");
    }
    table[line.substr(0, tab)] = vocab.encode(line.substr(tab + 1));
  }
  Dataset all = load_image_folder(dir, shape, max_failures, report);
  std::vector<int> keep;
  std::vector<TextCondition> texts;
  for (int i = 0; i < all.size(); ++i) {
    const auto it = table.find(all.names[static_cast<std::size_t>(i)]);
    if (it == table.end()) {
      warn(report, "skipped " + all.names[static_cast<std::size_t>(i)] + ": no caption");
      continue;
    }
    keep.push_back(i);
    texts.push_back(it->second);
  }
  if (keep.empty()) throw DataError("no captioned images in " + dir.string());
  Dataset d = all.subset(keep);
  d.captions = std::move(texts);
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double held_out_fraction, std::uint64_t seed) {
  if (!(held_out_fraction >= 0.0 && held_out_fraction < 1.0)) {
    throw InvalidArgument("held-out fraction must lie in [0, 1)");
  }
  std::vector<int> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0x5b1);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround((1.0 - held_out_fraction) * data.size()));
  if (n_train == 0) throw InvalidArgument("split leaves no training items");
  const std::vector<int> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<int> b(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return {data.subset(a), data.subset(b)};
}

std::vector<std::string> builtin_target_names() { return {"hat", "shoe", "checker"}; }

Eigen::VectorXd builtin_target(const std::string& name, Shape shape) {
  if (shape.size() <= 0) throw InvalidArgument("builtin_target: empty shape");
  const std::array<double, 3> background{0.85, 0.75, 0.55};
  std::array<double, 3> ink{};
  const double h = shape.height;
  const double w = shape.width;
  std::function<bool(double, double)> inside;
  if (name == "hat") {
    ink = {-0.9, -0.9, -0.6};
    inside = [h, w](double x, double y) {
      const bool crown = std::abs(x - w / 2) <= 0.22 * w && y >= 0.2 * h && y <= 0.62 * h;
      const bool brim = std::abs(x - w / 2) <= 0.42 * w && y > 0.62 * h && y <= 0.74 * h;
      return crown || brim;
    };
  } else if (name == "shoe") {
    ink = {-0.4, -0.9, -0.9};
    inside = [h, w](double x, double y) {
      const bool shaft = x >= 0.2 * w && x <= 0.45 * w && y >= 0.25 * h && y <= 0.75 * h;
      const bool sole = x >= 0.2 * w && x <= 0.85 * w && y >= 0.55 * h && y <= 0.75 * h;
      return shaft || sole;
    };
  } else if (name == "checker") {
    ink = {-0.9, -0.9, -0.9};
    inside = [h, w](double x, double y) {
      const int cx = static_cast<int>(x / std::max(1.0, w / 4));
      const int cy = static_cast<int>(y / std::max(1.0, h / 4));
      return (cx + cy) % 2 == 0;
    };
  } else {
    throw InvalidArgument("unknown builtin target '" + name + "' (known: hat, shoe, checker)");
  }
  Eigen::VectorXd out(shape.size());
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const bool in = inside(x + 0.5, y + 0.5);
        out[(c * shape.height + y) * shape.width + x] = channel_value(in ? ink : background, c, shape.channels);
      }
    }
  }
  return out;
}

}  // namespace ibd
