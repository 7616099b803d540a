#include "ibd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "ibd/error.hpp"
#include "ibd/nn.hpp"

namespace ibd {

namespace {

constexpr char kMagic[8] = {'I', 'B', 'D', 'C', 'K', 'P', 'T', '\0'};

using nn::read_pod;
using nn::write_pod;

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_section(std::ostream& out, const std::string& tag, const std::string& payload) {
  nn::write_string(out, tag);
  write_pod<std::uint64_t>(out, payload.size());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

std::string encode_model(const DenoiserMlp& model) {
  std::ostringstream s(std::ios::binary);
  const DenoiserConfig& c = model.config();
  for (int v : {c.shape.height, c.shape.width, c.shape.channels, c.hidden, c.blocks, c.time_features,
                c.conditional ? 1 : 0, c.vocab_size}) {
    write_pod<std::int32_t>(s, v);
  }
  nn::write_parameters(s, model.params());
  return s.str();
}

DenoiserMlp decode_model(std::istream& in) {
  DenoiserConfig c;
  c.shape.height = read_pod<std::int32_t>(in);
  c.shape.width = read_pod<std::int32_t>(in);
  c.shape.channels = read_pod<std::int32_t>(in);
  c.hidden = read_pod<std::int32_t>(in);
  c.blocks = read_pod<std::int32_t>(in);
  c.time_features = read_pod<std::int32_t>(in);
  c.conditional = read_pod<std::int32_t>(in) != 0;
  c.vocab_size = read_pod<std::int32_t>(in);
  DenoiserMlp model(c, 0);
  nn::read_parameters(in, model.params());
  return model;
}

std::string encode_pairs(const std::vector<TriggerTargetPair>& pairs) {
  std::ostringstream s(std::ios::binary);
  write_pod<std::uint32_t>(s, static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    nn::write_string(s, p.id);
    nn::write_matrix(s, p.target);
    write_trigger(s, p.trigger);
  }
  return s.str();
}

std::vector<TriggerTargetPair> decode_pairs(std::istream& in, const std::shared_ptr<TriggerGeneratorNet>& net) {
  const auto n = read_pod<std::uint32_t>(in);
  std::vector<TriggerTargetPair> pairs;
  for (std::uint32_t i = 0; i < n; ++i) {
    TriggerTargetPair p;
    p.id = nn::read_string(in);
    p.target = nn::read_matrix(in);
    p.trigger = read_trigger(in, net);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::string encode_state(const TrainState& st) {
  std::ostringstream s(std::ios::binary);
  write_pod<std::int64_t>(s, st.iteration);
  st.outer_opt.save(s);
  write_pod<std::uint32_t>(s, static_cast<std::uint32_t>(st.inner_opts.size()));
  for (const auto& o : st.inner_opts) o.save(s);
  nn::write_matrix(s, Eigen::Map<const Eigen::VectorXd>(st.loss_trace.data(), static_cast<Eigen::Index>(st.loss_trace.size())));
  nn::write_matrix(s, Eigen::Map<const Eigen::VectorXd>(st.inner_trace.data(), static_cast<Eigen::Index>(st.inner_trace.size())));
  return s.str();
}

std::vector<double> to_vector(const Eigen::MatrixXd& m) { return {m.data(), m.data() + m.size()}; }

TrainState decode_state(std::istream& in) {
  TrainState st;
  st.iteration = read_pod<std::int64_t>(in);
  st.outer_opt.load(in);
  const auto n = read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    nn::Adam a;
    a.load(in);
    st.inner_opts.push_back(std::move(a));
  }
  st.loss_trace = to_vector(nn::read_matrix(in));
  st.inner_trace = to_vector(nn::read_matrix(in));
  return st;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, sizeof kMagic);
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  nn::write_string(out, ckpt.manifest.dump());
  if (ckpt.model) write_section(out, "model", encode_model(*ckpt.model));
  if (ckpt.generator) {
    std::ostringstream s(std::ios::binary);
    write_generator(s, *ckpt.generator);
    write_section(out, "generator", s.str());
  }
  write_section(out, "pairs", encode_pairs(ckpt.pairs));
  if (ckpt.state) write_section(out, "state", encode_state(*ckpt.state));
  std::string bytes = out.str();
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size());
  bytes.append(reinterpret_cast<const char*>(&crc), sizeof crc);
  return bytes;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 2 * sizeof(std::uint32_t) || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError("not a checkpoint file");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw IntegrityError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint32_t);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (crc32_of(bytes.data(), body) != stored) throw IntegrityError("checkpoint checksum mismatch (file is corrupt)");

  std::istringstream in(bytes.substr(0, body), std::ios::binary);
  in.seekg(sizeof kMagic + sizeof(std::uint32_t));
  Checkpoint ckpt;
  try {
    ckpt.manifest = Json::parse(nn::read_string(in));
  } catch (const nlohmann::json::exception&) {
    throw IntegrityError("checkpoint manifest is not valid JSON");
  }
  std::string pairs_payload;
  bool have_pairs = false;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::string tag = nn::read_string(in);
    const auto len = read_pod<std::uint64_t>(in);
    if (len > body) throw IntegrityError("checkpoint section '" + tag + "' overruns the file");
    std::string payload(len, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(len));
    if (!in) throw IntegrityError("checkpoint section '" + tag + "' is truncated");
    std::istringstream s(payload, std::ios::binary);
    if (tag == "model") {
      ckpt.model.emplace(decode_model(s));
    } else if (tag == "generator") {
      ckpt.generator = read_generator(s);
    } else if (tag == "pairs") {
      // decoded last: generator triggers refer to the shared network
      pairs_payload = std::move(payload);
      have_pairs = true;
    } else if (tag == "state") {
      ckpt.state = decode_state(s);
    } else {
      throw IntegrityError("unknown checkpoint section '" + tag + "'");
    }
  }
  if (have_pairs) {
    std::istringstream s(pairs_payload, std::ios::binary);
    ckpt.pairs = decode_pairs(s, ckpt.generator);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io", "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io", "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const IntegrityError& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  }
}

ExperimentConfig checkpoint_config(const Checkpoint& ckpt) {
  if (!ckpt.manifest.contains("config")) throw IntegrityError("checkpoint manifest has no config snapshot");
  return config_from_json(ckpt.manifest.at("config"));
}

}  // namespace ibd
