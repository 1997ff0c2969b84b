#include "fieldrecon/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "fieldrecon/config.hpp"

namespace fieldrecon {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kFieldMagic[4] = {'F', 'G', 'R', 'D'};
constexpr char kScoreMagic[4] = {'S', 'N', 'E', 'T'};
constexpr char kSurrogateMagic[4] = {'S', 'M', 'L', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;
// Guards against absurd allocations when a header is corrupt.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

template <typename U>
void put(std::ostream& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, const char* what) : in_(in), what_(what) {}

  template <typename U>
  U get() {
    unsigned char bytes[sizeof(U)];
    if (!in_.read(reinterpret_cast<char*>(bytes), sizeof(U))) fail("truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (n > (1u << 20)) fail("string length out of range");
    std::string s(n, '\0');
    if (n > 0 && !in_.read(s.data(), n)) fail("truncated");
    return s;
  }

  template <typename U>
  std::vector<U> get_array(std::uint64_t n) {
    if (n > kMaxElements) fail("element count out of range");
    std::vector<U> out(static_cast<std::size_t>(n));
    for (auto& v : out) v = get<U>();
    return out;
  }

  void expect_magic(const char (&magic)[4]) {
    char got[4];
    if (!in_.read(got, 4)) fail("truncated header");
    if (std::memcmp(got, magic, 4) != 0) fail("bad magic");
  }

  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) fail("trailing bytes");
  }

  [[noreturn]] void fail(const std::string& why) const { throw FormatError(std::string(what_) + ": " + why); }

 private:
  std::istream& in_;
  const char* what_;
};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace

void write_field(std::ostream& out, const Field& field) {
  out.write(kFieldMagic, 4);
  put<std::uint32_t>(out, kFieldFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(field.shape.channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(field.shape.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(field.shape.width));
  for (float v : field.data) put<float>(out, v);
}

Field read_field(std::istream& in) {
  Reader r(in, "field file");
  r.expect_magic(kFieldMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kFieldFormatVersion) r.fail("unsupported version " + std::to_string(version));
  const auto c = r.get<std::uint32_t>(), h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>();
  if (c == 0 || h == 0 || w == 0 || c > 1024 || h > 65536 || w > 65536) r.fail("bad dimensions");
  Field f;
  f.shape = Shape{static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)};
  f.data = r.get_array<float>(static_cast<std::uint64_t>(c) * h * w);
  return f;
}

void save_field(const fs::path& path, const Field& field) {
  auto out = open_out(path);
  write_field(out, field);
  finish(out, path);
}

Field load_field(const fs::path& path) {
  auto in = open_in(path);
  Field f = read_field(in);
  Reader(in, "field file").expect_end();
  return f;
}

void write_score_checkpoint(std::ostream& out, const UNet<float>& net, const DatasetStats& stats) {
  const UNetConfig& c = net.config();
  out.write(kScoreMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.in_channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.base_channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.depth));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.channel_multipliers.size()));
  for (int m : c.channel_multipliers) put<std::uint32_t>(out, static_cast<std::uint32_t>(m));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.time_dim));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.groups));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(stats.channels()));
  for (int k = 0; k < stats.channels(); ++k) {
    put<double>(out, stats.mean[k]);
    put<double>(out, stats.std[k]);
    put_string(out, k < static_cast<int>(stats.tags.size()) ? stats.tags[k] : std::string());
  }
  put<std::uint64_t>(out, net.parameter_count());
  for (float v : net.parameters()) put<float>(out, v);
}

ScoreCheckpoint read_score_checkpoint(std::istream& in) {
  Reader r(in, "score checkpoint");
  r.expect_magic(kScoreMagic);
  if (r.get<std::uint32_t>() != kCheckpointVersion) r.fail("unsupported version");
  UNetConfig c;
  c.in_channels = static_cast<int>(r.get<std::uint32_t>());
  c.base_channels = static_cast<int>(r.get<std::uint32_t>());
  c.depth = static_cast<int>(r.get<std::uint32_t>());
  const auto levels = r.get<std::uint32_t>();
  if (levels > 16) r.fail("too many levels");
  c.channel_multipliers.clear();
  for (std::uint32_t i = 0; i < levels; ++i) c.channel_multipliers.push_back(static_cast<int>(r.get<std::uint32_t>()));
  c.time_dim = static_cast<int>(r.get<std::uint32_t>());
  c.groups = static_cast<int>(r.get<std::uint32_t>());
  DatasetStats stats;
  const auto nstats = r.get<std::uint32_t>();
  if (nstats > 16) r.fail("too many statistics channels");
  for (std::uint32_t k = 0; k < nstats; ++k) {
    stats.mean.push_back(r.get<double>());
    stats.std.push_back(r.get<double>());
    stats.tags.push_back(r.get_string());
  }
  const auto count = r.get<std::uint64_t>();
  auto params = r.get_array<float>(count);
  if (static_cast<int>(nstats) != c.in_channels) r.fail("statistics do not match the network channels");
  try {
    return ScoreCheckpoint{UNet<float>(c, std::move(params)), std::move(stats)};
  } catch (const Error& e) {
    r.fail(e.what());
  }
}

void save_score_checkpoint(const fs::path& path, const UNet<float>& net, const DatasetStats& stats) {
  auto out = open_out(path);
  write_score_checkpoint(out, net, stats);
  finish(out, path);
}

ScoreCheckpoint load_score_checkpoint(const fs::path& path) {
  auto in = open_in(path);
  auto ck = read_score_checkpoint(in);
  Reader(in, "score checkpoint").expect_end();
  return ck;
}

void write_surrogate(std::ostream& out, const SurrogateModel& m) {
  out.write(kSurrogateMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.mlp.inputs()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.mlp.hidden()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.mlp.outputs()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.width));
  put<std::uint64_t>(out, m.layout_hash);
  put<double>(out, m.field_mean);
  put<double>(out, m.field_std);
  for (double s : m.reading_scale) put<double>(out, s);
  for (float v : m.mlp.parameters()) put<float>(out, v);
}

SurrogateModel read_surrogate(std::istream& in) {
  Reader r(in, "surrogate checkpoint");
  r.expect_magic(kSurrogateMagic);
  if (r.get<std::uint32_t>() != kCheckpointVersion) r.fail("unsupported version");
  const auto inputs = r.get<std::uint32_t>(), hidden = r.get<std::uint32_t>(), outputs = r.get<std::uint32_t>();
  if (inputs == 0 || hidden == 0 || outputs == 0 || inputs > (1u << 24) || hidden > (1u << 16) || outputs > (1u << 24)) {
    r.fail("bad dimensions");
  }
  const int height = static_cast<int>(r.get<std::uint32_t>());
  const int width = static_cast<int>(r.get<std::uint32_t>());
  if (static_cast<std::uint64_t>(height) * width != inputs) r.fail("grid does not match the input size");
  const auto hash = r.get<std::uint64_t>();
  const double mean = r.get<double>();
  const double sd = r.get<double>();
  auto scale = r.get_array<double>(outputs);
  const std::uint64_t count = std::uint64_t{hidden} * inputs + hidden + std::uint64_t{outputs} * hidden + outputs;
  SurrogateModel m{MlpSurrogate<float>(static_cast<int>(inputs), static_cast<int>(hidden), static_cast<int>(outputs),
                                       r.get_array<float>(count)),
                   mean, sd, std::move(scale), hash, height, width};
  return m;
}

void save_surrogate(const fs::path& path, const SurrogateModel& model) {
  auto out = open_out(path);
  write_surrogate(out, model);
  finish(out, path);
}

SurrogateModel load_surrogate(const fs::path& path) {
  auto in = open_in(path);
  auto m = read_surrogate(in);
  Reader(in, "surrogate checkpoint").expect_end();
  return m;
}

void write_pgm(std::ostream& out, const Field& field) {
  const int w = field.shape.width, h = field.shape.height * field.shape.channels;
  out << "P5\n" << w << ' ' << h << "\n255\n";
  if (field.data.empty()) return;
  const auto [lo, hi] = std::minmax_element(field.data.begin(), field.data.end());
  const double min = *lo, range = static_cast<double>(*hi) - *lo;
  std::string pixels(field.data.size(), '\0');
  for (std::size_t i = 0; i < field.data.size(); ++i) {
    const int v = range > 0.0 ? static_cast<int>(std::lround(255.0 * (field.data[i] - min) / range)) : 128;
    pixels[i] = static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0, 255)));
  }
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
}

void write_field_csv(std::ostream& out, const Field& field) {
  char buf[32];
  for (int c = 0; c < field.shape.channels; ++c)
    for (int i = 0; i < field.shape.height; ++i) {
      for (int j = 0; j < field.shape.width; ++j) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(field.at(c, i, j)));
        if (j > 0) out << ',';
        out << buf;
      }
      out << '\n';
    }
}

namespace {

json stats_json(const DatasetStats& s) { return {{"tags", s.tags}, {"mean", s.mean}, {"std", s.std}}; }

DatasetStats stats_from_json(const json& j) {
  DatasetStats s;
  s.tags = j.at("tags").get<std::vector<std::string>>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  if (s.mean.size() != s.tags.size() || s.std.size() != s.tags.size()) throw FormatError("inconsistent statistics");
  return s;
}

std::string sample_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu.fgrd", i);
  return buf;
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& ds, const DatasetStats& stats) {
  fs::create_directories(dir);
  json samples = json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const Field* parts[] = {&s.stress, &s.strain};
    save_field(dir / sample_file(i), stack_channels(parts));
    samples.push_back({{"file", sample_file(i)},
                       {"history", s.history},
                       {"frame", s.frame},
                       {"load", s.load},
                       {"split", ds.is_test(s) ? "test" : "train"}});
  }
  json manifest = {{"format", "fieldrecon-dataset"},
                   {"version", 1},
                   {"seed", ds.config.seed},
                   {"config", generator_to_json(ds.config)},
                   {"stats", stats_json(stats)},
                   {"samples", std::move(samples)}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedDataset load_dataset(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
    if (manifest.at("format") != "fieldrecon-dataset") throw FormatError("not a dataset manifest");
    LoadedDataset out;
    out.dataset.config = generator_from_json(manifest.at("config"));
    out.dataset.config.seed = manifest.at("seed").get<std::uint64_t>();
    out.stats = stats_from_json(manifest.at("stats"));
    for (const auto& e : manifest.at("samples")) {
      Field f = load_field(dir / e.at("file").get<std::string>());
      if (f.shape.channels != 2) throw FormatError("dataset sample must have 2 channels");
      PlateSample s;
      s.stress = f.extract_channel(0);
      s.strain = f.extract_channel(1);
      s.stress.channel_tags = {kStressTag};
      s.strain.channel_tags = {kStrainTag};
      s.history = e.at("history").get<int>();
      s.frame = e.at("frame").get<int>();
      s.load = e.at("load").get<double>();
      out.dataset.samples.push_back(std::move(s));
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError("dataset manifest: " + std::string(e.what()));
  }
}

void save_reconstruction(const fs::path& dir, const ReconstructionResult& result) {
  fs::create_directories(dir);
  save_field(dir / "mean.fgrd", result.mean);
  save_field(dir / "std.fgrd", result.std);
  for (std::size_t i = 0; i < result.samples.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%03zu.fgrd", i);
    save_field(dir / buf, result.samples[i]);
  }
  const auto& m = result.metadata;
  json meta = {{"steps", m.steps},
               {"chains", m.chains},
               {"seed", m.seed},
               {"zeta", m.zeta},
               {"channels", m.channel_names},
               {"guidance_mode", to_string(m.mode)},
               {"guidance_step", to_string(m.step)},
               {"reverse_rule", to_string(m.reverse)},
               {"tags", result.mean.channel_tags}};
  meta["wmape_pct"] = result.wmape ? json(*result.wmape) : json(nullptr);
  write_text(dir / "metadata.json", meta.dump(2) + "\n");
}

std::string read_text(const fs::path& path) {
  auto in = open_in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  finish(out, path);
}

}  // namespace fieldrecon
