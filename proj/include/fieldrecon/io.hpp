#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fieldrecon/dps.hpp"
#include "fieldrecon/forward_models.hpp"
#include "fieldrecon/synthdata.hpp"
#include "fieldrecon/unet.hpp"

namespace fieldrecon {

// Field tensor file: "FGRD", u32 version, u32 C, H, W, then C*H*W float32,
// all little-endian. Channel tags are not stored.
inline constexpr std::uint32_t kFieldFormatVersion = 1;

void write_field(std::ostream& out, const Field& field);
Field read_field(std::istream& in);
void save_field(const std::filesystem::path& path, const Field& field);
Field load_field(const std::filesystem::path& path);

/// Score network plus the normalization it was trained under.
struct ScoreCheckpoint {
  UNet<float> net;
  DatasetStats stats;
};

void write_score_checkpoint(std::ostream& out, const UNet<float>& net, const DatasetStats& stats);
ScoreCheckpoint read_score_checkpoint(std::istream& in);
void save_score_checkpoint(const std::filesystem::path& path, const UNet<float>& net, const DatasetStats& stats);
ScoreCheckpoint load_score_checkpoint(const std::filesystem::path& path);

void write_surrogate(std::ostream& out, const SurrogateModel& model);
SurrogateModel read_surrogate(std::istream& in);
void save_surrogate(const std::filesystem::path& path, const SurrogateModel& model);
SurrogateModel load_surrogate(const std::filesystem::path& path);

/// 8-bit binary PGM of all channels stacked vertically, min-max scaled over
/// the whole field (a constant field renders as 128).
void write_pgm(std::ostream& out, const Field& field);
/// One line per grid row, channels one after another.
void write_field_csv(std::ostream& out, const Field& field);

/// Dataset directory: one 2-channel (stress, strain) field file per sample
/// and manifest.json with generator config, split and training statistics.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const DatasetStats& stats);
struct LoadedDataset {
  Dataset dataset;
  DatasetStats stats;
};
LoadedDataset load_dataset(const std::filesystem::path& dir);

/// mean.fgrd, std.fgrd, sample_NNN.fgrd and metadata.json.
void save_reconstruction(const std::filesystem::path& dir, const ReconstructionResult& result);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace fieldrecon
