#pragma once

// Synthetic bi-temporal scenes: value-noise background, axis-aligned block
// changes with exact masks, and template captions.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptnet/tensor.hpp"

namespace ptnet {

enum class ChangeType { none, add_block, remove_block, recolor_region };
inline constexpr std::array<ChangeType, 4> kChangeTypes = {ChangeType::none, ChangeType::add_block,
                                                           ChangeType::remove_block, ChangeType::recolor_region};

std::string to_string(ChangeType t);
ChangeType change_type_from_string(const std::string& name);

/// Row-major 3x3 grid cell names.
const std::array<std::string, 9>& cell_names();
inline constexpr std::size_t kCaptionStyles = 5;

struct SceneConfig {
  std::size_t size = 32;
  std::size_t channels = 3;
  std::size_t min_block = 2;
  std::size_t max_block = 12;
  std::size_t max_distractors = 2;
  double min_area_ratio = 0.008;
  bool regenerate_small = true;  // otherwise a small footprint throws
};

struct ScenePair {
  std::vector<double> image1;  // H*W*C, row-major, values in [0, 1]
  std::vector<double> image2;
  std::vector<std::uint8_t> mask;  // H*W, 0/1
  std::vector<std::string> captions;
  ChangeType change_type = ChangeType::none;
  std::string cell;  // empty for unchanged pairs
  std::size_t size = 32;
  std::size_t channels = 3;
};

struct Rect {
  std::size_t x = 0, y = 0, w = 0, h = 0;  // top-left column/row and extent
  bool overlaps(const Rect& o, std::size_t margin = 0) const;
};

/// Index of the 3x3 cell holding the centroid of a nonempty mask.
std::size_t mask_centroid_cell(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width);

/// Accept iff the changed fraction reaches `min_ratio`; unchanged pairs always pass.
bool area_filter(const std::vector<std::uint8_t>& mask, ChangeType type, double min_ratio = 0.008);

ScenePair generate_pair(std::uint64_t seed, ChangeType type, const SceneConfig& config = {});

std::string render_caption(ChangeType type, const std::string& cell, std::size_t style);
std::string render_caption(const ScenePair& pair, std::size_t style);

/// Every word any template can produce, in a fixed order.
std::vector<std::string> caption_words();

/// Change type named by a caption's key words, if any.
std::optional<ChangeType> classify_caption(const std::string& caption);

// ----------------------------------------------------------------------------
// Dataset on disk

struct DatasetConfig {
  std::size_t n_pairs = 512;
  std::uint64_t seed = 0;
  /// Relative weights for none, add_block, remove_block, recolor_region.
  std::array<double, 4> mix = {2355.0, 2215.0, 2215.0, 2215.0};
  SceneConfig scene;
};

inline constexpr const char* kGeneratorVersion = "synthscene-1";

std::array<double, 4> parse_mix(const std::string& text);

/// Per-type counts by largest remainder; ties go to the earlier type.
std::array<std::size_t, 4> mix_counts(std::size_t n, const std::array<double, 4>& mix);
/// Train/val/test sizes in 7:1:2.
std::array<std::size_t, 3> split_sizes(std::size_t n);

struct Sample {
  std::string id;
  std::string split;
  ChangeType change_type = ChangeType::none;
  std::string cell;
  Tensor image1;  // [H, W, C]
  Tensor image2;
  std::vector<std::uint8_t> mask;
  std::vector<std::string> captions;
};

struct Dataset {
  std::filesystem::path root;
  nlohmann::json manifest;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(const std::string& name) const;
  std::string content_hash() const { return manifest.at("content_hash").get<std::string>(); }
};

/// Writes pairs/<id>/{t1.ptn, t2.ptn, mask.pgm, captions.txt} and
/// manifest.json. Returns the manifest.
nlohmann::json build_dataset(const std::filesystem::path& out, const DatasetConfig& config);

/// SHA-256 over every indexed file (relative path, NUL, bytes) in index order.
std::string dataset_content_hash(const std::filesystem::path& root, const nlohmann::json& manifest);

/// Throws FormatError when a file is missing or the content hash disagrees.
Dataset load_dataset(const std::filesystem::path& root, bool verify_hash = true);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

}  // namespace ptnet
