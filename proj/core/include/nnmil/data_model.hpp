#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnmil/types.hpp"

namespace nnmil {

/// One slide: N patch embeddings of dimension D.
struct SlideBag {
  std::string slide_id;
  std::string patient_id;
  EmbeddingMatrix embeddings;

  std::size_t n_patches() const { return static_cast<std::size_t>(embeddings.rows()); }
  std::size_t embed_dim() const { return static_cast<std::size_t>(embeddings.cols()); }

  /// Throws ValidationError on an empty matrix or non-finite entries.
  void validate() const;
};

struct BagShape {
  std::size_t n_patches = 0;
  std::size_t embed_dim = 0;
};

struct SurvivalRecord {
  double time = 0.0;
  int event = 0;

  friend bool operator==(const SurvivalRecord&, const SurvivalRecord&) = default;
};

using Label = std::variant<int, double, SurvivalRecord>;

struct ManifestEntry {
  std::string slide_id;
  std::string patient_id;
  std::filesystem::path embedding_path;
  Split split = Split::train;
  Label label;
};

struct DatasetManifest {
  Task task = Task::classification;
  int n_classes = 0;  // classification only
  std::vector<ManifestEntry> entries;
  /// Relative embedding paths resolve against this directory.
  std::filesystem::path base_dir;

  std::vector<std::size_t> indices(Split split) const;
  std::filesystem::path resolve(const ManifestEntry& entry) const;

  int class_label(std::size_t i) const { return std::get<int>(entries[i].label); }
  double target(std::size_t i) const { return std::get<double>(entries[i].label); }
  const SurvivalRecord& survival(std::size_t i) const {
    return std::get<SurvivalRecord>(entries[i].label);
  }

  void validate() const;
};

// Embedding file: "NNMILEB1", u32 N, u32 D (little-endian), then N*D
// little-endian float32 values in row-major order.
inline constexpr char kEmbeddingMagic[8] = {'N', 'N', 'M', 'I', 'L', 'E', 'B', '1'};
inline constexpr std::size_t kEmbeddingHeaderBytes = 16;

SlideBag read_embedding_file(const std::filesystem::path& path);
BagShape read_embedding_header(const std::filesystem::path& path);
void write_embedding_file(const SlideBag& bag, const std::filesystem::path& path);

SlideBag decode_embedding(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_embedding(const SlideBag& bag);

DatasetManifest manifest_from_json(const nlohmann::json& doc,
                                   const std::filesystem::path& base_dir = {});
nlohmann::json manifest_to_json(const DatasetManifest& manifest);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Loads every bag referenced by the manifest, in entry order, with ids
/// taken from the manifest.
std::vector<SlideBag> load_bags(const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SyntheticSpec {
  std::size_t n_bags = 100;
  std::size_t min_patches = 50;
  std::size_t max_patches = 100;
  std::size_t embed_dim = 32;
  Task task = Task::classification;
  double signal_fraction = 0.1;
  double signal_strength = 1.0;
  // Per-coordinate standard deviation of the background N(0, sigma^2 I)
  // patches. Unset means 1/sqrt(D), so a background patch has expected
  // squared norm 1 and signal_strength is measured in noise-norm units.
  std::optional<double> noise_std;
  double positive_rate = 0.5;  // classification
  // Regression / survival: target (or log-hazard) = beta . mean(x). When
  // `coefficients` is empty, beta = coefficient_scale * signal direction.
  std::vector<double> coefficients;
  double coefficient_scale = 1.0;
  double censoring_rate = 0.3;  // survival
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<SlideBag> bags;
  /// Per bag, the sorted patch indices that carry the planted shift.
  std::vector<std::vector<std::size_t>> signal_indices;
  /// Unit vector along which planted patches are shifted.
  std::vector<double> direction;
  /// Per bag, the noiseless target / log-hazard (empty for classification).
  std::vector<double> latent;
};

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Writes bags under `dir`/bags and the manifest to `dir`/manifest.json.
void write_synthetic_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);

}  // namespace nnmil
