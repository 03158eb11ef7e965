#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// Where a sample set came from. `indices` refer to the parent split and are
/// empty for a full split.
struct Provenance {
  std::string dataset;
  std::string split;
  std::optional<uint64_t> seed;
  std::string mode;  // "", "per-class" or "total"
  std::vector<int64_t> indices;

  nlohmann::json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
};

struct SampleSet {
  /// (N,C,H,W), values in [0,1].
  Tensor images;
  /// Empty when unlabeled.
  std::vector<int> labels;
  int class_count = 0;
  Provenance provenance;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  bool has_labels() const { return !labels.empty(); }
  int channels() const { return static_cast<int>(images.dim(1)); }
  int height() const { return static_cast<int>(images.dim(2)); }
  int width() const { return static_cast<int>(images.dim(3)); }

  /// Copies the listed samples into a (B,C,H,W) batch.
  Tensor gather(std::span<const int64_t> idx) const;
  std::vector<int> gather_labels(std::span<const int64_t> idx) const;
  /// Samples `idx` as a new set; provenance indices are composed.
  SampleSet subset(std::span<const int64_t> idx) const;
  /// Throws DataError if values leave [0,1] or labels leave [0, class_count).
  void validate() const;
};

/// Reads data_batch_1..5.bin and test_batch.bin (3073-byte records) from
/// `dir` or `dir/cifar-10-batches-bin`.
std::pair<SampleSet, SampleSet> load_cifar10_binary(const std::filesystem::path& dir);

/// True when `dir` holds the CIFAR-10 binary batches.
bool has_cifar10_binary(const std::filesystem::path& dir);

/// One subdirectory per class (sorted by name), PNG images. Each image is
/// center-cropped to the target aspect ratio and bilinearly resized.
SampleSet load_folder_dataset(const std::filesystem::path& dir, int height, int width, int channels = 3);

/// Writes `images` (N,C,H,W) in [0,1] as 8-bit PNG files.
void write_png(const std::filesystem::path& path, const Tensor& images, int64_t index);

struct FewShotRequest {
  /// Exactly one of the two is positive.
  int n_per_class = 0;
  int n_total = 0;
};

/**
 * Deterministic few-shot selection, a function of (set, request, seed) only.
 * Per-class mode takes exactly n samples of every class. Total mode deals
 * classes round-robin in a seeded class order, so every class count differs
 * by at most one. Throws DataError when a class runs short.
 */
SampleSet sample_few_shot(const SampleSet& set, FewShotRequest request, uint64_t seed);

/// {dataset, split, seed, mode, indices, count, class_count}.
nlohmann::json few_shot_manifest(const SampleSet& few_shot);
void write_manifest(const std::filesystem::path& path, const nlohmann::json& manifest);
nlohmann::json read_manifest(const std::filesystem::path& path);

/// Throws ProvenanceError if a set drawn from `split` of `dataset` would
/// share any sample with the few-shot manifest.
void require_disjoint(const nlohmann::json& few_shot_manifest, const std::string& dataset,
                      const std::string& split);

struct SyntheticSpec {
  int classes = 10;
  int n_per_class = 100;
  int channels = 3;
  int height = 32;
  int width = 32;
  /// Pattern seed: sets with the same value share class prototypes.
  uint64_t pattern_seed = 1;
  /// Sample seed: draws the per-sample variations.
  uint64_t sample_seed = 1;
  std::string split = "train";
  double noise = 0.08;
};

/// Procedural class-conditional images: each class is a fixed mixture of
/// oriented sinusoids and a colour bias; samples add a random shift,
/// contrast change and pixel noise.
SampleSet make_synthetic(const SyntheticSpec& spec);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
