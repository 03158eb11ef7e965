#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/augment.hpp"
#include "lbba/data.hpp"
#include "lbba/nets.hpp"
#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// Surrogate training. The learning rate decays linearly per epoch.
struct TrainConfig {
  int batch_size = 128;
  int epochs = 500;
  double lr_start = 0.4;
  double lr_end = 0.008;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Contrastive temperature.
  double temperature = 0.5;
  uint64_t seed = 0;
  AugmentationPolicy augmentation;

  /// Throws ConfigError unless epochs >= 1 and lr_start >= lr_end > 0.
  void validate() const;
};

/// Target training: SGD with half-cosine decay and pad-crop-flip.
struct TargetTrainConfig {
  int batch_size = 128;
  int epochs = 60;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int crop_padding = 4;
  uint64_t seed = 0;

  void validate() const;
};

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  /// Percent correct on the training batches seen in the epoch (class,
  /// positive-pair or rotation accuracy depending on the objective).
  double acc = 0.0;

  nlohmann::json to_json() const;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Cross entropy on augmented few-shot batches. Needs labels.
std::vector<HistoryRow> train_supervised(Model& model, const SampleSet& few_shot, const TrainConfig& cfg,
                                         const EpochCallback& on_epoch = {});

/**
 * Two augmented views per image; pooled backbone features pass through a
 * 2-layer projection head (hidden 256, output 128) that is discarded after
 * training. Needs at least 2 samples.
 */
std::vector<HistoryRow> train_contrastive(Model& model, const SampleSet& few_shot, const TrainConfig& cfg,
                                          const EpochCallback& on_epoch = {});

/// 4-way classification of rotate90(augment(x), k) with k drawn per sample
/// and epoch, through a linear head on pooled features (discarded).
std::vector<HistoryRow> train_rotation(Model& model, const SampleSet& few_shot, const TrainConfig& cfg,
                                       const EpochCallback& on_epoch = {});

/// Supervised target training on a full split. When `few_shot_manifest` is
/// given, refuses (ProvenanceError) if the split holds those samples.
std::vector<HistoryRow> train_target(Model& model, const SampleSet& train_split, const TargetTrainConfig& cfg,
                                     const nlohmann::json* few_shot_manifest = nullptr,
                                     const EpochCallback& on_epoch = {});

/**
 * InfoNCE over a batch of paired embeddings (N,D): row i of
 * cos(z1_i, z2_j)/t is a softmax over j with target i, so the denominator
 * runs over every second-view embedding including the positive. Mean over
 * rows. Throws ConfigError for N < 2.
 */
Tensor contrastive_loss(const Tensor& z1, const Tensor& z2, double temperature);

/// Linear-ReLU-linear head on (N, in) features.
struct ProjectionHead {
  Tensor w1, b1, w2, b2;
  static ProjectionHead make(int in, int hidden, int out, uint64_t seed);
  Tensor forward(const Tensor& x) const;
  std::vector<Tensor> params() const { return {w1, b1, w2, b2}; }
};

void write_history_jsonl(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
