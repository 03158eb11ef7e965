#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "lbba/data.hpp"
#include "lbba/rng.hpp"
#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// Random-resized crop, horizontal flip, colour jitter (random order) with
/// probability `jitter_p`, random grayscale. Colour steps are skipped for
/// single-channel images.
struct AugmentationPolicy {
  bool enabled = true;
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  double jitter_p = 0.8;
  double grayscale_p = 0.2;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

/// One augmented copy of a (C,H,W) image; values stay in [0,1].
Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng);

/// Two independent augmentations of the same image.
std::pair<Tensor, Tensor> two_views(const Tensor& image, const AugmentationPolicy& policy, Rng& rng);

/// Augments the listed samples into a (B,C,H,W) batch. Sample i uses the
/// stream derived from (seed, worker, epoch, idx[i], view).
Tensor augment_batch(const SampleSet& set, std::span<const int64_t> idx, const AugmentationPolicy& policy,
                     uint64_t seed, uint64_t epoch, uint64_t view = 0, uint64_t worker = 0);

/// Zero-pad by `pad`, random crop back to size, random horizontal flip.
Tensor pad_crop_flip_batch(const SampleSet& set, std::span<const int64_t> idx, int pad, uint64_t seed,
                           uint64_t epoch);

/// Rotation by k*90 degrees counter-clockwise of a (C,H,W) or (N,C,H,W)
/// tensor with square spatial dims. Lossless.
Tensor rotate90(const Tensor& x, int k);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
