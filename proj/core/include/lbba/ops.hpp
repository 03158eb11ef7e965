#pragma once

#include <span>
#include <vector>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// `none` keeps one value per row.
enum class Reduction { mean, sum, none };

// Elementwise and shape ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// (N, ...) -> (N, prod(...))
Tensor flatten(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// a (M,K) times b (K,N), or b (N,K) when transpose_b is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// x (N,in), weight (out,in), optional bias (out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// NCHW input, OIKK weight (I = C / groups). Lowered to per-sample matrix
/// products over an im2col buffer.
Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt = {});

/// Reference convolution by direct nested loops, no autodiff. Test oracle.
Tensor conv2d_reference(const Tensor& x, const Tensor& weight, Conv2dOptions opt = {});

/// Per-channel batch normalization over (N,H,W). In training mode batch
/// statistics are used and the running buffers are updated with `momentum`
/// (running_var uses the unbiased batch variance). In eval mode the running
/// buffers are used and never modified.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    real momentum = 0.1f, real eps = 1e-5f);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding = 0);
/// (N,C,H,W) -> (N,C)
Tensor global_avg_pool(const Tensor& x);
/// x (N,C,H,W) scaled per (sample, channel) by s (N,C).
Tensor channel_scale(const Tensor& x, const Tensor& s);

/// Cross entropy of softmax(logits) at `labels`; logits (N,C).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Reduction reduction = Reduction::mean);

/// Per-sample mean squared error: (N, ...) x (N, ...) -> (N).
Tensor squared_error_rows(const Tensor& a, const Tensor& b);
/// Mean squared error over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

inline constexpr real kCosineEps = 1e-8f;

/// Row-wise cosine similarity of flattened samples: (N, ...) -> (N).
/// The denominator is max(|a||b|, 1e-8), so a zero row yields 0.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// Row-wise v / max(|v|, 1e-8) on (N,D).
Tensor l2_normalize(const Tensor& v);

/// Builds k rank-1 (N) tensors into one (N,k).
Tensor stack_columns(const std::vector<Tensor>& columns);

/// Depthwise correlation of every (n,c) plane with a square odd-sized
/// kernel, zero padded to keep H and W.
Tensor gaussian_blur(const Tensor& x, const Tensor& kernel);

/// Normalized 2-D Gaussian, size x size, standard deviation sigma.
Tensor gaussian_kernel(int size, real sigma);

/// Per-sample nearest-neighbour resize to `size` then zero pad back to the
/// original H x W with the resized image placed at (top, left).
struct ResizePad {
  bool active = false;
  int size = 0;
  int top = 0;
  int left = 0;
};
Tensor resize_pad(const Tensor& x, std::span<const ResizePad> per_sample);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
