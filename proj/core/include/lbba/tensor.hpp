#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lbba/real.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

/// One recorded operation. `backward` receives the gradient of the node's
/// output and accumulates into the gradients of `inputs`.
struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const real>)> backward;
};

}  // namespace detail

/**
 * Shared handle to a row-major array of `real` (float32 in production builds) that can take part in
 * reverse-mode differentiation.
 *
 * Copies of a Tensor alias the same storage. Use clone() for a deep copy.
 */
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = 0.0f);
  Tensor(Shape shape, std::vector<real> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(real v) { return Tensor(Shape{}, std::vector<real>{v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  size_t rank() const { return shape().size(); }
  int64_t dim(size_t i) const;
  int64_t numel() const;

  std::span<real> data();
  std::span<const real> data() const;
  real* ptr() { return data().data(); }
  const real* ptr() const { return data().data(); }
  real item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const real> grad() const;
  /// Gradient buffer, allocated (zero) on first access.
  std::span<real> mutable_grad();
  void zero_grad();

  bool all_finite() const;

  /// Deep copy of the values; the copy is a fresh leaf without gradient.
  Tensor clone() const;
  /// Same as clone(): a leaf holding a copy of the values.
  Tensor detach() const { return clone(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

bool grad_enabled();

/**
 * Reverse-mode sweep from a scalar loss. Every node reachable from `loss`
 * is visited exactly once in reverse topological order. Leaf gradients
 * accumulate (+=): calling backward twice on the same graph doubles them.
 * Throws DimensionError if `loss` has more than one element.
 */
void backward(const Tensor& loss);

namespace detail {

/// Gradient buffer of `impl`, zero-allocated if absent.
std::span<real> grad_buffer(TensorImpl& impl);

/// Records an op producing `out` from `inputs` when recording is enabled
/// and at least one input requires grad.
void record(Tensor& out, const char* name, std::vector<Tensor> inputs,
            std::function<void(std::span<const real>)> fn);

bool any_requires_grad(std::initializer_list<const Tensor*> ts);

}  // namespace detail

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
