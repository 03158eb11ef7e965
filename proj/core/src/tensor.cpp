#include "lbba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "lbba/errors.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {
thread_local bool g_grad_enabled = true;
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, real fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<real> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  const auto n = shape_numel(shape);
  if (static_cast<int64_t>(values.size()) != n) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

int64_t Tensor::dim(size_t i) const {
  if (i >= rank()) {
    throw DimensionError("dim " + std::to_string(i) + " out of range for shape " +
                         shape_str(shape()));
  }
  return impl_->shape[i];
}

int64_t Tensor::numel() const { return impl_ ? static_cast<int64_t>(impl_->data.size()) : 0; }

std::span<real> Tensor::data() { return impl_ ? std::span<real>(impl_->data) : std::span<real>(); }

std::span<const real> Tensor::data() const {
  return impl_ ? std::span<const real>(impl_->data) : std::span<const real>();
}

real Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_ || impl_->grad_fn == nullptr; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const real> Tensor::grad() const {
  return impl_ ? std::span<const real>(impl_->grad) : std::span<const real>();
}

std::span<real> Tensor::mutable_grad() { return detail::grad_buffer(*impl_); }

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(),
                     [](real v) { return std::isfinite(v); });
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

std::span<real> grad_buffer(TensorImpl& impl) {
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), 0.0f);
  return impl.grad;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void record(Tensor& out, const char* name, std::vector<Tensor> inputs,
            std::function<void(std::span<const real>)> fn) {
  if (!g_grad_enabled) return;
  bool needed = false;
  for (const auto& t : inputs) needed = needed || (t.defined() && t.requires_grad());
  if (!needed) return;
  auto node = std::make_shared<Node>();
  node->name = name;
  for (auto& t : inputs) {
    if (t.defined() && t.requires_grad()) node->inputs.push_back(t.impl());
  }
  node->backward = std::move(fn);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->grad_fn && next < impl->grad_fn->inputs.size()) {
      auto* child = impl->grad_fn->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  for (auto* impl : order) {
    if (impl->grad_fn) impl->grad.assign(impl->data.size(), 0.0f);
  }
  detail::grad_buffer(*loss.impl())[0] += 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (!impl->grad_fn) continue;
    impl->grad_fn->backward(impl->grad);
    std::vector<real>().swap(impl->grad);
  }
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
