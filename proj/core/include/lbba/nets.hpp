#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

enum class Family {
  simplified_resnet18,  // one basic block per stage
  resnet18,             // two basic blocks per stage (reference capacity)
  vgg_slim,
  senet_slim,
  resnet20_target,
  vgg11_target,
  mobilenet_lite_target,
  mlp,  // linear (bias-free) first layer; used for the error-transform identity
};

std::string to_string(Family f);
Family family_from_string(const std::string& s);

enum class StemKind { automatic, imagenet7x7, cifar3x3 };

/// Named activation sites in network order. `input` is the image itself.
enum class TruncationPoint { input = 0, stem, block1, block2, block3, block4, pool, fc };

std::string to_string(TruncationPoint p);
TruncationPoint truncation_from_string(const std::string& s);
int ordinal(TruncationPoint p);

struct NetworkSpec {
  Family family = Family::simplified_resnet18;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  StemKind stem = StemKind::automatic;
  /// Stage widths; empty selects the family default.
  std::vector<int> widths;
  /// Hidden sizes for the mlp family.
  std::vector<int> hidden;

  std::vector<int> resolved_widths() const;
  StemKind resolved_stem() const;

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
  /// Hex digest of the canonical JSON form.
  std::string hash() const;
  bool operator==(const NetworkSpec&) const = default;
};

struct ParameterEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;  // false for batchnorm running statistics
};

struct ParameterMetadata {
  std::string spec_hash;
  uint64_t seed = 0;
  int epoch = 0;
};

/// Ordered name -> tensor map holding parameters and persistent buffers.
class ParameterStore {
public:
  Tensor& add(const std::string& name, Tensor t, bool trainable = true);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<ParameterEntry>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  /// Number of trainable scalars.
  int64_t trainable_count() const;
  ParameterStore clone() const;

  ParameterMetadata meta;

private:
  std::vector<ParameterEntry> entries_;
  std::map<std::string, size_t> index_;
};

/// Replacement tensors by parameter name, consulted before the store.
using ParamOverrides = std::map<std::string, Tensor>;

/// Additive perturbations of the activation at a site.
using PerturbationMap = std::map<TruncationPoint, Tensor>;

namespace detail {
class Architecture;
}

/**
 * A built network. Layers are immutable and shared between copies; the
 * parameter store holds tensor handles, so copies alias parameters unless
 * clone() is used.
 *
 * In eval mode every forward is a pure function of its input. In train mode
 * batchnorm uses batch statistics and updates its running buffers.
 */
class Model {
public:
  Model(NetworkSpec spec, std::shared_ptr<const detail::Architecture> arch, ParameterStore params);

  const NetworkSpec& spec() const { return spec_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  void train(bool on = true) { training_ = on; }
  void eval() { training_ = false; }
  bool training() const { return training_; }

  /// Truncation points this architecture exposes, in network order.
  std::vector<TruncationPoint> points() const;
  bool has_point(TruncationPoint p) const;
  /// Name of the first layer's weight (w^1).
  std::string first_layer_weight() const;
  /// Number of residual blocks (0 for non-residual families).
  int residual_block_count() const;

  Tensor forward_logits(const Tensor& x, const ParamOverrides* overrides = nullptr) const;
  Tensor forward_features(const Tensor& x, TruncationPoint l,
                          const ParamOverrides* overrides = nullptr) const;
  /// Adds deltas[k] to the activation at site k before the next stage reads
  /// it; sites after `l` are ignored.
  Tensor forward_features_perturbed(const Tensor& x, const PerturbationMap& deltas,
                                    TruncationPoint l,
                                    const ParamOverrides* overrides = nullptr) const;
  /// Continues a forward pass from the activation at `from` up to `to`.
  Tensor forward_from(const Tensor& activation, TruncationPoint from, TruncationPoint to,
                      const ParamOverrides* overrides = nullptr) const;

  /// Activation shape at `l` for a batch of `n` inputs.
  Shape activation_shape(TruncationPoint l, int64_t n) const;

  /// Deep copy of the parameters; layers stay shared.
  Model clone() const;

private:
  Tensor run(const Tensor& x, TruncationPoint from, TruncationPoint to, const PerturbationMap* deltas,
             const ParamOverrides* overrides) const;
  void check_input(const Tensor& x) const;

  NetworkSpec spec_;
  std::shared_ptr<const detail::Architecture> arch_;
  ParameterStore params_;
  bool training_ = false;
};

/// Builds and initializes a network: He-normal (fan-in) convolutions,
/// batchnorm scale 1 / shift 0, deterministic under `seed`.
Model build(const NetworkSpec& spec, uint64_t seed);

/**
 * Materializes both sides of the first-layer error transform for a model
 * whose first layer is linear and bias-free:
 *   phi(x; {w1 + w1 A} u {w \ w1})  versus  phi(x + A x; w)
 * and returns their max absolute difference at truncation `l`.
 * A is (d, d) with d = C*H*W. Throws UnsupportedArchitectureError for
 * other first layers.
 */
double verify_error_transform_identity(const Model& model, const Tensor& x, const Tensor& a,
                                       TruncationPoint l = TruncationPoint::fc);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
