#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/data.hpp"
#include "lbba/nets.hpp"
#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

enum class Norm { linf, l2 };
enum class Method { pgd, mi, di, ti };
/// `etf_weight` perturbs the first-layer weights instead of the inputs.
enum class Surface { deep, shallow, etf, etf_all, etf_weight };
enum class Metric { mse, contrastive_cos };
enum class GuideStrategy { random_diff_label, feature_far };

std::string to_string(Norm v);
std::string to_string(Method v);
std::string to_string(Surface v);
std::string to_string(Metric v);
std::string to_string(GuideStrategy v);
Norm norm_from_string(const std::string& s);
Method method_from_string(const std::string& s);
Surface surface_from_string(const std::string& s);
Metric metric_from_string(const std::string& s);
GuideStrategy guide_from_string(const std::string& s);

/// l2 budget (16/255)*sqrt(n) for n = C*H*W pixels in [0,1].
double l2_budget(int64_t n);

struct AttackConfig {
  Norm norm = Norm::linf;
  double eps = 0.1;
  int steps = 50;
  /// Outer step size; defaults to 2*eps/steps.
  std::optional<double> step_size;
  Method method = Method::pgd;
  double mi_decay = 1.0;
  double di_prob = 0.5;
  double di_min_scale = 0.9;
  int ti_size = 7;
  double ti_sigma = 3.0;

  Surface surface = Surface::etf;
  TruncationPoint layer = TruncationPoint::block1;
  /// Defaults to mse for shallow and contrastive-cos for the etf surfaces.
  std::optional<Metric> metric;
  double metric_temperature = 0.5;

  /// Inner budget; defaults to eps/2.
  std::optional<double> tau;
  /// Norm of the inner ball; defaults to `norm`.
  std::optional<Norm> tau_norm;
  /// Budget of every hidden-site delta for etf-all; defaults to tau.
  std::optional<double> tau_hidden;
  int inner_steps = 5;
  /// Defaults to tau/inner_steps.
  std::optional<double> inner_step_size;

  GuideStrategy guide = GuideStrategy::random_diff_label;
  uint64_t seed = 0;

  double alpha() const;
  double tau_value() const;
  Norm tau_norm_value() const;
  double tau_hidden_value() const;
  double beta() const;
  Metric metric_value() const;
  bool has_inner() const {
    return surface == Surface::etf || surface == Surface::etf_all || surface == Surface::etf_weight;
  }

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  /// Fully resolved form (defaults filled in).
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
  std::string hash() const;
  /// Short label such as "ETF-PGD".
  std::string label() const;
};

/// Frozen eval-mode handle. Attacks accept only this type.
class Surrogate {
public:
  explicit Surrogate(Model model);
  const Model& model() const { return model_; }

private:
  Model model_;
};

/// l-inf: clamp to [x_s-eps, x_s+eps]; l2: radial scaling onto the ball.
/// Either way the result is then clamped to [0,1]. Per sample along dim 0.
Tensor project(const Tensor& x, const Tensor& source, double eps, Norm norm);
/// Same ball constraint around 0 with no box.
Tensor project_delta(const Tensor& delta, double tau, Norm norm);
/// Per-sample norm along dim 0.
std::vector<double> sample_norms(const Tensor& x, Norm norm);

/// Guide for pool[source_idx]: another-class sample, seeded by (seed, source_idx).
/// feature-far picks the other-class sample whose features at `layer` are
/// farthest from the source's in mean squared error.
int64_t select_guide(int64_t source_idx, const SampleSet& pool, GuideStrategy strategy, uint64_t seed,
                     const Surrogate* surrogate = nullptr, TruncationPoint layer = TruncationPoint::block1);
std::vector<int64_t> select_guides(std::span<const int64_t> sources, const SampleSet& pool, GuideStrategy strategy,
                                   uint64_t seed, const Surrogate* surrogate = nullptr,
                                   TruncationPoint layer = TruncationPoint::block1);

/// Per-sample cross entropy of the surrogate logits at y (N). Maximized.
Tensor deep_loss(const Surrogate& s, const Tensor& x, std::span<const int> labels);
/// Per-sample feature distance (N). `anchor` is the frozen negative used by
/// contrastive-cos; it may be undefined for mse.
Tensor feature_distance(const Tensor& guide_features, const Tensor& features, const Tensor& anchor, Metric metric,
                        double temperature);
/// Per-sample d(phi(x_g), phi(x)) with phi(x_g) and phi(x_s) frozen. Minimized.
Tensor shallow_loss(const Surrogate& s, const Tensor& x, const Tensor& guide, const Tensor& source,
                    TruncationPoint layer, Metric metric, double temperature = 0.5);

struct InnerResult {
  /// Input-space deltas (N,C,H,W); undefined for etf_weight.
  Tensor delta_source, delta_guide;
  /// etf-all hidden-site deltas.
  PerturbationMap hidden_source, hidden_guide;
  /// etf_weight: per-sample first-layer weight deltas.
  std::vector<Tensor> weight_source, weight_guide;
  std::vector<double> initial, final_value;
};

/**
 * Joint sign-gradient (l-inf) or normalized-gradient (l2) ascent on
 * d(phi(x_g + D_g), phi(x + D_s)) from D = 0, each step followed by
 * project_delta. Per sample the best iterate seen (including D = 0) is
 * returned, so final_value >= initial.
 */
InnerResult etf_inner_max(const Surrogate& s, const Tensor& x, const Tensor& guide, const Tensor& source,
                          const AttackConfig& cfg);

struct AttackBatch {
  Tensor sources;
  std::vector<int> labels;
  Tensor guides;
  /// Stable per-instance ids (usually pool indices) that seed the RNG streams.
  std::vector<int64_t> ids;
};

struct AttackTrace {
  /// [step][sample] objective at the iterate before the step.
  std::vector<std::vector<double>> objective;
  /// [step][sample] inner objective at D = 0 and at the returned D.
  std::vector<std::vector<double>> inner_initial, inner_final;
};

struct AttackResult {
  Tensor x_adv;
  /// Surface value at x_adv (inner-maximized for the etf surfaces).
  std::vector<double> final_objective;
  AttackTrace trace;
};

struct StepView {
  int step = 0;
  const Tensor* iterate = nullptr;
  /// Sources matching `iterate` row for row.
  const Tensor* sources = nullptr;
  /// Largest (norm - budget) over every inner delta of every sample; -inf
  /// when there is no inner problem.
  double delta_excess = 0.0;
};
using StepObserver = std::function<void(const StepView&)>;

/// Batched attack; every sample is independent and its randomness depends
/// only on (cfg.seed, id). Throws NumericError on a non-finite gradient.
AttackResult run_attack(const Surrogate& s, const AttackBatch& batch, const AttackConfig& cfg,
                        const StepObserver& observer = {});

/// Gathers sources/guides from the pool and attacks in chunks of `chunk`.
AttackResult attack_pool(const Surrogate& s, const SampleSet& pool, std::span<const int64_t> sources,
                         std::span<const int64_t> guides, const AttackConfig& cfg, int chunk = 64);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
