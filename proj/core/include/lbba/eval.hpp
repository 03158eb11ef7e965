#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/attack.hpp"
#include "lbba/data.hpp"
#include "lbba/nets.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// 100 * correct / N in eval mode. Throws DataError for N = 0.
double top1_accuracy(const Model& target, const Tensor& images, std::span<const int> labels, int batch = 200);

struct TargetEntry {
  std::string name;
  /// Empty for in-memory targets.
  std::filesystem::path checkpoint;
  std::string spec_hash;
  /// Dataset and split the target was trained on.
  std::string dataset;
  std::string split;
  std::optional<double> clean_test_acc;

  nlohmann::json to_json() const;
  static TargetEntry from_json(const nlohmann::json& j);
};

/// Named targets in registration order. Checkpoints load on first use and
/// are never written.
class TargetRegistry {
public:
  void add(TargetEntry entry);
  void add(TargetEntry entry, Model model);
  const std::vector<TargetEntry>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  size_t size() const { return entries_.size(); }
  const Model& model(const std::string& name) const;

  /// ProvenanceError if any target trained on the split the few-shot set
  /// was drawn from.
  void require_disjoint(const nlohmann::json& few_shot_manifest) const;

  nlohmann::json to_json() const;
  /// Relative checkpoint paths resolve against `base`.
  static TargetRegistry from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  void save(const std::filesystem::path& path) const;
  static TargetRegistry load(const std::filesystem::path& path);

private:
  std::vector<TargetEntry> entries_;
  mutable std::map<std::string, std::shared_ptr<Model>> cache_;
};

struct ReportRow {
  std::string attack;
  std::string target;
  uint64_t seed = 0;
  double clean_acc = 0.0;
  double adv_acc = 0.0;
};

struct ReportCell {
  std::string attack;
  std::string target;
  double clean_acc = 0.0;
  double adv_mean = 0.0;
  /// Sample standard deviation; absent with fewer than 2 seeds.
  std::optional<double> adv_std;
  int seeds = 0;
};

inline constexpr int kReportSchemaVersion = 1;

/// Per-seed rows are the source of truth; summaries are recomputed from them.
struct EvaluationReport {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::string> attacks;
  std::vector<std::string> targets;
  std::vector<ReportRow> rows;

  std::vector<ReportCell> cells() const;
  std::optional<ReportCell> cell(const std::string& attack, const std::string& target) const;
  /// Mean over targets of the per-target seed means.
  double attack_average(const std::string& attack) const;
  double clean_average() const;
  std::map<std::string, double> clean_by_target() const;
  /// Appends another report's attacks and rows; target lists must match.
  void merge(const EvaluationReport& other, const std::string& label_prefix = "");

  nlohmann::json to_json() const;
  static EvaluationReport from_json(const nlohmann::json& j);
};

struct MatrixEntry {
  std::string label;
  const Surrogate* surrogate = nullptr;
  AttackConfig config;
};

struct MatrixOptions {
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
  /// When set, every (entry, seed) archive is written below it.
  std::optional<std::filesystem::path> archive_dir;
  bool export_png = false;
  int chunk = 64;
  /// Clean accuracy below this (percent) on the evaluation pool adds a warning.
  double sanity_floor = 0.0;
  /// Progress sink; may be empty.
  std::function<void(const std::string&)> log;
};

/// Lower-case directory name for an attack label ("ETF-PGD" -> "etf-pgd").
std::string label_slug(const std::string& label);

/**
 * Attacks every pool sample with guides chosen per cfg.guide (none for the
 * deep surface). When `archive_dir` is set the set is written there.
 */
AttackResult generate_adversarial_set(const Surrogate& surrogate, const SampleSet& pool, const AttackConfig& cfg,
                                      int chunk = 64,
                                      const std::optional<std::filesystem::path>& archive_dir = std::nullopt,
                                      bool export_png = false);

/**
 * For each entry and seed: one adversarial set from the pool (attack
 * sources = pool), evaluated on every target. Refuses (ProvenanceError)
 * when a target trained on the pool's split.
 */
EvaluationReport run_matrix(const std::vector<MatrixEntry>& entries, const SampleSet& pool,
                            const TargetRegistry& targets, const MatrixOptions& opt);

struct SweepPoint {
  std::string label;
  double x = 0.0;
  double avg_adv = 0.0;
  std::map<std::string, double> per_target;
};

struct SweepResult {
  std::string kind;
  std::string x_name;
  std::vector<SweepPoint> points;
  EvaluationReport report;

  nlohmann::json to_json() const;
  static SweepResult from_json(const nlohmann::json& j);
};

/// Builds a surrogate from a few-shot set of `n` images in total.
using SamplesSurrogateFactory = std::function<Surrogate(int n)>;

/// One surrogate per n; every point attacks the same fixed evaluation pool.
/// Throws ConfigError on duplicate or non-positive n.
SweepResult sweep_samples(const std::vector<int>& ns, const SamplesSurrogateFactory& factory, const SampleSet& pool,
                          const TargetRegistry& targets, const AttackConfig& cfg, const MatrixOptions& opt);

/// One attack run per truncation point with a shared surrogate.
SweepResult sweep_layers(const std::vector<TruncationPoint>& layers, const Surrogate& surrogate,
                         const SampleSet& pool, const TargetRegistry& targets, const AttackConfig& cfg,
                         const MatrixOptions& opt);

/// Surrogate trained with `objective` (supervised, contrastive, rotation)
/// and augmentation on or off.
using VariantSurrogateFactory = std::function<Surrogate(const std::string& objective, bool augmentation)>;

/**
 * Rows, each against the supervised augmented baseline `cfg` (an etf
 * surface): no augmentation, contrastive and rotation surrogates,
 * weight-space inner max, etf-all, and the l2 norm.
 */
EvaluationReport run_ablations(const VariantSurrogateFactory& factory, const SampleSet& pool,
                               const TargetRegistry& targets, const AttackConfig& cfg, const MatrixOptions& opt);

/// Ablation row labels in emission order.
std::vector<std::string> ablation_labels();

/// Writes report.csv (per-seed rows), summary.csv, report.md and
/// report.json for the requested formats ("csv", "md", "json", "svg").
/// "svg" applies to sweeps only. Output bytes depend only on the inputs.
void emit_report(const EvaluationReport& report, const std::filesystem::path& dir,
                 const std::set<std::string>& formats);
void emit_sweep(const SweepResult& sweep, const std::filesystem::path& dir, const std::set<std::string>& formats);

std::string report_markdown(const EvaluationReport& report);
std::string report_csv(const EvaluationReport& report);
std::string summary_csv(const EvaluationReport& report);
std::string sweep_svg(const SweepResult& sweep);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
