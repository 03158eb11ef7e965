#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/attack.hpp"
#include "lbba/data.hpp"
#include "lbba/eval.hpp"
#include "run_config.hpp"

namespace lbba::cli {

using Logger = std::function<void(const std::string&)>;

/// Exclusive writer lock on a run directory (a `.lock` subdirectory).
class DirLock {
public:
  explicit DirLock(const std::filesystem::path& run_dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

private:
  std::filesystem::path path_;
};

struct Datasets {
  SampleSet train;
  SampleSet test;
};

struct SurrogateVariant {
  std::string objective = "supervised";
  bool augmentation = true;
  FewShotRequest request;
  /// Stable file stem, e.g. "supervised-pc100".
  std::string name() const;
};

/**
 * Run-directory layout:
 *   few_shot.json            few-shot manifest
 *   targets/                 <name>.lbt, <name>.history.jsonl, registry.json
 *   surrogates/              <variant>.lbt, <variant>.history.jsonl
 *   attacks/<label>/seed-N/  adversarial archives
 *   report/, sweep-samples/, sweep-layers/, ablations/
 * Every output directory holds run.json (resolved config, input hashes,
 * code version).
 */
class Pipeline {
public:
  explicit Pipeline(RunConfig cfg, Logger log = {});

  const RunConfig& config() const { return cfg_; }
  std::filesystem::path run_dir() const { return cfg_.run_dir(); }

  const Datasets& data();
  /// Attacker's sample pool per [few_shot].
  const SampleSet& few_shot();
  /// Evaluation pool: the few-shot set itself, or a disjoint draw from the
  /// same split when few_shot.eval_set = disjoint.
  const SampleSet& eval_pool();
  nlohmann::json few_shot_manifest();

  TargetRegistry train_targets();
  TargetRegistry load_targets() const;

  SurrogateVariant configured_variant() const;
  std::filesystem::path surrogate_path(const SurrogateVariant& v) const;
  /// Trains (and saves) the surrogate for `v` on a few-shot draw of its request.
  Surrogate train_surrogate(const SurrogateVariant& v);
  /// Loads a saved surrogate; with `train_if_missing` trains it first.
  /// ProvenanceError when the checkpoint was trained on another sample set.
  Surrogate surrogate(const SurrogateVariant& v, bool train_if_missing);

  /// One adversarial archive per evaluate seed for the configured attack.
  std::vector<AttackResult> attack();
  EvaluationReport evaluate();
  SweepResult sweep_samples();
  SweepResult sweep_layers();
  EvaluationReport ablate();

  /// Writes run.json into `dir`.
  void describe(const std::filesystem::path& dir, const std::string& command,
                const nlohmann::json& inputs = nlohmann::json::object()) const;

private:
  SampleSet draw(const FewShotRequest& request);
  MatrixOptions matrix_options(const std::optional<std::filesystem::path>& archive_dir) const;
  void note(const std::string& line) const;

  RunConfig cfg_;
  Logger log_;
  std::optional<Datasets> data_;
  std::optional<SampleSet> few_shot_;
  std::optional<SampleSet> eval_pool_;
};

/// Formats a report found in `dir` (report.json or sweep.json) into `formats`.
void emit_from_run_dir(const std::filesystem::path& dir, const std::set<std::string>& formats);

}  // namespace lbba::cli
