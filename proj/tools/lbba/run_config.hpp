#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/attack.hpp"
#include "lbba/data.hpp"
#include "lbba/nets.hpp"
#include "lbba/train.hpp"

namespace lbba::cli {

/**
 * Sectioned key/value run configuration (INI). Every key has a default;
 * unknown sections and keys are rejected. "auto" leaves an optional value
 * to its derived default.
 */
class RunConfig {
public:
  RunConfig();
  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// `key` is "section.name". Throws ConfigError for unknown keys.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  /// Every key with its value, in canonical order.
  std::string to_ini() const;
  nlohmann::json to_json() const;
  /// Parses every typed view; throws ConfigError on the first bad value.
  void validate() const;

  std::string text(const std::string& key) const { return get(key); }
  int integer(const std::string& key) const;
  uint64_t unsigned_integer(const std::string& key) const;
  double number(const std::string& key) const;
  std::optional<double> maybe_number(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;
  std::vector<int> int_list(const std::string& key) const;
  std::vector<uint64_t> seed_list(const std::string& key) const;

  std::filesystem::path run_dir() const;
  /// [data].root, else $LBBA_DATA_DIR.
  std::filesystem::path data_root() const;
  FewShotRequest few_shot_request() const;
  TrainConfig surrogate_train() const;
  TargetTrainConfig target_train() const;
  AttackConfig attack() const;
  NetworkSpec surrogate_spec(int channels, int height, int width, int classes) const;
  std::vector<Family> target_families() const;
  std::vector<Surface> evaluate_surfaces() const;
  std::vector<Method> evaluate_methods() const;
  std::vector<TruncationPoint> sweep_layers() const;

private:
  std::map<std::string, std::string> values_;
};

}  // namespace lbba::cli
