#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

/// A generated adversarial set. Directory layout: manifest.json plus
/// x_adv.lbt (tensor container); png/ only when exported.
struct AdversarialArchive {
  nlohmann::json config;
  std::string config_hash;
  std::string surrogate_hash;
  /// Few-shot provenance of the attacked pool.
  nlohmann::json pool;
  uint64_t seed = 0;
  Tensor x_adv;
  std::vector<int64_t> sources;
  /// -1 where the surface uses no guide.
  std::vector<int64_t> guides;
  std::vector<int> labels;
  std::vector<double> final_objective;

  nlohmann::json manifest() const;
};

/// Writes (overwriting) the archive. `export_png` adds lossy 8-bit copies
/// that are never read back.
void write_archive(const std::filesystem::path& dir, const AdversarialArchive& archive, bool export_png = false);
/// Throws DataError when the directory is incomplete or inconsistent.
AdversarialArchive read_archive(const std::filesystem::path& dir);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
