#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbba/errors.hpp"
#include "lbba/nets.hpp"
#include "lbba/tensor.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

enum class CheckpointErrorCode { io, corrupt_manifest, unknown_version, shape_mismatch, spec_mismatch };

std::string to_string(CheckpointErrorCode c);

class CheckpointError : public Error {
public:
  CheckpointError(CheckpointErrorCode code, const std::string& what)
      : Error(ErrorKind::checkpoint, to_string(code) + ": " + what), code_(code) {}
  CheckpointErrorCode code() const noexcept { return code_; }

private:
  CheckpointErrorCode code_;
};

inline constexpr uint32_t kTensorFileVersion = 1;
inline constexpr size_t kPayloadAlignment = 64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
  nlohmann::json attrs = nlohmann::json::object();
};

struct TensorFile {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
};

/**
 * Container layout:
 *   "LBBA" | u32 version | u64 manifest length | manifest JSON | zero pad |
 *   little-endian float32 payload, each tensor at a 64-byte aligned
 *   absolute file offset recorded in the manifest.
 */
void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

/// `extra` is stored under header["provenance"].
void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Validates the embedded spec hash and, when given, that the checkpoint was
/// written for `expected`.
Model load_checkpoint(const std::filesystem::path& path, const NetworkSpec* expected = nullptr);

/// SHA-256 over the spec hash and every parameter name and value.
std::string model_hash(const Model& model);

/// Header of a checkpoint without building the model.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
