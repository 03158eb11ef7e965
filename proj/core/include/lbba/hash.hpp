#pragma once

#include <span>
#include <string>
#include <string_view>

namespace lbba {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const float> values);

/// Incremental SHA-256 over several buffers.
class Sha256 {
public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view bytes);
  void update(std::span<const float> values);
  std::string hex();

private:
  void* ctx_;
};

}  // namespace lbba
