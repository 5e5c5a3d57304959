#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace sstg {

// Minimal FIPS 180-4 SHA-256, used for file digests in run manifests and
// dataset stats. Not a hot path.
class Sha256 {
public:
  Sha256();
  void update(const void* data, std::size_t len);
  std::string hex_digest(); // finalizes; object must not be reused afterwards

  static std::string of_file(const std::string& path);
  static std::string of_bytes(const void* data, std::size_t len);

private:
  void process_block(const std::uint8_t* block);

  std::uint32_t state_[8];
  std::uint8_t buffer_[64];
  std::size_t buffer_len_ = 0;
  std::uint64_t total_len_ = 0;
};

} // namespace sstg
