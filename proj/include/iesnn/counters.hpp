#pragma once

#include <cstdint>

namespace iesnn {

/// Bytes and messages crossing the agent boundary. All fields only grow.
struct Counters {
  std::uint64_t bytes_up = 0;          // owner/user -> cloud
  std::uint64_t bytes_down = 0;        // cloud -> owner/user
  std::uint64_t bytes_down_index = 0;  // ciphertext indexes downloaded from the cloud
  std::uint64_t trapdoors_sent = 0;
  std::uint64_t queries_run = 0;

  friend bool operator==(const Counters&, const Counters&) = default;
};

}  // namespace iesnn
