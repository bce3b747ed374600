#pragma once

// Lightweight counters proving the inference path never touches training-only
// machinery (prior cache reads, oracle query construction).

#include <atomic>
#include <cstdint>

namespace kad::instrument {

inline std::atomic<std::uint64_t>& prior_cache_reads() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline std::atomic<std::uint64_t>& oracle_query_builds() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

}  // namespace kad::instrument
