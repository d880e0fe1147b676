#pragma once

#include <array>
#include <cstdint>

namespace hici {

// Buckets used by the instrumented counter. They mirror the columns of the
// analytical cost model so the two can be compared term by term.
enum class FlopBucket : std::uint8_t {
  other = 0,
  broadcast_attention,   // Q·K^T and P·V of the top-down broadcast
  broadcast_projection,  // Q/K/V projections of the broadcast
  local_global,          // local construction + global integration
  count_
};

struct FlopTally {
  std::array<std::uint64_t, static_cast<std::size_t>(FlopBucket::count_)> by_bucket{};

  std::uint64_t& operator[](FlopBucket b) { return by_bucket[static_cast<std::size_t>(b)]; }
  std::uint64_t operator[](FlopBucket b) const { return by_bucket[static_cast<std::size_t>(b)]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : by_bucket) s += v;
    return s;
  }
};

namespace detail {
inline thread_local FlopTally* active_tally = nullptr;
inline thread_local FlopBucket active_bucket = FlopBucket::other;
}  // namespace detail

// Counts matmul FLOPs (2 per multiply-add) issued on this thread while alive.
class FlopCounter {
 public:
  FlopCounter() : previous_(detail::active_tally) { detail::active_tally = &tally_; }
  ~FlopCounter() { detail::active_tally = previous_; }
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  const FlopTally& tally() const { return tally_; }

 private:
  FlopTally tally_;
  FlopTally* previous_;
};

class FlopScope {
 public:
  explicit FlopScope(FlopBucket b) : previous_(detail::active_bucket) { detail::active_bucket = b; }
  ~FlopScope() { detail::active_bucket = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopBucket previous_;
};

inline void record_flops(std::uint64_t n) {
  if (detail::active_tally) (*detail::active_tally)[detail::active_bucket] += n;
}

}  // namespace hici
