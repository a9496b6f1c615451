#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace nrgpt {

// ---------------------------------------------------------------------------
// Errors. Exit-code mapping lives in the CLI: 1 usage/config, 2 divergence,
// 3 oracle failure.
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape: " + msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error("contract: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config: " + msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io: " + msg) {}
};

struct VocabError : std::runtime_error {
  explicit VocabError(const std::string& msg) : std::runtime_error("vocab: " + msg) {}
};

// Inference dynamics left the trusted region (NaN gradient or |x| blow-up).
struct DivergedError : std::runtime_error {
  int step;
  DivergedError(int step_, const std::string& msg)
      : std::runtime_error("diverged at step " + std::to_string(step_) + ": " + msg),
        step(step_) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. std::: distributions are implementation-defined, so all
// randomness goes through this xoshiro256** generator; identical seeds give
// identical streams on every platform.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    // splitmix64 expansion of the seed into the full state
    uint64_t x = seed;
    for (auto& word : s_) {
      x += 0x9e3779b97f4a7c15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      word = z ^ (z >> 31);
    }
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl_(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl_(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Lemire's multiply-shift; unbiased enough for data sampling and exactly
  // reproducible, which is what matters here.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    // Box-Muller; 1-u avoids log(0)
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Derives an independent stream, e.g. per (seed, sample index).
  static Rng stream(uint64_t seed, uint64_t index) {
    Rng r(seed ^ (0x9e3779b97f4a7c15ull + index * 0xbf58476d1ce4e5b9ull));
    r.next_u64();  // decorrelate near-identical seeds
    return r;
  }

  const std::array<uint64_t, 4>& state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) {
    s_ = s;
    has_spare_ = false;
  }

 private:
  static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Multiply-add accounting. Every matrix-product kernel reports its MAC count
// here; elementwise work and reductions are not counted. The symbolic
// estimates in model.hpp mirror exactly this convention.
// ---------------------------------------------------------------------------

namespace flops {
inline std::atomic<uint64_t> macs{0};
inline void add(uint64_t n) { macs.fetch_add(n, std::memory_order_relaxed); }
inline void reset() { macs.store(0, std::memory_order_relaxed); }
inline uint64_t count() { return macs.load(std::memory_order_relaxed); }
}  // namespace flops

// ---------------------------------------------------------------------------
// Worker count: --threads flag > NRGPT_THREADS env > hardware.
// ---------------------------------------------------------------------------

inline int resolve_threads(int flag_value = 0) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("NRGPT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Runs fn(i) for i in [0, n) on `workers` threads. Work is split by index
// stripe so the assignment (and hence any per-index output) does not depend
// on scheduling.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers) - 1);
  for (int w = 1; w < workers; ++w) {
    pool.emplace_back([=, &fn] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (int i = 0; i < n; i += workers) fn(i);
  for (auto& t : pool) t.join();
}

}  // namespace nrgpt
