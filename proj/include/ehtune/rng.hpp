#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ehtune {

// Platform-stable random source: mt19937_64 bits with hand-written
// uniform/normal transforms (the std distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  int uniform_int(int n);
  // Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Independent sub-seed for a named purpose (head init, data order, ...).
std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose);

}  // namespace ehtune
