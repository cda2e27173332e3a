#pragma once

#include <cstdint>
#include <random>

namespace schanger {

// Seeded RNG wrapper. Every stochastic component takes one of these
// explicitly; nothing in the library reads global entropy.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(eng_);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }

  // Normal(0, std) with samples beyond two standard deviations redrawn.
  double trunc_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (v >= -2.0 * stddev && v <= 2.0 * stddev) return v;
    }
  }

  // Inclusive range [lo, hi].
  int randint(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(eng_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Derive an independent child seed stream.
  uint64_t next_seed() { return eng_(); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace schanger
