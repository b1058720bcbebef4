#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace max360iq {

/// Seeded generator with platform-independent draws: only raw 64-bit
/// engine output is consumed, so the std distributions' unspecified
/// algorithms never enter the picture.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Normal truncated to [-2, 2] standard deviations, then scaled.
  double truncated_normal(double stddev);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  // Derived stream for a sub-task; independent of how many draws the parent made.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace max360iq
