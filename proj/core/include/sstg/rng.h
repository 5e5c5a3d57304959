#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

namespace sstg {

// Deterministic RNG used everywhere randomness is needed. Distribution code is
// hand-rolled on top of mt19937_64 so sequences do not depend on the standard
// library's (implementation-defined) distribution algorithms.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0);

  // Mixes (seed, stream) into an independent generator; used for per-sample
  // and per-parameter substreams.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();
  double uniform01();                       // [0, 1)
  double uniform(double lo, double hi);     // [lo, hi)
  std::uint64_t uniform_int(std::uint64_t n); // [0, n)
  double normal();                          // standard normal, Box-Muller
  bool bernoulli(double p);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  void save(std::ostream& os) const;
  void load(std::istream& is);

private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

} // namespace sstg
