#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace owdf {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. Gaussian draws use Box-Muller on top of the raw
// uniform stream so the sequence does not depend on the standard library's
// distribution implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() {
    // in (0, 1); never returns 0 so log() below is safe
    return (static_cast<double>(gen_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return gen_() % n; }

  std::uint64_t raw() { return gen_(); }

  // independent child stream, e.g. one per sweep cell or epoch
  Rng spawn(std::uint64_t salt) {
    return Rng(gen_() ^ (salt * 0x9E3779B97F4A7C15ull));
  }

 private:
  std::mt19937_64 gen_;
};

template <typename Seq>
inline void shuffle_indices(Seq& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::size_t j = rng.next_below(i);
    std::swap(idx[i - 1], idx[j]);
  }
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace owdf
