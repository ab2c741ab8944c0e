#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace foldalign {

// Error taxonomy, mapped to CLI exit codes: usage errors -> 1,
// data/validation errors -> 2, numerical failures -> 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : DataError {
  using DataError::DataError;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG. The engine is the bit-specified mt19937_64; all
// distributions are hand-rolled on top of it so streams are identical
// across standard libraries and build modes.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xd1b54a32d192ed03ULL)) {
    // warm up so nearby seeds decorrelate
    for (int i = 0; i < 4; ++i) next_u64();
  }

  uint64_t next_u64() {
    state_ = splitmix64(state_ + 0x2545f4914f6cdd1dULL);
    return state_;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform in (0, 1]
  double uniform_pos() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Box-Muller, one value per two uniforms; no cached spare so the
  // stream position is a pure function of the call count.
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // N(0, sigma^2) rejected outside +/- bound_sigmas * sigma.
  double truncated_normal(double sigma, double bound_sigmas) {
    if (sigma == 0.0) return 0.0;
    double z;
    do {
      z = normal();
    } while (std::abs(z) > bound_sigmas);
    return z * sigma;
  }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ShapeError("uniform_int: n must be positive");
    const uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= lim);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// Deterministic child seed for episode/run/worker derivation.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

// FNV-1a 64-bit content digest (corruption detection, not crypto).
inline uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a64_hex(std::span<const unsigned char> bytes);
std::string fnv1a64_hex(const std::string& text);
std::string file_digest(const std::string& path);
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

// Runs fn(i) for i in [0, n); with jobs <= 1 runs inline. Work items must
// be independent; results should be written to per-index slots.
void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& fn);

bool all_finite(std::span<const double> v);

}  // namespace foldalign
