#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dahar {

// Invalid model/op configuration (bad shapes, bad config fields).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: backward on a non-scalar, double backward, non-deterministic
// closure handed to grad_check.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed file content; message carries file name and byte offset.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A forward op produced NaN/Inf while the guard was on.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG. The distributions are hand-rolled on top of
// mt19937_64 so that the byte stream of every run is pinned by this
// header alone, not by the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(splitmix64(seed)), seed_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw ContractError("Rng::uniform_int: hi < lo");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call so consumption order stays fixed.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent stream for a sub-task (e.g. one sample of a dataset).
  // Parallel and serial traversal of substreams agree by construction.
  Rng split(uint64_t stream) const {
    return Rng(seed_ ^ splitmix64(stream + 0x51ed2701ull));
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_;
};

}  // namespace dahar
