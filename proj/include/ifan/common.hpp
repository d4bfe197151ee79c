#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ifan {

// Thrown when tensor shapes do not line up.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown for invalid configuration values (bad strides, negative weights, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(std::string_view s);

// Deterministic PRNG (splitmix64). Shared across all modules so results are
// reproducible bit-for-bit regardless of platform library differences.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next();

  // [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // [0, n)
  int uniform_int(int n);
  // standard normal via Box-Muller
  double normal();
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Independent, label-derived stream. Two streams with different labels (or
// salts) never interact, so creating one module's parameters cannot shift
// another module's initialization.
Rng stream_rng(std::uint64_t seed, std::string_view label, std::uint64_t salt = 0);

}  // namespace ifan
