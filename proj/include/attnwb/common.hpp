#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attnwb {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TokenId = std::int32_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Seeded generator. Uniform and normal draws are implemented here rather than
// through <random> distributions so a seed yields the same stream on every
// standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
};

// Mixes a base seed with a label so independent streams never collide.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// In-place Fisher-Yates driven by Rng.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is handled
// exactly once; callers write results into per-index slots and reduce in index
// order, so output never depends on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned workers = 0);

unsigned default_workers();

}  // namespace attnwb
