#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace flowproto {

// Deterministic generator: xoshiro256** (Blackman & Vigna) whose 256-bit state
// is expanded from (seed, stream) with SplitMix64. All derived draws use only
// integer arithmetic and the transforms documented below, so a seed fixes the
// output sequence on every platform with IEEE-754 doubles.
//
//   uniform()          top 53 bits of next_u64() times 2^-53, in [0, 1)
//   standard_normal()  Box-Muller on (1 - uniform(), uniform()); the sine
//                      variate is cached and returned by the next call
//   uniform_index(n)   rejection sampling on next_u64() for an unbiased
//                      value in [0, n)
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double standard_normal();
  std::size_t uniform_index(std::size_t n);

  // Fisher-Yates from the back.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  /// k distinct indices from [0, n) in selection order. Throws DomainError
  /// when k > n.
  std::vector<std::size_t> choose_without_replacement(std::size_t n, std::size_t k);

  // Independent generator keyed on this seed and a new stream id. Does not
  // advance *this.
  Rng derive(std::uint64_t stream) const { return Rng(seed_, stream_ * 0x100000001B3ULL + stream + 1); }

  bool operator==(const Rng& other) const = default;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace flowproto
