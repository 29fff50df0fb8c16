#pragma once

#include <cstdint>
#include <string_view>

namespace osl {

// Counter-based generator. A stream is identified by (master seed, stream
// name, index); the i-th draw of a stream is a pure function of that key and
// i, so results never depend on scheduling or thread count.
class Rng {
 public:
  Rng(std::uint64_t master_seed, std::string_view stream, std::uint64_t index = 0);
  explicit Rng(std::uint64_t key) : key_(key) {}

  // Child stream; `derive` of equal arguments always yields the same stream.
  Rng derive(std::string_view stream, std::uint64_t index = 0) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // +1 or -1 with equal probability.
  double sign() { return (next_u64() >> 63) != 0 ? 1.0 : -1.0; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t hash_stream_name(std::string_view name);
std::uint64_t mix64(std::uint64_t x);

}  // namespace osl
