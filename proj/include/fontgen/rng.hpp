#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "fontgen/common.hpp"

namespace fontgen {

// xoshiro256++ with explicit, serializable state. std:: distributions are
// implementation-defined, so every draw used for training, sampling, or tests
// goes through this class; a checkpointed state resumes the exact stream.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = splitmix64(x);
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9E3779B97F4A7C15ull * (b + 1);
    splitmix64(x);
    return splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1), 53-bit resolution.
  real uniform() { return static_cast<real>(next_u64() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0,n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ArgumentError("Rng::uniform_int: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller; the spare is part of the state.
  real normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const real u1 = 1.0 - uniform();  // (0,1], keeps log finite
    const real u2 = uniform();
    const real r = std::sqrt(-2.0 * std::log(u1));
    const real a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  real normal(real mean, real stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent generator without disturbing this stream.
  Rng fork(std::uint64_t stream) const {
    return Rng(mix(state_[0] ^ state_[2], stream));
  }

  std::string save() const {
    std::ostringstream os;
    os << state_[0] << ' ' << state_[1] << ' ' << state_[2] << ' ' << state_[3] << ' '
       << (has_spare_ ? 1 : 0) << ' ' << double_bits(spare_);
    return os.str();
  }

  static Rng load(const std::string& s) {
    std::istringstream is(s);
    Rng r;
    int spare_flag = 0;
    std::uint64_t bits = 0;
    is >> r.state_[0] >> r.state_[1] >> r.state_[2] >> r.state_[3] >> spare_flag >> bits;
    if (!is) throw DataError("Rng::load: malformed state string");
    r.has_spare_ = spare_flag != 0;
    r.spare_ = bits_to_double(bits);
    return r;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  static std::uint64_t double_bits(real d) {
    std::uint64_t u;
    std::memcpy(&u, &d, sizeof(u));
    return u;
  }

  static real bits_to_double(std::uint64_t u) {
    real d;
    std::memcpy(&d, &u, sizeof(d));
    return d;
  }

  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  real spare_ = 0.0;
};

}  // namespace fontgen
