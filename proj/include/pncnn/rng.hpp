#pragma once
#include <cmath>
#include <cstdint>
#include <vector>

namespace pncnn {

// Counter-style deterministic generator. SplitMix64 stream with hash-derived
// substreams, so (layer, batch, probe) indices map to independent sequences
// regardless of draw order elsewhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  Rng substream(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t h = s_;
    h = mix(h ^ mix(a ^ 0x517cc1b727220a95ull));
    h = mix(h ^ mix(b ^ 0x6a09e667f3bcc909ull));
    h = mix(h ^ mix(c ^ 0xbb67ae8584caa73bull));
    Rng r(0);
    r.s_ = h;
    r.spare_valid_ = false;
    return r;
  }

  std::uint64_t next_u64() {
    s_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = s_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    return (std::uint64_t)(((__uint128_t)next_u64() * n) >> 64);
  }

  // standard normal, Box-Muller with cached spare
  double gaussian() {
    if (spare_valid_) {
      spare_valid_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 6.283185307179586476925286766559 * uniform();
    spare_ = r * std::sin(th);
    spare_valid_ = true;
    return r * std::cos(th);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = (std::size_t)uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return s_; }
  void set_state(std::uint64_t s) { s_ = s; spare_valid_ = false; }

 private:
  std::uint64_t s_;
  double spare_ = 0.0;
  bool spare_valid_ = false;
};

}  // namespace pncnn
