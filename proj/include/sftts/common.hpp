#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sftts {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch broadly; tests catch the specific types.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct InvalidInput : Error {
  explicit InvalidInput(const std::string& msg) : Error(msg) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};
struct InfeasibleAlignment : Error {
  explicit InfeasibleAlignment(const std::string& msg) : Error(msg) {}
};
struct DegenerateDensity : Error {
  explicit DegenerateDensity(const std::string& msg) : Error(msg) {}
};
struct TrainingDivergence : Error {
  explicit TrainingDivergence(const std::string& msg) : Error(msg) {}
};

// Deterministic RNG. splitmix64 core with hand-rolled uniform/normal
// transforms so streams are bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; draws are consumed in pairs.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Derives an independent stream, e.g. one per corpus item.
  Rng fork(std::uint64_t salt) {
    std::uint64_t s = next_u64();
    return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL));
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace sftts
