#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace subgmm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// Error types. Every recoverable failure mode in the library maps to one of
// these; callers that need to distinguish catch the concrete type.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define SUBGMM_DEFINE_ERROR(NAME)                                   \
  struct NAME : Error {                                             \
    explicit NAME(const std::string& msg = #NAME) : Error(msg) {}   \
  }

SUBGMM_DEFINE_ERROR(TooFewPoints);
SUBGMM_DEFINE_ERROR(DegenerateInput);
SUBGMM_DEFINE_ERROR(OriginOutOfBounds);
SUBGMM_DEFINE_ERROR(MetaMismatch);
SUBGMM_DEFINE_ERROR(ComponentCountOverflow);
SUBGMM_DEFINE_ERROR(Truncated);
SUBGMM_DEFINE_ERROR(BadKind);
SUBGMM_DEFINE_ERROR(BadMagic);
SUBGMM_DEFINE_ERROR(TimeRegression);
SUBGMM_DEFINE_ERROR(StaleOdometry);
SUBGMM_DEFINE_ERROR(PoseInOccupied);
SUBGMM_DEFINE_ERROR(InfeasibleParams);
SUBGMM_DEFINE_ERROR(BadConfig);
SUBGMM_DEFINE_ERROR(IoFailure);

#undef SUBGMM_DEFINE_ERROR

#define SUBGMM_CHECK(cond, ErrorType, msg) \
  do {                                     \
    if (!(cond)) throw ErrorType(msg);     \
  } while (0)

// ---------------------------------------------------------------------------
// Deterministic random numbers. The engine is std::mt19937_64 (fully pinned
// by the standard); the value transforms below are ours so the stream does
// not depend on the standard library's distribution implementations.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and stream tags.
inline uint64_t derive_seed(uint64_t base, uint64_t tag_a, uint64_t tag_b = 0) {
  uint64_t s = base ^ 0xa5a5a5a55a5a5a5aULL;
  (void)splitmix64(s);
  s ^= tag_a * 0xff51afd7ed558ccdULL;
  (void)splitmix64(s);
  s ^= tag_b * 0xc4ceb9fe1a85ec53ULL;
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller; one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Guard u1 = 0.
    u1 = std::max(u1, 0x1.0p-53);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Vec3 normal3() {
    const double a = normal();
    const double b = normal();
    const double c = normal();
    return Vec3(a, b, c);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace subgmm
