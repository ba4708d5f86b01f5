#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cvqa {

using Real = double;

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Mat = MatX<Real>;
using Vec = VecX<Real>;
using Matf = MatX<float>;

using Rng = std::mt19937_64;

// Error taxonomy. Everything user-facing throws one of these; the CLI maps
// them to exit codes and a category tag.
struct Error : std::runtime_error {
  std::string category;
  Error(std::string cat, const std::string& msg)
      : std::runtime_error(msg), category(std::move(cat)) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& msg) : Error("validation", msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io", msg) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error("format", msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};
struct EncodingError : Error {
  explicit EncodingError(const std::string& msg) : Error("encoding", msg) {}
};
struct CorruptionError : Error {
  explicit CorruptionError(const std::string& msg) : Error("corruption", msg) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error("dimension", msg) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

#define CVQA_REQUIRE(cond, err, msg) \
  do {                               \
    if (!(cond)) throw err(msg);     \
  } while (0)

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Exact uniform integer in [0, k) by rejection; avoids the distribution
// objects so streams stay bit-reproducible and fully serializable.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t k) {
  if (k <= 1) return 0;
  const std::uint64_t threshold = (0 - k) % k;  // 2^64 mod k
  for (;;) {
    std::uint64_t r = rng();
    if (r >= threshold) return r % k;
  }
}

inline double uniform_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller without the cached spare, so a serialized engine state is the
// complete generator state.
inline double gaussian(Rng& rng) {
  double u1 = uniform_real(rng);
  double u2 = uniform_real(rng);
  while (u1 <= 0.0) u1 = uniform_real(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Named child streams derived from one master seed. Adding a new stream name
// never perturbs the draws of existing streams.
// Deterministic seed combinator (splitmix-style finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

inline Rng named_stream(std::uint64_t master_seed, std::string_view name) {
  const std::uint64_t h = fnv1a64(name);
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                    static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(h),
                    static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

inline long long round_half_up(double x) {
  return static_cast<long long>(std::floor(x + 0.5));
}

}  // namespace cvqa
