#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace r3p {

// Error families. Callers catch by family; the message carries the detail.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConflictError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ServiceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

namespace detail {

inline void append(std::ostringstream&) {}

template <typename T, typename... Rest>
void append(std::ostringstream& oss, T&& token, Rest&&... rest) {
  oss << std::forward<T>(token);
  append(oss, std::forward<Rest>(rest)...);
}

}  // namespace detail

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  detail::append(oss, std::forward<Args>(args)...);
  return oss.str();
}

template <typename Error = ContractError, typename... Args>
void require(bool condition, Args&&... message) {
  if (!condition) throw Error(concat(std::forward<Args>(message)...));
}

// Derives an independent stream from a base seed and a purpose tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

inline bool all_finite(const auto& range) {
  for (double v : range)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace r3p
