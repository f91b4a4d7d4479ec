#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "r3p/data.hpp"
#include "r3p/protopnet.hpp"
#include "r3p/reward.hpp"

namespace r3p::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string pattern = (std::filesystem::temp_directory_path() / "r3p-test-XXXXXX").string();
    path_ = ::mkdtemp(pattern.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(int c, int h, int w, std::mt19937_64& rng, double lo = 0.0,
                            double hi = 1.0) {
  Tensor t(c, h, w);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values) v = u(rng);
  return t;
}

inline Grid random_grid(int h, int w, std::mt19937_64& rng) {
  Grid g(h, w);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : g.values) v = u(rng);
  return g;
}

inline std::vector<double> random_vector(int n, std::mt19937_64& rng, double lo = 0.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& x : v) x = u(rng);
  return v;
}

// Small model: S=32, one conv stage, latent 8x8x8.
inline ModelConfig tiny_model_config(int classes = 2, int m_k = 2) {
  ModelConfig c;
  c.image_size = 32;
  c.classes = classes;
  c.prototypes_per_class = m_k;
  c.depth = 8;
  c.eps = 1e-4;
  c.widths = {4};
  c.latent_size = 8;
  return c;
}

inline RewardConfig tiny_reward_config(int size = 32) {
  RewardConfig c;
  c.image_size = size;
  c.widths = {2, 3};
  c.fusion_channels = 3;
  return c;
}

inline SyntheticOptions small_synthetic(int classes = 2, int per_class = 6, std::uint64_t seed = 5) {
  SyntheticOptions o;
  o.classes = classes;
  o.per_class = per_class;
  o.image_size = 32;
  o.seed = seed;
  return o;
}

// Relative error with an absolute floor, for finite-difference checks.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

}  // namespace r3p::testing
