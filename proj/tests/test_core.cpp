#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "r3p/protopnet.hpp"
#include "support.hpp"

using namespace r3p;
using r3p::testing::random_tensor;
using r3p::testing::random_vector;
using r3p::testing::TempDir;

namespace {

Prototype make_proto(std::vector<double> v, int id = 0, int k = 0) {
  Prototype p;
  p.prototype_id = id;
  p.class_id = k;
  p.vector = std::move(v);
  return p;
}

LabeledImage make_image(std::string id, int k, Tensor pixels) {
  LabeledImage image;
  image.image_id = std::move(id);
  image.class_id = k;
  image.pixels = std::move(pixels);
  return image;
}

// Latent side 2 for 8x8 inputs: 3x3 conv, then two pools.
ModelConfig micro_config(int latent, int classes = 2, int m_k = 1) {
  ModelConfig c;
  c.image_size = 8;
  c.classes = classes;
  c.prototypes_per_class = m_k;
  c.depth = 8;
  c.widths = {4};
  c.latent_size = latent;
  return c;
}

double brute_similarity(const Tensor& grid, int y, int x, const std::vector<double>& p, double eps) {
  double d2 = 0;
  for (int d = 0; d < grid.channels; ++d) d2 += (grid(d, y, x) - p[d]) * (grid(d, y, x) - p[d]);
  return std::log((d2 + 1.0) / (d2 + eps));
}

}  // namespace

TEST(Similarity, ZeroDistanceIsLogInverseEps) {
  const std::vector<double> v{0.1, 0.2, 0.3};
  EXPECT_NEAR(similarity(v, make_proto(v), 1e-4), std::log(1e4), 1e-12);
  EXPECT_NEAR(std::log(1e4), 9.2103, 1e-4);
}

TEST(Similarity, UnitDistanceMatchesScalarFormula) {
  const std::vector<double> patch{1.0, 0.0};
  const std::vector<double> proto{0.0, 0.0};
  const double expected = std::log(2.0 / 1.0001);
  EXPECT_NEAR(similarity(patch, make_proto(proto), 1e-4), expected, 1e-12);
  EXPECT_NEAR(expected, 0.6930, 1e-4);
}

TEST(Similarity, VanishesAtLargeDistance) {
  const double far = similarity_from_distance(1e12, 1e-4);
  EXPECT_GT(far, 0.0);
  EXPECT_LT(far, 1e-11);
}

TEST(Similarity, StrictlyDecreasingOverRandomPairs) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> scale(-6.0, 4.0);
  std::uniform_real_distribution<double> eps_draw(1e-6, 0.9);
  int checked = 0;
  for (int t = 0; t < 10000; ++t) {
    const double a = std::pow(10.0, scale(rng)), b = std::pow(10.0, scale(rng));
    if (a == b) continue;
    const double eps = eps_draw(rng);
    const double lo = std::min(a, b), hi = std::max(a, b);
    ASSERT_GT(similarity_from_distance(lo, eps), similarity_from_distance(hi, eps))
        << "d2=" << lo << "," << hi << " eps=" << eps;
    ASSERT_GT(similarity_from_distance(hi, eps), 0.0);
    ++checked;
  }
  EXPECT_GE(checked, 9990);
}

TEST(Similarity, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const double h = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const auto patch = random_vector(8, rng);
    const auto p = random_vector(8, rng);
    const double d2 = squared_distance(patch, p);
    for (int d = 0; d < 8; ++d) {
      const double analytic = similarity_slope(d2, 1e-4) * 2.0 * (p[d] - patch[d]);
      auto plus = p, minus = p;
      plus[d] += h;
      minus[d] -= h;
      const double numeric =
          (similarity(patch, make_proto(plus), 1e-4) - similarity(patch, make_proto(minus), 1e-4)) /
          (2 * h);
      EXPECT_LE(r3p::testing::relative_error(analytic, numeric), 1e-3);
    }
  }
}

TEST(Similarity, RejectsNonFiniteAndBadEps) {
  const std::vector<double> bad{std::numeric_limits<double>::quiet_NaN(), 0.0};
  const std::vector<double> ok{0.0, 0.0};
  EXPECT_THROW(similarity(bad, make_proto(ok), 1e-4), ContractError);
  EXPECT_THROW(similarity(ok, make_proto(ok), 1.0), ContractError);
  EXPECT_THROW(similarity(ok, make_proto({0.0}), 1e-4), ContractError);
}

TEST(PrototypeLayer, ExactMatchScoresLogInverseEps) {
  std::mt19937_64 rng(3);
  const Tensor grid = random_tensor(8, 3, 3, rng);
  const Prototype p = make_proto(patch_at(grid, 1, 2));
  const auto out = prototype_layer_forward(grid, {p}, 1e-4);
  EXPECT_NEAR(out.scores[0], std::log(1e4), 1e-12);
  EXPECT_EQ(out.argmin_cells[0], 1 * 3 + 2);
}

TEST(PrototypeLayer, SinglePatchGridEqualsThatSimilarity) {
  std::mt19937_64 rng(4);
  const Tensor grid = random_tensor(8, 1, 1, rng);
  const Prototype p = make_proto(random_vector(8, rng));
  EXPECT_DOUBLE_EQ(prototype_layer_forward(grid, {p}, 1e-4).scores[0],
                   similarity(patch_at(grid, 0, 0), p, 1e-4));
}

TEST(PrototypeLayer, MaxPoolEqualsBruteForceAndDominatesEveryPatch) {
  std::mt19937_64 rng(5);
  for (int h = 1; h <= 4; ++h)
    for (int w = 1; w <= 4; ++w)
      for (int trial = 0; trial < 10; ++trial) {
        const Tensor grid = random_tensor(8, h, w, rng);
        std::vector<Prototype> protos;
        for (int j = 0; j < 3; ++j) protos.push_back(make_proto(random_vector(8, rng), j));
        const auto out = prototype_layer_forward(grid, protos, 1e-4);
        ASSERT_EQ(out.scores.size(), 3u);
        for (int j = 0; j < 3; ++j) {
          double best = -std::numeric_limits<double>::infinity();
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              const double s = brute_similarity(grid, y, x, protos[j].vector, 1e-4);
              EXPECT_GE(out.scores[j], s);
              best = std::max(best, s);
            }
          EXPECT_NEAR(out.scores[j], best, 1e-12);
        }
      }
}

TEST(Backbone, ZeroImageGivesFiniteGrid) {
  const PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(), 1);
  const Tensor grid = backbone_forward(model, make_image("z", 0, Tensor(3, 32, 32, 0.0)));
  EXPECT_EQ(grid.channels, 8);
  EXPECT_EQ(grid.height, 8);
  EXPECT_TRUE(all_finite(grid.values));
}

TEST(Backbone, DeterministicAndShapeChecked) {
  std::mt19937_64 rng(6);
  const PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(), 1);
  const LabeledImage image = make_image("a", 0, random_tensor(3, 32, 32, rng));
  EXPECT_EQ(backbone_forward(model, image), backbone_forward(model, image));
  EXPECT_THROW(backbone_forward(model, make_image("b", 0, Tensor(3, 31, 32))), ContractError);
  EXPECT_THROW(backbone_forward(model, make_image("c", 0, Tensor(1, 32, 32))), ContractError);
}

TEST(ModelForward, ZeroHeadGivesZeroLogits) {
  std::mt19937_64 rng(7);
  PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(), 1);
  std::fill(model.head.weights.begin(), model.head.weights.end(), 0.0);
  const auto out = model_forward(model, make_image("a", 0, random_tensor(3, 32, 32, rng)));
  for (double v : out.logits) EXPECT_EQ(v, 0.0);
}

TEST(ModelForward, IdentityHeadPassesSimilaritiesThrough) {
  std::mt19937_64 rng(8);
  PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(3, 1), 1);
  ASSERT_EQ(model.prototype_count(), 3);
  std::fill(model.head.weights.begin(), model.head.weights.end(), 0.0);
  for (int k = 0; k < 3; ++k) model.head.at(k, k) = 1.0;
  const auto out = model_forward(model, make_image("a", 0, random_tensor(3, 32, 32, rng)));
  for (int k = 0; k < 3; ++k) EXPECT_EQ(out.logits[k], out.sims.scores[k]);
}

TEST(ModelForward, MatchesHandComposedPipeline) {
  std::mt19937_64 rng(9);
  PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(2, 2), 4);
  for (double& w : model.head.weights) w = std::uniform_real_distribution<double>(-1, 1)(rng);
  const LabeledImage image = make_image("a", 0, random_tensor(3, 32, 32, rng));
  const Tensor grid = model.backbone.forward(image.pixels);
  std::vector<double> sims;
  for (const auto& p : model.prototypes) {
    double best = -1e300;
    for (int y = 0; y < grid.height; ++y)
      for (int x = 0; x < grid.width; ++x)
        best = std::max(best, brute_similarity(grid, y, x, p.vector, model.config.eps));
    sims.push_back(best);
  }
  const auto out = model_forward(model, image);
  for (int k = 0; k < 2; ++k) {
    double logit = 0;
    for (int j = 0; j < 4; ++j) logit += model.head.weights[k * 4 + j] * sims[j];
    EXPECT_NEAR(out.logits[k], logit, 1e-12);
  }
}

TEST(ActivationMap, ConstantGridGivesZeroDisplay) {
  Tensor grid(8, 4, 4, 0.5);
  const auto map = activation_map_from_grid(grid, std::vector<double>(8, 0.1), 1e-4, 16);
  for (double v : map.display.values) EXPECT_EQ(v, 0.0);
}

TEST(ActivationMap, BilinearTwoByTwoToFourByFour) {
  Grid raw(2, 2);
  raw(0, 0) = 0;
  raw(0, 1) = 1;
  raw(1, 0) = 2;
  raw(1, 1) = 3;
  // Cell centers land on pixels 1 and 3; pixel 0 clamps, pixel 2 is halfway.
  const double w[4] = {0.0, 0.0, 0.5, 1.0};
  const Grid up = bilinear_upsample(raw, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(up(y, x), w[x] * 1.0 + w[y] * 2.0, 1e-12);
}

TEST(ActivationMap, TopLeftArgmaxStaysInTopLeftBlock) {
  std::mt19937_64 rng(10);
  Tensor grid = random_tensor(8, 4, 4, rng, 0.3, 1.0);
  const std::vector<double> p(8, 0.0);
  for (int d = 0; d < 8; ++d) grid(d, 0, 0) = 0.0;
  const auto map = activation_map_from_grid(grid, p, 1e-4, 32);
  const auto peak = std::max_element(map.upsampled.values.begin(), map.upsampled.values.end()) -
                    map.upsampled.values.begin();
  EXPECT_LT(peak / 32, 8);
  EXPECT_LT(peak % 32, 8);
}

TEST(ActivationMap, UpsampledArgmaxCorrespondsToRawArgmax) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int side = std::array{8, 4, 7, 3}[trial % 4];
    const Tensor grid = random_tensor(8, side, side, rng);
    const auto p = random_vector(8, rng);
    const auto map = activation_map_from_grid(grid, p, 1e-4, 32);
    const auto raw_peak =
        std::max_element(map.raw.values.begin(), map.raw.values.end()) - map.raw.values.begin();
    const auto up_peak = std::max_element(map.upsampled.values.begin(), map.upsampled.values.end()) -
                         map.upsampled.values.begin();
    EXPECT_EQ((up_peak / 32) * side / 32, raw_peak / side);
    EXPECT_EQ((up_peak % 32) * side / 32, raw_peak % side);
    EXPECT_EQ(map.upsampled.values[up_peak], map.raw.values[raw_peak]);
    const auto [lo, hi] = std::minmax_element(map.display.values.begin(), map.display.values.end());
    EXPECT_EQ(*lo, 0.0);
    EXPECT_EQ(*hi, 1.0);
  }
}

TEST(Push, ExistingPatchIsAFixedPoint) {
  std::mt19937_64 rng(12);
  PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(2, 1), 2);
  const LabeledImage a = make_image("a", 0, random_tensor(3, 32, 32, rng));
  const LabeledImage b = make_image("b", 1, random_tensor(3, 32, 32, rng));
  const Tensor ga = backbone_forward(model, a);
  model.prototypes[0].vector = patch_at(ga, 3, 5);
  const auto pushed = push_prototypes(model, {&a, &b});
  EXPECT_EQ(pushed[0].vector, model.prototypes[0].vector);
  ASSERT_TRUE(pushed[0].source.has_value());
  EXPECT_EQ(pushed[0].source->image_id, "a");
  EXPECT_EQ(pushed[0].source->row, 3);
  EXPECT_EQ(pushed[0].source->col, 5);
  ASSERT_TRUE(pushed[1].source.has_value());
  EXPECT_EQ(pushed[1].source->image_id, "b");
}

TEST(Push, SinglePatchPerClassIsForced) {
  std::mt19937_64 rng(13);
  const PrototypeNet model = initialize_model(micro_config(1), 3);
  ASSERT_EQ(model.latent_shape(), std::make_pair(1, 1));
  const LabeledImage a = make_image("a", 0, random_tensor(3, 8, 8, rng));
  const LabeledImage b = make_image("b", 1, random_tensor(3, 8, 8, rng));
  const auto pushed = push_prototypes(model, {&a, &b});
  EXPECT_EQ(pushed[0].vector, patch_at(backbone_forward(model, a), 0, 0));
  EXPECT_EQ(pushed[1].vector, patch_at(backbone_forward(model, b), 0, 0));
}

TEST(Push, MatchesExhaustiveNearestPatchSearch) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const PrototypeNet model = initialize_model(micro_config(2, 2, 3), 20 + trial);
    ASSERT_EQ(model.latent_shape(), std::make_pair(2, 2));
    std::vector<LabeledImage> images;
    for (int i = 0; i < 6; ++i)
      images.push_back(make_image("i" + std::to_string(i), i % 2, random_tensor(3, 8, 8, rng)));
    std::vector<const LabeledImage*> set;
    for (const auto& im : images) set.push_back(&im);
    const auto pushed = push_prototypes(model, set);
    for (std::size_t j = 0; j < pushed.size(); ++j) {
      const auto& p = model.prototypes[j];
      double best = 1e300;
      std::vector<double> best_patch;
      for (const auto& im : images) {
        if (im.class_id != p.class_id) continue;
        const Tensor g = model.backbone.forward(im.pixels);
        for (int y = 0; y < 2; ++y)
          for (int x = 0; x < 2; ++x) {
            const auto patch = patch_at(g, y, x);
            const double d = squared_distance(patch, p.vector);
            if (d < best) best = d, best_patch = patch;
          }
      }
      EXPECT_EQ(pushed[j].vector, best_patch);
      // Projection exactness: the source patch reproduces the vector.
      const LabeledImage& src = *std::find_if(images.begin(), images.end(), [&](const auto& im) {
        return im.image_id == pushed[j].source->image_id;
      });
      const Tensor g = model.backbone.forward(src.pixels);
      EXPECT_LE(squared_distance(patch_at(g, pushed[j].source->row, pushed[j].source->col),
                                 pushed[j].vector),
                1e-6);
      EXPECT_EQ(src.class_id, p.class_id);
    }
  }
}

TEST(Push, ClassWithoutImagesIsAnError) {
  std::mt19937_64 rng(15);
  const PrototypeNet model = initialize_model(micro_config(2), 3);
  const LabeledImage a = make_image("a", 0, random_tensor(3, 8, 8, rng));
  EXPECT_THROW(push_prototypes(model, {&a}), ContractError);
}

namespace {

// Two classes; images share an identical gray top-left region (a "background"
// patch common to all classes) and differ elsewhere by class color. The
// region covers the receptive field of latent cell (0,0).
std::vector<LabeledImage> shared_background_images(std::mt19937_64& rng) {
  std::vector<LabeledImage> out;
  std::normal_distribution<double> jitter(0.0, 0.02);
  for (int i = 0; i < 6; ++i) {
    const int k = i < 3 ? 1 : 0;  // other-class images first
    Tensor t(3, 8, 8);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 3; ++c) {
          const bool background = y <= 4 && x <= 4;
          const double color = k == 0 ? (c == 0 ? 0.9 : 0.1) : (c == 2 ? 0.9 : 0.1);
          t(c, y, x) = background ? 0.5 : std::clamp(color + jitter(rng), 0.0, 1.0);
        }
    out.push_back(make_image("p" + std::to_string(i), k, std::move(t)));
  }
  return out;
}

int oracle_mismatch(const PrototypeNet& model, const Prototype& p,
                    const std::vector<const LabeledImage*>& set, int L) {
  std::vector<std::pair<double, int>> ranked;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Tensor g = model.backbone.forward(set[i]->pixels);
    double best = 1e300;
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) best = std::min(best, squared_distance(patch_at(g, y, x), p.vector));
    ranked.emplace_back(best, static_cast<int>(i));
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  int count = 0;
  for (int l = 0; l < L; ++l) count += set[ranked[l].second]->class_id != p.class_id;
  return count;
}

}  // namespace

TEST(Prune, RemovesSharedBackgroundPrototypeOnly) {
  std::mt19937_64 rng(16);
  PrototypeNet model = initialize_model(micro_config(2, 2, 2), 5);
  const auto images = shared_background_images(rng);
  std::vector<const LabeledImage*> set;
  for (const auto& im : images) set.push_back(&im);
  const Tensor own = backbone_forward(model, images[3]);  // class 0
  model.prototypes[0].vector = patch_at(own, 0, 0);       // background
  model.prototypes[1].vector = patch_at(own, 1, 1);       // object
  const Tensor other = backbone_forward(model, images[0]);
  model.prototypes[2].vector = patch_at(other, 1, 1);
  model.prototypes[3].vector = patch_at(other, 1, 0);

  const int L = 3;
  EXPECT_EQ(oracle_mismatch(model, model.prototypes[0], set, L), 3);
  EXPECT_EQ(oracle_mismatch(model, model.prototypes[1], set, L), 0);
  const auto survivors = prune_prototypes(model, set, L, 1);
  std::vector<int> ids;
  for (const auto& p : survivors) ids.push_back(p.prototype_id);
  std::vector<int> expected;
  for (const auto& p : model.prototypes)
    if (oracle_mismatch(model, p, set, L) <= 1) expected.push_back(p.prototype_id);
  EXPECT_EQ(ids, expected);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), 0), 0);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), 1), 1);
}

TEST(Prune, ThresholdEqualToLNeverRemoves) {
  std::mt19937_64 rng(17);
  PrototypeNet model = initialize_model(micro_config(2, 2, 2), 6);
  const auto images = shared_background_images(rng);
  std::vector<const LabeledImage*> set;
  for (const auto& im : images) set.push_back(&im);
  EXPECT_EQ(prune_prototypes(model, set, 3, 3).size(), model.prototypes.size());
}

TEST(Prune, PureOwnClassPrototypesSurvive) {
  std::mt19937_64 rng(18);
  PrototypeNet model = initialize_model(micro_config(2, 2, 1), 7);
  const auto images = shared_background_images(rng);
  std::vector<const LabeledImage*> set;
  for (const auto& im : images) set.push_back(&im);
  model.prototypes[0].vector = patch_at(backbone_forward(model, images[3]), 1, 1);
  model.prototypes[1].vector = patch_at(backbone_forward(model, images[0]), 1, 1);
  EXPECT_EQ(prune_prototypes(model, set, 3, 0).size(), 2u);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  TempDir dir;
  std::mt19937_64 rng(19);
  PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(2, 2), 8, "ckpt");
  model.prototypes[1].source = PatchSource{"img/with space", 2, 3};
  for (double& w : model.head.weights) w = std::uniform_real_distribution<double>(-1, 1)(rng);
  save_model(model, dir / "m.ckpt");
  const PrototypeNet back = load_model(dir / "m.ckpt");
  EXPECT_EQ(back.model_id, "ckpt");
  EXPECT_EQ(back.config, model.config);
  EXPECT_EQ(back.backbone.layers(), model.backbone.layers());
  EXPECT_EQ(back.backbone.params(), model.backbone.params());
  ASSERT_EQ(back.prototypes.size(), model.prototypes.size());
  for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
    EXPECT_EQ(back.prototypes[j].vector, model.prototypes[j].vector);
    EXPECT_EQ(back.prototypes[j].class_id, model.prototypes[j].class_id);
    EXPECT_EQ(back.prototypes[j].source.has_value(), model.prototypes[j].source.has_value());
  }
  EXPECT_EQ(back.prototypes[1].source->image_id, "img/with space");
  EXPECT_EQ(back.prototypes[1].source->col, 3);
  EXPECT_EQ(back.head.weights, model.head.weights);
}

TEST(Checkpoint, RejectsForeignOrTruncatedFiles) {
  TempDir dir;
  std::ofstream(dir / "junk.ckpt") << "definitely not a checkpoint";
  EXPECT_THROW(load_model(dir / "junk.ckpt"), FormatError);
  const PrototypeNet model = initialize_model(r3p::testing::tiny_model_config(), 1);
  save_model(model, dir / "m.ckpt");
  std::filesystem::resize_file(dir / "m.ckpt", std::filesystem::file_size(dir / "m.ckpt") - 5);
  EXPECT_THROW(load_model(dir / "m.ckpt"), FormatError);
}
