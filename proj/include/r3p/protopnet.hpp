#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/nn.hpp"
#include "r3p/serialize.hpp"
#include "r3p/tensor.hpp"

namespace r3p {

// Where a prototype was projected from: one cell of one image's latent grid.
struct PatchSource {
  std::string image_id;
  int row = 0;
  int col = 0;
  friend bool operator==(const PatchSource&, const PatchSource&) = default;
};

struct Prototype {
  int prototype_id = 0;
  int class_id = 0;
  std::vector<double> vector;  // 1 x 1 x D
  std::optional<PatchSource> source;
  friend bool operator==(const Prototype&, const Prototype&) = default;
};

// Final linear layer, K x m row-major.
struct HeadParams {
  int classes = 0;
  int prototypes = 0;
  std::vector<double> weights;

  double& at(int k, int j) { return weights[static_cast<std::size_t>(k) * prototypes + j]; }
  double at(int k, int j) const { return weights[static_cast<std::size_t>(k) * prototypes + j]; }
  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

struct ModelConfig {
  int image_size = 64;
  int classes = 10;
  int prototypes_per_class = 10;
  int depth = 64;           // D
  double eps = 1e-4;        // similarity epsilon, in (0,1)
  std::vector<int> widths{16, 32, 64};
  int latent_size = 8;      // pooling stops once the grid reaches this side
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& config) {
  require<ConfigError>(config.image_size >= 8, "image size must be at least 8");
  require<ConfigError>(config.classes >= 1, "model needs at least one class");
  require<ConfigError>(config.prototypes_per_class >= 1, "m_k must be at least 1");
  require<ConfigError>(config.depth >= 8, "latent depth D must be at least 8");
  require<ConfigError>(config.eps > 0.0 && config.eps < 1.0, "eps must lie in (0,1)");
  require<ConfigError>(!config.widths.empty(), "backbone needs at least one stage");
  require<ConfigError>(config.latent_size >= 1, "latent size must be positive");
}

// Conv stages with 2x2 pooling until the grid side reaches latent_size, then
// two 1x1 layers ending in a sigmoid so latent patches live in [0,1]^D.
inline ConvStack make_backbone(const ModelConfig& config) {
  std::vector<LayerSpec> layers;
  int side = config.image_size;
  for (int width : config.widths) {
    layers.push_back(LayerSpec::conv(width, 3, Activation::relu));
    if (side > config.latent_size && side % 2 == 0) {
      layers.push_back(LayerSpec::pool());
      side /= 2;
    }
  }
  while (side > config.latent_size && side % 2 == 0) {
    layers.push_back(LayerSpec::pool());
    side /= 2;
  }
  layers.push_back(LayerSpec::conv(config.depth, 1, Activation::relu));
  layers.push_back(LayerSpec::conv(config.depth, 1, Activation::sigmoid));
  return ConvStack(3, std::move(layers));
}

struct PrototypeNet {
  std::string model_id = "model";
  ModelConfig config;
  ConvStack backbone;
  std::vector<Prototype> prototypes;
  HeadParams head;

  int prototype_count() const { return static_cast<int>(prototypes.size()); }
  std::pair<int, int> latent_shape() const {
    return backbone.output_size(config.image_size, config.image_size);
  }
};

inline HeadParams class_connection_head(int classes, const std::vector<Prototype>& prototypes,
                                        double own = 1.0, double other = -0.5) {
  HeadParams head{classes, static_cast<int>(prototypes.size()), {}};
  head.weights.assign(static_cast<std::size_t>(classes) * prototypes.size(), other);
  for (int j = 0; j < head.prototypes; ++j) head.at(prototypes[j].class_id, j) = own;
  return head;
}

// Random backbone, prototypes uniform in [0,1]^D (m_k per class, grouped by
// class), head +1 on own class and -0.5 elsewhere.
inline PrototypeNet initialize_model(const ModelConfig& config, std::uint64_t seed,
                                     std::string model_id = "base") {
  validate(config);
  PrototypeNet model;
  model.model_id = std::move(model_id);
  model.config = config;
  model.backbone = make_backbone(config);
  Rng rng(derive_seed(seed, 11));
  model.backbone.initialize(rng);
  Rng proto_rng(derive_seed(seed, 12));
  for (int k = 0; k < config.classes; ++k)
    for (int i = 0; i < config.prototypes_per_class; ++i) {
      Prototype p;
      p.prototype_id = static_cast<int>(model.prototypes.size());
      p.class_id = k;
      p.vector.resize(config.depth);
      for (double& v : p.vector) v = uniform(proto_rng, 0.0, 1.0);
      model.prototypes.push_back(std::move(p));
    }
  model.head = class_connection_head(config.classes, model.prototypes);
  return model;
}

// ---------------------------------------------------------------------------
// Similarity

inline double similarity_from_distance(double squared_distance, double eps) {
  return std::log((squared_distance + 1.0) / (squared_distance + eps));
}

// d similarity / d squared_distance
inline double similarity_slope(double squared_distance, double eps) {
  return 1.0 / (squared_distance + 1.0) - 1.0 / (squared_distance + eps);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double sum = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    sum += d * d;
  }
  return sum;
}

inline double similarity(std::span<const double> patch, const Prototype& proto, double eps) {
  require(eps > 0.0 && eps < 1.0, "similarity eps must lie in (0,1), got ", eps);
  require(patch.size() == proto.vector.size(), "patch depth ", patch.size(),
          " differs from prototype depth ", proto.vector.size());
  require(all_finite(patch) && all_finite(proto.vector), "similarity inputs must be finite");
  return similarity_from_distance(squared_distance(patch, proto.vector), eps);
}

// ---------------------------------------------------------------------------
// Latent grids (D x H x W tensors)

inline std::vector<double> patch_at(const Tensor& grid, int row, int col) {
  std::vector<double> out(grid.channels);
  for (int d = 0; d < grid.channels; ++d) out[d] = grid(d, row, col);
  return out;
}

inline double patch_distance(const Tensor& grid, int cell, std::span<const double> vector) {
  const std::size_t plane = grid.plane();
  double sum = 0.0;
  for (int d = 0; d < grid.channels; ++d) {
    const double diff = grid.values[d * plane + cell] - vector[d];
    sum += diff * diff;
  }
  return sum;
}

struct NearestPatch {
  double squared_distance = std::numeric_limits<double>::infinity();
  int cell = -1;  // row * W + col
};

// Closest cell of the grid to the vector; ties keep the first cell in
// row-major order.
inline NearestPatch nearest_patch(const Tensor& grid, std::span<const double> vector) {
  NearestPatch best;
  const int cells = static_cast<int>(grid.plane());
  for (int cell = 0; cell < cells; ++cell) {
    const double d = patch_distance(grid, cell, vector);
    if (d < best.squared_distance) best = {d, cell};
  }
  return best;
}

inline Tensor backbone_forward(const ConvStack& backbone, const LabeledImage& image,
                               int image_size, StackTrace* trace = nullptr) {
  require(image.pixels.channels == 3 && image.pixels.height == image_size &&
              image.pixels.width == image_size,
          "image ", image.image_id, " is ", image.pixels.channels, "x", image.pixels.height,
          "x", image.pixels.width, ", model expects 3x", image_size, "x", image_size);
  Tensor grid = backbone.forward(image.pixels, trace);
  return grid;
}

inline Tensor backbone_forward(const PrototypeNet& model, const LabeledImage& image,
                               StackTrace* trace = nullptr) {
  return backbone_forward(model.backbone, image, model.config.image_size, trace);
}

inline std::vector<Tensor> compute_latents(const PrototypeNet& model,
                                           const std::vector<const LabeledImage*>& images) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto* image : images) out.push_back(backbone_forward(model, *image));
  return out;
}

struct SimilarityVector {
  std::vector<double> scores;          // g_j, one per prototype
  std::vector<double> min_distances;   // squared distance at the max-similarity cell
  std::vector<int> argmin_cells;
};

inline SimilarityVector prototype_layer_forward(const Tensor& grid,
                                                const std::vector<Prototype>& prototypes,
                                                double eps) {
  require(eps > 0.0 && eps < 1.0, "similarity eps must lie in (0,1)");
  SimilarityVector out;
  out.scores.reserve(prototypes.size());
  for (const auto& p : prototypes) {
    require(static_cast<int>(p.vector.size()) == grid.channels, "prototype ", p.prototype_id,
            " has depth ", p.vector.size(), ", latent depth is ", grid.channels);
    const NearestPatch nearest = nearest_patch(grid, p.vector);
    out.min_distances.push_back(nearest.squared_distance);
    out.argmin_cells.push_back(nearest.cell);
    out.scores.push_back(similarity_from_distance(nearest.squared_distance, eps));
  }
  return out;
}

inline std::vector<double> head_forward(const HeadParams& head, std::span<const double> sims) {
  require(static_cast<int>(sims.size()) == head.prototypes, "head expects ", head.prototypes,
          " similarities, got ", sims.size());
  std::vector<double> logits(head.classes, 0.0);
  for (int k = 0; k < head.classes; ++k)
    for (int j = 0; j < head.prototypes; ++j) logits[k] += head.at(k, j) * sims[j];
  return logits;
}

struct ModelOutput {
  std::vector<double> logits;
  SimilarityVector sims;
  Tensor grid;
};

inline ModelOutput model_forward(const PrototypeNet& model, const LabeledImage& image,
                                 StackTrace* trace = nullptr) {
  require(model.head.prototypes == model.prototype_count(), "head width ",
          model.head.prototypes, " differs from prototype count ", model.prototype_count());
  ModelOutput out;
  out.grid = backbone_forward(model, image, trace);
  out.sims = prototype_layer_forward(out.grid, model.prototypes, model.config.eps);
  out.logits = head_forward(model.head, out.sims.scores);
  return out;
}

// Lowest class id wins ties.
inline int argmax(std::span<const double> values) {
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

// ---------------------------------------------------------------------------
// Activation maps

struct ActivationMap {
  Grid raw;        // H_l x W_l similarity
  Grid upsampled;  // S x S, bilinear
  Grid display;    // S x S normalized to [0,1]
};

namespace detail {

struct Tap {
  int lo = 0;
  int hi = 0;
  double weight = 0;  // share of hi
};

// Cell i is anchored at the output pixel holding its center,
// floor((i + 0.5) * out / in), and sampled exactly there. Pixels between two
// anchors interpolate linearly; pixels outside the outer anchors clamp.
inline std::vector<Tap> upsample_taps(int in, int out) {
  std::vector<int> anchor(in);
  for (int i = 0; i < in; ++i)
    anchor[i] = static_cast<int>((2 * i + 1) * static_cast<long>(out) / (2 * static_cast<long>(in)));
  std::vector<Tap> taps(out);
  for (int p = 0; p < out; ++p) {
    if (p <= anchor.front()) {
      taps[p] = {0, 0, 0.0};
    } else if (p >= anchor.back()) {
      taps[p] = {in - 1, in - 1, 0.0};
    } else {
      int i = 0;
      while (anchor[i + 1] <= p) ++i;
      const int span = anchor[i + 1] - anchor[i];
      taps[p] = {i, i + 1, static_cast<double>(p - anchor[i]) / span};
    }
  }
  return taps;
}

}  // namespace detail

// Bilinear resampling whose sample points include every cell center, so the
// largest raw value reappears inside its own upsampled block and nowhere is
// exceeded.
inline Grid bilinear_upsample(const Grid& raw, int out_height, int out_width) {
  require(raw.height >= 1 && raw.width >= 1 && out_height >= raw.height &&
              out_width >= raw.width,
          "upsampling needs a non-empty grid no larger than the output");
  Grid out(out_height, out_width);
  const auto ty = detail::upsample_taps(raw.height, out_height);
  const auto tx = detail::upsample_taps(raw.width, out_width);
  for (int y = 0; y < out_height; ++y) {
    const auto& a = ty[y];
    for (int x = 0; x < out_width; ++x) {
      const auto& b = tx[x];
      const double top = raw(a.lo, b.lo) * (1 - b.weight) + raw(a.lo, b.hi) * b.weight;
      const double bottom = raw(a.hi, b.lo) * (1 - b.weight) + raw(a.hi, b.hi) * b.weight;
      out(y, x) = top * (1 - a.weight) + bottom * a.weight;
    }
  }
  return out;
}

inline Grid normalize_display(const Grid& upsampled) {
  const auto [lo, hi] = std::minmax_element(upsampled.values.begin(), upsampled.values.end());
  Grid out(upsampled.height, upsampled.width, 0.0);
  if (!(*hi > *lo)) return out;
  const double range = *hi - *lo;
  for (std::size_t k = 0; k < out.values.size(); ++k)
    out.values[k] = (upsampled.values[k] - *lo) / range;
  return out;
}

inline ActivationMap activation_map_from_grid(const Tensor& grid, std::span<const double> vector,
                                              double eps, int image_size) {
  ActivationMap map;
  map.raw = Grid(grid.height, grid.width);
  for (int cell = 0; cell < static_cast<int>(grid.plane()); ++cell)
    map.raw.values[cell] = similarity_from_distance(patch_distance(grid, cell, vector), eps);
  map.upsampled = bilinear_upsample(map.raw, image_size, image_size);
  map.display = normalize_display(map.upsampled);
  return map;
}

inline ActivationMap activation_map(const PrototypeNet& model, const Prototype& proto,
                                    const LabeledImage& image) {
  const Tensor grid = backbone_forward(model, image);
  require(static_cast<int>(proto.vector.size()) == grid.channels, "prototype depth mismatch");
  return activation_map_from_grid(grid, proto.vector, model.config.eps, model.config.image_size);
}

// ---------------------------------------------------------------------------
// Projection and pruning

// Replaces every prototype by its nearest latent patch among training images of
// its own class. Ties keep the earliest image, then the earliest cell.
inline std::vector<Prototype> push_prototypes(const PrototypeNet& model,
                                              const std::vector<const LabeledImage*>& train_set) {
  std::vector<std::vector<std::size_t>> by_class(model.config.classes);
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const int k = train_set[i]->class_id;
    require(k >= 0 && k < model.config.classes, "image class out of range");
    by_class[k].push_back(i);
  }
  for (const auto& p : model.prototypes)
    require(!by_class[p.class_id].empty(), "cannot push prototype ", p.prototype_id,
            ": class ", p.class_id, " has no training images");

  std::vector<Prototype> out = model.prototypes;
  std::vector<NearestPatch> best(out.size());
  std::vector<std::size_t> best_image(out.size(), 0);
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const Tensor grid = backbone_forward(model, *train_set[i]);
    for (std::size_t j = 0; j < out.size(); ++j) {
      if (out[j].class_id != train_set[i]->class_id) continue;
      const NearestPatch nearest = nearest_patch(grid, model.prototypes[j].vector);
      if (nearest.squared_distance < best[j].squared_distance) {
        best[j] = nearest;
        best_image[j] = i;
        const int w = grid.width;
        out[j].vector = patch_at(grid, nearest.cell / w, nearest.cell % w);
        out[j].source = PatchSource{train_set[i]->image_id, nearest.cell / w, nearest.cell % w};
      }
    }
  }
  return out;
}

struct ImageDistance {
  double squared_distance;
  std::size_t image;  // index into the image list
};

// Nearest patch distance of the vector to each image, sorted ascending (ties by
// image order).
inline std::vector<ImageDistance> nearest_images(std::span<const double> vector,
                                                 const std::vector<Tensor>& latents) {
  std::vector<ImageDistance> out;
  out.reserve(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i)
    out.push_back({nearest_patch(latents[i], vector).squared_distance, i});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.squared_distance < b.squared_distance;
  });
  return out;
}

// Number of other-class images among the L images whose nearest patch is
// closest to the prototype.
inline int top_l_mismatch(const Prototype& proto, const std::vector<Tensor>& latents,
                          const std::vector<const LabeledImage*>& images, int L) {
  require(L >= 1, "L must be at least 1");
  require(latents.size() == images.size(), "latent/image count mismatch");
  require(static_cast<int>(images.size()) >= L, "need at least L=", L,
          " training images, have ", images.size());
  const auto ranked = nearest_images(proto.vector, latents);
  int mismatches = 0;
  for (int l = 0; l < L; ++l)
    if (images[ranked[l].image]->class_id != proto.class_id) ++mismatches;
  return mismatches;
}

// Drops prototypes whose Top-L nearest training images include more than
// `threshold` images from other classes.
inline std::vector<Prototype> prune_prototypes(const PrototypeNet& model,
                                               const std::vector<const LabeledImage*>& train_set,
                                               int L, int threshold) {
  require(L >= 1, "L must be at least 1");
  const auto latents = compute_latents(model, train_set);
  std::vector<Prototype> survivors;
  for (const auto& p : model.prototypes)
    if (top_l_mismatch(p, latents, train_set, L) <= threshold) survivors.push_back(p);
  return survivors;
}

// Keeps the listed prototypes (by id) and the matching head columns.
inline PrototypeNet restrict_prototypes(const PrototypeNet& model,
                                        const std::vector<Prototype>& keep) {
  PrototypeNet out = model;
  out.prototypes.clear();
  std::vector<int> columns;
  for (const auto& p : keep)
    for (int j = 0; j < model.prototype_count(); ++j)
      if (model.prototypes[j].prototype_id == p.prototype_id) {
        out.prototypes.push_back(model.prototypes[j]);
        columns.push_back(j);
      }
  out.head = HeadParams{model.head.classes, static_cast<int>(columns.size()), {}};
  out.head.weights.resize(static_cast<std::size_t>(out.head.classes) * columns.size());
  for (int k = 0; k < out.head.classes; ++k)
    for (std::size_t c = 0; c < columns.size(); ++c)
      out.head.at(k, static_cast<int>(c)) = model.head.at(k, columns[c]);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "R3PNET" magic, format version, then config, backbone,
// prototypes and head. Doubles are stored bit-exactly.

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline void save_model(const PrototypeNet& model, const std::filesystem::path& path) {
  BinaryWriter out(path);
  write_magic(out, "R3PNET", kModelFormatVersion);
  out.write(model.model_id);
  const auto& c = model.config;
  out.write<std::int32_t>(c.image_size);
  out.write<std::int32_t>(c.classes);
  out.write<std::int32_t>(c.prototypes_per_class);
  out.write<std::int32_t>(c.depth);
  out.write<double>(c.eps);
  out.write<std::int32_t>(c.latent_size);
  out.write<std::uint32_t>(static_cast<std::uint32_t>(c.widths.size()));
  for (int w : c.widths) out.write<std::int32_t>(w);
  out.write(model.backbone);
  out.write<std::uint32_t>(static_cast<std::uint32_t>(model.prototypes.size()));
  for (const auto& p : model.prototypes) {
    out.write<std::int32_t>(p.prototype_id);
    out.write<std::int32_t>(p.class_id);
    out.write(p.vector);
    out.write<std::uint8_t>(p.source.has_value());
    if (p.source) {
      out.write(p.source->image_id);
      out.write<std::int32_t>(p.source->row);
      out.write<std::int32_t>(p.source->col);
    }
  }
  out.write<std::int32_t>(model.head.classes);
  out.write<std::int32_t>(model.head.prototypes);
  out.write(model.head.weights);
  out.finish();
}

inline PrototypeNet load_model(const std::filesystem::path& path) {
  BinaryReader in(path);
  in.expect_magic("R3PNET", kModelFormatVersion);
  PrototypeNet model;
  model.model_id = in.read_string();
  auto& c = model.config;
  c.image_size = in.read<std::int32_t>();
  c.classes = in.read<std::int32_t>();
  c.prototypes_per_class = in.read<std::int32_t>();
  c.depth = in.read<std::int32_t>();
  c.eps = in.read<double>();
  c.latent_size = in.read<std::int32_t>();
  const auto widths = in.read<std::uint32_t>();
  require<FormatError>(widths < 64, "corrupt backbone width count in ", path.string());
  c.widths.resize(widths);
  for (auto& w : c.widths) w = in.read<std::int32_t>();
  model.backbone = in.read_stack();
  const auto count = in.read<std::uint32_t>();
  require<FormatError>(count < (1u << 20), "corrupt prototype count in ", path.string());
  for (std::uint32_t j = 0; j < count; ++j) {
    Prototype p;
    p.prototype_id = in.read<std::int32_t>();
    p.class_id = in.read<std::int32_t>();
    p.vector = in.read_doubles();
    if (in.read<std::uint8_t>()) {
      PatchSource s;
      s.image_id = in.read_string();
      s.row = in.read<std::int32_t>();
      s.col = in.read<std::int32_t>();
      p.source = std::move(s);
    }
    model.prototypes.push_back(std::move(p));
  }
  model.head.classes = in.read<std::int32_t>();
  model.head.prototypes = in.read<std::int32_t>();
  model.head.weights = in.read_doubles();
  in.expect_end();
  require<FormatError>(model.head.weights.size() ==
                           static_cast<std::size_t>(model.head.classes) * model.head.prototypes,
                       "head shape mismatch in ", path.string());
  return model;
}

}  // namespace r3p
