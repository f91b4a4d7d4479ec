#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/image_io.hpp"
#include "r3p/tensor.hpp"

namespace r3p {

enum class Split : std::uint8_t { train, test };

inline std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw FormatError("unknown split '" + text + "'");
}

struct LabeledImage {
  std::string image_id;
  Tensor pixels;  // 3 x S x S, values in [0,1]
  int class_id = 0;
  Split split = Split::train;
  bool augmented = false;
};

// Binary foreground mask, row-major, 1 = object.
struct ObjectMask {
  int size = 0;
  std::vector<std::uint8_t> cells;

  bool inside(int y, int x) const { return cells[static_cast<std::size_t>(y) * size + x] != 0; }
  std::size_t area() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1)); }
  friend bool operator==(const ObjectMask&, const ObjectMask&) = default;
};

struct SyntheticSample {
  const LabeledImage& base;
  const ObjectMask& object_mask;
};

struct Perturbation {
  enum class Kind : std::uint8_t { rotation, shear, skew, flip };
  Kind kind = Kind::rotation;
  double magnitude = 0.0;  // degrees for rotation, factor for shear/skew; unused for flip

  friend bool operator==(const Perturbation&, const Perturbation&) = default;
};

inline std::string to_string(Perturbation::Kind kind) {
  switch (kind) {
    case Perturbation::Kind::rotation: return "rotation";
    case Perturbation::Kind::shear: return "shear";
    case Perturbation::Kind::skew: return "skew";
    case Perturbation::Kind::flip: return "flip";
  }
  return "?";
}

inline Perturbation::Kind parse_perturbation(const std::string& text) {
  if (text == "rotation") return Perturbation::Kind::rotation;
  if (text == "shear") return Perturbation::Kind::shear;
  if (text == "skew") return Perturbation::Kind::skew;
  if (text == "flip") return Perturbation::Kind::flip;
  throw FormatError("unknown perturbation '" + text + "'");
}

// Rotation +-15 degrees, shear +-0.2, skew +-0.2 and a horizontal flip.
inline std::vector<Perturbation> default_augmentation() {
  return {{Perturbation::Kind::rotation, 15.0},
          {Perturbation::Kind::shear, 0.2},
          {Perturbation::Kind::skew, 0.2},
          {Perturbation::Kind::flip, 0.0}};
}

struct DatasetManifest {
  int classes = 0;
  int image_size = 0;
  std::vector<std::string> class_names;
  std::vector<Perturbation> augmentation_spec;
  std::vector<LabeledImage> images;
  std::map<std::string, ObjectMask> masks;  // synthetic datasets only
  std::map<std::string, std::string> paths;  // image_id -> file, when loaded from disk

  std::vector<const LabeledImage*> select(Split split, bool include_augmented = true) const {
    std::vector<const LabeledImage*> out;
    for (const auto& image : images)
      if (image.split == split && (include_augmented || !image.augmented)) out.push_back(&image);
    return out;
  }
  std::vector<const LabeledImage*> train(bool include_augmented = true) const {
    return select(Split::train, include_augmented);
  }
  std::vector<const LabeledImage*> test() const { return select(Split::test); }

  const LabeledImage& image(const std::string& id) const {
    for (const auto& image : images)
      if (image.image_id == id) return image;
    throw ContractError("unknown image id '" + id + "'");
  }

  const ObjectMask* mask(const std::string& id) const {
    auto it = masks.find(id);
    return it == masks.end() ? nullptr : &it->second;
  }

  std::optional<SyntheticSample> sample(const std::string& id) const {
    const ObjectMask* m = mask(id);
    if (!m) return std::nullopt;
    return SyntheticSample{image(id), *m};
  }
};

// Checks the manifest invariants: class ids in range, unique ids, pixel range,
// and at least one train and one test image per class.
inline void validate(const DatasetManifest& manifest) {
  require<ConfigError>(manifest.classes >= 1, "manifest has no classes");
  std::vector<int> train_count(manifest.classes, 0), test_count(manifest.classes, 0);
  std::map<std::string, int> seen;
  for (const auto& image : manifest.images) {
    require<ConfigError>(image.class_id >= 0 && image.class_id < manifest.classes,
                         "image ", image.image_id, " has class ", image.class_id,
                         " outside [0, ", manifest.classes, ")");
    require<ConfigError>(seen[image.image_id]++ == 0, "duplicate image id ", image.image_id);
    require<ConfigError>(image.pixels.channels == 3 &&
                             image.pixels.height == manifest.image_size &&
                             image.pixels.width == manifest.image_size,
                         "image ", image.image_id, " is not 3 x ", manifest.image_size, " x ",
                         manifest.image_size);
    for (double v : image.pixels.values)
      require<ConfigError>(v >= 0.0 && v <= 1.0, "image ", image.image_id,
                           " has a pixel outside [0,1]");
    (image.split == Split::train ? train_count : test_count)[image.class_id]++;
  }
  for (int k = 0; k < manifest.classes; ++k)
    require<ConfigError>(train_count[k] > 0 && test_count[k] > 0, "class ", k,
                         " needs at least one train and one test image");
}

namespace synth {

enum class Shape { circle, square, triangle, cross, ring, diamond };
inline constexpr std::array kShapes{Shape::circle, Shape::square,   Shape::triangle,
                                    Shape::cross,  Shape::ring,     Shape::diamond};

inline const char* shape_name(Shape shape) {
  switch (shape) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
    case Shape::cross: return "cross";
    case Shape::ring: return "ring";
    case Shape::diamond: return "diamond";
  }
  return "?";
}

// Unit-radius shape membership in local coordinates.
inline bool contains(Shape shape, double u, double v) {
  switch (shape) {
    case Shape::circle: return u * u + v * v <= 1.0;
    case Shape::square: return std::abs(u) <= 0.82 && std::abs(v) <= 0.82;
    case Shape::triangle: {
      if (v > 0.7 || v < -1.0) return false;
      const double half_width = 0.95 * (v + 1.0) / 1.7;
      return std::abs(u) <= half_width;
    }
    case Shape::cross:
      return (std::abs(u) <= 0.34 && std::abs(v) <= 1.0) ||
             (std::abs(v) <= 0.34 && std::abs(u) <= 1.0);
    case Shape::ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case Shape::diamond: return std::abs(u) + std::abs(v) <= 1.0;
  }
  return false;
}

inline std::array<double, 3> hsv_to_rgb(double hue_deg, double sat, double val) {
  const double h = std::fmod(hue_deg, 360.0) / 60.0;
  const double c = val * sat;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = val - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& v : rgb) v += m;
  return rgb;
}

struct ClassSignature {
  Shape shape;
  std::array<double, 3> color;
  std::string name;
};

inline ClassSignature signature(int class_id, int classes) {
  const Shape shape = kShapes[class_id % kShapes.size()];
  const double hue = 360.0 * class_id / classes;
  return {shape, hsv_to_rgb(hue, 0.9, 0.95),
          concat(shape_name(shape), "_h", static_cast<int>(hue))};
}

inline double quantize(double v) { return std::clamp(std::round(v * 255.0), 0.0, 255.0) / 255.0; }

// Low-saturation texture drawn from a palette and grating bank that every
// class shares.
inline void paint_background(Tensor& image, Rng& rng) {
  const int s = image.height;
  const auto base = hsv_to_rgb(uniform(rng, 20.0, 140.0), uniform(rng, 0.1, 0.35),
                               uniform(rng, 0.35, 0.7));
  struct Wave {
    double fx, fy, phase, amplitude;
    std::array<double, 3> tint;
  };
  std::vector<Wave> waves;
  const int count = uniform_int(rng, 2, 3);
  for (int i = 0; i < count; ++i) {
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double freq = uniform(rng, 0.15, 0.6);
    waves.push_back({freq * std::cos(angle), freq * std::sin(angle),
                     uniform(rng, 0.0, 2 * std::numbers::pi), uniform(rng, 0.05, 0.15),
                     {uniform(rng, 0.6, 1.0), uniform(rng, 0.6, 1.0), uniform(rng, 0.6, 1.0)}});
  }
  std::normal_distribution<double> noise(0.0, 0.04);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      std::array<double, 3> px = base;
      for (const auto& w : waves) {
        const double t = w.amplitude * std::sin(w.fx * x + w.fy * y + w.phase);
        for (int c = 0; c < 3; ++c) px[c] += t * w.tint[c];
      }
      for (int c = 0; c < 3; ++c) image(c, y, x) = px[c] + noise(rng);
    }
}

}  // namespace synth

struct SyntheticOptions {
  int classes = 10;
  int per_class = 30;
  int image_size = 64;
  std::uint64_t seed = 0;
  double test_fraction = 1.0 / 3.0;
  double min_area = 0.08;  // object area fraction bounds, inside the 5%..60% envelope
  double max_area = 0.30;
};

// Renders one image per (class, index) with a class-specific shape and hue on
// a shared random background. Deterministic in the seed.
inline DatasetManifest generate_synthetic(const SyntheticOptions& options) {
  require<ConfigError>(options.classes >= 2, "synthetic dataset needs K >= 2, got ",
                       options.classes);
  require<ConfigError>(options.per_class >= 2, "synthetic dataset needs per_class >= 2, got ",
                       options.per_class);
  require<ConfigError>(options.image_size >= 32, "synthetic dataset needs S >= 32, got ",
                       options.image_size);
  require<ConfigError>(options.test_fraction > 0.0 && options.test_fraction < 1.0,
                       "test fraction must lie in (0,1)");
  require<ConfigError>(options.min_area >= 0.05 && options.max_area <= 0.6 &&
                           options.min_area < options.max_area,
                       "object area bounds must satisfy 0.05 <= min < max <= 0.6");

  const int s = options.image_size;
  DatasetManifest manifest;
  manifest.classes = options.classes;
  manifest.image_size = s;
  const int test_per_class = std::clamp(
      static_cast<int>(std::lround(options.per_class * options.test_fraction)), 1,
      options.per_class - 1);

  for (int k = 0; k < options.classes; ++k) {
    const auto sig = synth::signature(k, options.classes);
    manifest.class_names.push_back(sig.name);
    for (int i = 0; i < options.per_class; ++i) {
      Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(k) * 100003 + i));
      LabeledImage image;
      image.image_id = concat("c", k < 10 ? "0" : "", k, "_i", i < 10 ? "00" : (i < 100 ? "0" : ""), i);
      image.class_id = k;
      image.split = i < options.per_class - test_per_class ? Split::train : Split::test;
      image.pixels = Tensor(3, s, s);
      synth::paint_background(image.pixels, rng);

      ObjectMask mask{s, std::vector<std::uint8_t>(static_cast<std::size_t>(s) * s, 0)};
      // Rejection-sample placement until the area lands inside the bounds.
      for (int attempt = 0;; ++attempt) {
        require(attempt < 1000, "could not place object");
        const double target = uniform(rng, options.min_area, options.max_area);
        const double radius = std::sqrt(target * s * s / std::numbers::pi) * uniform(rng, 0.95, 1.15);
        const double margin = radius + 1.0;
        if (2 * margin >= s) continue;
        const double cx = uniform(rng, margin, s - margin);
        const double cy = uniform(rng, margin, s - margin);
        const double angle = uniform(rng, -0.35, 0.35);
        const double ca = std::cos(angle), sa = std::sin(angle);
        std::fill(mask.cells.begin(), mask.cells.end(), 0);
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x) {
            const double dx = (x + 0.5 - cx) / radius, dy = (y + 0.5 - cy) / radius;
            const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
            if (synth::contains(sig.shape, u, v)) mask.cells[static_cast<std::size_t>(y) * s + x] = 1;
          }
        const double area = static_cast<double>(mask.area()) / (s * s);
        if (area >= 0.05 && area <= 0.6) break;
      }
      const double shade = uniform(rng, 0.85, 1.0);
      std::normal_distribution<double> noise(0.0, 0.02);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          if (mask.inside(y, x))
            for (int c = 0; c < 3; ++c) image.pixels(c, y, x) = sig.color[c] * shade + noise(rng);
      for (double& v : image.pixels.values) v = synth::quantize(v);
      manifest.masks.emplace(image.image_id, std::move(mask));
      manifest.images.push_back(std::move(image));
    }
  }
  return manifest;
}

namespace detail {

// Inverse-maps every output pixel through a 3x3 homography (output -> source,
// pixel-center coordinates relative to the image center).
inline Tensor warp(const Tensor& src, const std::array<double, 9>& inv) {
  const int s = src.height;
  const double center = s / 2.0;
  Tensor out(src.channels, s, s);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double u = x + 0.5 - center, v = y + 0.5 - center;
      const double w = inv[6] * u + inv[7] * v + inv[8];
      double sx = (inv[0] * u + inv[1] * v + inv[2]) / w + center - 0.5;
      double sy = (inv[3] * u + inv[4] * v + inv[5]) / w + center - 0.5;
      sx = std::clamp(sx, 0.0, s - 1.0);
      sy = std::clamp(sy, 0.0, s - 1.0);
      const int x0 = std::min(static_cast<int>(sx), s - 2 < 0 ? 0 : s - 2);
      const int y0 = std::min(static_cast<int>(sy), s - 2 < 0 ? 0 : s - 2);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src(c, y0, x0) * (1 - fx) + src(c, y0, x0 + 1) * fx;
        const double bottom = src(c, y0 + 1, x0) * (1 - fx) + src(c, y0 + 1, x0 + 1) * fx;
        out(c, y, x) = top * (1 - fy) + bottom * fy;
      }
    }
  return out;
}

inline ObjectMask warp_mask(const ObjectMask& mask, const std::array<double, 9>& inv) {
  const int s = mask.size;
  const double center = s / 2.0;
  ObjectMask out{s, std::vector<std::uint8_t>(mask.cells.size(), 0)};
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double u = x + 0.5 - center, v = y + 0.5 - center;
      const double w = inv[6] * u + inv[7] * v + inv[8];
      const int sx = static_cast<int>(std::floor((inv[0] * u + inv[1] * v + inv[2]) / w + center));
      const int sy = static_cast<int>(std::floor((inv[3] * u + inv[4] * v + inv[5]) / w + center));
      if (sx >= 0 && sx < s && sy >= 0 && sy < s && mask.inside(sy, sx))
        out.cells[static_cast<std::size_t>(y) * s + x] = 1;
    }
  return out;
}

// Output->source mapping for one perturbation with a sampled amount.
inline std::array<double, 9> inverse_transform(Perturbation::Kind kind, double amount, int size) {
  switch (kind) {
    case Perturbation::Kind::rotation: {
      const double a = amount * std::numbers::pi / 180.0;
      return {std::cos(a), std::sin(a), 0, -std::sin(a), std::cos(a), 0, 0, 0, 1};
    }
    case Perturbation::Kind::shear:
      return {1, -amount, 0, 0, 1, 0, 0, 0, 1};
    case Perturbation::Kind::skew:
      // Keystone: horizontal scale varies linearly with the row.
      return {1, 0, 0, 0, 1, 0, 0, amount / size, 1};
    case Perturbation::Kind::flip:
      return {-1, 0, 0, 0, 1, 0, 0, 0, 1};
  }
  return {1, 0, 0, 0, 1, 0, 0, 0, 1};
}

}  // namespace detail

// Appends one perturbed copy of every original train image per entry in the
// augmentation spec. Test images are never touched.
inline DatasetManifest augment(const DatasetManifest& manifest, std::uint64_t seed) {
  validate(manifest);
  DatasetManifest out = manifest;
  if (manifest.augmentation_spec.empty()) return out;
  std::size_t index = 0;
  for (const auto& image : manifest.images) {
    if (image.split != Split::train || image.augmented) continue;
    Rng rng(derive_seed(seed, index++));
    for (std::size_t p = 0; p < manifest.augmentation_spec.size(); ++p) {
      const auto& pert = manifest.augmentation_spec[p];
      const double amount =
          pert.kind == Perturbation::Kind::flip ? 0.0 : uniform(rng, -pert.magnitude, pert.magnitude);
      const auto inv = detail::inverse_transform(pert.kind, amount, manifest.image_size);
      LabeledImage copy;
      copy.image_id = concat(image.image_id, "~", to_string(pert.kind), p);
      copy.class_id = image.class_id;
      copy.split = Split::train;
      copy.augmented = true;
      copy.pixels = detail::warp(image.pixels, inv);
      for (double& v : copy.pixels.values) v = synth::quantize(v);
      if (const ObjectMask* m = manifest.mask(image.image_id))
        out.masks.emplace(copy.image_id, detail::warp_mask(*m, inv));
      out.images.push_back(std::move(copy));
    }
  }
  return out;
}

// One sub-folder per class under root, sorted by name; files sorted by name.
// The last round(n * test_fraction) files of each class (at least one) form
// the test split.
inline DatasetManifest load_folder_dataset(const std::filesystem::path& root, int image_size,
                                           double test_fraction = 0.5) {
  namespace fs = std::filesystem;
  require<IngestionError>(fs::is_directory(root), "dataset root not found: ", root.string());
  require<ConfigError>(image_size >= 8, "image size must be at least 8");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  require<IngestionError>(!class_dirs.empty(), "no class folders under ", root.string());

  DatasetManifest manifest;
  manifest.classes = static_cast<int>(class_dirs.size());
  manifest.image_size = image_size;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    const std::string name = class_dirs[k].filename().string();
    manifest.class_names.push_back(name);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[k]))
      if (entry.is_regular_file() && entry.path().filename().string().front() != '.')
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    require<IngestionError>(!files.empty(), "class folder is empty: ", class_dirs[k].string());
    require<IngestionError>(files.size() >= 2, "class folder needs at least 2 images: ",
                            class_dirs[k].string());
    const int n = static_cast<int>(files.size());
    const int n_test = std::clamp(static_cast<int>(std::lround(n * test_fraction)), 1, n - 1);
    for (int i = 0; i < n; ++i) {
      LabeledImage image;
      image.image_id = concat(name, "/", files[i].filename().string());
      image.class_id = static_cast<int>(k);
      image.split = i < n - n_test ? Split::train : Split::test;
      image.pixels = read_image(files[i], image_size);
      manifest.paths[image.image_id] = files[i].string();
      manifest.images.push_back(std::move(image));
    }
  }
  return manifest;
}

inline std::string file_stem_for(const std::string& image_id) {
  std::string stem = image_id;
  for (char& ch : stem)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.'))
      ch = '_';
  return stem;
}

// Writes images (and masks) as PNG plus manifest.json under dir. Pixels are
// multiples of 1/255, so reloading is lossless.
inline void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  if (!manifest.masks.empty()) fs::create_directories(dir / "masks");
  nlohmann::json doc;
  doc["format"] = "r3p-manifest";
  doc["version"] = 1;
  doc["classes"] = manifest.classes;
  doc["image_size"] = manifest.image_size;
  doc["class_names"] = manifest.class_names;
  doc["augmentation"] = nlohmann::json::array();
  for (const auto& p : manifest.augmentation_spec)
    doc["augmentation"].push_back({{"kind", to_string(p.kind)}, {"magnitude", p.magnitude}});
  doc["images"] = nlohmann::json::array();
  for (const auto& image : manifest.images) {
    const std::string stem = file_stem_for(image.image_id);
    const std::string rel = "images/" + stem + ".png";
    write_png(dir / rel, to_bgr(image.pixels));
    nlohmann::json entry{{"id", image.image_id},
                         {"path", rel},
                         {"class", image.class_id},
                         {"split", to_string(image.split)},
                         {"augmented", image.augmented}};
    if (const ObjectMask* m = manifest.mask(image.image_id)) {
      cv::Mat mat(m->size, m->size, CV_8UC1);
      for (int y = 0; y < m->size; ++y)
        for (int x = 0; x < m->size; ++x) mat.at<std::uint8_t>(y, x) = m->inside(y, x) ? 255 : 0;
      const std::string mask_rel = "masks/" + stem + ".png";
      write_png(dir / mask_rel, mat);
      entry["mask"] = mask_rel;
    }
    doc["images"].push_back(std::move(entry));
  }
  std::ofstream out(dir / "manifest.json");
  out << doc.dump(1) << '\n';
  require<FormatError>(static_cast<bool>(out), "cannot write manifest under ", dir.string());
}

inline DatasetManifest load_dataset(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  require<IngestionError>(static_cast<bool>(in), "manifest not found: ", manifest_path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(concat("malformed manifest ", manifest_path.string(), ": ", e.what()));
  }
  const fs::path dir = manifest_path.parent_path();
  DatasetManifest manifest;
  manifest.classes = doc.at("classes").get<int>();
  manifest.image_size = doc.at("image_size").get<int>();
  manifest.class_names = doc.value("class_names", std::vector<std::string>{});
  for (const auto& p : doc.value("augmentation", nlohmann::json::array()))
    manifest.augmentation_spec.push_back(
        {parse_perturbation(p.at("kind").get<std::string>()), p.at("magnitude").get<double>()});
  for (const auto& entry : doc.at("images")) {
    LabeledImage image;
    image.image_id = entry.at("id").get<std::string>();
    image.class_id = entry.at("class").get<int>();
    image.split = parse_split(entry.at("split").get<std::string>());
    image.augmented = entry.value("augmented", false);
    fs::path file = entry.at("path").get<std::string>();
    if (file.is_relative()) file = dir / file;
    image.pixels = read_image(file, manifest.image_size);
    manifest.paths[image.image_id] = file.string();
    if (entry.contains("mask")) {
      const fs::path mask_file = dir / entry.at("mask").get<std::string>();
      cv::Mat mat = cv::imread(mask_file.string(), cv::IMREAD_GRAYSCALE);
      require<IngestionError>(!mat.empty() && mat.rows == manifest.image_size &&
                                  mat.cols == manifest.image_size,
                              "unreadable mask file: ", mask_file.string());
      ObjectMask mask{manifest.image_size, {}};
      mask.cells.reserve(static_cast<std::size_t>(mat.rows) * mat.cols);
      for (int y = 0; y < mat.rows; ++y)
        for (int x = 0; x < mat.cols; ++x) mask.cells.push_back(mat.at<std::uint8_t>(y, x) > 127);
      manifest.masks.emplace(image.image_id, std::move(mask));
    }
    manifest.images.push_back(std::move(image));
  }
  validate(manifest);
  return manifest;
}

}  // namespace r3p
