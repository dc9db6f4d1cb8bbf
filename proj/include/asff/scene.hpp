#pragma once

// Synthetic multi-scale detection scenes: filled rectangles and ellipses of
// three size classes on a noisy background.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asff/box.hpp"
#include "asff/errors.hpp"
#include "asff/tensor.hpp"

namespace asff {

enum class SizeClass { small = 0, medium = 1, large = 2 };

inline const char* to_string(SizeClass c) {
  switch (c) {
    case SizeClass::small: return "small";
    case SizeClass::medium: return "medium";
    case SizeClass::large: return "large";
  }
  return "?";
}

struct SceneObject {
  Box box;
  SizeClass size_class = SizeClass::small;
};

struct SceneConfig {
  std::size_t image_size = 64;
  std::size_t max_objects = 4;
  // Probability of small / medium / large.
  std::array<double, 3> mixture{1.0 / 3, 1.0 / 3, 1.0 / 3};
  // Side length ranges [lo, hi) per class, in pixels.
  std::array<std::array<std::size_t, 2>, 3> side_range{{{4, 8}, {8, 16}, {16, 32}}};
  double noise_std = 0.05;
  std::size_t max_retries = 50;
};

struct SyntheticScene {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;  // row-major, single channel
  std::vector<SceneObject> objects;
  std::size_t dropped = 0;  // objects that could not be placed

  std::vector<Box> boxes() const {
    std::vector<Box> out;
    for (const auto& o : objects) out.push_back(o.box);
    return out;
  }
};

inline void validate(const SceneConfig& cfg) {
  if (cfg.max_objects < 1) throw ConfigurationError("scene.max_objects must be >= 1");
  double total = 0;
  for (double p : cfg.mixture) {
    if (p < 0) throw ConfigurationError("scene.mixture entries must be >= 0");
    total += p;
  }
  if (total <= 0) throw ConfigurationError("scene.mixture must have positive mass");
  for (const auto& r : cfg.side_range) {
    if (r[0] < 1 || r[1] <= r[0]) throw ConfigurationError("scene.side_range must satisfy 1 <= lo < hi");
    if (r[1] - 1 > cfg.image_size) throw ConfigurationError("scene.side_range exceeds image_size");
  }
}

// Deterministic for a fixed seed and config.
inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  SyntheticScene scene;
  scene.width = cfg.image_size;
  scene.height = cfg.image_size;

  std::uniform_int_distribution<std::size_t> count_dist(1, cfg.max_objects);
  std::discrete_distribution<int> class_dist(cfg.mixture.begin(), cfg.mixture.end());
  const std::size_t count = count_dist(rng);
  std::vector<SizeClass> classes(count);
  for (auto& c : classes) c = static_cast<SizeClass>(class_dist(rng));
  // Largest first so big objects are not starved of room.
  std::stable_sort(classes.begin(), classes.end(),
                   [](SizeClass a, SizeClass b) { return static_cast<int>(a) > static_cast<int>(b); });

  struct Blob {
    Box box;
    bool ellipse;
    float intensity;
  };
  std::vector<Blob> blobs;
  std::uniform_real_distribution<double> intensity_dist(0.5, 1.0);
  std::bernoulli_distribution shape_dist(0.5);
  for (SizeClass cls : classes) {
    const auto& range = cfg.side_range[static_cast<int>(cls)];
    std::uniform_int_distribution<std::size_t> side(range[0], range[1] - 1);
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      const std::size_t w = side(rng);
      const std::size_t h = side(rng);
      std::uniform_int_distribution<std::size_t> px(0, cfg.image_size - w);
      std::uniform_int_distribution<std::size_t> py(0, cfg.image_size - h);
      const double x1 = static_cast<double>(px(rng));
      const double y1 = static_cast<double>(py(rng));
      const Box box{x1, y1, x1 + static_cast<double>(w), y1 + static_cast<double>(h)};
      // One pixel of clearance between objects.
      const Box grown{box.x1 - 1, box.y1 - 1, box.x2 + 1, box.y2 + 1};
      const bool clash = std::any_of(blobs.begin(), blobs.end(), [&](const Blob& b) {
        return grown.x1 < b.box.x2 && grown.x2 > b.box.x1 && grown.y1 < b.box.y2 && grown.y2 > b.box.y1;
      });
      if (clash) continue;
      blobs.push_back({box, shape_dist(rng), static_cast<float>(intensity_dist(rng))});
      scene.objects.push_back({box, cls});
      placed = true;
    }
    if (!placed) ++scene.dropped;
  }

  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  scene.pixels.assign(cfg.image_size * cfg.image_size, 0.0f);
  for (std::size_t y = 0; y < scene.height; ++y) {
    for (std::size_t x = 0; x < scene.width; ++x) {
      float v = static_cast<float>(noise(rng));
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      for (const Blob& b : blobs) {
        const Box& r = b.box;
        if (px < r.x1 || px > r.x2 || py < r.y1 || py > r.y2) continue;
        bool inside = true;
        if (b.ellipse) {
          const double dx = (px - r.cx()) / (0.5 * r.width());
          const double dy = (py - r.cy()) / (0.5 * r.height());
          inside = dx * dx + dy * dy <= 1.0;
        }
        if (inside) v += b.intensity;
      }
      scene.pixels[y * scene.width + x] = v;
    }
  }
  return scene;
}

// Bilinear resample to a new square size, boxes scaled alongside. Used by
// random-shape training.
inline SyntheticScene rescale_scene(const SyntheticScene& in, std::size_t size) {
  SyntheticScene out;
  out.width = size;
  out.height = size;
  out.pixels.resize(size * size);
  const double sx = static_cast<double>(in.width) / static_cast<double>(size);
  const double sy = static_cast<double>(in.height) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, in.height - 1);
    fy -= static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, in.width - 1);
      fx -= static_cast<double>(x0);
      const auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(in.pixels[yy * in.width + xx]); };
      const double top = (1 - fx) * at(y0, x0) + fx * at(y0, x1);
      const double bot = (1 - fx) * at(y1, x0) + fx * at(y1, x1);
      out.pixels[y * size + x] = static_cast<float>((1 - fy) * top + fy * bot);
    }
  }
  for (const auto& o : in.objects) {
    out.objects.push_back({Box{o.box.x1 / sx, o.box.y1 / sy, o.box.x2 / sx, o.box.y2 / sy}, o.size_class});
  }
  return out;
}

// Stacks scene images into an (N, 1, H, W) batch.
template <typename T>
Tensor<T> make_image_batch(std::span<const SyntheticScene> scenes) {
  if (scenes.empty()) throw InvalidArgument("make_image_batch: no scenes");
  const std::size_t h = scenes[0].height;
  const std::size_t w = scenes[0].width;
  Tensor<T> batch(Shape{scenes.size(), 1, h, w});
  for (std::size_t n = 0; n < scenes.size(); ++n) {
    if (scenes[n].height != h || scenes[n].width != w) {
      throw DimensionError("make_image_batch", "H", "scenes in one batch must share a size");
    }
    for (std::size_t i = 0; i < h * w; ++i) batch[n * h * w + i] = static_cast<T>(scenes[n].pixels[i]);
  }
  return batch;
}

// Binary P5 PGM, maxval 255.
inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      std::span<const std::uint8_t> bytes) {
  if (bytes.size() != width * height) throw InvalidArgument("write_pgm: byte count does not match size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_pgm: cannot open " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write_pgm: write failed for " + path.string());
}

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bytes;
};

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_pgm: cannot open " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  PgmImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || magic != "P5" || maxval != 255) throw FormatError("read_pgm: not a P5/255 file: " + path.string());
  in.get();
  img.bytes.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.bytes.size())) {
    throw FormatError("read_pgm: truncated pixel data in " + path.string());
  }
  return img;
}

// Maps [0, 1] linearly onto [0, 255], rounding to nearest and clamping.
inline std::uint8_t unit_to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Scene image as PGM (pixel values clamped to [0, 1]) plus a JSON sidecar of
// ground-truth boxes.
inline void dump_scene(const SyntheticScene& scene, std::uint64_t seed, const std::filesystem::path& pgm_path,
                       const std::filesystem::path& json_path) {
  std::vector<std::uint8_t> bytes(scene.pixels.size());
  std::transform(scene.pixels.begin(), scene.pixels.end(), bytes.begin(),
                 [](float v) { return unit_to_byte(v); });
  write_pgm(pgm_path, scene.width, scene.height, bytes);
  nlohmann::json j;
  j["seed"] = seed;
  j["width"] = scene.width;
  j["height"] = scene.height;
  j["dropped"] = scene.dropped;
  j["objects"] = nlohmann::json::array();
  for (const auto& o : scene.objects) {
    j["objects"].push_back({{"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}, {"size_class", to_string(o.size_class)}});
  }
  std::ofstream out(json_path);
  if (!out) throw Error("dump_scene: cannot open " + json_path.string());
  out << j.dump(2) << "\n";
}

}  // namespace asff
