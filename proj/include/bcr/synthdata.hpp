#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bcr/geometry.hpp"
#include "bcr/tensor.hpp"
#include "json.hpp"

// Procedural X-ray-style scene generator. Each scene composites a handful of
// translucent parts over a noisy bright background by multiplying per-pixel
// transmittances, so overlapping parts darken each other instead of occluding.
// Ground truth is the tight axis-aligned hull of each part's own pixel mask,
// taken before blur.

namespace bcr {

static_assert(std::endian::native == std::endian::little,
              "image format assumes a little-endian host");

inline constexpr double kPi = 3.14159265358979323846;

struct SynthConfig {
  int height = 128;
  int width = 128;
  int num_classes = 4;  // 0 bar, 1 angle bracket, 2 ellipse, 3 ring
  int min_items = 1;
  int max_items = 4;
  double min_opacity = 0.25;
  double max_opacity = 0.6;
  double min_scale = 0.7;
  double max_scale = 1.3;
  double rot_min = -kPi / 2;  // rotations drawn from [rot_min, rot_max)
  double rot_max = kPi / 2;
  double clutter_density = 0.5;  // max faint blobs per scene = round(4 * density)
  uint64_t seed = 7;

  void validate() const {
    if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
      throw std::invalid_argument("scene extent must be a positive multiple of 32");
    }
    if (num_classes < 1 || num_classes > 4) {
      throw std::invalid_argument("num_classes must be in [1,4]");
    }
    if (min_items < 0 || max_items < min_items) {
      throw std::invalid_argument("bad item count range");
    }
    if (!(min_opacity > 0.0) || max_opacity < min_opacity || max_opacity > 1.0) {
      throw std::invalid_argument("opacity range must satisfy 0 < lo <= hi <= 1");
    }
    if (!(min_scale > 0.0) || max_scale < min_scale) {
      throw std::invalid_argument("bad scale range");
    }
    if (!(rot_max > rot_min)) throw std::invalid_argument("bad rotation range");
    if (clutter_density < 0.0) throw std::invalid_argument("clutter density must be >= 0");
  }
};

struct SynthItem {
  int label = 0;
  RotatedBox pose;  // local frame the part was drawn in
  Box hull;         // tight axis-aligned box of the part's mask
};

struct SynthScene {
  Tensor<float> image;  // [H,W,1], values in [0,1]
  std::vector<SynthItem> items;
};

namespace detail {

// Shape membership in the part's local frame. u is the world x axis rotated by
// theta, v the world y axis, matching the rotated-window convention used for
// feature extraction: world = center + [[cos,-sin],[sin,cos]] * (u, v).
struct ShapeSpec {
  int label = 0;
  double w = 0, h = 0;   // full extents along u and v
  double arm = 0;        // bracket arm thickness
  double inner = 0;      // ring inner radius as a fraction of the outer
};

inline bool shape_contains(const ShapeSpec& s, double u, double v) {
  const double a = s.w / 2, b = s.h / 2;
  switch (s.label) {
    case 0:  // bar: long axis along v
      return std::abs(u) <= a && std::abs(v) <= b;
    case 1: {  // bracket: left column plus bottom row of the enclosing rect
      if (std::abs(u) > a || std::abs(v) > b) return false;
      return u <= -a + s.arm || v <= -b + s.arm;
    }
    case 2: {  // ellipse
      const double e = (u * u) / (a * a) + (v * v) / (b * b);
      return e <= 1.0;
    }
    case 3: {  // elliptical annulus
      const double e = (u * u) / (a * a) + (v * v) / (b * b);
      return e <= 1.0 && e >= s.inner * s.inner;
    }
    default:
      throw std::logic_error("unknown shape label");
  }
}

struct PlacedShape {
  ShapeSpec spec;
  double cx = 0, cy = 0, theta = 0;
  std::vector<int64_t> pixels;  // flat i*W+j indices of mask pixels
  Box hull;
  bool inside = false;  // mask nonempty and clear of the border ring
};

// Rasterize at pixel centers over the shape's bounding disc.
inline PlacedShape rasterize(const ShapeSpec& spec, double cx, double cy, double theta,
                             int h, int w) {
  PlacedShape out;
  out.spec = spec;
  out.cx = cx;
  out.cy = cy;
  out.theta = theta;
  const double r = std::hypot(spec.w / 2, spec.h / 2) + 1.5;
  const int i0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  const int i1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
  const int j0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  const int j1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
  const double c = std::cos(theta), s = std::sin(theta);
  int min_i = h, max_i = -1, min_j = w, max_j = -1;
  for (int i = i0; i <= i1; ++i) {
    for (int j = j0; j <= j1; ++j) {
      const double dx = (j + 0.5) - cx;
      const double dy = (i + 0.5) - cy;
      const double u = c * dx + s * dy;
      const double v = -s * dx + c * dy;
      if (!shape_contains(spec, u, v)) continue;
      out.pixels.push_back(static_cast<int64_t>(i) * w + j);
      min_i = std::min(min_i, i);
      max_i = std::max(max_i, i);
      min_j = std::min(min_j, j);
      max_j = std::max(max_j, j);
    }
  }
  if (!out.pixels.empty()) {
    out.hull = Box{static_cast<double>(min_j), static_cast<double>(min_i),
                   static_cast<double>(max_j + 1), static_cast<double>(max_i + 1)};
    out.inside = min_i >= 1 && min_j >= 1 && max_i <= h - 2 && max_j <= w - 2;
  }
  return out;
}

inline ShapeSpec draw_shape(int label, double scale, Rng& rng) {
  ShapeSpec s;
  s.label = label;
  switch (label) {
    case 0: {
      const double len = rng.uniform(24.0, 44.0) * scale;
      const double aspect = rng.uniform(3.0, 5.0);
      s.h = len;
      s.w = len / aspect;
      break;
    }
    case 1: {
      s.w = 2.0 * rng.uniform(12.0, 20.0) * scale;
      s.h = 2.0 * rng.uniform(12.0, 20.0) * scale;
      s.arm = rng.uniform(0.3, 0.45) * std::min(s.w, s.h);
      break;
    }
    case 2: {
      const double ru = rng.uniform(9.0, 15.0) * scale;
      s.w = 2.0 * ru;
      s.h = 2.0 * ru * rng.uniform(1.3, 2.0);
      break;
    }
    case 3: {
      const double ru = rng.uniform(10.0, 16.0) * scale;
      s.w = 2.0 * ru;
      s.h = 2.0 * ru * rng.uniform(1.0, 1.5);
      s.inner = rng.uniform(0.5, 0.7);
      break;
    }
    default:
      throw std::logic_error("unknown shape label");
  }
  return s;
}

// Separable 7-tap Gaussian, sigma 1. Taps falling outside the image are
// dropped and the remaining weights renormalized, so the result stays a
// convex combination of inputs.
inline void gaussian_blur(std::vector<double>& img, int h, int w) {
  double k[7];
  for (int d = -3; d <= 3; ++d) k[d + 3] = std::exp(-0.5 * d * d);
  std::vector<double> tmp(img.size());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double acc = 0, wsum = 0;
      for (int d = -3; d <= 3; ++d) {
        const int jj = j + d;
        if (jj < 0 || jj >= w) continue;
        acc += k[d + 3] * img[static_cast<size_t>(i) * w + jj];
        wsum += k[d + 3];
      }
      tmp[static_cast<size_t>(i) * w + j] = acc / wsum;
    }
  }
  for (int j = 0; j < w; ++j) {
    for (int i = 0; i < h; ++i) {
      double acc = 0, wsum = 0;
      for (int d = -3; d <= 3; ++d) {
        const int ii = i + d;
        if (ii < 0 || ii >= h) continue;
        acc += k[d + 3] * tmp[static_cast<size_t>(ii) * w + j];
        wsum += k[d + 3];
      }
      img[static_cast<size_t>(i) * w + j] = acc / wsum;
    }
  }
}

}  // namespace detail

/// Renders scene `index` of the dataset described by `cfg`. Pure function of
/// (cfg, index): repeated calls produce bit-identical images and records.
inline SynthScene render_scene(const SynthConfig& cfg, int64_t index) {
  cfg.validate();
  const int h = cfg.height, w = cfg.width;
  Rng rng = purpose_rng(cfg.seed, rngkey::kScene, static_cast<uint64_t>(index));

  // Bright background with mild attenuation noise; blur smooths it below.
  std::vector<double> trans(static_cast<size_t>(h) * w);
  for (auto& t : trans) t = 1.0 - 0.04 * rng.uniform();

  SynthScene scene;
  const int n_items = rng.uniform_int(cfg.min_items, cfg.max_items);
  for (int n = 0; n < n_items; ++n) {
    const int label = rng.uniform_int(0, cfg.num_classes - 1);
    const double alpha = rng.uniform(cfg.min_opacity, cfg.max_opacity);
    detail::PlacedShape placed;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double scale = rng.uniform(cfg.min_scale, cfg.max_scale);
      const double theta = rng.uniform(cfg.rot_min, cfg.rot_max);
      const detail::ShapeSpec spec = detail::draw_shape(label, scale, rng);
      const double cx = rng.uniform(2.0, w - 2.0);
      const double cy = rng.uniform(2.0, h - 2.0);
      placed = detail::rasterize(spec, cx, cy, theta, h, w);
      if (placed.inside) break;
      placed.inside = false;
    }
    if (!placed.inside) continue;  // did not fit after 100 tries: skip the item
    for (int64_t p : placed.pixels) trans[static_cast<size_t>(p)] *= 1.0 - alpha;
    SynthItem item;
    item.label = label;
    item.pose = RotatedBox{placed.cx, placed.cy, placed.spec.w, placed.spec.h, placed.theta};
    item.hull = placed.hull;
    scene.items.push_back(item);
  }

  // Faint elliptical clutter, free to clip the borders; never annotated.
  const int max_blobs = static_cast<int>(std::lround(4.0 * cfg.clutter_density));
  const int n_blobs = max_blobs > 0 ? rng.uniform_int(0, max_blobs) : 0;
  for (int n = 0; n < n_blobs; ++n) {
    detail::ShapeSpec spec;
    spec.label = 2;
    const double ru = rng.uniform(8.0, 20.0);
    spec.w = 2.0 * ru;
    spec.h = 2.0 * ru * rng.uniform(1.0, 2.0);
    const double alpha = rng.uniform(0.05, 0.15);
    const double theta = rng.uniform(cfg.rot_min, cfg.rot_max);
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const detail::PlacedShape placed = detail::rasterize(spec, cx, cy, theta, h, w);
    for (int64_t p : placed.pixels) trans[static_cast<size_t>(p)] *= 1.0 - alpha;
  }

  detail::gaussian_blur(trans, h, w);

  scene.image = Tensor<float>({h, w, 1});
  for (int64_t p = 0; p < scene.image.numel(); ++p) {
    scene.image[p] = static_cast<float>(std::clamp(trans[static_cast<size_t>(p)], 0.0, 1.0));
  }
  return scene;
}

// Raw image container: magic "XRAY", u32 height, width, channels, then
// float32 data in row-major HWC order, all little-endian.

inline void write_xray(const std::string& path, const Tensor<float>& img) {
  if (img.shape().size() != 3) throw std::invalid_argument("image must be HWC");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write("XRAY", 4);
  const uint32_t dims[3] = {static_cast<uint32_t>(img.shape()[0]),
                            static_cast<uint32_t>(img.shape()[1]),
                            static_cast<uint32_t>(img.shape()[2])};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(img.data()),
            static_cast<std::streamsize>(img.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("short write: " + path);
}

inline Tensor<float> read_xray(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "XRAY", 4) != 0) {
    throw std::runtime_error("bad image magic: " + path);
  }
  uint32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw std::runtime_error("truncated image header: " + path);
  constexpr uint32_t kMaxExtent = 1u << 20;
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || dims[0] > kMaxExtent ||
      dims[1] > kMaxExtent || dims[2] > kMaxExtent) {
    throw std::runtime_error("implausible image dims: " + path);
  }
  Tensor<float> img({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                     static_cast<int>(dims[2])});
  in.read(reinterpret_cast<char*>(img.data()),
          static_cast<std::streamsize>(img.numel() * sizeof(float)));
  if (!in) throw std::runtime_error("truncated image data: " + path);
  return img;
}

struct DatasetRecord {
  std::string path;  // resolved, loadable as-is
  std::vector<Box> boxes;
  std::vector<int> labels;
};

struct DatasetManifest {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> test;
};

/// Renders n_train + n_test scenes into out_dir plus an annotations.jsonl
/// listing every image. Train and test draw from disjoint scene indices.
/// Re-running over an existing directory rewrites identical bytes.
inline DatasetManifest generate_dataset(const SynthConfig& cfg, int n_train, int n_test,
                                        const std::string& out_dir) {
  cfg.validate();
  if (n_train < 0 || n_test < 0) throw std::invalid_argument("negative dataset size");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  DatasetManifest manifest;
  std::ofstream ann(fs::path(out_dir) / "annotations.jsonl", std::ios::trunc);
  if (!ann) throw std::runtime_error("cannot write annotations in " + out_dir);

  auto emit = [&](const char* split, int count, int64_t base,
                  std::vector<DatasetRecord>* sink) {
    for (int i = 0; i < count; ++i) {
      const SynthScene scene = render_scene(cfg, base + i);
      char name[32];
      std::snprintf(name, sizeof(name), "%s_%05d.xray", split, i);
      write_xray((fs::path(out_dir) / name).string(), scene.image);
      nlohmann::json boxes = nlohmann::json::array();
      DatasetRecord rec;
      rec.path = (fs::path(out_dir) / name).string();
      for (const SynthItem& item : scene.items) {
        boxes.push_back({item.hull.x1, item.hull.y1, item.hull.x2, item.hull.y2,
                         item.label});
        rec.boxes.push_back(item.hull);
        rec.labels.push_back(item.label);
      }
      nlohmann::json line;
      line["path"] = name;
      line["boxes"] = boxes;
      ann << line.dump() << "\n";
      sink->push_back(std::move(rec));
    }
  };
  emit("train", n_train, 0, &manifest.train);
  emit("test", n_test, n_train, &manifest.test);
  if (!ann) throw std::runtime_error("short annotation write in " + out_dir);
  return manifest;
}

/// Reads an annotations.jsonl written by generate_dataset. Image paths are
/// resolved relative to the file's directory.
inline std::vector<DatasetRecord> load_annotations(const std::string& jsonl_path) {
  std::ifstream in(jsonl_path);
  if (!in) throw std::runtime_error("cannot open: " + jsonl_path);
  const std::filesystem::path dir = std::filesystem::path(jsonl_path).parent_path();
  std::vector<DatasetRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(jsonl_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    DatasetRecord rec;
    rec.path = (dir / j.at("path").get<std::string>()).string();
    for (const auto& b : j.at("boxes")) {
      if (b.size() != 5) {
        throw std::runtime_error(jsonl_path + ":" + std::to_string(line_no) +
                                 ": box must be [x1,y1,x2,y2,label]");
      }
      rec.boxes.push_back(Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                              b[3].get<double>()});
      rec.labels.push_back(b[4].get<int>());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace bcr
