#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "memscan/image_io.hpp"
#include "memscan/rng.hpp"
#include "memscan/tensor.hpp"

namespace memscan {

// ---- blur kernels ----

enum class KernelKind { kGaussian, kLinearMotion };

inline std::string kernel_kind_name(KernelKind k) {
  return k == KernelKind::kGaussian ? "gaussian" : "linear_motion";
}

inline KernelKind kernel_kind_from_name(const std::string& s) {
  if (s == "gaussian") return KernelKind::kGaussian;
  if (s == "linear_motion") return KernelKind::kLinearMotion;
  throw ConfigError("unknown kernel kind '" + s + "'");
}

struct BlurSpec {
  KernelKind kind = KernelKind::kGaussian;
  int kernel_size = 9;  // odd
  double sigma = 2.0;   // gaussian width
  double length = 9.0;  // motion extent in pixels
  double angle_deg = 0.0;
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError("BlurSpec: kernel_size must be a positive odd integer, got " +
                        std::to_string(kernel_size));
    if (kind == KernelKind::kGaussian && !(sigma > 0))
      throw ConfigError("BlurSpec: sigma must be positive");
    if (kind == KernelKind::kLinearMotion) {
      if (!(length >= 1)) throw ConfigError("BlurSpec: motion length must be >= 1");
      if (length > kernel_size)
        throw ConfigError("BlurSpec: motion length " + std::to_string(length) +
                          " exceeds kernel_size " + std::to_string(kernel_size));
    }
    if (noise_std < 0) throw ConfigError("BlurSpec: noise_std must be >= 0");
  }
};

// Normalized {k,k} kernel summing to 1.
inline Tensor<double> blur_kernel(const BlurSpec& spec) {
  spec.validate();
  int k = spec.kernel_size;
  int c = (k - 1) / 2;
  Tensor<double> ker({k, k});
  if (spec.kind == KernelKind::kGaussian) {
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        double dy = i - c, dx = j - c;
        ker.at(i, j) = std::exp(-(dx * dx + dy * dy) / (2.0 * spec.sigma * spec.sigma));
      }
  } else {
    // Bilinear splat of evenly spaced samples along a centered segment.
    double rad = spec.angle_deg * std::numbers::pi / 180.0;
    double cs = std::cos(rad), sn = std::sin(rad);
    double half = (spec.length - 1.0) / 2.0;
    int samples = std::max(1, static_cast<int>(std::ceil(spec.length * 8)));
    for (int s = 0; s < samples; ++s) {
      double t = samples == 1 ? 0.0 : -half + (2.0 * half) * s / (samples - 1);
      double x = c + t * cs, y = c + t * sn;
      int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
      double fx = x - x0, fy = y - y0;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int q = 0; q < 4; ++q)
        if (wts[q] > 0 && xs[q] >= 0 && xs[q] < k && ys[q] >= 0 && ys[q] < k)
          ker.at(ys[q], xs[q]) += wts[q];
    }
  }
  double sum = 0;
  for (std::int64_t i = 0; i < ker.numel(); ++i) sum += ker[i];
  if (!(sum > 0)) throw NumericError("blur_kernel: degenerate kernel");
  for (std::int64_t i = 0; i < ker.numel(); ++i) ker[i] /= sum;
  return ker;
}

// ---- blur-pair synthesis ----

// Per-channel correlation with edge replication, keeping the image shape.
inline Tensor<double> convolve_replicate(const Tensor<double>& img, const Tensor<double>& ker) {
  if (img.shape().ndim() != 3) throw ConfigError("convolve_replicate: need {C,H,W}");
  if (ker.shape().ndim() != 2 || ker.shape()[0] != ker.shape()[1])
    throw ConfigError("convolve_replicate: need a square kernel");
  int ch = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  int k = ker.shape()[0], c = (k - 1) / 2;
  Tensor<double> out(img.shape());
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int cc = 0; cc < ch; ++cc) {
    const double* src = img.data() + cc * plane;
    double* dst = out.data() + cc * plane;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = 0; i < k; ++i) {
          int sy = std::clamp(y + i - c, 0, h - 1);
          for (int j = 0; j < k; ++j) {
            int sx = std::clamp(x + j - c, 0, w - 1);
            acc += ker.at(i, j) * src[static_cast<std::int64_t>(sy) * w + sx];
          }
        }
        dst[static_cast<std::int64_t>(y) * w + x] = acc;
      }
  }
  return out;
}

struct ImagePair {
  Tensor<double> sharp, blurred;
};

// blurred = clip(sharp (*) kernel + gaussian noise, [0,1]); the noise stream
// is drawn from the spec's own seed so pairs regenerate bit-identically.
inline ImagePair make_blur_pair(const Tensor<double>& sharp, const BlurSpec& spec) {
  spec.validate();
  if (sharp.shape().ndim() != 3 || sharp.shape()[0] != 3)
    throw ConfigError("make_blur_pair: need a {3,H,W} image");
  Tensor<double> blurred = convolve_replicate(sharp, blur_kernel(spec));
  if (spec.noise_std > 0) {
    Rng noise(spec.seed);
    for (std::int64_t i = 0; i < blurred.numel(); ++i)
      blurred[i] += noise.normal() * spec.noise_std;
  }
  for (std::int64_t i = 0; i < blurred.numel(); ++i)
    blurred[i] = std::clamp(blurred[i], 0.0, 1.0);
  return {sharp, blurred};
}

// ---- procedural sharp images ----

// Piecewise-structured synthetic scene: a bilinear color wash, filled
// rectangles, and thin strokes. Values stay in [0,1]; content is a pure
// function of the generator state.
inline Tensor<double> make_sharp_image(int h, int w, Rng& rng) {
  if (h < 4 || w < 4) throw ConfigError("make_sharp_image: image too small");
  Tensor<double> img({3, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int c = 0; c < 3; ++c) {
    double c00 = rng.uniform(), c01 = rng.uniform(), c10 = rng.uniform(), c11 = rng.uniform();
    double* dst = img.data() + c * plane;
    for (int y = 0; y < h; ++y) {
      double fy = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
      for (int x = 0; x < w; ++x) {
        double fx = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
        dst[static_cast<std::int64_t>(y) * w + x] = (1 - fy) * ((1 - fx) * c00 + fx * c01) +
                                                    fy * ((1 - fx) * c10 + fx * c11);
      }
    }
  }
  auto paint = [&](int y, int x, const double col[3]) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    for (int c = 0; c < 3; ++c) img[c * plane + static_cast<std::int64_t>(y) * w + x] = col[c];
  };
  int nrect = 3 + static_cast<int>(rng.below(6));
  for (int r = 0; r < nrect; ++r) {
    double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
    int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
    int rh = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(h / 2)));
    int rw = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(w / 2)));
    for (int y = y0; y < std::min(h, y0 + rh); ++y)
      for (int x = x0; x < std::min(w, x0 + rw); ++x) paint(y, x, col);
  }
  int nstroke = 2 + static_cast<int>(rng.below(5));
  for (int s = 0; s < nstroke; ++s) {
    double col[3];
    double shade = rng.coin() ? rng.uniform(0.0, 0.2) : rng.uniform(0.8, 1.0);
    for (double& c : col) c = std::clamp(shade + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    double y = rng.uniform(0.0, h - 1.0), x = rng.uniform(0.0, w - 1.0);
    double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double len = rng.uniform(0.2, 0.6) * std::min(h, w);
    int thick = 1 + static_cast<int>(rng.below(2));
    int steps = std::max(2, static_cast<int>(len * 2));
    for (int i = 0; i < steps; ++i) {
      int py = static_cast<int>(std::lround(y + std::sin(ang) * (len * i / (steps - 1))));
      int px = static_cast<int>(std::lround(x + std::cos(ang) * (len * i / (steps - 1))));
      for (int dy = 0; dy < thick; ++dy)
        for (int dx = 0; dx < thick; ++dx) paint(py + dy, px + dx, col);
    }
  }
  return img;
}

// ---- patches and augmentation ----

// Aligned crop of both images at one uniformly drawn offset (row drawn first,
// then column).
inline ImagePair sample_patch(const ImagePair& pair, int size, Rng& rng) {
  check_same_shape(pair.sharp, pair.blurred, "sample_patch pair");
  if (pair.sharp.shape().ndim() != 3) throw ConfigError("sample_patch: need {C,H,W}");
  int ch = pair.sharp.shape()[0], h = pair.sharp.shape()[1], w = pair.sharp.shape()[2];
  if (size < 1 || size > h || size > w)
    throw ConfigError("sample_patch: patch size " + std::to_string(size) +
                      " does not fit in " + std::to_string(h) + "x" + std::to_string(w));
  int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - size + 1)));
  int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - size + 1)));
  ImagePair out{Tensor<double>({ch, size, size}), Tensor<double>({ch, size, size})};
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t oplane = static_cast<std::int64_t>(size) * size;
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        std::int64_t src = c * plane + static_cast<std::int64_t>(oy + y) * w + (ox + x);
        std::int64_t dst = c * oplane + static_cast<std::int64_t>(y) * size + x;
        out.sharp[dst] = pair.sharp[src];
        out.blurred[dst] = pair.blurred[src];
      }
  return out;
}

inline Tensor<double> flip_horizontal(const Tensor<double>& img) {
  if (img.shape().ndim() != 3) throw ConfigError("flip_horizontal: need {C,H,W}");
  int ch = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  Tensor<double> out(img.shape());
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::int64_t>(c) * h + y) * w + (w - 1 - x)] =
            img[(static_cast<std::int64_t>(c) * h + y) * w + x];
  return out;
}

inline Tensor<double> flip_vertical(const Tensor<double>& img) {
  if (img.shape().ndim() != 3) throw ConfigError("flip_vertical: need {C,H,W}");
  int ch = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  Tensor<double> out(img.shape());
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::int64_t>(c) * h + (h - 1 - y)) * w + x] =
            img[(static_cast<std::int64_t>(c) * h + y) * w + x];
  return out;
}

// Each axis flips with probability 1/2, the same decision applied to both
// images (horizontal drawn first, then vertical).
inline ImagePair augment_flip(ImagePair pair, Rng& rng) {
  bool fh = rng.coin();
  bool fv = rng.coin();
  if (fh) {
    pair.sharp = flip_horizontal(pair.sharp);
    pair.blurred = flip_horizontal(pair.blurred);
  }
  if (fv) {
    pair.sharp = flip_vertical(pair.sharp);
    pair.blurred = flip_vertical(pair.blurred);
  }
  return pair;
}

// ---- dataset manifest ----

struct ManifestRecord {
  std::string sharp_path;    // relative to the manifest's directory
  std::string blurred_path;  // likewise
  std::string split;         // "train" or "val"
  BlurSpec spec;
};

inline nlohmann::json blur_spec_to_json(const BlurSpec& s) {
  return {{"kind", kernel_kind_name(s.kind)}, {"kernel_size", s.kernel_size},
          {"sigma", s.sigma},                 {"length", s.length},
          {"angle_deg", s.angle_deg},         {"noise_std", s.noise_std},
          {"seed", s.seed}};
}

inline BlurSpec blur_spec_from_json(const nlohmann::json& j) {
  BlurSpec s;
  s.kind = kernel_kind_from_name(j.at("kind").get<std::string>());
  s.kernel_size = j.at("kernel_size").get<int>();
  s.sigma = j.at("sigma").get<double>();
  s.length = j.at("length").get<double>();
  s.angle_deg = j.at("angle_deg").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("write_manifest: cannot open " + path);
  for (const ManifestRecord& r : records) {
    nlohmann::json j = {{"sharp", r.sharp_path},
                        {"blurred", r.blurred_path},
                        {"split", r.split},
                        {"spec", blur_spec_to_json(r.spec)}};
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("write_manifest: write to " + path + " failed");
}

inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_manifest: cannot open " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      ManifestRecord r;
      r.sharp_path = j.at("sharp").get<std::string>();
      r.blurred_path = j.at("blurred").get<std::string>();
      r.split = j.at("split").get<std::string>();
      r.spec = blur_spec_from_json(j.at("spec"));
      if (r.split != "train" && r.split != "val")
        throw ConfigError("load_manifest: unknown split '" + r.split + "' at line " +
                          std::to_string(lineno));
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("load_manifest: " + path + " line " + std::to_string(lineno) + ": " +
                    e.what());
    }
  }
  return out;
}

// Loads a record's image pair (paths resolved against base_dir) and checks the
// two images decode to the same dimensions.
inline ImagePair load_pair(const std::string& base_dir, const ManifestRecord& r) {
  namespace fs = std::filesystem;
  ImagePair p;
  p.sharp = load_image((fs::path(base_dir) / r.sharp_path).string());
  p.blurred = load_image((fs::path(base_dir) / r.blurred_path).string());
  if (!(p.sharp.shape() == p.blurred.shape()))
    throw ConfigError("load_pair: dimension mismatch between " + r.sharp_path + " " +
                      p.sharp.shape().str() + " and " + r.blurred_path + " " +
                      p.blurred.shape().str());
  return p;
}

// ---- dataset generation ----

struct GenConfig {
  std::string out_dir;
  int n_train = 32;
  int n_val = 8;
  int height = 96;
  int width = 96;
  double noise_std = 0.005;
  std::uint64_t seed = 7;
  std::string format = "png";  // or "ppm"

  void validate() const {
    if (out_dir.empty()) throw ConfigError("GenConfig: out_dir required");
    if (n_train < 1 || n_val < 0) throw ConfigError("GenConfig: need n_train >= 1, n_val >= 0");
    if (height < 16 || width < 16) throw ConfigError("GenConfig: images must be at least 16x16");
    if (noise_std < 0) throw ConfigError("GenConfig: noise_std must be >= 0");
    if (format != "png" && format != "ppm")
      throw ConfigError("GenConfig: format must be png or ppm");
  }
};

// Writes sharp/blurred image files plus manifest.jsonl into out_dir and
// returns the records. Pure function of the seed: kernels alternate between
// defocus-style (sigma in [1,3], 9x9) and streak-style (length in [5,15],
// 17x17, any direction) draws.
inline std::vector<ManifestRecord> generate_dataset(const GenConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  Rng master(cfg.seed);
  std::vector<ManifestRecord> records;
  auto emit = [&](const std::string& split, int index) {
    Rng img_rng(master.raw());
    std::uint64_t noise_seed = master.raw();
    BlurSpec spec;
    spec.noise_std = cfg.noise_std;
    spec.seed = noise_seed;
    if (master.coin()) {
      spec.kind = KernelKind::kGaussian;
      spec.kernel_size = 9;
      spec.sigma = master.uniform(1.0, 3.0);
    } else {
      spec.kind = KernelKind::kLinearMotion;
      spec.kernel_size = 17;
      spec.length = master.uniform(5.0, 15.0);
      spec.angle_deg = master.uniform(0.0, 180.0);
    }
    Tensor<double> sharp = make_sharp_image(cfg.height, cfg.width, img_rng);
    ImagePair pair = make_blur_pair(sharp, spec);
    char num[16];
    std::snprintf(num, sizeof num, "%04d", index);
    ManifestRecord r;
    r.sharp_path = split + "_" + num + "_sharp." + cfg.format;
    r.blurred_path = split + "_" + num + "_blur." + cfg.format;
    r.split = split;
    r.spec = spec;
    save_image((fs::path(cfg.out_dir) / r.sharp_path).string(), pair.sharp);
    save_image((fs::path(cfg.out_dir) / r.blurred_path).string(), pair.blurred);
    records.push_back(std::move(r));
  };
  for (int i = 0; i < cfg.n_train; ++i) emit("train", i);
  for (int i = 0; i < cfg.n_val; ++i) emit("val", i);
  write_manifest((fs::path(cfg.out_dir) / "manifest.jsonl").string(), records);
  return records;
}

}  // namespace memscan
