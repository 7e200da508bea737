// Synthetic phantom generation, 16-bit PGM I/O, dataset manifests.
//
// A phantom mimics a breast slice: a bright half-ellipse anchored on the
// left image edge over a dark background, with smooth value-noise texture.
// Tumor phantoms add a brighter ellipse whose tight bounding box is the
// ground-truth annotation.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "augdet/checkpoint.hpp"  // IoError, file helpers
#include "augdet/geometry.hpp"
#include "augdet/rng.hpp"
#include "augdet/tensor.hpp"

namespace augdet {

struct ImageSample {
  std::string id;
  Tensor pixels;  // (1,H,W), values in [0,1]
  std::vector<BBox> boxes;
  std::string split;  // train|val|test

  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

struct PhantomConfig {
  int height = 64;
  int width = 64;
  bool tumor = false;
  double tumor_radius_min = 4.0;
  double tumor_radius_max = 8.0;
  double contrast_min = 0.18;
  double contrast_max = 0.32;
  double noise_amplitude = 0.02;
  double tumor_margin = 2.0;  // clearance between tumor and outline
  std::uint64_t seed = 1;
};

namespace detail {

// Smooth value noise: a coarse grid of uniforms, bilinearly interpolated.
inline std::vector<double> value_noise(int h, int w, double amplitude,
                                       Rng& rng) {
  const int gh = 9, gw = 9;
  std::vector<double> grid(std::size_t(gh) * gw);
  for (auto& g : grid) g = rng.uniform(-amplitude, amplitude);
  std::vector<double> out(std::size_t(h) * w);
  for (int r = 0; r < h; ++r) {
    const double gy = static_cast<double>(r) / h * (gh - 1);
    const int y0 = static_cast<int>(gy);
    const int y1 = std::min(y0 + 1, gh - 1);
    const double fy = gy - y0;
    for (int c = 0; c < w; ++c) {
      const double gx = static_cast<double>(c) / w * (gw - 1);
      const int x0 = static_cast<int>(gx);
      const int x1 = std::min(x0 + 1, gw - 1);
      const double fx = gx - x0;
      const double top = grid[std::size_t(y0) * gw + x0] * (1 - fx) +
                         grid[std::size_t(y0) * gw + x1] * fx;
      const double bot = grid[std::size_t(y1) * gw + x0] * (1 - fx) +
                         grid[std::size_t(y1) * gw + x1] * fx;
      out[std::size_t(r) * w + c] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

struct BreastOutline {
  double cy, ax, ay;  // center row, x semi-axis (from left edge), y semi-axis

  // squared normalized radius of pixel center (r+0.5, c+0.5)
  double rho2(int r, int c) const {
    const double dx = (c + 0.5) / ax;
    const double dy = (r + 0.5 - cy) / ay;
    return dx * dx + dy * dy;
  }
  bool inside(int r, int c) const { return rho2(r, c) <= 1.0; }
};

inline BreastOutline outline_for(int h, int w) {
  return BreastOutline{h / 2.0, 0.82 * w, 0.42 * h};
}

}  // namespace detail

// Deterministic in config.seed: same seed, bitwise-identical pixels.
inline ImageSample make_phantom(const PhantomConfig& cfg) {
  const int h = cfg.height, w = cfg.width;
  Rng rng(cfg.seed);
  const auto outline = detail::outline_for(h, w);
  const auto noise = detail::value_noise(h, w, cfg.noise_amplitude, rng);

  ImageSample s;
  s.pixels = Tensor({1, h, w}, 0.0);
  auto& px = s.pixels.value_mut();
  const double bg = 0.03, fg = 0.45;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = std::size_t(r) * w + c;
      px[i] = std::clamp((outline.inside(r, c) ? fg : bg) + noise[i], 0.0, 1.0);
    }

  if (cfg.tumor) {
    const double rx = rng.uniform(cfg.tumor_radius_min, cfg.tumor_radius_max);
    const double ry = rng.uniform(cfg.tumor_radius_min, cfg.tumor_radius_max);
    const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    // Rejection-sample a center that keeps tumor + margin inside the outline.
    double tcx = 0.0, tcy = 0.0;
    bool placed = false;
    for (int attempt = 0; attempt < 4096 && !placed; ++attempt) {
      tcx = rng.uniform(0.0, outline.ax);
      tcy = rng.uniform(outline.cy - outline.ay, outline.cy + outline.ay);
      placed = true;
      for (int k = 0; k < 8 && placed; ++k) {
        const double ang = k * 3.14159265358979323846 / 4.0;
        const double ex = tcx + (rx + cfg.tumor_margin) * std::cos(ang);
        const double ey = tcy + (ry + cfg.tumor_margin) * std::sin(ang);
        const double nx = ex / outline.ax;
        const double ny = (ey - outline.cy) / outline.ay;
        if (nx * nx + ny * ny > 1.0 || ex < 0.0) placed = false;
      }
    }
    if (!placed)
      throw std::runtime_error(
          "make_phantom: could not place tumor inside the outline; shrink "
          "tumor_radius_max");
    // Paint the tumor ellipse. The bump is scaled so its mean over the
    // bounding box is contrast + 2*noise_amplitude; texture patch means wiggle
    // by at most +-noise_amplitude, so the measured contrast against any
    // other foreground patch stays >= the sampled contrast.
    int r0 = h, r1 = -1, c0 = w, c1 = -1;
    std::vector<std::size_t> support;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const double dx = (c + 0.5 - tcx) / rx;
        const double dy = (r + 0.5 - tcy) / ry;
        if (dx * dx + dy * dy <= 1.0) {
          support.push_back(std::size_t(r) * w + c);
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
        }
      }
    if (support.empty())
      throw std::runtime_error("make_phantom: degenerate tumor support");
    const double box_area = double(r1 - r0 + 1) * double(c1 - c0 + 1);
    const double bump = (contrast + 2.0 * cfg.noise_amplitude) * box_area /
                        double(support.size());
    for (std::size_t i : support) px[i] = std::clamp(px[i] + bump, 0.0, 1.0);
    s.boxes.push_back(BBox{double(c0), double(r0), double(c1 - c0 + 1),
                           double(r1 - r0 + 1)});
  }
  return s;
}

// ---------------------------------------------------------------------------
// 16-bit binary PGM (P5, maxval 65535, big-endian samples)
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 1)
    throw ShapeError("write_pgm: (1,H,W) tensor required");
  const int h = pixels.dim(1), w = pixels.dim(2);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) +
                      "\n65535\n";
  bytes.reserve(bytes.size() + std::size_t(h) * w * 2);
  for (double v : pixels.value()) {
    const auto q = static_cast<std::uint32_t>(
        std::llround(std::clamp(v, 0.0, 1.0) * 65535.0));
    bytes.push_back(static_cast<char>((q >> 8) & 0xff));
    bytes.push_back(static_cast<char>(q & 0xff));
  }
  write_file_atomic(path, bytes);
}

inline Tensor read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream head(bytes.substr(0, 256));
  std::string magic;
  head >> magic;
  if (magic != "P5")
    throw IoError("read_pgm: unsupported format '" + magic + "' in " +
                  path.string() + " (binary P5 required)");
  long w = 0, h = 0, maxval = 0;
  head >> w >> h >> maxval;
  if (!head || w <= 0 || h <= 0)
    throw IoError("read_pgm: bad header in " + path.string());
  if (maxval != 65535)
    throw IoError("read_pgm: maxval " + std::to_string(maxval) +
                  " unsupported (expect 65535)");
  head.get();  // single whitespace after maxval
  const std::size_t offset = static_cast<std::size_t>(head.tellg());
  const std::size_t need = std::size_t(w) * std::size_t(h) * 2;
  if (bytes.size() < offset + need)
    throw IoError("read_pgm: truncated payload in " + path.string());
  Tensor t({1, static_cast<int>(h), static_cast<int>(w)}, 0.0);
  auto& px = t.value_mut();
  for (std::size_t i = 0; i < px.size(); ++i) {
    const auto hi = static_cast<unsigned char>(bytes[offset + 2 * i]);
    const auto lo = static_cast<unsigned char>(bytes[offset + 2 * i + 1]);
    px[i] = (double(hi) * 256.0 + double(lo)) / 65535.0;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Dataset manifests (JSONL, one image per line)
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string path;  // relative to the manifest location
  std::string split;
  std::vector<BBox> boxes;
};

inline std::string manifest_line(const ManifestRecord& r) {
  std::string line = "{\"id\":\"" + r.id + "\",\"path\":\"" + r.path +
                     "\",\"split\":\"" + r.split + "\",\"boxes\":[";
  for (std::size_t i = 0; i < r.boxes.size(); ++i) {
    const auto& b = r.boxes[i];
    if (i) line += ",";
    line += "{\"x\":" + std::to_string(static_cast<long long>(b.x)) +
            ",\"y\":" + std::to_string(static_cast<long long>(b.y)) +
            ",\"w\":" + std::to_string(static_cast<long long>(b.w)) +
            ",\"h\":" + std::to_string(static_cast<long long>(b.h)) + "}";
  }
  return line + "]}";
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const auto& r : records) out += manifest_line(r) + "\n";
  write_file_atomic(path, out);
}

inline std::vector<ManifestRecord> read_manifest(
    const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::vector<ManifestRecord> out;
  std::istringstream in(bytes);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest " + path.string() + " line " +
                    std::to_string(lineno) + ": " + e.what());
    }
    for (const auto& [key, _] : j.items())
      if (key != "id" && key != "path" && key != "split" && key != "boxes")
        throw IoError("manifest " + path.string() + " line " +
                      std::to_string(lineno) + ": unknown key '" + key + "'");
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.split = j.at("split").get<std::string>();
    for (const auto& jb : j.at("boxes")) {
      for (const auto& [key, _] : jb.items())
        if (key != "x" && key != "y" && key != "w" && key != "h")
          throw IoError("manifest box: unknown key '" + key + "'");
      r.boxes.push_back(BBox{jb.at("x").get<double>(), jb.at("y").get<double>(),
                             jb.at("w").get<double>(),
                             jb.at("h").get<double>()});
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct DatasetConfig {
  int height = 64;
  int width = 64;
  int n_normal = 8;
  int n_tumor = 8;
  double split_train = 0.6;
  double split_val = 0.2;
  double split_test = 0.2;
  PhantomConfig phantom;  // size fields overridden by height/width
};

// floor per split, remainder assigned to train
inline std::vector<std::string> assign_splits(int n, double ftrain,
                                              double fval, double ftest) {
  if (ftrain < 0 || fval < 0 || ftest < 0 ||
      std::abs(ftrain + fval + ftest - 1.0) > 1e-9)
    throw std::runtime_error("assign_splits: fractions must sum to 1");
  const int n_val = static_cast<int>(std::floor(fval * n));
  const int n_test = static_cast<int>(std::floor(ftest * n));
  const int n_train = n - n_val - n_test;
  std::vector<std::string> out;
  out.reserve(n);
  for (int i = 0; i < n_train; ++i) out.push_back("train");
  for (int i = 0; i < n_val; ++i) out.push_back("val");
  for (int i = 0; i < n_test; ++i) out.push_back("test");
  return out;
}

struct Dataset {
  std::vector<ImageSample> samples;
  std::vector<ManifestRecord> records;
};

// Generates phantoms with per-sample derived seeds and writes PGMs + the
// manifest under dir. Ids are zero-padded and unique.
inline Dataset make_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                            const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Rng root(seed);
  Dataset ds;
  auto emit = [&](bool tumor, int index, const std::string& split) {
    PhantomConfig pc = cfg.phantom;
    pc.height = cfg.height;
    pc.width = cfg.width;
    pc.tumor = tumor;
    pc.seed = root.split((tumor ? 1000000u : 0u) + index).seed();
    ImageSample s = make_phantom(pc);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d", tumor ? "tumor" : "normal",
                  index);
    s.id = buf;
    s.split = split;
    write_pgm(dir / (s.id + ".pgm"), s.pixels);
    ds.records.push_back(
        ManifestRecord{s.id, s.id + ".pgm", s.split, s.boxes});
    ds.samples.push_back(std::move(s));
  };
  const auto tumor_splits = assign_splits(cfg.n_tumor, cfg.split_train,
                                          cfg.split_val, cfg.split_test);
  const auto normal_splits = assign_splits(cfg.n_normal, cfg.split_train,
                                           cfg.split_val, cfg.split_test);
  for (int i = 0; i < cfg.n_tumor; ++i) emit(true, i, tumor_splits[i]);
  for (int i = 0; i < cfg.n_normal; ++i) emit(false, i, normal_splits[i]);
  write_manifest(dir / "manifest.jsonl", ds.records);
  return ds;
}

// Loads every sample listed in a manifest; validates bounds.
inline std::vector<ImageSample> load_dataset(
    const std::filesystem::path& manifest_path) {
  const auto records = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<ImageSample> out;
  for (const auto& r : records) {
    ImageSample s;
    s.id = r.id;
    s.split = r.split;
    s.boxes = r.boxes;
    s.pixels = read_pgm(dir / r.path);
    for (const auto& b : s.boxes)
      if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 ||
          b.x2() > s.width() || b.y2() > s.height())
        throw IoError("manifest: box out of bounds for image '" + s.id + "'");
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ImageSample> filter_split(
    const std::vector<ImageSample>& all, const std::string& split,
    bool tumor_only = false) {
  std::vector<ImageSample> out;
  for (const auto& s : all)
    if (s.split == split && (!tumor_only || !s.boxes.empty()))
      out.push_back(s);
  return out;
}

}  // namespace augdet
