#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "glimpse/error.hpp"
#include "glimpse/rng.hpp"

namespace glimpse {

// Shortest text that parses back to the same double; keeps emitted tables and
// configs byte-stable and lossless.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Planar channel-major image, values in [0,1]: pix[(c*h + y)*w + x].
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<float> pix;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), pix(static_cast<std::size_t>(c) * h * w, fill) {}

  float at(int c, int y, int x) const {
    return pix[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float& at(int c, int y, int x) {
    return pix[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

struct Sample {
  Image image;
  int label = -1;            // class id; -1 = unlabeled
  std::vector<int> seg;      // per-pixel class ids (height*width), empty = none
};

struct Corpus {
  std::vector<Sample> samples;
  std::vector<std::string> names;  // file names, parallel to samples
  int num_classes = 0;             // classification alphabet (0 = unlabeled corpus)
  int seg_classes = 0;             // segmentation alphabet (0 = no masks)
};

// ---------------------------------------------------------------------------
// Portable pixmap / graymap I/O (P6 / P5, maxval 255)
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_token(std::istream& in, const std::string& path) {
  // skip whitespace and '#' comments, then read a decimal token
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw DataError("truncated header in " + path);
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw DataError("malformed header in " + path);
  return value;
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  int channels = 0;
  if (m0 == 'P' && m1 == '6') channels = 3;
  else if (m0 == 'P' && m1 == '5') channels = 1;
  else throw DataError("unsupported format (want P5/P6) in " + path);
  const int w = detail::pnm_token(in, path);
  const int h = detail::pnm_token(in, path);
  const int maxval = detail::pnm_token(in, path);
  if (w <= 0 || h <= 0) throw DataError("bad dimensions in " + path);
  if (maxval != 255) throw DataError("unsupported maxval " + std::to_string(maxval) + " in " + path);
  // the token reader consumed exactly one whitespace byte after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw DataError("truncated pixel data in " + path);
  Image img(channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<float>(raw[(static_cast<std::size_t>(y) * w + x) * channels + c]) / 255.f;
  return img;
}

inline unsigned char quantize_u8(float v) {
  long q = std::lround(static_cast<double>(v) * 255.0);
  return static_cast<unsigned char>(std::clamp(q, 0l, 255l));
}

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw ContractError("write_ppm: expected 3 channels, got " + std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        raw[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = quantize_u8(img.at(c, y, x));
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw DataError("write failed for " + path);
}

inline void write_pgm(const std::string& path, const std::vector<unsigned char>& gray, int h, int w) {
  if (gray.size() != static_cast<std::size_t>(h) * w)
    throw ContractError("write_pgm: buffer does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw DataError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Geometry: resize and flips
// ---------------------------------------------------------------------------

// Bilinear with half-pixel centers and clamp-to-edge; equal dimensions pass
// through bit-identically.
inline Image resize_bilinear(const Image& src, int h, int w) {
  if (h <= 0 || w <= 0) throw ContractError("resize_bilinear: non-positive target size");
  if (h == src.height && w == src.width) return src;
  Image dst(src.channels, h, w);
  const double sy = static_cast<double>(src.height) / h;
  const double sx = static_cast<double>(src.width) / w;
  for (int y = 0; y < h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double v = (1 - wy) * ((1 - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1)) +
                         wy * ((1 - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1));
        dst.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return dst;
}

// Nearest-neighbor resize for class-id grids (no interpolation across ids).
inline std::vector<int> resize_nearest_ids(const std::vector<int>& ids, int h0, int w0, int h,
                                           int w) {
  if (ids.size() != static_cast<std::size_t>(h0) * w0)
    throw ContractError("resize_nearest_ids: buffer does not match dimensions");
  if (h == h0 && w == w0) return ids;
  std::vector<int> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    int syi = std::clamp(static_cast<int>((y + 0.5) * h0 / h), 0, h0 - 1);
    for (int x = 0; x < w; ++x) {
      int sxi = std::clamp(static_cast<int>((x + 0.5) * w0 / w), 0, w0 - 1);
      out[static_cast<std::size_t>(y) * w + x] = ids[static_cast<std::size_t>(syi) * w0 + sxi];
    }
  }
  return out;
}

// Exact horizontal mirror of image and segmentation grid (an involution).
inline Sample hflip(const Sample& s) {
  Sample out = s;
  const int h = s.image.height, w = s.image.width;
  for (int c = 0; c < s.image.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
  if (!s.seg.empty())
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.seg[static_cast<std::size_t>(y) * w + x] = s.seg[static_cast<std::size_t>(y) * w + (w - 1 - x)];
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool scale_crop = true;
  bool flip = true;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
};

// Random scale (bilinear), random crop back to the original size (edges
// replicate when zoomed out), then horizontal flip with probability 1/2.
// Segmentation grids follow the same geometry with nearest-neighbor lookup.
// Output shape always equals input shape.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.scale_crop && !cfg.flip) return s;
  Sample out = s;
  const int h = s.image.height, w = s.image.width;
  if (cfg.scale_crop) {
    const double sc = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const int sh = std::max(1, static_cast<int>(std::lround(h * sc)));
    const int sw = std::max(1, static_cast<int>(std::lround(w * sc)));
    const long oy = rng.uniform_int(std::min(0, sh - h), std::max(0, sh - h));
    const long ox = rng.uniform_int(std::min(0, sw - w), std::max(0, sw - w));
    // fused scale+crop: output (y,x) samples the source at the scaled-space
    // window offset, clamped so zoom-out replicates the border
    Image img(s.image.channels, h, w);
    std::vector<int> seg(s.seg.empty() ? 0 : static_cast<std::size_t>(h) * w);
    const double ry = static_cast<double>(h) / sh;
    const double rx = static_cast<double>(w) / sw;
    for (int y = 0; y < h; ++y) {
      double fy = std::clamp((y + oy + 0.5) * ry - 0.5, 0.0, static_cast<double>(h - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - y0;
      for (int x = 0; x < w; ++x) {
        double fx = std::clamp((x + ox + 0.5) * rx - 0.5, 0.0, static_cast<double>(w - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - x0;
        for (int c = 0; c < s.image.channels; ++c) {
          const double v = (1 - wy) * ((1 - wx) * s.image.at(c, y0, x0) + wx * s.image.at(c, y0, x1)) +
                           wy * ((1 - wx) * s.image.at(c, y1, x0) + wx * s.image.at(c, y1, x1));
          img.at(c, y, x) = static_cast<float>(v);
        }
        if (!s.seg.empty()) {
          const int ny = static_cast<int>(std::lround(fy));
          const int nx = static_cast<int>(std::lround(fx));
          seg[static_cast<std::size_t>(y) * w + x] = s.seg[static_cast<std::size_t>(ny) * w + nx];
        }
      }
    }
    out.image = std::move(img);
    if (!s.seg.empty()) out.seg = std::move(seg);
  }
  if (cfg.flip && rng.bernoulli(0.5)) out = hflip(out);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

struct ShapeDesc {
  int kind = 0;  // 0 rectangle, 1 circle
  // rectangle: pixel (y,x) covered iff y0 <= y < y1 and x0 <= x < x1
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  // circle: covered iff (x-cx)^2 + (y-cy)^2 <= r^2
  double cx = 0, cy = 0, r = 0;

  bool covers(int y, int x) const {
    if (kind == 0) return y >= y0 && y < y1 && x >= x0 && x < x1;
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= r * r;
  }
};

namespace detail {

inline Sample synth_shapes_sample(int h, int w, Rng& rng, std::vector<ShapeDesc>* desc) {
  Sample s;
  s.image = Image(3, h, w);
  s.seg.assign(static_cast<std::size_t>(h) * w, 0);
  // textured background: base color plus a low-frequency sinusoid
  float base[3], amp[3];
  double fx[3], fy[3], ph[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = static_cast<float>(rng.uniform(0.15, 0.85));
    amp[c] = static_cast<float>(rng.uniform(0.02, 0.08));
    fx[c] = static_cast<double>(rng.uniform_int(1, 3));
    fy[c] = static_cast<double>(rng.uniform_int(1, 3));
    ph[c] = rng.uniform(0.0, 6.283185307179586);
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double t = std::sin(6.283185307179586 * (fx[c] * x / w + fy[c] * y / h) + ph[c]);
        s.image.at(c, y, x) = std::clamp(base[c] + amp[c] * static_cast<float>(t), 0.f, 1.f);
      }
  // 1-4 shapes; later shapes overdraw earlier ones in both image and mask
  const long count = rng.uniform_int(1, 4);
  for (long k = 0; k < count; ++k) {
    ShapeDesc d;
    d.kind = static_cast<int>(rng.uniform_int(0, 1));
    float col[3];
    for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(rng.uniform(0.0, 1.0));
    if (d.kind == 0) {
      const long bw = rng.uniform_int(std::max(3l, w / 8l), std::max(4l, w / 2l));
      const long bh = rng.uniform_int(std::max(3l, h / 8l), std::max(4l, h / 2l));
      d.x0 = static_cast<int>(rng.uniform_int(0, std::max(0l, w - bw)));
      d.y0 = static_cast<int>(rng.uniform_int(0, std::max(0l, h - bh)));
      d.x1 = std::min(w, d.x0 + static_cast<int>(bw));
      d.y1 = std::min(h, d.y0 + static_cast<int>(bh));
    } else {
      const long rmax = std::max(3l, std::min(h, w) / 4l);
      const long r = rng.uniform_int(3, rmax);
      d.r = static_cast<double>(r);
      d.cx = static_cast<double>(rng.uniform_int(r, std::max(r, w - 1 - r)));
      d.cy = static_cast<double>(rng.uniform_int(r, std::max(r, h - 1 - r)));
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (d.covers(y, x)) {
          for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = col[c];
          s.seg[static_cast<std::size_t>(y) * w + x] = d.kind + 1;
        }
    if (desc) desc->push_back(d);
  }
  // class label: shape type with the larger visible pixel count
  std::size_t rect_px = 0, circ_px = 0;
  for (int id : s.seg) {
    if (id == 1) ++rect_px;
    if (id == 2) ++circ_px;
  }
  s.label = (circ_px > rect_px) ? 1 : 0;
  return s;
}

inline Sample synth_gradients_sample(int h, int w, Rng& rng) {
  Sample s;
  s.image = Image(3, h, w);
  for (int c = 0; c < 3; ++c) {
    const double a = rng.uniform(0.25, 0.75);
    const double gx = rng.uniform(-0.45, 0.45);
    const double gy = rng.uniform(-0.45, 0.45);
    const double m = rng.uniform(0.0, 0.2);
    const double u = static_cast<double>(rng.uniform_int(1, 2));
    const double v = static_cast<double>(rng.uniform_int(1, 2));
    const double ph = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double xx = (w > 1) ? static_cast<double>(x) / (w - 1) : 0.0;
        const double yy = (h > 1) ? static_cast<double>(y) / (h - 1) : 0.0;
        const double t = a + gx * (xx - 0.5) + gy * (yy - 0.5) +
                         m * std::sin(6.283185307179586 * (u * xx + v * yy) + ph);
        s.image.at(c, y, x) = static_cast<float>(std::clamp(t, 0.0, 1.0));
      }
  }
  return s;
}

inline std::string synth_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.ppm", i);
  return buf;
}

}  // namespace detail

// Deterministic synthetic corpus; per-sample RNG is split from (seed, index)
// so generation order never matters. descs, when given, receives the analytic
// shape list for each "shapes" sample.
inline Corpus synthesize(const std::string& generator, int n, int h, int w, std::uint64_t seed,
                         std::vector<std::vector<ShapeDesc>>* descs = nullptr) {
  if (n < 0) throw ConfigError("synthesize: negative corpus size");
  Corpus corpus;
  Rng root(seed);
  if (generator == "shapes") {
    corpus.num_classes = 2;
    corpus.seg_classes = 3;
  } else if (generator == "gradients") {
    corpus.num_classes = 0;
    corpus.seg_classes = 0;
  } else {
    throw ConfigError("synthesize: unknown generator '" + generator + "'");
  }
  for (int i = 0; i < n; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    if (generator == "shapes") {
      std::vector<ShapeDesc> d;
      corpus.samples.push_back(detail::synth_shapes_sample(h, w, rng, descs ? &d : nullptr));
      if (descs) descs->push_back(std::move(d));
    } else {
      corpus.samples.push_back(detail::synth_gradients_sample(h, w, rng));
    }
    corpus.names.push_back(detail::synth_name(i));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Train/validation split
// ---------------------------------------------------------------------------

struct Split {
  std::vector<int> train, val;
};

// Pure function of (n, ratio, seed): shuffle indices, first floor(ratio*n)
// train, remainder validation. Disjoint and exhaustive by construction; at
// least one sample lands on each side when n >= 2.
inline Split split_indices(int n, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must lie in (0,1)");
  if (n < 0) throw ConfigError("split: negative count");
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(seed).split(0x5117u);
  rng.shuffle(idx.begin(), idx.end());
  int k = static_cast<int>(ratio * n);
  if (n >= 2) k = std::clamp(k, 1, n - 1);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + k);
  s.val.assign(idx.begin() + k, idx.end());
  return s;
}

// ---------------------------------------------------------------------------
// Corpus directory I/O
// layout: images/*.ppm, optional labels.tsv (name<TAB>class), optional
// masks/<stem>.pgm with one class id per pixel
// ---------------------------------------------------------------------------

inline void save_corpus(const std::string& dir, const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  bool any_label = false, any_mask = false;
  for (const auto& s : corpus.samples) {
    any_label = any_label || s.label >= 0;
    any_mask = any_mask || !s.seg.empty();
  }
  if (any_mask) fs::create_directories(fs::path(dir) / "masks");
  std::ofstream tsv;
  if (any_label) {
    tsv.open(fs::path(dir) / "labels.tsv");
    if (!tsv) throw DataError("cannot write labels.tsv in " + dir);
  }
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    const std::string& name = corpus.names[i];
    write_ppm((fs::path(dir) / "images" / name).string(), s.image);
    if (any_label) tsv << name << "\t" << s.label << "\n";
    if (!s.seg.empty()) {
      std::vector<unsigned char> gray(s.seg.size());
      for (std::size_t j = 0; j < s.seg.size(); ++j) {
        if (s.seg[j] < 0 || s.seg[j] > 255) throw DataError("mask id out of byte range");
        gray[j] = static_cast<unsigned char>(s.seg[j]);
      }
      std::string stem = fs::path(name).stem().string();
      write_pgm((fs::path(dir) / "masks" / (stem + ".pgm")).string(), gray, s.image.height,
                s.image.width);
    }
  }
}

inline Sample load_and_resize(const std::string& path, int h, int w) {
  Sample s;
  s.image = resize_bilinear(read_pnm(path), h, w);
  return s;
}

inline Corpus load_corpus(const std::string& dir, int h, int w) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(dir) / "images";
  if (!fs::is_directory(images)) throw DataError("missing images directory under " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(images)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (ext == ".ppm" || ext == ".pgm") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());

  std::map<std::string, int> labels;
  const fs::path tsv = fs::path(dir) / "labels.tsv";
  if (fs::exists(tsv)) {
    std::ifstream in(tsv);
    if (!in) throw DataError("cannot read " + tsv.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError("labels.tsv line " + std::to_string(lineno) + ": missing tab in " + dir);
      const std::string name = line.substr(0, tab);
      int id = 0;
      try {
        id = std::stoi(line.substr(tab + 1));
      } catch (...) {
        throw DataError("labels.tsv line " + std::to_string(lineno) + ": bad class id in " + dir);
      }
      labels[name] = id;
    }
  }

  Corpus corpus;
  int max_label = -1, max_seg = -1;
  for (const auto& name : names) {
    Sample s = load_and_resize((images / name).string(), h, w);
    auto it = labels.find(name);
    if (it != labels.end()) {
      s.label = it->second;
      max_label = std::max(max_label, s.label);
    }
    const fs::path mask = fs::path(dir) / "masks" / (fs::path(name).stem().string() + ".pgm");
    if (fs::exists(mask)) {
      Image m = read_pnm(mask.string());
      if (m.channels != 1) throw DataError("mask is not a graymap: " + mask.string());
      std::vector<int> ids(static_cast<std::size_t>(m.height) * m.width);
      for (std::size_t j = 0; j < ids.size(); ++j)
        ids[j] = static_cast<int>(std::lround(m.pix[j] * 255.f));
      s.seg = resize_nearest_ids(ids, m.height, m.width, h, w);
      for (int id : s.seg) max_seg = std::max(max_seg, id);
    }
    corpus.samples.push_back(std::move(s));
    corpus.names.push_back(name);
  }
  for (const auto& [name, id] : labels)
    if (std::find(names.begin(), names.end(), name) == names.end())
      throw DataError("labels.tsv names missing image '" + name + "' in " + dir);
  corpus.num_classes = max_label + 1;
  corpus.seg_classes = max_seg + 1;
  return corpus;
}

}  // namespace glimpse
