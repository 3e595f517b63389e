#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "glimpse/data.hpp"
#include "glimpse/error.hpp"
#include "glimpse/model.hpp"
#include "glimpse/rng.hpp"
#include "glimpse/tensor.hpp"

#include <json.hpp>

namespace glimpse {

// ---------------------------------------------------------------------------
// Glimpse geometry
// ---------------------------------------------------------------------------

enum class GlimpseKind { plain, retinal };

struct GlimpseSpec {
  GlimpseKind kind = GlimpseKind::plain;
  int glimpse_px = 16;   // side length in pixels, multiple of the patch size
  int levels = 1;        // retinal resolution levels (plain: 1)
  int num_glimpses = 8;  // T

  void validate(int patch) const {
    if (glimpse_px <= 0 || glimpse_px % patch != 0)
      throw ConfigError("glimpse: size " + std::to_string(glimpse_px) +
                        " is not a positive multiple of patch " + std::to_string(patch));
    if (num_glimpses <= 0) throw ConfigError("glimpse: num_glimpses must be positive");
    if (kind == GlimpseKind::retinal) {
      if (levels < 1) throw ConfigError("glimpse: retinal levels must be >= 1");
      if (glimpse_px != levels * patch)
        throw ConfigError("glimpse: retinal size must equal levels*patch (" +
                          std::to_string(levels) + "*" + std::to_string(patch) + ")");
      if (patch % 2 != 0 && levels > 1)
        throw ConfigError("glimpse: retinal levels need an even patch size to center");
    } else if (levels != 1) {
      throw ConfigError("glimpse: plain glimpses have exactly one level");
    }
  }

  int footprint_side(int patch) const { return glimpse_px / patch; }
  int footprint(int patch) const { return footprint_side(patch) * footprint_side(patch); }
  // distinct sensor samples acquired per glimpse
  int source_samples(int patch) const {
    return kind == GlimpseKind::retinal ? levels * patch * patch : glimpse_px * glimpse_px;
  }
  std::string regime() const {
    return std::to_string(num_glimpses) + "x" + std::to_string(glimpse_px) + "^2" +
           (kind == GlimpseKind::retinal ? " retinal" : "");
  }
};

struct RegimeAccounting {
  std::string regime;
  double pixel_pct = 0;  // sensor samples / image pixels
  double area_pct = 0;   // covered glimpse area / image pixels
};

inline RegimeAccounting regime_accounting(const GlimpseSpec& spec, int image_h, int image_w,
                                          int patch) {
  spec.validate(patch);
  RegimeAccounting r;
  r.regime = spec.regime();
  const double total = static_cast<double>(image_h) * image_w;
  r.pixel_pct = 100.0 * spec.num_glimpses * spec.source_samples(patch) / total;
  r.area_pct = 100.0 * spec.num_glimpses * (static_cast<double>(spec.glimpse_px) * spec.glimpse_px) / total;
  return r;
}

// ---------------------------------------------------------------------------
// Entropy map
// ---------------------------------------------------------------------------

struct EntropyMap {
  int gh = 0, gw = 0;
  std::vector<double> v;  // nats, row-major patch grid

  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * gw + x]; }
};

// Per-patch Shannon entropy of the captured attention rows, summed over heads
// (0 ln 0 := 0, natural log). The CLS row is discarded and known positions are
// zeroed afterwards. Rows are renormalized in double before the entropy so
// values provably stay within [0, heads * ln S].
template <class T>
EntropyMap entropy_map(const AttentionCapture<T>& cap, const std::vector<std::uint8_t>& known,
                       int gh, int gw) {
  const int n = gh * gw;
  if (cap.seq != n + 1)
    throw ContractError("entropy_map: capture length " + std::to_string(cap.seq) +
                        " does not match grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                        " + CLS");
  if (known.size() != static_cast<std::size_t>(n))
    throw ContractError("entropy_map: known mask size mismatch");
  EntropyMap out;
  out.gh = gh;
  out.gw = gw;
  out.v.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    if (known[static_cast<std::size_t>(i)]) continue;  // stays exactly 0
    double total = 0;
    for (int h = 0; h < cap.heads; ++h) {
      const int row = i + 1;  // row 0 is CLS
      double sum = 0;
      for (int k = 0; k < cap.seq; ++k) sum += static_cast<double>(cap.prob(h, row, k));
      if (std::fabs(sum - 1.0) > 1e-4)
        throw ContractError("entropy_map: attention row " + std::to_string(row) + " of head " +
                            std::to_string(h) + " sums to " + std::to_string(sum));
      double ent = 0;
      for (int k = 0; k < cap.seq; ++k) {
        const double p = static_cast<double>(cap.prob(h, row, k)) / sum;
        if (p > 0) ent -= p * std::log(p);
      }
      total += ent;
    }
    out.v[static_cast<std::size_t>(i)] = total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selectors. Anchors are row-major patch-grid indices of a glimpse's top-left
// patch, stride one patch. An empty optional signals exploration-complete.
// ---------------------------------------------------------------------------

namespace detail {

inline bool anchor_has_unknown(int ay, int ax, int g, int gw,
                               const std::vector<std::uint8_t>& known) {
  for (int dy = 0; dy < g; ++dy)
    for (int dx = 0; dx < g; ++dx)
      if (!known[static_cast<std::size_t>(ay + dy) * gw + (ax + dx)]) return true;
  return false;
}

inline bool anchor_untouched(int ay, int ax, int g, int gw,
                             const std::vector<std::uint8_t>& known) {
  for (int dy = 0; dy < g; ++dy)
    for (int dx = 0; dx < g; ++dx)
      if (known[static_cast<std::size_t>(ay + dy) * gw + (ax + dx)]) return false;
  return true;
}

}  // namespace detail

// Greatest footprint-mean entropy; anchors containing an unknown patch always
// outrank fully-known anchors; remaining ties break to the smallest row-major
// index.
inline std::optional<int> select_ame(const EntropyMap& emap, int footprint_side,
                                     const std::vector<std::uint8_t>& known) {
  const int g = footprint_side, gh = emap.gh, gw = emap.gw;
  if (g <= 0 || g > gh || g > gw) return std::nullopt;
  int best = -1;
  double best_mean = 0;
  bool best_unknown = false;
  for (int ay = 0; ay + g <= gh; ++ay)
    for (int ax = 0; ax + g <= gw; ++ax) {
      double mean = 0;
      for (int dy = 0; dy < g; ++dy)
        for (int dx = 0; dx < g; ++dx) mean += emap.at(ay + dy, ax + dx);
      mean /= static_cast<double>(g) * g;
      const bool has_unknown = detail::anchor_has_unknown(ay, ax, g, gw, known);
      const bool better =
          best < 0 || (has_unknown && !best_unknown) || (has_unknown == best_unknown && mean > best_mean);
      if (better) {
        best = ay * gw + ax;
        best_mean = mean;
        best_unknown = has_unknown;
      }
    }
  if (best < 0) return std::nullopt;
  return best;
}

// Uniform over every anchor that fits; overlap with known patches permitted.
inline std::optional<int> select_random(int footprint_side, int gh, int gw,
                                        const std::vector<std::uint8_t>&, Rng& rng) {
  const int g = footprint_side;
  if (g <= 0 || g > gh || g > gw) return std::nullopt;
  const int ah = gh - g + 1, aw = gw - g + 1;
  const long pick = rng.below(static_cast<std::uint64_t>(ah) * aw);
  return static_cast<int>(pick / aw) * gw + static_cast<int>(pick % aw);
}

// Partition the grid into glimpse-sized cells; draw uniformly without
// replacement among untouched cells of even (row+col) parity, falling back to
// odd parity once even cells are exhausted. Never overlaps.
inline std::optional<int> select_checkerboard(int footprint_side, int gh, int gw,
                                              const std::vector<std::uint8_t>& known, Rng& rng) {
  const int g = footprint_side;
  if (g <= 0 || g > gh || g > gw) return std::nullopt;
  const int ch = gh / g, cw = gw / g;
  for (int want_parity = 0; want_parity < 2; ++want_parity) {
    std::vector<int> eligible;
    for (int cy = 0; cy < ch; ++cy)
      for (int cx = 0; cx < cw; ++cx) {
        if ((cy + cx) % 2 != want_parity) continue;
        if (detail::anchor_untouched(cy * g, cx * g, g, gw, known))
          eligible.push_back((cy * g) * gw + cx * g);
      }
    if (!eligible.empty())
      return eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Glimpse extraction
// ---------------------------------------------------------------------------

struct RetinalBlock {
  Image block;                      // glimpse_px x glimpse_px composed pixels
  std::vector<std::uint8_t> level;  // per-pixel resolution level (1 = finest)
  int source_samples = 0;
};

inline Image extract_plain_glimpse(const Image& img, int ay_px, int ax_px, int side) {
  if (ay_px < 0 || ax_px < 0 || ay_px + side > img.height || ax_px + side > img.width)
    throw ContractError("glimpse window (" + std::to_string(ay_px) + "," + std::to_string(ax_px) +
                        ")+" + std::to_string(side) + " exceeds image " +
                        std::to_string(img.height) + "x" + std::to_string(img.width));
  Image out(img.channels, side, side);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) out.at(c, y, x) = img.at(c, ay_px + y, ax_px + x);
  return out;
}

// Concentric retina-like sampling: level k (1..levels) covers the central
// (k*P)^2 window with P^2 area-averaged samples, composed back by nearest
// upsampling with finer levels painted over the center. Each level adds P^2
// sensor samples, so a glimpse costs levels*P^2 source pixels.
inline RetinalBlock extract_retinal_glimpse(const Image& img, int ay_px, int ax_px, int patch,
                                            int levels) {
  const int side = levels * patch;
  if (ay_px < 0 || ax_px < 0 || ay_px + side > img.height || ax_px + side > img.width)
    throw ContractError("retinal window (" + std::to_string(ay_px) + "," + std::to_string(ax_px) +
                        ")+" + std::to_string(side) + " exceeds image " +
                        std::to_string(img.height) + "x" + std::to_string(img.width));
  RetinalBlock out;
  out.block = Image(img.channels, side, side);
  out.level.assign(static_cast<std::size_t>(side) * side, 0);
  out.source_samples = levels * patch * patch;
  for (int k = levels; k >= 1; --k) {
    const int wk = k * patch;
    const int off = (side - wk) / 2;  // offset of this level inside the glimpse square
    for (int c = 0; c < img.channels; ++c)
      for (int cy = 0; cy < patch; ++cy)
        for (int cx = 0; cx < patch; ++cx) {
          // area-average a k x k source block into one sensor sample
          double acc = 0;
          for (int sy = 0; sy < k; ++sy)
            for (int sx = 0; sx < k; ++sx)
              acc += img.at(c, ay_px + off + cy * k + sy, ax_px + off + cx * k + sx);
          const float sample = static_cast<float>(acc / (static_cast<double>(k) * k));
          // nearest upsample: paint the sample across its k x k cell
          for (int sy = 0; sy < k; ++sy)
            for (int sx = 0; sx < k; ++sx)
              out.block.at(c, off + cy * k + sy, off + cx * k + sx) = sample;
        }
    for (int y = 0; y < wk; ++y)
      for (int x = 0; x < wk; ++x)
        out.level[static_cast<std::size_t>(off + y) * side + (off + x)] = static_cast<std::uint8_t>(k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exploration loop
// ---------------------------------------------------------------------------

enum class Selector { ame, random, checkerboard };

inline std::string selector_name(Selector s) {
  switch (s) {
    case Selector::ame: return "attention";
    case Selector::random: return "random";
    case Selector::checkerboard: return "checker";
  }
  return "?";
}

inline Selector selector_from_name(const std::string& s) {
  if (s == "attention" || s == "ame") return Selector::ame;
  if (s == "random") return Selector::random;
  if (s == "checker" || s == "checkerboard") return Selector::checkerboard;
  throw ConfigError("unknown selector '" + s + "'");
}

struct ExploreOptions {
  Selector selector = Selector::ame;
  std::uint64_t seed = 0;     // drives random/checkerboard draws
  bool record_maps = false;   // keep per-step entropy grids
  bool record_preds = false;  // keep per-step prediction patches
  bool record_inputs = false; // keep per-step observed composites
  bool with_final = true;     // run the final full forward after T glimpses
  bool timing = false;        // fill wall_ms (off keeps reports byte-stable)
};

struct StepRecord {
  int t = 0;        // glimpses already taken when this forward ran
  int anchor = -1;  // anchor selected from this step's map (-1 on the final record)
  double loss = 0;
  double metric = 0;
  std::vector<double> entropy;      // optional entropy grid snapshot
  std::vector<float> pred_patches;  // optional N x head_dim prediction
  Image observed;                   // optional composite input
};

struct EpisodeReport {
  std::string selector;
  std::string regime;
  std::vector<int> anchors;              // row-major top-left patch indices, in order
  std::vector<StepRecord> steps;         // T selection steps (+ final record)
  std::vector<std::uint8_t> known_mask;  // final patch-level mask
  std::vector<int> order;                // known patch positions in observation order
  Image final_observed;                  // composite after the last glimpse (unknown = gray)
  bool exhausted_early = false;
  int observed_pixels = 0;  // nominal sensor samples over the episode
  double wall_ms = 0;       // 0 unless timing was requested
};

namespace detail {

// task loss/metric pair computed from raw prediction data (no tape)
template <class T>
inline std::pair<double, double> step_scores(const MaeModel<T>& model, const Tensor<T>& preds,
                                             const Tensor<T>& latents, const Tensor<T>& target,
                                             const Sample& sample) {
  const ModelConfig& cfg = model.config();
  if (cfg.task == Task::reconstruction) {
    double acc = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const double d = static_cast<double>(preds.at(i)) - static_cast<double>(target.at(i));
      acc += d * d;
    }
    const double rmse = std::sqrt(acc / static_cast<double>(preds.size()));
    return {rmse, rmse};
  }
  if (cfg.task == Task::classification) {
    auto logits = model.classify(latents);
    const int k = static_cast<int>(logits.cols());
    double mx = -1e300;
    int arg = 0;
    for (int j = 0; j < k; ++j) {
      const double v = static_cast<double>(logits.at(0, static_cast<std::size_t>(j)));
      if (v > mx) {
        mx = v;
        arg = j;
      }
    }
    double denom = 0;
    for (int j = 0; j < k; ++j)
      denom += std::exp(static_cast<double>(logits.at(0, static_cast<std::size_t>(j))) - mx);
    const double ce =
        std::log(denom) + mx - static_cast<double>(logits.at(0, static_cast<std::size_t>(sample.label)));
    return {ce, arg == sample.label ? 1.0 : 0.0};
  }
  // segmentation: per-pixel cross entropy and pixel accuracy
  const int P = cfg.patch, gw = cfg.grid_w(), C = cfg.seg_classes;
  double total_ce = 0;
  std::size_t correct = 0, count = 0;
  for (int y = 0; y < cfg.image_h; ++y)
    for (int x = 0; x < cfg.image_w; ++x) {
      const int truth = sample.seg[static_cast<std::size_t>(y) * cfg.image_w + x];
      const std::size_t patch_i = static_cast<std::size_t>(y / P) * gw + (x / P);
      const std::size_t base = static_cast<std::size_t>(y % P) * P + (x % P);
      double mx = -1e300;
      int arg = 0;
      for (int c = 0; c < C; ++c) {
        const double v = static_cast<double>(preds.at(patch_i, static_cast<std::size_t>(c) * P * P + base));
        if (v > mx) {
          mx = v;
          arg = c;
        }
      }
      double denom = 0;
      for (int c = 0; c < C; ++c)
        denom += std::exp(
            static_cast<double>(preds.at(patch_i, static_cast<std::size_t>(c) * P * P + base)) - mx);
      total_ce += std::log(denom) + mx -
                  static_cast<double>(preds.at(patch_i, static_cast<std::size_t>(truth) * P * P + base));
      correct += (arg == truth) ? 1 : 0;
      ++count;
    }
  return {total_ce / static_cast<double>(count), static_cast<double>(correct) / static_cast<double>(count)};
}

}  // namespace detail

// Writes one glimpse into the observation buffers; finer levels win on
// re-observation. Returns the nominal sensor-sample cost.
inline int observe_glimpse(const Image& source, int anchor, const GlimpseSpec& spec, int patch,
                           int gw, Image& observed, std::vector<std::uint8_t>& pixel_level,
                           std::vector<std::uint8_t>& known, std::vector<int>& order) {
  const int g = spec.footprint_side(patch);
  const int ay = anchor / gw, ax = anchor % gw;
  const int ay_px = ay * patch, ax_px = ax * patch;
  const int side = spec.glimpse_px;
  Image block;
  std::vector<std::uint8_t> level;
  int samples = 0;
  if (spec.kind == GlimpseKind::retinal) {
    RetinalBlock rb = extract_retinal_glimpse(source, ay_px, ax_px, patch, spec.levels);
    block = std::move(rb.block);
    level = std::move(rb.level);
    samples = rb.source_samples;
  } else {
    block = extract_plain_glimpse(source, ay_px, ax_px, side);
    level.assign(static_cast<std::size_t>(side) * side, 1);
    samples = spec.source_samples(patch);
  }
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const std::size_t px = static_cast<std::size_t>(ay_px + y) * observed.width + (ax_px + x);
      const std::uint8_t lv = level[static_cast<std::size_t>(y) * side + x];
      if (pixel_level[px] == 0 || lv < pixel_level[px]) {
        pixel_level[px] = lv;
        for (int c = 0; c < observed.channels; ++c)
          observed.at(c, ay_px + y, ax_px + x) = block.at(c, y, x);
      }
    }
  for (int dy = 0; dy < g; ++dy)
    for (int dx = 0; dx < g; ++dx) {
      const std::size_t pi = static_cast<std::size_t>(ay + dy) * gw + (ax + dx);
      if (!known[pi]) {
        known[pi] = 1;
        order.push_back(static_cast<int>(pi));
      }
    }
  return samples;
}

// Sequential active exploration: step 0 decodes from mask tokens alone, every
// later step re-encodes all known patches, decodes, derives the entropy map,
// and selects the next glimpse. Runs gradient-free; training repeats the final
// forward on its own tape.
template <class T>
EpisodeReport explore(const MaeModel<T>& model, const Sample& sample, const GlimpseSpec& spec,
                      const ExploreOptions& opts) {
  const ModelConfig& cfg = model.config();
  spec.validate(cfg.patch);
  if (sample.image.height != cfg.image_h || sample.image.width != cfg.image_w ||
      sample.image.channels != cfg.channels)
    throw ContractError("explore: sample does not match the model's image geometry");
  if (cfg.task == Task::classification && sample.label < 0)
    throw ContractError("explore: classification episode without a label");
  if (cfg.task == Task::segmentation && sample.seg.empty())
    throw ContractError("explore: segmentation episode without a mask");

  typename Tape<T>::NoGrad nograd;
  const auto t0 = std::chrono::steady_clock::now();
  const int N = cfg.num_patches(), gh = cfg.grid_h(), gw = cfg.grid_w();
  const int g = spec.footprint_side(cfg.patch);

  EpisodeReport report;
  report.selector = selector_name(opts.selector);
  report.regime = spec.regime();
  Rng rng = Rng(opts.seed).split(0x5e1ec7u);

  Image observed(cfg.channels, cfg.image_h, cfg.image_w, 0.5f);  // unknown renders gray
  std::vector<std::uint8_t> pixel_level(static_cast<std::size_t>(cfg.image_h) * cfg.image_w, 0);
  std::vector<std::uint8_t> known(static_cast<std::size_t>(N), 0);
  std::vector<int> order;  // known positions in observation order
  const Tensor<T> target = patchify<T>(sample.image, cfg.patch);

  auto run_forward = [&](int taken, int anchor_out_slot) {
    Tensor<T> visible({static_cast<std::size_t>(order.size()),
                       static_cast<std::size_t>(cfg.patch_dim())});
    if (!order.empty()) {
      const Tensor<T> obs = patchify<T>(observed, cfg.patch);
      for (std::size_t i = 0; i < order.size(); ++i)
        for (std::size_t j = 0; j < visible.cols(); ++j)
          visible.at(i, j) = obs.at(static_cast<std::size_t>(order[i]), j);
    }
    auto enc = model.encode(visible, order);
    auto dec = model.decode(enc.latents, order);
    StepRecord rec;
    rec.t = taken;
    rec.anchor = anchor_out_slot;
    auto [loss, metric] = detail::step_scores(model, dec.preds, enc.latents, target, sample);
    rec.loss = loss;
    rec.metric = metric;
    EntropyMap emap = entropy_map(dec.capture, known, gh, gw);
    if (opts.record_maps) rec.entropy = emap.v;
    if (opts.record_preds) {
      rec.pred_patches.resize(dec.preds.size());
      for (std::size_t i = 0; i < dec.preds.size(); ++i)
        rec.pred_patches[i] = static_cast<float>(dec.preds.at(i));
    }
    if (opts.record_inputs) rec.observed = observed;
    report.steps.push_back(std::move(rec));
    return emap;
  };

  for (int step = 0; step < spec.num_glimpses; ++step) {
    EntropyMap emap = run_forward(step, -1);
    std::optional<int> anchor;
    switch (opts.selector) {
      case Selector::ame: anchor = select_ame(emap, g, known); break;
      case Selector::random: anchor = select_random(g, gh, gw, known, rng); break;
      case Selector::checkerboard: anchor = select_checkerboard(g, gh, gw, known, rng); break;
    }
    if (!anchor) {
      report.exhausted_early = true;
      break;
    }
    report.steps.back().anchor = *anchor;
    report.anchors.push_back(*anchor);
    report.observed_pixels +=
        observe_glimpse(sample.image, *anchor, spec, cfg.patch, gw, observed, pixel_level, known, order);
  }
  if (opts.with_final) run_forward(static_cast<int>(report.anchors.size()), -1);
  report.known_mask = known;
  report.order = order;
  report.final_observed = std::move(observed);
  if (opts.timing) {
    report.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return report;
}

inline nlohmann::json episode_to_json(const EpisodeReport& r) {
  nlohmann::json j;
  j["selector"] = r.selector;
  j["regime"] = r.regime;
  j["anchors"] = r.anchors;
  j["exhausted_early"] = r.exhausted_early;
  j["observed_pixels"] = r.observed_pixels;
  j["wall_ms"] = r.wall_ms;
  j["known_mask"] = std::vector<int>(r.known_mask.begin(), r.known_mask.end());
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) {
    nlohmann::json js;
    js["t"] = s.t;
    js["anchor"] = s.anchor;
    js["loss"] = s.loss;
    js["metric"] = s.metric;
    if (!s.entropy.empty()) js["entropy"] = s.entropy;
    steps.push_back(std::move(js));
  }
  j["steps"] = std::move(steps);
  return j;
}

}  // namespace glimpse
