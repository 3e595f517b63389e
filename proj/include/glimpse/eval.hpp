#pragma once
// Evaluation over a frozen model: task metrics (RMSE, accuracy, PA/mPA/IoU),
// glimpse-count sweeps, occupancy maps, selector ablations, and
// attention-source-layer sweeps. Everything here is read-only over weights;
// episodes parallelize freely and aggregation is order-independent.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "glimpse/data.hpp"
#include "glimpse/model.hpp"
#include "glimpse/parallel.hpp"
#include "glimpse/policy.hpp"
#include "glimpse/train.hpp"

namespace glimpse {

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

// Root-mean-squared pixel error between two same-shape images. Runs through
// the very code path the trainer optimizes, so the two agree bit for bit.
template <class T = double>
double rmse(const Image& pred, const Image& target) {
  if (pred.channels != target.channels || pred.height != target.height ||
      pred.width != target.width)
    throw ShapeError("rmse: image shapes differ");
  if (pred.pix.empty()) throw ContractError("rmse: empty image");
  typename Tape<T>::NoGrad nograd;
  Tensor<T> p({1, pred.pix.size()}), t({1, target.pix.size()});
  for (std::size_t i = 0; i < pred.pix.size(); ++i) {
    p.at(0, i) = static_cast<T>(pred.pix[i]);
    t.at(0, i) = static_cast<T>(target.pix[i]);
  }
  return static_cast<double>(reconstruction_loss(p, t).at(0));
}

inline double classification_accuracy(const std::vector<int>& preds,
                                      const std::vector<int>& labels) {
  if (preds.size() != labels.size())
    throw ShapeError("accuracy: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  if (preds.empty()) throw ContractError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += (preds[i] == labels[i]) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

struct SegMetrics {
  double pa = 0;   // correct / total pixels
  double mpa = 0;  // mean per-class recall over classes present in the truth
  double iou = 0;  // mean IoU over classes present in truth or prediction
};

// Confusion-matrix metrics over a set of label grids. Truth pixels equal to
// `ignore_label` are skipped entirely.
inline SegMetrics segmentation_metrics(const std::vector<std::vector<int>>& pred,
                                       const std::vector<std::vector<int>>& truth, int classes,
                                       int ignore_label = -1) {
  if (classes < 2) throw ContractError("segmentation_metrics: need at least two classes");
  if (pred.size() != truth.size())
    throw ShapeError("segmentation_metrics: " + std::to_string(pred.size()) + " grids for " +
                     std::to_string(truth.size()) + " truths");
  if (pred.empty()) throw ContractError("segmentation_metrics: empty input");
  const std::size_t C = static_cast<std::size_t>(classes);
  std::vector<std::int64_t> conf(C * C, 0);  // conf[truth*C + pred]
  std::int64_t total = 0, correct = 0;
  for (std::size_t g = 0; g < pred.size(); ++g) {
    if (pred[g].size() != truth[g].size())
      throw ShapeError("segmentation_metrics: grid " + std::to_string(g) + " size mismatch");
    for (std::size_t i = 0; i < pred[g].size(); ++i) {
      const int tv = truth[g][i], pv = pred[g][i];
      if (tv == ignore_label) continue;
      if (tv < 0 || tv >= classes || pv < 0 || pv >= classes)
        throw ContractError("segmentation_metrics: class id outside [0," +
                            std::to_string(classes) + ")");
      conf[static_cast<std::size_t>(tv) * C + static_cast<std::size_t>(pv)] += 1;
      ++total;
      correct += (tv == pv) ? 1 : 0;
    }
  }
  if (total == 0) throw ContractError("segmentation_metrics: every pixel is ignored");
  SegMetrics m;
  m.pa = static_cast<double>(correct) / static_cast<double>(total);
  double recall_sum = 0, iou_sum = 0;
  int recall_n = 0, iou_n = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::size_t k = 0; k < C; ++k) {
      row += conf[c * C + k];
      col += conf[k * C + c];
    }
    const std::int64_t inter = conf[c * C + c];
    if (row > 0) {  // class present in the truth: recall is defined
      recall_sum += static_cast<double>(inter) / static_cast<double>(row);
      ++recall_n;
    }
    const std::int64_t uni = row + col - inter;
    if (uni > 0) {  // class present in truth or prediction: IoU is defined
      iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
      ++iou_n;
    }
  }
  m.mpa = recall_sum / static_cast<double>(recall_n);
  m.iou = iou_sum / static_cast<double>(iou_n);
  return m;
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::string task;
  std::string selector;
  std::string regime;
  std::vector<std::pair<std::string, double>> metrics;  // headline metric first
  double pixel_pct = 0;
  double area_pct = 0;
  std::uint64_t seed = 0;
};

inline nlohmann::json metrics_to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["task"] = r.task;
  j["selector"] = r.selector;
  j["regime"] = r.regime;
  j["pixel_pct"] = r.pixel_pct;
  j["area_pct"] = r.area_pct;
  j["seed"] = r.seed;
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, v] : r.metrics) m[name] = v;
  j["metrics"] = std::move(m);
  return j;
}

// One row per record; all records must carry the same metric set.
inline std::string metrics_to_tsv(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw ContractError("metrics_to_tsv: no records");
  std::ostringstream os;
  os << "task\tselector\tregime\tpixel_pct\tarea_pct\tseed";
  for (const auto& [name, v] : records.front().metrics) os << '\t' << name;
  os << '\n';
  for (const auto& r : records) {
    if (r.metrics.size() != records.front().metrics.size())
      throw ContractError("metrics_to_tsv: records carry different metric sets");
    os << r.task << '\t' << r.selector << '\t' << r.regime << '\t' << r.pixel_pct << '\t'
       << r.area_pct << '\t' << r.seed;
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
      if (r.metrics[i].first != records.front().metrics[i].first)
        throw ContractError("metrics_to_tsv: records carry different metric sets");
      os << '\t' << format_double(r.metrics[i].second);
    }
    os << '\n';
  }
  return os.str();
}

// Per-image episode seed; shared across selectors so ablations differ only in
// the selection rule.
inline std::uint64_t episode_seed(std::uint64_t seed, std::size_t image_index) {
  return Rng(seed).split(image_index).next_u64();
}

// FNV-1a over parameter names and raw value bytes; pins down that evaluation
// never mutates weights.
template <class T>
std::uint64_t weights_checksum(const MaeModel<T>& model) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const unsigned char* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, p] : model.params()) {
    mix(reinterpret_cast<const unsigned char*>(name.data()), name.size());
    mix(reinterpret_cast<const unsigned char*>(p.data().data()), p.data().size() * sizeof(T));
  }
  return h;
}

// Runs one full episode per corpus image and aggregates task metrics.
// Per-image values come straight from explore's final step record, so every
// number here is reproducible from a single-episode run. `episodes_out`, when
// given, receives the per-image reports (for occupancy maps and figures).
template <class T>
MetricsRecord evaluate(const MaeModel<T>& model, const Corpus& corpus, const GlimpseSpec& spec,
                       Selector selector, std::uint64_t seed, int threads = 1,
                       std::vector<EpisodeReport>* episodes_out = nullptr) {
  const ModelConfig& cfg = model.config();
  spec.validate(cfg.patch);
  if (corpus.samples.empty()) throw DataError("evaluate: empty corpus");
  const std::size_t n = corpus.samples.size();

  std::vector<EpisodeReport> reports(n);
  parallel_for(n, threads, [&](std::size_t i) {
    ExploreOptions opts;
    opts.selector = selector;
    opts.seed = episode_seed(seed, i);
    opts.with_final = true;
    opts.record_preds = (cfg.task == Task::segmentation);
    reports[i] = explore(model, corpus.samples[i], spec, opts);
  });

  std::vector<double> losses(n), metrics(n);
  for (std::size_t i = 0; i < n; ++i) {
    losses[i] = reports[i].steps.back().loss;
    metrics[i] = reports[i].steps.back().metric;
  }

  MetricsRecord rec;
  rec.task = task_name(cfg.task);
  rec.selector = selector_name(selector);
  rec.regime = spec.regime();
  rec.seed = seed;
  const RegimeAccounting acct = regime_accounting(spec, cfg.image_h, cfg.image_w, cfg.patch);
  rec.pixel_pct = acct.pixel_pct;
  rec.area_pct = acct.area_pct;

  switch (cfg.task) {
    case Task::reconstruction:
      rec.metrics.emplace_back("rmse", detail::kahan_mean(losses));
      break;
    case Task::classification:
      rec.metrics.emplace_back("accuracy", detail::kahan_mean(metrics));
      rec.metrics.emplace_back("ce", detail::kahan_mean(losses));
      break;
    case Task::segmentation: {
      const int P = cfg.patch, gw = cfg.grid_w(), C = cfg.seg_classes;
      std::vector<std::vector<int>> pred_grids(n), truth_grids(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& preds = reports[i].steps.back().pred_patches;
        std::vector<int> grid(static_cast<std::size_t>(cfg.image_h) * cfg.image_w);
        for (int y = 0; y < cfg.image_h; ++y)
          for (int x = 0; x < cfg.image_w; ++x) {
            const std::size_t patch_i = static_cast<std::size_t>(y / P) * gw + (x / P);
            const std::size_t base = static_cast<std::size_t>(y % P) * P + (x % P);
            const std::size_t row = patch_i * static_cast<std::size_t>(cfg.head_out_dim());
            float mx = preds[row + base];
            int arg = 0;
            for (int c = 1; c < C; ++c) {
              const float v = preds[row + static_cast<std::size_t>(c) * P * P + base];
              if (v > mx) {
                mx = v;
                arg = c;
              }
            }
            grid[static_cast<std::size_t>(y) * cfg.image_w + x] = arg;
          }
        pred_grids[i] = std::move(grid);
        truth_grids[i] = corpus.samples[i].seg;
      }
      const SegMetrics sm = segmentation_metrics(pred_grids, truth_grids, C);
      rec.metrics.emplace_back("pa", sm.pa);
      rec.metrics.emplace_back("mpa", sm.mpa);
      rec.metrics.emplace_back("iou", sm.iou);
      rec.metrics.emplace_back("ce", detail::kahan_mean(losses));
      break;
    }
  }
  if (episodes_out) *episodes_out = std::move(reports);
  return rec;
}

// Table-4-shaped ablation: identical weights, corpus, and per-image seeds,
// differing only in the selector. Row order: attention, random, checker.
template <class T>
std::vector<MetricsRecord> ablate_selectors(const MaeModel<T>& model, const Corpus& corpus,
                                            const GlimpseSpec& spec, std::uint64_t seed,
                                            int threads = 1) {
  return {evaluate(model, corpus, spec, Selector::ame, seed, threads),
          evaluate(model, corpus, spec, Selector::random, seed, threads),
          evaluate(model, corpus, spec, Selector::checkerboard, seed, threads)};
}

// ---------------------------------------------------------------------------
// Glimpse-count sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  int t = 0;
  double value = 0;
};

struct SweepResult {
  std::string task;
  std::string selector;
  std::string regime;
  std::string metric;  // name of the curve's y value
  std::vector<SweepPoint> points;
};

// Corpus-mean task metric after each t in `t_values`. A single episode per
// image at max(t_values) glimpses supplies every point: the step record with
// matching t is exactly what a shorter run would have produced, because
// selection at step k never looks ahead. Episodes that exhaust the grid early
// contribute their final value to all later t.
template <class T>
SweepResult glimpse_sweep(const MaeModel<T>& model, const Corpus& corpus, GlimpseSpec spec,
                          Selector selector, const std::vector<int>& t_values, std::uint64_t seed,
                          int threads = 1) {
  const ModelConfig& cfg = model.config();
  if (t_values.empty()) throw ContractError("glimpse_sweep: no glimpse counts requested");
  for (int t : t_values)
    if (t < 0) throw ContractError("glimpse_sweep: negative glimpse count");
  if (corpus.samples.empty()) throw DataError("glimpse_sweep: empty corpus");
  spec.num_glimpses = *std::max_element(t_values.begin(), t_values.end());
  spec.validate(cfg.patch);

  const std::size_t n = corpus.samples.size();
  // per image, the metric value indexed by glimpses taken (filled forward)
  std::vector<std::vector<double>> value_at(n);
  parallel_for(n, threads, [&](std::size_t i) {
    ExploreOptions opts;
    opts.selector = selector;
    opts.seed = episode_seed(seed, i);
    opts.with_final = true;
    EpisodeReport rep = explore(model, corpus.samples[i], spec, opts);
    std::vector<double>& vals = value_at[i];
    vals.assign(static_cast<std::size_t>(spec.num_glimpses) + 1, 0.0);
    int max_t = 0;
    for (const StepRecord& s : rep.steps) {
      const double v = (cfg.task == Task::reconstruction) ? s.loss : s.metric;
      vals[static_cast<std::size_t>(s.t)] = v;
      max_t = std::max(max_t, s.t);
    }
    for (std::size_t t = static_cast<std::size_t>(max_t) + 1; t < vals.size(); ++t)
      vals[t] = vals[static_cast<std::size_t>(max_t)];
  });

  SweepResult out;
  out.task = task_name(cfg.task);
  out.selector = selector_name(selector);
  out.regime = spec.regime();
  switch (cfg.task) {
    case Task::reconstruction: out.metric = "rmse"; break;
    case Task::classification: out.metric = "accuracy"; break;
    case Task::segmentation: out.metric = "pa"; break;
  }
  for (int t : t_values) {
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = value_at[i][static_cast<std::size_t>(t)];
    out.points.push_back({t, detail::kahan_mean(column)});
  }
  return out;
}

inline nlohmann::json sweep_to_json(const SweepResult& s) {
  nlohmann::json j;
  j["task"] = s.task;
  j["selector"] = s.selector;
  j["regime"] = s.regime;
  j["metric"] = s.metric;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : s.points) pts.push_back({{"t", p.t}, {"value", p.value}});
  j["points"] = std::move(pts);
  return j;
}

inline std::string sweep_to_tsv(const SweepResult& s) {
  std::ostringstream os;
  os << "t\t" << s.metric << '\n';
  for (const auto& p : s.points) os << p.t << '\t' << format_double(p.value) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Average glimpse maps
// ---------------------------------------------------------------------------

struct GlimpseMaps {
  int gh = 0, gw = 0;
  std::vector<double> occupancy;     // fraction of episodes observing each patch
  std::vector<double> first_anchor;  // fraction of episodes opening at each cell
};

inline GlimpseMaps average_glimpse_map(const std::vector<EpisodeReport>& episodes, int gh,
                                       int gw) {
  if (episodes.empty()) throw ContractError("average_glimpse_map: no episodes");
  const std::size_t cells = static_cast<std::size_t>(gh) * gw;
  GlimpseMaps maps;
  maps.gh = gh;
  maps.gw = gw;
  maps.occupancy.assign(cells, 0.0);
  maps.first_anchor.assign(cells, 0.0);
  for (const EpisodeReport& e : episodes) {
    if (e.known_mask.size() != cells)
      throw ContractError("average_glimpse_map: episode grid does not match " +
                          std::to_string(gh) + "x" + std::to_string(gw));
    for (std::size_t i = 0; i < cells; ++i)
      if (e.known_mask[i]) maps.occupancy[i] += 1.0;
    if (!e.anchors.empty()) maps.first_anchor[static_cast<std::size_t>(e.anchors.front())] += 1.0;
  }
  const double inv = 1.0 / static_cast<double>(episodes.size());
  for (double& v : maps.occupancy) v *= inv;
  for (double& v : maps.first_anchor) v *= inv;
  return maps;
}

// ---------------------------------------------------------------------------
// Attention-source-layer sweep
// ---------------------------------------------------------------------------

struct LayerSweepRow {
  int layer = 0;
  double value = 0;
};

struct LayerSweep {
  std::string task;
  std::string selector;
  std::string regime;
  std::string metric;
  std::vector<LayerSweepRow> rows;  // one per decoder layer, in layer order
};

// Evaluates the corpus once per candidate attention-source layer. Each row
// equals an independent evaluation of a model statically configured with that
// layer: the probe shares weights and differs only in where maps are read.
template <class T>
LayerSweep layer_sweep(const MaeModel<T>& model, const Corpus& corpus, const GlimpseSpec& spec,
                       Selector selector, std::uint64_t seed, int threads = 1) {
  LayerSweep sweep;
  for (int layer = 0; layer < model.config().dec_layers; ++layer) {
    MaeModel<T> probe = model;  // shares parameter storage; config is copied
    probe.set_attention_source_layer(layer);
    MetricsRecord rec = evaluate(probe, corpus, spec, selector, seed, threads);
    if (sweep.rows.empty()) {
      sweep.task = rec.task;
      sweep.selector = rec.selector;
      sweep.regime = rec.regime;
      sweep.metric = rec.metrics.front().first;
    }
    sweep.rows.push_back({layer, rec.metrics.front().second});
  }
  return sweep;
}

inline nlohmann::json layer_sweep_to_json(const LayerSweep& s) {
  nlohmann::json j;
  j["task"] = s.task;
  j["selector"] = s.selector;
  j["regime"] = s.regime;
  j["metric"] = s.metric;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) rows.push_back({{"layer", r.layer}, {"value", r.value}});
  j["rows"] = std::move(rows);
  return j;
}

inline std::string layer_sweep_to_tsv(const LayerSweep& s) {
  std::ostringstream os;
  os << "layer\t" << s.metric << '\n';
  for (const auto& r : s.rows) os << r.layer << '\t' << format_double(r.value) << '\n';
  return os.str();
}

}  // namespace glimpse
