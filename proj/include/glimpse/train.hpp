#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "glimpse/data.hpp"
#include "glimpse/error.hpp"
#include "glimpse/model.hpp"
#include "glimpse/parallel.hpp"
#include "glimpse/policy.hpp"
#include "glimpse/rng.hpp"
#include "glimpse/tensor.hpp"

namespace glimpse {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class LossScope { all, masked_only };

struct TrainConfig {
  int epochs = 75;
  int warmup_epochs = 10;
  double lr_max = 1e-4;
  double lr_min = 1e-8;
  double weight_decay = 0.0;  // reconstruction default; labeled tasks use 1e-4
  int batch = 16;
  int patience = 10;   // consecutive non-improving epochs tolerated before stopping
  double lambda = 1.0; // decoder-loss mix weight when training classification end to end
  std::uint64_t seed = 0;
  LossScope recon_scope = LossScope::all;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
      throw ConfigError("train: warmup_epochs must lie in [0, epochs)");
    if (!(lr_min < lr_max)) throw ConfigError("train: lr_min must be below lr_max");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (patience < 0) throw ConfigError("train: patience must be >= 0");
    if (lambda < 0) throw ConfigError("train: lambda must be >= 0");
  }
};

// Linear warmup to lr_max, then half-cycle cosine down to lr_min.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0," +
                        std::to_string(cfg.epochs) + ")");
  if (epoch < cfg.warmup_epochs)
    return cfg.lr_max * (epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  const double progress = static_cast<double>(epoch - cfg.warmup_epochs) /
                          static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  return cfg.lr_min +
         0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// Task losses (tape-aware)
// ---------------------------------------------------------------------------

// RMSE between prediction and target patch stacks. Scope selects which patch
// rows count: every position (default) or only positions absent from `known`.
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& target,
                              const std::vector<std::uint8_t>& known = {},
                              LossScope scope = LossScope::all) {
  Tensor<T> p = pred, t = target;
  if (scope == LossScope::masked_only) {
    if (known.size() != pred.rows())
      throw ContractError("reconstruction_loss: known mask covers " +
                          std::to_string(known.size()) + " of " + std::to_string(pred.rows()) +
                          " patches");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < known.size(); ++i)
      if (!known[i]) keep.push_back(i);
    if (keep.empty()) throw ContractError("reconstruction_loss: scope selects no positions");
    p = gather_rows(pred, keep);
    t = gather_rows(target, std::move(keep));
  }
  Tensor<T> d = sub(p, t);
  return glimpse::sqrt(mean(mul(d, d)));
}

// Cross entropy on the class logits plus lambda times the decoder loss.
template <class T>
Tensor<T> classification_loss(const Tensor<T>& logits, int label, const Tensor<T>& decoder_loss,
                              double lambda) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.cols())
    throw ContractError("classification_loss: label " + std::to_string(label) +
                        " out of range [0," + std::to_string(logits.cols()) + ")");
  Tensor<T> ce = cross_entropy_logits(logits, {label});
  if (lambda == 0.0) return ce;
  return add(ce, scale(decoder_loss, static_cast<T>(lambda)));
}

// Mean cross entropy over labeled pixels. `preds` holds per-patch stacks of
// class-major P*P logit planes; labels outside [0,C) must use ignore_label.
template <class T>
Tensor<T> segmentation_loss(const Tensor<T>& preds, const std::vector<int>& seg, int image_h,
                            int image_w, int patch, int classes, int ignore_label = -1) {
  const std::size_t pixels = static_cast<std::size_t>(image_h) * image_w;
  if (seg.size() != pixels)
    throw ContractError("segmentation_loss: " + std::to_string(seg.size()) + " labels for " +
                        std::to_string(pixels) + " pixels");
  const int gw = image_w / patch;
  const std::size_t plane = static_cast<std::size_t>(patch) * patch;
  if (preds.rows() != pixels / plane || preds.cols() != static_cast<std::size_t>(classes) * plane)
    throw ShapeError("segmentation_loss: prediction " + shape_str(preds.shape()) +
                     " does not tile " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                     " with " + std::to_string(classes) + " classes");
  std::vector<std::size_t> idx(pixels * static_cast<std::size_t>(classes));
  for (int y = 0; y < image_h; ++y)
    for (int x = 0; x < image_w; ++x) {
      const std::size_t r = static_cast<std::size_t>(y) * image_w + x;
      const std::size_t patch_i = static_cast<std::size_t>(y / patch) * gw + (x / patch);
      const std::size_t base = static_cast<std::size_t>(y % patch) * patch + (x % patch);
      for (int c = 0; c < classes; ++c)
        idx[r * classes + c] =
            patch_i * preds.cols() + static_cast<std::size_t>(c) * plane + base;
    }
  Tensor<T> pixel_logits =
      gather_elems(preds, std::move(idx), {pixels, static_cast<std::size_t>(classes)});
  return cross_entropy_logits(pixel_logits, seg, ignore_label);
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay, bias-corrected moments)
// ---------------------------------------------------------------------------

template <class T>
struct AdamWState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long t = 0;
  std::vector<std::vector<T>> m, v;  // parallel to the parameter list
};

// One update over the `trainable` subset of params; grads are flat buffers
// parallel to params (empty buffer = zero gradient).
template <class T>
void adamw_step(const std::vector<std::pair<std::string, Tensor<T>>>& params,
                const std::vector<std::size_t>& trainable,
                const std::vector<std::vector<T>>& grads, AdamWState<T>& state, double lr,
                double weight_decay) {
  if (grads.size() != params.size())
    throw ShapeError("adamw: " + std::to_string(grads.size()) + " gradient buffers for " +
                     std::to_string(params.size()) + " parameters");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t pi : trainable) {
    Tensor<T> p = params[pi].second;  // handle copy; shares storage
    const std::size_t n = p.size();
    const auto& g = grads[pi];
    if (!g.empty() && g.size() != n)
      throw ShapeError("adamw: gradient for '" + params[pi].first + "' has " +
                       std::to_string(g.size()) + " elements, parameter has " + std::to_string(n));
    for (std::size_t k = 0; k < g.size(); ++k)
      if (!std::isfinite(static_cast<double>(g[k])))
        throw NumericError("adamw: non-finite gradient in '" + params[pi].first + "'");
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    if (m.size() != n) m.assign(n, T(0));
    if (v.size() != n) v.assign(n, T(0));
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = g.empty() ? 0.0 : static_cast<double>(g[k]);
      const double mk = state.beta1 * static_cast<double>(m[k]) + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * static_cast<double>(v[k]) + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      const double pk = static_cast<double>(p.at(k));
      p.at(k) = static_cast<T>(pk - (lr * mhat / (std::sqrt(vhat) + state.eps) +
                                     lr * weight_decay * pk));
    }
  }
}

// Convenience form covering every parameter.
template <class T>
void adamw_step(const std::vector<std::pair<std::string, Tensor<T>>>& params,
                const std::vector<std::vector<T>>& grads, AdamWState<T>& state, double lr,
                double weight_decay) {
  std::vector<std::size_t> all(params.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  adamw_step(params, all, grads, state, lr, weight_decay);
}

// ---------------------------------------------------------------------------
// Episode loss: the one taped forward of a training step
// ---------------------------------------------------------------------------

// Final forward over the episode's observations; gradients flow only through
// this pass (glimpse selection is a detached hard decision).
template <class T>
Tensor<T> episode_loss(const MaeModel<T>& model, const Sample& sample, const EpisodeReport& rep,
                       const TrainConfig& cfg) {
  const ModelConfig& mc = model.config();
  const Tensor<T> obs = patchify<T>(rep.final_observed, mc.patch);
  Tensor<T> visible(
      {rep.order.size(), static_cast<std::size_t>(mc.patch_dim())});
  for (std::size_t i = 0; i < rep.order.size(); ++i)
    for (std::size_t j = 0; j < visible.cols(); ++j)
      visible.at(i, j) = obs.at(static_cast<std::size_t>(rep.order[i]), j);
  auto enc = model.encode(visible, rep.order);
  auto dec = model.decode(enc.latents, rep.order);
  const Tensor<T> target = patchify<T>(sample.image, mc.patch);
  switch (mc.task) {
    case Task::reconstruction:
      return reconstruction_loss(dec.preds, target, rep.known_mask, cfg.recon_scope);
    case Task::classification: {
      Tensor<T> dec_loss = reconstruction_loss(dec.preds, target);
      Tensor<T> logits = model.classify(enc.latents);
      return classification_loss(logits, sample.label, dec_loss, cfg.lambda);
    }
    case Task::segmentation:
      return segmentation_loss(dec.preds, sample.seg, mc.image_h, mc.image_w, mc.patch,
                               mc.seg_classes);
  }
  throw ContractError("episode_loss: unknown task");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double lr = 0, train_loss = 0, val_loss = 0, val_metric = 0, wall_ms = 0;
};

struct FitOptions {
  int threads = 1;
  bool head_only = false;  // update only the task head's parameters
  bool timing = false;     // fill wall_ms (off keeps history byte-stable)
  double val_ratio = 0.2;  // fraction of the corpus held out for validation
};

struct FitResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  bool diverged = false;
  std::string note;  // diagnostic when training aborted
};

namespace detail {

inline double kahan_mean(const std::vector<double>& xs) {
  double sum = 0, comp = 0;
  for (double x : xs) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
}

}  // namespace detail

// Epoch loop: every training step explores one image with the selector in the
// loop, then backpropagates the task loss through the final forward alone.
// Early stopping tracks validation loss; the best weights are restored into
// the model before returning. Loss divergence aborts with the last good
// checkpoint in place and `diverged` set.
template <class T>
FitResult fit(MaeModel<T>& model, const Corpus& corpus, const TrainConfig& cfg,
              const GlimpseSpec& spec, Selector selector, const FitOptions& opts = {}) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  spec.validate(mc.patch);
  if (corpus.samples.size() < 2)
    throw DataError("fit: need at least two samples to hold out validation data");
  if (!(opts.val_ratio > 0.0 && opts.val_ratio < 1.0))
    throw ConfigError("fit: val_ratio must lie in (0,1)");
  if (mc.task == Task::classification)
    for (const auto& s : corpus.samples)
      if (s.label < 0 || s.label >= mc.num_classes)
        throw DataError("fit: classification needs labels within [0," +
                        std::to_string(mc.num_classes) + ") on every sample");
  if (mc.task == Task::segmentation)
    for (const auto& s : corpus.samples)
      if (s.seg.size() != static_cast<std::size_t>(mc.image_h) * mc.image_w)
        throw DataError("fit: segmentation needs a full mask on every sample");

  const Split split =
      split_indices(static_cast<int>(corpus.samples.size()), 1.0 - opts.val_ratio, cfg.seed);
  const auto& params = model.params();
  std::vector<std::size_t> trainable;
  const std::string head_prefix = mc.task == Task::classification ? "cls_head." : "head.";
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!opts.head_only || params[i].first.rfind(head_prefix, 0) == 0) trainable.push_back(i);
  if (trainable.empty()) throw ConfigError("fit: no trainable parameters selected");

  auto snapshot = [&params] {
    std::vector<std::vector<T>> s;
    s.reserve(params.size());
    for (const auto& [name, p] : params) s.push_back(p.data());
    return s;
  };
  auto restore = [&params](const std::vector<std::vector<T>>& s) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> p = params[i].second;
      p.data() = s[i];
    }
  };
  std::vector<std::vector<T>> best = snapshot();

  AdamWState<T> opt;
  FitResult res;
  int bad_epochs = 0;
  const int effective_patience = std::max(1, cfg.patience);
  const Rng root(cfg.seed);

  auto episode_seed = [&root](std::uint64_t stream, std::uint64_t a, std::uint64_t b) {
    Rng r = root.split(stream).split(a).split(b);
    return r.next_u64();
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg);

    std::vector<int> order = split.train;
    Rng shuffle_rng = root.split(0xe70c5u).split(static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    std::vector<double> train_losses;
    train_losses.reserve(order.size());
    std::string abort_note;

    for (std::size_t b0 = 0; b0 < order.size() && abort_note.empty(); b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t bn = std::min(order.size() - b0, static_cast<std::size_t>(cfg.batch));
      std::vector<LeafGradStore<T>> stores;
      stores.reserve(bn);
      for (std::size_t i = 0; i < bn; ++i) stores.emplace_back(params.size());
      std::vector<double> losses(bn, 0.0);
      try {
        parallel_for(static_cast<int>(bn), opts.threads, [&](int bi) {
          const Sample& s = corpus.samples[static_cast<std::size_t>(
              order[b0 + static_cast<std::size_t>(bi)])];
          ExploreOptions eo;
          eo.selector = selector;
          eo.seed = episode_seed(0x7ea11u, static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(order[b0 + static_cast<std::size_t>(bi)]));
          eo.with_final = false;
          EpisodeReport rep = explore(model, s, spec, eo);
          typename LeafGradStore<T>::Scope bind(stores[static_cast<std::size_t>(bi)]);
          Tape<T> tape;
          typename Tape<T>::Scope scope(tape);
          Tensor<T> loss = episode_loss(model, s, rep, cfg);
          losses[static_cast<std::size_t>(bi)] = static_cast<double>(loss.item());
          tape.backward(loss);
        });
      } catch (const NumericError& e) {
        abort_note = e.what();
        break;
      }
      for (double l : losses)
        if (!std::isfinite(l)) abort_note = "fit: non-finite training loss";
      if (!abort_note.empty()) break;
      train_losses.insert(train_losses.end(), losses.begin(), losses.end());

      std::vector<std::vector<T>> grads(params.size());
      for (std::size_t pi : trainable) grads[pi].assign(params[pi].second.size(), T(0));
      for (auto& st : stores)  // episode order: reduction is thread-count independent
        for (std::size_t pi : trainable) {
          const auto& slot = st.slots()[pi];
          for (std::size_t k = 0; k < slot.size(); ++k) grads[pi][k] += slot[k];
        }
      try {
        adamw_step(params, trainable, grads, opt, lr, cfg.weight_decay);
      } catch (const NumericError& e) {
        abort_note = e.what();
      }
    }

    if (!abort_note.empty()) {
      restore(best);
      res.diverged = true;
      res.note = abort_note;
      return res;
    }

    // validation: full episodes with per-sample fixed seeds, read-only weights
    std::vector<double> vloss(split.val.size()), vmetric(split.val.size());
    parallel_for(static_cast<int>(split.val.size()), opts.threads, [&](int vi) {
      const int si = split.val[static_cast<std::size_t>(vi)];
      ExploreOptions eo;
      eo.selector = selector;
      eo.seed = episode_seed(0x7a11dau, static_cast<std::uint64_t>(si), 0);
      EpisodeReport rep = explore(model, corpus.samples[static_cast<std::size_t>(si)], spec, eo);
      vloss[static_cast<std::size_t>(vi)] = rep.steps.back().loss;
      vmetric[static_cast<std::size_t>(vi)] = rep.steps.back().metric;
    });
    const double val_loss = detail::kahan_mean(vloss);
    const double val_metric = detail::kahan_mean(vmetric);
    if (!std::isfinite(val_loss)) {
      restore(best);
      res.diverged = true;
      res.note = "fit: non-finite validation loss";
      return res;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = detail::kahan_mean(train_losses);
    rec.val_loss = val_loss;
    rec.val_metric = val_metric;
    if (opts.timing)
      rec.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(rec);

    if (val_loss < res.best_val) {
      res.best_val = val_loss;
      res.best_epoch = epoch;
      best = snapshot();
      bad_epochs = 0;
    } else if (++bad_epochs >= effective_patience) {
      res.early_stopped = true;
      break;
    }
  }

  restore(best);
  return res;
}

inline nlohmann::json epoch_to_json(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_metric"] = r.val_metric;
  j["wall_ms"] = r.wall_ms;
  return j;
}

}  // namespace glimpse
