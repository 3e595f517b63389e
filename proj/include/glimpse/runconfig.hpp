#pragma once
// RunConfig: the single merged configuration every command runs from. Loaded
// from a plain key=value file ('#' starts a comment), then overridden by
// command-line `key=value` pairs in order. The fully resolved text is echoed
// into the output directory before any work starts, so a run's provenance is
// always one file away.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "glimpse/model.hpp"
#include "glimpse/policy.hpp"
#include "glimpse/train.hpp"

namespace glimpse {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GlimpseSpec glimpse;

  // corpus
  std::string generator = "gradients";  // synthetic family for synth or on-the-fly data
  int corpus_n = 100;
  std::uint64_t corpus_seed = 0;
  std::string data;  // corpus directory; empty = synthesize in memory

  // run
  Selector selector = Selector::ame;
  std::uint64_t seed = 0;
  std::string out = "out";
  int threads = 1;
  double val_ratio = 0.2;
  bool head_only = false;
  bool timing = false;
  std::string checkpoint;       // weights for explore/eval; empty = fresh init
  std::string init_checkpoint;  // warm start for train
  int index = 0;                // sample explored by cmd_explore

  // eval switches
  bool ablate = false;
  bool sweep_layers = false;
  bool glimpse_map = false;
  std::vector<int> sweep_glimpses;  // empty = no glimpse-count sweep

  void set(const std::string& key, const std::string& val) {
    auto to_int = [&](const std::string& v) {
      try {
        std::size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
      } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs an integer, got '" + v + "'");
      }
    };
    auto to_u64 = [&](const std::string& v) {
      try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(x);
      } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs an unsigned integer, got '" + v + "'");
      }
    };
    auto to_double = [&](const std::string& v) {
      try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
      } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a number, got '" + v + "'");
      }
    };
    auto to_bool = [&](const std::string& v) {
      if (v == "1" || v == "true") return true;
      if (v == "0" || v == "false") return false;
      throw ConfigError("config: key '" + key + "' needs 0/1, got '" + v + "'");
    };

    // model
    if (key == "image_h") model.image_h = to_int(val);
    else if (key == "image_w") model.image_w = to_int(val);
    else if (key == "patch") model.patch = to_int(val);
    else if (key == "channels") model.channels = to_int(val);
    else if (key == "enc_layers") model.enc_layers = to_int(val);
    else if (key == "enc_dim") model.enc_dim = to_int(val);
    else if (key == "enc_heads") model.enc_heads = to_int(val);
    else if (key == "dec_layers") model.dec_layers = to_int(val);
    else if (key == "dec_dim") model.dec_dim = to_int(val);
    else if (key == "dec_heads") model.dec_heads = to_int(val);
    else if (key == "mlp_ratio") model.mlp_ratio = to_int(val);
    else if (key == "task") model.task = task_from_name(val);
    else if (key == "num_classes") model.num_classes = to_int(val);
    else if (key == "seg_classes") model.seg_classes = to_int(val);
    else if (key == "attention_source_layer") model.attention_source_layer = to_int(val);
    else if (key == "classifier_two_layer") model.classifier_two_layer = to_bool(val);
    else if (key == "entropy_source") model.entropy_source = val;
    // train
    else if (key == "epochs") train.epochs = to_int(val);
    else if (key == "warmup_epochs") train.warmup_epochs = to_int(val);
    else if (key == "lr_max") train.lr_max = to_double(val);
    else if (key == "lr_min") train.lr_min = to_double(val);
    else if (key == "weight_decay") train.weight_decay = to_double(val);
    else if (key == "batch") train.batch = to_int(val);
    else if (key == "patience") train.patience = to_int(val);
    else if (key == "lambda") train.lambda = to_double(val);
    else if (key == "recon_scope") {
      if (val == "all") train.recon_scope = LossScope::all;
      else if (val == "masked_only") train.recon_scope = LossScope::masked_only;
      else throw ConfigError("config: recon_scope must be all|masked_only, got '" + val + "'");
    }
    // glimpse
    else if (key == "glimpse_kind") {
      if (val == "plain") glimpse.kind = GlimpseKind::plain;
      else if (val == "retinal") glimpse.kind = GlimpseKind::retinal;
      else throw ConfigError("config: glimpse_kind must be plain|retinal, got '" + val + "'");
    }
    else if (key == "glimpse_px") glimpse.glimpse_px = to_int(val);
    else if (key == "levels") glimpse.levels = to_int(val);
    else if (key == "num_glimpses") glimpse.num_glimpses = to_int(val);
    // corpus
    else if (key == "generator") generator = val;
    else if (key == "corpus_n") corpus_n = to_int(val);
    else if (key == "corpus_seed") corpus_seed = to_u64(val);
    else if (key == "data") data = val;
    // run
    else if (key == "selector") selector = selector_from_name(val);
    else if (key == "seed") seed = to_u64(val);
    else if (key == "out") out = val;
    else if (key == "threads") threads = to_int(val);
    else if (key == "val_ratio") val_ratio = to_double(val);
    else if (key == "head_only") head_only = to_bool(val);
    else if (key == "timing") timing = to_bool(val);
    else if (key == "checkpoint") checkpoint = val;
    else if (key == "init_checkpoint") init_checkpoint = val;
    else if (key == "index") index = to_int(val);
    // eval switches
    else if (key == "ablate") ablate = to_bool(val);
    else if (key == "sweep_layers") sweep_layers = to_bool(val);
    else if (key == "glimpse_map") glimpse_map = to_bool(val);
    else if (key == "sweep_glimpses") {
      sweep_glimpses.clear();
      if (!val.empty()) {
        std::istringstream in(val);
        std::string item;
        while (std::getline(in, item, ','))
          sweep_glimpses.push_back(to_int(item));
      }
    }
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  // One "k=v" assignment; used for config-file lines and CLI overrides alike.
  void set_line(const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("config: expected key=value, got '" + line + "'");
    set(line.substr(0, eq), line.substr(eq + 1));
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
        line.pop_back();
      std::size_t start = 0;
      while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
      line.erase(0, start);
      if (line.empty()) continue;
      try {
        set_line(line);
      } catch (const ConfigError& e) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  // The provenance echo: every key in a fixed order, parseable by load_file.
  std::string to_kv() const {
    std::ostringstream os;
    os << "# model\n" << model.to_kv();
    os << "# train\n"
       << "epochs=" << train.epochs << "\nwarmup_epochs=" << train.warmup_epochs
       << "\nlr_max=" << format_double(train.lr_max) << "\nlr_min=" << format_double(train.lr_min)
       << "\nweight_decay=" << format_double(train.weight_decay) << "\nbatch=" << train.batch
       << "\npatience=" << train.patience << "\nlambda=" << format_double(train.lambda)
       << "\nrecon_scope="
       << (train.recon_scope == LossScope::masked_only ? "masked_only" : "all") << "\n";
    os << "# glimpse\n"
       << "glimpse_kind=" << (glimpse.kind == GlimpseKind::retinal ? "retinal" : "plain")
       << "\nglimpse_px=" << glimpse.glimpse_px << "\nlevels=" << glimpse.levels
       << "\nnum_glimpses=" << glimpse.num_glimpses << "\n";
    os << "# corpus\n"
       << "generator=" << generator << "\ncorpus_n=" << corpus_n << "\ncorpus_seed=" << corpus_seed
       << "\ndata=" << data << "\n";
    os << "# run\n"
       << "selector=" << selector_name(selector) << "\nseed=" << seed << "\nout=" << out
       << "\nthreads=" << threads << "\nval_ratio=" << format_double(val_ratio)
       << "\nhead_only=" << (head_only ? 1 : 0) << "\ntiming=" << (timing ? 1 : 0)
       << "\ncheckpoint=" << checkpoint << "\ninit_checkpoint=" << init_checkpoint
       << "\nindex=" << index << "\n";
    os << "# eval\n"
       << "ablate=" << (ablate ? 1 : 0) << "\nsweep_layers=" << (sweep_layers ? 1 : 0)
       << "\nglimpse_map=" << (glimpse_map ? 1 : 0) << "\nsweep_glimpses=";
    for (std::size_t i = 0; i < sweep_glimpses.size(); ++i)
      os << (i ? "," : "") << sweep_glimpses[i];
    os << "\n";
    return os.str();
  }
};

}  // namespace glimpse
