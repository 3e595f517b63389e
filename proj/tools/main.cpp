// Command-line surface: corpus synthesis, training, single-episode
// exploration with figure dumps, and evaluation with sweeps and ablations.
// Every command resolves one RunConfig — config file first, then --set
// overrides, then explicit flags — echoes it into the output directory
// before any work, and writes all artifacts relative to that directory.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// divergence, 5 internal contract violation, 1 anything else.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "glimpse/checkpoint.hpp"
#include "glimpse/eval.hpp"
#include "glimpse/figures.hpp"
#include "glimpse/runconfig.hpp"

namespace fs = std::filesystem;
using namespace glimpse;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitContract = 5;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("write failed for " + path.string());
}

// The provenance echo; runs before any real work.
void echo_config(const RunConfig& rc) {
  fs::create_directories(rc.out);
  write_text(fs::path(rc.out) / "config.resolved", rc.to_kv());
}

Corpus obtain_corpus(const RunConfig& rc) {
  if (!rc.data.empty()) return load_corpus(rc.data, rc.model.image_h, rc.model.image_w);
  return synthesize(rc.generator, rc.corpus_n, rc.model.image_h, rc.model.image_w,
                    rc.corpus_seed);
}

// Explore/eval weights: the checkpoint when one is named, a fresh seeded
// initialization otherwise. Capture knobs set explicitly in the run config
// override the checkpoint's (weights are unaffected by them).
MaeModel<double> obtain_model(const RunConfig& rc) {
  if (rc.checkpoint.empty()) {
    rc.model.validate();
    return MaeModel<double>(rc.model, rc.seed);
  }
  MaeModel<double> model = load_checkpoint<double>(rc.checkpoint);
  const ModelConfig defaults;
  if (rc.model.attention_source_layer != defaults.attention_source_layer)
    model.set_attention_source_layer(rc.model.attention_source_layer);
  if (rc.model.entropy_source != defaults.entropy_source) {
    ModelConfig c = model.config();
    c.entropy_source = rc.model.entropy_source;
    c.validate();
    model.config_mut() = c;
  }
  return model;
}

int cmd_synth(const RunConfig& rc) {
  echo_config(rc);
  const std::string dir = rc.data.empty() ? (fs::path(rc.out) / "corpus").string() : rc.data;
  Corpus corpus = synthesize(rc.generator, rc.corpus_n, rc.model.image_h, rc.model.image_w,
                             rc.corpus_seed);
  save_corpus(dir, corpus);
  std::cout << "wrote " << corpus.samples.size() << " " << rc.generator << " samples to " << dir
            << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc) {
  rc.model.validate();
  TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  tc.validate();
  rc.glimpse.validate(rc.model.patch);
  echo_config(rc);

  Corpus corpus = obtain_corpus(rc);
  MaeModel<double> model(rc.model, rc.seed);
  if (!rc.init_checkpoint.empty()) {
    const std::size_t copied = load_weights_into(model, rc.init_checkpoint);
    std::cout << "warm start: " << copied << "/" << model.params().size()
              << " parameters from " << rc.init_checkpoint << "\n";
  }

  FitOptions opts;
  opts.threads = rc.threads;
  opts.head_only = rc.head_only;
  opts.timing = rc.timing;
  opts.val_ratio = rc.val_ratio;
  FitResult res = fit(model, corpus, tc, rc.glimpse, rc.selector, opts);

  std::ostringstream history;
  for (const EpochRecord& r : res.history) history << epoch_to_json(r).dump() << "\n";
  write_text(fs::path(rc.out) / "history.jsonl", history.str());
  save_checkpoint((fs::path(rc.out) / "checkpoint.bin").string(), model);
  nlohmann::json summary;
  summary["epochs_completed"] = res.history.size();
  summary["best_epoch"] = res.best_epoch;
  summary["best_val"] = res.best_val;
  summary["early_stopped"] = res.early_stopped;
  summary["diverged"] = res.diverged;
  summary["note"] = res.note;
  write_text(fs::path(rc.out) / "result.json", summary.dump(2) + "\n");

  std::cout << "trained " << res.history.size() << " epochs; best epoch " << res.best_epoch
            << " val " << res.best_val << (res.diverged ? " (diverged)" : "") << "\n";
  return res.diverged ? kExitNumeric : 0;
}

int cmd_explore(const RunConfig& rc) {
  rc.glimpse.validate(rc.model.patch);
  echo_config(rc);
  Corpus corpus = obtain_corpus(rc);
  MaeModel<double> model = obtain_model(rc);
  if (rc.index < 0 || static_cast<std::size_t>(rc.index) >= corpus.samples.size())
    throw ConfigError("explore: index " + std::to_string(rc.index) + " outside corpus of " +
                      std::to_string(corpus.samples.size()));
  const Sample& sample = corpus.samples[static_cast<std::size_t>(rc.index)];
  const ModelConfig& cfg = model.config();

  ExploreOptions opts;
  opts.selector = rc.selector;
  opts.seed = rc.seed;
  opts.record_maps = true;
  opts.record_preds = true;
  opts.record_inputs = true;
  opts.with_final = true;
  opts.timing = rc.timing;
  EpisodeReport rep = explore(model, sample, rc.glimpse, opts);

  const fs::path out(rc.out);
  auto emit_pred = [&](const StepRecord& rec, const std::string& stem) {
    if (cfg.task == Task::segmentation) {
      const std::vector<int> grid = class_grid(rec.pred_patches, cfg);
      write_pgm((out / (stem + "_pred.pgm")).string(), class_grid_bytes(grid, cfg.seg_classes),
                cfg.image_h, cfg.image_w);
    } else {
      write_ppm((out / (stem + "_pred.ppm")).string(),
                to_rgb(prediction_image(rec.pred_patches, cfg)));
    }
  };
  for (const StepRecord& rec : rep.steps) {
    std::ostringstream stem;
    if (rec.anchor >= 0)
      stem << "step_" << std::setw(2) << std::setfill('0') << rec.t;
    else
      stem << "final";
    write_ppm((out / (stem.str() + "_input.ppm")).string(), to_rgb(rec.observed));
    emit_pred(rec, stem.str());
    write_pgm((out / (stem.str() + "_entropy.pgm")).string(), entropy_bytes(rec.entropy),
              cfg.grid_h(), cfg.grid_w());
    if (rec.anchor >= 0)
      write_ppm((out / (stem.str() + "_anchor.ppm")).string(),
                anchor_overlay(rec.observed, rec.anchor, rc.glimpse, cfg.patch, cfg.grid_w()));
  }
  nlohmann::json j = episode_to_json(rep);
  const RegimeAccounting acct =
      regime_accounting(rc.glimpse, cfg.image_h, cfg.image_w, cfg.patch);
  j["pixel_pct"] = acct.pixel_pct;
  j["area_pct"] = acct.area_pct;
  write_text(out / "episode.json", j.dump(2) + "\n");

  std::cout << "explored sample " << rc.index << ": " << rep.anchors.size() << " glimpses ("
            << rep.regime << ", " << rep.selector << ")"
            << (rep.exhausted_early ? ", exhausted early" : "") << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  rc.glimpse.validate(rc.model.patch);
  echo_config(rc);
  Corpus corpus = obtain_corpus(rc);
  MaeModel<double> model = obtain_model(rc);
  const ModelConfig& cfg = model.config();
  const fs::path out(rc.out);

  std::vector<EpisodeReport> episodes;
  MetricsRecord rec = evaluate(model, corpus, rc.glimpse, rc.selector, rc.seed, rc.threads,
                               rc.glimpse_map ? &episodes : nullptr);
  write_text(out / "metrics.json", metrics_to_json(rec).dump(2) + "\n");
  write_text(out / "metrics.tsv", metrics_to_tsv({rec}));
  std::cout << "eval " << rec.task << " (" << rec.regime << ", " << rec.selector << "):";
  for (const auto& [name, v] : rec.metrics) std::cout << " " << name << "=" << v;
  std::cout << "\n";

  if (rc.ablate) {
    const std::vector<MetricsRecord> rows =
        ablate_selectors(model, corpus, rc.glimpse, rc.seed, rc.threads);
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricsRecord& r : rows) arr.push_back(metrics_to_json(r));
    write_text(out / "ablation.json", arr.dump(2) + "\n");
    write_text(out / "ablation.tsv", metrics_to_tsv(rows));
  }
  if (!rc.sweep_glimpses.empty()) {
    const SweepResult sweep = glimpse_sweep(model, corpus, rc.glimpse, rc.selector,
                                            rc.sweep_glimpses, rc.seed, rc.threads);
    write_text(out / "sweep_glimpses.json", sweep_to_json(sweep).dump(2) + "\n");
    write_text(out / "sweep_glimpses.tsv", sweep_to_tsv(sweep));
  }
  if (rc.sweep_layers) {
    const LayerSweep sweep =
        layer_sweep(model, corpus, rc.glimpse, rc.selector, rc.seed, rc.threads);
    write_text(out / "sweep_layers.json", layer_sweep_to_json(sweep).dump(2) + "\n");
    write_text(out / "sweep_layers.tsv", layer_sweep_to_tsv(sweep));
  }
  if (rc.glimpse_map) {
    const GlimpseMaps maps = average_glimpse_map(episodes, cfg.grid_h(), cfg.grid_w());
    auto to_bytes = [](const std::vector<double>& v) {
      std::vector<unsigned char> bytes(v.size());
      for (std::size_t i = 0; i < v.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(v[i] * 255.0));
      return bytes;
    };
    write_pgm((out / "glimpse_map.pgm").string(), to_bytes(maps.occupancy), maps.gh, maps.gw);
    write_pgm((out / "first_glimpse.pgm").string(), to_bytes(maps.first_anchor), maps.gh,
              maps.gw);
    nlohmann::json j;
    j["gh"] = maps.gh;
    j["gw"] = maps.gw;
    j["occupancy"] = maps.occupancy;
    j["first_anchor"] = maps.first_anchor;
    write_text(out / "glimpse_map.json", j.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active visual exploration: masked-autoencoder glimpse agent"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;  // key=value; --set first, explicit flags after

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_file, "key=value config file");
    sub->add_option("-s,--set", overrides, "override, e.g. --set epochs=5")
        ->take_all()
        ->allow_extra_args(false);
    auto kv = [&overrides](const std::string& key) {
      return [&overrides, key](const std::string& v) { overrides.push_back(key + "=" + v); };
    };
    sub->add_option_function<std::string>("--out", kv("out"), "output directory");
    sub->add_option_function<std::string>("--seed", kv("seed"), "run seed");
    sub->add_option_function<std::string>("--threads", kv("threads"),
                                          "worker cap; 1 = bit-exact");
    sub->add_option_function<std::string>("--data", kv("data"), "corpus directory");
    return sub;
  };

  CLI::App* synth = add_common(app.add_subcommand("synth", "write a synthetic corpus to disk"));
  CLI::App* train = add_common(app.add_subcommand("train", "train a model, emit checkpoint"));
  train->add_option_function<std::string>(
      "--init", [&overrides](const std::string& v) { overrides.push_back("init_checkpoint=" + v); },
      "warm-start checkpoint");
  train->add_flag_callback("--head-only", [&overrides] { overrides.push_back("head_only=1"); },
                           "train only the task head");
  train->add_flag_callback("--timing", [&overrides] { overrides.push_back("timing=1"); },
                           "record wall-clock times");
  CLI::App* explore_cmd =
      add_common(app.add_subcommand("explore", "run one episode, dump per-step figures"));
  explore_cmd->add_option_function<std::string>(
      "--checkpoint", [&overrides](const std::string& v) { overrides.push_back("checkpoint=" + v); },
      "model weights");
  explore_cmd->add_option_function<std::string>(
      "--index", [&overrides](const std::string& v) { overrides.push_back("index=" + v); },
      "corpus sample to explore");
  CLI::App* eval_cmd = add_common(app.add_subcommand("eval", "metrics, sweeps, and ablations"));
  eval_cmd->add_option_function<std::string>(
      "--checkpoint", [&overrides](const std::string& v) { overrides.push_back("checkpoint=" + v); },
      "model weights");
  eval_cmd->add_option_function<std::string>(
      "--sweep-glimpses",
      [&overrides](const std::string& v) { overrides.push_back("sweep_glimpses=" + v); },
      "comma-separated glimpse counts");
  eval_cmd->add_flag_callback("--sweep-layers",
                              [&overrides] { overrides.push_back("sweep_layers=1"); },
                              "one evaluation per decoder layer");
  eval_cmd->add_flag_callback("--ablate-selectors",
                              [&overrides] { overrides.push_back("ablate=1"); },
                              "attention vs random vs checker on shared seeds");
  eval_cmd->add_flag_callback("--glimpse-map",
                              [&overrides] { overrides.push_back("glimpse_map=1"); },
                              "emit occupancy and first-glimpse maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    RunConfig rc;
    if (!config_file.empty()) rc.load_file(config_file);
    for (const std::string& kv : overrides) rc.set_line(kv);
    if (rc.threads < 1) throw ConfigError("config: threads must be >= 1");
    if (synth->parsed()) return cmd_synth(rc);
    if (train->parsed()) return cmd_train(rc);
    if (explore_cmd->parsed()) return cmd_explore(rc);
    return cmd_eval(rc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
