#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "glimpse/policy.hpp"

using namespace glimpse;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_h = 16;
  c.image_w = 16;
  c.patch = 4;
  c.channels = 3;
  c.enc_layers = 2;
  c.enc_dim = 32;
  c.enc_heads = 4;
  c.dec_layers = 2;
  c.dec_dim = 16;
  c.dec_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

// hand-built capture: one head over a 1x3 patch grid (seq = 4)
AttentionCapture<double> fig_capture() {
  AttentionCapture<double> cap;
  cap.heads = 1;
  cap.seq = 4;
  cap.probs = {
      0.25, 0.25, 0.25, 0.25,  // CLS row (discarded)
      0.9,  0.0,  0.1,  0.0,   // sharply peaked query
      0.2,  0.3,  0.3,  0.2,   // diffuse query
      1.0,  0.0,  0.0,  0.0,   // fully collapsed query
  };
  return cap;
}

AttentionCapture<double> uniform_capture(int heads, int n) {
  AttentionCapture<double> cap;
  cap.heads = heads;
  cap.seq = n + 1;
  cap.probs.assign(static_cast<std::size_t>(heads) * cap.seq * cap.seq,
                   1.0 / static_cast<double>(cap.seq));
  return cap;
}

GlimpseSpec plain_spec(int px, int t) {
  GlimpseSpec s;
  s.kind = GlimpseKind::plain;
  s.glimpse_px = px;
  s.levels = 1;
  s.num_glimpses = t;
  return s;
}

// brute-force reference for the AME selection rule
int brute_force_ame(const EntropyMap& e, int g, const std::vector<std::uint8_t>& known) {
  int best = -1;
  double best_mean = 0;
  bool best_unknown = false;
  for (int ay = 0; ay + g <= e.gh; ++ay)
    for (int ax = 0; ax + g <= e.gw; ++ax) {
      double m = 0;
      bool unk = false;
      for (int dy = 0; dy < g; ++dy)
        for (int dx = 0; dx < g; ++dx) {
          m += e.at(ay + dy, ax + dx);
          if (!known[static_cast<std::size_t>(ay + dy) * e.gw + ax + dx]) unk = true;
        }
      m /= g * g;
      if (best < 0 || (unk && !best_unknown) || (unk == best_unknown && m > best_mean)) {
        best = ay * e.gw + ax;
        best_mean = m;
        best_unknown = unk;
      }
    }
  return best;
}

}  // namespace

TEST_CASE("entropy map reproduces the hand-computed attention entropies") {
  auto cap = fig_capture();
  std::vector<std::uint8_t> known(3, 0);
  EntropyMap e = entropy_map(cap, known, 1, 3);
  REQUIRE(e.gh == 1);
  REQUIRE(e.gw == 3);

  const double h_peaked = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  const double h_diffuse = -(2 * 0.2 * std::log(0.2) + 2 * 0.3 * std::log(0.3));
  CHECK(e.v[0] == Catch::Approx(h_peaked).epsilon(0).margin(1e-12));
  CHECK(e.v[1] == Catch::Approx(h_diffuse).epsilon(0).margin(1e-12));
  CHECK(e.v[2] == 0.0);  // one-hot row has exactly zero entropy

  // published reference values
  CHECK(e.v[0] == Catch::Approx(0.3251).epsilon(0).margin(1e-3));
  CHECK(e.v[1] == Catch::Approx(1.3662).epsilon(0).margin(1e-3));

  // the diffuse patch must win the selection
  auto pick = select_ame(e, 1, known);
  REQUIRE(pick.has_value());
  CHECK(*pick == 1);
}

TEST_CASE("entropy map: uniform rows give ln S per head and respect the bound") {
  const int n = 4;  // seq = 5
  for (int heads : {1, 2, 3}) {
    auto cap = uniform_capture(heads, n);
    std::vector<std::uint8_t> known(n, 0);
    EntropyMap e = entropy_map(cap, known, 2, 2);
    for (double v : e.v) {
      CHECK(v == Catch::Approx(heads * std::log(5.0)).epsilon(0).margin(1e-12));
      CHECK(v <= heads * std::log(5.0) + 1e-12);
      CHECK(v >= 0.0);
    }
  }
}

TEST_CASE("entropy map zeroes known positions exactly") {
  auto cap = uniform_capture(2, 4);
  std::vector<std::uint8_t> known = {1, 0, 1, 0};
  EntropyMap e = entropy_map(cap, known, 2, 2);
  CHECK(e.v[0] == 0.0);
  CHECK(e.v[2] == 0.0);
  CHECK(e.v[1] > 0.0);
  CHECK(e.v[3] > 0.0);
}

TEST_CASE("entropy map rejects unnormalized rows and bad geometry") {
  auto cap = fig_capture();
  cap.probs[4] = 0.5;  // first patch row now sums to 0.6
  std::vector<std::uint8_t> known(3, 0);
  CHECK_THROWS_AS(entropy_map(cap, known, 1, 3), ContractError);

  auto ok = fig_capture();
  CHECK_THROWS_AS(entropy_map(ok, known, 2, 3), ContractError);  // seq mismatch
  std::vector<std::uint8_t> short_mask(2, 0);
  CHECK_THROWS_AS(entropy_map(ok, short_mask, 1, 3), ContractError);
}

TEST_CASE("entropy map stays within bounds on randomized distributions") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int heads = 1 + trial % 3, n = 6;
    AttentionCapture<double> cap;
    cap.heads = heads;
    cap.seq = n + 1;
    cap.probs.resize(static_cast<std::size_t>(heads) * cap.seq * cap.seq);
    for (int h = 0; h < heads; ++h)
      for (int q = 0; q < cap.seq; ++q) {
        double sum = 0;
        std::vector<double> row(cap.seq);
        for (auto& p : row) {
          p = rng.uniform(1e-9, 1.0);
          sum += p;
        }
        for (int k = 0; k < cap.seq; ++k)
          cap.probs[(static_cast<std::size_t>(h) * cap.seq + q) * cap.seq + k] = row[k] / sum;
      }
    std::vector<std::uint8_t> known(n, 0);
    EntropyMap e = entropy_map(cap, known, 2, 3);
    for (double v : e.v) {
      CHECK(v >= 0.0);
      CHECK(v <= heads * std::log(static_cast<double>(cap.seq)) + 1e-12);
    }
  }
}

TEST_CASE("select_ame matches a brute-force argmax and breaks ties row-major") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    EntropyMap e;
    e.gh = 4;
    e.gw = 4;
    e.v.resize(16);
    std::vector<std::uint8_t> known(16, 0);
    for (auto& v : e.v) v = rng.uniform(0.0, 2.0);
    for (auto& k : known) k = rng.below(3) == 0 ? 1 : 0;
    for (int i = 0; i < 16; ++i)
      if (known[static_cast<std::size_t>(i)]) e.v[static_cast<std::size_t>(i)] = 0.0;
    const int g = 1 + static_cast<int>(rng.below(2));
    auto got = select_ame(e, g, known);
    REQUIRE(got.has_value());
    CHECK(*got == brute_force_ame(e, g, known));
  }

  EntropyMap flat;
  flat.gh = 3;
  flat.gw = 3;
  flat.v.assign(9, 1.0);
  std::vector<std::uint8_t> none(9, 0);
  CHECK(*select_ame(flat, 1, none) == 0);  // all-tie resolves to smallest index
  CHECK(*select_ame(flat, 2, none) == 0);
}

TEST_CASE("select_ame prefers anchors containing unknown patches") {
  // grid 2x2, footprint 1: patch 0 is known but carries (spuriously) huge
  // entropy; the selector must still pick an unknown patch.
  EntropyMap e;
  e.gh = 2;
  e.gw = 2;
  e.v = {5.0, 0.1, 0.2, 0.05};
  std::vector<std::uint8_t> known = {1, 0, 0, 0};
  auto pick = select_ame(e, 1, known);
  REQUIRE(pick.has_value());
  CHECK(*pick != 0);
  CHECK(*pick == 2);  // highest entropy among unknown patches

  // everything known: selection still succeeds (re-observation is idempotent)
  std::vector<std::uint8_t> all(4, 1);
  EntropyMap zeros;
  zeros.gh = 2;
  zeros.gw = 2;
  zeros.v.assign(4, 0.0);
  CHECK(select_ame(zeros, 1, all).has_value());

  // footprint larger than the grid: nothing fits
  CHECK_FALSE(select_ame(zeros, 3, all).has_value());
}

TEST_CASE("select_random is uniform over admissible anchors") {
  const int gh = 3, gw = 3, g = 1;  // 9 anchors
  std::vector<std::uint8_t> known(9, 0);
  Rng rng(6);  // fixed seed; draws are deterministic, so the check is stable
  const int draws = 100000;
  std::vector<int> counts(9, 0);
  for (int i = 0; i < draws; ++i) {
    auto a = select_random(g, gh, gw, known, rng);
    REQUIRE(a.has_value());
    REQUIRE(*a >= 0);
    REQUIRE(*a < 9);
    ++counts[static_cast<std::size_t>(*a)];
  }
  const double expected = draws / 9.0;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // dof = 8, critical value at p = 0.01 is 20.090
  CHECK(chi2 < 20.090);

  // same seed reproduces the same stream
  Rng r1(5), r2(5);
  for (int i = 0; i < 100; ++i)
    CHECK(*select_random(g, gh, gw, known, r1) == *select_random(g, gh, gw, known, r2));

  // known patches do not shrink the pool (overlap permitted)
  std::vector<std::uint8_t> all_known(9, 1);
  Rng r3(11);
  std::set<int> seen;
  for (int i = 0; i < 500; ++i) seen.insert(*select_random(g, gh, gw, all_known, r3));
  CHECK(seen.size() == 9);
}

TEST_CASE("select_checkerboard takes even-parity cells first, without replacement") {
  const int gh = 4, gw = 4, g = 1;
  std::vector<std::uint8_t> known(16, 0);
  Rng rng(3);
  std::set<int> even_expected, odd_expected;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) ((y + x) % 2 == 0 ? even_expected : odd_expected).insert(y * 4 + x);

  std::set<int> first8, next8;
  for (int i = 0; i < 16; ++i) {
    auto a = select_checkerboard(g, gh, gw, known, rng);
    REQUIRE(a.has_value());
    CHECK(!known[static_cast<std::size_t>(*a)]);  // never overlaps
    known[static_cast<std::size_t>(*a)] = 1;
    (i < 8 ? first8 : next8).insert(*a);
  }
  CHECK(first8 == even_expected);
  CHECK(next8 == odd_expected);
  CHECK_FALSE(select_checkerboard(g, gh, gw, known, rng).has_value());  // exhausted
}

TEST_CASE("select_checkerboard with multi-patch cells partitions cleanly") {
  const int gh = 8, gw = 8, g = 2;  // 16 cells of 2x2 patches
  std::vector<std::uint8_t> known(64, 0);
  Rng rng(17);
  for (int i = 0; i < 16; ++i) {
    auto a = select_checkerboard(g, gh, gw, known, rng);
    REQUIRE(a.has_value());
    const int ay = *a / gw, ax = *a % gw;
    CHECK(ay % g == 0);
    CHECK(ax % g == 0);
    if (i < 8) CHECK((ay / g + ax / g) % 2 == 0);  // even cells come first
    for (int dy = 0; dy < g; ++dy)
      for (int dx = 0; dx < g; ++dx) {
        auto& cell = known[static_cast<std::size_t>(ay + dy) * gw + ax + dx];
        CHECK(cell == 0);
        cell = 1;
      }
    const std::size_t taken = static_cast<std::size_t>(
        std::count(known.begin(), known.end(), std::uint8_t(1)));
    CHECK(taken == static_cast<std::size_t>(i + 1) * g * g);
  }
  CHECK_FALSE(select_checkerboard(g, gh, gw, known, rng).has_value());

  // grids that do not divide evenly simply drop the remainder
  std::vector<std::uint8_t> known5(25, 0);
  Rng r5(1);
  int picked = 0;
  while (auto a = select_checkerboard(2, 5, 5, known5, r5)) {
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) known5[static_cast<std::size_t>(*a / 5 + dy) * 5 + *a % 5 + dx] = 1;
    ++picked;
  }
  CHECK(picked == 4);
}

TEST_CASE("plain glimpse extraction crops exactly and checks bounds") {
  Image img(2, 8, 10);
  Rng rng(5);
  for (auto& p : img.pix) p = static_cast<float>(rng.uniform(0.0, 1.0));
  Image crop = extract_plain_glimpse(img, 2, 3, 4);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) CHECK(crop.at(c, y, x) == img.at(c, 2 + y, 3 + x));
  CHECK_THROWS_AS(extract_plain_glimpse(img, 5, 0, 4), ContractError);
  CHECK_THROWS_AS(extract_plain_glimpse(img, -1, 0, 4), ContractError);
}

TEST_CASE("retinal glimpse: hand-checked two-level composition") {
  // P=2, levels=2 -> 4x4 glimpse; level 2 averages 2x2 blocks, level 1 passes
  // the central 2x2 through untouched.
  Image img(1, 4, 4);
  float v = 1.0f;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) img.at(0, y, x) = v++;  // 1..16 row-major
  RetinalBlock rb = extract_retinal_glimpse(img, 0, 0, 2, 2);
  CHECK(rb.source_samples == 2 * 2 * 2);
  // coarse samples: corners of the 4x4 average each 2x2 quadrant
  const float q00 = (1 + 2 + 5 + 6) / 4.0f, q01 = (3 + 4 + 7 + 8) / 4.0f;
  const float q10 = (9 + 10 + 13 + 14) / 4.0f, q11 = (11 + 12 + 15 + 16) / 4.0f;
  // level 2 paints each quadrant; level 1 then restores the central 2x2
  CHECK(rb.block.at(0, 0, 0) == q00);
  CHECK(rb.block.at(0, 0, 1) == q00);
  CHECK(rb.block.at(0, 0, 3) == q01);
  CHECK(rb.block.at(0, 3, 0) == q10);
  CHECK(rb.block.at(0, 3, 3) == q11);
  CHECK(rb.block.at(0, 1, 1) == 6.0f);  // source passthrough
  CHECK(rb.block.at(0, 1, 2) == 7.0f);
  CHECK(rb.block.at(0, 2, 1) == 10.0f);
  CHECK(rb.block.at(0, 2, 2) == 11.0f);
  // level labels: center = 1, periphery = 2
  CHECK(rb.level[1 * 4 + 1] == 1);
  CHECK(rb.level[0 * 4 + 0] == 2);
  CHECK(rb.level[3 * 4 + 3] == 2);
}

TEST_CASE("retinal glimpse: central window is an exact passthrough") {
  Image img(3, 64, 64);
  Rng rng(31);
  for (auto& p : img.pix) p = static_cast<float>(rng.uniform(0.0, 1.0));
  const int P = 8, levels = 3, side = P * levels;  // 24x24 glimpse
  RetinalBlock rb = extract_retinal_glimpse(img, 10, 20, P, levels);
  CHECK(rb.source_samples == levels * P * P);
  const int off = (side - P) / 2;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        CHECK(rb.block.at(c, off + y, off + x) == img.at(c, 10 + off + y, 20 + off + x));
  CHECK_THROWS_AS(extract_retinal_glimpse(img, 50, 50, P, levels), ContractError);
}

TEST_CASE("retinal glimpse of a constant image equals a plain crop") {
  Image img(1, 32, 32, 0.37f);
  RetinalBlock rb = extract_retinal_glimpse(img, 4, 4, 8, 3);
  Image plain = extract_plain_glimpse(img, 4, 4, 24);
  REQUIRE(rb.block.pix.size() == plain.pix.size());
  for (std::size_t i = 0; i < plain.pix.size(); ++i) CHECK(rb.block.pix[i] == plain.pix[i]);
}

TEST_CASE("regime accounting matches the published sensing budgets exactly") {
  // 256x128 canvas
  GlimpseSpec retinal;
  retinal.kind = GlimpseKind::retinal;
  retinal.glimpse_px = 48;
  retinal.levels = 3;
  retinal.num_glimpses = 8;
  RegimeAccounting a = regime_accounting(retinal, 256, 128, 16);
  CHECK(a.pixel_pct == 18.75);
  CHECK(a.area_pct == 56.25);
  CHECK(a.regime == "8x48^2 retinal");

  RegimeAccounting b = regime_accounting(plain_spec(32, 8), 256, 128, 16);
  CHECK(b.pixel_pct == 25.0);
  CHECK(b.area_pct == 25.0);
  CHECK(b.regime == "8x32^2");

  RegimeAccounting c = regime_accounting(plain_spec(16, 8), 256, 128, 16);
  CHECK(c.pixel_pct == 6.25);
  CHECK(c.area_pct == 6.25);

  // pixel share never exceeds area share; equality holds exactly when plain
  CHECK(a.pixel_pct < a.area_pct);
  CHECK(b.pixel_pct == b.area_pct);
}

TEST_CASE("glimpse spec validation rejects inconsistent geometry") {
  GlimpseSpec s = plain_spec(10, 8);
  CHECK_THROWS_AS(s.validate(4), ConfigError);  // not a multiple of patch
  s = plain_spec(16, 0);
  CHECK_THROWS_AS(s.validate(4), ConfigError);  // no glimpses
  s = plain_spec(16, 8);
  s.levels = 2;
  CHECK_THROWS_AS(s.validate(4), ConfigError);  // plain implies one level
  GlimpseSpec r;
  r.kind = GlimpseKind::retinal;
  r.glimpse_px = 16;
  r.levels = 3;
  r.num_glimpses = 8;
  CHECK_THROWS_AS(r.validate(4), ConfigError);  // 16 != 3*4
  r.glimpse_px = 12;
  r.validate(4);  // 3 levels * patch 4
  CHECK(r.footprint_side(4) == 3);
  CHECK(r.source_samples(4) == 48);
}

TEST_CASE("explore: bookkeeping, determinism, and coverage invariants") {
  ModelConfig cfg = small_config();  // 4x4 patch grid
  MaeModel<double> model(cfg, 123);
  Corpus corpus = synthesize("shapes", 2, 16, 16, 555);
  const Sample& s0 = corpus.samples[0];

  GlimpseSpec spec = plain_spec(8, 3);  // footprint 2x2 -> 4 patches
  ExploreOptions opts;
  opts.selector = Selector::checkerboard;
  opts.seed = 9;
  opts.record_maps = true;

  EpisodeReport rep = explore(model, s0, spec, opts);
  REQUIRE(rep.anchors.size() == 3);
  REQUIRE(rep.steps.size() == 4);  // 3 selection steps + final
  CHECK(rep.steps[0].t == 0);
  CHECK(rep.steps[1].t == 1);
  CHECK(rep.steps[2].t == 2);
  CHECK(rep.steps[3].t == 3);
  CHECK(rep.steps[3].anchor == -1);
  CHECK_FALSE(rep.exhausted_early);
  CHECK(rep.selector == "checker");
  CHECK(rep.regime == "3x8^2");

  // checkerboard never overlaps: known count is exactly t * footprint
  const auto known_count = std::count(rep.known_mask.begin(), rep.known_mask.end(), std::uint8_t(1));
  CHECK(known_count == 3 * 4);
  CHECK(rep.observed_pixels == 3 * 64);

  // entropy snapshots are zero exactly at known patches
  std::vector<std::uint8_t> running(16, 0);
  for (std::size_t i = 0; i < rep.anchors.size(); ++i) {
    const auto& grid = rep.steps[i].entropy;
    REQUIRE(grid.size() == 16);
    for (int p = 0; p < 16; ++p)
      if (running[static_cast<std::size_t>(p)]) CHECK(grid[static_cast<std::size_t>(p)] == 0.0);
    const int ay = rep.anchors[i] / 4, ax = rep.anchors[i] % 4;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) running[static_cast<std::size_t>(ay + dy) * 4 + ax + dx] = 1;
  }

  // byte-stable rerun
  EpisodeReport rep2 = explore(model, s0, spec, opts);
  CHECK(rep2.anchors == rep.anchors);
  for (std::size_t i = 0; i < rep.steps.size(); ++i) {
    CHECK(rep2.steps[i].loss == rep.steps[i].loss);
    CHECK(rep2.steps[i].metric == rep.steps[i].metric);
  }
  CHECK(rep.wall_ms == 0.0);
}

TEST_CASE("explore: AME's first anchor is independent of image content") {
  ModelConfig cfg = small_config();
  MaeModel<double> model(cfg, 42);
  Corpus corpus = synthesize("shapes", 6, 16, 16, 808);
  GlimpseSpec spec = plain_spec(4, 2);  // single-patch glimpses
  ExploreOptions opts;
  opts.selector = Selector::ame;

  int first = -1;
  for (const auto& s : corpus.samples) {
    EpisodeReport rep = explore(model, s, spec, opts);
    REQUIRE(rep.anchors.size() == 2);
    if (first < 0) first = rep.anchors[0];
    CHECK(rep.anchors[0] == first);  // step 0 sees mask tokens only
    // AME avoids re-observation while unknown patches remain
    CHECK(rep.anchors[1] != rep.anchors[0]);
  }
}

TEST_CASE("explore: selector exhaustion ends the episode early with a flag") {
  ModelConfig cfg = small_config();
  MaeModel<double> model(cfg, 7);
  Corpus corpus = synthesize("gradients", 1, 16, 16, 99);
  GlimpseSpec spec = plain_spec(8, 6);  // only 4 checkerboard cells exist
  ExploreOptions opts;
  opts.selector = Selector::checkerboard;
  opts.seed = 4;

  EpisodeReport rep = explore(model, corpus.samples[0], spec, opts);
  CHECK(rep.exhausted_early);
  CHECK(rep.anchors.size() == 4);
  CHECK(std::count(rep.known_mask.begin(), rep.known_mask.end(), std::uint8_t(1)) == 16);
  // steps: 4 selection rounds + the exhausted probe + final
  CHECK(rep.steps.size() == 6);
}

TEST_CASE("explore: retinal glimpses write the fine center into the buffer") {
  ModelConfig cfg = small_config();
  MaeModel<double> model(cfg, 3);
  Corpus corpus = synthesize("shapes", 1, 16, 16, 21);
  const Sample& s = corpus.samples[0];

  GlimpseSpec spec;
  spec.kind = GlimpseKind::retinal;
  spec.glimpse_px = 8;
  spec.levels = 2;
  spec.num_glimpses = 2;
  ExploreOptions opts;
  opts.selector = Selector::random;
  opts.seed = 12;
  opts.record_inputs = true;

  EpisodeReport rep = explore(model, s, spec, opts);
  REQUIRE(rep.anchors.size() == 2);
  CHECK(rep.observed_pixels == 2 * 2 * 16);  // levels * P^2 per glimpse
  // after the first glimpse, the central 4x4 of its window matches the source
  const int a = rep.anchors[0], ay = (a / 4) * 4, ax = (a % 4) * 4;
  const Image& obs = rep.steps[1].observed;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(obs.at(c, ay + 2 + y, ax + 2 + x) == s.image.at(c, ay + 2 + y, ax + 2 + x));
}

TEST_CASE("explore: classification episodes report loss and hit metric") {
  ModelConfig cfg = small_config();
  cfg.task = Task::classification;
  cfg.num_classes = 2;
  MaeModel<double> model(cfg, 5);
  Corpus corpus = synthesize("shapes", 2, 16, 16, 777);
  GlimpseSpec spec = plain_spec(8, 2);
  ExploreOptions opts;
  opts.selector = Selector::ame;

  for (const auto& s : corpus.samples) {
    EpisodeReport rep = explore(model, s, spec, opts);
    for (const auto& st : rep.steps) {
      CHECK(st.loss > 0.0);
      CHECK((st.metric == 0.0 || st.metric == 1.0));
    }
  }

  Sample unlabeled = corpus.samples[0];
  unlabeled.label = -1;
  CHECK_THROWS_AS(explore(model, unlabeled, spec, opts), ContractError);
}

TEST_CASE("explore: segmentation episodes score per-pixel accuracy") {
  ModelConfig cfg = small_config();
  cfg.task = Task::segmentation;
  cfg.seg_classes = 3;
  MaeModel<double> model(cfg, 6);
  Corpus corpus = synthesize("shapes", 1, 16, 16, 31);
  GlimpseSpec spec = plain_spec(4, 3);
  ExploreOptions opts;
  opts.selector = Selector::random;
  opts.seed = 2;

  EpisodeReport rep = explore(model, corpus.samples[0], spec, opts);
  for (const auto& st : rep.steps) {
    CHECK(st.loss > 0.0);
    CHECK(st.metric >= 0.0);
    CHECK(st.metric <= 1.0);
  }

  Sample no_mask = corpus.samples[0];
  no_mask.seg.clear();
  CHECK_THROWS_AS(explore(model, no_mask, spec, opts), ContractError);
}

TEST_CASE("episode reports serialize to JSON and parse back") {
  ModelConfig cfg = small_config();
  MaeModel<double> model(cfg, 11);
  Corpus corpus = synthesize("gradients", 1, 16, 16, 44);
  GlimpseSpec spec = plain_spec(8, 2);
  ExploreOptions opts;
  opts.selector = Selector::ame;
  opts.record_maps = true;

  EpisodeReport rep = explore(model, corpus.samples[0], spec, opts);
  const std::string text = episode_to_json(rep).dump(2);
  auto parsed = nlohmann::json::parse(text);
  CHECK(parsed["selector"] == "attention");
  CHECK(parsed["regime"] == "2x8^2");
  CHECK(parsed["anchors"].size() == 2);
  CHECK(parsed["steps"].size() == 3);
  CHECK(parsed["steps"][0]["entropy"].size() == 16);
  CHECK(parsed["steps"][0]["t"] == 0);
  CHECK(parsed["known_mask"].size() == 16);
  CHECK(parsed["exhausted_early"] == false);

  // identical reruns produce identical documents
  EpisodeReport rep2 = explore(model, corpus.samples[0], spec, opts);
  CHECK(episode_to_json(rep2).dump(2) == text);
}
