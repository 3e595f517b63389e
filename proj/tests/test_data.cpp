#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "glimpse/data.hpp"

using namespace glimpse;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("glimpse_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("ppm round-trip preserves quantized pixels and solid colors survive resize") {
  auto dir = temp_dir("ppm");
  Image red(3, 2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) red.at(0, y, x) = 1.f;
  write_ppm((dir / "red.ppm").string(), red);
  Image back = read_pnm((dir / "red.ppm").string());
  REQUIRE(back.channels == 3);
  REQUIRE(back.height == 2);
  REQUIRE(back.width == 2);
  for (std::size_t i = 0; i < back.pix.size(); ++i) CHECK(back.pix[i] == red.pix[i]);

  Image up = resize_bilinear(back, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      CHECK(up.at(0, y, x) == 1.f);
      CHECK(up.at(1, y, x) == 0.f);
      CHECK(up.at(2, y, x) == 0.f);
    }
}

TEST_CASE("resize to identical dimensions is a bit-identical pass-through") {
  Rng rng(3);
  Image img(3, 5, 7);
  for (auto& v : img.pix) v = static_cast<float>(rng.uniform());
  Image same = resize_bilinear(img, 5, 7);
  CHECK(same.pix == img.pix);
}

TEST_CASE("bilinear blend of a black/white pair is monotone with hand-computed weights") {
  Image bw(1, 1, 2);
  bw.at(0, 0, 0) = 0.f;
  bw.at(0, 0, 1) = 1.f;
  Image up = resize_bilinear(bw, 2, 4);
  // half-pixel centers: source x = {-0.25, 0.25, 0.75, 1.25} -> clamped blends
  const float expect[4] = {0.f, 0.25f, 0.75f, 1.f};
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) CHECK(up.at(0, y, x) == Catch::Approx(expect[x]).margin(1e-7));
  for (int x = 0; x + 1 < 4; ++x) CHECK(up.at(0, 0, x) <= up.at(0, 0, x + 1));
}

TEST_CASE("unreadable and truncated files raise data errors naming the path") {
  auto dir = temp_dir("bad");
  CHECK_THROWS_AS(read_pnm((dir / "missing.ppm").string()), DataError);
  {
    std::ofstream out(dir / "trunc.ppm", std::ios::binary);
    out << "P6\n4 4\n255\n";
    out << "only-a-few-bytes";
  }
  try {
    read_pnm((dir / "trunc.ppm").string());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("trunc.ppm") != std::string::npos);
  }
  {
    std::ofstream out(dir / "bad16.ppm", std::ios::binary);
    out << "P6\n2 2\n65535\n";
    for (int i = 0; i < 24; ++i) out.put('\0');
  }
  CHECK_THROWS_AS(read_pnm((dir / "bad16.ppm").string()), DataError);
}

TEST_CASE("horizontal flip is an involution on image and labels") {
  std::vector<std::vector<ShapeDesc>> descs;
  Corpus c = synthesize("shapes", 1, 16, 16, 99, &descs);
  const Sample& s = c.samples[0];
  Sample twice = hflip(hflip(s));
  CHECK(twice.image.pix == s.image.pix);
  CHECK(twice.seg == s.seg);
  CHECK(twice.label == s.label);

  Sample once = hflip(s);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      CHECK(once.seg[static_cast<std::size_t>(y) * 16 + x] ==
            s.seg[static_cast<std::size_t>(y) * 16 + (15 - x)]);
}

TEST_CASE("augmentation with all toggles off is the identity") {
  Corpus c = synthesize("shapes", 1, 12, 12, 7);
  AugmentConfig cfg;
  cfg.scale_crop = false;
  cfg.flip = false;
  Rng rng(1);
  Sample out = augment(c.samples[0], cfg, rng);
  CHECK(out.image.pix == c.samples[0].image.pix);
  CHECK(out.seg == c.samples[0].seg);
}

TEST_CASE("augmentation preserves shape, value range, and label alphabet") {
  Corpus c = synthesize("shapes", 4, 16, 24, 21);
  AugmentConfig cfg;
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    Rng rng = Rng(123).split(i);
    Sample out = augment(c.samples[i], cfg, rng);
    CHECK(out.image.height == 16);
    CHECK(out.image.width == 24);
    CHECK(out.image.channels == 3);
    CHECK(out.seg.size() == c.samples[i].seg.size());
    for (float v : out.image.pix) {
      CHECK(v >= 0.f);
      CHECK(v <= 1.f);
    }
    for (int id : out.seg) {
      CHECK(id >= 0);
      CHECK(id <= 2);
    }
    // deterministic per seed
    Rng rng2 = Rng(123).split(i);
    Sample out2 = augment(c.samples[i], cfg, rng2);
    CHECK(out2.image.pix == out.image.pix);
    CHECK(out2.seg == out.seg);
  }
}

TEST_CASE("synthetic corpora are seeded, bounded, and reproducible") {
  Corpus a = synthesize("shapes", 5, 16, 16, 42);
  Corpus b = synthesize("shapes", 5, 16, 16, 42);
  REQUIRE(a.samples.size() == 5);
  CHECK(a.num_classes == 2);
  CHECK(a.seg_classes == 3);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.samples[i].image.pix == b.samples[i].image.pix);
    CHECK(a.samples[i].seg == b.samples[i].seg);
    CHECK(a.samples[i].label == b.samples[i].label);
    CHECK((a.samples[i].label == 0 || a.samples[i].label == 1));
    for (float v : a.samples[i].image.pix) {
      CHECK(v >= 0.f);
      CHECK(v <= 1.f);
    }
  }
  CHECK(synthesize("shapes", 0, 16, 16, 1).samples.empty());
  Corpus g = synthesize("gradients", 3, 16, 16, 9);
  for (const auto& s : g.samples) {
    CHECK(s.label == -1);
    CHECK(s.seg.empty());
    for (float v : s.image.pix) {
      CHECK(v >= 0.f);
      CHECK(v <= 1.f);
    }
  }
  CHECK_THROWS_AS(synthesize("nope", 1, 8, 8, 0), ConfigError);
}

TEST_CASE("every labeled shape pixel lies inside an analytic boundary of its type") {
  std::vector<std::vector<ShapeDesc>> descs;
  Corpus c = synthesize("shapes", 8, 32, 32, 1234, &descs);
  REQUIRE(descs.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& seg = c.samples[i].seg;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int id = seg[static_cast<std::size_t>(y) * 32 + x];
        if (id == 0) continue;
        bool inside = false;
        for (const auto& d : descs[i])
          if (d.kind + 1 == id && d.covers(y, x)) inside = true;
        CHECK(inside);
      }
  }
}

TEST_CASE("split is disjoint, exhaustive, seeded, and honors the 9:1 ratio") {
  Split s = split_indices(1000, 0.9, 77);
  CHECK(s.train.size() == 900);
  CHECK(s.val.size() == 100);
  std::vector<bool> seen(1000, false);
  for (int i : s.train) {
    CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
    seen[static_cast<std::size_t>(i)] = true;
  }
  for (int i : s.val) {
    CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
    seen[static_cast<std::size_t>(i)] = true;
  }
  for (bool b : seen) CHECK(b);

  Split s2 = split_indices(1000, 0.9, 77);
  CHECK(s2.train == s.train);
  CHECK(s2.val == s.val);
  Split s3 = split_indices(1000, 0.9, 78);
  CHECK(s3.train != s.train);

  CHECK_THROWS_AS(split_indices(10, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split_indices(10, 1.0, 1), ConfigError);
  // tiny corpora still get a nonempty validation side
  Split tiny = split_indices(2, 0.9, 1);
  CHECK(tiny.train.size() == 1);
  CHECK(tiny.val.size() == 1);
}

TEST_CASE("corpus save/load round-trips images, labels, and masks") {
  auto dir = temp_dir("corpus");
  Corpus c = synthesize("shapes", 4, 16, 16, 5);
  save_corpus(dir.string(), c);
  CHECK(fs::exists(dir / "labels.tsv"));
  CHECK(fs::exists(dir / "images" / "000000.ppm"));
  CHECK(fs::exists(dir / "masks" / "000000.pgm"));

  Corpus back = load_corpus(dir.string(), 16, 16);
  REQUIRE(back.samples.size() == 4);
  CHECK(back.num_classes == 2);
  CHECK(back.seg_classes == 3);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.names[i] == c.names[i]);
    CHECK(back.samples[i].label == c.samples[i].label);
    CHECK(back.samples[i].seg == c.samples[i].seg);
    // loader returns the u8-quantized image exactly
    for (std::size_t j = 0; j < c.samples[i].image.pix.size(); ++j)
      CHECK(back.samples[i].image.pix[j] ==
            static_cast<float>(quantize_u8(c.samples[i].image.pix[j])) / 255.f);
  }

  // rerunning the generator and writer yields byte-identical files
  auto dir2 = temp_dir("corpus2");
  save_corpus(dir2.string(), synthesize("shapes", 4, 16, 16, 5));
  for (const auto& name : c.names) {
    CHECK(slurp(dir / "images" / name) == slurp(dir2 / "images" / name));
  }
  CHECK(slurp(dir / "labels.tsv") == slurp(dir2 / "labels.tsv"));
}

TEST_CASE("loading a corpus at a different size resizes masks without new ids") {
  auto dir = temp_dir("resize_corpus");
  save_corpus(dir.string(), synthesize("shapes", 2, 32, 32, 11));
  Corpus small = load_corpus(dir.string(), 16, 16);
  for (const auto& s : small.samples) {
    CHECK(s.image.height == 16);
    CHECK(s.image.width == 16);
    CHECK(s.seg.size() == 256);
    for (int id : s.seg) {
      CHECK(id >= 0);
      CHECK(id <= 2);
    }
  }
}
