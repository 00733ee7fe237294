#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "oracles.hpp"
#include "reltr/synth.hpp"

using namespace reltr;
namespace fs = std::filesystem;

namespace {

Entity square(double cx, double cy, double w, double h, std::size_t color) { return {0, {cx, cy, w, h}, color}; }

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("reltr_synth_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void check_scene_invariants(const GroundTruthScene& s, const CorpusConfig& c) {
  REQUIRE(s.entities.size() >= c.min_entities);
  REQUIRE(s.entities.size() <= c.max_entities);
  REQUIRE(!s.triplets.empty());
  REQUIRE(s.triplets.size() <= c.max_triplets);
  REQUIRE(s.image.height == c.image_size);
  REQUIRE(s.image.width == c.image_size);
  REQUIRE(s.image.pixels.size() == 3 * c.image_size * c.image_size);
  for (float p : s.image.pixels) REQUIRE((p >= 0.0f && p <= 1.0f));
  std::set<Relation> seen;
  for (const Relation& r : s.triplets) {
    REQUIRE(r.subject != r.object);
    REQUIRE(r.subject < s.entities.size());
    REQUIRE(r.object < s.entities.size());
    REQUIRE(r.predicate < kPredicateClasses);
    REQUIRE(seen.insert(r).second);
    REQUIRE(oracle::rule(r.predicate, s.entities[r.subject], s.entities[r.object]));
  }
  for (const Entity& e : s.entities) {
    REQUIRE(e.class_id < kEntityClasses);
    REQUIRE(e.color < kColorCount);
    REQUIRE(e.box.x0() >= 0.0);
    REQUIRE(e.box.x1() <= 1.0);
    REQUIRE(e.box.y0() >= 0.0);
    REQUIRE(e.box.y1() <= 1.0);
  }
}

}  // namespace

TEST_SUITE("synth_data") {

TEST_CASE("same seed gives an identical scene") {
  CorpusConfig c;
  for (std::uint64_t seed : {0ull, 1ull, 99ull, 123456789ull}) {
    const auto a = generate_scene(seed, c, true), b = generate_scene(seed, c, true);
    CHECK(a == b);
  }
  CHECK(generate_scene(1, c, true) != generate_scene(2, c, true));
  c.train_scenes = 20;
  CHECK(generate_split(c, Split::train) == generate_split(c, Split::train));
  CHECK(scene_seed(7, Split::train, 3) != scene_seed(7, Split::test, 3));
}

TEST_CASE("two disjoint squares ordered along x") {
  const std::vector<Entity> distinct = {square(0.2, 0.5, 0.2, 0.2, 0), square(0.7, 0.5, 0.2, 0.2, 1)};
  CHECK(derive_relations(distinct) == std::vector<Relation>{{0, kLeftOf, 1}});

  // Sharing a colour adds the symmetric rule in both directions.
  const std::vector<Entity> same = {square(0.2, 0.5, 0.2, 0.2, 2), square(0.7, 0.5, 0.2, 0.2, 2)};
  CHECK(derive_relations(same) ==
        std::vector<Relation>{{0, kLeftOf, 1}, {0, kSameColorAs, 1}, {1, kSameColorAs, 0}});
}

TEST_CASE("nested boxes: inside and surrounds, never touching") {
  const Entity outer = square(0.5, 0.5, 0.5, 0.5, 0), inner = square(0.5, 0.5, 0.2, 0.2, 1);
  CHECK(relation_holds(kInside, inner, outer));
  CHECK(relation_holds(kSurrounds, outer, inner));
  CHECK_FALSE(relation_holds(kInside, outer, inner));
  CHECK_FALSE(relation_holds(kTouching, inner, outer));
  CHECK_FALSE(relation_holds(kOverlapping, inner, outer));
  CHECK(relation_holds(kLargerThan, outer, inner));

  // Flush against the outer edge is still inside, still not touching.
  const Entity flush = square(0.375, 0.5, 0.25, 0.25, 1);
  CHECK(relation_holds(kInside, flush, outer));
  CHECK_FALSE(relation_holds(kTouching, flush, outer));
  // A box is not inside a copy of itself.
  CHECK_FALSE(relation_holds(kInside, outer, outer));
}

TEST_CASE("larger_than is strict") {
  const Entity a = square(0.3, 0.3, 0.25, 0.5, 0), b = square(0.7, 0.7, 0.5, 0.25, 0);
  CHECK_FALSE(relation_holds(kLargerThan, a, b));
  CHECK_FALSE(relation_holds(kLargerThan, b, a));
  const Entity twice = square(0.7, 0.7, 0.5, 0.5, 0), half = square(0.3, 0.3, 0.5, 0.25, 0);
  CHECK_FALSE(relation_holds(kLargerThan, twice, half));
  CHECK(relation_holds(kLargerThan, square(0.7, 0.7, 0.5, 0.5, 0), square(0.3, 0.3, 0.25, 0.25, 0)));
}

TEST_CASE("touching and overlapping edges") {
  const Entity a = square(0.25, 0.5, 0.25, 0.25, 0);
  CHECK(relation_holds(kTouching, a, square(0.5, 0.5, 0.25, 0.25, 1)));    // shared edge
  CHECK(relation_holds(kTouching, a, square(0.515, 0.5, 0.25, 0.25, 1)));  // gap 0.015
  CHECK_FALSE(relation_holds(kTouching, a, square(0.53, 0.5, 0.25, 0.25, 1)));
  CHECK(relation_holds(kTouching, a, square(0.51, 0.76, 0.25, 0.25, 1)));  // diagonal, gaps 0.01
  CHECK(relation_holds(kOverlapping, a, square(0.35, 0.55, 0.25, 0.25, 1)));
  CHECK_FALSE(relation_holds(kOverlapping, a, square(0.5, 0.5, 0.25, 0.25, 1)));
  CHECK_THROWS(relation_holds(kPredicateClasses, a, a));
}

TEST_CASE("rules agree with an independent implementation on random pairs") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> color(0, 2), cls(0, kEntityClasses - 1);
  std::size_t positives = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    Entity s, o;
    if (trial % 2 == 0) {
      s.box = oracle::lattice_box(rng);
      o.box = oracle::lattice_box(rng);
    } else {
      s.box = {u(rng), u(rng), 0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng)};
      o.box = {u(rng), u(rng), 0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng)};
    }
    s.color = color(rng);
    o.color = color(rng);
    s.class_id = cls(rng);
    o.class_id = cls(rng);
    for (std::size_t p = 0; p < kPredicateClasses; ++p) {
      const bool want = oracle::rule(p, s, o);
      positives += want;
      REQUIRE_MESSAGE(relation_holds(p, s, o) == want, "predicate " << p << " trial " << trial);
    }
  }
  CHECK(positives > 1000);
}

TEST_CASE("generated scenes satisfy every invariant") {
  CorpusConfig c;
  for (std::uint64_t seed = 0; seed < 300; ++seed) check_scene_invariants(generate_scene(seed, c, seed % 2 == 0), c);
  c.image_size = 64;
  c.max_entities = 3;
  c.max_triplets = 2;
  for (std::uint64_t seed = 0; seed < 50; ++seed) check_scene_invariants(generate_scene(seed, c, true), c);
}

TEST_CASE("rasterized entities are visible in their own colour") {
  CorpusConfig c;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = generate_scene(seed, c, false);
    CHECK(s.image == rasterize(s.entities, c.image_size));
    bool any_background = false;
    for (std::size_t y = 0; y < c.image_size; ++y)
      for (std::size_t x = 0; x < c.image_size; ++x)
        any_background |= s.image.at(0, y, x) == 0 && s.image.at(1, y, x) == 0 && s.image.at(2, y, x) == 0;
    CHECK(any_background);
  }
  // The smaller shape is painted over the larger one.
  const std::vector<Entity> pair = {square(0.5, 0.5, 0.5, 0.5, 0), square(0.5, 0.5, 0.25, 0.25, 2)};
  const Image img = rasterize(pair, 16);
  const Image solo = rasterize({pair[1]}, 16);
  CHECK(img.at(0, 8, 8) == solo.at(0, 8, 8));
  CHECK(img.at(2, 8, 8) == solo.at(2, 8, 8));
  CHECK(img.at(0, 5, 5) != solo.at(0, 5, 5));
  CHECK(img.at(0, 0, 0) == 0.0f);
}

TEST_CASE("train split never contains holdout types") {
  CorpusConfig c;
  c.train_scenes = 500;
  c.test_scenes = 300;
  const auto holdout = CorpusConfig::default_holdout();
  for (const auto& s : generate_split(c, Split::train))
    for (const Relation& r : s.triplets)
      REQUIRE(std::find(holdout.begin(), holdout.end(), triplet_type(s, r)) == holdout.end());
  std::size_t zero_shot = 0;
  for (const auto& s : generate_split(c, Split::test))
    for (const Relation& r : s.triplets)
      zero_shot += std::find(holdout.begin(), holdout.end(), triplet_type(s, r)) != holdout.end();
  CHECK(zero_shot > 0);
}

TEST_CASE("predicate frequencies follow the decay ranks") {
  CorpusConfig c;
  c.train_scenes = 1000;
  const auto hist = predicate_histogram(generate_split(c, Split::train));
  for (std::size_t p = 0; p + 1 < kPredicateClasses; ++p) CHECK_MESSAGE(hist[p] > hist[p + 1], "rank " << p);
  CHECK(hist[kPredicateClasses - 1] > 0);

  const auto groups = frequency_groups(hist);
  std::array<int, 3> sizes{};
  for (int g : groups) ++sizes.at(static_cast<std::size_t>(g));
  CHECK(sizes == std::array<int, 3>{3, 3, 2});
  CHECK(groups[kLeftOf] == 0);
  CHECK(groups[kSurrounds] == 2);

  const auto w = predicate_weights(0.55);
  double total = 0;
  for (double x : w) total += x;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w[1] / w[0] == doctest::Approx(0.55).epsilon(1e-14));
}

TEST_CASE("impossible constraints fail with a diagnostic") {
  CorpusConfig c;
  c.holdout.clear();
  for (std::size_t s = 0; s < kEntityClasses; ++s)
    for (std::size_t p = 0; p < kPredicateClasses; ++p)
      for (std::size_t o = 0; o < kEntityClasses; ++o) c.holdout.push_back({s, p, o});
  try {
    generate_scene(5, c, true);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("100 attempts") != std::string::npos);
    CHECK(std::string(e.what()).find("seed 5") != std::string::npos);
  }
  CorpusConfig bad;
  bad.image_size = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CorpusConfig{};
  bad.min_entities = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CorpusConfig{};
  bad.decay = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("corpus round trip") {
  const fs::path dir = scratch_dir("roundtrip");
  CorpusConfig c;
  c.val_scenes = 12;
  const auto scenes = generate_split(c, Split::val);
  write_corpus(scenes, dir / "val.jsonl");
  CHECK(read_corpus(dir / "val.jsonl") == scenes);

  const fs::path image = dir / scenes[0].image_ref;
  CHECK(fs::file_size(image) == 8 + 4 * 3 * 32 * 32);
  std::ifstream in(image, std::ios::binary);
  std::uint32_t header[2];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  CHECK(header[0] == 32);
  CHECK(header[1] == 32);
  CHECK(read_image(image) == scenes[0].image);

  write_corpus({}, dir / "empty.jsonl");
  CHECK(fs::exists(dir / "empty.jsonl"));
  CHECK(fs::file_size(dir / "empty.jsonl") == 0);
  CHECK(read_corpus(dir / "empty.jsonl").empty());
  fs::remove_all(dir);
}

TEST_CASE("corrupted corpus line is named in the error") {
  const fs::path dir = scratch_dir("corrupt");
  CorpusConfig c;
  c.val_scenes = 3;
  write_corpus(generate_split(c, Split::val), dir / "val.jsonl");
  std::vector<std::string> lines;
  {
    std::ifstream in(dir / "val.jsonl");
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  REQUIRE(lines.size() == 3);
  const std::vector<std::string> breakages = {lines[1].substr(0, lines[1].size() / 2),
                                              R"({"image_ref":"images/val_000001.bin","entities":[],"triplets":[[0,1,2]]})",
                                              R"({"entities":[],"triplets":[]})"};
  for (const auto& broken : breakages) {
    std::ofstream out(dir / "bad.jsonl");
    out << lines[0] << '\n' << broken << '\n' << lines[2] << '\n';
    out.close();
    try {
      read_corpus(dir / "bad.jsonl");
      FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("bad.jsonl:2:") != std::string::npos);
    }
  }
  CHECK_THROWS(read_corpus(dir / "missing.jsonl"));
  fs::remove_all(dir);
}

}  // TEST_SUITE
