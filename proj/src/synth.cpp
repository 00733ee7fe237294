#include "reltr/synth.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace reltr {

namespace {

constexpr std::array<std::string_view, kPredicateClasses> kPredicateNames = {
    "left_of", "above", "larger_than", "same_color_as", "overlapping", "touching", "inside", "surrounds"};
constexpr std::array<std::string_view, kShapeCount> kShapeNames = {"square", "circle", "triangle", "diamond", "cross"};
constexpr std::array<std::array<float, 3>, kColorCount> kPalette = {{{1.0f, 0.25f, 0.2f},
                                                                    {0.2f, 0.9f, 0.3f},
                                                                    {0.3f, 0.4f, 1.0f}}};

// Side-length ranges per size class.
constexpr double kSmallMin = 0.16, kSmallMax = 0.26;
constexpr double kLargeMin = 0.38, kLargeMax = 0.55;
constexpr double kMaxPairIou = 0.3;
constexpr double kMinVisible = 0.4;
constexpr int kMaxAttempts = 100;

std::size_t shape_of(std::size_t class_id) { return class_id / 2; }
bool is_large(std::size_t class_id) { return class_id % 2 == 1; }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

bool contains(const Box& outer, const Box& inner) {
  return inner.x0() >= outer.x0() && inner.x1() <= outer.x1() && inner.y0() >= outer.y0() &&
         inner.y1() <= outer.y1() && inner.area() < outer.area();
}

double box_gap(const Box& a, const Box& b) {
  const double dx = std::max(0.0, std::max(a.x0(), b.x0()) - std::min(a.x1(), b.x1()));
  const double dy = std::max(0.0, std::max(a.y0(), b.y0()) - std::min(a.y1(), b.y1()));
  return std::max(dx, dy);
}

bool shape_covers(std::size_t shape, double u, double v) {
  switch (static_cast<Shape2D>(shape)) {
    case Shape2D::square:
      return true;
    case Shape2D::circle:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case Shape2D::triangle:
      return std::fabs(u - 0.5) <= 0.5 * v;
    case Shape2D::diamond:
      return std::fabs(u - 0.5) + std::fabs(v - 0.5) <= 0.5;
    case Shape2D::cross:
      return std::fabs(u - 0.5) <= 1.0 / 6.0 || std::fabs(v - 0.5) <= 1.0 / 6.0;
  }
  return false;
}

std::vector<std::size_t> draw_order(const std::vector<Entity>& entities) {
  std::vector<std::size_t> order(entities.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return entities[a].box.area() > entities[b].box.area(); });
  return order;
}

// Per-entity (own pixels, visible pixels) after z-ordered occlusion.
std::vector<std::pair<int, int>> visibility(const std::vector<Entity>& entities, std::size_t size) {
  std::vector<int> top(size * size, -1);
  std::vector<std::pair<int, int>> counts(entities.size(), {0, 0});
  for (std::size_t idx : draw_order(entities)) {
    const Box& b = entities[idx].box;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double px = (x + 0.5) / size, py = (y + 0.5) / size;
        const double u = (px - b.x0()) / b.w, v = (py - b.y0()) / b.h;
        if (u < 0 || u > 1 || v < 0 || v > 1 || !shape_covers(shape_of(entities[idx].class_id), u, v)) continue;
        ++counts[idx].first;
        top[y * size + x] = static_cast<int>(idx);
      }
  }
  for (int owner : top)
    if (owner >= 0) ++counts[owner].second;
  return counts;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Box random_box(std::mt19937_64& rng, bool large) {
  const double lo = large ? kLargeMin : kSmallMin, hi = large ? kLargeMax : kSmallMax;
  const double w = uniform(rng, lo, hi), h = uniform(rng, lo, hi);
  return {uniform(rng, w / 2, 1 - w / 2), uniform(rng, h / 2, 1 - h / 2), w, h};
}

bool in_frame(const Box& b) { return b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= 1.0 && b.y1() <= 1.0; }

// Draws entities, planting nested / touching / overlapping pairs with fixed
// probabilities so tail predicates have geometric support.
std::vector<Entity> place_entities(std::mt19937_64& rng, std::size_t count) {
  std::uniform_int_distribution<std::size_t> shape_dist(0, kShapeCount - 1), color_dist(0, kColorCount - 1);
  std::bernoulli_distribution coin(0.5), plant(0.45);
  std::vector<Entity> entities(count);
  for (Entity& e : entities) {
    e.class_id = 2 * shape_dist(rng) + (coin(rng) ? 1 : 0);
    e.color = color_dist(rng);
    e.box = random_box(rng, is_large(e.class_id));
  }
  std::size_t next = 0;
  if (count - next >= 2 && plant(rng)) {  // nested pair
    Entity& outer = entities[next];
    Entity& inner = entities[next + 1];
    outer.class_id |= 1;
    inner.class_id &= ~std::size_t{1};
    outer.box = random_box(rng, true);
    inner.box = random_box(rng, false);
    const Box& o = outer.box;
    inner.box.cx = uniform(rng, o.x0() + inner.box.w / 2, o.x1() - inner.box.w / 2);
    inner.box.cy = uniform(rng, o.y0() + inner.box.h / 2, o.y1() - inner.box.h / 2);
    next += 2;
  }
  if (count - next >= 2 && plant(rng)) {  // touching pair
    const Box& anchor = entities[next].box;
    Box& b = entities[next + 1].box;
    const double gap = uniform(rng, 0.0, 0.8 * kTouchGap);
    const double slide = uniform(rng, -0.4, 0.4);
    switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
      case 0: b.cx = anchor.x1() + gap + b.w / 2, b.cy = anchor.cy + slide * anchor.h; break;
      case 1: b.cx = anchor.x0() - gap - b.w / 2, b.cy = anchor.cy + slide * anchor.h; break;
      case 2: b.cy = anchor.y1() + gap + b.h / 2, b.cx = anchor.cx + slide * anchor.w; break;
      default: b.cy = anchor.y0() - gap - b.h / 2, b.cx = anchor.cx + slide * anchor.w; break;
    }
    next += 2;
  }
  if (count - next >= 2 && plant(rng)) {  // partial overlap
    const Box& anchor = entities[next].box;
    Box& b = entities[next + 1].box;
    b.cx = anchor.cx + (coin(rng) ? 1 : -1) * uniform(rng, 0.3, 0.45) * (anchor.w + b.w);
    b.cy = anchor.cy + (coin(rng) ? 1 : -1) * uniform(rng, 0.0, 0.3) * (anchor.h + b.h);
    next += 2;
  }
  return entities;
}

bool acceptable(const std::vector<Entity>& entities, std::size_t size) {
  for (const Entity& e : entities)
    if (!in_frame(e.box)) return false;
  for (std::size_t i = 0; i < entities.size(); ++i)
    for (std::size_t j = i + 1; j < entities.size(); ++j) {
      const Box& a = entities[i].box;
      const Box& b = entities[j].box;
      if (contains(a, b) || contains(b, a)) continue;
      if (box_iou(a, b) > kMaxPairIou) return false;
    }
  for (const auto& [own, visible] : visibility(entities, size))
    if (own == 0 || visible < kMinVisible * own) return false;
  return true;
}

// Greedy on the running shortfall against the target share: each draw takes the
// available predicate furthest behind, stopping early once every available one
// is at or above its share (but never leaving the scene empty).
std::vector<Relation> sample_relations(std::vector<Relation> candidates, std::size_t wanted, double decay,
                                       PredicateTally& tally, std::mt19937_64& rng) {
  const auto weights = predicate_weights(decay);
  std::vector<Relation> chosen;
  while (chosen.size() < wanted && !candidates.empty()) {
    const double total = static_cast<double>(std::accumulate(tally.begin(), tally.end(), std::size_t{0})) + 1.0;
    std::size_t best = kPredicateClasses;
    double best_deficit = 0.0;
    for (const Relation& r : candidates) {
      const double deficit = weights[r.predicate] * total - static_cast<double>(tally[r.predicate]);
      if (best == kPredicateClasses || deficit > best_deficit || (deficit == best_deficit && r.predicate < best)) {
        best = r.predicate;
        best_deficit = deficit;
      }
    }
    if (best_deficit <= 0.0 && !chosen.empty()) break;
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (candidates[i].predicate == best) pool.push_back(i);
    const std::size_t pick = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    chosen.push_back(candidates[pick]);
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
    ++tally[best];
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace

std::string_view predicate_name(std::size_t predicate) { return kPredicateNames.at(predicate); }

std::string entity_class_name(std::size_t class_id) {
  return std::string(is_large(class_id) ? "large_" : "small_") + std::string(kShapeNames.at(shape_of(class_id)));
}

TripletType triplet_type(const GroundTruthScene& scene, const Relation& r) {
  return {scene.entities.at(r.subject).class_id, r.predicate, scene.entities.at(r.object).class_id};
}

std::vector<TripletType> CorpusConfig::default_holdout() {
  // large square larger_than small circle; small triangle left_of large diamond;
  // small cross inside large circle.
  return {{1, kLargerThan, 2}, {4, kLeftOf, 7}, {8, kInside, 3}};
}

void CorpusConfig::validate() const {
  if (image_size < 8 || image_size % 4 != 0) throw std::invalid_argument("corpus: image_size must be a multiple of 4, >= 8");
  if (min_entities < 2 || max_entities < min_entities) throw std::invalid_argument("corpus: need 2 <= min_entities <= max_entities");
  if (max_triplets == 0) throw std::invalid_argument("corpus: max_triplets must be positive");
  if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("corpus: decay must be in (0, 1)");
  for (const TripletType& t : holdout)
    if (t.sub_class >= kEntityClasses || t.obj_class >= kEntityClasses || t.predicate >= kPredicateClasses)
      throw std::invalid_argument("corpus: holdout type out of range");
}

bool relation_holds(std::size_t predicate, const Entity& s, const Entity& o) {
  const Box& a = s.box;
  const Box& b = o.box;
  switch (predicate) {
    case kLeftOf: return a.x1() <= b.x0();
    case kAbove: return a.y1() <= b.y0();
    case kLargerThan: return a.area() > kLargerRatio * b.area();
    case kSameColorAs: return s.color == o.color;
    case kOverlapping: return intersection_area(a, b) > 0.0 && !contains(a, b) && !contains(b, a);
    case kTouching: return intersection_area(a, b) == 0.0 && box_gap(a, b) <= kTouchGap;
    case kInside: return contains(b, a);
    case kSurrounds: return contains(a, b);
    default: throw std::out_of_range("relation_holds: unknown predicate");
  }
}

std::vector<Relation> derive_relations(const std::vector<Entity>& entities) {
  std::vector<Relation> out;
  for (std::size_t s = 0; s < entities.size(); ++s)
    for (std::size_t o = 0; o < entities.size(); ++o) {
      if (s == o) continue;
      for (std::size_t p = 0; p < kPredicateClasses; ++p)
        if (relation_holds(p, entities[s], entities[o])) out.push_back({s, p, o});
    }
  std::sort(out.begin(), out.end());
  return out;
}

Image rasterize(const std::vector<Entity>& entities, std::size_t size) {
  Image img{size, size, std::vector<float>(Image::kChannels * size * size, 0.0f)};
  for (std::size_t idx : draw_order(entities)) {
    const Entity& e = entities[idx];
    const Box& b = e.box;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double px = (x + 0.5) / size, py = (y + 0.5) / size;
        const double u = (px - b.x0()) / b.w, v = (py - b.y0()) / b.h;
        if (u < 0 || u > 1 || v < 0 || v > 1 || !shape_covers(shape_of(e.class_id), u, v)) continue;
        for (std::size_t c = 0; c < Image::kChannels; ++c) img.at(c, y, x) = kPalette[e.color][c];
      }
  }
  return img;
}

GroundTruthScene generate_scene(std::uint64_t seed, const CorpusConfig& config, bool exclude_holdout) {
  PredicateTally tally{};
  return generate_scene(seed, config, exclude_holdout, tally);
}

GroundTruthScene generate_scene(std::uint64_t seed, const CorpusConfig& config, bool exclude_holdout,
                                PredicateTally& tally) {
  config.validate();
  std::mt19937_64 rng(splitmix64(seed));
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::size_t count = std::uniform_int_distribution<std::size_t>(config.min_entities, config.max_entities)(rng);
    std::vector<Entity> entities = place_entities(rng, count);
    if (!acceptable(entities, config.image_size)) continue;

    std::vector<Relation> candidates = derive_relations(entities);
    if (exclude_holdout) {
      std::erase_if(candidates, [&](const Relation& r) {
        const TripletType t{entities[r.subject].class_id, r.predicate, entities[r.object].class_id};
        return std::find(config.holdout.begin(), config.holdout.end(), t) != config.holdout.end();
      });
    }
    if (candidates.empty()) continue;
    const std::size_t wanted = std::uniform_int_distribution<std::size_t>(1, config.max_triplets)(rng);

    GroundTruthScene scene;
    scene.triplets = sample_relations(std::move(candidates), wanted, config.decay, tally, rng);
    scene.image = rasterize(entities, config.image_size);
    scene.entities = std::move(entities);
    return scene;
  }
  throw std::runtime_error("generate_scene: no valid layout after " + std::to_string(kMaxAttempts) +
                           " attempts for seed " + std::to_string(seed));
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

std::uint64_t scene_seed(std::uint64_t corpus_seed, Split split, std::size_t index) {
  return splitmix64(splitmix64(corpus_seed) ^ (static_cast<std::uint64_t>(split) << 56) ^ index);
}

std::vector<GroundTruthScene> generate_split(const CorpusConfig& config, Split split) {
  const std::size_t count =
      split == Split::train ? config.train_scenes : split == Split::val ? config.val_scenes : config.test_scenes;
  std::vector<GroundTruthScene> scenes;
  scenes.reserve(count);
  PredicateTally tally{};
  for (std::size_t i = 0; i < count; ++i) {
    GroundTruthScene scene = generate_scene(scene_seed(config.seed, split, i), config, split == Split::train, tally);
    std::ostringstream ref;
    ref << "images/" << split_name(split) << '_';
    ref.width(6);
    ref.fill('0');
    ref << i << ".bin";
    scene.image_ref = ref.str();
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

std::array<double, kPredicateClasses> predicate_weights(double decay) {
  std::array<double, kPredicateClasses> w{};
  double total = 0.0;
  for (std::size_t p = 0; p < kPredicateClasses; ++p) total += w[p] = std::pow(decay, static_cast<double>(p));
  for (double& v : w) v /= total;
  return w;
}

std::array<std::size_t, kPredicateClasses> predicate_histogram(const std::vector<GroundTruthScene>& scenes) {
  std::array<std::size_t, kPredicateClasses> hist{};
  for (const auto& s : scenes)
    for (const auto& r : s.triplets) ++hist.at(r.predicate);
  return hist;
}

std::array<int, kPredicateClasses> frequency_groups(const std::array<std::size_t, kPredicateClasses>& histogram) {
  std::array<std::size_t, kPredicateClasses> order{};
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return histogram[a] > histogram[b]; });
  std::array<int, kPredicateClasses> groups{};
  for (std::size_t rank = 0; rank < kPredicateClasses; ++rank) groups[order[rank]] = rank < 3 ? 0 : rank < 6 ? 1 : 2;
  return groups;
}

// ---- corpus files ------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "corpus I/O assumes a little-endian host");

void write_image(const Image& image, const std::filesystem::path& path) {
  if (image.pixels.size() != Image::kChannels * image.height * image.width)
    throw std::invalid_argument("write_image: pixel count does not match extents");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_image: cannot open " + path.string());
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(image.height), static_cast<std::uint32_t>(image.width)};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write_image: write failed for " + path.string());
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_image: cannot open " + path.string());
  std::uint32_t header[2] = {0, 0};
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (!in || header[0] == 0 || header[1] == 0) throw std::runtime_error("read_image: bad header in " + path.string());
  Image img{header[0], header[1], {}};
  img.pixels.resize(Image::kChannels * img.height * img.width);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
  if (!in) throw std::runtime_error("read_image: truncated pixel data in " + path.string());
  return img;
}

namespace {

nlohmann::json scene_to_json(const GroundTruthScene& scene) {
  nlohmann::json entities = nlohmann::json::array();
  for (const Entity& e : scene.entities)
    entities.push_back({{"class", e.class_id}, {"box", {e.box.cx, e.box.cy, e.box.w, e.box.h}}, {"color", e.color}});
  nlohmann::json triplets = nlohmann::json::array();
  for (const Relation& r : scene.triplets) triplets.push_back({r.subject, r.predicate, r.object});
  return {{"image_ref", scene.image_ref}, {"entities", entities}, {"triplets", triplets}};
}

GroundTruthScene scene_from_json(const nlohmann::json& j) {
  GroundTruthScene scene;
  scene.image_ref = j.at("image_ref").get<std::string>();
  for (const auto& e : j.at("entities")) {
    const auto& b = e.at("box");
    if (b.size() != 4) throw std::invalid_argument("entity box must have 4 values");
    Entity ent{e.at("class").get<std::size_t>(), {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
               e.at("color").get<std::size_t>()};
    if (ent.class_id >= kEntityClasses) throw std::invalid_argument("entity class out of range");
    scene.entities.push_back(ent);
  }
  for (const auto& t : j.at("triplets")) {
    if (t.size() != 3) throw std::invalid_argument("triplet must have 3 values");
    Relation r{t[0].get<std::size_t>(), t[1].get<std::size_t>(), t[2].get<std::size_t>()};
    if (r.subject >= scene.entities.size() || r.object >= scene.entities.size() || r.subject == r.object ||
        r.predicate >= kPredicateClasses)
      throw std::invalid_argument("triplet indices out of range");
    scene.triplets.push_back(r);
  }
  return scene;
}

}  // namespace

void write_corpus(const std::vector<GroundTruthScene>& scenes, const std::filesystem::path& path) {
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::filesystem::create_directories(dir);
  for (const auto& scene : scenes) write_image(scene.image, dir / scene.image_ref);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_corpus: cannot open " + tmp.string());
    for (const auto& scene : scenes) out << scene_to_json(scene).dump() << '\n';
    if (!out) throw std::runtime_error("write_corpus: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<GroundTruthScene> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_corpus: cannot open " + path.string());
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::vector<GroundTruthScene> scenes;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      GroundTruthScene scene = scene_from_json(nlohmann::json::parse(line));
      scene.image = read_image(dir / scene.image_ref);
      scenes.push_back(std::move(scene));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": malformed record: " + e.what());
    }
  }
  return scenes;
}

std::vector<GtEntity> gt_entities(const GroundTruthScene& scene) {
  std::vector<GtEntity> out;
  for (const Entity& e : scene.entities) out.push_back({e.class_id, e.box});
  return out;
}

std::vector<GtTriplet> gt_triplets(const GroundTruthScene& scene) {
  std::vector<GtTriplet> out;
  for (const Relation& r : scene.triplets) {
    const Entity& s = scene.entities.at(r.subject);
    const Entity& o = scene.entities.at(r.object);
    out.push_back({s.class_id, s.box, r.predicate, o.class_id, o.box});
  }
  return out;
}

}  // namespace reltr
