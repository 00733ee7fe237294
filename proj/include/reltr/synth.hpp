#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "reltr/scene.hpp"

namespace reltr {

/// Entity classes are shape x size: class_id = 2 * shape + size.
enum class Shape2D : std::size_t { square, circle, triangle, diamond, cross };
inline constexpr std::size_t kShapeCount = 5;
inline constexpr std::size_t kEntityClasses = 2 * kShapeCount;
inline constexpr std::size_t kColorCount = 3;

/// Predicate ids in frequency-rank order (0 is the most frequent).
enum Predicate : std::size_t {
  kLeftOf,
  kAbove,
  kLargerThan,
  kSameColorAs,
  kOverlapping,
  kTouching,
  kInside,
  kSurrounds,
};
inline constexpr std::size_t kPredicateClasses = 8;

std::string_view predicate_name(std::size_t predicate);
std::string entity_class_name(std::size_t class_id);

/// (subject class, predicate, object class).
struct TripletType {
  std::size_t sub_class = 0;
  std::size_t predicate = 0;
  std::size_t obj_class = 0;
  friend bool operator==(const TripletType&, const TripletType&) = default;
  friend auto operator<=>(const TripletType&, const TripletType&) = default;
};

TripletType triplet_type(const GroundTruthScene& scene, const Relation& r);

struct CorpusConfig {
  std::size_t image_size = 32;
  std::size_t train_scenes = 500;
  std::size_t val_scenes = 50;
  std::size_t test_scenes = 100;
  std::size_t min_entities = 2;
  std::size_t max_entities = 6;
  std::size_t max_triplets = 6;
  /// Ratio between the target frequencies of consecutive predicate ranks.
  double decay = 0.55;
  std::vector<TripletType> holdout = default_holdout();
  std::uint64_t seed = 7;

  static std::vector<TripletType> default_holdout();
  void validate() const;
};

/// Geometric predicate rules. Touching means disjoint boxes with a gap of at
/// most kTouchGap; larger_than needs an area ratio above kLargerRatio.
inline constexpr double kTouchGap = 0.02;
inline constexpr double kLargerRatio = 2.0;
bool relation_holds(std::size_t predicate, const Entity& subject, const Entity& object);

/// Every (s, p, o) over ordered pairs s != o whose rule holds, sorted.
std::vector<Relation> derive_relations(const std::vector<Entity>& entities);

/// Renders entities back-to-front by decreasing area.
Image rasterize(const std::vector<Entity>& entities, std::size_t size);

using PredicateTally = std::array<std::size_t, kPredicateClasses>;

/// Draws one scene from its own seed. When exclude_holdout is set, holdout
/// triplet types are never emitted. `tally` holds the predicate counts emitted
/// so far in the split; relations are picked to keep it on the decay profile,
/// and it is updated in place.
GroundTruthScene generate_scene(std::uint64_t scene_seed, const CorpusConfig& config, bool exclude_holdout,
                                PredicateTally& tally);
GroundTruthScene generate_scene(std::uint64_t scene_seed, const CorpusConfig& config, bool exclude_holdout);

enum class Split : std::size_t { train, val, test };
std::string_view split_name(Split split);
std::uint64_t scene_seed(std::uint64_t corpus_seed, Split split, std::size_t index);
std::vector<GroundTruthScene> generate_split(const CorpusConfig& config, Split split);

/// Target predicate distribution: decay^rank, normalized.
std::array<double, kPredicateClasses> predicate_weights(double decay);
std::array<std::size_t, kPredicateClasses> predicate_histogram(const std::vector<GroundTruthScene>& scenes);

/// Head/body/tail membership by training frequency rank: 0 head, 1 body, 2 tail.
std::array<int, kPredicateClasses> frequency_groups(const std::array<std::size_t, kPredicateClasses>& histogram);

// ---- corpus files ---------------------------------------------------------
//
// One JSON object per line: {"image_ref", "entities": [{"class","box","color"}],
// "triplets": [[s, p, o], ...]}. Images live next to the corpus file as raw
// little-endian float32, channel-major, after an 8-byte (IH, IW) uint32 header.

void write_image(const Image& image, const std::filesystem::path& path);
Image read_image(const std::filesystem::path& path);
/// Writes each scene's image to dir(path)/image_ref and the records to path.
void write_corpus(const std::vector<GroundTruthScene>& scenes, const std::filesystem::path& path);
std::vector<GroundTruthScene> read_corpus(const std::filesystem::path& path);

}  // namespace reltr
