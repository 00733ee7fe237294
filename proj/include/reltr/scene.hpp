#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "reltr/boxes.hpp"
#include "reltr/prediction.hpp"

namespace reltr {

/// Channel-major RGB image with values in [0, 1].
struct Image {
  static constexpr std::size_t kChannels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // kChannels * height * width

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

struct Entity {
  std::size_t class_id = 0;
  Box box;
  std::size_t color = 0;
  friend bool operator==(const Entity&, const Entity&) = default;
};

/// (subject entity index, predicate id, object entity index).
struct Relation {
  std::size_t subject = 0;
  std::size_t predicate = 0;
  std::size_t object = 0;
  friend bool operator==(const Relation&, const Relation&) = default;
  friend auto operator<=>(const Relation&, const Relation&) = default;
};

struct GroundTruthScene {
  std::string image_ref;
  Image image;
  std::vector<Entity> entities;
  std::vector<Relation> triplets;
  friend bool operator==(const GroundTruthScene&, const GroundTruthScene&) = default;
};

std::vector<GtEntity> gt_entities(const GroundTruthScene& scene);
std::vector<GtTriplet> gt_triplets(const GroundTruthScene& scene);

}  // namespace reltr
