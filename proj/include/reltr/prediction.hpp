#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "reltr/boxes.hpp"

namespace reltr {

/// One entity-decoder slot, as plain values. The last logit is background.
struct EntityPrediction {
  std::vector<double> logits;
  Box box;
};

/// One triplet-decoder slot, as plain values. The last entity logit is
/// background and the last predicate logit is no-relation.
struct TripletPrediction {
  std::vector<double> sub_logits;
  Box sub_box;
  std::vector<double> obj_logits;
  Box obj_box;
  std::vector<double> prd_logits;
  std::vector<double> sub_heatmap;  // H*W, empty when visual attention is ablated
  std::vector<double> obj_heatmap;
};

struct GtEntity {
  std::size_t class_id = 0;
  Box box;
};

/// A ground-truth triplet with subject/object resolved to class and box.
struct GtTriplet {
  std::size_t sub_class = 0;
  Box sub_box;
  std::size_t predicate = 0;
  std::size_t obj_class = 0;
  Box obj_box;
};

std::vector<double> softmax_probs(std::span<const double> logits);
std::size_t argmax(std::span<const double> values);
/// argmax over values[0, count).
std::size_t argmax_prefix(std::span<const double> values, std::size_t count);

}  // namespace reltr
