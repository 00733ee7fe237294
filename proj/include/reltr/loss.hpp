#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "reltr/matching.hpp"
#include "reltr/model.hpp"
#include "reltr/scene.hpp"
#include "reltr/tensor.hpp"

namespace reltr {

/// Cross-entropy weight of the background and no-relation classes.
inline constexpr double kBackgroundWeight = 0.1;

/// Box regression over rows with a target: sum of 5 * L1 + 2 * (1 - GIoU),
/// differentiable in pred ([n, 4] cx, cy, w, h). targets are constants.
Tensor box_regression_sum(const Tensor& pred, std::span<const Box> targets);
/// Per-row GIoU of two [n, 4] box tensors.
Tensor giou_rows(const Tensor& a, const Tensor& b);

/// Class loss: weighted mean of per-slot cross-entropy, weight
/// gate * (kBackgroundWeight if the target is the padding class else 1).
/// Zero (and gradient-free) when every weight is zero.
Tensor weighted_class_loss(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> gates,
                           std::size_t padding_class);

struct EntityLossTerms {
  Tensor cls;
  Tensor box;
};

struct TripletLossTerms {
  Tensor sub_cls;
  Tensor sub_box;
  Tensor obj_cls;
  Tensor obj_box;
  Tensor prd_cls;
};

/// Box terms are divided by max(1, number of ground-truth boxes).
EntityLossTerms entity_loss(const EntityLayerOutput& out, const EntityAssignment& assignment, std::size_t gt_count);
TripletLossTerms triplet_loss(const TripletLayerOutput& out, const AssignmentResult& assignment, std::size_t gt_count);

struct LossComponents {
  double entity_cls = 0.0;
  double entity_box = 0.0;
  double sub_cls = 0.0;
  double sub_box = 0.0;
  double obj_cls = 0.0;
  double obj_box = 0.0;
  double prd_cls = 0.0;

  double sum() const { return entity_cls + entity_box + sub_cls + sub_box + obj_cls + obj_box + prd_cls; }
  LossComponents& operator+=(const LossComponents& o);
};

/// Matching results for every decoder layer, final layer last.
struct SceneAssignments {
  std::vector<EntityAssignment> entities;
  std::vector<AssignmentResult> triplets;
};

SceneAssignments assign_scene(const ModelOutput& out, const GroundTruthScene& scene, double iou_threshold);

struct LossBreakdown {
  std::vector<LossComponents> layers;  // final layer last; earlier ones are auxiliary
  LossComponents summed;               // over all layers
  double total = 0.0;
  Tensor total_tensor;                 // differentiable total
};

/// Entity and triplet losses of every decoder layer, each weighted 1.
LossBreakdown total_loss(const ModelOutput& out, const GroundTruthScene& scene, const SceneAssignments& assignments);
LossBreakdown total_loss(const ModelOutput& out, const GroundTruthScene& scene, double iou_threshold);

}  // namespace reltr
