#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "reltr/boxes.hpp"
#include "reltr/prediction.hpp"

namespace reltr {

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalEps = 1e-8;
inline constexpr double kL1Weight = 5.0;
inline constexpr double kGiouWeight = 2.0;

/// Focal-style class cost: alpha(1-p)^g(-log(p+eps)) - (1-alpha)p^g(-log(1-p+eps)).
double class_cost(double prob_of_target);

/// 5 * L1 + 2 * (1 - GIoU).
double box_cost(const Box& pred, const Box& gt);

/// Class cost plus, when gt_box is present, the box cost. probs are softmax
/// probabilities over all classes including background.
double entity_cost(std::span<const double> probs, const Box& pred_box, std::size_t gt_class,
                   const std::optional<Box>& gt_box);

/// Subject cost + object cost + predicate cost (class term only).
double triplet_cost(const TripletPrediction& pred, const GtTriplet& gt);

/// Dense rows x cols matrix of matching costs.
class CostMatrix {
 public:
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> data_;
};

struct Matching {
  std::vector<std::size_t> col_to_row;  // injective
  double total = 0.0;                   // summed in column order
};

/// Minimum-cost assignment of every column to a distinct row (rows >= cols).
/// Throws on non-finite entries or rows < cols.
Matching hungarian(const CostMatrix& cost);

CostMatrix triplet_cost_matrix(std::span<const TripletPrediction> preds, std::span<const GtTriplet> gts);
CostMatrix entity_cost_matrix(std::span<const EntityPrediction> preds, std::span<const GtEntity> gts);

/// Loss targets for one triplet slot.
struct TripletTarget {
  std::size_t sub_class = 0;  // background index when unassigned
  std::size_t obj_class = 0;
  std::size_t predicate = 0;  // no-relation index when unassigned
  std::optional<Box> sub_box;
  std::optional<Box> obj_box;
  bool sub_active = true;  // Θ_s
  bool obj_active = true;  // Θ_o
  std::optional<std::size_t> gt_index;
};

struct AssignmentResult {
  std::vector<std::size_t> gt_to_pred;
  std::vector<TripletTarget> targets;  // one per prediction slot
};

/// Hungarian triplet matching plus the IoU-relaxed background assignment.
///
/// An unmatched slot's subject (object) branch is switched off when its
/// argmax entity label equals the label of the ground-truth subject (object)
/// with the highest IoU to the predicted box, and that IoU is >= iou_threshold.
/// iou_threshold >= 1 disables the relaxation entirely.
AssignmentResult assign_triplets(std::span<const TripletPrediction> preds, std::span<const GtTriplet> gts,
                                 double iou_threshold);

struct EntityTarget {
  std::size_t class_id = 0;  // background index when unassigned
  std::optional<Box> box;
};

struct EntityAssignment {
  std::vector<std::size_t> gt_to_pred;
  std::vector<EntityTarget> targets;
};

EntityAssignment assign_entities(std::span<const EntityPrediction> preds, std::span<const GtEntity> gts);

}  // namespace reltr
