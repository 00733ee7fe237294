#include "reltr/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace reltr {

double class_cost(double p) {
  const double positive = kFocalAlpha * std::pow(1.0 - p, kFocalGamma) * -std::log(p + kFocalEps);
  const double negative = (1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) * -std::log(1.0 - p + kFocalEps);
  return positive - negative;
}

double box_cost(const Box& pred, const Box& gt) {
  return kL1Weight * box_l1(pred, gt) + kGiouWeight * (1.0 - box_giou(pred, gt));
}

double entity_cost(std::span<const double> probs, const Box& pred_box, std::size_t gt_class,
                   const std::optional<Box>& gt_box) {
  double cost = class_cost(probs[gt_class]);
  if (gt_box) cost += box_cost(pred_box, *gt_box);
  return cost;
}

namespace {

struct SlotProbs {
  std::vector<double> sub;
  std::vector<double> obj;
  std::vector<double> prd;
};

SlotProbs slot_probs(const TripletPrediction& p) {
  return {softmax_probs(p.sub_logits), softmax_probs(p.obj_logits), softmax_probs(p.prd_logits)};
}

double triplet_cost(const SlotProbs& probs, const TripletPrediction& pred, const GtTriplet& gt) {
  return entity_cost(probs.sub, pred.sub_box, gt.sub_class, gt.sub_box) +
         entity_cost(probs.obj, pred.obj_box, gt.obj_class, gt.obj_box) +
         class_cost(probs.prd[gt.predicate]);
}

}  // namespace

double triplet_cost(const TripletPrediction& pred, const GtTriplet& gt) { return triplet_cost(slot_probs(pred), pred, gt); }

CostMatrix triplet_cost_matrix(std::span<const TripletPrediction> preds, std::span<const GtTriplet> gts) {
  CostMatrix cost(preds.size(), gts.size());
  for (std::size_t r = 0; r < preds.size(); ++r) {
    const SlotProbs probs = slot_probs(preds[r]);
    for (std::size_t c = 0; c < gts.size(); ++c) cost.at(r, c) = triplet_cost(probs, preds[r], gts[c]);
  }
  return cost;
}

CostMatrix entity_cost_matrix(std::span<const EntityPrediction> preds, std::span<const GtEntity> gts) {
  CostMatrix cost(preds.size(), gts.size());
  for (std::size_t r = 0; r < preds.size(); ++r) {
    const auto probs = softmax_probs(preds[r].logits);
    for (std::size_t c = 0; c < gts.size(); ++c)
      cost.at(r, c) = entity_cost(probs, preds[r].box, gts[c].class_id, gts[c].box);
  }
  return cost;
}

// Shortest augmenting path with potentials; columns are inserted one at a
// time, rows play the role of the larger side. O(cols^2 * rows).
Matching hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.cols();
  const std::size_t m = cost.rows();
  if (m < n)
    throw std::invalid_argument("hungarian: " + std::to_string(m) + " rows cannot cover " + std::to_string(n) +
                                " columns");
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c)
      if (!std::isfinite(cost.at(r, c)))
        throw std::invalid_argument("hungarian: non-finite cost at (" + std::to_string(r) + ", " + std::to_string(c) +
                                    ")");
  Matching result;
  if (n == 0) return result;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based: u over columns, v over rows, owner[j] = column holding row j.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.col_to_row.assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (owner[j] != 0) result.col_to_row[owner[j] - 1] = j - 1;
  for (std::size_t c = 0; c < n; ++c) result.total += cost.at(result.col_to_row[c], c);
  return result;
}

AssignmentResult assign_triplets(std::span<const TripletPrediction> preds, std::span<const GtTriplet> gts,
                                 double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw std::invalid_argument("assign_triplets: IoU threshold must be in (0, 1]");
  if (preds.size() < gts.size())
    throw std::invalid_argument("assign_triplets: " + std::to_string(preds.size()) + " triplet queries for " +
                                std::to_string(gts.size()) + " ground-truth triplets; raise the query count");
  AssignmentResult result;
  if (preds.empty()) return result;
  const std::size_t entity_bg = preds.front().sub_logits.size() - 1;
  const std::size_t no_relation = preds.front().prd_logits.size() - 1;

  TripletTarget background;
  background.sub_class = background.obj_class = entity_bg;
  background.predicate = no_relation;
  result.targets.assign(preds.size(), background);
  result.gt_to_pred = hungarian(triplet_cost_matrix(preds, gts)).col_to_row;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    TripletTarget& t = result.targets[result.gt_to_pred[g]];
    t.sub_class = gts[g].sub_class;
    t.obj_class = gts[g].obj_class;
    t.predicate = gts[g].predicate;
    t.sub_box = gts[g].sub_box;
    t.obj_box = gts[g].obj_box;
    t.gt_index = g;
  }

  if (iou_threshold >= 1.0 || gts.empty()) return result;

  // Returns true when the branch already detects some ground-truth entity of that role.
  auto already_detected = [&](const std::vector<double>& logits, const Box& box, bool subject_role) {
    const std::size_t label = argmax(logits);
    if (label == entity_bg) return false;
    double best_iou = -1.0;
    std::size_t best = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double iou = box_iou(box, subject_role ? gts[g].sub_box : gts[g].obj_box);
      if (iou > best_iou) {
        best_iou = iou;
        best = g;
      }
    }
    const std::size_t gt_label = subject_role ? gts[best].sub_class : gts[best].obj_class;
    return gt_label == label && best_iou >= iou_threshold;
  };

  for (std::size_t p = 0; p < preds.size(); ++p) {
    TripletTarget& t = result.targets[p];
    if (t.gt_index) continue;
    t.sub_active = !already_detected(preds[p].sub_logits, preds[p].sub_box, true);
    t.obj_active = !already_detected(preds[p].obj_logits, preds[p].obj_box, false);
  }
  return result;
}

EntityAssignment assign_entities(std::span<const EntityPrediction> preds, std::span<const GtEntity> gts) {
  if (preds.size() < gts.size())
    throw std::invalid_argument("assign_entities: " + std::to_string(preds.size()) + " entity queries for " +
                                std::to_string(gts.size()) + " ground-truth entities; raise the query count");
  EntityAssignment result;
  if (preds.empty()) return result;
  const std::size_t background = preds.front().logits.size() - 1;
  result.targets.assign(preds.size(), EntityTarget{background, std::nullopt});
  result.gt_to_pred = hungarian(entity_cost_matrix(preds, gts)).col_to_row;
  for (std::size_t g = 0; g < gts.size(); ++g) result.targets[result.gt_to_pred[g]] = {gts[g].class_id, gts[g].box};
  return result;
}

}  // namespace reltr
