#include "reltr/loss.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace reltr {

namespace {

struct Corners {
  Tensor x0, y0, x1, y1;
};

Corners corners(const Tensor& boxes) {
  const Tensor cx = slice(boxes, 1, 0, 1), cy = slice(boxes, 1, 1, 2);
  const Tensor hw = scale(slice(boxes, 1, 2, 3), 0.5), hh = scale(slice(boxes, 1, 3, 4), 0.5);
  return {sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
}

Tensor area(const Corners& c) { return mul(sub(c.x1, c.x0), sub(c.y1, c.y0)); }

Tensor box_tensor(std::span<const Box> boxes) {
  std::vector<double> v;
  v.reserve(boxes.size() * 4);
  for (const Box& b : boxes)
    for (double x : b.values()) v.push_back(x);
  return Tensor({boxes.size(), 4}, std::move(v));
}

Tensor zero() { return Tensor::scalar(0.0); }

}  // namespace

Tensor giou_rows(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2 || a.cols() != 4)
    throw std::invalid_argument("giou_rows: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const Corners ca = corners(a), cb = corners(b);
  const Tensor iw = relu(sub(minimum(ca.x1, cb.x1), maximum(ca.x0, cb.x0)));
  const Tensor ih = relu(sub(minimum(ca.y1, cb.y1), maximum(ca.y0, cb.y0)));
  const Tensor inter = mul(iw, ih);
  const Tensor uni = sub(add(area(ca), area(cb)), inter);
  const Tensor hull = mul(sub(maximum(ca.x1, cb.x1), minimum(ca.x0, cb.x0)),
                          sub(maximum(ca.y1, cb.y1), minimum(ca.y0, cb.y0)));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

Tensor box_regression_sum(const Tensor& pred, std::span<const Box> targets) {
  if (targets.empty()) return zero();
  if (pred.rank() != 2 || pred.rows() != targets.size() || pred.cols() != 4)
    throw std::invalid_argument("box_regression_sum: " + shape_string(pred.shape()) + " predictions for " +
                                std::to_string(targets.size()) + " targets");
  const Tensor t = box_tensor(targets);
  const Tensor l1 = sum(abs(sub(pred, t)));
  const Tensor giou = sum(giou_rows(pred, t));
  const double n = static_cast<double>(targets.size());
  return add(scale(l1, kL1Weight), shift(scale(giou, -kGiouWeight), kGiouWeight * n));
}

Tensor weighted_class_loss(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> gates,
                           std::size_t padding_class) {
  if (gates.size() != targets.size())
    throw std::invalid_argument("weighted_class_loss: gate count does not match target count");
  std::vector<double> w(targets.size());
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    w[i] = gates[i] * (targets[i] == padding_class ? kBackgroundWeight : 1.0);
    total += w[i];
  }
  if (total == 0.0) return zero();
  return scale(cross_entropy(logits, targets, w), 1.0 / total);
}

EntityLossTerms entity_loss(const EntityLayerOutput& out, const EntityAssignment& assignment, std::size_t gt_count) {
  const std::size_t slots = out.logits.rows();
  if (assignment.targets.size() != slots)
    throw std::invalid_argument("entity_loss: assignment covers " + std::to_string(assignment.targets.size()) +
                                " slots, output has " + std::to_string(slots));
  const std::size_t background = out.logits.cols() - 1;
  std::vector<std::size_t> classes(slots), rows;
  std::vector<Box> boxes;
  for (std::size_t i = 0; i < slots; ++i) {
    classes[i] = assignment.targets[i].class_id;
    if (assignment.targets[i].box) {
      rows.push_back(i);
      boxes.push_back(*assignment.targets[i].box);
    }
  }
  const std::vector<double> gates(slots, 1.0);
  EntityLossTerms terms;
  terms.cls = weighted_class_loss(out.logits, classes, gates, background);
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, gt_count));
  terms.box = rows.empty() ? zero() : scale(box_regression_sum(gather_rows(out.boxes, rows), boxes), norm);
  return terms;
}

TripletLossTerms triplet_loss(const TripletLayerOutput& out, const AssignmentResult& assignment, std::size_t gt_count) {
  const std::size_t slots = out.sub_logits.rows();
  if (assignment.targets.size() != slots)
    throw std::invalid_argument("triplet_loss: assignment covers " + std::to_string(assignment.targets.size()) +
                                " slots, output has " + std::to_string(slots));
  const std::size_t background = out.sub_logits.cols() - 1;
  const std::size_t no_relation = out.prd_logits.cols() - 1;
  std::vector<std::size_t> sub_cls(slots), obj_cls(slots), prd(slots), sub_rows, obj_rows;
  std::vector<double> sub_gate(slots), obj_gate(slots), ones(slots, 1.0);
  std::vector<Box> sub_boxes, obj_boxes;
  for (std::size_t i = 0; i < slots; ++i) {
    const TripletTarget& t = assignment.targets[i];
    sub_cls[i] = t.sub_class;
    obj_cls[i] = t.obj_class;
    prd[i] = t.predicate;
    sub_gate[i] = t.sub_active ? 1.0 : 0.0;
    obj_gate[i] = t.obj_active ? 1.0 : 0.0;
    if (t.sub_box && t.sub_active) {
      sub_rows.push_back(i);
      sub_boxes.push_back(*t.sub_box);
    }
    if (t.obj_box && t.obj_active) {
      obj_rows.push_back(i);
      obj_boxes.push_back(*t.obj_box);
    }
  }
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, gt_count));
  TripletLossTerms terms;
  terms.sub_cls = weighted_class_loss(out.sub_logits, sub_cls, sub_gate, background);
  terms.obj_cls = weighted_class_loss(out.obj_logits, obj_cls, obj_gate, background);
  terms.prd_cls = weighted_class_loss(out.prd_logits, prd, ones, no_relation);
  terms.sub_box =
      sub_rows.empty() ? zero() : scale(box_regression_sum(gather_rows(out.sub_boxes, sub_rows), sub_boxes), norm);
  terms.obj_box =
      obj_rows.empty() ? zero() : scale(box_regression_sum(gather_rows(out.obj_boxes, obj_rows), obj_boxes), norm);
  return terms;
}

LossComponents& LossComponents::operator+=(const LossComponents& o) {
  entity_cls += o.entity_cls;
  entity_box += o.entity_box;
  sub_cls += o.sub_cls;
  sub_box += o.sub_box;
  obj_cls += o.obj_cls;
  obj_box += o.obj_box;
  prd_cls += o.prd_cls;
  return *this;
}

SceneAssignments assign_scene(const ModelOutput& out, const GroundTruthScene& scene, double iou_threshold) {
  const auto entities = gt_entities(scene);
  const auto triplets = gt_triplets(scene);
  SceneAssignments a;
  for (const auto& layer : out.entities) a.entities.push_back(assign_entities(extract_entities(layer), entities));
  for (const auto& layer : out.triplets)
    a.triplets.push_back(assign_triplets(extract_triplets(layer), triplets, iou_threshold));
  return a;
}

LossBreakdown total_loss(const ModelOutput& out, const GroundTruthScene& scene, const SceneAssignments& assignments) {
  if (assignments.entities.size() != out.entities.size() || assignments.triplets.size() != out.triplets.size())
    throw std::invalid_argument("total_loss: assignments do not cover every decoder layer");
  const std::size_t layers = std::max(out.entities.size(), out.triplets.size());
  LossBreakdown result;
  std::vector<Tensor> parts;
  for (std::size_t l = 0; l < layers; ++l) {
    LossComponents c;
    if (l < out.entities.size()) {
      const auto e = entity_loss(out.entities[l], assignments.entities[l], scene.entities.size());
      c.entity_cls = e.cls.item();
      c.entity_box = e.box.item();
      parts.insert(parts.end(), {e.cls, e.box});
    }
    if (l < out.triplets.size()) {
      const auto t = triplet_loss(out.triplets[l], assignments.triplets[l], scene.triplets.size());
      c.sub_cls = t.sub_cls.item();
      c.sub_box = t.sub_box.item();
      c.obj_cls = t.obj_cls.item();
      c.obj_box = t.obj_box.item();
      c.prd_cls = t.prd_cls.item();
      parts.insert(parts.end(), {t.sub_cls, t.sub_box, t.obj_cls, t.obj_box, t.prd_cls});
    }
    result.layers.push_back(c);
    result.summed += c;
  }
  result.total_tensor = parts.empty() ? zero() : sum(concat(parts, 0));
  result.total = result.total_tensor.item();
  return result;
}

LossBreakdown total_loss(const ModelOutput& out, const GroundTruthScene& scene, double iou_threshold) {
  return total_loss(out, scene, assign_scene(out, scene, iou_threshold));
}

}  // namespace reltr
