#pragma once

#include <array>

namespace reltr {

/// Axis-aligned box in normalized image coordinates, center/size form.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  std::array<double, 4> values() const { return {cx, cy, w, h}; }

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Sum of absolute coordinate differences over (cx, cy, w, h).
double box_l1(const Box& a, const Box& b);
double intersection_area(const Box& a, const Box& b);
/// Zero when the union is empty.
double box_iou(const Box& a, const Box& b);
/// IoU - (enclosing - union) / enclosing. Throws on w or h <= 1e-9.
double box_giou(const Box& a, const Box& b);
/// Smallest box enclosing both.
Box enclosing_box(const Box& a, const Box& b);

}  // namespace reltr
