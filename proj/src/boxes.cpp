#include "reltr/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reltr {

double box_l1(const Box& a, const Box& b) {
  return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) + std::fabs(a.h - b.h);
}

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  return iw > 0.0 && ih > 0.0 ? iw * ih : 0.0;
}

double box_iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double box_giou(const Box& a, const Box& b) {
  constexpr double kMinExtent = 1e-9;
  if (a.w <= kMinExtent || a.h <= kMinExtent || b.w <= kMinExtent || b.h <= kMinExtent)
    throw std::invalid_argument("box_giou: degenerate box");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosing = enclosing_box(a, b).area();
  return inter / uni - (enclosing - uni) / enclosing;
}

Box enclosing_box(const Box& a, const Box& b) {
  return Box::from_corners(std::min(a.x0(), b.x0()), std::min(a.y0(), b.y0()), std::max(a.x1(), b.x1()),
                           std::max(a.y1(), b.y1()));
}

}  // namespace reltr
