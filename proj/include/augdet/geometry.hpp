// Axis-aligned boxes in pixel units (fractional coords allowed) and IoU.
#pragma once

#include <algorithm>
#include <stdexcept>

namespace augdet {

struct BBox {
  double x = 0.0;  // top-left
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double x2() const { return x + w; }
  double y2() const { return y + h; }

  bool operator==(const BBox& o) const {
    return x == o.x && y == o.y && w == o.w && h == o.h;
  }
};

inline double intersection_area(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  return ix * iy;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline BBox clip_box(const BBox& b, double width, double height) {
  const double x1 = std::clamp(b.x, 0.0, width);
  const double y1 = std::clamp(b.y, 0.0, height);
  const double x2 = std::clamp(b.x2(), 0.0, width);
  const double y2 = std::clamp(b.y2(), 0.0, height);
  return BBox{x1, y1, x2 - x1, y2 - y1};
}

}  // namespace augdet
