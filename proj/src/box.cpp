#include "websod/box.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "websod/tensor.hpp"

namespace websod {

bool all_finite(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

Box::Box(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
  if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2)))
    throw std::invalid_argument("box coordinates must be finite");
  if (!(x1 < x2) || !(y1 < y2))
    throw std::invalid_argument("degenerate box " + to_string(*this));
}

bool Box::clip(double& x1, double& y1, double& x2, double& y2, double w, double h) {
  x1 = std::clamp(x1, 0.0, w);
  x2 = std::clamp(x2, 0.0, w);
  y1 = std::clamp(y1, 0.0, h);
  y2 = std::clamp(y2, 0.0, h);
  return x1 < x2 && y1 < y2;
}

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter == 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

std::string to_string(const Box& b) {
  std::ostringstream os;
  os << "(" << b.x1() << "," << b.y1() << "," << b.x2() << "," << b.y2() << ")";
  return os.str();
}

}  // namespace websod
