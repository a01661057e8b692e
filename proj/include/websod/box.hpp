#pragma once

#include <stdexcept>
#include <string>

namespace websod {

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
/// Width is x2 - x1 (exclusive convention).
class Box {
 public:
  Box(double x1, double y1, double x2, double y2);

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1_ + x2_); }
  double center_y() const { return 0.5 * (y1_ + y2_); }

  /// Clip to [0,w]x[0,h]. Returns false when the clipped box would be empty.
  static bool clip(double& x1, double& y1, double& x2, double& y2, double w, double h);

  bool operator==(const Box&) const = default;

 private:
  double x1_, y1_, x2_, y2_;
};

double iou(const Box& a, const Box& b);
double intersection_area(const Box& a, const Box& b);

std::string to_string(const Box& b);

/// A scored, class-labelled detector output. class_id is a foreground class.
struct Detection {
  Box box;
  int class_id;
  double score;
};

struct GroundTruth {
  Box box;
  int class_id;
};

}  // namespace websod
