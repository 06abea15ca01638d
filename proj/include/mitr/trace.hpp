#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

namespace mitr {

// One sample of a mouse trace, coordinates normalized to the image.
struct TracePoint {
  double x = 0.0;
  double y = 0.0;
  double t = 0.0;

  friend bool operator==(const TracePoint&, const TracePoint&) = default;
};

// Time span during which a caption word was spoken.
struct WordTiming {
  std::string token;
  double t_start = 0.0;
  double t_end = 0.0;

  friend bool operator==(const WordTiming&, const WordTiming&) = default;
};

// [x1, y1, x2, y2, area] in normalized image coordinates.
struct TraceBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  double area = 0.0;

  // Box covering the whole image; stands for "no specific location".
  static constexpr TraceBox whole_image() { return {0.0, 0.0, 1.0, 1.0, 1.0}; }

  std::array<double, 5> channels() const { return {x1, y1, x2, y2, area}; }
  bool is_whole_image() const { return *this == whole_image(); }

  friend bool operator==(const TraceBox&, const TraceBox&) = default;
};

// One box per caption token, in caption order.
using AlignedTrace = std::vector<TraceBox>;

// Groups point indices by word: point p belongs to word w iff
// t_start(w) <= p.t < t_end(w). Throws DataError on unsorted input.
std::vector<std::vector<TracePoint>> segment_trace(std::span<const TracePoint> points,
                                                   std::span<const WordTiming> timings);

// Axis-aligned bounding box of a non-empty point group.
TraceBox box_from_points(std::span<const TracePoint> points);

// Word-aligned boxes; words without any trace point get the whole-image box.
AlignedTrace encode_trace(std::span<const TracePoint> points, std::span<const WordTiming> timings);

// Checks 0 <= x1 <= x2 <= 1, 0 <= y1 <= y2 <= 1 and the area channel.
bool valid_box(const TraceBox& box, double tol = 1e-12);

}  // namespace mitr
