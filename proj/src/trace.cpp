#include "mitr/trace.hpp"

#include <algorithm>
#include <cmath>

#include "mitr/error.hpp"

namespace mitr {

namespace {

void check_timings(std::span<const WordTiming> timings) {
  for (std::size_t i = 0; i < timings.size(); ++i) {
    if (!(timings[i].t_start <= timings[i].t_end)) {
      throw DataError("word timing " + std::to_string(i) + " ('" + timings[i].token +
                      "') ends before it starts");
    }
    if (i > 0 && timings[i].t_start < timings[i - 1].t_end) {
      throw DataError("word timing " + std::to_string(i) + " ('" + timings[i].token +
                      "') overlaps or precedes the previous word");
    }
  }
}

}  // namespace

std::vector<std::vector<TracePoint>> segment_trace(std::span<const TracePoint> points,
                                                   std::span<const WordTiming> timings) {
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].t < points[i - 1].t) {
      throw DataError("trace points are not sorted by time (index " + std::to_string(i) + ")");
    }
  }
  check_timings(timings);

  std::vector<std::vector<TracePoint>> groups(timings.size());
  std::size_t p = 0;
  for (std::size_t w = 0; w < timings.size(); ++w) {
    while (p < points.size() && points[p].t < timings[w].t_start) {
      ++p;
    }
    while (p < points.size() && points[p].t < timings[w].t_end) {
      groups[w].push_back(points[p]);
      ++p;
    }
  }
  return groups;
}

TraceBox box_from_points(std::span<const TracePoint> points) {
  if (points.empty()) {
    throw DataError("box_from_points: empty point group");
  }
  TraceBox b{points[0].x, points[0].y, points[0].x, points[0].y, 0.0};
  for (const TracePoint& p : points.subspan(1)) {
    b.x1 = std::min(b.x1, p.x);
    b.y1 = std::min(b.y1, p.y);
    b.x2 = std::max(b.x2, p.x);
    b.y2 = std::max(b.y2, p.y);
  }
  b.area = (b.x2 - b.x1) * (b.y2 - b.y1);
  return b;
}

AlignedTrace encode_trace(std::span<const TracePoint> points, std::span<const WordTiming> timings) {
  if (timings.empty()) {
    throw DataError("encode_trace: empty word timing list");
  }
  const auto groups = segment_trace(points, timings);
  AlignedTrace out;
  out.reserve(groups.size());
  for (const auto& g : groups) {
    out.push_back(g.empty() ? TraceBox::whole_image() : box_from_points(g));
  }
  return out;
}

bool valid_box(const TraceBox& b, double tol) {
  const bool coords = 0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= 1.0 && 0.0 <= b.y1 &&
                      b.y1 <= b.y2 && b.y2 <= 1.0;
  if (!coords) {
    return false;
  }
  return b.is_whole_image() || std::abs(b.area - (b.x2 - b.x1) * (b.y2 - b.y1)) <= tol;
}

}  // namespace mitr
