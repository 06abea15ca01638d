#include <doctest.h>

#include <algorithm>

#include "mitr/error.hpp"
#include "mitr/rng.hpp"
#include "mitr/trace.hpp"

using namespace mitr;

namespace {

double cross(const TracePoint& o, const TracePoint& a, const TracePoint& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew's monotone chain.
std::vector<TracePoint> convex_hull(std::vector<TracePoint> p) {
  std::sort(p.begin(), p.end(), [](const TracePoint& a, const TracePoint& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  if (p.size() < 3) {
    return p;
  }
  std::vector<TracePoint> h(2 * p.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(h[k - 2], h[k - 1], p[i - 1]) <= 0) --k;
    h[k++] = p[i - 1];
  }
  h.resize(k - 1);
  return h;
}

TraceBox hull_box(const std::vector<TracePoint>& pts) {
  const auto hull = convex_hull(pts);
  TraceBox b{1e9, 1e9, -1e9, -1e9, 0.0};
  for (const auto& p : hull) {
    b.x1 = std::min(b.x1, p.x);
    b.y1 = std::min(b.y1, p.y);
    b.x2 = std::max(b.x2, p.x);
    b.y2 = std::max(b.y2, p.y);
  }
  b.area = (b.x2 - b.x1) * (b.y2 - b.y1);
  return b;
}

}  // namespace

TEST_CASE("segment_trace: interval membership, empty groups, boundary") {
  const std::vector<TracePoint> pts{{0.1, 0.1, 0.1}, {0.2, 0.2, 0.3}, {0.3, 0.3, 0.5}};
  const std::vector<WordTiming> words{{"a", 0.0, 0.3}, {"b", 0.3, 1.0}, {"c", 1.0, 2.0}};
  const auto g = segment_trace(pts, words);
  REQUIRE(g.size() == 3);
  CHECK(g[0] == std::vector<TracePoint>{pts[0]});
  CHECK(g[1] == std::vector<TracePoint>{pts[1], pts[2]});
  CHECK(g[2].empty());
}

TEST_CASE("segment_trace rejects unsorted points") {
  const std::vector<TracePoint> pts{{0.1, 0.1, 0.5}, {0.2, 0.2, 0.1}};
  const std::vector<WordTiming> words{{"a", 0.0, 1.0}};
  CHECK_THROWS_AS(segment_trace(pts, words), DataError);
}

TEST_CASE("box_from_points fixtures") {
  const std::vector<TracePoint> two{{0.1, 0.2, 0.0}, {0.3, 0.5, 0.0}};
  const TraceBox b = box_from_points(two);
  CHECK(b.x1 == 0.1);
  CHECK(b.y1 == 0.2);
  CHECK(b.x2 == 0.3);
  CHECK(b.y2 == 0.5);
  CHECK(std::abs(b.area - 0.06) <= 1e-15);
  const std::vector<TracePoint> one{{0.4, 0.4, 0.0}};
  CHECK(box_from_points(one) == TraceBox{0.4, 0.4, 0.4, 0.4, 0.0});
  CHECK_THROWS_AS(box_from_points(std::vector<TracePoint>{}), DataError);
}

TEST_CASE("box_from_points equals the bounding box of the convex hull") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TracePoint> pts(1 + rng.index(30));
    for (auto& p : pts) {
      p = {rng.uniform(), rng.uniform(), 0.0};
    }
    CHECK(box_from_points(pts) == hull_box(pts));
    CHECK(box_from_points(pts) == box_from_points(convex_hull(pts)));
  }
}

TEST_CASE("encode_trace: sentinel for silent words, errors on empty timings") {
  const std::vector<TracePoint> pts{{0.1, 0.1, 0.1}, {0.4, 0.3, 0.2}, {0.9, 0.8, 2.5}};
  const std::vector<WordTiming> words{{"a", 0.0, 1.0}, {"b", 1.0, 2.0}, {"c", 2.0, 3.0}};
  const auto t = encode_trace(pts, words);
  REQUIRE(t.size() == 3);
  CHECK(t[0] == TraceBox{0.1, 0.1, 0.4, 0.3, (0.4 - 0.1) * (0.3 - 0.1)});
  CHECK(t[1] == TraceBox::whole_image());
  CHECK(t[2] == TraceBox{0.9, 0.8, 0.9, 0.8, 0.0});
  CHECK_THROWS_AS(encode_trace(pts, std::vector<WordTiming>{}), DataError);
}

TEST_CASE("encode_trace matches a direct per-interval min/max on a generated fixture") {
  Rng rng(4);
  std::vector<WordTiming> words;
  for (int w = 0; w < 5; ++w) {
    words.push_back({"w" + std::to_string(w), w * 1.0, w * 1.0 + 0.9});
  }
  std::vector<TracePoint> pts;
  for (int i = 0; i < 20; ++i) {
    pts.push_back({rng.uniform(), rng.uniform(), i * 0.25});
  }
  const auto got = encode_trace(pts, words);
  REQUIRE(got.size() == 5);
  for (std::size_t w = 0; w < 5; ++w) {
    double x1 = 2, y1 = 2, x2 = -1, y2 = -1;
    int n = 0;
    for (const auto& p : pts) {
      if (p.t >= words[w].t_start && p.t < words[w].t_end) {
        x1 = std::min(x1, p.x), y1 = std::min(y1, p.y), x2 = std::max(x2, p.x), y2 = std::max(y2, p.y);
        ++n;
      }
    }
    const TraceBox expect = n == 0 ? TraceBox::whole_image() : TraceBox{x1, y1, x2, y2, (x2 - x1) * (y2 - y1)};
    CHECK(got[w] == expect);
    CHECK(valid_box(got[w]));
  }
}
