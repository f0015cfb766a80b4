#pragma once

// Binary masks, pixel-edge boundary tracing, arc-length parameterisation and
// the two contour samplers used for object-aware candidate generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "regrasp/error.hpp"
#include "regrasp/geometry.hpp"
#include "regrasp/image.hpp"

namespace regrasp::mask {

/// Row-major occupancy grid. Pixel (x, y) covers [x, x+1) x [y, y+1) in
/// continuous pixel coordinates, so its centre is (x + 0.5, y + 0.5).
class SegMask {
 public:
  SegMask(int width, int height) : width_(width), height_(height), bits_(std::size_t(width) * height, 0) {
    require(width >= 1 && height >= 1, Errc::InvalidArgument, "mask dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }
  bool get(int x, int y) const { return contains(x, y) && bits_[std::size_t(y) * width_ + x] != 0; }
  void set(int x, int y, bool v = true) { bits_.at(std::size_t(y) * width_ + x) = v ? 1 : 0; }

  std::size_t count() const { return std::size_t(std::count(bits_.begin(), bits_.end(), std::uint8_t{1})); }
  bool any() const { return count() > 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const SegMask&, const SegMask&) = default;

 private:
  int width_;
  int height_;
  std::vector<std::uint8_t> bits_;
};

/// Closed polyline with cumulative arc length. cumulative()[i] is the length
/// from points()[0] to points()[i]; the closing segment brings the total to length().
class Contour {
 public:
  Contour() = default;
  explicit Contour(std::vector<Vec2> points, bool degenerate_region = false)
      : points_(std::move(points)), degenerate_(degenerate_region) {
    require(points_.size() >= 3, Errc::InvalidArgument, "contour needs at least 3 points");
    cumulative_.resize(points_.size());
    cumulative_[0] = 0.0;
    for (std::size_t i = 1; i < points_.size(); ++i) {
      double seg = distance(points_[i - 1], points_[i]);
      require(seg > 0.0, Errc::InvalidArgument, "contour has repeated consecutive points");
      cumulative_[i] = cumulative_[i - 1] + seg;
    }
    double closing = distance(points_.back(), points_.front());
    require(closing > 0.0, Errc::InvalidArgument, "contour closing segment has zero length");
    length_ = cumulative_.back() + closing;
  }

  const std::vector<Vec2>& points() const { return points_; }
  const std::vector<double>& cumulative() const { return cumulative_; }
  double length() const { return length_; }
  std::size_t size() const { return points_.size(); }
  bool closed() const { return true; }
  /// Set when the traced region is a single pixel or a one-pixel-wide line.
  bool degenerate_region() const { return degenerate_; }

  double wrap(double s) const {
    double r = std::fmod(s, length_);
    if (r < 0) r += length_;
    if (r >= length_) r = 0.0;
    return r;
  }

  /// Linear interpolation along the polyline, periodic in length().
  Vec2 point_at(double s) const {
    s = wrap(s);
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
    std::size_t k = std::size_t(it - cumulative_.begin()) - 1;
    Vec2 a = points_[k];
    Vec2 b = points_[(k + 1) % points_.size()];
    double seg_end = (k + 1 < points_.size()) ? cumulative_[k + 1] : length_;
    double t = (s - cumulative_[k]) / (seg_end - cumulative_[k]);
    return a + (b - a) * t;
  }

  /// Arc parameter of the polyline point closest to p.
  double project(Vec2 p) const {
    double best_d = INFINITY, best_s = 0.0;
    for (std::size_t k = 0; k < points_.size(); ++k) {
      Vec2 a = points_[k], b = points_[(k + 1) % points_.size()];
      Vec2 ab = b - a;
      double t = std::clamp(dot(p - a, ab) / dot(ab, ab), 0.0, 1.0);
      double d = distance(p, a + ab * t);
      if (d < best_d) {
        best_d = d;
        best_s = cumulative_[k] + t * norm(ab);
      }
    }
    return wrap(best_s);
  }

  double arc_distance(double a, double b) const {
    double d = std::fabs(wrap(a) - wrap(b));
    return std::min(d, length_ - d);
  }

 private:
  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
  double length_ = 0.0;
  bool degenerate_ = false;
};

struct ContourPoint {
  double s = 0.0;
  Vec2 xy;
  friend bool operator==(const ContourPoint&, const ContourPoint&) = default;
};

inline ContourPoint make_contour_point(const Contour& c, double s) {
  double w = c.wrap(s);
  return {w, c.point_at(w)};
}

namespace detail {

struct Component {
  std::vector<int> label;  // -1 for background
  int best = -1;
  std::size_t best_size = 0;
};

inline Component label_components(const SegMask& m) {
  const int w = m.width(), h = m.height();
  Component out;
  out.label.assign(std::size_t(w) * h, -1);
  int next = 0;
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!m.get(x, y) || out.label[std::size_t(y) * w + x] >= 0) continue;
      std::size_t size = 0;
      stack.push_back(y * w + x);
      out.label[std::size_t(y) * w + x] = next;
      while (!stack.empty()) {
        int idx = stack.back();
        stack.pop_back();
        ++size;
        int cx = idx % w, cy = idx / w;
        const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
        for (auto& d : nb) {
          int nx = cx + d[0], ny = cy + d[1];
          if (m.get(nx, ny) && out.label[std::size_t(ny) * w + nx] < 0) {
            out.label[std::size_t(ny) * w + nx] = next;
            stack.push_back(ny * w + nx);
          }
        }
      }
      if (size > out.best_size) {
        out.best_size = size;
        out.best = next;
      }
      ++next;
    }
  }
  return out;
}

struct IPoint {
  int x, y;
  auto operator<=>(const IPoint&) const = default;
};

}  // namespace detail

/// Outer boundary of the largest 4-connected component, traced along pixel
/// edges. Vertices sit on integer pixel corners and every segment is one pixel
/// edge long, so length() equals the exposed edge count of the region. The
/// loop has positive signed area in pixel coordinates (x right, y down).
inline Contour extract_contour(const SegMask& m) {
  if (!m.any()) fail(Errc::EmptyMask, "mask has no set pixel");
  const int w = m.width();
  auto comp = detail::label_components(m);
  auto in = [&](int x, int y) {
    return m.contains(x, y) && comp.label[std::size_t(y) * w + x] == comp.best;
  };

  using detail::IPoint;
  std::map<IPoint, std::vector<IPoint>> out_edges;  // start -> list of directions
  bool has_block = false;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < w; ++x) {
      if (!in(x, y)) continue;
      if (in(x + 1, y) && in(x, y + 1) && in(x + 1, y + 1)) has_block = true;
      if (!in(x, y - 1)) { out_edges[{x, y}].push_back({1, 0}); }
      if (!in(x + 1, y)) { out_edges[{x + 1, y}].push_back({0, 1}); }
      if (!in(x, y + 1)) { out_edges[{x + 1, y + 1}].push_back({-1, 0}); }
      if (!in(x - 1, y)) { out_edges[{x, y + 1}].push_back({0, -1}); }
    }
  }

  // Chain edges into loops. At pinch vertices prefer the left turn so that
  // diagonally touching pixels stay separated (4-connectivity).
  std::vector<std::vector<Vec2>> loops;
  while (!out_edges.empty()) {
    IPoint start = out_edges.begin()->first;
    std::vector<Vec2> loop;
    IPoint cur = start;
    IPoint dir{0, 0};
    bool first = true;
    while (true) {
      auto it = out_edges.find(cur);
      if (it == out_edges.end()) break;
      auto& dirs = it->second;
      std::size_t pick = 0;
      if (!first && dirs.size() > 1) {
        auto rank = [&](IPoint d) {
          int c = dir.x * d.y - dir.y * d.x;  // >0 left turn in (x, y) coordinates
          int s = dir.x * d.x + dir.y * d.y;
          if (c > 0) return 0;
          if (s > 0) return 1;
          return 2;
        };
        for (std::size_t i = 1; i < dirs.size(); ++i)
          if (rank(dirs[i]) < rank(dirs[pick])) pick = i;
      }
      IPoint d = dirs[pick];
      dirs.erase(dirs.begin() + long(pick));
      if (dirs.empty()) out_edges.erase(it);
      loop.push_back({double(cur.x), double(cur.y)});
      cur = {cur.x + d.x, cur.y + d.y};
      dir = d;
      first = false;
      if (cur == start && out_edges.find(cur) == out_edges.end()) break;
      if (cur == start) {
        // A pinch at the start vertex: continue only if the left-turn rule
        // would leave the loop; otherwise close here.
        auto& sd = out_edges.find(cur)->second;
        bool continues = std::any_of(sd.begin(), sd.end(), [&](IPoint nd) { return dir.x * nd.y - dir.y * nd.x > 0; });
        if (!continues) break;
      }
    }
    loops.push_back(std::move(loop));
  }

  std::size_t best = 0;
  double best_area = -INFINITY;
  for (std::size_t i = 0; i < loops.size(); ++i) {
    double a = signed_area(loops[i]);
    if (a > best_area) {
      best_area = a;
      best = i;
    }
  }
  return Contour(std::move(loops[best]), !has_block);
}

/// Pixels on the interior side of every contour segment. For the unit-edge
/// contours produced by extract_contour this is exactly the region's boundary
/// pixel set (hole-free regions).
inline std::vector<std::pair<int, int>> rasterize_boundary(const Contour& c) {
  std::vector<std::pair<int, int>> px;
  const auto& pts = c.points();
  for (std::size_t k = 0; k < pts.size(); ++k) {
    Vec2 a = pts[k], b = pts[(k + 1) % pts.size()];
    int ax = int(std::lround(a.x)), ay = int(std::lround(a.y));
    int dx = int(std::lround(b.x - a.x)), dy = int(std::lround(b.y - a.y));
    if (dx == 1 && dy == 0) px.emplace_back(ax, ay);
    else if (dx == 0 && dy == 1) px.emplace_back(ax - 1, ay);
    else if (dx == -1 && dy == 0) px.emplace_back(ax - 1, ay - 1);
    else if (dx == 0 && dy == -1) px.emplace_back(ax, ay - 1);
    else fail(Errc::InvalidArgument, "rasterize_boundary expects unit pixel-edge segments");
  }
  std::sort(px.begin(), px.end());
  px.erase(std::unique(px.begin(), px.end()), px.end());
  return px;
}

/// n points with a shared random phase: s_i = (i + u) L / n.
inline std::vector<ContourPoint> sample_uniform(const Contour& c, int n, std::mt19937_64& rng) {
  require(n >= 1, Errc::InvalidArgument, "sample_uniform needs n >= 1");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  std::vector<ContourPoint> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) out.push_back(make_contour_point(c, (i + u) * c.length() / n));
  return out;
}

/// Mixture of 1-D Gaussians along the arc, one component per centre, with
/// wrap-around at the contour seam.
inline std::vector<ContourPoint> sample_gaussian(const Contour& c, std::span<const double> centers, double sigma,
                                                 int n, std::mt19937_64& rng) {
  require(sigma > 0.0, Errc::InvalidArgument, "sample_gaussian needs sigma > 0");
  require(!centers.empty(), Errc::InvalidArgument, "sample_gaussian needs at least one centre");
  require(n >= 1, Errc::InvalidArgument, "sample_gaussian needs n >= 1");
  std::uniform_int_distribution<std::size_t> pick(0, centers.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ContourPoint> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    double center = centers[pick(rng)];
    double delta = sigma * normal(rng);
    out.push_back(make_contour_point(c, center + delta));
  }
  return out;
}

// ---- segmentation stand-in and file formats ----

/// Pixels within `tolerance` (per-channel max abs difference) of the key colour.
inline SegMask segment_color_key(const Rgb8& img, Color key, int tolerance) {
  SegMask m(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const auto* p = img.px(x, y);
      int d = 0;
      for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(int(p[c]) - int(key[c])));
      if (d <= tolerance) m.set(x, y);
    }
  return m;
}

inline void write_pgm(const std::filesystem::path& path, const SegMask& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::IoError, "cannot open " + path.string());
  f << "P5\n" << m.width() << " " << m.height() << "\n255\n";
  for (auto b : m.bits()) f.put(b ? char(255) : char(0));
}

inline SegMask read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::IoError, "cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (f >> std::ws && f.peek() == '#') std::getline(f, t);
    f >> t;
    return t;
  };
  if (token() != "P5") fail(Errc::IoError, path.string() + " is not a binary PGM");
  int w = std::stoi(token()), h = std::stoi(token()), maxval = std::stoi(token());
  if (maxval != 255) fail(Errc::IoError, "only 8-bit PGM masks are supported");
  f.get();
  SegMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int v = f.get();
      if (v == EOF) fail(Errc::IoError, "truncated PGM " + path.string());
      if (v > 127) m.set(x, y);
    }
  return m;
}

inline std::string contour_csv(const Contour& c) {
  std::ostringstream os;
  os.precision(17);
  os << "s,x,y\n";
  for (std::size_t i = 0; i < c.size(); ++i)
    os << c.cumulative()[i] << "," << c.points()[i].x << "," << c.points()[i].y << "\n";
  return os.str();
}

}  // namespace regrasp::mask
