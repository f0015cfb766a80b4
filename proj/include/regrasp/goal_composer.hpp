#pragma once

// Goal-state image synthesis: background restoration, two-point rigid
// alignment of the object cutout, and alpha-over compositing with the jaws.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regrasp/candidate_refiner.hpp"
#include "regrasp/error.hpp"
#include "regrasp/geometry.hpp"
#include "regrasp/image.hpp"
#include "regrasp/mask_geometry.hpp"

namespace regrasp::goal {

using refine::GraspPair;

struct RigidTransform2D {
  double theta = 0.0;
  Vec2 t;

  Vec2 apply(Vec2 p) const { return rotate(p, theta) + t; }
  Vec2 apply_inverse(Vec2 p) const { return rotate(p - t, -theta); }
  static RigidTransform2D identity() { return {}; }
};

struct TransformFit {
  RigidTransform2D transform;
  double residual_left = 0.0;   ///< |T(current.left) - target.left|
  double residual_right = 0.0;  ///< |T(current.right) - target.right|
};

/// Object sprite in frame coordinates plus the contacts it was cut around.
struct Cutout {
  RgbaF sprite;  ///< premultiplied
  GraspPair anchors;
};

struct Provenance {
  std::vector<std::string> source_frames;
  RigidTransform2D transform;
  GraspPair pair;
};

struct GoalImage {
  Rgb8 image;
  Provenance provenance;
};

inline nlohmann::json to_json(const Provenance& p) {
  return {{"source_frames", p.source_frames},
          {"transform", {{"theta", p.transform.theta}, {"tx", p.transform.t.x}, {"ty", p.transform.t.y}}},
          {"pair",
           {{"left", {p.pair.left.x, p.pair.left.y}}, {"right", {p.pair.right.x, p.pair.right.y}}, {"yaw", p.pair.yaw}}}};
}

/// Fills masked pixels from `clean_plate` when given, otherwise by onion-peel:
/// each pass fills every masked pixel that has a known 8-neighbour with the
/// mean of its known neighbours, until the mask is consumed.
inline Rgb8 restore_background(const Rgb8& obs, const mask::SegMask& m, const Rgb8* clean_plate = nullptr) {
  if (m.width() != obs.width || m.height() != obs.height)
    fail(Errc::DimensionMismatch, "mask and observation sizes differ");
  if (clean_plate && (clean_plate->width != obs.width || clean_plate->height != obs.height))
    fail(Errc::DimensionMismatch, "clean plate and observation sizes differ");
  Rgb8 out = obs;
  if (!m.any()) return out;
  if (clean_plate) {
    for (int y = 0; y < obs.height; ++y)
      for (int x = 0; x < obs.width; ++x)
        if (m.get(x, y))
          for (int c = 0; c < 3; ++c) out.at(x, y, c) = clean_plate->at(x, y, c);
    return out;
  }

  const int w = obs.width, h = obs.height;
  std::vector<std::uint8_t> known(std::size_t(w) * h);
  std::vector<double> acc(std::size_t(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      known[std::size_t(y) * w + x] = m.get(x, y) ? 0 : 1;
      for (int c = 0; c < 3; ++c) acc[(std::size_t(y) * w + x) * 3 + c] = obs.at(x, y, c);
    }
  if (std::find(known.begin(), known.end(), 1) == known.end())
    fail(Errc::InvalidArgument, "mask covers the whole frame; nothing to restore from");

  std::size_t remaining = m.count();
  while (remaining > 0) {
    std::vector<std::pair<std::size_t, std::array<double, 3>>> fills;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::size_t idx = std::size_t(y) * w + x;
        if (known[idx]) continue;
        std::array<double, 3> sum{};
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = x + dx, ny = y + dy;
            if ((dx || dy) && nx >= 0 && ny >= 0 && nx < w && ny < h && known[std::size_t(ny) * w + nx]) {
              for (int c = 0; c < 3; ++c) sum[std::size_t(c)] += acc[(std::size_t(ny) * w + nx) * 3 + c];
              ++cnt;
            }
          }
        if (cnt > 0) fills.push_back({idx, {sum[0] / cnt, sum[1] / cnt, sum[2] / cnt}});
      }
    for (auto& [idx, v] : fills) {
      known[idx] = 1;
      for (int c = 0; c < 3; ++c) acc[idx * 3 + c] = v[std::size_t(c)];
    }
    remaining -= fills.size();
  }
  for (std::size_t i = 0; i < known.size(); ++i)
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = std::uint8_t(std::clamp(std::lround(acc[i * 3 + c]), 0L, 255L));
  return out;
}

/// Two-point least-squares rigid fit: rotation aligns the chords, translation
/// matches the midpoints. Exact when the chord lengths agree; otherwise each
/// point is off by half the length mismatch.
inline TransformFit solve_transform(const GraspPair& current, const GraspPair& target) {
  Vec2 cc = current.right - current.left;
  if (norm(cc) == 0.0) fail(Errc::DegenerateChord, "current contacts coincide");
  Vec2 tc = target.right - target.left;
  double theta = norm(tc) > 0 ? wrap_angle(angle_of(tc) - angle_of(cc)) : 0.0;
  Vec2 t = target.midpoint() - rotate(current.midpoint(), theta);
  TransformFit fit;
  fit.transform = {theta, t};
  fit.residual_left = distance(fit.transform.apply(current.left), target.left);
  fit.residual_right = distance(fit.transform.apply(current.right), target.right);
  return fit;
}

/// Cuts the masked object out of a frame as a premultiplied sprite.
inline Cutout make_cutout(const Rgb8& frame, const mask::SegMask& m, const GraspPair& anchors) {
  if (m.width() != frame.width || m.height() != frame.height)
    fail(Errc::DimensionMismatch, "mask and frame sizes differ");
  RgbaF sprite(frame.width, frame.height, 0.0f);
  for (int y = 0; y < frame.height; ++y)
    for (int x = 0; x < frame.width; ++x)
      if (m.get(x, y)) {
        float* p = sprite.px(x, y);
        for (int c = 0; c < 3; ++c) p[c] = frame.at(x, y, c) / 255.0f;
        p[3] = 1.0f;
      }
  return {std::move(sprite), anchors};
}

/// A solid jaw pad sprite: `thickness` px along the closing axis (sprite x)
/// and `length` px across it, centred on the sprite.
inline RgbaF make_jaw_sprite(int thickness, int length, Color color, float alpha = 1.0f) {
  RgbaF s(thickness, length);
  for (int y = 0; y < length; ++y)
    for (int x = 0; x < thickness; ++x) {
      float* p = s.px(x, y);
      for (int c = 0; c < 3; ++c) p[c] = alpha * color[std::size_t(c)] / 255.0f;
      p[3] = alpha;
    }
  return s;
}

namespace detail {

inline std::array<float, 4> sample_bilinear(const RgbaF& s, double x, double y) {
  // x, y in continuous pixel coordinates; pixel centres at +0.5.
  double fx = x - 0.5, fy = y - 0.5;
  int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
  double ax = fx - x0, ay = fy - y0;
  std::array<float, 4> out{};
  auto tap = [&](int px, int py, double wgt) {
    if (wgt == 0.0 || !s.contains(px, py)) return;
    const float* p = s.px(px, py);
    for (int c = 0; c < 4; ++c) out[std::size_t(c)] += float(wgt * p[c]);
  };
  tap(x0, y0, (1 - ax) * (1 - ay));
  tap(x0 + 1, y0, ax * (1 - ay));
  tap(x0, y0 + 1, (1 - ax) * ay);
  tap(x0 + 1, y0 + 1, ax * ay);
  return out;
}

// Premultiplied "over" of a transformed sprite onto a float canvas.
// `to_sprite` maps canvas coordinates to sprite coordinates.
template <typename F>
void composite(std::vector<float>& canvas, int w, int h, const RgbaF& sprite, F&& to_sprite, int x0, int y0, int x1,
               int y1) {
  x0 = std::max(x0, 0); y0 = std::max(y0, 0);
  x1 = std::min(x1, w - 1); y1 = std::min(y1, h - 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      Vec2 sp = to_sprite(Vec2{x + 0.5, y + 0.5});
      auto src = sample_bilinear(sprite, sp.x, sp.y);
      if (src[3] <= 0.0f) continue;
      float* d = &canvas[(std::size_t(y) * w + x) * 3];
      for (int c = 0; c < 3; ++c) d[c] = src[std::size_t(c)] + (1.0f - src[3]) * d[c];
    }
}

}  // namespace detail

/// Background, then the rigidly moved object (bilinear, premultiplied), then a
/// jaw pad at each contact of `pair` oriented along the closing axis. Pads sit
/// just outside the contacts so the closing axis passes through both.
inline GoalImage compose_goal(const Rgb8& background, const Cutout& object, const RgbaF& jaw_sprite,
                              const RigidTransform2D& transform, const GraspPair& pair, double margin_px = 0.0,
                              std::vector<std::string> source_frames = {}) {
  if (object.sprite.width != background.width || object.sprite.height != background.height)
    fail(Errc::DimensionMismatch, "cutout and background sizes differ");
  const int w = background.width, h = background.height;

  // Footprint of the moved object.
  int bx0 = w, by0 = h, bx1 = -1, by1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (object.sprite.at(x, y, 3) > 0.0f) {
        bx0 = std::min(bx0, x); by0 = std::min(by0, y);
        bx1 = std::max(bx1, x); by1 = std::max(by1, y);
      }
  double fx0 = INFINITY, fy0 = INFINITY, fx1 = -INFINITY, fy1 = -INFINITY;
  if (bx1 >= 0) {
    for (Vec2 c : {Vec2{double(bx0), double(by0)}, Vec2{bx1 + 1.0, double(by0)}, Vec2{double(bx0), by1 + 1.0},
                   Vec2{bx1 + 1.0, by1 + 1.0}}) {
      Vec2 m = transform.apply(c);
      fx0 = std::min(fx0, m.x); fy0 = std::min(fy0, m.y);
      fx1 = std::max(fx1, m.x); fy1 = std::max(fy1, m.y);
    }
    if (fx0 < -margin_px - 1e-9 || fy0 < -margin_px - 1e-9 || fx1 > w + margin_px + 1e-9 || fy1 > h + margin_px + 1e-9)
      fail(Errc::OutOfFrame, "moved object leaves the canvas");
  }

  std::vector<float> canvas(std::size_t(w) * h * 3);
  for (std::size_t i = 0; i < canvas.size(); ++i) canvas[i] = background.data[i] / 255.0f;

  if (bx1 >= 0)
    detail::composite(canvas, w, h, object.sprite, [&](Vec2 p) { return transform.apply_inverse(p); },
                      int(std::floor(fx0)) - 1, int(std::floor(fy0)) - 1, int(std::ceil(fx1)) + 1,
                      int(std::ceil(fy1)) + 1);

  const double closing = pair.yaw - kPi / 2;
  const Vec2 axis = unit_from_angle(closing);
  const double half_t = jaw_sprite.width / 2.0;
  const double reach = std::hypot(jaw_sprite.width, jaw_sprite.height) / 2.0 + 1.0;
  for (auto [contact, sign] : {std::pair{pair.left, -1.0}, std::pair{pair.right, 1.0}}) {
    Vec2 center = contact + axis * (sign * half_t);
    auto to_sprite = [&](Vec2 p) {
      Vec2 local = rotate(p - center, -closing);
      return Vec2{local.x + jaw_sprite.width / 2.0, local.y + jaw_sprite.height / 2.0};
    };
    detail::composite(canvas, w, h, jaw_sprite, to_sprite, int(std::floor(center.x - reach)),
                      int(std::floor(center.y - reach)), int(std::ceil(center.x + reach)),
                      int(std::ceil(center.y + reach)));
  }

  GoalImage g;
  g.image = Rgb8(w, h);
  for (std::size_t i = 0; i < canvas.size(); ++i)
    g.image.data[i] = std::uint8_t(std::clamp(std::lround(canvas[i] * 255.0f), 0L, 255L));
  g.provenance = {std::move(source_frames), transform, pair};
  return g;
}

}  // namespace regrasp::goal
