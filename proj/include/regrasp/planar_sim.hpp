#pragma once

// A deterministic top-down tabletop: polygon objects, a parallel-jaw gripper
// following waypoint scripts, contact detection for the grasp moment, and a
// friction-cone grasp check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "regrasp/action.hpp"
#include "regrasp/error.hpp"
#include "regrasp/geometry.hpp"
#include "regrasp/image.hpp"
#include "regrasp/mask_geometry.hpp"

namespace regrasp::sim {

inline constexpr int kHistoryWindow = 10;

// ---------------------------------------------------------------- cameras

/// Orthographic camera. `frame` is the world pose of the image centre; its +x
/// axis maps to +u and its +y axis to +v.
struct Camera {
  int width = 128;
  int height = 128;
  double scale = 400.0;  ///< pixels per metre
  Pose2 frame;

  Vec2 to_px(Vec2 w) const {
    Vec2 l = frame.apply_inverse(w);
    return {width / 2.0 + l.x * scale, height / 2.0 + l.y * scale};
  }
  Vec2 to_world(Vec2 px) const {
    return frame.apply({(px.x - width / 2.0) / scale, (px.y - height / 2.0) / scale});
  }
  /// World pose expressed in this camera's metric frame.
  Pose2 to_local(const Pose2& w) const { return frame.inverse().compose(w); }
};

inline Camera topdown_camera() { return {128, 128, 400.0, {}}; }

/// Gripper-centred view with the closing axis (left jaw to right jaw) along +u.
inline Camera ego_camera(const Pose2& gripper) {
  return {128, 128, 800.0, {gripper.x, gripper.y, wrap_angle(gripper.heading - kPi / 2)}};
}

// ---------------------------------------------------------------- world

struct PolyObject {
  std::vector<Vec2> vertices;  ///< object frame, metres, positive signed area
  Pose2 pose;
  double mu = 0.5;
  Color color{196, 72, 48};
  /// Reference stable contacts in the object frame (left jaw, right jaw).
  std::optional<std::pair<Vec2, Vec2>> expert_contacts;

  std::vector<Vec2> world_vertices() const {
    std::vector<Vec2> out;
    out.reserve(vertices.size());
    for (Vec2 v : vertices) out.push_back(pose.apply(v));
    return out;
  }

  void validate() const {
    require(vertices.size() >= 3, Errc::InvalidArgument, "object needs at least 3 vertices");
    require(signed_area(vertices) > 0.0, Errc::InvalidArgument, "object vertices must have positive orientation");
    require(is_simple_polygon(vertices), Errc::InvalidArgument, "object polygon is not simple");
    require(mu > 0.0, Errc::InvalidArgument, "friction coefficient must be positive");
  }
};

struct GripperGeometry {
  double max_opening = 0.08;
  double pad_thickness = 0.006;
  double pad_length = 0.016;
  double z = 0.02;
  int closing_steps = 10;
  Color color{54, 58, 66};
};

struct GripperState {
  Pose2 pose;
  double opening = 0.08;
};

/// Unit vector from the left jaw to the right jaw for a gripper yaw.
inline Vec2 closing_axis(double yaw) { return {std::sin(yaw), -std::cos(yaw)}; }

enum class Jaw { Left, Right };

/// Pad rectangle in world coordinates; its inner face sits opening/2 from the
/// gripper centre along the closing axis.
inline std::vector<Vec2> jaw_polygon(const GripperState& g, const GripperGeometry& geo, Jaw jaw) {
  Vec2 c = closing_axis(g.pose.heading);
  Vec2 n{-c.y, c.x};
  double sign = jaw == Jaw::Left ? -1.0 : 1.0;
  Vec2 inner = g.pose.position() + c * (sign * g.opening / 2);
  Vec2 outer = inner + c * (sign * geo.pad_thickness);
  Vec2 h = n * (geo.pad_length / 2);
  std::vector<Vec2> poly{inner - h, outer - h, outer + h, inner + h};
  if (signed_area(poly) < 0) std::reverse(poly.begin(), poly.end());
  return poly;
}

struct SuccessTolerance {
  double position = 0.01;  ///< contact midpoint vs reference midpoint, metres
  double angle = 0.2;      ///< closing axis vs reference axis, radians (mod pi)
};

struct World {
  std::vector<PolyObject> objects;  ///< objects[0] is the grasp target
  GripperGeometry gripper;
  std::optional<GripperState> gripper_state;  ///< drawn when set
  SuccessTolerance tolerance;
  double workspace_half = 0.16;
};

// ---------------------------------------------------------------- tasks

enum class TaskId { Peg, Shape, Cup };

struct TaskSpec {
  TaskId id = TaskId::Peg;
  std::string name;
  std::string description;  ///< natural-language task text for prompts
  std::vector<Vec2> shape;
  Color color;
  double mu = 0.5;
  std::pair<Vec2, Vec2> expert_contacts;
  double placement_xy = 0.04;
  double placement_heading = kPi / 6;
  double approach_offset = 0.10;
  double pregrasp_offset = 0.04;
};

namespace detail {

inline std::vector<Vec2> rectangle(double hx, double hy) { return {{-hx, -hy}, {hx, -hy}, {hx, hy}, {-hx, hy}}; }

inline std::vector<Vec2> cross_shape(double reach, double half_width) {
  const double r = reach, w = half_width;
  return {{r, -w}, {r, w}, {w, w}, {w, r}, {-w, r}, {-w, w}, {-r, w}, {-r, -w}, {-w, -w}, {-w, -r}, {w, -r}, {w, -w}};
}

inline std::vector<Vec2> cup_shape(double radius, int sides, double handle_reach, double handle_half_width) {
  const double a0 = std::asin(handle_half_width / radius);
  std::vector<Vec2> out{{handle_reach, -handle_half_width},
                        {handle_reach, handle_half_width},
                        {radius * std::cos(a0), handle_half_width}};
  const double step = 2 * kPi / sides;
  for (int k = 0; k < sides; ++k) {
    double a = (k + 0.5) * step;
    if (a <= a0 || a >= 2 * kPi - a0) continue;
    out.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  out.push_back({radius * std::cos(a0), -handle_half_width});
  return out;
}

}  // namespace detail

inline TaskSpec task_spec(TaskId id) {
  TaskSpec t;
  t.id = id;
  switch (id) {
    case TaskId::Peg:
      t.name = "peg";
      t.description = "insert the peg into the hole";
      t.shape = detail::rectangle(0.03, 0.012);
      t.color = {196, 72, 48};
      t.expert_contacts = {{0.0, 0.012}, {0.0, -0.012}};
      break;
    case TaskId::Shape:
      t.name = "shape";
      t.description = "put the cross-shaped block into the shape sorter";
      t.shape = detail::cross_shape(0.03, 0.01);
      t.color = {52, 110, 190};
      t.expert_contacts = {{0.02, 0.01}, {0.02, -0.01}};
      break;
    case TaskId::Cup: {
      t.name = "cup";
      t.description = "pick up the cup";
      const double r = 0.025;
      const int sides = 24;
      t.shape = detail::cup_shape(r, sides, 0.04, 0.006);
      t.color = {70, 150, 84};
      const double apothem = r * std::cos(kPi / sides);
      t.expert_contacts = {{0.0, apothem}, {0.0, -apothem}};
      break;
    }
  }
  return t;
}

inline TaskId task_from_name(const std::string& name) {
  if (name == "peg") return TaskId::Peg;
  if (name == "shape") return TaskId::Shape;
  if (name == "cup") return TaskId::Cup;
  fail(Errc::ConfigError, "unknown task '" + name + "'");
}

inline PolyObject make_object(const TaskSpec& task, const Pose2& pose) {
  PolyObject o;
  o.vertices = task.shape;
  o.pose = pose;
  o.mu = task.mu;
  o.color = task.color;
  o.expert_contacts = task.expert_contacts;
  o.validate();
  return o;
}

inline World make_world(const TaskSpec& task, const Pose2& object_pose) {
  World w;
  w.objects.push_back(make_object(task, object_pose));
  return w;
}

inline Pose2 sample_object_pose(const TaskSpec& task, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> xy(-task.placement_xy, task.placement_xy);
  std::uniform_real_distribution<double> th(-task.placement_heading, task.placement_heading);
  double x = xy(rng);
  double y = xy(rng);
  return {x, y, th(rng)};
}

/// Gripper pose whose jaws close onto the object's reference contacts.
inline Pose2 expert_grasp_pose(const PolyObject& obj) {
  require(obj.expert_contacts.has_value(), Errc::InvalidArgument, "object has no reference contacts");
  Vec2 l = obj.pose.apply(obj.expert_contacts->first);
  Vec2 r = obj.pose.apply(obj.expert_contacts->second);
  Vec2 mid = (l + r) / 2;
  return {mid.x, mid.y, wrap_angle(angle_of(r - l) + kPi / 2)};
}

// ---------------------------------------------------------------- rendering

struct Observation {
  Rgb8 image;
  mask::SegMask mask{1, 1};
  Camera camera;
};

/// Procedural tabletop: a 2 cm checker fixed in world coordinates.
inline Color plate_color(Vec2 w) {
  long i = long(std::floor(w.x / 0.02)) + long(std::floor(w.y / 0.02));
  return (i & 1) ? Color{212, 206, 194} : Color{198, 192, 180};
}

struct RenderLayers {
  bool objects = true;
  bool gripper = true;
};

namespace detail {

struct Box {
  double x0, y0, x1, y1;
  bool contains(Vec2 p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
};

inline Box bounds(std::span<const Vec2> poly) {
  Box b{INFINITY, INFINITY, -INFINITY, -INFINITY};
  for (Vec2 p : poly) {
    b.x0 = std::min(b.x0, p.x); b.y0 = std::min(b.y0, p.y);
    b.x1 = std::max(b.x1, p.x); b.y1 = std::max(b.y1, p.y);
  }
  return b;
}

}  // namespace detail

/// Pixel-centre sampling: a pixel belongs to a polygon when its centre does.
/// The mask is the full footprint of objects[0], ignoring gripper occlusion.
inline Observation render(const World& world, const Camera& cam, RenderLayers layers = {}) {
  Observation obs{Rgb8(cam.width, cam.height), mask::SegMask(cam.width, cam.height), cam};
  std::vector<std::vector<Vec2>> polys;
  std::vector<detail::Box> boxes;
  for (const auto& o : world.objects) {
    polys.push_back(o.world_vertices());
    boxes.push_back(detail::bounds(polys.back()));
  }
  std::vector<std::vector<Vec2>> jaws;
  if (layers.gripper && world.gripper_state) {
    jaws.push_back(jaw_polygon(*world.gripper_state, world.gripper, Jaw::Left));
    jaws.push_back(jaw_polygon(*world.gripper_state, world.gripper, Jaw::Right));
  }
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      Vec2 w = cam.to_world({u + 0.5, v + 0.5});
      Color c = plate_color(w);
      for (std::size_t k = 0; k < polys.size(); ++k) {
        if (!boxes[k].contains(w) || !point_in_polygon(polys[k], w)) continue;
        if (k == 0) obs.mask.set(u, v);
        if (layers.objects) c = world.objects[k].color;
      }
      for (const auto& j : jaws)
        if (point_in_polygon(j, w)) c = world.gripper.color;
      set_pixel(obs.image, u, v, c);
    }
  return obs;
}

inline Observation render_topdown(const World& world) { return render(world, topdown_camera()); }

inline Rgb8 render_clean_plate(const Camera& cam) {
  World empty;
  return render(empty, cam).image;
}

// ---------------------------------------------------------------- grasp quality

struct GraspQuality {
  bool antipodal = false;
  double margin = 0.0;  ///< min over both contacts of (cone half-angle - normal deviation)
  bool lift_success = false;
  double width = 0.0;
};

namespace detail {

/// Inward unit normals of the edges touching p (two at a vertex).
inline std::vector<Vec2> contact_normals(std::span<const Vec2> poly, Vec2 p, double tol) {
  const std::size_t n = poly.size();
  double dmin = INFINITY;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = point_segment_distance(p, poly[i], poly[(i + 1) % n]);
    dmin = std::min(dmin, d[i]);
  }
  if (dmin > tol) fail(Errc::OffBoundary, "contact is not on the object boundary");
  std::vector<Vec2> normals;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > dmin + 1e-12) continue;
    Vec2 e = poly[(i + 1) % n] - poly[i];
    normals.push_back(normalized(Vec2{-e.y, e.x}));
  }
  return normals;
}

inline double deviation(Vec2 a, Vec2 b) { return std::atan2(std::fabs(cross(a, b)), dot(a, b)); }

}  // namespace detail

/// Friction-cone antipodality of two boundary contacts on a positively
/// oriented polygon. Each contact's inward normal must lie within atan(mu) of
/// the direction towards the other contact; at a vertex the worse of the two
/// adjacent edge normals counts.
inline GraspQuality grasp_quality(std::span<const Vec2> polygon, Vec2 first, Vec2 second, double mu,
                                  double max_opening = GripperGeometry{}.max_opening) {
  require(mu > 0.0, Errc::InvalidArgument, "friction coefficient must be positive");
  const double scale = std::max(1.0, detail::bounds(polygon).x1 - detail::bounds(polygon).x0);
  const double tol = 1e-6 * scale;
  auto n1 = detail::contact_normals(polygon, first, tol);
  auto n2 = detail::contact_normals(polygon, second, tol);
  GraspQuality q;
  q.width = distance(first, second);
  if (q.width == 0.0) {
    q.margin = -kPi;
    return q;
  }
  Vec2 u = (second - first) / q.width;
  double worst = 0.0;
  for (Vec2 n : n1) worst = std::max(worst, detail::deviation(n, u));
  for (Vec2 n : n2) worst = std::max(worst, detail::deviation(n, -u));
  q.margin = std::atan(mu) - worst;
  q.antipodal = q.margin >= 0.0;
  q.lift_success = q.antipodal && q.width <= max_opening;
  return q;
}

inline GraspQuality grasp_quality(const PolyObject& obj, Vec2 first, Vec2 second) {
  auto poly = obj.world_vertices();
  return grasp_quality(poly, first, second, obj.mu);
}

struct BruteForceGrasp {
  Vec2 first;
  Vec2 second;
  GraspQuality quality;
};

/// Exhaustive search over pairs of n boundary points at s = (i + 0.5) P / n.
inline BruteForceGrasp best_grasp_bruteforce(std::span<const Vec2> polygon, double mu, int n) {
  require(n >= 8, Errc::InvalidArgument, "brute force needs at least 8 boundary samples");
  const double P = perimeter(polygon);
  std::vector<Vec2> pts;
  for (int i = 0; i < n; ++i) pts.push_back(polygon_point_at(polygon, (i + 0.5) * P / n));
  std::optional<BruteForceGrasp> best;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      auto q = grasp_quality(polygon, pts[std::size_t(i)], pts[std::size_t(j)], mu);
      if (q.antipodal && (!best || q.margin > best->quality.margin))
        best = BruteForceGrasp{pts[std::size_t(i)], pts[std::size_t(j)], q};
    }
  if (!best) fail(Errc::NoStableGrasp, "no antipodal pair among boundary samples");
  return *best;
}

inline BruteForceGrasp best_grasp_bruteforce(const PolyObject& obj, int n) {
  auto poly = obj.world_vertices();
  return best_grasp_bruteforce(poly, obj.mu, n);
}

// ---------------------------------------------------------------- closing

namespace detail {

/// Parameters s where the line origin + s*dir crosses the polygon boundary.
inline std::vector<double> line_crossings(std::span<const Vec2> poly, Vec2 origin, Vec2 dir) {
  std::vector<double> s;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    Vec2 a = poly[i], e = poly[(i + 1) % poly.size()] - a;
    double den = cross(dir, e);
    if (std::fabs(den) < 1e-15) continue;
    Vec2 ao = a - origin;
    double t = cross(ao, e) / den;
    double u = cross(ao, dir) / den;
    if (u >= 0.0 && u <= 1.0) s.push_back(t);
  }
  return s;
}

inline bool polygons_overlap(std::span<const Vec2> a, std::span<const Vec2> b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (segments_intersect(a[i], a[(i + 1) % a.size()], b[j], b[(j + 1) % b.size()])) return true;
  return point_in_polygon(b, a[0]) || point_in_polygon(a, b[0]);
}

inline bool jaws_touch(const World& w, const GripperState& g, std::span<const Vec2> target) {
  auto l = jaw_polygon(g, w.gripper, Jaw::Left);
  auto r = jaw_polygon(g, w.gripper, Jaw::Right);
  return polygons_overlap(l, target) || polygons_overlap(r, target);
}

}  // namespace detail

struct GraspOutcome {
  bool contact = false;        ///< a jaw touched the target while closing
  bool jaw_collision = false;  ///< the object was already under a jaw at full opening
  bool line_hit = false;       ///< the closing line crosses the object
  Vec2 left_contact;
  Vec2 right_contact;
  GraspQuality quality;
  double midpoint_error = INFINITY;
  double axis_error = INFINITY;
  bool success = false;
};

/// Quasi-static closing at a fixed pose. Jaws slide along the closing line and
/// stop at its outermost crossings with the target.
inline GraspOutcome close_at(const World& w, const Pose2& pose) {
  require(!w.objects.empty(), Errc::InvalidArgument, "world has no target object");
  const PolyObject& obj = w.objects.front();
  auto poly = obj.world_vertices();
  GraspOutcome out;
  GripperState open{pose, w.gripper.max_opening};
  out.jaw_collision = detail::jaws_touch(w, open, poly);
  for (int k = 0; k <= w.gripper.closing_steps && !out.contact; ++k) {
    GripperState g{pose, w.gripper.max_opening * (1.0 - double(k) / w.gripper.closing_steps)};
    out.contact = detail::jaws_touch(w, g, poly);
  }
  Vec2 axis = closing_axis(pose.heading);
  auto s = detail::line_crossings(poly, pose.position(), axis);
  if (s.empty()) return out;
  out.line_hit = true;
  auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  out.left_contact = pose.position() + axis * *lo;
  out.right_contact = pose.position() + axis * *hi;
  out.quality = grasp_quality(poly, out.left_contact, out.right_contact, obj.mu, w.gripper.max_opening);
  bool in_span = *lo >= -w.gripper.max_opening / 2 && *hi <= w.gripper.max_opening / 2;
  bool pose_ok = true;
  if (obj.expert_contacts) {
    Vec2 el = obj.pose.apply(obj.expert_contacts->first), er = obj.pose.apply(obj.expert_contacts->second);
    out.midpoint_error = distance((out.left_contact + out.right_contact) / 2, (el + er) / 2);
    double d = std::fabs(wrap_angle(angle_of(out.right_contact - out.left_contact) - angle_of(er - el)));
    out.axis_error = std::min(d, kPi - d);
    pose_ok = out.midpoint_error <= w.tolerance.position && out.axis_error <= w.tolerance.angle;
  }
  out.success = out.contact && !out.jaw_collision && in_span && out.quality.lift_success && pose_ok;
  return out;
}

// ---------------------------------------------------------------- episodes

struct Waypoint {
  Pose2 pose;
  bool close = false;
};

struct PerturbationSigma {
  double position = 0.02;
  double heading = 0.15;
};

/// Start, pre-grasp and grasp waypoints approaching along the gripper heading.
inline std::vector<Waypoint> canonical_script(const TaskSpec& task, const PolyObject& obj) {
  Pose2 g = expert_grasp_pose(obj);
  Vec2 back = -unit_from_angle(g.heading);
  Vec2 s = g.position() + back * task.approach_offset;
  Vec2 p = g.position() + back * task.pregrasp_offset;
  return {{{s.x, s.y, g.heading}, false}, {{p.x, p.y, g.heading}, false}, {g, true}};
}

struct Frame {
  int t = 0;
  Rgb8 image;
  GripperState gripper;
};

/// Keeps the most recent `capacity` frames.
class FrameRing {
 public:
  explicit FrameRing(std::size_t capacity = kHistoryWindow + 1) : capacity_(capacity) {}

  void push(Frame f) {
    frames_.push_back(std::move(f));
    while (frames_.size() > capacity_) frames_.pop_front();
  }
  const Frame* find(int t) const {
    for (const auto& f : frames_)
      if (f.t == t) return &f;
    return nullptr;
  }
  std::size_t size() const { return frames_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<Frame>& frames() const { return frames_; }

 private:
  std::size_t capacity_;
  std::deque<Frame> frames_;
};

struct ActionLogEntry {
  int t = 0;
  Action8 action;
  double opening = 0.0;
};

struct Episode {
  World world;  ///< object placement; gripper_state holds the state at the last frame
  std::vector<Waypoint> waypoints;  ///< after perturbation
  FrameRing frames;
  std::vector<ActionLogEntry> actions;
  std::optional<int> grasp_time;
  GripperState grasp_state;  ///< gripper at t(g)
  Action8 grasp_action;
  GraspOutcome outcome;

  bool contacted() const { return grasp_time.has_value(); }
  int require_grasp_time() const {
    if (!grasp_time) fail(Errc::NoContact, "gripper never touched the object");
    return *grasp_time;
  }
  /// Top-down frame W steps before the grasp moment.
  const Frame& history_frame(int window = kHistoryWindow) const {
    int t = require_grasp_time() - window;
    const Frame* f = frames.find(t);
    if (!f) fail(Errc::InvalidArgument, "frame t(g) - W is not in the history buffer");
    return *f;
  }
};

struct ExecuteOptions {
  int steps_per_segment = 10;
  bool render = true;
  std::size_t history = kHistoryWindow + 1;
};

namespace detail {

inline Pose2 clamp_to_workspace(Pose2 p, double half) {
  p.x = std::clamp(p.x, -half, half);
  p.y = std::clamp(p.y, -half, half);
  return p;
}

inline Pose2 lerp_pose(const Pose2& a, const Pose2& b, double t) {
  return {a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t, wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * t)};
}

}  // namespace detail

/// Perturbs every waypoint, interpolates the approach at a fixed timestep with
/// open jaws, then closes at the final waypoint. The episode ends at the first
/// jaw-object contact (the grasp moment) or after a full close without one.
inline Episode execute_waypoints(const World& world, std::span<const Waypoint> script, PerturbationSigma sigma,
                                 std::mt19937_64& rng, const ExecuteOptions& opt = {}) {
  require(script.size() >= 1, Errc::InvalidArgument, "waypoint script is empty");
  require(!world.objects.empty(), Errc::InvalidArgument, "world has no target object");
  for (const auto& w : script)
    require(std::fabs(w.pose.x) <= world.workspace_half && std::fabs(w.pose.y) <= world.workspace_half,
            Errc::InvalidArgument, "waypoint outside the workspace");

  Episode ep;
  ep.world = world;
  ep.frames = FrameRing(opt.history);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& w : script) {
    Waypoint p = w;
    p.pose.x += sigma.position * normal(rng);
    p.pose.y += sigma.position * normal(rng);
    p.pose.heading = wrap_angle(p.pose.heading + sigma.heading * normal(rng));
    p.pose = detail::clamp_to_workspace(p.pose, world.workspace_half);
    ep.waypoints.push_back(p);
  }

  const auto& geo = world.gripper;
  const auto target = world.objects.front().world_vertices();
  int t = 0;
  auto emit = [&](const GripperState& g, bool closing) {
    ep.world.gripper_state = g;
    if (opt.render) ep.frames.push({t, render_topdown(ep.world).image, g});
    ep.actions.push_back({t, Action8::planar(g.pose, geo.z, closing ? 1 : 0), g.opening});
    ++t;
  };

  emit({ep.waypoints.front().pose, geo.max_opening}, false);
  for (std::size_t k = 1; k < ep.waypoints.size(); ++k)
    for (int i = 1; i <= opt.steps_per_segment; ++i)
      emit({detail::lerp_pose(ep.waypoints[k - 1].pose, ep.waypoints[k].pose, double(i) / opt.steps_per_segment),
            geo.max_opening},
           false);

  const Pose2 grasp_pose = ep.waypoints.back().pose;
  ep.grasp_state = {grasp_pose, geo.max_opening};
  ep.grasp_action = Action8::planar(grasp_pose, geo.z, 1);
  // The approach runs above the table; contact is only possible once the
  // jaws are lowered at the grasp waypoint.
  for (int k = 0; k <= geo.closing_steps; ++k) {
    GripperState g{grasp_pose, geo.max_opening * (1.0 - double(k) / geo.closing_steps)};
    bool touch = detail::jaws_touch(ep.world, g, target);
    if (k > 0) emit(g, true);
    if (touch) {
      ep.grasp_time = t - 1;
      ep.grasp_state = g;
      break;
    }
  }
  ep.outcome = close_at(world, grasp_pose);
  return ep;
}

inline Episode execute_waypoints(const World& world, const std::vector<Waypoint>& script, PerturbationSigma sigma,
                                 std::mt19937_64& rng, const ExecuteOptions& opt = {}) {
  return execute_waypoints(world, std::span<const Waypoint>(script), sigma, rng, opt);
}

// ---------------------------------------------------------------- policy views

/// Gripper-centred observation: ego image (optional) plus the object pose in
/// the view frame.
inline PolicyObservation policy_observation(const World& world, const GripperState& g, bool with_image = true) {
  Camera cam = ego_camera(g.pose);
  PolicyObservation o;
  if (with_image) {
    World w = world;
    w.gripper_state = g;
    o.image = render(w, cam).image;
  }
  o.state = state_features(cam.to_local(world.objects.front().pose));
  return o;
}

// ---------------------------------------------------------------- datasets

struct DatasetOptions {
  int n_pairs = 200;
  PerturbationSigma sigma;
  bool render_images = true;
  int stall_attempts = 10000;
  double stall_rate = 0.01;
};

struct DatasetRecord {
  std::uint64_t seed = 0;
  Pose2 object_pose;
  TrainingPair pair;
};

struct Dataset {
  std::vector<DatasetRecord> records;
  std::uint64_t seed_base = 0;
  std::uint64_t attempts = 0;

  std::vector<TrainingPair> pairs() const {
    std::vector<TrainingPair> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.pair);
    return out;
  }
};

struct PairedEpisodes {
  World world;
  Episode perturbed;
  Episode reference;
};

/// One seeded attempt: random placement, a perturbed run and its unperturbed twin.
inline PairedEpisodes run_paired(const TaskSpec& task, std::uint64_t seed, PerturbationSigma sigma,
                                 const ExecuteOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  World world = make_world(task, sample_object_pose(task, rng));
  auto script = canonical_script(task, world.objects.front());
  Episode perturbed = execute_waypoints(world, script, sigma, rng, opt);
  std::mt19937_64 ref_rng(seed);
  Episode reference = execute_waypoints(world, script, {0.0, 0.0}, ref_rng, opt);
  return {std::move(world), std::move(perturbed), std::move(reference)};
}

/// Attempt k uses seed `seed_base + k`. Attempts without contact are dropped.
inline Dataset generate_dataset(const TaskSpec& task, const DatasetOptions& opt, std::uint64_t seed_base) {
  Dataset ds;
  ds.seed_base = seed_base;
  ExecuteOptions exec;
  exec.render = false;
  while (int(ds.records.size()) < opt.n_pairs) {
    if (ds.attempts >= std::uint64_t(opt.stall_attempts) &&
        double(ds.records.size()) < opt.stall_rate * double(ds.attempts))
      fail(Errc::GenerationStalled, "acceptance rate below " + std::to_string(opt.stall_rate) + " after " +
                                        std::to_string(ds.attempts) + " attempts");
    std::uint64_t seed = seed_base + ds.attempts++;
    auto run = run_paired(task, seed, opt.sigma, exec);
    if (!run.perturbed.contacted()) continue;
    if (!run.reference.contacted()) fail(Errc::InvalidArgument, "reference grasp script does not reach the object");
    DatasetRecord rec;
    rec.seed = seed;
    rec.object_pose = run.world.objects.front().pose;
    rec.pair.o = policy_observation(run.world, run.perturbed.grasp_state, opt.render_images);
    rec.pair.a = run.perturbed.grasp_action;
    rec.pair.o_star = policy_observation(run.world, run.reference.grasp_state, opt.render_images);
    rec.pair.a_star = run.reference.grasp_action;
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

inline Dataset generate_dataset(const TaskSpec& task, const DatasetOptions& opt, std::mt19937_64& rng) {
  return generate_dataset(task, opt, rng() >> 16);
}

// ---------------------------------------------------------------- serialisation

inline nlohmann::json to_json(const Pose2& p) { return {{"x", p.x}, {"y", p.y}, {"heading", p.heading}}; }

inline nlohmann::json to_json(const Action8& a) { return {{"p", a.p}, {"r", a.r}, {"s", a.s}}; }

inline nlohmann::json to_json(const GraspOutcome& o) {
  return {{"contact", o.contact},
          {"jaw_collision", o.jaw_collision},
          {"line_hit", o.line_hit},
          {"left_contact", {o.left_contact.x, o.left_contact.y}},
          {"right_contact", {o.right_contact.x, o.right_contact.y}},
          {"antipodal", o.quality.antipodal},
          {"margin", o.quality.margin},
          {"lift_success", o.quality.lift_success},
          {"width", o.quality.width},
          {"success", o.success}};
}

inline nlohmann::json action_log_json(const Episode& ep) {
  nlohmann::json j;
  j["object_pose"] = to_json(ep.world.objects.front().pose);
  j["waypoints"] = nlohmann::json::array();
  for (const auto& w : ep.waypoints) j["waypoints"].push_back({{"pose", to_json(w.pose)}, {"close", w.close}});
  j["actions"] = nlohmann::json::array();
  for (const auto& a : ep.actions) j["actions"].push_back({{"t", a.t}, {"action", to_json(a.action)}, {"opening", a.opening}});
  j["grasp_time"] = ep.grasp_time ? nlohmann::json(*ep.grasp_time) : nlohmann::json(nullptr);
  j["grasp_action"] = to_json(ep.grasp_action);
  j["outcome"] = to_json(ep.outcome);
  return j;
}

/// Canonical byte image of an episode, for determinism checks.
inline std::string episode_bytes(const Episode& ep) {
  std::string out = action_log_json(ep).dump();
  for (const auto& f : ep.frames.frames()) {
    out += "#" + std::to_string(f.t) + ":";
    out.append(reinterpret_cast<const char*>(f.image.data.data()), f.image.data.size());
  }
  return out;
}

/// Writes frames/NNNN.png for the buffered history plus actions.json.
inline void archive_episode(const Episode& ep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "frames");
  for (const auto& f : ep.frames.frames()) {
    char name[32];
    std::snprintf(name, sizeof name, "%04d.png", f.t);
    write_png(dir / "frames" / name, f.image);
  }
  std::ofstream(dir / "actions.json") << action_log_json(ep).dump(2) << "\n";
}

inline std::string dataset_manifest_jsonl(const Dataset& ds) {
  std::string out;
  for (const auto& r : ds.records) {
    nlohmann::json j{{"seed", r.seed},
                     {"object_pose", to_json(r.object_pose)},
                     {"a", to_json(r.pair.a)},
                     {"a_star", to_json(r.pair.a_star)},
                     {"state", r.pair.o.state},
                     {"state_star", r.pair.o_star.state}};
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace regrasp::sim
