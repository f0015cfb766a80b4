#pragma once

// Iterative top-n candidate refinement and the sequential left-then-right
// jaw protocol.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regrasp/error.hpp"
#include "regrasp/mask_geometry.hpp"
#include "regrasp/scorer.hpp"
#include "regrasp/vlm_interface.hpp"

namespace regrasp::refine {

struct RefinementConfig {
  int iterations = 4;
  int candidates_per_iter = 12;
  int top_n = 3;
  std::optional<double> sigma0_px;  ///< absolute first-resample spread; defaults to sigma0_fraction * extent
  double sigma0_fraction = 0.1;
  double sigma_decay = 0.5;
  int max_retries = 2;
  double min_jaw_separation_px = 4.0;

  void validate() const {
    require(iterations >= 1, Errc::InvalidArgument, "iterations must be >= 1");
    require(top_n >= 1 && top_n <= candidates_per_iter, Errc::InvalidArgument, "need 1 <= top_n <= candidates");
    require(!sigma0_px || *sigma0_px > 0, Errc::InvalidArgument, "sigma0 must be positive");
    require(sigma0_fraction > 0, Errc::InvalidArgument, "sigma0 fraction must be positive");
    require(sigma_decay > 0 && sigma_decay <= 1, Errc::InvalidArgument, "sigma_decay must lie in (0, 1]");
    require(max_retries >= 0, Errc::InvalidArgument, "max_retries must be >= 0");
  }

  double sigma_at(int iteration, double extent) const {
    double s0 = sigma0_px.value_or(sigma0_fraction * extent);
    return s0 * std::pow(sigma_decay, iteration - 1);
  }
};

struct GraspPair {
  Vec2 left;
  Vec2 right;
  std::optional<double> left_arc;
  std::optional<double> right_arc;
  double yaw = 0.0;  ///< direction of (right - left) rotated by +pi/2, in (-pi, pi]

  static double yaw_from(Vec2 left, Vec2 right) { return wrap_angle(angle_of(right - left) + kPi / 2); }

  static GraspPair from_points(Vec2 l, Vec2 r, std::optional<double> ls = {}, std::optional<double> rs = {}) {
    require(!(l == r), Errc::DegenerateGrasp, "left and right contacts coincide");
    return {l, r, ls, rs, yaw_from(l, r)};
  }

  GraspPair swapped() const { return from_points(right, left, right_arc, left_arc); }
  Vec2 midpoint() const { return (left + right) * 0.5; }
  double width() const { return distance(left, right); }
};

// ---- samplers ----

class CandidateSampler {
 public:
  virtual ~CandidateSampler() = default;
  virtual std::vector<GraspCandidate> initial(int n, std::mt19937_64& rng) const = 0;
  virtual std::vector<GraspCandidate> around(std::span<const GraspCandidate> centers, double sigma, int n,
                                             std::mt19937_64& rng) const = 0;
  /// Length scale that sigma0_fraction refers to.
  virtual double extent() const = 0;
};

/// Object-aware sampling: every proposal lies on the traced object boundary.
class ContourSampler final : public CandidateSampler {
 public:
  explicit ContourSampler(const mask::Contour& c) : contour_(c) {}

  std::vector<GraspCandidate> initial(int n, std::mt19937_64& rng) const override {
    return wrap(mask::sample_uniform(contour_, n, rng));
  }

  std::vector<GraspCandidate> around(std::span<const GraspCandidate> centers, double sigma, int n,
                                     std::mt19937_64& rng) const override {
    std::vector<double> arcs;
    for (const auto& c : centers) arcs.push_back(c.arc ? *c.arc : contour_.project(c.xy));
    return wrap(mask::sample_gaussian(contour_, arcs, sigma, n, rng));
  }

  double extent() const override { return contour_.length(); }
  const mask::Contour& contour() const { return contour_; }

 private:
  static std::vector<GraspCandidate> wrap(const std::vector<mask::ContourPoint>& pts) {
    std::vector<GraspCandidate> out;
    for (const auto& p : pts) out.push_back({0, p.xy, p.s});
    return out;
  }
  const mask::Contour& contour_;
};

/// Object-agnostic sampling over the image plane: uniform first draw, then an
/// isotropic 2-D Gaussian around a uniformly chosen centre, clamped to the frame.
class FreeSampler final : public CandidateSampler {
 public:
  FreeSampler(int width, int height) : width_(width), height_(height) {
    require(width >= 1 && height >= 1, Errc::InvalidArgument, "sampling frame must be non-empty");
  }

  std::vector<GraspCandidate> initial(int n, std::mt19937_64& rng) const override {
    std::uniform_real_distribution<double> ux(0.0, width_), uy(0.0, height_);
    std::vector<GraspCandidate> out;
    for (int i = 0; i < n; ++i) {
      double x = ux(rng);
      out.push_back({0, {x, uy(rng)}, std::nullopt});
    }
    return out;
  }

  std::vector<GraspCandidate> around(std::span<const GraspCandidate> centers, double sigma, int n,
                                     std::mt19937_64& rng) const override {
    require(!centers.empty(), Errc::InvalidArgument, "no centres to resample around");
    require(sigma > 0, Errc::InvalidArgument, "sigma must be positive");
    std::uniform_int_distribution<std::size_t> pick(0, centers.size() - 1);
    std::normal_distribution<double> normal(0.0, sigma);
    std::vector<GraspCandidate> out;
    for (int i = 0; i < n; ++i) {
      Vec2 c = centers[pick(rng)].xy;
      double dx = normal(rng);
      double dy = normal(rng);
      out.push_back({0, {std::clamp(c.x + dx, 0.0, std::nextafter(double(width_), 0.0)),
                         std::clamp(c.y + dy, 0.0, std::nextafter(double(height_), 0.0))},
                     std::nullopt});
    }
    return out;
  }

  double extent() const override { return std::max(width_, height_); }

 private:
  int width_;
  int height_;
};

// ---- trace ----

struct IterationRecord {
  int iteration = 0;
  double sigma = 0.0;  ///< spread used to draw this iteration's candidates (0 for the uniform first draw)
  int asked = 0;
  std::vector<GraspCandidate> candidates;
  ScorerVerdict verdict;
  int retries_used = 0;
};

struct RefinementTrace {
  GripperRole role = GripperRole::Left;
  std::string description;
  std::vector<IterationRecord> iterations;
};

struct RefineResult {
  GraspCandidate chosen;
  RefinementTrace trace;
};

inline nlohmann::json to_json(const GraspCandidate& c) {
  nlohmann::json j = {{"id", c.id}, {"x", c.xy.x}, {"y", c.xy.y}};
  j["s"] = c.arc ? nlohmann::json(*c.arc) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const RefinementTrace& t) {
  nlohmann::json its = nlohmann::json::array();
  for (const auto& it : t.iterations) {
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : it.candidates) cands.push_back(to_json(c));
    its.push_back({{"iteration", it.iteration},
                   {"sigma", it.sigma},
                   {"asked", it.asked},
                   {"candidates", cands},
                   {"selected", it.verdict.selected_ids},
                   {"rationale", it.verdict.rationale},
                   {"retries", it.retries_used}});
  }
  return {{"role", role_name(t.role)}, {"description", t.description}, {"iterations", its}};
}

/// Extra inputs for a refinement run beyond the sampler and scorer.
struct RefineContext {
  const Rgb8* image = nullptr;  ///< base view annotated for image-consuming scorers
  std::optional<Vec2> left_marker;
  vlm::AnnotationStyle style{};
  std::vector<int> label_order;  ///< optional permutation: candidate i is shown as id label_order[i] + 1
};

inline void validate_verdict(const ScorerVerdict& v, std::span<const GraspCandidate> shown, int asked) {
  if (v.selected_ids.empty()) fail(Errc::EmptySelection, "scorer selected nothing");
  if (int(v.selected_ids.size()) > asked) fail(Errc::InvalidIds, "scorer selected more ids than asked");
  std::set<int> seen;
  for (int id : v.selected_ids) {
    bool known = std::any_of(shown.begin(), shown.end(), [&](const GraspCandidate& c) { return c.id == id; });
    if (!known) fail(Errc::InvalidIds, "scorer selected unknown id " + std::to_string(id));
    if (!seen.insert(id).second) fail(Errc::InvalidIds, "scorer repeated id " + std::to_string(id));
  }
}

namespace detail {

inline ScorerVerdict ask(Scorer& scorer, const ScorerQuery& q, int max_retries, int& retries_used) {
  retries_used = 0;
  std::string last_error;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    try {
      ScorerVerdict v = scorer.select(q);
      validate_verdict(v, q.candidates, q.top_n);
      return v;
    } catch (const Error& e) {
      if (e.code() == Errc::AuthError || e.code() == Errc::Timeout || e.code() == Errc::ScorerFailure)
        fail(Errc::ScorerFailure, e.what());
      last_error = e.what();
    }
    retries_used = attempt + 1;
  }
  fail(Errc::ScorerFailure, "no valid verdict after " + std::to_string(max_retries) + " retries: " + last_error);
}

}  // namespace detail

/// Iteration 1 draws N uniform proposals; iterations 2..T resample around the
/// previous verdict with sigma_t = sigma0 * decay^(t-1); the last iteration
/// asks for a single id, which is returned.
inline RefineResult refine(const CandidateSampler& sampler, Scorer& scorer, const std::string& description,
                           GripperRole role, const RefinementConfig& cfg, std::mt19937_64& rng,
                           const RefineContext& ctx = {}) {
  cfg.validate();
  const int n = cfg.candidates_per_iter;
  if (!ctx.label_order.empty())
    require(int(ctx.label_order.size()) == n, Errc::InvalidArgument, "label_order must have one entry per candidate");

  RefineResult result;
  result.trace.role = role;
  result.trace.description = description;
  std::vector<GraspCandidate> promising;
  for (int t = 1; t <= cfg.iterations; ++t) {
    IterationRecord rec;
    rec.iteration = t;
    std::vector<GraspCandidate> cands;
    if (t == 1) {
      cands = sampler.initial(n, rng);
    } else {
      rec.sigma = cfg.sigma_at(t, sampler.extent());
      cands = sampler.around(promising, rec.sigma, n, rng);
    }
    for (int i = 0; i < n; ++i) cands[std::size_t(i)].id = ctx.label_order.empty() ? i + 1 : ctx.label_order[std::size_t(i)] + 1;

    rec.asked = (t == cfg.iterations) ? 1 : cfg.top_n;
    if (n == 1) {
      rec.verdict = {{cands[0].id}, "single candidate"};
    } else {
      ScorerQuery q;
      q.role = role;
      q.iteration = t;
      q.top_n = rec.asked;
      q.prompt = vlm::render_vqa_prompt(description, rec.asked);
      q.candidates = cands;
      q.left_marker = ctx.left_marker;
      if (scorer.wants_image()) {
        require(ctx.image != nullptr, Errc::InvalidArgument, "scorer wants an image but none was supplied");
        q.image = vlm::annotate(*ctx.image, cands, {}, ctx.left_marker, ctx.style);
      }
      rec.verdict = detail::ask(scorer, q, cfg.max_retries, rec.retries_used);
    }

    promising.clear();
    for (int id : rec.verdict.selected_ids)
      for (const auto& c : cands)
        if (c.id == id) promising.push_back(c);
    rec.candidates = std::move(cands);
    result.trace.iterations.push_back(std::move(rec));
  }
  result.chosen = promising.front();
  return result;
}

inline RefineResult refine(const mask::Contour& contour, Scorer& scorer, const std::string& description,
                           const RefinementConfig& cfg, std::mt19937_64& rng) {
  ContourSampler sampler(contour);
  return refine(sampler, scorer, description, GripperRole::Left, cfg, rng);
}

struct GraspSelection {
  GraspPair pair;
  RefinementTrace left;
  RefinementTrace right;
};

/// Left contact first; the right query then sees the left contact as a red
/// marker and the extra note in its description.
inline GraspSelection select_grasp_pair(const Rgb8& obs_pre, const CandidateSampler& sampler, Scorer& scorer,
                                        const GraspDescription& desc, const RefinementConfig& cfg,
                                        std::mt19937_64& rng, const vlm::AnnotationStyle& style = {}) {
  RefineContext lctx{&obs_pre, std::nullopt, style, {}};
  auto left = refine(sampler, scorer, desc.left, GripperRole::Left, cfg, rng, lctx);
  RefineContext rctx{&obs_pre, left.chosen.xy, style, {}};
  auto right = refine(sampler, scorer, vlm::with_left_marker_note(desc.right), GripperRole::Right, cfg, rng, rctx);
  if (distance(left.chosen.xy, right.chosen.xy) < cfg.min_jaw_separation_px)
    fail(Errc::DegenerateGrasp, "jaw contacts closer than the minimum separation");
  GraspSelection sel;
  sel.pair = GraspPair::from_points(left.chosen.xy, right.chosen.xy, left.chosen.arc, right.chosen.arc);
  sel.left = std::move(left.trace);
  sel.right = std::move(right.trace);
  return sel;
}

inline GraspSelection select_grasp_pair(const Rgb8& obs_pre, const mask::Contour& contour, Scorer& scorer,
                                        const GraspDescription& desc, const RefinementConfig& cfg,
                                        std::mt19937_64& rng) {
  ContourSampler sampler(contour);
  return select_grasp_pair(obs_pre, sampler, scorer, desc, cfg, rng);
}

// ---- oracle scorer ----

/// Target contact known to the oracle, with its arc parameter when it lies on a contour.
struct OracleTarget {
  Vec2 xy;
  std::optional<double> arc;
};

/// Deterministic stand-in for a language model: scores each candidate by the
/// negated distance to the nearest target plus Gaussian noise drawn in
/// presentation order, and returns the top ids (ties -> lowest id). A right-jaw
/// query ignores the target nearest the left marker.
class OracleScorer final : public Scorer {
 public:
  OracleScorer(std::vector<OracleTarget> targets, double contour_length, double noise_sigma, std::uint64_t seed,
               GraspDescription description = default_description())
      : targets_(std::move(targets)),
        length_(contour_length),
        noise_(noise_sigma),
        rng_(seed),
        description_(std::move(description)) {
    require(!targets_.empty(), Errc::InvalidArgument, "oracle needs at least one target");
    require(noise_sigma >= 0, Errc::InvalidArgument, "oracle noise must be non-negative");
  }

  /// Targets given as arc parameters on `contour`.
  static OracleScorer on_contour(const mask::Contour& contour, std::span<const double> arcs, double noise_sigma,
                                 std::uint64_t seed) {
    std::vector<OracleTarget> t;
    for (double s : arcs) t.push_back({contour.point_at(s), contour.wrap(s)});
    return OracleScorer(std::move(t), contour.length(), noise_sigma, seed);
  }

  static GraspDescription default_description() {
    return {"Position the left gripper on the first contact of the reference stable grasp.",
            "Position the right gripper on the opposite contact of the reference stable grasp."};
  }

  ScorerVerdict select(const ScorerQuery& q) override {
    std::vector<const OracleTarget*> active;
    for (const auto& t : targets_) active.push_back(&t);
    if (q.role == GripperRole::Right && q.left_marker && active.size() > 1) {
      auto nearest = std::min_element(active.begin(), active.end(), [&](auto* a, auto* b) {
        return distance(a->xy, *q.left_marker) < distance(b->xy, *q.left_marker);
      });
      active.erase(nearest);
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::pair<double, int>> scored;
    for (const auto& c : q.candidates) {
      double d = INFINITY;
      for (auto* t : active) d = std::min(d, gap(c, *t));
      double noise = noise_ > 0 ? noise_ * normal(rng_) : 0.0;
      scored.push_back({-d + noise, c.id});
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    ScorerVerdict v;
    for (int i = 0; i < q.top_n && i < int(scored.size()); ++i) v.selected_ids.push_back(scored[std::size_t(i)].second);
    v.rationale = "These circles are closest to the described contact.";
    return v;
  }

  GraspDescription describe(const std::string&, const Rgb8&) override { return description_; }
  std::string mode() const override { return "oracle"; }

 private:
  double gap(const GraspCandidate& c, const OracleTarget& t) const {
    if (c.arc && t.arc && length_ > 0) {
      double d = std::fabs(*c.arc - *t.arc);
      d = std::fmod(d, length_);
      return std::min(d, length_ - d);
    }
    return distance(c.xy, t.xy);
  }

  std::vector<OracleTarget> targets_;
  double length_;
  double noise_;
  std::mt19937_64 rng_;
  GraspDescription description_;
};

}  // namespace regrasp::refine
