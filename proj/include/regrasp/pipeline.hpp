#pragma once

// End-to-end grasp correction in the planar simulator: a perturbed episode
// runs to its grasp moment, contacts are detected on the pre-grasp top-down
// frame, a goal view is composed around the gripper, and the policy proposes
// the corrective pose that is then executed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "regrasp/action.hpp"
#include "regrasp/candidate_refiner.hpp"
#include "regrasp/diffusion_policy.hpp"
#include "regrasp/error.hpp"
#include "regrasp/fixture_scorer.hpp"
#include "regrasp/goal_composer.hpp"
#include "regrasp/hash.hpp"
#include "regrasp/mask_geometry.hpp"
#include "regrasp/planar_sim.hpp"
#include "regrasp/vlm_interface.hpp"
#include "regrasp/vlm_remote.hpp"

namespace regrasp::pipeline {

inline constexpr const char* kVersion = "0.1.0";

enum class ScorerMode { Oracle, Remote, Fixture };
enum class Sampling { Contour, Free };
enum class Prompting { GraspGuided, Generic };

inline const char* name_of(ScorerMode m) {
  switch (m) {
    case ScorerMode::Oracle: return "oracle";
    case ScorerMode::Remote: return "remote";
    case ScorerMode::Fixture: return "fixture";
  }
  return "?";
}
inline const char* name_of(Sampling s) { return s == Sampling::Contour ? "contour" : "free"; }
inline const char* name_of(Prompting p) { return p == Prompting::GraspGuided ? "grasp_guided" : "generic"; }

inline ScorerMode scorer_mode_from_name(const std::string& s) {
  if (s == "oracle") return ScorerMode::Oracle;
  if (s == "remote") return ScorerMode::Remote;
  if (s == "fixture") return ScorerMode::Fixture;
  fail(Errc::ConfigError, "unknown scorer mode '" + s + "'");
}
inline Sampling sampling_from_name(const std::string& s) {
  if (s == "contour") return Sampling::Contour;
  if (s == "free") return Sampling::Free;
  fail(Errc::ConfigError, "unknown sampling mode '" + s + "'");
}
inline Prompting prompting_from_name(const std::string& s) {
  if (s == "grasp_guided") return Prompting::GraspGuided;
  if (s == "generic") return Prompting::Generic;
  fail(Errc::ConfigError, "unknown prompting mode '" + s + "'");
}

// ---------------------------------------------------------------- config

struct OracleSettings {
  double noise_px = 0.5;           ///< score noise with the grasp-guided description
  double generic_noise_px = 24.0;  ///< score noise with the generic description
};

struct DataSettings {
  int pairs = 200;
  std::uint64_t seed_base = 1'000'000;
  bool goal_relabel = true;  ///< also train on the reversed (reference -> perturbed) pairs
};

struct EvalSettings {
  int episodes = 300;
  std::uint64_t seed_base = 5'000'000;
  int groups = 3;
  double tau = 1.52;
  double calibration_quantile = 0.5;
  int max_attempts = 100'000;
};

struct ArtifactSettings {
  bool write = true;
  int episodes = 4;  ///< episodes (in seed order) whose images and traces are written
};

struct PipelineConfig {
  sim::TaskId task = sim::TaskId::Peg;
  ScorerMode scorer = ScorerMode::Oracle;
  Sampling sampling = Sampling::Contour;
  Prompting prompting = Prompting::GraspGuided;
  refine::RefinementConfig refinement;
  policy::TrainConfig train = default_train();
  sim::PerturbationSigma sigma;
  OracleSettings oracle;
  DataSettings data;
  EvalSettings eval;
  vlm::EndpointConfig endpoint;
  std::filesystem::path fixture;  ///< replayed in fixture mode
  std::filesystem::path record;   ///< scorer exchanges are written here when set
  std::filesystem::path checkpoint;
  bool train_first = false;
  std::filesystem::path output_dir = "runs/default";
  int threads = 0;  ///< 0 = hardware concurrency
  ArtifactSettings artifacts;
  std::vector<double> lambda_sweep{1.0, 0.5, 0.2, 0.1};
  double goal_margin_px = 0.0;

  static policy::TrainConfig default_train() {
    policy::TrainConfig t;
    t.gradient_accumulation = true;
    return t;
  }

  void validate() const {
    refinement.validate();
    train.validate();
    require(sigma.position >= 0 && sigma.heading >= 0, Errc::ConfigError, "perturbation sigma must be non-negative");
    require(oracle.noise_px >= 0 && oracle.generic_noise_px >= 0, Errc::ConfigError, "oracle noise must be non-negative");
    require(data.pairs >= 1, Errc::ConfigError, "dataset needs at least one pair");
    require(eval.episodes >= 1, Errc::ConfigError, "evaluation needs at least one episode");
    require(eval.groups >= 1 && eval.groups <= eval.episodes, Errc::ConfigError, "need 1 <= groups <= episodes");
    require(eval.calibration_quantile > 0 && eval.calibration_quantile < 1, Errc::ConfigError,
            "calibration quantile must lie in (0, 1)");
    require(threads >= 0, Errc::ConfigError, "threads must be non-negative");
    require(goal_margin_px >= 0, Errc::ConfigError, "goal margin must be non-negative");
    if (scorer == ScorerMode::Remote) endpoint.validate();
  }
};

inline nlohmann::json to_json(const refine::RefinementConfig& r) {
  nlohmann::json j = {{"iterations", r.iterations},         {"candidates_per_iter", r.candidates_per_iter},
                      {"top_n", r.top_n},                   {"sigma0_fraction", r.sigma0_fraction},
                      {"sigma_decay", r.sigma_decay},       {"max_retries", r.max_retries},
                      {"min_jaw_separation_px", r.min_jaw_separation_px}};
  j["sigma0_px"] = r.sigma0_px ? nlohmann::json(*r.sigma0_px) : nlohmann::json(nullptr);
  return j;
}

inline refine::RefinementConfig refinement_from_json(const nlohmann::json& j) {
  refine::RefinementConfig r;
  r.iterations = j.value("iterations", r.iterations);
  r.candidates_per_iter = j.value("candidates_per_iter", r.candidates_per_iter);
  r.top_n = j.value("top_n", r.top_n);
  r.sigma0_fraction = j.value("sigma0_fraction", r.sigma0_fraction);
  r.sigma_decay = j.value("sigma_decay", r.sigma_decay);
  r.max_retries = j.value("max_retries", r.max_retries);
  r.min_jaw_separation_px = j.value("min_jaw_separation_px", r.min_jaw_separation_px);
  if (j.contains("sigma0_px") && !j.at("sigma0_px").is_null()) r.sigma0_px = j.at("sigma0_px").get<double>();
  return r;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"task", sim::task_spec(c.task).name},
          {"scorer", name_of(c.scorer)},
          {"sampling", name_of(c.sampling)},
          {"prompting", name_of(c.prompting)},
          {"refinement", to_json(c.refinement)},
          {"train", policy::to_json(c.train)},
          {"perturbation", {{"position", c.sigma.position}, {"heading", c.sigma.heading}}},
          {"oracle", {{"noise_px", c.oracle.noise_px}, {"generic_noise_px", c.oracle.generic_noise_px}}},
          {"data", {{"pairs", c.data.pairs}, {"seed_base", c.data.seed_base}, {"goal_relabel", c.data.goal_relabel}}},
          {"eval",
           {{"episodes", c.eval.episodes},
            {"seed_base", c.eval.seed_base},
            {"groups", c.eval.groups},
            {"tau", c.eval.tau},
            {"calibration_quantile", c.eval.calibration_quantile},
            {"max_attempts", c.eval.max_attempts}}},
          {"endpoint", vlm::to_json(c.endpoint)},
          {"fixture", c.fixture.string()},
          {"record", c.record.string()},
          {"checkpoint", c.checkpoint.string()},
          {"train_first", c.train_first},
          {"output_dir", c.output_dir.string()},
          {"threads", c.threads},
          {"artifacts", {{"write", c.artifacts.write}, {"episodes", c.artifacts.episodes}}},
          {"lambda_sweep", c.lambda_sweep},
          {"goal_margin_px", c.goal_margin_px}};
}

/// Missing keys keep their defaults; unknown top-level keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "task",     "scorer",     "sampling",    "prompting", "refinement", "train",     "perturbation",
      "oracle",   "data",       "eval",        "endpoint",  "fixture",    "record",    "checkpoint",
      "train_first", "output_dir", "threads",  "artifacts", "lambda_sweep", "goal_margin_px"};
  if (!j.is_object()) fail(Errc::ConfigError, "config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) fail(Errc::ConfigError, "unknown config key '" + k + "'");
  PipelineConfig c;
  try {
    if (j.contains("task")) c.task = sim::task_from_name(j.at("task").get<std::string>());
    if (j.contains("scorer")) c.scorer = scorer_mode_from_name(j.at("scorer").get<std::string>());
    if (j.contains("sampling")) c.sampling = sampling_from_name(j.at("sampling").get<std::string>());
    if (j.contains("prompting")) c.prompting = prompting_from_name(j.at("prompting").get<std::string>());
    if (j.contains("refinement")) c.refinement = refinement_from_json(j.at("refinement"));
    if (j.contains("train")) {
      c.train = policy::train_config_from_json(j.at("train"));
      if (!j.at("train").contains("gradient_accumulation")) c.train.gradient_accumulation = true;
    }
    if (j.contains("perturbation")) {
      c.sigma.position = j.at("perturbation").value("position", c.sigma.position);
      c.sigma.heading = j.at("perturbation").value("heading", c.sigma.heading);
    }
    if (j.contains("oracle")) {
      c.oracle.noise_px = j.at("oracle").value("noise_px", c.oracle.noise_px);
      c.oracle.generic_noise_px = j.at("oracle").value("generic_noise_px", c.oracle.generic_noise_px);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.pairs = d.value("pairs", c.data.pairs);
      c.data.seed_base = d.value("seed_base", c.data.seed_base);
      c.data.goal_relabel = d.value("goal_relabel", c.data.goal_relabel);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      c.eval.episodes = e.value("episodes", c.eval.episodes);
      c.eval.seed_base = e.value("seed_base", c.eval.seed_base);
      c.eval.groups = e.value("groups", c.eval.groups);
      c.eval.tau = e.value("tau", c.eval.tau);
      c.eval.calibration_quantile = e.value("calibration_quantile", c.eval.calibration_quantile);
      c.eval.max_attempts = e.value("max_attempts", c.eval.max_attempts);
    }
    if (j.contains("endpoint")) c.endpoint = vlm::endpoint_config_from_json(j.at("endpoint"));
    c.fixture = j.value("fixture", std::string());
    c.record = j.value("record", std::string());
    c.checkpoint = j.value("checkpoint", std::string());
    c.train_first = j.value("train_first", c.train_first);
    c.output_dir = j.value("output_dir", c.output_dir.string());
    c.threads = j.value("threads", c.threads);
    if (j.contains("artifacts")) {
      c.artifacts.write = j.at("artifacts").value("write", c.artifacts.write);
      c.artifacts.episodes = j.at("artifacts").value("episodes", c.artifacts.episodes);
    }
    if (j.contains("lambda_sweep")) c.lambda_sweep = j.at("lambda_sweep").get<std::vector<double>>();
    c.goal_margin_px = j.value("goal_margin_px", c.goal_margin_px);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigError, std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(Errc::ConfigError, "config " + path.string() + " does not exist");
  auto j = nlohmann::json::parse(is, nullptr, false, true);
  if (j.is_discarded()) fail(Errc::ConfigError, "config " + path.string() + " is not valid JSON");
  return config_from_json(j);
}

inline std::string config_hash(const PipelineConfig& c) { return sha256_hex(to_json(c).dump()); }

// ---------------------------------------------------------------- descriptions

inline std::string object_noun(sim::TaskId t) {
  switch (t) {
    case sim::TaskId::Peg: return "the peg";
    case sim::TaskId::Shape: return "the cross-shaped block";
    case sim::TaskId::Cup: return "the cup";
  }
  return "the object";
}

/// Grasp-guided text handed to the oracle, written in the reply format of the
/// grasp prompt.
inline GraspDescription guided_description(sim::TaskId t) {
  switch (t) {
    case sim::TaskId::Peg:
      return {"Position the left gripper at the middle of one long edge of the peg, halfway between its short ends.",
              "Position the right gripper at the middle of the opposite long edge, directly across from the left "
              "contact."};
    case sim::TaskId::Shape:
      return {"Position the left gripper on one side of the arm that points along the block's heading, about two "
              "thirds of the way out from the centre.",
              "Position the right gripper on the other side of the same arm, directly across from the left contact."};
    case sim::TaskId::Cup:
      return {"Position the left gripper on the rim of the cup body a quarter turn away from the handle.",
              "Position the right gripper on the opposite side of the body, directly across from the left contact."};
  }
  return {};
}

inline GraspDescription generic_description(sim::TaskId t) { return {object_noun(t), object_noun(t)}; }

// ---------------------------------------------------------------- episodes

struct IterationStat {
  GripperRole role = GripperRole::Left;
  int iteration = 0;
  double mean_boundary_px = 0.0;   ///< mean distance of candidates to the object boundary
  double off_object_fraction = 0.0;  ///< candidates farther than 1 px from the boundary
  double best_target_px = 0.0;     ///< closest selected candidate to a reference contact
};

struct EpisodeRecord {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  bool pre_success = false;
  bool post_success = false;
  double pre_d2 = 0.0;
  double post_d2 = 0.0;
  Action8 pre_action;
  Action8 post_action;
  Action8 reference_action;
  std::optional<refine::GraspPair> pair;  ///< detected contacts, top-down pixels
  double pair_error_px = 0.0;             ///< mean distance of the contacts to the reference contacts
  std::vector<IterationStat> iterations;
  std::vector<vlm::FixtureRecord> exchanges;
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(id), 0x5eedu};
  return std::mt19937_64(seq);
}

inline double distance_to_polyline(const std::vector<Vec2>& pts, Vec2 p) {
  double best = INFINITY;
  for (std::size_t i = 0; i < pts.size(); ++i)
    best = std::min(best, point_segment_distance(p, pts[i], pts[(i + 1) % pts.size()]));
  return best;
}

inline mask::SegMask polygon_mask(const sim::Camera& cam, std::span<const Vec2> poly) {
  mask::SegMask m(cam.width, cam.height);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u)
      if (point_in_polygon(poly, cam.to_world({u + 0.5, v + 0.5}))) m.set(u, v);
  return m;
}

/// Pose in a camera's metric frame after a pixel-space rigid motion.
inline Pose2 move_in_view(const Pose2& local, const goal::RigidTransform2D& tf, const sim::Camera& cam) {
  const Vec2 c{cam.width / 2.0, cam.height / 2.0};
  Vec2 p = rotate(local.position(), tf.theta) + (rotate(c, tf.theta) + tf.t - c) / cam.scale;
  return {p.x, p.y, wrap_angle(local.heading + tf.theta)};
}

}  // namespace detail

/// Goal geometry in the gripper view at the grasp moment.
struct GoalPlan {
  sim::Camera view;
  refine::GraspPair current;  ///< detected contacts in view pixels
  refine::GraspPair target;   ///< where the jaws meet them
  goal::TransformFit fit;
  Pose2 object_goal;  ///< object pose in the view's metric frame once moved
};

/// The jaws are interchangeable, so the labelling that keeps the closing axis
/// closest to the current one is used.
inline GoalPlan plan_goal(const sim::World& world, const sim::GripperState& grasp, const sim::Camera& top,
                          const refine::GraspPair& detected) {
  GoalPlan g;
  g.view = sim::ego_camera(grasp.pose);
  Vec2 l = g.view.to_px(top.to_world(detected.left));
  Vec2 r = g.view.to_px(top.to_world(detected.right));
  if (r.x - l.x < 0) std::swap(l, r);
  g.current = refine::GraspPair::from_points(l, r);
  const double half = distance(l, r) / 2;
  const Vec2 c{g.view.width / 2.0, g.view.height / 2.0};
  g.target = refine::GraspPair::from_points(c - Vec2{half, 0}, c + Vec2{half, 0});
  g.fit = goal::solve_transform(g.current, g.target);
  g.object_goal = detail::move_in_view(g.view.to_local(world.objects.front().pose), g.fit.transform, g.view);
  return g;
}

/// Goal image: gripper view with object and jaws removed, the object moved by
/// the plan, jaws drawn at the target contacts.
inline goal::GoalImage compose_goal_view(const sim::World& world, const sim::GripperState& grasp, const GoalPlan& plan,
                                         double margin_px, std::vector<std::string> sources = {}) {
  sim::World w = world;
  w.gripper_state = grasp;
  auto obs = sim::render(w, plan.view);
  auto left = detail::polygon_mask(plan.view, sim::jaw_polygon(grasp, w.gripper, sim::Jaw::Left));
  auto right = detail::polygon_mask(plan.view, sim::jaw_polygon(grasp, w.gripper, sim::Jaw::Right));
  mask::SegMask visible(obs.mask.width(), obs.mask.height()), hidden = visible;
  for (int y = 0; y < visible.height(); ++y)
    for (int x = 0; x < visible.width(); ++x) {
      bool jaw = left.get(x, y) || right.get(x, y);
      visible.set(x, y, obs.mask.get(x, y) && !jaw);
      hidden.set(x, y, obs.mask.get(x, y) || jaw);
    }
  auto plate = sim::render_clean_plate(plan.view);
  auto bg = goal::restore_background(obs.image, hidden, &plate);
  auto cut = goal::make_cutout(obs.image, visible, plan.current);
  const int thick = std::max(1, int(std::lround(w.gripper.pad_thickness * plan.view.scale)));
  const int len = std::max(1, int(std::lround(w.gripper.pad_length * plan.view.scale)));
  auto jaws = goal::make_jaw_sprite(thick, len, w.gripper.color);
  return goal::compose_goal(bg, cut, jaws, plan.fit.transform, plan.target, margin_px, std::move(sources));
}

struct EpisodeContext {
  const PipelineConfig* cfg = nullptr;
  sim::TaskSpec task;
  const policy::PolicyModel* model = nullptr;
  const vlm::FixtureLog* fixture = nullptr;
  std::filesystem::path artifact_dir;  ///< empty: no artifacts for this episode
};

namespace detail {

inline std::unique_ptr<Scorer> make_scorer(const EpisodeContext& ctx, std::uint64_t seed,
                                           std::vector<refine::OracleTarget> targets, double contour_length) {
  const auto& cfg = *ctx.cfg;
  switch (cfg.scorer) {
    case ScorerMode::Oracle: {
      double noise = cfg.prompting == Prompting::GraspGuided ? cfg.oracle.noise_px : cfg.oracle.generic_noise_px;
      auto rng = stream(seed, 2);
      return std::make_unique<refine::OracleScorer>(std::move(targets), contour_length, noise, rng(),
                                                    guided_description(cfg.task));
    }
    case ScorerMode::Remote:
      return std::make_unique<vlm::RemoteScorer>(cfg.endpoint, std::to_string(seed));
    case ScorerMode::Fixture:
      require(ctx.fixture != nullptr, Errc::ConfigError, "fixture mode needs a loaded fixture");
      return std::make_unique<vlm::FixtureScorer>(ctx.fixture->episode(std::to_string(seed)), cfg.endpoint.max_side);
  }
  fail(Errc::ConfigError, "unknown scorer mode");
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) fail(Errc::IoError, "cannot write " + p.string());
  os << s;
}

inline void write_trace_images(const std::filesystem::path& dir, const Rgb8& frame, const refine::RefinementTrace& t,
                               std::optional<Vec2> left_marker) {
  for (const auto& it : t.iterations) {
    std::vector<GraspCandidate> shown;
    for (const auto& c : it.candidates)
      if (c.xy.x >= 0 && c.xy.y >= 0 && c.xy.x < frame.width && c.xy.y < frame.height) shown.push_back(c);
    auto img = vlm::annotate(frame, shown, it.verdict.selected_ids, left_marker);
    write_png(dir / (std::string(role_name(t.role)) + "_iter" + std::to_string(it.iteration) + ".png"), img);
  }
}

}  // namespace detail

/// One paired episode through the whole pipeline. Module errors mark the
/// episode failed; the uncorrected grasp then stands as the post outcome.
inline EpisodeRecord run_episode(const EpisodeContext& ctx, std::uint64_t seed) {
  const auto& cfg = *ctx.cfg;
  EpisodeRecord rec;
  rec.seed = seed;
  sim::ExecuteOptions exec;
  auto run = sim::run_paired(ctx.task, seed, cfg.sigma, exec);
  const auto& ep = run.perturbed;
  rec.pre_action = ep.grasp_action;
  rec.reference_action = run.reference.grasp_action;
  rec.pre_success = ep.outcome.success;
  rec.pre_d2 = action_distance_sq(rec.pre_action, rec.reference_action);
  rec.post_action = rec.pre_action;
  rec.post_success = rec.pre_success;
  rec.post_d2 = rec.pre_d2;
  std::function<void()> write_artifacts;

  try {
    const int tg = ep.require_grasp_time();
    const auto& frame = ep.history_frame(sim::kHistoryWindow);
    auto top = sim::render_topdown(run.world);
    auto contour = mask::extract_contour(top.mask);
    const auto& obj = run.world.objects.front();
    std::vector<Vec2> ref_px{top.camera.to_px(obj.pose.apply(obj.expert_contacts->first)),
                             top.camera.to_px(obj.pose.apply(obj.expert_contacts->second))};
    std::vector<refine::OracleTarget> targets;
    for (Vec2 p : ref_px) targets.push_back({p, contour.project(p)});

    auto base = detail::make_scorer(ctx, seed, targets, contour.length());
    vlm::RecordingScorer scorer(*base, std::to_string(seed), cfg.endpoint.max_side);
    GraspDescription desc = cfg.prompting == Prompting::GraspGuided ? scorer.describe(ctx.task.description, frame.image)
                                                                    : generic_description(cfg.task);

    std::unique_ptr<refine::CandidateSampler> sampler;
    if (cfg.sampling == Sampling::Contour) sampler = std::make_unique<refine::ContourSampler>(contour);
    else sampler = std::make_unique<refine::FreeSampler>(frame.image.width, frame.image.height);
    auto rng = detail::stream(seed, 1);
    std::optional<refine::GraspSelection> sel;
    try {
      sel = refine::select_grasp_pair(frame.image, *sampler, scorer, desc, cfg.refinement, rng);
    } catch (...) {
      rec.exchanges = scorer.records();
      throw;
    }
    rec.exchanges = scorer.records();
    rec.pair = sel->pair;

    auto nearest_ref = [&](Vec2 p) { return std::min(distance(p, ref_px[0]), distance(p, ref_px[1])); };
    rec.pair_error_px = 0.5 * (nearest_ref(sel->pair.left) + nearest_ref(sel->pair.right));
    for (const auto* trace : {&sel->left, &sel->right})
      for (const auto& it : trace->iterations) {
        IterationStat st;
        st.role = trace->role;
        st.iteration = it.iteration;
        int off = 0;
        for (const auto& c : it.candidates) {
          double d = detail::distance_to_polyline(contour.points(), c.xy);
          st.mean_boundary_px += d;
          off += d > 1.0;
        }
        st.mean_boundary_px /= double(it.candidates.size());
        st.off_object_fraction = double(off) / double(it.candidates.size());
        st.best_target_px = INFINITY;
        for (int id : it.verdict.selected_ids)
          for (const auto& c : it.candidates)
            if (c.id == id) st.best_target_px = std::min(st.best_target_px, nearest_ref(c.xy));
        rec.iterations.push_back(st);
      }

    const bool image_mode = ctx.model->shape.mode == policy::EncoderMode::Image;
    auto plan = plan_goal(run.world, ep.grasp_state, top.camera, sel->pair);
    PolicyObservation o = sim::policy_observation(run.world, ep.grasp_state, image_mode);
    PolicyObservation o_star;
    o_star.state = state_features(plan.object_goal);
    std::optional<goal::GoalImage> goal_img;
    if (image_mode || !ctx.artifact_dir.empty()) {
      goal_img = compose_goal_view(run.world, ep.grasp_state, plan, cfg.goal_margin_px,
                                   {"topdown:t=" + std::to_string(frame.t), "ego:t=" + std::to_string(tg)});
      if (image_mode) o_star.image = goal_img->image;
    }

    auto prng = detail::stream(seed, 3);
    rec.post_action = policy::sample_action(*ctx.model, o, o_star, ep.grasp_action, prng);
    rec.post_d2 = action_distance_sq(rec.post_action, rec.reference_action);
    rec.post_success = sim::close_at(run.world, rec.post_action.pose2()).success;

    if (!ctx.artifact_dir.empty()) {
      write_artifacts = [&, frame_image = frame.image, plan, goal_img, sel] {
        const auto& d = ctx.artifact_dir;
        std::filesystem::create_directories(d);
        sim::World at_grasp = run.world;
        at_grasp.gripper_state = ep.grasp_state;
        write_png(d / "pregrasp_topdown.png", frame_image);
        write_png(d / "observation.png", sim::render(at_grasp, plan.view).image);
        write_png(d / "goal.png", goal_img->image);
        detail::write_text(d / "goal.json", goal::to_json(goal_img->provenance).dump(2) + "\n");
        detail::write_trace_images(d, frame_image, sel->left, std::nullopt);
        detail::write_trace_images(d, frame_image, sel->right, sel->pair.left);
        nlohmann::json tj = {{"left", refine::to_json(sel->left)}, {"right", refine::to_json(sel->right)}};
        detail::write_text(d / "trace.json", tj.dump(2) + "\n");
      };
    }
  } catch (const Error& e) {
    rec.failed = true;
    rec.error = e.what();
    rec.post_action = rec.pre_action;
    rec.post_success = rec.pre_success;
    rec.post_d2 = rec.pre_d2;
    write_artifacts = nullptr;
  }
  if (write_artifacts) write_artifacts();
  return rec;
}

// ---------------------------------------------------------------- reports

struct GroupStat {
  double mean = 0.0;
  double sd = 0.0;
  std::vector<double> groups;
};

struct IterationSummary {
  GripperRole role = GripperRole::Left;
  int iteration = 0;
  double mean_boundary_px = 0.0;
  double off_object_fraction = 0.0;
  double mean_best_target_px = 0.0;
};

struct MetricsReport {
  std::string task;
  std::string scorer;
  std::string sampling;
  std::string prompting;
  int episodes = 0;
  int failed_episodes = 0;
  std::uint64_t seed_attempts = 0;  ///< includes attempts skipped for lack of contact
  double pre_success = 0.0;
  double post_success = 0.0;
  GroupStat pre_success_groups;
  GroupStat post_success_groups;
  double pre_mean_d2 = 0.0;
  double post_mean_d2 = 0.0;
  double d2_ratio = 0.0;
  double tau = 1.52;
  double pre_accuracy = 0.0;
  double post_accuracy = 0.0;
  double tau_calibrated = 0.0;
  double pre_accuracy_calibrated = 0.0;
  double post_accuracy_calibrated = 0.0;
  double mean_pair_error_px = 0.0;
  double off_object_fraction = 0.0;
  bool no_improvement = false;
  std::vector<IterationSummary> iterations;
};

namespace detail {

inline GroupStat group_stat(const std::vector<double>& xs, int groups) {
  GroupStat g;
  const std::size_t n = xs.size();
  std::size_t begin = 0;
  for (int k = 0; k < groups; ++k) {
    std::size_t size = n / std::size_t(groups) + (std::size_t(k) < n % std::size_t(groups) ? 1 : 0);
    double s = 0;
    for (std::size_t i = begin; i < begin + size; ++i) s += xs[i];
    g.groups.push_back(size ? s / double(size) : 0.0);
    begin += size;
  }
  for (double v : g.groups) g.mean += v;
  g.mean /= double(groups);
  if (groups > 1) {
    double ss = 0;
    for (double v : g.groups) ss += (v - g.mean) * (v - g.mean);
    g.sd = std::sqrt(ss / double(groups - 1));
  }
  return g;
}

/// Linear-interpolation quantile of a sample.
inline double quantile(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  double h = (double(xs.size()) - 1) * q;
  std::size_t lo = std::size_t(std::floor(h));
  std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (h - double(lo)) * (xs[hi] - xs[lo]);
}

}  // namespace detail

inline MetricsReport summarize(const std::vector<EpisodeRecord>& recs, const PipelineConfig& cfg,
                               std::uint64_t attempts) {
  require(!recs.empty(), Errc::InvalidArgument, "no episodes to summarise");
  MetricsReport r;
  r.task = sim::task_spec(cfg.task).name;
  r.scorer = name_of(cfg.scorer);
  r.sampling = name_of(cfg.sampling);
  r.prompting = name_of(cfg.prompting);
  r.episodes = int(recs.size());
  r.seed_attempts = attempts;
  r.tau = cfg.eval.tau;
  std::vector<double> pre_s, post_s, pre_d, post_d;
  for (const auto& e : recs) {
    r.failed_episodes += e.failed;
    pre_s.push_back(e.pre_success);
    post_s.push_back(e.post_success);
    pre_d.push_back(e.pre_d2);
    post_d.push_back(e.post_d2);
  }
  const double n = double(recs.size());
  auto mean = [&](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / n;
  };
  auto frac_below = [&](const std::vector<double>& v, double t) {
    return double(std::count_if(v.begin(), v.end(), [&](double x) { return x < t; })) / n;
  };
  r.pre_success = mean(pre_s);
  r.post_success = mean(post_s);
  r.pre_success_groups = detail::group_stat(pre_s, cfg.eval.groups);
  r.post_success_groups = detail::group_stat(post_s, cfg.eval.groups);
  r.pre_mean_d2 = mean(pre_d);
  r.post_mean_d2 = mean(post_d);
  r.d2_ratio = r.pre_mean_d2 > 0 ? r.post_mean_d2 / r.pre_mean_d2 : INFINITY;
  r.pre_accuracy = frac_below(pre_d, r.tau);
  r.post_accuracy = frac_below(post_d, r.tau);
  r.tau_calibrated = detail::quantile(pre_d, cfg.eval.calibration_quantile);
  r.pre_accuracy_calibrated = frac_below(pre_d, r.tau_calibrated);
  r.post_accuracy_calibrated = frac_below(post_d, r.tau_calibrated);
  r.no_improvement = !(r.post_mean_d2 < r.pre_mean_d2);

  int with_pair = 0;
  double cands = 0, off = 0;
  for (const auto& e : recs) {
    if (!e.pair) continue;
    ++with_pair;
    r.mean_pair_error_px += e.pair_error_px;
  }
  if (with_pair) r.mean_pair_error_px /= with_pair;

  for (GripperRole role : {GripperRole::Left, GripperRole::Right})
    for (int t = 1; t <= cfg.refinement.iterations; ++t) {
      IterationSummary s;
      s.role = role;
      s.iteration = t;
      int k = 0;
      for (const auto& e : recs)
        for (const auto& st : e.iterations)
          if (st.role == role && st.iteration == t) {
            ++k;
            s.mean_boundary_px += st.mean_boundary_px;
            s.off_object_fraction += st.off_object_fraction;
            s.mean_best_target_px += st.best_target_px;
          }
      if (k == 0) continue;
      s.mean_boundary_px /= k;
      s.off_object_fraction /= k;
      s.mean_best_target_px /= k;
      cands += k;
      off += s.off_object_fraction * k;
      r.iterations.push_back(s);
    }
  r.off_object_fraction = cands > 0 ? off / cands : 0.0;
  return r;
}

inline nlohmann::json to_json(const GroupStat& g) { return {{"mean", g.mean}, {"sd", g.sd}, {"groups", g.groups}}; }

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json its = nlohmann::json::array();
  for (const auto& s : r.iterations)
    its.push_back({{"role", role_name(s.role)},
                   {"iteration", s.iteration},
                   {"mean_boundary_px", s.mean_boundary_px},
                   {"off_object_fraction", s.off_object_fraction},
                   {"mean_best_target_px", s.mean_best_target_px}});
  return {{"task", r.task},
          {"scorer", r.scorer},
          {"sampling", r.sampling},
          {"prompting", r.prompting},
          {"episodes", r.episodes},
          {"failed_episodes", r.failed_episodes},
          {"seed_attempts", r.seed_attempts},
          {"success", {{"pre", to_json(r.pre_success_groups)}, {"post", to_json(r.post_success_groups)}}},
          {"pre_success", r.pre_success},
          {"post_success", r.post_success},
          {"pre_mean_d2", r.pre_mean_d2},
          {"post_mean_d2", r.post_mean_d2},
          {"d2_ratio", r.d2_ratio},
          {"tau", r.tau},
          {"pre_accuracy", r.pre_accuracy},
          {"post_accuracy", r.post_accuracy},
          {"tau_calibrated", r.tau_calibrated},
          {"pre_accuracy_calibrated", r.pre_accuracy_calibrated},
          {"post_accuracy_calibrated", r.post_accuracy_calibrated},
          {"mean_pair_error_px", r.mean_pair_error_px},
          {"off_object_fraction", r.off_object_fraction},
          {"no_improvement", r.no_improvement},
          {"refiner_iterations", its}};
}

inline std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "metric,value\n";
  os << "task," << r.task << "\nscorer," << r.scorer << "\nsampling," << r.sampling << "\nprompting," << r.prompting
     << "\nepisodes," << r.episodes << "\nfailed_episodes," << r.failed_episodes << "\nseed_attempts,"
     << r.seed_attempts << "\npre_success," << r.pre_success << "\npre_success_sd," << r.pre_success_groups.sd
     << "\npost_success," << r.post_success << "\npost_success_sd," << r.post_success_groups.sd << "\npre_mean_d2,"
     << r.pre_mean_d2 << "\npost_mean_d2," << r.post_mean_d2 << "\nd2_ratio," << r.d2_ratio << "\ntau," << r.tau
     << "\npre_accuracy," << r.pre_accuracy << "\npost_accuracy," << r.post_accuracy << "\ntau_calibrated,"
     << r.tau_calibrated << "\npre_accuracy_calibrated," << r.pre_accuracy_calibrated
     << "\npost_accuracy_calibrated," << r.post_accuracy_calibrated << "\nmean_pair_error_px,"
     << r.mean_pair_error_px << "\noff_object_fraction," << r.off_object_fraction << "\nno_improvement,"
     << (r.no_improvement ? "true" : "false") << "\n";
  return os.str();
}

inline std::string episodes_csv(const std::vector<EpisodeRecord>& recs) {
  std::ostringstream os;
  os.precision(17);
  os << "seed,failed,pre_success,post_success,pre_d2,post_d2,pair_error_px,error\n";
  for (const auto& e : recs) {
    std::string err = e.error;
    std::replace(err.begin(), err.end(), ',', ';');
    os << e.seed << ',' << e.failed << ',' << e.pre_success << ',' << e.post_success << ',' << e.pre_d2 << ','
       << e.post_d2 << ',' << e.pair_error_px << ',' << err << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- orchestration

template <typename F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::size_t workers = std::min<std::size_t>(n, threads > 0 ? std::size_t(threads) : hw);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct SeedPlan {
  std::vector<std::uint64_t> seeds;
  std::uint64_t attempts = 0;
};

/// The first `n` seeds from `base` whose perturbed run reaches the object.
inline SeedPlan episode_seeds(const sim::TaskSpec& task, sim::PerturbationSigma sigma, std::uint64_t base, int n,
                              int max_attempts) {
  SeedPlan plan;
  sim::ExecuteOptions exec;
  exec.render = false;
  while (int(plan.seeds.size()) < n) {
    if (plan.attempts >= std::uint64_t(max_attempts))
      fail(Errc::GenerationStalled, "too few contacting episodes after " + std::to_string(plan.attempts) + " seeds");
    std::uint64_t seed = base + plan.attempts++;
    std::mt19937_64 rng(seed);
    auto world = sim::make_world(task, sim::sample_object_pose(task, rng));
    auto ep = sim::execute_waypoints(world, sim::canonical_script(task, world.objects.front()), sigma, rng, exec);
    if (ep.contacted()) plan.seeds.push_back(seed);
  }
  return plan;
}

/// Training seeds recorded in a checkpoint, as [begin, end).
inline std::optional<std::pair<std::uint64_t, std::uint64_t>> training_seed_range(const policy::PolicyModel& m) {
  if (!m.meta.contains("dataset")) return std::nullopt;
  const auto& d = m.meta.at("dataset");
  auto b = d.at("seed_base").get<std::uint64_t>();
  return std::pair{b, b + d.at("attempts").get<std::uint64_t>()};
}

struct Evaluation {
  MetricsReport report;
  std::vector<EpisodeRecord> episodes;
  SeedPlan seeds;
};

inline Evaluation evaluate(const PipelineConfig& cfg, const policy::PolicyModel& model,
                           const std::filesystem::path& artifact_root = {}) {
  cfg.validate();
  std::optional<vlm::FixtureLog> fixture;
  if (cfg.scorer == ScorerMode::Fixture) {
    if (cfg.fixture.empty()) fail(Errc::ConfigError, "fixture mode needs a fixture path");
    fixture = vlm::FixtureLog::load(cfg.fixture);
  }
  EpisodeContext base;
  base.cfg = &cfg;
  base.task = sim::task_spec(cfg.task);
  base.model = &model;
  base.fixture = fixture ? &*fixture : nullptr;

  Evaluation ev;
  ev.seeds = episode_seeds(base.task, cfg.sigma, cfg.eval.seed_base, cfg.eval.episodes, cfg.eval.max_attempts);
  if (auto range = training_seed_range(model))
    for (auto s : ev.seeds.seeds)
      if (s >= range->first && s < range->second)
        fail(Errc::SeedOverlap, "evaluation seed " + std::to_string(s) + " was used for training");

  ev.episodes.resize(ev.seeds.seeds.size());
  parallel_for(ev.seeds.seeds.size(), cfg.scorer == ScorerMode::Remote ? 1 : cfg.threads, [&](std::size_t i) {
    EpisodeContext ctx = base;
    if (!artifact_root.empty() && cfg.artifacts.write && int(i) < cfg.artifacts.episodes)
      ctx.artifact_dir = artifact_root / ("episode_" + std::to_string(ev.seeds.seeds[i]));
    ev.episodes[i] = run_episode(ctx, ev.seeds.seeds[i]);
  });
  ev.report = summarize(ev.episodes, cfg, ev.seeds.attempts);

  if (!cfg.record.empty()) {
    vlm::FixtureLog log;
    for (const auto& e : ev.episodes) log.append_all(e.exchanges);
    log.save(cfg.record);
  }
  return ev;
}

inline nlohmann::json module_versions() {
  return {{"mask_geometry", kVersion}, {"candidate_refiner", kVersion}, {"vlm_interface", kVersion},
          {"goal_composer", kVersion}, {"diffusion_policy", kVersion},  {"planar_sim", kVersion},
          {"pipeline_cli", kVersion}};
}

inline void write_manifest(const std::filesystem::path& dir, const PipelineConfig& cfg, const std::string& verb,
                           nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json m = {{"verb", verb},
                      {"config", to_json(cfg)},
                      {"config_sha256", config_hash(cfg)},
                      {"modules", module_versions()},
                      {"scorer", name_of(cfg.scorer)}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline void write_report(const std::filesystem::path& dir, const Evaluation& ev) {
  detail::write_text(dir / "report.json", to_json(ev.report).dump(2) + "\n");
  detail::write_text(dir / "report.csv", to_csv(ev.report));
  detail::write_text(dir / "episodes.csv", episodes_csv(ev.episodes));
}

inline nlohmann::json seeds_json(const SeedPlan& s) {
  return {{"episode_seeds", s.seeds}, {"attempts", s.attempts}};
}

// ---------------------------------------------------------------- training

/// Dataset pairs, plus each pair reversed when relabelling is on, so goals
/// other than the reference grasp appear in training.
inline std::vector<TrainingPair> training_pairs(const sim::Dataset& ds, bool relabel) {
  auto pairs = ds.pairs();
  if (relabel) {
    const std::size_t n = pairs.size();
    for (std::size_t i = 0; i < n; ++i) pairs.push_back({pairs[i].o_star, pairs[i].a_star, pairs[i].o, pairs[i].a});
  }
  return pairs;
}

struct TrainOutcome {
  policy::PolicyModel model;
  std::vector<double> loss_curve;
  std::filesystem::path checkpoint;
};

/// Generates the dataset, trains, and writes checkpoint, loss curve, dataset
/// manifest and run manifest into `dir`.
inline TrainOutcome run_train(const PipelineConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  const auto task = sim::task_spec(cfg.task);
  sim::DatasetOptions opt;
  opt.n_pairs = cfg.data.pairs;
  opt.sigma = cfg.sigma;
  opt.render_images = cfg.train.network.mode == policy::EncoderMode::Image;
  auto ds = sim::generate_dataset(task, opt, cfg.data.seed_base);
  auto pairs = training_pairs(ds, cfg.data.goal_relabel);

  auto tc = cfg.train;
  tc.abort_checkpoint = dir / "aborted.ckpt";
  auto res = policy::train(pairs, tc);

  TrainOutcome out;
  out.model = std::move(res.model);
  out.model.meta["dataset"] = {{"task", task.name},
                               {"seed_base", ds.seed_base},
                               {"attempts", ds.attempts},
                               {"pairs", ds.records.size()},
                               {"goal_relabel", cfg.data.goal_relabel}};
  out.loss_curve = std::move(res.loss_curve);
  out.checkpoint = dir / "policy.ckpt";
  policy::save_checkpoint(out.checkpoint, out.model);
  detail::write_text(dir / "loss.csv", policy::loss_curve_csv(out.loss_curve));
  detail::write_text(dir / "dataset.jsonl", sim::dataset_manifest_jsonl(ds));
  write_manifest(dir, cfg, "train",
                 {{"dataset_seeds", {{"base", ds.seed_base}, {"attempts", ds.attempts}}},
                  {"checkpoint_sha256", [&] {
                     std::ifstream is(out.checkpoint, std::ios::binary);
                     std::string bytes((std::istreambuf_iterator<char>(is)), {});
                     return sha256_hex(bytes);
                   }()}});
  return out;
}

/// Loads cfg.checkpoint, or trains first when asked. Missing checkpoints are
/// configuration errors raised before any simulation.
inline policy::PolicyModel obtain_model(const PipelineConfig& cfg, const std::filesystem::path& dir) {
  if (cfg.train_first) return run_train(cfg, dir / "train").model;
  if (cfg.checkpoint.empty()) fail(Errc::ConfigError, "no checkpoint given (set one or train first)");
  return policy::load_checkpoint(cfg.checkpoint);
}

inline Evaluation run_correct(const PipelineConfig& cfg) {
  const auto& dir = cfg.output_dir;
  auto model = obtain_model(cfg, dir);
  auto ev = evaluate(cfg, model, dir / "artifacts");
  write_report(dir, ev);
  write_manifest(dir, cfg, "correct", {{"seeds", seeds_json(ev.seeds)}});
  return ev;
}

inline Evaluation run_eval(const policy::PolicyModel& model, const PipelineConfig& cfg) {
  auto ev = evaluate(cfg, model, cfg.output_dir / "artifacts");
  write_report(cfg.output_dir, ev);
  write_manifest(cfg.output_dir, cfg, "eval", {{"seeds", seeds_json(ev.seeds)}});
  return ev;
}

inline Evaluation run_eval(const std::filesystem::path& checkpoint, const PipelineConfig& cfg) {
  return run_eval(policy::load_checkpoint(checkpoint), cfg);
}

// ---------------------------------------------------------------- ablation

struct AblationArm {
  Sampling sampling;
  Prompting prompting;
  MetricsReport report;
};

struct AblationResult {
  std::vector<AblationArm> arms;
  std::vector<double> gaps;  ///< post-success differences between consecutive arms
  bool strictly_increasing = false;
};

inline std::string ablation_csv(const AblationResult& a) {
  std::ostringstream os;
  os.precision(17);
  os << "arm,sampling,prompting,episodes,post_success,post_success_sd,pre_success,mean_pair_error_px,off_object_"
        "fraction\n";
  for (std::size_t i = 0; i < a.arms.size(); ++i) {
    const auto& r = a.arms[i].report;
    os << i + 1 << ',' << r.sampling << ',' << r.prompting << ',' << r.episodes << ',' << r.post_success << ','
       << r.post_success_groups.sd << ',' << r.pre_success << ',' << r.mean_pair_error_px << ','
       << r.off_object_fraction << '\n';
  }
  return os.str();
}

/// Free/generic, free/grasp-guided and contour/grasp-guided detection on the
/// same seeds, each through the full correction pipeline.
inline AblationResult run_ablation(const PipelineConfig& cfg, const policy::PolicyModel& model) {
  if (cfg.scorer != ScorerMode::Oracle) fail(Errc::ConfigError, "the ablation runs with the oracle scorer");
  AblationResult out;
  const std::pair<Sampling, Prompting> arms[] = {{Sampling::Free, Prompting::Generic},
                                                 {Sampling::Free, Prompting::GraspGuided},
                                                 {Sampling::Contour, Prompting::GraspGuided}};
  for (auto [s, p] : arms) {
    PipelineConfig c = cfg;
    c.sampling = s;
    c.prompting = p;
    c.record.clear();
    auto dir = cfg.output_dir / (std::string(name_of(s)) + "_" + name_of(p));
    auto ev = evaluate(c, model, dir / "artifacts");
    write_report(dir, ev);
    out.arms.push_back({s, p, ev.report});
  }
  out.strictly_increasing = true;
  for (std::size_t i = 1; i < out.arms.size(); ++i) {
    double g = out.arms[i].report.post_success - out.arms[i - 1].report.post_success;
    out.gaps.push_back(g);
    out.strictly_increasing = out.strictly_increasing && g > 0;
  }
  nlohmann::json j = {{"gaps", out.gaps}, {"strictly_increasing", out.strictly_increasing}};
  for (const auto& a : out.arms) j["arms"].push_back(to_json(a.report));
  detail::write_text(cfg.output_dir / "ablation.json", j.dump(2) + "\n");
  detail::write_text(cfg.output_dir / "ablation.csv", ablation_csv(out));
  write_manifest(cfg.output_dir, cfg, "ablate");
  return out;
}

inline AblationResult run_ablation(const PipelineConfig& cfg) {
  return run_ablation(cfg, obtain_model(cfg, cfg.output_dir));
}

// ---------------------------------------------------------------- lambda sweep

struct SweepRow {
  double lambda = 0.0;
  bool completed = false;
  std::string error;
  double final_loss = 0.0;
  MetricsReport report;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda,completed,final_loss,post_success,post_success_sd,post_mean_d2,d2_ratio,post_accuracy\n";
  for (const auto& r : rows)
    os << r.lambda << ',' << r.completed << ',' << r.final_loss << ',' << r.report.post_success << ','
       << r.report.post_success_groups.sd << ',' << r.report.post_mean_d2 << ',' << r.report.d2_ratio << ','
       << r.report.post_accuracy << '\n';
  return os.str();
}

/// One training and evaluation per weighting; a NonFiniteLoss marks that row
/// incomplete and the sweep moves on.
inline std::vector<SweepRow> run_lambda_sweep(const PipelineConfig& cfg) {
  std::vector<SweepRow> rows;
  for (double lambda : cfg.lambda_sweep) {
    PipelineConfig c = cfg;
    c.train.lambda = lambda;
    std::ostringstream name;
    name << "lambda_" << lambda;
    c.output_dir = cfg.output_dir / name.str();
    SweepRow row;
    row.lambda = lambda;
    try {
      auto t = run_train(c, c.output_dir);
      row.final_loss = t.loss_curve.empty() ? 0.0 : t.loss_curve.back();
      row.report = run_eval(t.model, c).report;
      row.completed = true;
    } catch (const Error& e) {
      if (e.code() != Errc::NonFiniteLoss) throw;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"lambda", r.lambda}, {"completed", r.completed}, {"error", r.error}, {"final_loss", r.final_loss},
                 {"report", to_json(r.report)}});
  detail::write_text(cfg.output_dir / "lambda_sweep.json", j.dump(2) + "\n");
  detail::write_text(cfg.output_dir / "lambda_sweep.csv", sweep_csv(rows));
  write_manifest(cfg.output_dir, cfg, "train-sweep");
  return rows;
}

}  // namespace regrasp::pipeline
