#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "regrasp/planar_sim.hpp"

using namespace regrasp;
using namespace regrasp::sim;

namespace {

std::vector<Vec2> square(double half) { return {{-half, -half}, {half, -half}, {half, half}, {-half, half}}; }

std::vector<Vec2> regular_polygon(int n, double r) {
  std::vector<Vec2> out;
  for (int k = 0; k < n; ++k) out.push_back({r * std::cos(2 * kPi * k / n), r * std::sin(2 * kPi * k / n)});
  return out;
}

double no_contact_rate(double sigma_pos, int seeds) {
  auto task = task_spec(TaskId::Peg);
  ExecuteOptions opt;
  opt.render = false;
  int misses = 0;
  for (int s = 0; s < seeds; ++s) {
    auto run = run_paired(task, 50000 + std::uint64_t(s), {sigma_pos, 0.15}, opt);
    misses += !run.perturbed.contacted();
  }
  return double(misses) / seeds;
}

}  // namespace

TEST(ExecuteWaypoints, UnperturbedScriptReproducesReferenceGrasp) {
  for (auto id : {TaskId::Peg, TaskId::Shape, TaskId::Cup}) {
    auto task = task_spec(id);
    World w = make_world(task, {0.01, -0.02, 0.3});
    auto script = canonical_script(task, w.objects.front());
    std::mt19937_64 rng(1);
    auto ep = execute_waypoints(w, script, {0.0, 0.0}, rng);
    ASSERT_TRUE(ep.contacted()) << task.name;
    EXPECT_TRUE(ep.outcome.success) << task.name;
    EXPECT_EQ(ep.grasp_action.pose2().x, expert_grasp_pose(w.objects.front()).x);
    EXPECT_NEAR(ep.outcome.midpoint_error, 0.0, 1e-9) << task.name;
    EXPECT_NEAR(ep.outcome.axis_error, 0.0, 1e-9) << task.name;
    EXPECT_NEAR(ep.outcome.quality.margin, std::atan(task.mu), 1e-9) << task.name;
  }
}

TEST(ExecuteWaypoints, SameSeedSameBytes) {
  auto task = task_spec(TaskId::Peg);
  World w = make_world(task, {0.0, 0.01, -0.2});
  auto script = canonical_script(task, w.objects.front());
  std::mt19937_64 a(99), b(99);
  auto e1 = execute_waypoints(w, script, {0.02, 0.15}, a);
  auto e2 = execute_waypoints(w, script, {0.02, 0.15}, b);
  EXPECT_EQ(episode_bytes(e1), episode_bytes(e2));
}

TEST(ExecuteWaypoints, NoContactRateGrowsWithSigma) {
  double r1 = no_contact_rate(0.005, 500);
  double r2 = no_contact_rate(0.02, 500);
  double r3 = no_contact_rate(0.05, 500);
  EXPECT_LE(r1, r2);
  EXPECT_LT(r2, r3);
  EXPECT_GT(r3, 0.0);
}

TEST(ExecuteWaypoints, HistoryHoldsFrameWStepsBeforeGrasp) {
  auto task = task_spec(TaskId::Peg);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto run = run_paired(task, seed, {0.02, 0.15});
    if (!run.perturbed.contacted()) {
      EXPECT_THROW(run.perturbed.require_grasp_time(), Error);
      continue;
    }
    int tg = *run.perturbed.grasp_time;
    ASSERT_GE(tg, kHistoryWindow);
    EXPECT_EQ(run.perturbed.history_frame().t, tg - kHistoryWindow);
    EXPECT_EQ(run.perturbed.frames.size(), std::size_t(kHistoryWindow + 1));
  }
}

TEST(ExecuteWaypoints, GraspTimeSymmetricUnderJawRelabeling) {
  auto task = task_spec(TaskId::Peg);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::mt19937_64 rng(seed);
    World w = make_world(task, sample_object_pose(task, rng));
    auto script = canonical_script(task, w.objects.front());
    std::normal_distribution<double> n(0.0, 0.01);
    for (auto& p : script) {
      p.pose.x += n(rng);
      p.pose.y += n(rng);
    }
    auto flipped = script;
    for (auto& p : flipped) p.pose.heading = wrap_angle(p.pose.heading + kPi);
    std::mt19937_64 r1(0), r2(0);
    ExecuteOptions opt;
    opt.render = false;
    auto a = execute_waypoints(w, script, {0.0, 0.0}, r1, opt);
    auto b = execute_waypoints(w, flipped, {0.0, 0.0}, r2, opt);
    EXPECT_EQ(a.grasp_time, b.grasp_time) << "seed " << seed;
  }
}

TEST(GraspQuality, SquareOppositeMidpoints) {
  auto sq = square(0.02);
  auto q = grasp_quality(sq, {0.0, -0.02}, {0.0, 0.02}, 0.5);
  EXPECT_TRUE(q.antipodal);
  EXPECT_NEAR(q.margin, std::atan(0.5), 1e-12);
  EXPECT_TRUE(q.lift_success);
}

TEST(GraspQuality, SquareAdjacentSidesFail) {
  auto sq = square(0.02);
  auto q = grasp_quality(sq, {0.0, -0.02}, {0.02, 0.005}, 0.1);
  EXPECT_FALSE(q.antipodal);
  EXPECT_FALSE(q.lift_success);
}

TEST(GraspQuality, HugeFrictionAcceptsOpposingPairs) {
  auto sq = square(0.02);
  EXPECT_TRUE(grasp_quality(sq, {-0.015, -0.02}, {0.01, 0.02}, 1e6).antipodal);
  EXPECT_TRUE(grasp_quality(sq, {-0.02, 0.01}, {0.02, -0.018}, 1e6).antipodal);
}

TEST(GraspQuality, OffBoundaryThrows) {
  auto sq = square(0.02);
  try {
    grasp_quality(sq, {0.0, 0.0}, {0.0, 0.02}, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::OffBoundary);
  }
}

TEST(GraspQuality, WidthBeyondOpeningCannotLift) {
  auto sq = square(0.05);
  auto q = grasp_quality(sq, {0.0, -0.05}, {0.0, 0.05}, 0.5);
  EXPECT_TRUE(q.antipodal);
  EXPECT_FALSE(q.lift_success);
}

TEST(BruteForce, CircleIsDiametral) {
  auto circle = regular_polygon(64, 0.03);
  for (double mu : {0.1, 0.5, 1.0}) {
    const int n = 128;
    auto g = best_grasp_bruteforce(circle, mu, n);
    EXPECT_NEAR(g.quality.margin, std::atan(mu), 1e-9);
    double step = perimeter(circle) / n;
    EXPECT_NEAR(norm(g.first + g.second), 0.0, step);
  }
}

TEST(BruteForce, SliverTriangleHasNoStableGrasp) {
  std::vector<Vec2> tri{{0, 0}, {1, 0}, {0.5, 0.18}};
  try {
    best_grasp_bruteforce(tri, 0.05, 64);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NoStableGrasp);
  }
}

TEST(BruteForce, ResolutionStableOnSquare) {
  auto sq = square(0.02);
  for (int n : {8, 256}) {
    auto g = best_grasp_bruteforce(sq, 0.5, n);
    // opposite sides: the contacts' coordinates differ in sign on one axis at the boundary
    bool vertical = std::fabs(std::fabs(g.first.y) - 0.02) < 1e-12 && std::fabs(std::fabs(g.second.y) - 0.02) < 1e-12 &&
                    g.first.y * g.second.y < 0;
    bool horizontal = std::fabs(std::fabs(g.first.x) - 0.02) < 1e-12 &&
                      std::fabs(std::fabs(g.second.x) - 0.02) < 1e-12 && g.first.x * g.second.x < 0;
    EXPECT_TRUE(vertical || horizontal) << "n = " << n;
    EXPECT_NEAR(g.quality.margin, std::atan(0.5), 1e-9);
  }
}

TEST(Render, EmptyWorldIsPlate) {
  World w;
  auto obs = render_topdown(w);
  EXPECT_FALSE(obs.mask.any());
  EXPECT_EQ(obs.image, render_clean_plate(topdown_camera()));
}

TEST(Render, SquareAreaMatches) {
  World w;
  PolyObject o;
  o.vertices = square(0.02);
  o.pose = {0.013, -0.007, 0.4};
  w.objects.push_back(o);
  auto obs = render_topdown(w);
  double expected = 0.04 * 0.04 * 400.0 * 400.0;
  EXPECT_NEAR(double(obs.mask.count()), expected, 0.02 * expected);
  EXPECT_EQ(render_topdown(w).image, obs.image);
}

TEST(Render, ContourRecoversPolygonWithinTwoPixels) {
  for (auto id : {TaskId::Peg, TaskId::Shape, TaskId::Cup}) {
    auto task = task_spec(id);
    World w = make_world(task, {0.02, -0.01, 0.35});
    auto obs = render_topdown(w);
    auto contour = mask::extract_contour(obs.mask);
    auto poly = w.objects.front().world_vertices();
    std::vector<Vec2> poly_px;
    for (Vec2 v : poly) poly_px.push_back(obs.camera.to_px(v));
    double h = 0.0;
    for (Vec2 p : contour.points()) h = std::max(h, distance_to_boundary(poly_px, p));
    for (Vec2 v : poly_px) h = std::max(h, distance_to_boundary(contour.points(), v));
    EXPECT_LE(h, 2.0) << task.name;
  }
}

TEST(Dataset, PegTwoHundredPairs) {
  auto task = task_spec(TaskId::Peg);
  DatasetOptions opt;
  opt.render_images = false;
  auto ds = generate_dataset(task, opt, 1000);
  ASSERT_EQ(ds.records.size(), 200u);
  for (const auto& r : ds.records) {
    World w = make_world(task, r.object_pose);
    auto expert = Action8::planar(expert_grasp_pose(w.objects.front()), w.gripper.z, 1);
    EXPECT_EQ(r.pair.a_star, expert);
    EXPECT_TRUE(r.pair.a_star.valid());
  }
}

TEST(Dataset, ZeroSigmaGivesExpertActions) {
  auto task = task_spec(TaskId::Peg);
  DatasetOptions opt;
  opt.n_pairs = 50;
  opt.sigma = {0.0, 0.0};
  opt.render_images = false;
  auto ds = generate_dataset(task, opt, 7);
  EXPECT_EQ(ds.attempts, 50u);
  for (const auto& r : ds.records) {
    EXPECT_EQ(r.pair.a, r.pair.a_star);
    EXPECT_EQ(action_distance_sq(r.pair.a, r.pair.a_star), 0.0);
  }
}

TEST(Dataset, ActionDistanceGrowsWithSigma) {
  auto task = task_spec(TaskId::Peg);
  double prev = -1.0;
  for (double s : {0.005, 0.01, 0.02}) {
    DatasetOptions opt;
    opt.n_pairs = 150;
    opt.sigma = {s, 0.15};
    opt.render_images = false;
    auto ds = generate_dataset(task, opt, 300);
    double mean = 0.0;
    for (const auto& r : ds.records) mean += action_distance_sq(r.pair.a, r.pair.a_star);
    mean /= double(ds.records.size());
    EXPECT_GT(mean, prev);
    prev = mean;
  }
}

TEST(Dataset, StallsWhenNothingIsReachable) {
  auto task = task_spec(TaskId::Peg);
  DatasetOptions opt;
  opt.n_pairs = 5;
  opt.sigma = {5.0, 0.0};
  opt.render_images = false;
  opt.stall_attempts = 200;
  try {
    generate_dataset(task, opt, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::GenerationStalled);
  }
}

TEST(PolicyView, ReferenceGraspCentresObject) {
  auto task = task_spec(TaskId::Peg);
  World w = make_world(task, {0.01, 0.02, -0.3});
  GripperState g{expert_grasp_pose(w.objects.front()), 0.08};
  auto o = policy_observation(w, g);
  EXPECT_NEAR(o.state[0], 0.0, 1e-12);
  EXPECT_NEAR(o.state[1], 0.0, 1e-12);
  // the peg's long axis is perpendicular to the closing axis
  EXPECT_NEAR(o.state[2], 0.0, 1e-12);
  EXPECT_NEAR(std::fabs(o.state[3]), 1.0, 1e-12);
  EXPECT_EQ(o.image.width, 128);
}
