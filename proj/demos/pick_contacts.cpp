// Pick a pair of contacts on a rendered peg with a noisy oracle standing in
// for the vision-language scorer, and save each round's annotated view.
//
//   pick_contacts [out_dir]

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "regrasp/regrasp.hpp"

using namespace regrasp;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "pick_contacts";
  std::filesystem::create_directories(out);

  auto world = sim::make_world(sim::task_spec(sim::TaskId::Peg), {0.01, -0.005, 0.4});
  auto obs = sim::render_topdown(world);
  auto contour = mask::extract_contour(obs.mask);
  const double L = contour.length();

  // Points half the outline apart.
  std::vector<double> targets{0.25 * L, 0.75 * L};
  auto oracle = refine::OracleScorer::on_contour(contour, targets, 1.0, 7);
  std::mt19937_64 rng(7);
  GraspDescription desc{"the upper long edge", "the lower long edge"};
  auto sel = refine::select_grasp_pair(obs.image, contour, oracle, desc, refine::RefinementConfig{}, rng);

  for (const auto* trace : {&sel.left, &sel.right}) {
    const std::string role = trace == &sel.left ? "left" : "right";
    std::optional<Vec2> marker;
    if (trace == &sel.right) marker = sel.pair.left;
    for (const auto& it : trace->iterations) {
      auto img = vlm::annotate(obs.image, it.candidates, it.verdict.selected_ids, marker);
      write_png(out / (role + "_iter" + std::to_string(it.iteration) + ".png"), img);
    }
  }
  std::printf("left  (%.2f, %.2f) px\nright (%.2f, %.2f) px\nyaw   %.3f rad\n", sel.pair.left.x, sel.pair.left.y,
              sel.pair.right.x, sel.pair.right.y, sel.pair.yaw);
}
