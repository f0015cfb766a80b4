// Train the correction policy with default settings and run it over a handful
// of episodes. Training takes about a minute on one core.
//
//   train_and_correct [out_dir]

#include <cstdio>

#include "regrasp/pipeline.hpp"

using namespace regrasp;

int main(int argc, char** argv) {
  pipeline::PipelineConfig cfg;
  cfg.output_dir = argc > 1 ? argv[1] : "train_and_correct";
  cfg.eval.episodes = 30;
  cfg.artifacts.episodes = 2;

  try {
    auto trained = pipeline::run_train(cfg, cfg.output_dir / "train");
    auto ev = pipeline::run_eval(trained.model, cfg);
    const auto& r = ev.report;
    std::printf("success %.2f -> %.2f\nmean d2 %.3f -> %.3f\nreport in %s\n", r.pre_success, r.post_success,
                r.pre_mean_d2, r.post_mean_d2, cfg.output_dir.string().c_str());
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
