// regrasp: grasp correction runs, ablations, training and evaluation.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "regrasp/pipeline.hpp"

namespace {

using namespace regrasp;
namespace fs = std::filesystem;

struct Overrides {
  std::string config;
  std::string task, scorer, sampling, prompting, fixture, record, checkpoint, out;
  int episodes = 0;
  int pairs = 0;
  int threads = -1;
  std::int64_t steps = 0;
  bool train_first = false;
  bool no_artifacts = false;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("-c,--config", o.config, "JSON config file");
  sub->add_option("--task", o.task, "peg | shape | cup");
  sub->add_option("--scorer", o.scorer, "oracle | remote | fixture");
  sub->add_option("--sampling", o.sampling, "contour | free");
  sub->add_option("--prompting", o.prompting, "grasp_guided | generic");
  sub->add_option("--fixture", o.fixture, "scorer fixture to replay");
  sub->add_option("--record", o.record, "write scorer exchanges to this fixture file");
  sub->add_option("--checkpoint", o.checkpoint, "policy checkpoint");
  sub->add_option("-o,--out", o.out, "output directory");
  sub->add_option("-n,--episodes", o.episodes, "evaluation episodes");
  sub->add_option("--pairs", o.pairs, "training pairs");
  sub->add_option("--steps", o.steps, "training steps");
  sub->add_option("-j,--threads", o.threads, "worker threads (0 = all cores)");
  sub->add_flag("--train-first", o.train_first, "train a policy before evaluating");
  sub->add_flag("--no-artifacts", o.no_artifacts, "skip per-episode images and traces");
}

pipeline::PipelineConfig resolve(const Overrides& o) {
  auto cfg = o.config.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(o.config);
  if (!o.task.empty()) cfg.task = sim::task_from_name(o.task);
  if (!o.scorer.empty()) cfg.scorer = pipeline::scorer_mode_from_name(o.scorer);
  if (!o.sampling.empty()) cfg.sampling = pipeline::sampling_from_name(o.sampling);
  if (!o.prompting.empty()) cfg.prompting = pipeline::prompting_from_name(o.prompting);
  if (!o.fixture.empty()) cfg.fixture = o.fixture;
  if (!o.record.empty()) cfg.record = o.record;
  if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.episodes > 0) cfg.eval.episodes = o.episodes;
  if (o.pairs > 0) cfg.data.pairs = o.pairs;
  if (o.steps > 0) cfg.train.steps = int(o.steps);
  if (o.threads >= 0) cfg.threads = o.threads;
  if (o.train_first) cfg.train_first = true;
  if (o.no_artifacts) cfg.artifacts.write = false;
  if (cfg.scorer == pipeline::ScorerMode::Fixture && !fs::exists(cfg.fixture))
    fail(Errc::ConfigError, "fixture " + cfg.fixture.string() + " does not exist");
  if (!cfg.train_first && !cfg.checkpoint.empty() && !fs::exists(cfg.checkpoint))
    fail(Errc::ConfigError, "checkpoint " + cfg.checkpoint.string() + " does not exist");
  cfg.validate();
  return cfg;
}

void print(const pipeline::MetricsReport& r) {
  std::printf("%s  scorer=%s sampling=%s prompting=%s episodes=%d failed=%d\n", r.task.c_str(), r.scorer.c_str(),
              r.sampling.c_str(), r.prompting.c_str(), r.episodes, r.failed_episodes);
  std::printf("  success     pre %.3f +- %.3f   post %.3f +- %.3f\n", r.pre_success_groups.mean,
              r.pre_success_groups.sd, r.post_success_groups.mean, r.post_success_groups.sd);
  std::printf("  mean d2     pre %.4f   post %.4f   ratio %.3f%s\n", r.pre_mean_d2, r.post_mean_d2, r.d2_ratio,
              r.no_improvement ? "   NO IMPROVEMENT" : "");
  std::printf("  acc@%.2f    pre %.3f   post %.3f\n", r.tau, r.pre_accuracy, r.post_accuracy);
  std::printf("  acc@%.4f  pre %.3f   post %.3f\n", r.tau_calibrated, r.pre_accuracy_calibrated,
              r.post_accuracy_calibrated);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) fail(Errc::ConfigError, "cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grasp correction with contour-refined contacts and goal-conditioned diffusion"};
  app.require_subcommand(1);

  Overrides o;
  auto* correct = app.add_subcommand("correct", "run the correction pipeline over evaluation episodes");
  auto* ablate = app.add_subcommand("ablate", "compare sampling and prompting arms on shared seeds");
  auto* train = app.add_subcommand("train", "generate a dataset and train the policy");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out seeds");
  auto* gen = app.add_subcommand("gen-data", "generate a paired dataset manifest");
  auto* replay = app.add_subcommand("replay", "rerun from a scorer fixture");
  for (auto* s : {correct, ablate, train, eval, gen, replay}) add_common(s, o);

  bool sweep = false;
  train->add_flag("--sweep", sweep, "train and evaluate each weighting in lambda_sweep");
  std::string expect;
  replay->add_option("--expect", expect, "report.json that the replay must reproduce byte for byte");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto cfg = resolve(o);
    if (*correct) {
      print(pipeline::run_correct(cfg).report);
    } else if (*ablate) {
      auto res = pipeline::run_ablation(cfg);
      for (const auto& a : res.arms) print(a.report);
      std::printf("gaps:");
      for (double g : res.gaps) std::printf(" %+.1f pp", 100 * g);
      std::printf("  %s\n", res.strictly_increasing ? "increasing" : "NOT increasing");
    } else if (*train) {
      if (sweep) {
        for (const auto& row : pipeline::run_lambda_sweep(cfg)) {
          if (row.completed)
            std::printf("lambda %.2f  final loss %.5f  post success %.3f  ratio %.3f\n", row.lambda, row.final_loss,
                        row.report.post_success, row.report.d2_ratio);
          else
            std::printf("lambda %.2f  incomplete: %s\n", row.lambda, row.error.c_str());
        }
      } else {
        auto t = pipeline::run_train(cfg, cfg.output_dir);
        std::printf("checkpoint %s  final loss %.5f\n", t.checkpoint.string().c_str(),
                    t.loss_curve.empty() ? 0.0 : t.loss_curve.back());
      }
    } else if (*eval) {
      if (cfg.checkpoint.empty()) fail(Errc::ConfigError, "eval needs --checkpoint");
      print(pipeline::run_eval(cfg.checkpoint, cfg).report);
    } else if (*gen) {
      sim::DatasetOptions opt;
      opt.n_pairs = cfg.data.pairs;
      opt.sigma = cfg.sigma;
      opt.render_images = false;
      auto ds = sim::generate_dataset(sim::task_spec(cfg.task), opt, cfg.data.seed_base);
      pipeline::detail::write_text(cfg.output_dir / "dataset.jsonl", sim::dataset_manifest_jsonl(ds));
      pipeline::write_manifest(cfg.output_dir, cfg, "gen-data",
                               {{"dataset_seeds", {{"base", ds.seed_base}, {"attempts", ds.attempts}}}});
      std::printf("%zu pairs from %llu attempts\n", ds.records.size(), (unsigned long long)ds.attempts);
    } else if (*replay) {
      cfg.scorer = pipeline::ScorerMode::Fixture;
      if (cfg.fixture.empty()) fail(Errc::ConfigError, "replay needs --fixture");
      auto ev = pipeline::run_correct(cfg);
      print(ev.report);
      if (!expect.empty()) {
        if (slurp(expect) != slurp(cfg.output_dir / "report.json")) {
          std::fprintf(stderr, "replayed report differs from %s\n", expect.c_str());
          return 3;
        }
        std::printf("report matches %s\n", expect.c_str());
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == Errc::ConfigError ? 2 : 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
