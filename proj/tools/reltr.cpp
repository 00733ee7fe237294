// Command-line entry points: gen-data, train, eval, infer, grad-check.

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "reltr/cli.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::vector<std::string> disable;
  std::optional<double> iou_threshold;
  std::optional<std::size_t> triplet_queries;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  std::optional<std::string> split;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> stop_after;
  bool corrupt_backward = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration");
  cmd->add_option("--seed", f.seed, "Run seed (corpus seed for gen-data)");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--data", f.data, "Corpus directory");
  cmd->add_option("--disable", f.disable, "Ablate modules")
      ->check(CLI::IsMember({"csa", "dva", "dea", "mask"}))
      ->expected(1, -1);
  cmd->add_option("--iou-threshold", f.iou_threshold, "Triplet assignment IoU threshold T in (0, 1]");
  cmd->add_option("--num-triplet-queries", f.triplet_queries, "Number of triplet query slots");
}

reltr::RunConfig resolve(const Flags& f, bool seed_is_corpus) {
  reltr::RunConfig cfg = f.config.empty() ? reltr::RunConfig{} : reltr::load_run_config(f.config);
  if (f.seed) (seed_is_corpus ? cfg.corpus.seed : cfg.train.seed) = *f.seed;
  if (f.out) cfg.out_dir = *f.out;
  if (f.data) cfg.data_dir = *f.data;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  if (f.resume) cfg.resume = *f.resume;
  if (f.iou_threshold) cfg.train.iou_threshold = *f.iou_threshold;
  if (f.triplet_queries) cfg.model.triplet_queries = *f.triplet_queries;
  if (f.steps) cfg.train.steps = *f.steps;
  cfg.stop_after = f.stop_after;
  for (const auto& m : f.disable) {
    if (m == "csa") cfg.model.ablation.csa = false;
    if (m == "dva") cfg.model.ablation.dva = false;
    if (m == "dea") cfg.model.ablation.dea = false;
    if (m == "mask") cfg.model.ablation.mask = false;
  }
  try {
    if (f.mode) cfg.mode = reltr::parse_eval_mode(*f.mode);
  } catch (const std::invalid_argument& e) {
    throw reltr::ConfigError(e.what());
  }
  if (f.split) {
    const std::map<std::string, reltr::Split> splits = {
        {"train", reltr::Split::train}, {"val", reltr::Split::val}, {"test", reltr::Split::test}};
    if (!splits.count(*f.split)) throw reltr::ConfigError("unknown split '" + *f.split + "'");
    cfg.eval_split = splits.at(*f.split);
  }
  cfg.corrupt_backward = f.corrupt_backward;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RelTR desk-scale scene graph generation"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-data", "Generate train/val/test synthetic corpora");
  add_common(gen, f);

  auto* train = app.add_subcommand("train", "Train a model on the train split");
  add_common(train, f);
  train->add_option("--resume", f.resume, "Continue from a checkpoint");
  train->add_option("--steps", f.steps, "Total optimizer steps");
  train->add_option("--stop-after", f.stop_after, "Halt once this many steps are done (checkpoint kept for --resume)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  auto* infer = app.add_subcommand("infer", "Dump ranked predictions for a split");
  for (auto* cmd : {eval, infer}) {
    add_common(cmd, f);
    cmd->add_option("--mode", f.mode, "sgdet, sgcls or predcls");
    cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
    cmd->add_option("--split", f.split, "train, val or test");
  }

  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient check of the full loss");
  add_common(grad, f);
  grad->add_flag("--corrupt-backward", f.corrupt_backward, "Corrupt the softmax backward rule")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? reltr::kExitOk : reltr::kExitConfig;
  }

  try {
    if (gen->parsed()) return reltr::cmd_gen_data(resolve(f, true), std::cout);
    if (train->parsed()) return reltr::cmd_train(resolve(f, false), std::cout);
    if (eval->parsed()) return reltr::cmd_eval(resolve(f, false), std::cout);
    if (infer->parsed()) return reltr::cmd_infer(resolve(f, false), std::cout);
    if (grad->parsed()) return reltr::cmd_grad_check(resolve(f, false), std::cout);
  } catch (const reltr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return reltr::kExitConfig;
  } catch (const reltr::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return reltr::kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return reltr::kExitConfig;
  }
  return reltr::kExitOk;
}
