#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reltr/eval.hpp"
#include "reltr/model.hpp"
#include "reltr/synth.hpp"
#include "reltr/train.hpp"

namespace reltr {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitNumerical = 2 };

/// Invalid configuration or flags; maps to kExitConfig.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct RunConfig {
  ModelConfig model;
  CorpusConfig corpus;
  TrainConfig train;  // carries the seed and Θ threshold
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "run";
  std::optional<std::filesystem::path> checkpoint;  // eval/infer input; default out_dir/checkpoint.bin
  std::optional<std::filesystem::path> resume;      // train: continue from this checkpoint
  std::optional<std::size_t> stop_after;            // train: halt at this step; the schedule still spans train.steps
  Split eval_split = Split::test;
  EvalMode mode = EvalMode::sgdet;
  bool corrupt_backward = false;  // grad-check negative control

  std::uint64_t seed() const { return train.seed; }
  std::filesystem::path corpus_path(Split split) const;
  std::filesystem::path checkpoint_path() const;
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Sections "model", "corpus", "train", "paths"; missing keys keep defaults,
/// unknown sections are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Writes train/val/test corpora and manifest.json into data_dir.
int cmd_gen_data(const RunConfig& cfg, std::ostream& out);
/// Trains on data_dir/train.jsonl; writes out_dir/checkpoint.bin and out_dir/train_log.jsonl.
int cmd_train(const RunConfig& cfg, std::ostream& out);
/// Writes out_dir/report_<mode>.json for the eval split.
int cmd_eval(const RunConfig& cfg, std::ostream& out);
/// Writes out_dir/predictions_<split>_<mode>.jsonl.
int cmd_infer(const RunConfig& cfg, std::ostream& out);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // elements re-differenced with a smaller step at a kink
  std::size_t non_finite = 0;
  double seconds = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-4;

/// Finite-difference check of total_loss over every model parameter on one
/// synthetic scene, with matching frozen at the unperturbed point.
GradCheckResult run_grad_check(const ModelConfig& model, const CorpusConfig& corpus, double iou_threshold,
                               std::uint64_t seed);
int cmd_grad_check(const RunConfig& cfg, std::ostream& out);

/// Head/body/tail groups from the training corpus when present, otherwise
/// from the configured rank order.
std::array<int, kPredicateClasses> predicate_groups(const RunConfig& cfg);

}  // namespace reltr
