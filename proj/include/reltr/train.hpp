#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reltr/checkpoint.hpp"
#include "reltr/eval.hpp"
#include "reltr/loss.hpp"
#include "reltr/model.hpp"
#include "reltr/scene.hpp"

namespace reltr {

struct OptimizerConfig {
  double lr = 1e-4;        // transformer, queries and heads
  double stem_lr = 1e-5;   // convolutional stem
  double weight_decay = 1e-4;
  double clip_norm = 0.1;
  double decay_fraction = 2.0 / 3.0;  // step fraction after which rates drop
  double decay_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t steps = 2000;
  double iou_threshold = 0.7;  // Θ relaxation threshold T
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Thrown when the loss or a gradient stops being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scales every gradient so the global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

/// Adam with decoupled weight decay; per-parameter step size chosen by group.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, const OptimizerConfig& config);

  /// One update with rates multiplied by lr_scale.
  void step(double lr_scale);
  std::uint64_t steps_taken() const { return t_; }
  double group_lr(const std::string& name) const;

  void save_state(Checkpoint& ckpt) const;
  void load_state(const Checkpoint& ckpt);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  OptimizerConfig config_;
  std::uint64_t t_ = 0;
};

/// SplitMix64 finalizer over a pair of values.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Index of the scene used at a given step: a fresh permutation per pass,
/// seeded from (seed, pass).
std::size_t scene_for_step(std::uint64_t seed, std::size_t step, std::size_t scene_count);

struct StepRecord {
  std::size_t step = 0;
  std::size_t scene = 0;
  LossComponents components;
  double total = 0.0;
  double grad_norm = 0.0;
  double lr_scale = 1.0;
};

void to_json(nlohmann::json& j, const StepRecord& r);

class Trainer {
 public:
  Trainer(RelTR& model, const std::vector<GroundTruthScene>& scenes, const TrainConfig& config);

  /// Runs the next step. Throws NumericalError (leaving parameters untouched)
  /// when the loss or gradient norm is not finite.
  StepRecord step();
  std::size_t next_step() const { return step_; }
  double lr_scale(std::size_t step) const;

  Checkpoint checkpoint() const;
  /// Restores parameters, optimizer moments and the step counter.
  void restore(const Checkpoint& ckpt);

 private:
  RelTR& model_;
  const std::vector<GroundTruthScene>& scenes_;
  TrainConfig config_;
  AdamW optimizer_;
  std::size_t step_ = 0;
};

// ---- model persistence ---------------------------------------------------------

void save_parameters(RelTR& model, Checkpoint& ckpt);
/// Copies named arrays into the model; every parameter must be present with
/// a matching shape.
void load_parameters(RelTR& model, const Checkpoint& ckpt);
ModelConfig checkpoint_model_config(const Checkpoint& ckpt);

// ---- inference -----------------------------------------------------------------

/// Final-layer triplet predictions, inference mode, no gradient tracking.
std::vector<TripletPrediction> predict(const RelTR& model, const Image& image);

/// Forward, optional ground-truth substitution, and postprocessing.
EvalScene evaluate_scene(const RelTR& model, const GroundTruthScene& scene, EvalMode mode);
MetricReport evaluate(const RelTR& model, const std::vector<GroundTruthScene>& scenes, EvalMode mode,
                      std::span<const TripletType> holdout, std::span<const int> groups);

}  // namespace reltr
