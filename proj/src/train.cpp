#include "reltr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace reltr {

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("optimizer config: " + what); };
  if (!(lr > 0.0) || !(stem_lr >= 0.0)) fail("step sizes must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (decay_fraction < 0.0 || decay_fraction > 1.0) fail("decay_fraction must be in [0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"lr", c.lr},
       {"stem_lr", c.stem_lr},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"decay_fraction", c.decay_fraction},
       {"decay_factor", c.decay_factor},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  const OptimizerConfig d;
  c.lr = j.value("lr", d.lr);
  c.stem_lr = j.value("stem_lr", d.stem_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.decay_fraction = j.value("decay_fraction", d.decay_fraction);
  c.decay_factor = j.value("decay_factor", d.decay_factor);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

void TrainConfig::validate() const {
  optimizer.validate();
  if (steps == 0) throw std::invalid_argument("train config: steps must be positive");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw std::invalid_argument("train config: iou_threshold must be in (0, 1]");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"optimizer", c.optimizer},
       {"steps", c.steps},
       {"iou_threshold", c.iou_threshold},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.steps = j.value("steps", d.steps);
  c.iou_threshold = j.value("iou_threshold", d.iou_threshold);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (Tensor& p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

// ---- AdamW -------------------------------------------------------------------

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, const OptimizerConfig& config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
}

double AdamW::group_lr(const std::string& name) const {
  return name.rfind("stem.", 0) == 0 ? config_.stem_lr : config_.lr;
}

void AdamW::step(double lr_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    const double lr = group_lr(name) * lr_scale;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
      w[k] -= lr * config_.weight_decay * w[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

void AdamW::save_state(Checkpoint& ckpt) const {
  ckpt.metadata["adam_steps"] = t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    ckpt.arrays.push_back({"adam.m/" + name, p.shape(), m_[i]});
    ckpt.arrays.push_back({"adam.v/" + name, p.shape(), v_[i]});
  }
}

void AdamW::load_state(const Checkpoint& ckpt) {
  t_ = ckpt.metadata.at("adam_steps").get<std::uint64_t>();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    for (auto [prefix, dest] : {std::pair{"adam.m/", &m_[i]}, std::pair{"adam.v/", &v_[i]}}) {
      const NamedArray* a = ckpt.find(prefix + name);
      if (!a || a->shape != p.shape())
        throw std::runtime_error("checkpoint is missing optimizer state '" + std::string(prefix) + name + "'");
      *dest = a->data;
    }
  }
}

// ---- schedule ----------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(a) ^ b);
}

std::size_t scene_for_step(std::uint64_t seed, std::size_t step, std::size_t scene_count) {
  if (scene_count == 0) throw std::invalid_argument("scene_for_step: empty corpus");
  std::vector<std::size_t> order(scene_count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, step / scene_count));
  std::shuffle(order.begin(), order.end(), rng);
  return order[step % scene_count];
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  const LossComponents& c = r.components;
  j = {{"step", r.step},
       {"scene", r.scene},
       {"total", r.total},
       {"entity_cls", c.entity_cls},
       {"entity_box", c.entity_box},
       {"sub_cls", c.sub_cls},
       {"sub_box", c.sub_box},
       {"obj_cls", c.obj_cls},
       {"obj_box", c.obj_box},
       {"prd_cls", c.prd_cls},
       {"grad_norm", r.grad_norm},
       {"lr_scale", r.lr_scale}};
}

// ---- trainer -----------------------------------------------------------------

Trainer::Trainer(RelTR& model, const std::vector<GroundTruthScene>& scenes, const TrainConfig& config)
    : model_(model), scenes_(scenes), config_(config), optimizer_(model.named_parameters(), config.optimizer) {
  config_.validate();
  if (scenes_.empty()) throw std::invalid_argument("Trainer: empty training corpus");
}

double Trainer::lr_scale(std::size_t step) const {
  const auto boundary = static_cast<std::size_t>(std::floor(config_.optimizer.decay_fraction * config_.steps));
  return step < boundary ? 1.0 : config_.optimizer.decay_factor;
}

StepRecord Trainer::step() {
  StepRecord rec;
  rec.step = step_;
  rec.scene = scene_for_step(config_.seed, step_, scenes_.size());
  rec.lr_scale = lr_scale(step_);
  const GroundTruthScene& scene = scenes_[rec.scene];

  std::mt19937_64 rng(mix_seed(config_.seed ^ 0xD50Dull, step_));
  const ForwardContext ctx{true, &rng};
  Tape tape;
  LossBreakdown loss;
  {
    auto recording = tape.record();
    loss = total_loss(model_.forward(scene.image, ctx), scene, config_.iou_threshold);
  }
  rec.components = loss.summed;
  rec.total = loss.total;
  auto fail = [&](const std::string& what) {
    nlohmann::json j = rec;
    throw NumericalError(what + " at step " + std::to_string(step_) + ": " + j.dump());
  };
  if (!std::isfinite(loss.total)) fail("non-finite loss");

  model_.zero_grad();
  tape.backward(loss.total_tensor);
  std::vector<Tensor> params;
  model_.visit_parameters([&](const std::string&, Tensor& t) { params.push_back(t); });
  rec.grad_norm = clip_grad_norm(params, config_.optimizer.clip_norm);
  if (!std::isfinite(rec.grad_norm)) fail("non-finite gradient");

  optimizer_.step(rec.lr_scale);
  ++step_;
  return rec;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.metadata["model"] = model_.config();
  ckpt.metadata["train"] = config_;
  ckpt.metadata["step"] = step_;
  ckpt.metadata["seed"] = config_.seed;
  save_parameters(model_, ckpt);
  optimizer_.save_state(ckpt);
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  load_parameters(model_, ckpt);
  optimizer_.load_state(ckpt);
  step_ = ckpt.metadata.at("step").get<std::size_t>();
}

// ---- persistence -------------------------------------------------------------

void save_parameters(RelTR& model, Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("model")) ckpt.metadata["model"] = model.config();
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    ckpt.arrays.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  });
}

void load_parameters(RelTR& model, const Checkpoint& ckpt) {
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    const NamedArray* a = ckpt.find(name);
    if (!a) throw std::runtime_error("checkpoint has no parameter '" + name + "'");
    if (a->shape != t.shape())
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_string(a->shape) +
                               ", model expects " + shape_string(t.shape()));
    std::copy(a->data.begin(), a->data.end(), t.mutable_data().begin());
  });
}

ModelConfig checkpoint_model_config(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("model")) throw std::runtime_error("checkpoint has no model config");
  return ckpt.metadata.at("model").get<ModelConfig>();
}

// ---- inference ---------------------------------------------------------------

std::vector<TripletPrediction> predict(const RelTR& model, const Image& image) {
  const ModelOutput out = model.forward(image, ForwardContext{});
  return extract_triplets(out.triplets.back());
}

EvalScene evaluate_scene(const RelTR& model, const GroundTruthScene& scene, EvalMode mode) {
  EvalScene s;
  s.gts = gt_triplets(scene);
  auto preds = predict(model, scene.image);
  if (mode != EvalMode::sgdet) preds = substitute_ground_truth(preds, s.gts, mode);
  s.ranked = postprocess(preds);
  return s;
}

MetricReport evaluate(const RelTR& model, const std::vector<GroundTruthScene>& scenes, EvalMode mode,
                      std::span<const TripletType> holdout, std::span<const int> groups) {
  std::vector<EvalScene> evals;
  evals.reserve(scenes.size());
  for (const auto& scene : scenes) evals.push_back(evaluate_scene(model, scene, mode));
  return compute_metrics(evals, holdout, groups, model.config().predicate_classes);
}

}  // namespace reltr
