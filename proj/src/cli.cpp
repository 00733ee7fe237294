#include "reltr/cli.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <set>

#include <nlohmann/json.hpp>

#include "reltr/checkpoint.hpp"
#include "reltr/loss.hpp"

namespace reltr {

// ---- configuration -------------------------------------------------------------

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  nlohmann::json holdout = nlohmann::json::array();
  for (const auto& t : c.holdout) holdout.push_back({t.sub_class, t.predicate, t.obj_class});
  j = {{"image_size", c.image_size},     {"train_scenes", c.train_scenes}, {"val_scenes", c.val_scenes},
       {"test_scenes", c.test_scenes},   {"min_entities", c.min_entities}, {"max_entities", c.max_entities},
       {"max_triplets", c.max_triplets}, {"decay", c.decay},               {"holdout", holdout},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  const CorpusConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.train_scenes = j.value("train_scenes", d.train_scenes);
  c.val_scenes = j.value("val_scenes", d.val_scenes);
  c.test_scenes = j.value("test_scenes", d.test_scenes);
  c.min_entities = j.value("min_entities", d.min_entities);
  c.max_entities = j.value("max_entities", d.max_entities);
  c.max_triplets = j.value("max_triplets", d.max_triplets);
  c.decay = j.value("decay", d.decay);
  c.seed = j.value("seed", d.seed);
  if (j.contains("holdout")) {
    c.holdout.clear();
    for (const auto& t : j.at("holdout")) {
      if (t.size() != 3) throw std::invalid_argument("holdout entries are [sub_class, predicate, obj_class]");
      c.holdout.push_back({t[0].get<std::size_t>(), t[1].get<std::size_t>(), t[2].get<std::size_t>()});
    }
  }
}

std::filesystem::path RunConfig::corpus_path(Split split) const {
  return data_dir / (std::string(split_name(split)) + ".jsonl");
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint ? *checkpoint : out_dir / "checkpoint.bin";
}

void RunConfig::validate() const {
  try {
    model.validate();
    corpus.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.image_height != corpus.image_size || model.image_width != corpus.image_size)
    throw ConfigError("model image extents " + std::to_string(model.image_height) + "x" +
                      std::to_string(model.image_width) + " do not match corpus image_size " +
                      std::to_string(corpus.image_size));
  if (model.entity_classes != kEntityClasses || model.predicate_classes != kPredicateClasses)
    throw ConfigError("model class counts must match the synthetic corpus (" + std::to_string(kEntityClasses) +
                      " entities, " + std::to_string(kPredicateClasses) + " predicates)");
  if (model.triplet_queries < corpus.max_triplets)
    throw ConfigError("triplet_queries (" + std::to_string(model.triplet_queries) + ") must be >= max_triplets (" +
                      std::to_string(corpus.max_triplets) + ")");
  if (model.entity_queries < corpus.max_entities)
    throw ConfigError("entity_queries (" + std::to_string(model.entity_queries) + ") must be >= max_entities (" +
                      std::to_string(corpus.max_entities) + ")");
  std::set<std::filesystem::path> paths;
  for (const auto& p : {std::optional(data_dir), std::optional(out_dir), checkpoint, resume})
    if (p && !paths.insert(std::filesystem::weakly_canonical(*p)).second)
      throw ConfigError("configured paths must be distinct: " + p->string() + " repeats");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"corpus", c.corpus},
       {"train", c.train},
       {"paths", {{"data_dir", c.data_dir.string()}, {"out_dir", c.out_dir.string()}}}};
  if (c.checkpoint) j["paths"]["checkpoint"] = c.checkpoint->string();
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "model") c.model = value.get<ModelConfig>();
      else if (key == "corpus") c.corpus = value.get<CorpusConfig>();
      else if (key == "train") c.train = value.get<TrainConfig>();
      else if (key == "paths") {
        if (value.contains("data_dir")) c.data_dir = value.at("data_dir").get<std::string>();
        if (value.contains("out_dir")) c.out_dir = value.at("out_dir").get<std::string>();
        if (value.contains("checkpoint")) c.checkpoint = value.at("checkpoint").get<std::string>();
      } else
        throw ConfigError("unknown config section '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return run_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace {

std::vector<GroundTruthScene> load_split(const RunConfig& cfg, Split split) {
  const auto path = cfg.corpus_path(split);
  if (!std::filesystem::exists(path))
    throw ConfigError("corpus " + path.string() + " does not exist; run gen-data first");
  return read_corpus(path);
}

RelTR load_model(const RunConfig& cfg) {
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path());
  RelTR model(checkpoint_model_config(ckpt), 0);
  load_parameters(model, ckpt);
  return model;
}

void print_histogram(std::ostream& out, const std::array<std::size_t, kPredicateClasses>& hist) {
  for (std::size_t p = 0; p < kPredicateClasses; ++p)
    out << "  " << std::left << std::setw(14) << predicate_name(p) << hist[p] << '\n';
}

}  // namespace

std::array<int, kPredicateClasses> predicate_groups(const RunConfig& cfg) {
  const auto path = cfg.corpus_path(Split::train);
  if (std::filesystem::exists(path)) return frequency_groups(predicate_histogram(read_corpus(path)));
  std::array<std::size_t, kPredicateClasses> ranks{};
  for (std::size_t p = 0; p < kPredicateClasses; ++p) ranks[p] = kPredicateClasses - p;
  return frequency_groups(ranks);
}

// ---- commands ------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  nlohmann::json manifest = {{"corpus", cfg.corpus}, {"splits", nlohmann::json::object()}};
  for (Split split : {Split::train, Split::val, Split::test}) {
    const auto scenes = generate_split(cfg.corpus, split);
    write_corpus(scenes, cfg.corpus_path(split));
    const auto hist = predicate_histogram(scenes);
    std::size_t triplets = 0;
    for (auto n : hist) triplets += n;
    manifest["splits"][std::string(split_name(split))] = {
        {"scenes", scenes.size()}, {"triplets", triplets}, {"predicate_histogram", hist}};
    out << split_name(split) << ": " << scenes.size() << " scenes, " << triplets << " triplets\n";
    print_histogram(out, hist);
  }
  write_file_atomic(cfg.data_dir / "manifest.json", manifest.dump(2) + "\n");
  out << "holdout types:";
  for (const auto& t : cfg.corpus.holdout)
    out << " (" << entity_class_name(t.sub_class) << ", " << predicate_name(t.predicate) << ", "
        << entity_class_name(t.obj_class) << ")";
  out << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const auto scenes = load_split(cfg, Split::train);
  RelTR model(cfg.model, cfg.seed());
  Trainer trainer(model, scenes, cfg.train);

  const auto log_path = cfg.out_dir / "train_log.jsonl";
  std::vector<std::string> lines;
  nlohmann::json header = {{"header", {{"config", cfg}, {"parameters", model.parameter_count()},
                                       {"ablation", {{"csa", cfg.model.ablation.csa}, {"dva", cfg.model.ablation.dva},
                                                     {"dea", cfg.model.ablation.dea}, {"mask", cfg.model.ablation.mask}}}}}};
  lines.push_back(header.dump());

  if (cfg.resume) {
    const Checkpoint ckpt = load_checkpoint(*cfg.resume);
    if (checkpoint_model_config(ckpt) != cfg.model)
      throw ConfigError("checkpoint " + cfg.resume->string() + " was trained with a different model config");
    trainer.restore(ckpt);
    if (std::filesystem::exists(log_path)) {
      std::ifstream in(log_path);
      std::string line;
      std::getline(in, line);  // previous header
      while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.contains("step") && j.at("step").get<std::size_t>() < trainer.next_step()) lines.push_back(line);
      }
    }
    out << "resumed at step " << trainer.next_step() << '\n';
  }

  auto flush = [&] {
    save_checkpoint(cfg.checkpoint_path(), trainer.checkpoint());
    std::string text;
    for (const auto& l : lines) text += l + '\n';
    write_file_atomic(log_path, text);
  };

  out << "training " << model.parameter_count() << " parameters for " << cfg.train.steps << " steps\n";
  const auto report_every = std::max<std::size_t>(1, cfg.train.steps / 20);
  const std::size_t last = std::min(cfg.train.steps, cfg.stop_after.value_or(cfg.train.steps));
  while (trainer.next_step() < last) {
    StepRecord rec;
    try {
      rec = trainer.step();
    } catch (const NumericalError& e) {
      std::string text;
      for (const auto& l : lines) text += l + '\n';
      write_file_atomic(log_path, text);
      out << "aborting: " << e.what() << '\n';
      return kExitNumerical;
    }
    lines.push_back(nlohmann::json(rec).dump());
    if (rec.step % report_every == 0 || rec.step + 1 == cfg.train.steps)
      out << "step " << rec.step << " loss " << rec.total << " grad_norm " << rec.grad_norm << '\n';
    if (cfg.train.checkpoint_every > 0 && trainer.next_step() % cfg.train.checkpoint_every == 0) flush();
  }
  flush();
  out << "wrote " << cfg.checkpoint_path().string() << '\n';
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const RelTR model = load_model(cfg);
  const auto scenes = load_split(cfg, cfg.eval_split);
  const auto groups = predicate_groups(cfg);
  const MetricReport report = evaluate(model, scenes, cfg.mode, cfg.corpus.holdout, groups);
  nlohmann::json j = report;
  j["mode"] = eval_mode_name(cfg.mode);
  j["split"] = std::string(split_name(cfg.eval_split));
  j["scenes"] = scenes.size();
  write_file_atomic(cfg.out_dir / ("report_" + eval_mode_name(cfg.mode) + ".json"), j.dump(2) + "\n");
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_infer(const RunConfig& cfg, std::ostream& out) {
  const RelTR model = load_model(cfg);
  const auto scenes = load_split(cfg, cfg.eval_split);
  std::vector<SceneDump> dumps;
  for (const auto& scene : scenes) dumps.push_back({scene.image_ref, evaluate_scene(model, scene, cfg.mode).ranked});
  const auto path = cfg.out_dir / ("predictions_" + std::string(split_name(cfg.eval_split)) + "_" +
                                   eval_mode_name(cfg.mode) + ".jsonl");
  write_dump(dumps, path);
  out << "wrote " << dumps.size() << " scene predictions to " << path.string() << '\n';
  return kExitOk;
}

GradCheckResult run_grad_check(const ModelConfig& model_config, const CorpusConfig& corpus, double iou_threshold,
                               std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig mc = model_config;
  mc.dropout = 0.0;
  CorpusConfig cc = corpus;
  cc.image_size = mc.image_height;
  cc.max_entities = std::max(cc.min_entities, std::min(cc.max_entities, mc.entity_queries));
  cc.max_triplets = std::min(cc.max_triplets, mc.triplet_queries);
  const GroundTruthScene scene = generate_scene(mix_seed(seed, 0x6C), cc, false);

  RelTR model(mc, seed);
  const ForwardContext ctx;
  const SceneAssignments frozen = assign_scene(model.forward(scene.image, ctx), scene, iou_threshold);
  std::vector<std::string> names;
  std::vector<Tensor> params;
  for (auto& [name, t] : model.named_parameters()) {
    names.push_back(name);
    params.push_back(t);
  }
  const GradCheckReport report =
      grad_check([&] { return total_loss(model.forward(scene.image, ctx), scene, frozen).total_tensor; }, params);

  GradCheckResult r;
  r.max_rel_error = report.max_rel_error;
  r.worst_parameter = names.empty() ? "" : names[report.worst_param];
  r.worst_index = report.worst_index;
  r.checked = report.checked;
  r.refined = report.refined;
  r.non_finite = report.non_finite.size();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

int cmd_grad_check(const RunConfig& cfg, std::ostream& out) {
  set_backward_fault(cfg.corrupt_backward ? BackwardFault::softmax : BackwardFault::none);
  GradCheckResult r;
  try {
    r = run_grad_check(cfg.model, cfg.corpus, cfg.train.iou_threshold, cfg.seed());
  } catch (...) {
    set_backward_fault(BackwardFault::none);
    throw;
  }
  set_backward_fault(BackwardFault::none);
  const nlohmann::json j = {{"max_rel_error", r.max_rel_error}, {"worst_parameter", r.worst_parameter},
                            {"worst_index", r.worst_index},     {"checked", r.checked}, {"refined", r.refined},
                            {"non_finite", r.non_finite},       {"seconds", r.seconds},
                            {"tolerance", kGradCheckTolerance}};
  out << j.dump(2) << '\n';
  return r.max_rel_error < kGradCheckTolerance && r.non_finite == 0 ? kExitOk : kExitNumerical;
}

}  // namespace reltr
