#include "reltr/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "reltr/checkpoint.hpp"
#include "reltr/matching.hpp"

namespace reltr {

std::vector<RankedTriplet> postprocess(std::span<const TripletPrediction> preds, double self_iou_threshold) {
  std::vector<RankedTriplet> out;
  out.reserve(preds.size());
  for (const TripletPrediction& p : preds) {
    const auto sub_probs = softmax_probs(p.sub_logits);
    const auto obj_probs = softmax_probs(p.obj_logits);
    const auto prd_probs = softmax_probs(p.prd_logits);
    RankedTriplet t;
    t.subject.label = argmax_prefix(sub_probs, sub_probs.size() - 1);
    t.subject.score = sub_probs[t.subject.label];
    t.subject.box = p.sub_box;
    t.object.label = argmax_prefix(obj_probs, obj_probs.size() - 1);
    t.object.score = obj_probs[t.object.label];
    t.object.box = p.obj_box;
    t.predicate = argmax_prefix(prd_probs, prd_probs.size() - 1);
    t.predicate_score = prd_probs[t.predicate];
    t.predicate_scores.assign(prd_probs.begin(), prd_probs.end() - 1);
    t.combined_score = t.subject.score * t.predicate_score * t.object.score;
    if (t.subject.label == t.object.label && box_iou(t.subject.box, t.object.box) >= self_iou_threshold) continue;
    out.push_back(std::move(t));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedTriplet& a, const RankedTriplet& b) { return a.combined_score > b.combined_score; });
  return out;
}

bool candidate_match(const Candidate& c, const GtTriplet& gt, double entity_iou_threshold) {
  return c.subject.label == gt.sub_class && c.object.label == gt.obj_class && c.predicate == gt.predicate &&
         box_iou(c.subject.box, gt.sub_box) >= entity_iou_threshold &&
         box_iou(c.object.box, gt.obj_box) >= entity_iou_threshold;
}

bool triplet_match(const RankedTriplet& pred, const GtTriplet& gt, double entity_iou_threshold) {
  return candidate_match({pred.subject, pred.object, pred.predicate, pred.combined_score}, gt, entity_iou_threshold);
}

std::vector<Candidate> ranked_candidates(std::span<const RankedTriplet> ranked, GraphMode mode) {
  std::vector<Candidate> out;
  if (mode == GraphMode::graph) {
    for (const auto& t : ranked) out.push_back({t.subject, t.object, t.predicate, t.combined_score});
    return out;
  }
  for (const auto& t : ranked)
    for (std::size_t p = 0; p < t.predicate_scores.size(); ++p)
      out.push_back({t.subject, t.object, p, t.subject.score * t.predicate_scores[p] * t.object.score});
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  return out;
}

std::vector<bool> matched_ground_truth(std::span<const Candidate> candidates, std::span<const GtTriplet> gts,
                                       std::size_t k) {
  std::vector<bool> used(gts.size(), false);
  const std::size_t top = std::min(k, candidates.size());
  for (std::size_t i = 0; i < top; ++i)
    for (std::size_t g = 0; g < gts.size(); ++g)
      if (!used[g] && candidate_match(candidates[i], gts[g])) {
        used[g] = true;
        break;
      }
  return used;
}

double recall_at_k(std::span<const RankedTriplet> ranked, std::span<const GtTriplet> gts, std::size_t k,
                   GraphMode mode) {
  if (k == 0) throw std::invalid_argument("recall_at_k: k must be positive");
  if (gts.empty()) return 0.0;
  const auto hits = matched_ground_truth(ranked_candidates(ranked, mode), gts, k);
  return static_cast<double>(std::count(hits.begin(), hits.end(), true)) / static_cast<double>(gts.size());
}

namespace {

std::vector<std::vector<bool>> scene_hits(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode) {
  if (k == 0) throw std::invalid_argument("recall: k must be positive");
  std::vector<std::vector<bool>> hits;
  hits.reserve(scenes.size());
  for (const auto& s : scenes) hits.push_back(matched_ground_truth(ranked_candidates(s.ranked, mode), s.gts, k));
  return hits;
}

// Mean over scenes of (matched selected GT / selected GT), skipping scenes with none selected.
template <typename Select>
std::optional<double> restricted_recall(std::span<const EvalScene> scenes, const std::vector<std::vector<bool>>& hits,
                                        Select select) {
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    std::size_t n = 0, matched = 0;
    for (std::size_t g = 0; g < scenes[s].gts.size(); ++g)
      if (select(scenes[s].gts[g])) {
        ++n;
        if (hits[s][g]) ++matched;
      }
    if (n == 0) continue;
    total += static_cast<double>(matched) / static_cast<double>(n);
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return total / static_cast<double>(counted);
}

double mean_of_present(const std::vector<std::optional<double>>& values) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      total += *v;
      ++n;
    }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

double corpus_recall(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode) {
  const auto hits = scene_hits(scenes, k, mode);
  return restricted_recall(scenes, hits, [](const GtTriplet&) { return true; }).value_or(0.0);
}

std::vector<std::optional<double>> per_predicate_recall(std::span<const EvalScene> scenes, std::size_t k,
                                                        GraphMode mode, std::size_t predicate_classes) {
  const auto hits = scene_hits(scenes, k, mode);
  std::vector<std::optional<double>> out(predicate_classes);
  for (std::size_t c = 0; c < predicate_classes; ++c)
    out[c] = restricted_recall(scenes, hits, [c](const GtTriplet& g) { return g.predicate == c; });
  return out;
}

double mean_recall(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode, std::size_t predicate_classes) {
  return mean_of_present(per_predicate_recall(scenes, k, mode, predicate_classes));
}

std::optional<double> zero_shot_recall(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode,
                                       std::span<const TripletType> holdout) {
  if (holdout.empty()) return std::nullopt;
  const auto hits = scene_hits(scenes, k, mode);
  return restricted_recall(scenes, hits, [holdout](const GtTriplet& g) {
    const TripletType type{g.sub_class, g.predicate, g.obj_class};
    return std::find(holdout.begin(), holdout.end(), type) != holdout.end();
  });
}

std::array<std::optional<double>, 3> group_mean_recall(std::span<const EvalScene> scenes, std::size_t k,
                                                       std::span<const int> groups) {
  const auto per_class = per_predicate_recall(scenes, k, GraphMode::graph, groups.size());
  std::array<std::optional<double>, 3> out;
  for (int g = 0; g < 3; ++g) {
    std::vector<std::optional<double>> members;
    for (std::size_t c = 0; c < groups.size(); ++c)
      if (groups[c] == g) members.push_back(per_class[c]);
    if (std::any_of(members.begin(), members.end(), [](const auto& v) { return v.has_value(); }))
      out[static_cast<std::size_t>(g)] = mean_of_present(members);
  }
  return out;
}

double average_precision(const std::vector<bool>& hits, std::size_t npos) {
  if (npos == 0 || hits.empty()) return 0.0;
  const std::size_t n = hits.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(npos);
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, previous = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - previous) * precision[i];
    previous = recall[i];
  }
  return ap;
}

namespace {

bool phrase_match(const Candidate& c, const GtTriplet& gt) {
  return c.subject.label == gt.sub_class && c.object.label == gt.obj_class && c.predicate == gt.predicate &&
         box_iou(enclosing_box(c.subject.box, c.object.box), enclosing_box(gt.sub_box, gt.obj_box)) >=
             kEntityIouThreshold;
}

}  // namespace

double weighted_map(std::span<const EvalScene> scenes, ApMatch match, std::size_t predicate_classes) {
  std::vector<std::vector<Candidate>> candidates;
  for (const auto& s : scenes) candidates.push_back(ranked_candidates(s.ranked, GraphMode::graph));

  double weighted = 0.0;
  std::size_t total_pos = 0;
  for (std::size_t c = 0; c < predicate_classes; ++c) {
    struct Entry {
      double score;
      std::size_t scene;
      std::size_t index;
    };
    std::vector<Entry> pooled;
    std::size_t npos = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      for (const auto& g : scenes[s].gts) npos += g.predicate == c;
      for (std::size_t i = 0; i < candidates[s].size(); ++i)
        if (candidates[s][i].predicate == c) pooled.push_back({candidates[s][i].score, s, i});
    }
    if (npos == 0) continue;
    std::stable_sort(pooled.begin(), pooled.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> used;
    for (const auto& s : scenes) used.emplace_back(s.gts.size(), false);
    std::vector<bool> hits;
    hits.reserve(pooled.size());
    for (const Entry& e : pooled) {
      const Candidate& cand = candidates[e.scene][e.index];
      const auto& gts = scenes[e.scene].gts;
      bool hit = false;
      for (std::size_t g = 0; g < gts.size() && !hit; ++g) {
        if (used[e.scene][g]) continue;
        const bool ok = match == ApMatch::relation ? candidate_match(cand, gts[g]) : phrase_match(cand, gts[g]);
        if (ok) used[e.scene][g] = hit = true;
      }
      hits.push_back(hit);
    }
    weighted += static_cast<double>(npos) * average_precision(hits, npos);
    total_pos += npos;
  }
  return total_pos == 0 ? 0.0 : weighted / static_cast<double>(total_pos);
}

double score_wtd(double recall_at_50, double wmap_rel, double wmap_phr) {
  return 0.2 * recall_at_50 + 0.4 * wmap_rel + 0.4 * wmap_phr;
}

std::string eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::sgdet: return "sgdet";
    case EvalMode::sgcls: return "sgcls";
    case EvalMode::predcls: return "predcls";
  }
  return "?";
}

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "sgdet") return EvalMode::sgdet;
  if (name == "sgcls") return EvalMode::sgcls;
  if (name == "predcls") return EvalMode::predcls;
  throw std::invalid_argument("unknown evaluation mode '" + name + "' (expected sgdet, sgcls or predcls)");
}

namespace {

void pin_label(std::vector<double>& logits, std::size_t label) {
  std::fill(logits.begin(), logits.end(), -1e9);
  logits.at(label) = 0.0;
}

}  // namespace

std::vector<TripletPrediction> substitute_ground_truth(std::span<const TripletPrediction> preds,
                                                       std::span<const GtTriplet> gts, EvalMode mode) {
  std::vector<TripletPrediction> out(preds.begin(), preds.end());
  if (mode == EvalMode::sgdet || gts.empty()) return out;
  const Matching m = hungarian(triplet_cost_matrix(preds, gts));
  for (std::size_t g = 0; g < gts.size(); ++g) {
    TripletPrediction& p = out[m.col_to_row[g]];
    p.sub_box = gts[g].sub_box;
    p.obj_box = gts[g].obj_box;
    if (mode == EvalMode::predcls) {
      pin_label(p.sub_logits, gts[g].sub_class);
      pin_label(p.obj_logits, gts[g].obj_class);
    }
  }
  return out;
}

MetricReport compute_metrics(std::span<const EvalScene> scenes, std::span<const TripletType> holdout,
                             std::span<const int> groups, std::size_t predicate_classes) {
  MetricReport r;
  for (std::size_t k : {20, 50, 100}) {
    r.recall[k] = corpus_recall(scenes, k, GraphMode::graph);
    r.mean_recall[k] = mean_recall(scenes, k, GraphMode::graph, predicate_classes);
  }
  for (std::size_t k : {50, 100}) {
    r.zs_recall[k] = zero_shot_recall(scenes, k, GraphMode::graph, holdout);
    r.ng_recall[k] = corpus_recall(scenes, k, GraphMode::no_graph);
    r.ng_zs_recall[k] = zero_shot_recall(scenes, k, GraphMode::no_graph, holdout);
  }
  r.per_predicate_recall = per_predicate_recall(scenes, 100, GraphMode::graph, predicate_classes);
  if (!groups.empty()) r.group_mean_recall = group_mean_recall(scenes, 100, groups);
  r.wmap_rel = weighted_map(scenes, ApMatch::relation, predicate_classes);
  r.wmap_phr = weighted_map(scenes, ApMatch::phrase, predicate_classes);
  r.score_wtd = score_wtd(r.recall[50], r.wmap_rel, r.wmap_phr);
  return r;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

template <typename Map>
nlohmann::json keyed(const std::string& prefix, const Map& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, double>) j[prefix + std::to_string(k)] = v;
    else j[prefix + std::to_string(k)] = optional_json(v);
  }
  return j;
}

}  // namespace

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json::object();
  for (const auto& part : {keyed("R@", r.recall), keyed("mR@", r.mean_recall), keyed("zsR@", r.zs_recall),
                           keyed("ng-R@", r.ng_recall), keyed("ng-zsR@", r.ng_zs_recall)})
    j.update(part);
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_predicate_recall.size(); ++c) {
    const std::string name = c < kPredicateClasses ? std::string(predicate_name(c)) : std::to_string(c);
    per[name] = optional_json(r.per_predicate_recall[c]);
  }
  j["per_predicate_R@100"] = per;
  j["head_mR@100"] = optional_json(r.group_mean_recall[0]);
  j["body_mR@100"] = optional_json(r.group_mean_recall[1]);
  j["tail_mR@100"] = optional_json(r.group_mean_recall[2]);
  j["wmAP_rel"] = r.wmap_rel;
  j["wmAP_phr"] = r.wmap_phr;
  j["score_wtd"] = r.score_wtd;
}

// ---- prediction dumps --------------------------------------------------------

namespace {

nlohmann::json entity_json(const ScoredEntity& e) {
  return {{"label", e.label}, {"score", e.score}, {"box", {e.box.cx, e.box.cy, e.box.w, e.box.h}}};
}

ScoredEntity entity_from_json(const nlohmann::json& j) {
  const auto& b = j.at("box");
  if (b.size() != 4) throw std::invalid_argument("box must have 4 values");
  return {j.at("label").get<std::size_t>(), j.at("score").get<double>(),
          {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()}};
}

}  // namespace

void write_dump(const std::vector<SceneDump>& scenes, const std::filesystem::path& path) {
  std::string text;
  for (const auto& s : scenes) {
    nlohmann::json triplets = nlohmann::json::array();
    for (const auto& t : s.ranked)
      triplets.push_back({{"subject", entity_json(t.subject)},
                          {"object", entity_json(t.object)},
                          {"predicate", t.predicate},
                          {"predicate_score", t.predicate_score},
                          {"combined_score", t.combined_score},
                          {"predicate_scores", t.predicate_scores}});
    text += nlohmann::json{{"image_ref", s.image_ref}, {"triplets", triplets}}.dump();
    text += '\n';
  }
  write_file_atomic(path, text);
}

std::vector<SceneDump> read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_dump: cannot open " + path.string());
  std::vector<SceneDump> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SceneDump s;
      s.image_ref = j.at("image_ref").get<std::string>();
      for (const auto& t : j.at("triplets")) {
        RankedTriplet r;
        r.subject = entity_from_json(t.at("subject"));
        r.object = entity_from_json(t.at("object"));
        r.predicate = t.at("predicate").get<std::size_t>();
        r.predicate_score = t.at("predicate_score").get<double>();
        r.combined_score = t.at("combined_score").get<double>();
        r.predicate_scores = t.at("predicate_scores").get<std::vector<double>>();
        s.ranked.push_back(std::move(r));
      }
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": malformed record: " + e.what());
    }
  }
  return out;
}

}  // namespace reltr
