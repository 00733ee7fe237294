#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reltr/boxes.hpp"
#include "reltr/prediction.hpp"
#include "reltr/synth.hpp"

namespace reltr {

inline constexpr double kEntityIouThreshold = 0.5;
inline constexpr double kSelfIouThreshold = 0.7;

struct ScoredEntity {
  std::size_t label = 0;
  double score = 0.0;
  Box box;
  friend bool operator==(const ScoredEntity&, const ScoredEntity&) = default;
};

struct RankedTriplet {
  ScoredEntity subject;
  ScoredEntity object;
  std::size_t predicate = 0;
  double predicate_score = 0.0;
  double combined_score = 0.0;  // subject.score * predicate_score * object.score
  /// Probability of every real predicate class (no-relation excluded).
  std::vector<double> predicate_scores;
  friend bool operator==(const RankedTriplet&, const RankedTriplet&) = default;
};

/// Labels exclude background / no-relation; scores are softmax probabilities.
/// Drops triplets whose subject and object share a label with box IoU >=
/// self_iou_threshold, then stable-sorts by combined score, highest first.
std::vector<RankedTriplet> postprocess(std::span<const TripletPrediction> preds,
                                       double self_iou_threshold = kSelfIouThreshold);

bool triplet_match(const RankedTriplet& pred, const GtTriplet& gt, double entity_iou_threshold = kEntityIouThreshold);

/// One ranked list entry; in no-graph mode a slot yields one per predicate.
struct Candidate {
  ScoredEntity subject;
  ScoredEntity object;
  std::size_t predicate = 0;
  double score = 0.0;
};

enum class GraphMode { graph, no_graph };

std::vector<Candidate> ranked_candidates(std::span<const RankedTriplet> ranked, GraphMode mode);
bool candidate_match(const Candidate& c, const GtTriplet& gt, double entity_iou_threshold = kEntityIouThreshold);

/// Which GT triplets the top-k candidates recover. Candidates are taken in
/// rank order; each consumes the first still-unmatched GT it matches.
std::vector<bool> matched_ground_truth(std::span<const Candidate> candidates, std::span<const GtTriplet> gts,
                                       std::size_t k);

/// Fraction of gts recovered by the top-k list. Throws when k == 0; 0 when gts is empty.
double recall_at_k(std::span<const RankedTriplet> ranked, std::span<const GtTriplet> gts, std::size_t k,
                   GraphMode mode);

struct EvalScene {
  std::vector<RankedTriplet> ranked;
  std::vector<GtTriplet> gts;
};

/// Mean over scenes with at least one GT triplet.
double corpus_recall(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode);
/// Per predicate class: recall over its GT instances, averaged over scenes
/// containing the class. Absent for classes with no GT.
std::vector<std::optional<double>> per_predicate_recall(std::span<const EvalScene> scenes, std::size_t k,
                                                        GraphMode mode, std::size_t predicate_classes);
/// Unweighted mean of the present per-class recalls (0 if none).
double mean_recall(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode, std::size_t predicate_classes);
/// Recall restricted to GT whose type is in holdout; absent when no such GT exists.
std::optional<double> zero_shot_recall(std::span<const EvalScene> scenes, std::size_t k, GraphMode mode,
                                       std::span<const TripletType> holdout);
/// Mean recall over the present classes of each group (0 head, 1 body, 2 tail).
std::array<std::optional<double>, 3> group_mean_recall(std::span<const EvalScene> scenes, std::size_t k,
                                                       std::span<const int> groups);

/// All-point interpolated AP of a ranked list of hit flags against npos positives.
double average_precision(const std::vector<bool>& hits, std::size_t npos);

enum class ApMatch { relation, phrase };

/// Per predicate class AP, pooled across scenes, weighted by GT counts.
double weighted_map(std::span<const EvalScene> scenes, ApMatch match, std::size_t predicate_classes);

double score_wtd(double recall_at_50, double wmap_rel, double wmap_phr);

enum class EvalMode { sgdet, sgcls, predcls };
std::string eval_mode_name(EvalMode mode);
EvalMode parse_eval_mode(const std::string& name);

/// Hungarian-matches preds to gts on triplet_cost, then writes GT boxes into
/// matched slots; predcls also fixes entity labels with probability 1.
std::vector<TripletPrediction> substitute_ground_truth(std::span<const TripletPrediction> preds,
                                                       std::span<const GtTriplet> gts, EvalMode mode);

struct MetricReport {
  std::map<std::size_t, double> recall;       // R@{20,50,100}
  std::map<std::size_t, double> mean_recall;  // mR@{20,50,100}
  std::map<std::size_t, std::optional<double>> zs_recall;  // zsR@{50,100}
  std::map<std::size_t, double> ng_recall;                 // ng-R@{50,100}
  std::map<std::size_t, std::optional<double>> ng_zs_recall;
  std::vector<std::optional<double>> per_predicate_recall;  // @100
  std::array<std::optional<double>, 3> group_mean_recall;   // head, body, tail @100
  double wmap_rel = 0.0;
  double wmap_phr = 0.0;
  double score_wtd = 0.0;
};

MetricReport compute_metrics(std::span<const EvalScene> scenes, std::span<const TripletType> holdout,
                             std::span<const int> groups, std::size_t predicate_classes);

void to_json(nlohmann::json& j, const MetricReport& r);

// ---- prediction dumps --------------------------------------------------------

struct SceneDump {
  std::string image_ref;
  std::vector<RankedTriplet> ranked;
  friend bool operator==(const SceneDump&, const SceneDump&) = default;
};

void write_dump(const std::vector<SceneDump>& scenes, const std::filesystem::path& path);
std::vector<SceneDump> read_dump(const std::filesystem::path& path);

}  // namespace reltr
