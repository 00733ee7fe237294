#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "reltr/boxes.hpp"
#include "reltr/matching.hpp"

using namespace reltr;

namespace {

constexpr std::size_t kEntityLogits = 11;  // 10 classes + background
constexpr std::size_t kPredicateLogits = 9;

std::vector<double> peaked(std::size_t n, std::size_t hot, double high = 30.0) {
  std::vector<double> v(n, 0.0);
  v[hot] = high;
  return v;
}

TripletPrediction make_pred(std::size_t s, const Box& sb, std::size_t p, std::size_t o, const Box& ob,
                            double high = 30.0) {
  return {peaked(kEntityLogits, s, high), sb, peaked(kEntityLogits, o, high), ob, peaked(kPredicateLogits, p, high), {}, {}};
}

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.2, 0.8), e(0.05, 0.4);
  return {c(rng), c(rng), e(rng), e(rng)};
}

CostMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  CostMatrix m(rows, cols);
  std::uniform_real_distribution<double> u(-5, 5);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m.at(r, c) = u(rng);
  return m;
}

}  // namespace

TEST_SUITE("boxes_matching") {

TEST_CASE("box l1") {
  const Box a{0.5, 0.5, 0.2, 0.2}, b{0.6, 0.5, 0.2, 0.4};
  CHECK(box_l1(a, a) == 0.0);
  CHECK(box_l1(a, b) == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(box_l1(a, b) == box_l1(b, a));
}

TEST_CASE("giou hand geometry") {
  const Box a{0.25, 0.25, 0.5, 0.5}, b{0.75, 0.75, 0.5, 0.5};
  CHECK(box_iou(a, b) == 0.0);
  CHECK(box_giou(a, b) == -0.5);
  CHECK(box_giou(a, a) == 1.0);
  const Box outer{0.5, 0.5, 0.6, 0.6}, inner{0.5, 0.5, 0.2, 0.3};
  CHECK(box_giou(outer, inner) == doctest::Approx(box_iou(outer, inner)).epsilon(1e-14));
  CHECK(box_iou(outer, inner) == doctest::Approx(0.06 / 0.36));
  CHECK_THROWS(box_giou(a, Box{0.5, 0.5, 0.0, 0.2}));
}

TEST_CASE("giou range, symmetry and agreement with independent iou") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    const double g = box_giou(a, b);
    CHECK(g > -1.0);
    CHECK(g <= 1.0);
    CHECK(g == doctest::Approx(box_giou(b, a)).epsilon(1e-14));
    CHECK(box_iou(a, b) == doctest::Approx(oracle::iou(a, b)).epsilon(1e-12));
    const Box h = oracle::hull(a, b);
    const double uni = a.area() + b.area() - intersection_area(a, b);
    CHECK(g == doctest::Approx(oracle::iou(a, b) - (h.area() - uni) / h.area()).epsilon(1e-12));
    const Box e = enclosing_box(a, b);
    CHECK(e.x0() == doctest::Approx(h.x0()));
    CHECK(e.y1() == doctest::Approx(h.y1()));
  }
}

TEST_CASE("class cost formula") {
  CHECK(std::fabs(class_cost(0.5) - (-0.086643)) < 1e-6);
  CHECK(std::fabs(class_cost(1.0) - (-13.8155)) < 1e-3);
  // Independent evaluation: 0.25 * 0.25 * ln 2 - 0.75 * 0.25 * ln 2 = -0.125 ln 2 (eps negligible)
  CHECK(class_cost(0.5) == doctest::Approx(-0.125 * std::log(2.0)).epsilon(1e-7));
  double previous = class_cost(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double c = class_cost(i / 1000.0);
    CHECK(c < previous);
    previous = c;
  }
}

TEST_CASE("entity and box costs") {
  const Box b{0.4, 0.5, 0.2, 0.3};
  std::vector<double> probs(kEntityLogits, 0.0);
  probs[3] = 1.0;
  CHECK(entity_cost(probs, b, 3, b) == doctest::Approx(-13.8155).epsilon(1e-4));
  CHECK(entity_cost(probs, b, 3, std::nullopt) == class_cost(1.0));
  // Doubling the L1 distance: with the GIoU term taken out, the cost rises by 5x the L1 change.
  const Box near{0.45, 0.5, 0.2, 0.3}, far{0.5, 0.5, 0.2, 0.3};
  const double d_cost = box_cost(far, b) - box_cost(near, b);
  const double d_giou = 2.0 * ((1 - box_giou(far, b)) - (1 - box_giou(near, b)));
  CHECK(d_cost - d_giou == doctest::Approx(5.0 * (box_l1(far, b) - box_l1(near, b))).epsilon(1e-12));
  CHECK(box_l1(far, b) == doctest::Approx(2 * box_l1(near, b)));
}

TEST_CASE("triplet cost decomposition") {
  const Box sb{0.3, 0.3, 0.2, 0.2}, ob{0.7, 0.6, 0.3, 0.2};
  const TripletPrediction perfect = make_pred(2, sb, 5, 7, ob);
  const GtTriplet gt{2, sb, 5, 7, ob};
  CHECK(triplet_cost(perfect, gt) == doctest::Approx(3 * -13.8155).epsilon(1e-4));

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 2);
  std::vector<TripletPrediction> preds;
  std::vector<GtTriplet> gts;
  for (int i = 0; i < 4; ++i) {
    TripletPrediction p;
    p.sub_logits.resize(kEntityLogits);
    p.obj_logits.resize(kEntityLogits);
    p.prd_logits.resize(kPredicateLogits);
    for (double& x : p.sub_logits) x = n(rng);
    for (double& x : p.obj_logits) x = n(rng);
    for (double& x : p.prd_logits) x = n(rng);
    p.sub_box = random_box(rng);
    p.obj_box = random_box(rng);
    preds.push_back(p);
  }
  for (int i = 0; i < 3; ++i) gts.push_back({std::size_t(i), random_box(rng), std::size_t(i + 2), std::size_t(9 - i), random_box(rng)});
  const CostMatrix m = triplet_cost_matrix(preds, gts);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      const auto ps = softmax_probs(preds[r].sub_logits), po = softmax_probs(preds[r].obj_logits),
                 pp = softmax_probs(preds[r].prd_logits);
      const double parts = class_cost(ps[gts[c].sub_class]) + box_cost(preds[r].sub_box, gts[c].sub_box) +
                           class_cost(po[gts[c].obj_class]) + box_cost(preds[r].obj_box, gts[c].obj_box) +
                           class_cost(pp[gts[c].predicate]);
      CHECK(std::fabs(m.at(r, c) - parts) < 1e-12);
    }
  // Swapping the GT object only changes the object term.
  GtTriplet other = gts[0];
  other.obj_class = 4;
  const auto po = softmax_probs(preds[0].obj_logits);
  CHECK(triplet_cost(preds[0], other) - triplet_cost(preds[0], gts[0]) ==
        doctest::Approx(class_cost(po[4]) - class_cost(po[gts[0].obj_class])).epsilon(1e-12));
}

TEST_CASE("hungarian small cases") {
  CostMatrix m(2, 2);
  m.at(0, 0) = 1, m.at(0, 1) = 2, m.at(1, 0) = 2, m.at(1, 1) = 4;
  const auto r = hungarian(m);
  CHECK(r.col_to_row == std::vector<std::size_t>{1, 0});
  CHECK(r.total == 4.0);

  CostMatrix id(5, 5, 10.0);
  for (std::size_t i = 0; i < 5; ++i) id.at(i, i) = 0.0;
  CHECK(hungarian(id).col_to_row == std::vector<std::size_t>{0, 1, 2, 3, 4});

  CHECK(hungarian(CostMatrix(3, 0)).col_to_row.empty());
  CHECK_THROWS_AS(hungarian(CostMatrix(2, 3)), std::invalid_argument);
  CostMatrix bad(2, 2);
  bad.at(1, 1) = std::nan("");
  CHECK_THROWS_AS(hungarian(bad), std::invalid_argument);
}

TEST_CASE("hungarian equals brute force on random square and tall matrices") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> side(1, 6);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t cols = side(rng), rows = std::min<std::size_t>(7, cols + side(rng) % 3);
    const CostMatrix m = random_matrix(rows, cols, rng);
    const auto r = hungarian(m);
    std::vector<bool> used(rows, false);
    for (std::size_t c : r.col_to_row) {
      CHECK(!used[c]);
      used[c] = true;
    }
    CHECK(r.total == doctest::Approx(oracle::brute_force_assignment_cost(m)).epsilon(1e-12));
  }
}

TEST_CASE("hungarian is invariant to a constant shift") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    CostMatrix m = random_matrix(6, 4, rng), shifted = m;
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 4; ++c) shifted.at(r, c) += 17.25;
    CHECK(hungarian(m).col_to_row == hungarian(shifted).col_to_row);
  }
}

TEST_CASE("assign triplets: matched slot gets its ground truth verbatim") {
  const Box sb{0.3, 0.3, 0.2, 0.2}, ob{0.7, 0.6, 0.3, 0.2};
  const std::vector<TripletPrediction> preds = {make_pred(2, sb, 5, 7, ob)};
  const std::vector<GtTriplet> gts = {{2, sb, 5, 7, ob}};
  const auto a = assign_triplets(preds, gts, 0.7);
  REQUIRE(a.gt_to_pred == std::vector<std::size_t>{0});
  const TripletTarget& t = a.targets[0];
  CHECK(t.sub_class == 2);
  CHECK(t.obj_class == 7);
  CHECK(t.predicate == 5);
  CHECK(*t.sub_box == sb);
  CHECK(*t.obj_box == ob);
  CHECK(t.sub_active);
  CHECK(t.obj_active);
  CHECK(t.gt_index == 0);
  CHECK_THROWS_AS(assign_triplets(preds, std::vector<GtTriplet>(2, gts[0]), 0.7), std::invalid_argument);
  CHECK_THROWS_AS(assign_triplets(preds, gts, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(assign_triplets(preds, gts, 1.5), std::invalid_argument);
}

TEST_CASE("assign triplets: relaxation on the unmatched slot") {
  const Box sb{0.3, 0.3, 0.2, 0.2}, ob{0.7, 0.6, 0.3, 0.2};
  const GtTriplet gt{2, sb, 5, 7, ob};
  // Slot 0 matches exactly; slot 1 has the right subject label at IoU 0.8 and a poor object.
  const Box shifted{0.3 + 0.2 / 9.0, 0.3, 0.2, 0.2};  // IoU = (1 - 1/9) / (1 + 1/9) = 0.8
  REQUIRE(box_iou(shifted, sb) == doctest::Approx(0.8));
  const std::vector<TripletPrediction> preds = {make_pred(2, sb, 5, 7, ob),
                                                make_pred(2, shifted, 1, 3, Box{0.1, 0.9, 0.1, 0.1})};
  const auto a = assign_triplets(preds, std::vector<GtTriplet>{gt}, 0.7);
  const TripletTarget& t = a.targets[1];
  CHECK(!t.gt_index);
  CHECK(!t.sub_active);
  CHECK(t.obj_active);
  CHECK(t.predicate == kPredicateLogits - 1);
  CHECK(t.sub_class == kEntityLogits - 1);
  CHECK(!t.sub_box);
  const auto off = assign_triplets(preds, std::vector<GtTriplet>{gt}, 1.0);
  CHECK(off.targets[1].sub_active);
  CHECK(off.targets[1].obj_active);
  const auto strict = assign_triplets(preds, std::vector<GtTriplet>{gt}, 0.85);
  CHECK(strict.targets[1].sub_active);
}

TEST_CASE("assign triplets: random properties") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> lab(0, 9), prd(0, 7), count(0, 4);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<GtTriplet> gts(count(rng));
    for (auto& g : gts) g = {lab(rng), random_box(rng), prd(rng), lab(rng), random_box(rng)};
    std::vector<TripletPrediction> preds(6);
    for (auto& p : preds) {
      if (!gts.empty() && n(rng) > 0) {
        const auto& g = gts[std::uniform_int_distribution<std::size_t>(0, gts.size() - 1)(rng)];
        p = make_pred(g.sub_class, g.sub_box, prd(rng), lab(rng), random_box(rng), 5.0 + n(rng));
      } else {
        p = make_pred(lab(rng), random_box(rng), prd(rng), lab(rng), random_box(rng));
      }
    }
    const auto loose = assign_triplets(preds, gts, 0.3);
    const auto mid = assign_triplets(preds, gts, 0.6);
    const auto off = assign_triplets(preds, gts, 1.0);
    std::vector<int> seen(preds.size(), 0);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const std::size_t slot = loose.gt_to_pred[g];
      ++seen[slot];
      const TripletTarget& t = loose.targets[slot];
      CHECK(t.gt_index == g);
      CHECK(t.sub_class == gts[g].sub_class);
      CHECK(t.predicate == gts[g].predicate);
      CHECK(*t.obj_box == gts[g].obj_box);
      CHECK(t.sub_active);
      CHECK(t.obj_active);
    }
    for (int s : seen) CHECK(s <= 1);
    for (std::size_t p = 0; p < preds.size(); ++p) {
      CHECK(off.targets[p].sub_active);
      CHECK(off.targets[p].obj_active);
      // Lowering T can only switch flags off.
      if (!mid.targets[p].sub_active) CHECK(!loose.targets[p].sub_active);
      if (!mid.targets[p].obj_active) CHECK(!loose.targets[p].obj_active);
    }
  }
}

TEST_CASE("assign entities") {
  const std::vector<EntityPrediction> preds = {{peaked(kEntityLogits, 10), Box{0.5, 0.5, 0.2, 0.2}},
                                               {peaked(kEntityLogits, 4), Box{0.2, 0.2, 0.1, 0.1}}};
  const std::vector<GtEntity> gts = {{4, Box{0.2, 0.2, 0.1, 0.1}}};
  const auto a = assign_entities(preds, gts);
  CHECK(a.gt_to_pred == std::vector<std::size_t>{1});
  CHECK(a.targets[1].class_id == 4);
  CHECK(a.targets[0].class_id == 10);
  CHECK(!a.targets[0].box);
  CHECK_THROWS_AS(assign_entities(std::span<const EntityPrediction>(preds).first(0), gts), std::invalid_argument);
}

}  // TEST_SUITE
