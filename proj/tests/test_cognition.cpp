#include <cmath>

#include "doctest.h"
#include "meshseq/cognition.hpp"
#include "meshseq/gradcheck.hpp"
#include "meshseq/rng.hpp"

using namespace meshseq;

namespace {

AdasTrajectory trajectory(double first, double last, int first_idx, int last_idx) {
  AdasTrajectory t;
  t.valid = last_idx > first_idx;
  t.first_index = first_idx;
  t.last_index = last_idx;
  t.first_score = first;
  t.last_score = last;
  return t;
}

}  // namespace

TEST_CASE("identical training scores collapse the quantizer to bin 0") {
  std::vector<double> scores(25, 12.0);
  AdasQuantizer q = AdasQuantizer::fit(scores);
  for (double v : {0.0, 5.0, 12.0, 13.0, 85.0}) CHECK(q.bin(v) == 0);
}

TEST_CASE("quantizer on 0..19 maps value 10 to bin 10") {
  std::vector<double> scores;
  for (int i = 0; i < 20; ++i) scores.push_back(static_cast<double>(i));
  AdasQuantizer q = AdasQuantizer::fit(scores);
  // nearest-rank edges are 0..18; bin counts edges strictly below the value
  CHECK(q.bin(10.0) == 10);
  CHECK(q.bin(0.0) == 0);
  CHECK(q.bin(-3.0) == 0);
  CHECK(q.bin(19.0) == 19);
}

TEST_CASE("value 85 maps to bin 19 under any non-degenerate training set") {
  Rng rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> scores;
    for (int i = 0; i < 40; ++i) scores.push_back(rng.uniform(0.0, 60.0));
    AdasQuantizer q = AdasQuantizer::fit(scores);
    CHECK(q.bin(85.0) == 19);
  }
}

TEST_CASE("quantizer is monotone") {
  Rng rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> scores;
    const int n = 20 + static_cast<int>(rng.uniform_index(60));
    for (int i = 0; i < n; ++i) scores.push_back(rng.uniform(0.0, 85.0));
    AdasQuantizer q = AdasQuantizer::fit(scores);
    double prev_v = 0.0;
    std::size_t prev_b = q.bin(0.0);
    for (int k = 0; k < 100; ++k) {
      const double v = prev_v + rng.uniform(0.0, 1.0);
      const std::size_t b = q.bin(v);
      CHECK(b >= prev_b);
      prev_v = v;
      prev_b = b;
    }
  }
}

TEST_CASE("fit requires at least 20 scores") {
  std::vector<double> scores(19, 1.0);
  CHECK_THROWS_AS(AdasQuantizer::fit(scores), Error);
}

TEST_CASE("quantizer edges serialize and parse") {
  Rng rng(3);
  std::vector<double> scores;
  for (int i = 0; i < 33; ++i) scores.push_back(rng.uniform(0.0, 85.0));
  AdasQuantizer q = AdasQuantizer::fit(scores);
  AdasQuantizer p = AdasQuantizer::parse(q.serialize());
  for (std::size_t i = 0; i < AdasQuantizer::kEdges; ++i) CHECK(p.edges()[i] == q.edges()[i]);
}

TEST_CASE("cda of a perfectly aligned ramp is 1") {
  // delta = [0, 1, 2], ADAS 10 -> 20 over T = 2: m = 5, ramp [0, 5, 10]
  const double cs = cda_loss({0.0, 1.0, 2.0}, trajectory(10.0, 20.0, 0, 2));
  CHECK(cs == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cda of a flat deformation profile matches the hand value") {
  // CS([1,1,1], [0,5,10]) = 15 / (sqrt(3) * sqrt(125))
  const double cs = cda_loss({1.0, 1.0, 1.0}, trajectory(10.0, 20.0, 0, 2));
  CHECK(cs == doctest::Approx(0.7745966692414834).epsilon(1e-6));
}

TEST_CASE("flat ADAS gives cda 0 by convention") {
  CHECK(cda_loss({1.0, 2.0, 3.0}, trajectory(15.0, 15.0, 0, 2)) == 0.0);
  CHECK(cda_loss({0.0, 0.0, 0.0}, trajectory(10.0, 20.0, 0, 2)) == 0.0);  // zero deformations
}

TEST_CASE("cda rejects a length mismatch") {
  CHECK_THROWS_AS(cda_loss({1.0, 2.0}, trajectory(10.0, 20.0, 0, 2)), Error);
}

TEST_CASE("cda range, scale invariance and sign flip") {
  Rng rng(4);
  for (int rep = 0; rep < 2000; ++rep) {
    const int horizon = 1 + static_cast<int>(rng.uniform_index(7));
    std::vector<double> norms(horizon + 1);
    for (double& n : norms) n = rng.uniform(0.0, 3.0);
    const double a0 = rng.uniform(0.0, 60.0);
    const double a1 = rng.uniform(0.0, 85.0);
    AdasTrajectory t = trajectory(a0, a1, 0, horizon);

    const double cs = cda_loss(norms, t);
    CHECK(cs >= -1.0 - 1e-12);
    CHECK(cs <= 1.0 + 1e-12);

    const double c = rng.uniform(0.1, 10.0);
    std::vector<double> scaled = norms;
    for (double& n : scaled) n *= c;
    CHECK(cda_loss(scaled, t) == doctest::Approx(cs).epsilon(1e-9));

    // scaling m by c > 0 leaves the cosine unchanged; negating m negates it
    AdasTrajectory t2 = trajectory(a0, a0 + (a1 - a0) * c, 0, horizon);
    if (t2.slope() != 0.0 && t.slope() != 0.0)
      CHECK(cda_loss(norms, t2) == doctest::Approx(cs).epsilon(1e-9));
    AdasTrajectory t3 = trajectory(a1, a0, 0, horizon);
    bool any_norm = false;
    for (double n : norms) any_norm = any_norm || n > 0.0;
    if (t.slope() != 0.0 && t3.slope() != 0.0 && any_norm)
      CHECK(cda_loss(norms, t3) == doctest::Approx(-cs).epsilon(1e-9));
  }
}

TEST_CASE("graph cda matches the numeric cda") {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const int horizon = 1 + static_cast<int>(rng.uniform_index(7));
    std::vector<double> norms(horizon + 1);
    for (double& n : norms) n = rng.uniform(0.0, 2.0);
    AdasTrajectory t = trajectory(rng.uniform(0.0, 40.0), rng.uniform(0.0, 85.0), 0, horizon);

    Graph g;
    std::vector<ValueId> ids;
    for (double n : norms) ids.push_back(g.constant(Tensor::scalar(n)));
    CHECK(g.scalar(cda_loss_graph(g, ids, t)) ==
          doctest::Approx(cda_loss(norms, t)).epsilon(1e-12));
  }
}

TEST_CASE("make_trajectory picks first and last scored slots") {
  std::vector<std::optional<double>> adas(8);
  adas[1] = 12.0;
  adas[3] = 18.0;
  adas[6] = 30.0;  // beyond the mesh horizon below
  AdasTrajectory t = make_trajectory(adas, 4);
  CHECK(t.valid);
  CHECK(t.first_index == 1);
  CHECK(t.last_index == 3);
  CHECK(t.slope() == doctest::Approx(3.0));
  CHECK(t.horizon() == 3);

  std::vector<std::optional<double>> one_score(3);
  one_score[1] = 10.0;
  AdasTrajectory single = make_trajectory(one_score, 2);
  CHECK(!single.valid);
}

TEST_CASE("perfect reconstruction with CS 1 gives loss -lambda") {
  PatientLossTerms p;
  Tensor mesh = Tensor::full({4, 3}, 0.5);
  p.reconstructions = {mesh, mesh};
  p.targets = {mesh, mesh};
  p.deformation_norms = {0.0, 1.0, 2.0};
  p.trajectory = trajectory(10.0, 20.0, 0, 2);
  const double lambda = 1e-6;
  CHECK(total_loss({p}, lambda) == doctest::Approx(-lambda).epsilon(1e-9));
}

TEST_CASE("zero deformation against the reference gives loss 0") {
  PatientLossTerms p;
  Tensor mesh = Tensor::full({4, 3}, 0.25);
  p.reconstructions = {mesh};
  p.targets = {mesh};
  p.deformation_norms = {0.0, 0.0};
  p.trajectory = trajectory(10.0, 20.0, 0, 1);
  CHECK(total_loss({p}, 1e-6) == 0.0);
}

TEST_CASE("two-patient toy matches a hand-computed total loss") {
  // patient A: two visits; squared Frobenius errors 12*(0.1^2) and 12*(0.2^2)
  PatientLossTerms a;
  a.reconstructions = {Tensor::full({4, 3}, 0.1), Tensor::full({4, 3}, 0.2)};
  a.targets = {Tensor({4, 3}), Tensor({4, 3})};
  a.deformation_norms = {0.0, 2.0};
  a.trajectory = trajectory(10.0, 16.0, 0, 1);  // m = 6, ramp [0, 6]

  // patient B: one visit, exact reconstruction, flat ADAS
  PatientLossTerms b;
  b.reconstructions = {Tensor::full({4, 3}, -0.3)};
  b.targets = {Tensor::full({4, 3}, -0.3)};
  b.deformation_norms = {0.0, 1.0};
  b.trajectory = trajectory(12.0, 12.0, 0, 1);

  const double lambda = 0.5;
  // recon A = (12*0.01 + 12*0.04) / 2 = 0.3; recon B = 0
  // cda A = (2*6) / (2 * 6) = 1; cda B = 0 (flat)
  // loss = (0.3 + 0) / 2 - 0.5 * (1 + 0) / 2 = 0.15 - 0.25
  const double expected = 0.15 - 0.25;
  CHECK(total_loss({a, b}, lambda) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("total loss requires observed visits") {
  PatientLossTerms p;
  p.deformation_norms = {0.0};
  CHECK_THROWS_AS(total_loss({p}, 1e-6), Error);
}

TEST_CASE("gradient of the objective with respect to deformations passes FD") {
  // deformations as parameters; loss mirrors the training objective
  const std::size_t nv = 5;
  ParameterStore store;
  Rng rng(6);
  for (int t = 0; t < 3; ++t) {
    Tensor d({nv, 3});
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.3 * rng.normal();
    store.create("delta." + std::to_string(t), d);
  }
  Tensor baseline = Tensor::full({nv, 3}, 0.1);
  std::vector<Tensor> targets;
  for (int t = 0; t < 3; ++t) {
    Tensor m({nv, 3});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.1 + 0.05 * rng.normal();
    targets.push_back(m);
  }
  AdasTrajectory traj = trajectory(8.0, 20.0, 0, 2);
  const double lambda = 0.1;  // large enough to exercise the CDA path

  auto build = [&](ParameterStore& s, Graph& g) {
    std::vector<ValueId> norms;
    ValueId recon = g.constant(Tensor::scalar(0.0));
    for (int t = 0; t < 3; ++t) {
      ValueId d = g.param(s, "delta." + std::to_string(t));
      norms.push_back(g.frobenius_norm(d));
      ValueId rec = g.add(d, g.constant(baseline));
      ValueId diff = g.sub(rec, g.constant(targets[t]));
      recon = g.add(recon, g.sum(g.mul(diff, diff)));
    }
    recon = g.scale(recon, 1.0 / 3.0);
    return g.sub(recon, g.scale(cda_loss_graph(g, norms, traj), lambda));
  };
  auto loss = [&](ParameterStore& s) {
    Graph g;
    return g.scalar(build(s, g));
  };
  auto analytic = [&](ParameterStore& s) {
    Graph g;
    return forward_backward(g, build(s, g));
  };
  CHECK(grad_check(loss, analytic, store, 1e-5, 7).max_rel_err < 1e-4);
}
