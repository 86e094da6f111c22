#include "meshseq/cognition.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace meshseq {

AdasQuantizer AdasQuantizer::fit(std::vector<double> training_scores) {
  require(training_scores.size() >= 20, "AdasQuantizer::fit: need at least 20 training scores");
  std::sort(training_scores.begin(), training_scores.end());
  const std::size_t n = training_scores.size();
  AdasQuantizer q;
  for (std::size_t k = 1; k <= kEdges; ++k) {
    // nearest-rank: smallest value with at least p% of the data at or below it
    const double p = 5.0 * static_cast<double>(k);
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::max<std::size_t>(1, std::min(rank, n));
    q.edges_[k - 1] = training_scores[rank - 1];
  }
  q.degenerate_ = q.edges_.front() == q.edges_.back();
  return q;
}

AdasQuantizer AdasQuantizer::uniform() {
  std::array<double, kEdges> edges;
  for (std::size_t k = 1; k <= kEdges; ++k)
    edges[k - 1] = kScoreMax * static_cast<double>(k) / static_cast<double>(kCognitiveBins);
  return from_edges(edges);
}

AdasQuantizer AdasQuantizer::from_edges(const std::array<double, kEdges>& edges) {
  for (std::size_t i = 1; i < edges.size(); ++i)
    require(edges[i] >= edges[i - 1], "AdasQuantizer: edges must be non-decreasing");
  AdasQuantizer q;
  q.edges_ = edges;
  q.degenerate_ = edges.front() == edges.back();
  return q;
}

std::size_t AdasQuantizer::bin(double value) const {
  if (degenerate_) return 0;
  std::size_t b = 0;
  for (double e : edges_)
    if (e < value) ++b;
  return std::min<std::size_t>(b, kCognitiveBins - 1);
}

std::string AdasQuantizer::serialize() const {
  std::ostringstream out;
  char buf[64];
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", edges_[i]);
    out << (i ? " " : "") << buf;
  }
  return out.str();
}

AdasQuantizer AdasQuantizer::parse(const std::string& text) {
  std::istringstream in(text);
  std::array<double, kEdges> edges;
  for (auto& e : edges) {
    in >> e;
    require(!in.fail(), "AdasQuantizer::parse: expected 19 numbers");
  }
  return from_edges(edges);
}

AdasTrajectory make_trajectory(const std::vector<std::optional<double>>& adas_by_slot,
                               int last_mesh_slot) {
  AdasTrajectory t;
  bool seen = false;
  for (int i = 0; i <= last_mesh_slot && i < static_cast<int>(adas_by_slot.size()); ++i) {
    if (!adas_by_slot[i].has_value()) continue;
    if (!seen) {
      seen = true;
      t.first_index = i;
      t.first_score = *adas_by_slot[i];
    }
    t.last_index = i;
    t.last_score = *adas_by_slot[i];
  }
  t.valid = seen && t.last_index > t.first_index;
  return t;
}

namespace {

double ramp_norm(int horizon, double m) {
  double s = 0.0;
  for (int t = 0; t <= horizon; ++t) s += (m * t) * (m * t);
  return std::sqrt(s);
}

}  // namespace

double cda_loss(const std::vector<double>& deformation_norms, const AdasTrajectory& trajectory) {
  if (!trajectory.valid) return 0.0;
  const int horizon = trajectory.horizon();
  require(static_cast<int>(deformation_norms.size()) == horizon + 1,
          "cda_loss: norms length must be T + 1");
  for (double n : deformation_norms) require(n >= 0.0, "cda_loss: norms must be non-negative");
  const double m = trajectory.slope();
  if (m == 0.0) return 0.0;
  double dot = 0.0, a2 = 0.0;
  for (int t = 0; t <= horizon; ++t) {
    dot += deformation_norms[t] * (m * t);
    a2 += deformation_norms[t] * deformation_norms[t];
  }
  if (a2 == 0.0) return 0.0;
  return dot / (std::sqrt(a2) * ramp_norm(horizon, m));
}

ValueId cda_loss_graph(Graph& g, const std::vector<ValueId>& norm_scalars,
                       const AdasTrajectory& trajectory) {
  if (!trajectory.valid) return g.constant(Tensor::scalar(0.0));
  const int horizon = trajectory.horizon();
  require(static_cast<int>(norm_scalars.size()) == horizon + 1,
          "cda_loss_graph: norms length must be T + 1");
  const double m = trajectory.slope();
  if (m == 0.0) return g.constant(Tensor::scalar(0.0));

  ValueId a = g.stack_scalars(norm_scalars);
  bool all_zero = true;
  for (std::size_t i = 0; i < g.value(a).size(); ++i) all_zero &= g.value(a)[i] == 0.0;
  if (all_zero) return g.constant(Tensor::scalar(0.0));

  Tensor ramp({static_cast<std::size_t>(horizon + 1)});
  for (int t = 0; t <= horizon; ++t) ramp[t] = m * t;
  ValueId b = g.constant(std::move(ramp));
  ValueId numerator = g.dot(a, b);
  ValueId denom = g.mul(g.frobenius_norm(a), g.frobenius_norm(b));
  return g.div(numerator, denom);
}

double total_loss(const std::vector<PatientLossTerms>& patients, double lambda) {
  require(!patients.empty(), "total_loss: no patients");
  double recon_sum = 0.0, cda_sum = 0.0;
  for (const auto& p : patients) {
    require(!p.reconstructions.empty(), "total_loss: patient has no observed visits");
    require(p.reconstructions.size() == p.targets.size(),
            "total_loss: reconstruction/target count mismatch");
    double r = 0.0;
    for (std::size_t i = 0; i < p.reconstructions.size(); ++i) {
      require(p.reconstructions[i].same_shape(p.targets[i]), "total_loss: shape mismatch");
      double s = 0.0;
      for (std::size_t j = 0; j < p.reconstructions[i].size(); ++j) {
        const double d = p.reconstructions[i][j] - p.targets[i][j];
        s += d * d;
      }
      r += s;
    }
    recon_sum += r / static_cast<double>(p.reconstructions.size());
    cda_sum += cda_loss(p.deformation_norms, p.trajectory);
  }
  const double n = static_cast<double>(patients.size());
  return recon_sum / n - lambda * (cda_sum / n);
}

}  // namespace meshseq
