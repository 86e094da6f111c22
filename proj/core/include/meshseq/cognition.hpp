#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "meshseq/graph.hpp"
#include "meshseq/model.hpp"

namespace meshseq {

// ADAS score quantizer: 19 interior edges at the 5%, 10%, ..., 95% empirical
// quantiles (nearest-rank) of the training split. bin(v) counts edges
// strictly below v, clamped to 19, so values below the lowest edge map to 0
// and values above the highest map to 19. When every edge coincides the
// quantizer degenerates to a single bin.
class AdasQuantizer {
 public:
  static constexpr double kScoreMin = 0.0;
  static constexpr double kScoreMax = 85.0;
  static constexpr std::size_t kEdges = kCognitiveBins - 1;

  static AdasQuantizer fit(std::vector<double> training_scores);  // >= 20 scores
  static AdasQuantizer from_edges(const std::array<double, kEdges>& edges);
  // evenly spaced edges over the score domain; fallback for tiny datasets
  static AdasQuantizer uniform();

  std::size_t bin(double value) const;
  const std::array<double, kEdges>& edges() const { return edges_; }

  std::string serialize() const;  // 19 decimals, space separated
  static AdasQuantizer parse(const std::string& text);

 private:
  std::array<double, kEdges> edges_{};
  bool degenerate_ = false;
};

// Endpoints of a per-patient ADAS trajectory; slope m = (final - first) over
// the index gap, ramp horizon T = last index carrying a score.
struct AdasTrajectory {
  bool valid = false;
  int first_index = 0;
  int last_index = 0;
  double first_score = 0.0;
  double last_score = 0.0;

  int horizon() const { return last_index; }
  double slope() const {
    return valid ? (last_score - first_score) / static_cast<double>(last_index - first_index)
                 : 0.0;
  }
};

// Scans slots 0..last_mesh_slot for ADAS scores; invalid when fewer than two
// distinct slots carry one (the CDA term is 0 by convention in that case).
AdasTrajectory make_trajectory(const std::vector<std::optional<double>>& adas_by_slot,
                               int last_mesh_slot);

// Cosine similarity between [||delta(0)||, ..., ||delta(T)||] and the ADAS
// ramp m * [0, ..., T]. Returns 0 when either vector is all-zero. norms must
// have exactly T+1 entries.
double cda_loss(const std::vector<double>& deformation_norms, const AdasTrajectory& trajectory);

// Graph counterpart over per-slot deformation-norm scalars (slots 0..T).
// Degenerate cases contribute a constant 0 with no gradient.
ValueId cda_loss_graph(Graph& g, const std::vector<ValueId>& norm_scalars,
                       const AdasTrajectory& trajectory);

// Per-patient inputs to the combined objective.
struct PatientLossTerms {
  std::vector<Tensor> reconstructions;   // observed visits, each V x 3
  std::vector<Tensor> targets;           // matching true meshes
  std::vector<double> deformation_norms; // slots 0..T (trajectory horizon)
  AdasTrajectory trajectory;
};

// mean over patients of [mean over observed visits of ||M_0 + delta(t) -
// M_t||^2_F] minus lambda times the mean per-patient CDA term.
double total_loss(const std::vector<PatientLossTerms>& patients, double lambda);

}  // namespace meshseq
