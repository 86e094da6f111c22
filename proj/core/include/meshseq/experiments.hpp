#pragma once

#include <string>
#include <vector>

#include "meshseq/trainer.hpp"

namespace meshseq {

enum class ExperimentKind { interpolation, extrapolation, trajectory };

const char* experiment_name(ExperimentKind kind);

struct VisitError {
  std::string patient_id;
  int slot = 0;
  int month = 0;
  double mae = 0.0;           // model prediction
  double baseline_mae = 0.0;  // copy-reference (zero deformation)
};

// Per-(patient, visit) mean absolute vertex error in unit-cube units;
// aggregates follow the median +- MAD x 10^3 reporting convention.
struct ExperimentResult {
  ExperimentKind kind = ExperimentKind::interpolation;
  std::vector<VisitError> errors;
  std::size_t skipped_patients = 0;
  Tensor vertex_error_sum;  // per template vertex, Euclidean, summed over predictions
  std::size_t prediction_count = 0;

  std::vector<double> model_errors() const;
  std::vector<double> baseline_errors() const;
};

double median(std::vector<double> values);
double median_absolute_deviation(std::vector<double> values);

// Protocols (removed visits' meshes and ADAS never reach the model):
//  - interpolation: removes the slot floor(T_i / 2); needs >= 3 observed visits
//  - extrapolation: removes the last observed slot; needs >= 2
//  - trajectory: inputs only the baseline; targets every visit with
//    month >= 24
ExperimentResult run_experiment(ExperimentKind kind,
                                const std::vector<PatientSequence>& test_set,
                                ParameterStore& store, const MeshHierarchy& hierarchy,
                                const ModelConfig& cfg, const AdasQuantizer& quantizer,
                                const EncodeHook& hook = {});

// Aligned text table: median/MAD x 10^3 for model and copy-reference
// baseline, plus trainable/total parameter counts.
std::string format_report(const std::vector<ExperimentResult>& results, const ParamCount& count);
void write_report_tsv(const std::vector<ExperimentResult>& results, const std::string& path);
// one float per template vertex (mean Euclidean error, template order)
void write_vertex_error_field(const ExperimentResult& result, const std::string& path);

// --- trajectory classification ---

struct ImputationModel {
  ParameterStore* store = nullptr;
  const ModelConfig* cfg = nullptr;
  const AdasQuantizer* quantizer = nullptr;
};

// Fills every missing slot's mesh with the model's reconstruction; imputed
// slots join the attention keys while their ADAS stays missing.
std::vector<PatientSequence> impute_dataset(const std::vector<PatientSequence>& patients,
                                            const ImputationModel& model,
                                            const MeshHierarchy& hierarchy);

struct ClassificationOptions {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

struct ClassificationArm {
  std::vector<double> accuracies;  // balanced accuracy per seed
  double mean = 0.0;
  double stddev = 0.0;
};

struct ClassificationResult {
  ClassificationArm raw;
  ClassificationArm imputed;  // only when an imputation model was given
  bool has_imputed = false;
};

// Fine-tunes a fresh end-to-end classifier (mean-pool over unmasked slot
// outputs + linear head) per seed on each arm; both arms share splits, seeds
// and hyperparameters. Balanced accuracy is the mean of per-class recalls.
ClassificationResult classify_trajectories(const std::vector<PatientSequence>& train_set,
                                           const std::vector<PatientSequence>& test_set,
                                           const MeshHierarchy& hierarchy,
                                           const ModelConfig& classifier_cfg,
                                           const ClassificationOptions& opts,
                                           const ImputationModel* imputation);

// Balanced accuracy of one trained classifier store on a test set.
double classifier_balanced_accuracy(ParameterStore& store,
                                    const std::vector<PatientSequence>& test_set,
                                    const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                                    const AdasQuantizer& quantizer);

// Trains one classifier (fresh seeded store) and returns it.
ParameterStore train_classifier(const std::vector<PatientSequence>& train_set,
                                const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                                const AdasQuantizer& quantizer, const ClassificationOptions& opts,
                                std::uint64_t seed);

}  // namespace meshseq
