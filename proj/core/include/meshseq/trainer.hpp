#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "meshseq/cognition.hpp"
#include "meshseq/dataset.hpp"
#include "meshseq/graph.hpp"
#include "meshseq/model.hpp"
#include "meshseq/rng.hpp"

namespace meshseq {

// Called for every true-mesh encoding with (patient id, source slot); lets
// tests verify that removed visits never reach the encoder.
using EncodeHook = std::function<void(const std::string&, int)>;

// Masking/shuffling augmentation over observed slots. Substituted slots'
// embeddings are replaced by the reference embedding (+ missing CE);
// shuffled slots' mesh embeddings (with their CEs) are permuted among
// themselves. Both stay un-key-masked and targets are untouched.
struct AugmentationPlan {
  std::vector<int> substituted;     // sorted observed-slot indices
  std::vector<int> shuffled;        // sorted observed-slot indices, disjoint
  std::vector<int> shuffle_source;  // slot shuffled[i] takes the mesh of shuffle_source[i]
};

// |substituted| = round(0.35 n_obs), |shuffled| = round(0.15 n_obs),
// round-half-up, drawn over observed slots only.
AugmentationPlan make_augmentation_plan(const PatientSequence& patient, Rng& rng);

// Index-level slot description shared by assembly and augmentation.
struct SlotPlan {
  int mesh_source = 0;  // slot whose true mesh is encoded for this slot
  int ce_index = static_cast<int>(kCognitiveBins);  // 0..19 bin, 20 = missing
  bool observed = false;
  bool augmented = false;
  bool key_masked = true;
};

// Observed slot t -> encode(M_t) + pos_t + CE[bin(ADAS_t)] (CE[missing] when
// the score is absent); missing slot -> encode(M_0) + pos_t + CE[missing],
// key-masked. Baseline mesh must be present.
std::array<SlotPlan, kMaxSlots> plan_slots(const PatientSequence& patient,
                                           const AdasQuantizer& quantizer);
void apply_augmentation(std::array<SlotPlan, kMaxSlots>& plan, const AugmentationPlan& aug);

// Numeric slot assembly (modulated embeddings), the seqcore SlotSequence.
struct SlotSequence {
  Tensor embeddings;  // T_max x D
  std::array<SlotPlan, kMaxSlots> plan;
  std::vector<std::uint8_t> key_masked;  // T_max
};
SlotSequence assemble_slots(const PatientSequence& patient, ParameterStore& store,
                            const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                            const AdasQuantizer& quantizer,
                            const AugmentationPlan* augmentation = nullptr,
                            const EncodeHook& hook = {});

// Graph forward shared by training, imputation and the experiments.
struct PatientForward {
  ValueId outputs = 0;  // T_max x D transformer outputs
  std::array<SlotPlan, kMaxSlots> plan;
  std::vector<std::uint8_t> key_masked;
};
PatientForward forward_patient(Graph& g, ParameterStore& store, const PatientSequence& patient,
                               const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                               const AdasQuantizer& quantizer,
                               const AugmentationPlan* augmentation = nullptr,
                               const EncodeHook& hook = {});

// Reconstruction + CDA objective over one batch of patients; returns the
// scalar loss node.
ValueId build_batch_loss(Graph& g, ParameterStore& store,
                         const std::vector<const PatientSequence*>& batch,
                         const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                         const AdasQuantizer& quantizer,
                         const std::vector<const AugmentationPlan*>& augmentations,
                         double lambda);

struct TrainOptions {
  std::uint64_t seed = 0;
  std::size_t epochs_override = 0;  // 0: cfg.train.epochs
  std::string out_dir;              // empty: keep everything in memory
  bool augment = true;
  bool verbose = false;
};

struct TrainResult {
  std::size_t epochs_run = 0;
  double final_train_loss = 0.0;
  double best_val_loss = 0.0;
  std::string checkpoint_path;  // empty when out_dir empty
  AdasQuantizer quantizer;
};

// Full training loop: assemble, augment, forward, total loss, Adam. The
// quantizer is fit on the training split's ADAS scores. Best-validation
// checkpoint is kept (final checkpoint when no validation set). Deterministic
// given (seed, data, config). A non-finite loss aborts, naming the patient.
TrainResult train(ParameterStore& store, const std::vector<PatientSequence>& train_set,
                  const std::vector<PatientSequence>& val_set, const MeshHierarchy& hierarchy,
                  const ModelConfig& cfg, const TrainOptions& opts);

// Inference: outputs at every slot including missing ones; no augmentation.
struct SlotPrediction {
  Tensor deformation;     // V x 3
  Tensor reconstruction;  // M_0 + deformation
};
std::array<SlotPrediction, kMaxSlots> predict_sequence(const PatientSequence& patient,
                                                       ParameterStore& store,
                                                       const MeshHierarchy& hierarchy,
                                                       const ModelConfig& cfg,
                                                       const AdasQuantizer& quantizer,
                                                       const EncodeHook& hook = {});

// Validation-style loss without augmentation (used for the metric log).
double evaluate_loss(ParameterStore& store, const std::vector<PatientSequence>& patients,
                     const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                     const AdasQuantizer& quantizer, double lambda);

}  // namespace meshseq
