#include "meshseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include "meshseq/optimizer.hpp"
#include "meshseq/spiralnet.hpp"
#include "meshseq/transformer.hpp"

namespace fs = std::filesystem;

namespace meshseq {

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

constexpr int kMissingCe = static_cast<int>(kCognitiveBins);

}  // namespace

AugmentationPlan make_augmentation_plan(const PatientSequence& patient, Rng& rng) {
  std::vector<int> observed;
  for (int t = 0; t < static_cast<int>(kMaxSlots); ++t)
    if (patient.slots[t].observed()) observed.push_back(t);
  const int n_obs = static_cast<int>(observed.size());
  const int n_sub = round_half_up(0.35 * n_obs);
  const int n_shuf = round_half_up(0.15 * n_obs);

  rng.shuffle(observed);
  AugmentationPlan plan;
  plan.substituted.assign(observed.begin(), observed.begin() + n_sub);
  plan.shuffled.assign(observed.begin() + n_sub, observed.begin() + n_sub + n_shuf);
  std::sort(plan.substituted.begin(), plan.substituted.end());
  std::sort(plan.shuffled.begin(), plan.shuffled.end());
  plan.shuffle_source = plan.shuffled;
  rng.shuffle(plan.shuffle_source);
  return plan;
}

std::array<SlotPlan, kMaxSlots> plan_slots(const PatientSequence& patient,
                                           const AdasQuantizer& quantizer) {
  require(patient.slots[0].observed(), "plan_slots: baseline mesh missing for " + patient.id);
  std::array<SlotPlan, kMaxSlots> plan;
  for (int t = 0; t < static_cast<int>(kMaxSlots); ++t) {
    SlotPlan& s = plan[t];
    const VisitSlot& slot = patient.slots[t];
    if (slot.observed()) {
      s.mesh_source = t;
      s.ce_index = slot.adas ? static_cast<int>(quantizer.bin(*slot.adas)) : kMissingCe;
      s.observed = true;
      s.key_masked = false;
    } else {
      s.mesh_source = 0;  // reference embedding
      s.ce_index = kMissingCe;
      s.observed = false;
      s.key_masked = true;
    }
  }
  return plan;
}

void apply_augmentation(std::array<SlotPlan, kMaxSlots>& plan, const AugmentationPlan& aug) {
  for (int t : aug.substituted)
    for (int s : aug.shuffled)
      require(t != s, "apply_augmentation: substitution and shuffle sets overlap");
  const std::array<SlotPlan, kMaxSlots> original = plan;
  for (int t : aug.substituted) {
    require(original[t].observed, "apply_augmentation: substituted slot not observed");
    plan[t].mesh_source = 0;
    plan[t].ce_index = kMissingCe;
    plan[t].augmented = true;
    // stays un-key-masked; the target remains the true mesh
  }
  for (std::size_t i = 0; i < aug.shuffled.size(); ++i) {
    const int dst = aug.shuffled[i];
    const int src = aug.shuffle_source[i];
    require(original[dst].observed && original[src].observed,
            "apply_augmentation: shuffled slot not observed");
    plan[dst].mesh_source = original[src].mesh_source;
    plan[dst].ce_index = original[src].ce_index;  // CE travels with the mesh embedding
    plan[dst].augmented = true;
  }
}

namespace {

struct AssembledRows {
  std::vector<ValueId> rows;  // T_max, each [1 x D]
  std::array<SlotPlan, kMaxSlots> plan;
  std::vector<std::uint8_t> key_masked;
};

AssembledRows assemble_rows(Graph& g, ParameterStore& store, const PatientSequence& patient,
                            const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                            const AdasQuantizer& quantizer, const AugmentationPlan* augmentation,
                            const EncodeHook& hook) {
  AssembledRows out;
  out.plan = plan_slots(patient, quantizer);
  if (augmentation) apply_augmentation(out.plan, *augmentation);

  // encode each distinct source mesh once
  std::map<int, ValueId> embeddings;
  for (const SlotPlan& s : out.plan) {
    if (embeddings.count(s.mesh_source)) continue;
    const VisitSlot& slot = patient.slots[s.mesh_source];
    require(slot.observed(), "assemble_rows: source slot has no mesh");
    if (hook) hook(patient.id, s.mesh_source);
    ValueId coords = g.constant(*slot.mesh);
    embeddings[s.mesh_source] = encode_mesh(g, store, coords, hierarchy, cfg);
  }

  ValueId pos = g.param(store, "embed.positional");
  ValueId ce = g.param(store, "embed.cognitive");
  out.key_masked.resize(kMaxSlots);
  for (int t = 0; t < static_cast<int>(kMaxSlots); ++t) {
    const SlotPlan& s = out.plan[t];
    ValueId row = g.add(embeddings[s.mesh_source], g.slice_row(pos, t));
    row = g.add(row, g.slice_row(ce, s.ce_index));
    out.rows.push_back(row);
    out.key_masked[t] = s.key_masked ? 1 : 0;
  }
  return out;
}

}  // namespace

SlotSequence assemble_slots(const PatientSequence& patient, ParameterStore& store,
                            const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                            const AdasQuantizer& quantizer, const AugmentationPlan* augmentation,
                            const EncodeHook& hook) {
  Graph g;
  AssembledRows rows =
      assemble_rows(g, store, patient, hierarchy, cfg, quantizer, augmentation, hook);
  SlotSequence seq;
  seq.embeddings = g.value(g.stack_rows(rows.rows));
  seq.plan = rows.plan;
  seq.key_masked = rows.key_masked;
  return seq;
}

PatientForward forward_patient(Graph& g, ParameterStore& store, const PatientSequence& patient,
                               const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                               const AdasQuantizer& quantizer,
                               const AugmentationPlan* augmentation, const EncodeHook& hook) {
  AssembledRows rows =
      assemble_rows(g, store, patient, hierarchy, cfg, quantizer, augmentation, hook);
  PatientForward fwd;
  fwd.plan = rows.plan;
  fwd.key_masked = rows.key_masked;
  ValueId x = g.stack_rows(rows.rows);
  fwd.outputs = transformer_forward(g, store, x, rows.key_masked, cfg.transformer);
  return fwd;
}

ValueId build_batch_loss(Graph& g, ParameterStore& store,
                         const std::vector<const PatientSequence*>& batch,
                         const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                         const AdasQuantizer& quantizer,
                         const std::vector<const AugmentationPlan*>& augmentations,
                         double lambda) {
  require(!batch.empty(), "build_batch_loss: empty batch");
  require(augmentations.empty() || augmentations.size() == batch.size(),
          "build_batch_loss: augmentation count mismatch");

  ValueId recon_total = g.constant(Tensor::scalar(0.0));
  ValueId cda_total = g.constant(Tensor::scalar(0.0));
  for (std::size_t pi = 0; pi < batch.size(); ++pi) {
    const PatientSequence& patient = *batch[pi];
    const AugmentationPlan* aug = augmentations.empty() ? nullptr : augmentations[pi];
    PatientForward fwd = forward_patient(g, store, patient, hierarchy, cfg, quantizer, aug);

    const int last = patient.last_mesh_slot();
    require(last >= 0, "build_batch_loss: patient " + patient.id + " has no observed visits");
    const AdasTrajectory traj = make_trajectory(patient.adas_by_slot(), last);

    std::vector<ValueId> recon_terms;
    std::vector<ValueId> norm_scalars;
    const int decode_until = std::max(last, traj.valid ? traj.horizon() : 0);
    for (int t = 0; t <= decode_until; ++t) {
      const bool want_recon = fwd.plan[t].observed;
      const bool want_norm = traj.valid && t <= traj.horizon();
      if (!want_recon && !want_norm) continue;
      ValueId z = g.slice_row(fwd.outputs, t);
      ValueId delta = decode_embedding(g, store, z, hierarchy, cfg);
      if (want_norm) norm_scalars.push_back(g.frobenius_norm(delta));
      if (want_recon) {
        ValueId recon = g.add(delta, g.constant(*patient.slots[0].mesh));
        ValueId diff = g.sub(recon, g.constant(*patient.slots[t].mesh));
        recon_terms.push_back(g.sum(g.mul(diff, diff)));
      }
    }
    require(!recon_terms.empty(), "build_batch_loss: no reconstruction terms for " + patient.id);
    ValueId recon = recon_terms[0];
    for (std::size_t i = 1; i < recon_terms.size(); ++i) recon = g.add(recon, recon_terms[i]);
    recon = g.scale(recon, 1.0 / static_cast<double>(recon_terms.size()));
    recon_total = g.add(recon_total, recon);

    if (traj.valid) cda_total = g.add(cda_total, cda_loss_graph(g, norm_scalars, traj));
  }
  const double inv_p = 1.0 / static_cast<double>(batch.size());
  return g.sub(g.scale(recon_total, inv_p), g.scale(cda_total, lambda * inv_p));
}

double evaluate_loss(ParameterStore& store, const std::vector<PatientSequence>& patients,
                     const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                     const AdasQuantizer& quantizer, double lambda) {
  require(!patients.empty(), "evaluate_loss: empty set");
  double total = 0.0;
  for (const auto& p : patients) {
    Graph g;
    std::vector<const PatientSequence*> one{&p};
    ValueId loss = build_batch_loss(g, store, one, hierarchy, cfg, quantizer, {}, lambda);
    total += g.scalar(loss);
  }
  return total / static_cast<double>(patients.size());
}

TrainResult train(ParameterStore& store, const std::vector<PatientSequence>& train_set,
                  const std::vector<PatientSequence>& val_set, const MeshHierarchy& hierarchy,
                  const ModelConfig& cfg, const TrainOptions& opts) {
  require(!train_set.empty(), "train: empty training split");

  std::vector<double> scores;
  for (const auto& p : train_set)
    for (const auto& s : p.slots)
      if (s.has_visit() && s.adas) scores.push_back(*s.adas);
  TrainResult result;
  result.quantizer = scores.size() >= 20 ? AdasQuantizer::fit(scores) : AdasQuantizer::uniform();

  std::ofstream metrics;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    metrics.open((fs::path(opts.out_dir) / "metrics.log").string());
    require(metrics.good(), "train: cannot open metrics log");
  }

  const std::size_t epochs = opts.epochs_override ? opts.epochs_override : cfg.train.epochs;
  const std::size_t batch_size = std::max<std::size_t>(1, cfg.train.batch_size);
  const double lambda = cfg.train.lambda_cda;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t step = 0;
  const std::string ckpt_path =
      opts.out_dir.empty() ? "" : (fs::path(opts.out_dir) / "checkpoint.cshw").string();
  bool saved_any = false;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(stream_seed(stream_seed(opts.seed, 0x73687566ull), epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<const PatientSequence*> batch;
      std::vector<AugmentationPlan> plans;
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&train_set[order[k]]);
        if (opts.augment) {
          Rng aug_rng(stream_seed(stream_seed(opts.seed, 0x617567ull),
                                  epoch * 1000003ull + order[k]));
          plans.push_back(make_augmentation_plan(train_set[order[k]], aug_rng));
        }
      }
      std::vector<const AugmentationPlan*> plan_ptrs;
      for (const auto& p : plans) plan_ptrs.push_back(&p);

      Graph g;
      ValueId loss = build_batch_loss(g, store, batch, hierarchy, cfg, result.quantizer,
                                      plan_ptrs, lambda);
      if (!std::isfinite(g.scalar(loss)))
        throw Error("train: non-finite loss in batch starting with patient " + batch[0]->id);
      auto grads = forward_backward(g, loss);
      adam_step(store, grads, cfg.train.adam, ++step);
      epoch_loss += g.scalar(loss);
      ++n_batches;
    }
    epoch_loss /= static_cast<double>(n_batches);
    result.final_train_loss = epoch_loss;
    result.epochs_run = epoch + 1;

    double val_loss = epoch_loss;
    if (!val_set.empty())
      val_loss = evaluate_loss(store, val_set, hierarchy, cfg, result.quantizer, lambda);
    if (metrics.is_open()) {
      char line[96];
      std::snprintf(line, sizeof(line), "%zu %.17g %.17g\n", epoch + 1, epoch_loss, val_loss);
      metrics << line;
    }
    if (opts.verbose && (epoch % 50 == 0 || epoch + 1 == epochs))
      std::fprintf(stderr, "epoch %zu train %.6g val %.6g\n", epoch + 1, epoch_loss, val_loss);

    if (!val_set.empty()) {
      if (val_loss < best_val) {
        best_val = val_loss;
        since_best = 0;
        if (!ckpt_path.empty()) {
          save_checkpoint(store, ckpt_path);
          saved_any = true;
        }
      } else if (++since_best >= cfg.train.patience && cfg.train.patience > 0) {
        break;
      }
    }
  }

  result.best_val_loss = val_set.empty() ? result.final_train_loss : best_val;
  if (!ckpt_path.empty() && (val_set.empty() || !saved_any)) save_checkpoint(store, ckpt_path);
  result.checkpoint_path = ckpt_path;
  return result;
}

std::array<SlotPrediction, kMaxSlots> predict_sequence(const PatientSequence& patient,
                                                       ParameterStore& store,
                                                       const MeshHierarchy& hierarchy,
                                                       const ModelConfig& cfg,
                                                       const AdasQuantizer& quantizer,
                                                       const EncodeHook& hook) {
  Graph g;
  PatientForward fwd = forward_patient(g, store, patient, hierarchy, cfg, quantizer, nullptr, hook);
  std::array<SlotPrediction, kMaxSlots> out;
  const Tensor& baseline = *patient.slots[0].mesh;
  for (int t = 0; t < static_cast<int>(kMaxSlots); ++t) {
    ValueId delta = decode_embedding(g, store, g.slice_row(fwd.outputs, t), hierarchy, cfg);
    out[t].deformation = g.value(delta);
    out[t].reconstruction = baseline;
    axpy(1.0, out[t].deformation, out[t].reconstruction);
  }
  return out;
}

}  // namespace meshseq
