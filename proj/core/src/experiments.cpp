#include "meshseq/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "meshseq/optimizer.hpp"

namespace meshseq {

const char* experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::interpolation: return "interpolation";
    case ExperimentKind::extrapolation: return "extrapolation";
    case ExperimentKind::trajectory: return "trajectory";
  }
  return "?";
}

std::vector<double> ExperimentResult::model_errors() const {
  std::vector<double> out;
  out.reserve(errors.size());
  for (const auto& e : errors) out.push_back(e.mae);
  return out;
}

std::vector<double> ExperimentResult::baseline_errors() const {
  std::vector<double> out;
  out.reserve(errors.size());
  for (const auto& e : errors) out.push_back(e.baseline_mae);
  return out;
}

double median(std::vector<double> values) {
  require(!values.empty(), "median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double median_absolute_deviation(std::vector<double> values) {
  const double med = median(values);
  for (double& v : values) v = std::abs(v - med);
  return median(std::move(values));
}

namespace {

double mean_absolute_error(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "mean_absolute_error: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

void accumulate_vertex_error(Tensor& sum, const Tensor& pred, const Tensor& truth) {
  for (std::size_t v = 0; v < pred.rows(); ++v) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = pred.at(v, c) - truth.at(v, c);
      d2 += d * d;
    }
    sum[v] += std::sqrt(d2);
  }
}

// removal target slots per protocol; empty = patient skipped
std::vector<int> removal_slots(ExperimentKind kind, const PatientSequence& p) {
  std::vector<int> observed;
  for (int t = 0; t < static_cast<int>(kMaxSlots); ++t)
    if (p.slots[t].observed()) observed.push_back(t);
  const int last = observed.empty() ? -1 : observed.back();
  switch (kind) {
    case ExperimentKind::interpolation: {
      if (observed.size() < 3) return {};
      const int mu = last / 2;
      if (!p.slots[mu].observed() || mu == 0) return {};
      return {mu};
    }
    case ExperimentKind::extrapolation: {
      if (observed.size() < 2) return {};
      return {last};
    }
    case ExperimentKind::trajectory: {
      std::vector<int> targets;
      for (int t : observed)
        if (t != 0 && p.slots[t].month >= 24) targets.push_back(t);
      return targets;
    }
  }
  return {};
}

}  // namespace

ExperimentResult run_experiment(ExperimentKind kind,
                                const std::vector<PatientSequence>& test_set,
                                ParameterStore& store, const MeshHierarchy& hierarchy,
                                const ModelConfig& cfg, const AdasQuantizer& quantizer,
                                const EncodeHook& hook) {
  ExperimentResult result;
  result.kind = kind;
  result.vertex_error_sum = Tensor({hierarchy.template_mesh.vertex_count()});

  for (const auto& patient : test_set) {
    const std::vector<int> targets = removal_slots(kind, patient);
    if (targets.empty()) {
      ++result.skipped_patients;
      continue;
    }

    PatientSequence corrupted = patient;
    if (kind == ExperimentKind::trajectory) {
      // only the baseline mesh is input
      for (int t = 1; t < static_cast<int>(kMaxSlots); ++t) {
        corrupted.slots[t].mesh.reset();
        corrupted.slots[t].adas.reset();
      }
    } else {
      for (int t : targets) {
        corrupted.slots[t].mesh.reset();
        corrupted.slots[t].adas.reset();  // withheld score -> missing-value CE
      }
    }

    auto predictions = predict_sequence(corrupted, store, hierarchy, cfg, quantizer, hook);
    const Tensor& baseline = *patient.slots[0].mesh;
    for (int t : targets) {
      const Tensor& truth = *patient.slots[t].mesh;
      VisitError err;
      err.patient_id = patient.id;
      err.slot = t;
      err.month = patient.slots[t].month;
      err.mae = mean_absolute_error(predictions[t].reconstruction, truth);
      err.baseline_mae = mean_absolute_error(baseline, truth);
      result.errors.push_back(std::move(err));
      accumulate_vertex_error(result.vertex_error_sum, predictions[t].reconstruction, truth);
      ++result.prediction_count;
    }
  }
  return result;
}

std::string format_report(const std::vector<ExperimentResult>& results, const ParamCount& count) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-14s %14s %14s %14s %14s %6s %8s\n", "experiment",
                "median(x1e3)", "mad(x1e3)", "copy-med(x1e3)", "copy-mad(x1e3)", "n", "skipped");
  out << line;
  for (const auto& r : results) {
    if (r.errors.empty()) {
      std::snprintf(line, sizeof(line), "%-14s %14s %14s %14s %14s %6zu %8zu\n",
                    experiment_name(r.kind), "-", "-", "-", "-", r.errors.size(),
                    r.skipped_patients);
      out << line;
      continue;
    }
    std::snprintf(line, sizeof(line), "%-14s %14.3f %14.3f %14.3f %14.3f %6zu %8zu\n",
                  experiment_name(r.kind), median(r.model_errors()) * 1e3,
                  median_absolute_deviation(r.model_errors()) * 1e3,
                  median(r.baseline_errors()) * 1e3,
                  median_absolute_deviation(r.baseline_errors()) * 1e3, r.errors.size(),
                  r.skipped_patients);
    out << line;
  }
  std::snprintf(line, sizeof(line), "parameters: trainable %zu / total %zu (%.2f%%)\n",
                count.trainable, count.total, 100.0 * count.trainable_fraction());
  out << line;
  return out.str();
}

void write_report_tsv(const std::vector<ExperimentResult>& results, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_report_tsv: cannot open " + path);
  out << "experiment\tpatient\tslot\tmonth\tmae\tbaseline_mae\n";
  char buf[64];
  for (const auto& r : results)
    for (const auto& e : r.errors) {
      out << experiment_name(r.kind) << '\t' << e.patient_id << '\t' << e.slot << '\t' << e.month
          << '\t';
      std::snprintf(buf, sizeof(buf), "%.17g", e.mae);
      out << buf << '\t';
      std::snprintf(buf, sizeof(buf), "%.17g", e.baseline_mae);
      out << buf << '\n';
    }
  require(out.good(), "write_report_tsv: write failed");
}

void write_vertex_error_field(const ExperimentResult& result, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_vertex_error_field: cannot open " + path);
  char buf[64];
  const double inv = result.prediction_count > 0
                         ? 1.0 / static_cast<double>(result.prediction_count)
                         : 0.0;
  for (std::size_t v = 0; v < result.vertex_error_sum.size(); ++v) {
    std::snprintf(buf, sizeof(buf), "%.17g", result.vertex_error_sum[v] * inv);
    out << buf << '\n';
  }
  require(out.good(), "write_vertex_error_field: write failed");
}

std::vector<PatientSequence> impute_dataset(const std::vector<PatientSequence>& patients,
                                            const ImputationModel& model,
                                            const MeshHierarchy& hierarchy) {
  require(model.store && model.cfg && model.quantizer, "impute_dataset: incomplete model");
  std::vector<PatientSequence> out = patients;
  for (auto& p : out) {
    auto predictions = predict_sequence(p, *model.store, hierarchy, *model.cfg, *model.quantizer);
    for (int t = 0; t < static_cast<int>(kMaxSlots); ++t)
      if (!p.slots[t].observed()) p.slots[t].mesh = predictions[t].reconstruction;
  }
  return out;
}

namespace {

int label_of(const PatientSequence& p) {
  if (p.label == "converter") return 1;
  if (p.label == "stable") return 0;
  throw Error("classification: unknown label '" + p.label + "' for " + p.id);
}

ValueId classifier_logits(Graph& g, ParameterStore& store, const PatientSequence& patient,
                          const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                          const AdasQuantizer& quantizer) {
  PatientForward fwd = forward_patient(g, store, patient, hierarchy, cfg, quantizer);
  ValueId pooled = g.mean_rows_masked(fwd.outputs, fwd.key_masked);
  return g.linear(pooled, g.param(store, "classifier.head.w"),
                  g.param(store, "classifier.head.b"));
}

// cross-entropy of a [1 x 2] logit row against `label`
ValueId cross_entropy(Graph& g, ValueId logits, int label) {
  ValueId lse = g.log(g.sum(g.exp(logits)));
  ValueId picked = g.reshape(g.slice_cols(logits, static_cast<std::size_t>(label), 1), {1});
  return g.sub(lse, picked);
}

}  // namespace

ParameterStore train_classifier(const std::vector<PatientSequence>& train_set,
                                const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                                const AdasQuantizer& quantizer, const ClassificationOptions& opts,
                                std::uint64_t seed) {
  require(!train_set.empty(), "train_classifier: empty training set");
  ModelSpecOptions spec_opts;
  spec_opts.frozen = false;  // fine-tuned end-to-end
  spec_opts.classifier_head = true;
  ParameterStore store = init_store(build_param_specs(cfg, hierarchy, spec_opts), seed);

  AdamConfig adam = cfg.train.adam;
  adam.lr = opts.lr;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng(stream_seed(stream_seed(seed, 0x636c73ull), epoch));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      Graph g;
      ValueId loss = g.constant(Tensor::scalar(0.0));
      for (std::size_t k = start; k < end; ++k) {
        const PatientSequence& p = train_set[order[k]];
        loss = g.add(loss, cross_entropy(g, classifier_logits(g, store, p, hierarchy, cfg,
                                                              quantizer),
                                         label_of(p)));
      }
      loss = g.scale(loss, 1.0 / static_cast<double>(end - start));
      auto grads = forward_backward(g, loss);
      adam_step(store, grads, adam, ++step);
    }
  }
  return store;
}

double classifier_balanced_accuracy(ParameterStore& store,
                                    const std::vector<PatientSequence>& test_set,
                                    const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                                    const AdasQuantizer& quantizer) {
  std::size_t correct[2] = {0, 0}, total[2] = {0, 0};
  for (const auto& p : test_set) {
    const int label = label_of(p);
    Graph g;
    ValueId logits = classifier_logits(g, store, p, hierarchy, cfg, quantizer);
    const Tensor& l = g.value(logits);
    const int pred = l[1] > l[0] ? 1 : 0;
    ++total[label];
    if (pred == label) ++correct[label];
  }
  require(total[0] > 0 && total[1] > 0, "classification: single-class test split");
  const double r0 = static_cast<double>(correct[0]) / static_cast<double>(total[0]);
  const double r1 = static_cast<double>(correct[1]) / static_cast<double>(total[1]);
  return 0.5 * (r0 + r1);
}

namespace {

ClassificationArm run_arm(const std::vector<PatientSequence>& train_set,
                          const std::vector<PatientSequence>& test_set,
                          const MeshHierarchy& hierarchy, const ModelConfig& cfg,
                          const AdasQuantizer& quantizer, const ClassificationOptions& opts) {
  ClassificationArm arm;
  for (std::uint64_t seed : opts.seeds) {
    ParameterStore store = train_classifier(train_set, hierarchy, cfg, quantizer, opts, seed);
    arm.accuracies.push_back(
        classifier_balanced_accuracy(store, test_set, hierarchy, cfg, quantizer));
  }
  double sum = 0.0;
  for (double a : arm.accuracies) sum += a;
  arm.mean = sum / static_cast<double>(arm.accuracies.size());
  double var = 0.0;
  for (double a : arm.accuracies) var += (a - arm.mean) * (a - arm.mean);
  arm.stddev = arm.accuracies.size() > 1
                   ? std::sqrt(var / static_cast<double>(arm.accuracies.size() - 1))
                   : 0.0;
  return arm;
}

}  // namespace

ClassificationResult classify_trajectories(const std::vector<PatientSequence>& train_set,
                                           const std::vector<PatientSequence>& test_set,
                                           const MeshHierarchy& hierarchy,
                                           const ModelConfig& classifier_cfg,
                                           const ClassificationOptions& opts,
                                           const ImputationModel* imputation) {
  require(!opts.seeds.empty(), "classify_trajectories: need at least one seed");
  // the quantizer for CE bins is fit on the classification training split
  std::vector<double> scores;
  for (const auto& p : train_set)
    for (const auto& s : p.slots)
      if (s.has_visit() && s.adas) scores.push_back(*s.adas);
  AdasQuantizer quantizer =
      scores.size() >= 20 ? AdasQuantizer::fit(scores) : AdasQuantizer::uniform();

  ClassificationResult result;
  result.raw = run_arm(train_set, test_set, hierarchy, classifier_cfg, quantizer, opts);
  if (imputation) {
    auto train_imp = impute_dataset(train_set, *imputation, hierarchy);
    auto test_imp = impute_dataset(test_set, *imputation, hierarchy);
    result.imputed = run_arm(train_imp, test_imp, hierarchy, classifier_cfg, quantizer, opts);
    result.has_imputed = true;
  }
  return result;
}

}  // namespace meshseq
