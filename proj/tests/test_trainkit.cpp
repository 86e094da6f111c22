#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "meshseq/rng.hpp"
#include "meshseq/spiralnet.hpp"
#include "meshseq/trainer.hpp"

using namespace meshseq;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::create_directories(p);
  return p.string();
}

ModelConfig toy_config() { return model_preset("toy"); }

MeshHierarchy toy_hierarchy() {
  return precompute_hierarchy(make_icosahedron(), {{1, 6, 1}, {2, 6, 1}});
}

// synthetic in-memory patient with `months.size()` visits on the template
PatientSequence make_patient(const std::string& id, const MeshHierarchy& h,
                             const std::vector<int>& months, std::uint64_t seed,
                             double deform_scale = 0.02) {
  PatientSequence p;
  p.id = id;
  p.label = "stable";
  p.age = 70.0;
  p.sex = 'F';
  Rng rng(seed);
  Tensor base = h.template_mesh.coords();
  for (std::size_t i = 0; i < months.size(); ++i) {
    p.slots[i].month = months[i];
    Tensor coords = base;
    if (i > 0)
      for (std::size_t k = 0; k < coords.size(); ++k)
        coords[k] += deform_scale * static_cast<double>(i) * rng.normal();
    p.slots[i].mesh = coords;
    p.slots[i].adas = 10.0 + 2.0 * static_cast<double>(months[i]) / 12.0;
  }
  return p;
}

PatientSequence patient_with_n_observed(int n_obs, const MeshHierarchy& h) {
  std::vector<int> months;
  for (int i = 0; i < n_obs; ++i) months.push_back(i * 6);
  return make_patient("p", h, months, 1);
}

}  // namespace

TEST_CASE("fully observed patients have no key-masked slots") {
  MeshHierarchy h = toy_hierarchy();
  PatientSequence p = patient_with_n_observed(8, h);
  auto plan = plan_slots(p, AdasQuantizer::uniform());
  for (const auto& s : plan) {
    CHECK(s.observed);
    CHECK(!s.key_masked);
  }
}

TEST_CASE("two-visit patient gets six reference slots with missing CE, key-masked") {
  MeshHierarchy h = toy_hierarchy();
  PatientSequence p = make_patient("p", h, {0, 12}, 2);
  auto plan = plan_slots(p, AdasQuantizer::uniform());
  int masked = 0;
  for (int t = 0; t < 8; ++t) {
    if (t <= 1) {
      CHECK(plan[t].observed);
      CHECK(!plan[t].key_masked);
      CHECK(plan[t].mesh_source == t);
    } else {
      CHECK(!plan[t].observed);
      CHECK(plan[t].key_masked);
      CHECK(plan[t].mesh_source == 0);
      CHECK(plan[t].ce_index == static_cast<int>(kCognitiveBins));
      ++masked;
    }
  }
  CHECK(masked == 6);
}

TEST_CASE("missing ADAS at an observed visit selects the missing-value CE") {
  MeshHierarchy h = toy_hierarchy();
  PatientSequence p = make_patient("p", h, {0, 6, 12}, 3);
  p.slots[1].adas.reset();
  auto plan = plan_slots(p, AdasQuantizer::uniform());
  CHECK(plan[1].observed);
  CHECK(plan[1].ce_index == static_cast<int>(kCognitiveBins));
  CHECK(plan[0].ce_index < static_cast<int>(kCognitiveBins));
}

TEST_CASE("plan_slots requires the baseline mesh") {
  MeshHierarchy h = toy_hierarchy();
  PatientSequence p = make_patient("p", h, {0, 6}, 4);
  p.slots[0].mesh.reset();
  CHECK_THROWS_AS(plan_slots(p, AdasQuantizer::uniform()), Error);
}

TEST_CASE("augmentation counts follow the round-half-up law and sets are disjoint") {
  MeshHierarchy h = toy_hierarchy();
  for (int n_obs = 1; n_obs <= 8; ++n_obs) {
    PatientSequence p = patient_with_n_observed(n_obs, h);
    const int expect_sub = static_cast<int>(std::floor(0.35 * n_obs + 0.5));
    const int expect_shuf = static_cast<int>(std::floor(0.15 * n_obs + 0.5));
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
      Rng rng(seed);
      AugmentationPlan plan = make_augmentation_plan(p, rng);
      CHECK(static_cast<int>(plan.substituted.size()) == expect_sub);
      CHECK(static_cast<int>(plan.shuffled.size()) == expect_shuf);
      std::set<int> all(plan.substituted.begin(), plan.substituted.end());
      for (int s : plan.shuffled) CHECK(all.insert(s).second);
      for (int s : all) {
        CHECK(s >= 0);
        CHECK(s < n_obs);  // observed slots only
      }
      // shuffle sources are a permutation of the shuffle set
      std::set<int> shuffled(plan.shuffled.begin(), plan.shuffled.end());
      std::set<int> sources(plan.shuffle_source.begin(), plan.shuffle_source.end());
      CHECK(shuffled == sources);
    }
  }
}

TEST_CASE("augmentation plans are deterministic per seed") {
  MeshHierarchy h = toy_hierarchy();
  PatientSequence p = patient_with_n_observed(8, h);
  Rng r1(123), r2(123), r3(124);
  AugmentationPlan a = make_augmentation_plan(p, r1);
  AugmentationPlan b = make_augmentation_plan(p, r2);
  AugmentationPlan c = make_augmentation_plan(p, r3);
  CHECK(a.substituted == b.substituted);
  CHECK(a.shuffled == b.shuffled);
  CHECK(a.shuffle_source == b.shuffle_source);
  CHECK((a.substituted != c.substituted || a.shuffled != c.shuffled ||
         a.shuffle_source != c.shuffle_source));
}

TEST_CASE("augmentation rewires inputs but never alters targets or key masks") {
  MeshHierarchy h = toy_hierarchy();
  PatientSequence p = patient_with_n_observed(8, h);
  auto base = plan_slots(p, AdasQuantizer::uniform());

  AugmentationPlan aug;
  aug.substituted = {1, 4};
  aug.shuffled = {2, 5};
  aug.shuffle_source = {5, 2};
  auto plan = base;
  apply_augmentation(plan, aug);

  for (int t : aug.substituted) {
    CHECK(plan[t].mesh_source == 0);
    CHECK(plan[t].ce_index == static_cast<int>(kCognitiveBins));
    CHECK(plan[t].augmented);
    CHECK(!plan[t].key_masked);  // augmented slots stay visible to attention
    CHECK(plan[t].observed);     // target still exists
  }
  CHECK(plan[2].mesh_source == 5);
  CHECK(plan[5].mesh_source == 2);
  CHECK(plan[2].ce_index == base[5].ce_index);  // CE travels with the mesh embedding
  CHECK(plan[5].ce_index == base[2].ce_index);
  // untouched slots unchanged
  for (int t : {0, 3, 6, 7}) {
    CHECK(plan[t].mesh_source == base[t].mesh_source);
    CHECK(plan[t].ce_index == base[t].ce_index);
    CHECK(!plan[t].augmented);
  }
}

TEST_CASE("assembled slot embeddings are encode + positional + cognitive") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore store = init_store(build_param_specs(cfg, h, {}), 7);
  PatientSequence p = make_patient("p", h, {0, 6, 24}, 8);
  AdasQuantizer q = AdasQuantizer::uniform();

  SlotSequence seq = assemble_slots(p, store, h, cfg, q);
  REQUIRE(seq.embeddings.rows() == kMaxSlots);
  REQUIRE(seq.embeddings.cols() == cfg.transformer.dim);

  Tensor z1 = encode(*p.slots[1].mesh, store, h, cfg);
  const Tensor& pos = store.get("embed.positional").value;
  const Tensor& ce = store.get("embed.cognitive").value;
  const int bin = static_cast<int>(q.bin(*p.slots[1].adas));
  for (std::size_t c = 0; c < cfg.transformer.dim; ++c) {
    const double want = z1[c] + pos.at(1, c) + ce.at(bin, c);
    CHECK(seq.embeddings.at(1, c) == doctest::Approx(want).epsilon(1e-12));
  }
  // missing slot uses the reference embedding and the missing CE
  Tensor z0 = encode(*p.slots[0].mesh, store, h, cfg);
  for (std::size_t c = 0; c < cfg.transformer.dim; ++c) {
    const double want = z0[c] + pos.at(5, c) + ce.at(kCognitiveBins, c);
    CHECK(seq.embeddings.at(5, c) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(seq.key_masked[5] == 1);
  CHECK(seq.key_masked[1] == 0);
}

TEST_CASE("graph batch loss equals the numeric objective on predictions") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore store = init_store(build_param_specs(cfg, h, {}), 9);
  PatientSequence p = make_patient("p", h, {0, 6, 12, 24}, 10);
  AdasQuantizer q = AdasQuantizer::uniform();
  const double lambda = 1e-2;

  Graph g;
  std::vector<const PatientSequence*> batch{&p};
  ValueId loss = build_batch_loss(g, store, batch, h, cfg, q, {}, lambda);

  auto pred = predict_sequence(p, store, h, cfg, q);
  PatientLossTerms terms;
  const int last = p.last_mesh_slot();
  for (int t = 0; t <= last; ++t) {
    terms.reconstructions.push_back(pred[t].reconstruction);
    terms.targets.push_back(*p.slots[t].mesh);
  }
  terms.trajectory = make_trajectory(p.adas_by_slot(), last);
  for (int t = 0; t <= terms.trajectory.horizon(); ++t) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < pred[t].deformation.size(); ++i)
      n2 += pred[t].deformation[i] * pred[t].deformation[i];
    terms.deformation_norms.push_back(std::sqrt(n2));
  }
  CHECK(g.scalar(loss) == doctest::Approx(total_loss({terms}, lambda)).epsilon(1e-9));
}

TEST_CASE("training a single patient toward its baseline drives the loss to zero") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  cfg.train.lambda_cda = 0.0;
  cfg.train.batch_size = 1;
  ParameterStore store = init_store(build_param_specs(cfg, h, {}), 11);

  // all targets equal the baseline: the zero-deformation optimum exists
  PatientSequence p = make_patient("p", h, {0, 6, 12}, 12, 0.0);
  std::vector<PatientSequence> train_set{p};

  AdasQuantizer q = AdasQuantizer::uniform();
  const double before = evaluate_loss(store, train_set, h, cfg, q, 0.0);
  TrainOptions opts;
  opts.seed = 1;
  opts.epochs_override = 60;
  opts.augment = false;
  TrainResult res = train(store, train_set, {}, h, cfg, opts);
  const double after = evaluate_loss(store, train_set, h, cfg, res.quantizer, 0.0);
  CHECK(after < before);
  CHECK(after < 0.05 * before);
}

TEST_CASE("frozen transformer weights stay bit-identical through training") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  cfg.train.batch_size = 2;

  ModelSpecOptions frozen_opts;
  frozen_opts.frozen = true;
  ParameterStore store = init_store(build_param_specs(cfg, h, frozen_opts), 13);
  std::map<std::string, Tensor> before;
  for (const auto& [name, param] : store.entries())
    if (is_transformer_param(name)) before.emplace(name, param.value);

  std::vector<PatientSequence> train_set{make_patient("a", h, {0, 6, 12}, 14),
                                         make_patient("b", h, {0, 24}, 15)};
  TrainOptions opts;
  opts.seed = 2;
  opts.epochs_override = 5;
  train(store, train_set, {}, h, cfg, opts);

  bool ln_changed = false;
  for (const auto& [name, param] : store.entries()) {
    auto it = before.find(name);
    if (it == before.end()) continue;
    if (is_transformer_ln_param(name)) {
      for (std::size_t i = 0; i < param.value.size(); ++i)
        ln_changed = ln_changed || param.value[i] != it->second[i];
    } else {
      for (std::size_t i = 0; i < param.value.size(); ++i)
        CHECK(param.value[i] == it->second[i]);
    }
  }
  CHECK(ln_changed);
}

TEST_CASE("training is deterministic: same seed gives byte-identical checkpoints") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  cfg.train.batch_size = 2;

  auto run = [&](const std::string& dir) {
    ParameterStore store = init_store(build_param_specs(cfg, h, {}), 21);
    std::vector<PatientSequence> train_set{make_patient("a", h, {0, 6, 12}, 22),
                                           make_patient("b", h, {0, 24, 48}, 23)};
    TrainOptions opts;
    opts.seed = 9;
    opts.epochs_override = 8;
    opts.out_dir = dir;
    return train(store, train_set, {}, h, cfg, opts);
  };
  const std::string d1 = temp_dir("meshseq_det_a");
  const std::string d2 = temp_dir("meshseq_det_b");
  TrainResult r1 = run(d1);
  TrainResult r2 = run(d2);
  std::ifstream f1(r1.checkpoint_path, std::ios::binary), f2(r2.checkpoint_path, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(!b1.empty());
  CHECK(b1 == b2);
}

TEST_CASE("prediction with a zeroed decoder head returns the baseline everywhere") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore store = init_store(build_param_specs(cfg, h, {}), 31);
  store.get("mesh.dec.head.w0").value.fill(0.0);
  store.get("mesh.dec.head.b0").value.fill(0.0);

  PatientSequence p = make_patient("p", h, {0, 6, 36}, 32);
  auto pred = predict_sequence(p, store, h, cfg, AdasQuantizer::uniform());
  const Tensor& base = *p.slots[0].mesh;
  for (const auto& slot : pred) {
    for (std::size_t i = 0; i < slot.deformation.size(); ++i) CHECK(slot.deformation[i] == 0.0);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(slot.reconstruction[i] == base[i]);
  }
}

TEST_CASE("predictions are independent of other patients") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore store = init_store(build_param_specs(cfg, h, {}), 41);
  AdasQuantizer q = AdasQuantizer::uniform();
  PatientSequence p = make_patient("p", h, {0, 12, 24}, 42);
  PatientSequence other = make_patient("other", h, {0, 6}, 43);

  auto alone = predict_sequence(p, store, h, cfg, q);
  predict_sequence(other, store, h, cfg, q);  // interleaved evaluation
  auto again = predict_sequence(p, store, h, cfg, q);
  for (std::size_t t = 0; t < kMaxSlots; ++t)
    for (std::size_t i = 0; i < alone[t].deformation.size(); ++i)
      CHECK(alone[t].deformation[i] == again[t].deformation[i]);
}

TEST_CASE("encode hook reports every encoded source slot") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore store = init_store(build_param_specs(cfg, h, {}), 51);
  PatientSequence p = make_patient("p", h, {0, 6, 12}, 52);

  std::set<int> encoded;
  predict_sequence(p, store, h, cfg, AdasQuantizer::uniform(),
                   [&](const std::string& id, int slot) {
                     CHECK(id == "p");
                     encoded.insert(slot);
                   });
  CHECK(encoded == std::set<int>{0, 1, 2});
}
