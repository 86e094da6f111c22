// meshseq: longitudinal anatomical-mesh sequence modeling CLI.
//
// Subcommands: precompute, synth, split, train, eval, impute, classify,
// gradcheck, initckpt. Exit codes: 0 success, 1 runtime failure (one-line
// diagnostic on stderr), 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "meshseq/experiments.hpp"
#include "meshseq/gradcheck.hpp"
#include "meshseq/spiralnet.hpp"
#include "meshseq/transformer.hpp"

namespace fs = std::filesystem;
using namespace meshseq;

namespace {

struct CommonArgs {
  std::string config = "toy32";
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string checkpoint;
  std::string frozen = "off";
};

bool frozen_flag(const std::string& value) {
  if (value == "on") return true;
  if (value == "off") return false;
  throw Error("--frozen must be 'on' or 'off', got '" + value + "'");
}

void write_run_manifest(const std::string& path, const ModelConfig& cfg, std::uint64_t seed,
                        const AdasQuantizer& quantizer, const std::string& train_manifest,
                        const std::string& val_manifest, const std::string& hierarchy_path,
                        const std::string& checkpoint_path, bool frozen) {
  std::ofstream out(path);
  require(out.good(), "cannot open run manifest " + path);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  out << "seed = " << seed << '\n';
  out << "config_hash = " << buf << '\n';
  out << "frozen = " << (frozen ? "on" : "off") << '\n';
  out << "quantizer_edges = " << quantizer.serialize() << '\n';
  out << "train_manifest = " << train_manifest << '\n';
  out << "val_manifest = " << (val_manifest.empty() ? "-" : val_manifest) << '\n';
  out << "hierarchy = " << hierarchy_path << '\n';
  out << "checkpoint = " << checkpoint_path << '\n';
  require(out.good(), "run manifest write failed");
}

AdasQuantizer quantizer_for_eval(const CommonArgs& common, const std::string& run_path) {
  std::string path = run_path;
  if (path.empty())
    path = (fs::path(common.checkpoint).parent_path() / "run_manifest.txt").string();
  if (fs::exists(path)) {
    KeyValues kv = KeyValues::from_file(path);
    require(kv.has("quantizer_edges"), "run manifest " + path + " has no quantizer_edges");
    return AdasQuantizer::parse(kv.get("quantizer_edges", ""));
  }
  std::fprintf(stderr, "warning: no run manifest at %s, using uniform quantizer bins\n",
               path.c_str());
  return AdasQuantizer::uniform();
}

std::vector<PatientSequence> load_split(const std::string& manifest_path,
                                        const MeshHierarchy& hierarchy) {
  DatasetManifest manifest = load_manifest(manifest_path, hierarchy.template_mesh.vertex_count());
  return load_dataset(manifest, hierarchy.normalization, hierarchy.template_mesh.vertex_count());
}

// ---------------------------------------------------------------------------

int cmd_precompute(const CommonArgs& common, const std::string& template_path) {
  Mesh tpl = load_mesh(template_path);
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy h = precompute_hierarchy(tpl, cfg.mesh.levels);
  fs::create_directories(common.out);
  const std::string out_path = (fs::path(common.out) / "hierarchy.cshh").string();
  save_hierarchy(h, out_path);
  std::printf("hierarchy: %zu levels, vertex counts", h.level_count());
  for (std::size_t i = 0; i < h.level_count(); ++i) std::printf(" %zu", h.vertex_count(i));
  std::printf(" -> %s\n", out_path.c_str());
  return 0;
}

int cmd_synth(const CommonArgs& common, const std::string& template_path, std::size_t n_patients,
              const std::string& profile_name) {
  Mesh tpl;
  if (template_path.empty()) {
    tpl = make_icosphere(2);
    std::printf("no --template given; using a 162-vertex icosphere\n");
  } else {
    tpl = load_mesh(template_path);
  }
  SynthProfile profile = SynthProfile::preset(profile_name);
  if (!is_model_preset(common.config) && fs::exists(common.config)) {
    KeyValues kv = KeyValues::from_file(common.config);
    if (kv.has("synth.profile") || profile_name == "default")
      profile = SynthProfile::from_key_values(kv);
  }
  DatasetManifest manifest = synth_generate(tpl, n_patients, common.seed, profile, common.out);
  const std::string manifest_path = (fs::path(common.out) / "manifest.tsv").string();
  save_manifest(manifest, manifest_path);
  std::size_t visits = 0;
  for (const auto& rec : manifest.records) visits += rec.visits.size();
  std::printf("generated %zu patients, %zu visits -> %s\n", manifest.records.size(), visits,
              manifest_path.c_str());
  return 0;
}

int cmd_split(const CommonArgs& common, const std::string& manifest_path,
              const std::string& fractions) {
  DatasetManifest manifest = load_manifest(manifest_path);
  SplitSpec spec;
  if (!fractions.empty()) {
    const int n = std::sscanf(fractions.c_str(), "%lf,%lf,%lf", &spec.train, &spec.val, &spec.test);
    require(n == 3, "--fractions must be train,val,test");
  }
  SplitResult split = stratified_split(manifest, spec, common.seed);
  for (const auto& w : split.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  fs::create_directories(common.out);
  save_manifest(split.train, (fs::path(common.out) / "train.tsv").string());
  save_manifest(split.val, (fs::path(common.out) / "val.tsv").string());
  save_manifest(split.test, (fs::path(common.out) / "test.tsv").string());
  std::printf("split %zu patients into %zu/%zu/%zu -> %s/{train,val,test}.tsv\n",
              manifest.records.size(), split.train.records.size(), split.val.records.size(),
              split.test.records.size(), common.out.c_str());
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& manifest_path,
              const std::string& val_path, const std::string& hierarchy_path,
              const std::string& name_map_path, std::size_t epochs_override) {
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy hierarchy = load_hierarchy(hierarchy_path);
  const bool frozen = frozen_flag(common.frozen);

  ParameterStore store;
  if (!common.checkpoint.empty()) {
    NameMap names;
    if (!name_map_path.empty()) names = load_name_map(name_map_path);
    store = load_pretrained(common.checkpoint, cfg, hierarchy, names, frozen, common.seed);
  } else {
    ModelSpecOptions opts;
    opts.frozen = frozen;
    store = init_store(build_param_specs(cfg, hierarchy, opts), common.seed);
  }
  std::printf("parameters: trainable %zu / total %zu\n", store.trainable_values(),
              store.total_values());

  auto train_set = load_split(manifest_path, hierarchy);
  std::vector<PatientSequence> val_set;
  if (!val_path.empty()) val_set = load_split(val_path, hierarchy);

  TrainOptions opts;
  opts.seed = common.seed;
  opts.epochs_override = epochs_override;
  opts.out_dir = common.out;
  opts.verbose = true;
  TrainResult result = train(store, train_set, val_set, hierarchy, cfg, opts);

  write_run_manifest((fs::path(common.out) / "run_manifest.txt").string(), cfg, common.seed,
                     result.quantizer, manifest_path, val_path, hierarchy_path,
                     result.checkpoint_path, frozen);
  std::printf("trained %zu epochs, final train loss %.6g, best val loss %.6g\n",
              result.epochs_run, result.final_train_loss, result.best_val_loss);
  std::printf("checkpoint -> %s\n", result.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& experiment,
             const std::string& manifest_path, const std::string& hierarchy_path,
             const std::string& run_path) {
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy hierarchy = load_hierarchy(hierarchy_path);
  ParameterStore store = load_checkpoint(common.checkpoint);
  AdasQuantizer quantizer = quantizer_for_eval(common, run_path);
  auto test_set = load_split(manifest_path, hierarchy);

  std::vector<ExperimentKind> kinds;
  if (experiment == "interp") kinds = {ExperimentKind::interpolation};
  else if (experiment == "extrap") kinds = {ExperimentKind::extrapolation};
  else if (experiment == "traj") kinds = {ExperimentKind::trajectory};
  else kinds = {ExperimentKind::interpolation, ExperimentKind::extrapolation,
                ExperimentKind::trajectory};

  std::vector<ExperimentResult> results;
  for (auto kind : kinds)
    results.push_back(run_experiment(kind, test_set, store, hierarchy, cfg, quantizer));

  ModelSpecOptions spec_opts;
  spec_opts.frozen = frozen_flag(common.frozen);
  ParamCount count = count_params(build_param_specs(cfg, hierarchy, spec_opts));
  const std::string report = format_report(results, count);
  std::fputs(report.c_str(), stdout);

  fs::create_directories(common.out);
  {
    std::ofstream rf((fs::path(common.out) / "report.txt").string());
    rf << report;
  }
  write_report_tsv(results, (fs::path(common.out) / "report.tsv").string());
  for (const auto& r : results)
    write_vertex_error_field(
        r, (fs::path(common.out) / (std::string("error_field_") + experiment_name(r.kind) + ".txt"))
               .string());
  return 0;
}

int cmd_impute(const CommonArgs& common, const std::string& manifest_path,
               const std::string& hierarchy_path, const std::string& run_path) {
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy hierarchy = load_hierarchy(hierarchy_path);
  ParameterStore store = load_checkpoint(common.checkpoint);
  AdasQuantizer quantizer = quantizer_for_eval(common, run_path);
  auto patients = load_split(manifest_path, hierarchy);

  fs::create_directories(common.out);
  std::ofstream index((fs::path(common.out) / "imputed_index.tsv").string());
  require(index.good(), "cannot open imputed index");
  index << "patient_id\tslot\tobserved\tmesh\n";
  Mesh scratch = hierarchy.template_mesh;
  for (auto& p : patients) {
    auto predictions = predict_sequence(p, store, hierarchy, cfg, quantizer);
    const fs::path dir = fs::path(common.out) / p.id;
    fs::create_directories(dir);
    for (int t = 0; t < static_cast<int>(kMaxSlots); ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "slot%d.mesh", t);
      scratch.set_coords(predictions[t].reconstruction);
      save_mesh(scratch, (dir / name).string());
      index << p.id << '\t' << t << '\t' << (p.slots[t].observed() ? 1 : 0) << '\t'
            << (fs::path(p.id) / name).string() << '\n';
    }
  }
  std::printf("imputed %zu patients -> %s\n", patients.size(), common.out.c_str());
  return 0;
}

int cmd_classify(const CommonArgs& common, const std::string& train_path,
                 const std::string& test_path, const std::string& hierarchy_path,
                 const std::string& run_path, std::size_t epochs, std::size_t n_seeds) {
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy hierarchy = load_hierarchy(hierarchy_path);
  auto train_set = load_split(train_path, hierarchy);
  auto test_set = load_split(test_path, hierarchy);

  ClassificationOptions opts;
  opts.epochs = epochs;
  opts.seeds.clear();
  for (std::size_t s = 0; s < n_seeds; ++s) opts.seeds.push_back(common.seed + s);

  ImputationModel model;
  ParameterStore imp_store;
  AdasQuantizer imp_quant = AdasQuantizer::uniform();
  const bool with_imputation = !common.checkpoint.empty();
  if (with_imputation) {
    imp_store = load_checkpoint(common.checkpoint);
    imp_quant = quantizer_for_eval(common, run_path);
    model = {&imp_store, &cfg, &imp_quant};
  }

  ClassificationResult result = classify_trajectories(
      train_set, test_set, hierarchy, cfg, opts, with_imputation ? &model : nullptr);

  auto print_arm = [](const char* name, const ClassificationArm& arm) {
    std::printf("%s: balanced accuracy mean %.4f +- %.4f over seeds [", name, arm.mean,
                arm.stddev);
    for (std::size_t i = 0; i < arm.accuracies.size(); ++i)
      std::printf("%s%.4f", i ? ", " : "", arm.accuracies[i]);
    std::printf("]\n");
  };
  print_arm("raw", result.raw);
  if (result.has_imputed) print_arm("imputed", result.imputed);
  return 0;
}

int cmd_gradcheck(const CommonArgs& common) {
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy hierarchy = precompute_hierarchy(make_icosahedron(), cfg.mesh.levels);
  ParameterStore store = init_store(build_param_specs(cfg, hierarchy, {}), common.seed);
  AdasQuantizer quantizer = AdasQuantizer::uniform();

  // 4-visit toy patient on the 12-vertex template
  PatientSequence patient;
  patient.id = "gradcheck";
  patient.label = "stable";
  Rng rng(stream_seed(common.seed, 0xfeedull));
  Tensor base = hierarchy.template_mesh.coords();
  for (int t = 0; t < 4; ++t) {
    patient.slots[t].month = 6 * t;
    Tensor coords = base;
    if (t > 0)
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] += 0.02 * rng.normal();
    patient.slots[t].mesh = coords;
    patient.slots[t].adas = 10.0 + 1.5 * t;
  }

  double worst = 0.0;
  auto check = [&](const char* name, const ScalarFn& loss, const GradFn& analytic,
                   ParameterStore& params, std::size_t coords) {
    GradCheckReport report = grad_check(loss, analytic, params, 1e-5, common.seed, coords);
    std::printf("%-16s max relative error %.3e over %zu tensors\n", name, report.max_rel_err,
                report.entries.size());
    worst = std::max(worst, report.max_rel_err);
  };
  auto subset = [&](const std::string& prefix) {
    ParameterStore sub;
    for (const auto& [name, p] : store.entries())
      if (name.rfind(prefix, 0) == 0) sub.create(name, p.value, true);
    return sub;
  };

  {
    Tensor x = base;
    auto build = [&](ParameterStore& s, Graph& g) {
      ValueId y = spiral_conv(g, s, g.constant(x), hierarchy.levels[0].spirals,
                              "mesh.enc.block0.conv1", 1);
      return g.mean(g.mul(y, y));
    };
    ParameterStore sub = subset("mesh.enc.block0.conv1");
    check("spiral_conv", [&](ParameterStore& s) { Graph g; return g.scalar(build(s, g)); },
          [&](ParameterStore& s) { Graph g; return forward_backward(g, build(s, g)); }, sub, 32);
  }
  {
    Tensor x = base;
    auto build = [&](ParameterStore& s, Graph& g) {
      ValueId y = res_block(g, s, g.constant(x), hierarchy.levels[0].spirals, "mesh.enc.block0.",
                            3, cfg.mesh.channels[0], cfg.norm_mode, cfg.mesh.gamma_depth);
      return g.mean(g.mul(y, y));
    };
    ParameterStore sub = subset("mesh.enc.block0.");
    check("res_block", [&](ParameterStore& s) { Graph g; return g.scalar(build(s, g)); },
          [&](ParameterStore& s) { Graph g; return forward_backward(g, build(s, g)); }, sub, 32);
  }
  {
    Rng xr(stream_seed(common.seed, 0xabull));
    Tensor x({4, cfg.transformer.dim});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 * xr.normal();
    std::vector<std::uint8_t> mask = {0, 0, 1, 0};
    auto build = [&](ParameterStore& s, Graph& g) {
      ValueId y =
          encoder_block(g, s, g.constant(x), mask, "transformer.block00.", cfg.transformer);
      return g.mean(g.mul(y, y));
    };
    ParameterStore sub = subset("transformer.block00.");
    check("encoder_block", [&](ParameterStore& s) { Graph g; return g.scalar(build(s, g)); },
          [&](ParameterStore& s) { Graph g; return forward_backward(g, build(s, g)); }, sub, 32);
  }
  {
    auto build = [&](ParameterStore& s, Graph& g) {
      std::vector<const PatientSequence*> batch{&patient};
      return build_batch_loss(g, s, batch, hierarchy, cfg, quantizer, {}, cfg.train.lambda_cda);
    };
    check("full_pipeline", [&](ParameterStore& s) { Graph g; return g.scalar(build(s, g)); },
          [&](ParameterStore& s) { Graph g; return forward_backward(g, build(s, g)); }, store, 6);
  }

  std::printf("gradcheck max relative error: %.3e (%s)\n", worst, worst < 1e-4 ? "PASS" : "FAIL");
  return worst < 1e-4 ? 0 : 1;
}

int cmd_initckpt(const CommonArgs& common, const std::string& hierarchy_path) {
  ModelConfig cfg = resolve_model_config(common.config);
  MeshHierarchy hierarchy = hierarchy_path.empty()
                                ? precompute_hierarchy(make_icosahedron(), cfg.mesh.levels)
                                : load_hierarchy(hierarchy_path);
  ParameterStore store = init_store(build_param_specs(cfg, hierarchy, {}), common.seed);
  std::string path = common.out;
  if (fs::exists(path) && fs::is_directory(path)) {
    path = (fs::path(path) / "init.cshw").string();
  } else if (!fs::path(path).parent_path().empty()) {
    fs::create_directories(fs::path(path).parent_path());
  }
  save_checkpoint(store, path);
  std::printf("initialized %zu parameters (seed %llu) -> %s\n", store.total_values(),
              static_cast<unsigned long long>(common.seed), path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"longitudinal anatomical-mesh sequence modeling"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string template_path, manifest_path, val_path, train_path, test_path, hierarchy_path;
  std::string experiment = "interp", fractions, name_map_path, run_path;
  std::string profile_name = "default";
  std::size_t n_patients = 200, epochs_override = 0, classify_epochs = 40, n_seeds = 5;

  auto add_common = [&](CLI::App* cmd, bool with_checkpoint = false,
                        bool checkpoint_required = false) {
    cmd->add_option("--config", common.config, "preset name or key=value config file");
    cmd->add_option("--seed", common.seed, "RNG seed");
    cmd->add_option("--out", common.out, "output directory");
    cmd->add_option("--frozen", common.frozen, "freeze all transformer weights but LN: on|off")
        ->check(CLI::IsMember({"on", "off"}));
    if (with_checkpoint) {
      auto* opt = cmd->add_option("--checkpoint", common.checkpoint, "checkpoint file");
      if (checkpoint_required) opt->required();
    }
  };

  auto* precompute = app.add_subcommand("precompute", "template mesh -> pooling hierarchy");
  add_common(precompute);
  precompute->add_option("--template", template_path, "template mesh file")->required();

  auto* synth = app.add_subcommand("synth", "generate a synthetic longitudinal dataset");
  add_common(synth);
  synth->add_option("--template", template_path, "template mesh (default: 162-vertex icosphere)");
  synth->add_option("--n", n_patients, "number of patients");
  synth->add_option("--profile", profile_name, "synthetic profile: default|separable")
      ->check(CLI::IsMember({"default", "separable"}));

  auto* split = app.add_subcommand("split", "stratified train/val/test split");
  add_common(split);
  split->add_option("--manifest", manifest_path, "dataset manifest")->required();
  split->add_option("--fractions", fractions, "train,val,test (default 0.7,0.1,0.2)");

  auto* train_cmd = app.add_subcommand("train", "train the sequence model");
  add_common(train_cmd, true);
  train_cmd->add_option("--manifest", manifest_path, "training manifest")->required();
  train_cmd->add_option("--val", val_path, "validation manifest");
  train_cmd->add_option("--hierarchy", hierarchy_path, "precomputed hierarchy")->required();
  train_cmd->add_option("--name-map", name_map_path, "external -> internal tensor name map");
  train_cmd->add_option("--epochs", epochs_override, "override configured epoch count");

  auto* eval = app.add_subcommand("eval", "run an evaluation protocol");
  add_common(eval, true, true);
  eval->add_option("--experiment", experiment, "interp|extrap|traj|all")
      ->check(CLI::IsMember({"interp", "extrap", "traj", "all"}));
  eval->add_option("--manifest", manifest_path, "test manifest")->required();
  eval->add_option("--hierarchy", hierarchy_path, "precomputed hierarchy")->required();
  eval->add_option("--run", run_path, "run manifest (default: next to the checkpoint)");

  auto* impute = app.add_subcommand("impute", "write per-slot reconstructed meshes");
  add_common(impute, true, true);
  impute->add_option("--manifest", manifest_path, "manifest to impute")->required();
  impute->add_option("--hierarchy", hierarchy_path, "precomputed hierarchy")->required();
  impute->add_option("--run", run_path, "run manifest (default: next to the checkpoint)");

  auto* classify = app.add_subcommand("classify", "stable/converter trajectory classification");
  add_common(classify, true);
  classify->add_option("--train-manifest", train_path, "labeled training manifest")->required();
  classify->add_option("--test-manifest", test_path, "labeled test manifest")->required();
  classify->add_option("--hierarchy", hierarchy_path, "precomputed hierarchy")->required();
  classify->add_option("--run", run_path, "run manifest for the imputation model");
  classify->add_option("--epochs", classify_epochs, "classifier fine-tuning epochs");
  classify->add_option("--repeats", n_seeds, "seeded repetitions");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck_cmd);

  auto* initckpt = app.add_subcommand("initckpt", "write a seeded random-init checkpoint");
  add_common(initckpt);
  initckpt->add_option("--hierarchy", hierarchy_path, "hierarchy for mesh-net shapes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  try {
    if (precompute->parsed()) return cmd_precompute(common, template_path);
    if (synth->parsed()) return cmd_synth(common, template_path, n_patients, profile_name);
    if (split->parsed()) return cmd_split(common, manifest_path, fractions);
    if (train_cmd->parsed())
      return cmd_train(common, manifest_path, val_path, hierarchy_path, name_map_path,
                       epochs_override);
    if (eval->parsed())
      return cmd_eval(common, experiment, manifest_path, hierarchy_path, run_path);
    if (impute->parsed()) return cmd_impute(common, manifest_path, hierarchy_path, run_path);
    if (classify->parsed())
      return cmd_classify(common, train_path, test_path, hierarchy_path, run_path,
                          classify_epochs, n_seeds);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(common);
    if (initckpt->parsed()) return cmd_initckpt(common, hierarchy_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
