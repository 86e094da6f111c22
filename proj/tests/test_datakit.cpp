#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "meshseq/dataset.hpp"
#include "meshseq/rng.hpp"

using namespace meshseq;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::create_directories(p);
  return p.string();
}

DatasetManifest tiny_manifest() {
  DatasetManifest m;
  ManifestRecord rec;
  rec.id = "p0";
  rec.label = "stable";
  rec.age = 71.5;
  rec.sex = 'F';
  rec.visits.push_back({0, "meshes/p0_m000.mesh", 11.25});
  rec.visits.push_back({12, "meshes/p0_m012.mesh", std::nullopt});
  rec.visits.push_back({36, "", 14.0});
  m.records.push_back(rec);
  ManifestRecord rec2 = rec;
  rec2.id = "p1";
  rec2.label = "converter";
  rec2.age = 64.0;
  rec2.sex = 'M';
  rec2.visits[0].mesh_path = "meshes/p1_m000.mesh";
  rec2.visits[1].mesh_path = "meshes/p1_m012.mesh";
  m.records.push_back(rec2);
  return m;
}

bool manifest_equal(const DatasetManifest& a, const DatasetManifest& b) {
  if (a.records.size() != b.records.size()) return false;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& ra = a.records[i];
    const auto& rb = b.records[i];
    if (ra.id != rb.id || ra.label != rb.label || ra.age != rb.age || ra.sex != rb.sex)
      return false;
    if (ra.visits.size() != rb.visits.size()) return false;
    for (std::size_t v = 0; v < ra.visits.size(); ++v) {
      if (ra.visits[v].month != rb.visits[v].month) return false;
      if (ra.visits[v].mesh_path != rb.visits[v].mesh_path) return false;
      if (ra.visits[v].adas != rb.visits[v].adas) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("manifest round-trips through the text format") {
  const std::string dir = temp_dir("meshseq_manifest");
  const std::string path = dir + "/manifest.tsv";
  DatasetManifest m = tiny_manifest();
  save_manifest(m, path);
  DatasetManifest loaded = load_manifest(path);
  CHECK(manifest_equal(m, loaded));

  // a second save is byte-identical
  const std::string path2 = dir + "/manifest2.tsv";
  save_manifest(loaded, path2);
  std::ifstream f1(path), f2(path2);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}

TEST_CASE("manifest with nine visits is rejected citing the limit") {
  const std::string dir = temp_dir("meshseq_manifest9");
  const std::string path = dir + "/manifest.tsv";
  {
    std::ofstream out(path);
    out << "patient_id\tlabel\tage\tsex\tmonth\tmesh\tadas\n";
    for (int v = 0; v < 9; ++v)
      out << "p0\tstable\t70\tF\t" << v * 6 << "\tmeshes/x.mesh\t-\n";
  }
  try {
    load_manifest(path);
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("8-visit limit") != std::string::npos);
  }
}

TEST_CASE("manifest validation rejects bad records") {
  const std::string dir = temp_dir("meshseq_manifest_bad");

  auto write_and_load = [&](const std::string& body) {
    const std::string path = dir + "/m.tsv";
    std::ofstream out(path);
    out << "patient_id\tlabel\tage\tsex\tmonth\tmesh\tadas\n" << body;
    out.close();
    return load_manifest(path);
  };

  // missing baseline mesh
  CHECK_THROWS_AS(write_and_load("p0\tstable\t70\tF\t0\t-\t10\n"), Error);
  // first visit not at month 0
  CHECK_THROWS_AS(write_and_load("p0\tstable\t70\tF\t6\tm.mesh\t10\n"), Error);
  // month beyond 72
  CHECK_THROWS_AS(
      write_and_load("p0\tstable\t70\tF\t0\tm.mesh\t10\np0\tstable\t70\tF\t80\tm.mesh\t-\n"),
      Error);
  // duplicate month
  CHECK_THROWS_AS(
      write_and_load("p0\tstable\t70\tF\t0\tm.mesh\t10\np0\tstable\t70\tF\t0\tn.mesh\t-\n"),
      Error);
  // malformed line reported with its number
  try {
    write_and_load("p0\tstable\t70\tF\t0\tm.mesh\n");
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("manifest vertex-count validation against the template") {
  const std::string dir = temp_dir("meshseq_manifest_verts");
  Mesh ico = make_icosahedron();
  save_mesh(ico, dir + "/good.mesh");
  save_mesh(make_tetrahedron(), dir + "/bad.mesh");

  const std::string path = dir + "/m.tsv";
  {
    std::ofstream out(path);
    out << "patient_id\tlabel\tage\tsex\tmonth\tmesh\tadas\n";
    out << "p0\tstable\t70\tF\t0\tgood.mesh\t10\n";
    out << "p1\tstable\t66\tM\t0\tbad.mesh\t10\n";
  }
  CHECK_THROWS_AS(load_manifest(path, ico.vertex_count()), Error);
  CHECK_NOTHROW(load_manifest(path));  // structural checks only
}

TEST_CASE("stratified split of one 10-patient stratum is 7/1/2") {
  DatasetManifest m;
  for (int i = 0; i < 10; ++i) {
    ManifestRecord rec;
    rec.id = "p" + std::to_string(i);
    rec.label = "stable";
    rec.age = 70.0 + 0.1 * i;
    rec.sex = 'F';
    rec.visits.push_back({0, "x.mesh", 10.0});
    m.records.push_back(rec);
  }
  SplitResult split = stratified_split(m, {}, 0);
  CHECK(split.train.records.size() == 7);
  CHECK(split.val.records.size() == 1);
  CHECK(split.test.records.size() == 2);

  std::set<std::string> seen;
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (const auto& rec : part->records) CHECK(seen.insert(rec.id).second);
  CHECK(seen.size() == 10);
}

TEST_CASE("stratified split keeps label proportions within one patient") {
  DatasetManifest m;
  for (int i = 0; i < 40; ++i) {
    ManifestRecord rec;
    rec.id = "p" + std::to_string(i);
    rec.label = i % 2 == 0 ? "stable" : "converter";
    rec.age = 70.0;
    rec.sex = 'F';
    rec.visits.push_back({0, "x.mesh", 10.0});
    m.records.push_back(rec);
  }
  SplitResult split = stratified_split(m, {}, 3);
  auto count_labels = [](const DatasetManifest& part) {
    std::map<std::string, int> counts;
    for (const auto& rec : part.records) counts[rec.label]++;
    return counts;
  };
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    auto counts = count_labels(*part);
    CHECK(std::abs(counts["stable"] - counts["converter"]) <= 1);
  }
}

TEST_CASE("stratified split is deterministic per seed") {
  DatasetManifest m;
  Rng rng(9);
  for (int i = 0; i < 30; ++i) {
    ManifestRecord rec;
    rec.id = "p" + std::to_string(i);
    rec.label = rng.bernoulli(0.5) ? "stable" : "converter";
    rec.age = rng.uniform(55.0, 90.0);
    rec.sex = rng.bernoulli(0.5) ? 'F' : 'M';
    rec.visits.push_back({0, "x.mesh", 10.0});
    m.records.push_back(rec);
  }
  auto ids = [](const DatasetManifest& part) {
    std::vector<std::string> out;
    for (const auto& rec : part.records) out.push_back(rec.id);
    return out;
  };
  SplitResult a = stratified_split(m, {}, 7);
  SplitResult b = stratified_split(m, {}, 7);
  SplitResult c = stratified_split(m, {}, 8);
  CHECK(ids(a.train) == ids(b.train));
  CHECK(ids(a.val) == ids(b.val));
  CHECK(ids(a.test) == ids(b.test));
  CHECK(ids(a.train) != ids(c.train));
}

TEST_CASE("synthetic generation: zero noise and zero slope reproduce the baseline") {
  const std::string dir = temp_dir("meshseq_synth_flat");
  SynthProfile profile = SynthProfile::preset("separable");
  profile.stable_slope_min = profile.stable_slope_max = 0.0;
  profile.converter_slope_min = profile.converter_slope_max = 0.0;
  profile.deform_gain = 0.003;
  DatasetManifest manifest = synth_generate(make_icosahedron(), 4, 1, profile, dir);

  for (const auto& rec : manifest.records) {
    REQUIRE(rec.visits.size() == profile.schedule.size());
    Mesh baseline = load_mesh(manifest.resolve(rec.visits[0].mesh_path));
    for (const auto& v : rec.visits) {
      Mesh m = load_mesh(manifest.resolve(v.mesh_path));
      CHECK(m.vertices == baseline.vertices);
    }
  }
}

TEST_CASE("synthetic generation is byte-identical for the same seed") {
  SynthProfile profile;  // default
  const std::string d1 = temp_dir("meshseq_synth_a");
  const std::string d2 = temp_dir("meshseq_synth_b");
  DatasetManifest m1 = synth_generate(make_icosahedron(), 6, 42, profile, d1);
  DatasetManifest m2 = synth_generate(make_icosahedron(), 6, 42, profile, d2);
  CHECK(manifest_equal(m1, m2));
  for (const auto& rec : m1.records)
    for (const auto& v : rec.visits) {
      std::ifstream f1(m1.resolve(v.mesh_path), std::ios::binary);
      std::ifstream f2(m2.resolve(v.mesh_path), std::ios::binary);
      std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
      std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
      CHECK(b1 == b2);
      CHECK(!b1.empty());
    }
}

TEST_CASE("synthetic mean visit count tracks the retention target") {
  const std::string dir = temp_dir("meshseq_synth_visits");
  SynthProfile profile;  // default retention targets 3.32 visits
  DatasetManifest manifest = synth_generate(make_tetrahedron(), 1000, 0, profile, dir);
  std::size_t visits = 0;
  for (const auto& rec : manifest.records) visits += rec.visits.size();
  const double mean = static_cast<double>(visits) / 1000.0;
  CHECK(mean >= 3.1);
  CHECK(mean <= 3.6);
}

TEST_CASE("generated meshes keep the template vertex count and load as a dataset") {
  const std::string dir = temp_dir("meshseq_synth_load");
  SynthProfile profile;
  DatasetManifest manifest = synth_generate(make_icosahedron(), 5, 3, profile, dir);
  Mesh tpl = load_mesh(dir + "/template.mesh");
  CHECK(tpl.vertex_count() == 12);

  save_manifest(manifest, dir + "/manifest.tsv");
  DatasetManifest checked = load_manifest(dir + "/manifest.tsv", tpl.vertex_count());
  CHECK(checked.records.size() == 5);

  auto patients = load_dataset(checked, {}, tpl.vertex_count());
  REQUIRE(patients.size() == 5);
  for (const auto& p : patients) {
    CHECK(p.slots[0].observed());
    CHECK(p.visit_count() >= 1);
    for (const auto& s : p.slots)
      if (s.observed()) CHECK(s.mesh->rows() == 12);
  }
}

TEST_CASE("converters deform more than stables at zero noise") {
  const std::string dir = temp_dir("meshseq_synth_sep");
  SynthProfile profile = SynthProfile::preset("separable");
  DatasetManifest manifest = synth_generate(make_icosahedron(), 60, 5, profile, dir);
  double conv_sum = 0.0, stable_sum = 0.0;
  std::size_t conv_n = 0, stable_n = 0;
  for (const auto& rec : manifest.records) {
    Mesh baseline = load_mesh(manifest.resolve(rec.visits.front().mesh_path));
    Mesh last = load_mesh(manifest.resolve(rec.visits.back().mesh_path));
    double norm2 = 0.0;
    for (std::size_t v = 0; v < baseline.vertex_count(); ++v) {
      const Vec3 d = last.vertices[v] - baseline.vertices[v];
      norm2 += dot(d, d);
    }
    if (rec.label == "converter") {
      conv_sum += std::sqrt(norm2);
      ++conv_n;
    } else {
      stable_sum += std::sqrt(norm2);
      ++stable_n;
    }
  }
  REQUIRE(conv_n > 0);
  REQUIRE(stable_n > 0);
  CHECK(conv_sum / conv_n > stable_sum / stable_n);
}

TEST_CASE("load_dataset rejects a record with an empty visit list") {
  DatasetManifest m;
  ManifestRecord rec;
  rec.id = "p0";
  rec.label = "stable";
  m.records.push_back(rec);
  CHECK_THROWS_AS(load_dataset(m, {}, 12), Error);
}
