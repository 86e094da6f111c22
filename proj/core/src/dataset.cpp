#include "meshseq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "meshseq/rng.hpp"

namespace fs = std::filesystem;

namespace meshseq {

std::string DatasetManifest::resolve(const std::string& mesh_path) const {
  if (mesh_path.empty()) return mesh_path;
  fs::path p(mesh_path);
  if (p.is_absolute() || base_dir.empty()) return mesh_path;
  return (fs::path(base_dir) / p).string();
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

constexpr const char* kManifestHeader = "patient_id\tlabel\tage\tsex\tmonth\tmesh\tadas";

void validate_record(const ManifestRecord& rec) {
  require(!rec.visits.empty(), "manifest: patient " + rec.id + " has an empty visit list");
  require(rec.visits.size() <= kMaxSlots,
          "manifest: patient " + rec.id + " exceeds the " + std::to_string(kMaxSlots) +
              "-visit limit");
  int prev = -1;
  for (const auto& v : rec.visits) {
    require(v.month >= 0 && v.month <= kMaxMonth,
            "manifest: patient " + rec.id + " month out of [0, 72]");
    require(v.month > prev, "manifest: patient " + rec.id + " months must be strictly increasing");
    prev = v.month;
  }
  require(rec.visits.front().month == 0 && !rec.visits.front().mesh_path.empty(),
          "manifest: patient " + rec.id + " is missing the baseline visit mesh");
}

}  // namespace

DatasetManifest load_manifest(const std::string& path,
                              std::optional<std::size_t> expected_vertices) {
  std::ifstream in(path);
  require(in.good(), "load_manifest: cannot open " + path);
  DatasetManifest manifest;
  manifest.base_dir = fs::path(path).parent_path().string();

  std::string line;
  std::size_t lineno = 0;
  require(static_cast<bool>(std::getline(in, line)), "load_manifest: empty file " + path);
  ++lineno;

  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    require(fields.size() == 7,
            "load_manifest: line " + std::to_string(lineno) + ": expected 7 fields, got " +
                std::to_string(fields.size()));
    ManifestVisit visit;
    std::string id = fields[0];
    try {
      visit.month = std::stoi(fields[4]);
    } catch (...) {
      throw Error("load_manifest: line " + std::to_string(lineno) + ": bad month");
    }
    if (fields[5] != "-") visit.mesh_path = fields[5];
    if (fields[6] != "-") {
      try {
        visit.adas = std::stod(fields[6]);
      } catch (...) {
        throw Error("load_manifest: line " + std::to_string(lineno) + ": bad ADAS value");
      }
      require(*visit.adas >= 0.0 && *visit.adas <= 85.0,
              "load_manifest: line " + std::to_string(lineno) + ": ADAS out of [0, 85]");
    }

    auto it = index.find(id);
    if (it == index.end()) {
      ManifestRecord rec;
      rec.id = id;
      rec.label = fields[1];
      try {
        rec.age = std::stod(fields[2]);
      } catch (...) {
        throw Error("load_manifest: line " + std::to_string(lineno) + ": bad age");
      }
      require(fields[3].size() == 1, "load_manifest: line " + std::to_string(lineno) + ": bad sex");
      rec.sex = fields[3][0];
      index[id] = manifest.records.size();
      manifest.records.push_back(std::move(rec));
      it = index.find(id);
    }
    manifest.records[it->second].visits.push_back(std::move(visit));
  }

  for (auto& rec : manifest.records) {
    std::sort(rec.visits.begin(), rec.visits.end(),
              [](const ManifestVisit& a, const ManifestVisit& b) { return a.month < b.month; });
    validate_record(rec);
    if (expected_vertices) {
      for (const auto& v : rec.visits) {
        if (v.mesh_path.empty()) continue;
        const std::string full = manifest.resolve(v.mesh_path);
        std::size_t nv;
        try {
          nv = peek_mesh_vertex_count(full);
        } catch (const Error&) {
          throw Error("load_manifest: patient " + rec.id + ": missing mesh file " + full);
        }
        require(nv == *expected_vertices,
                "load_manifest: patient " + rec.id + ": mesh " + full + " has " +
                    std::to_string(nv) + " vertices, template has " +
                    std::to_string(*expected_vertices));
      }
    }
  }
  return manifest;
}

namespace {

// Mesh paths are stored relative to the manifest file; writing a manifest to
// a different directory rebases them so they keep resolving.
std::string rebase_mesh_path(const DatasetManifest& manifest, const std::string& mesh_path,
                             const fs::path& out_dir) {
  if (mesh_path.empty()) return mesh_path;
  fs::path p(mesh_path);
  if (p.is_absolute() || manifest.base_dir.empty()) return mesh_path;
  const fs::path resolved = fs::absolute(fs::path(manifest.base_dir) / p).lexically_normal();
  const fs::path base = fs::absolute(out_dir).lexically_normal();
  return resolved.lexically_proximate(base).string();
}

}  // namespace

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "save_manifest: cannot open " + path);
  const fs::path out_dir = fs::path(path).parent_path();
  out << kManifestHeader << '\n';
  char buf[64];
  for (const auto& rec : manifest.records) {
    for (const auto& v : rec.visits) {
      const std::string mesh = rebase_mesh_path(manifest, v.mesh_path, out_dir);
      std::snprintf(buf, sizeof(buf), "%.17g", rec.age);
      out << rec.id << '\t' << rec.label << '\t' << buf << '\t' << rec.sex << '\t' << v.month
          << '\t' << (mesh.empty() ? "-" : mesh) << '\t';
      if (v.adas) {
        std::snprintf(buf, sizeof(buf), "%.17g", *v.adas);
        out << buf;
      } else {
        out << '-';
      }
      out << '\n';
    }
  }
  require(out.good(), "save_manifest: write failed for " + path);
}

SplitResult stratified_split(const DatasetManifest& manifest, const SplitSpec& spec,
                             std::uint64_t seed) {
  require(std::abs(spec.train + spec.val + spec.test - 1.0) < 1e-9,
          "stratified_split: fractions must sum to 1");
  require(spec.age_bucket_years > 0.0, "stratified_split: bad age bucket width");

  struct StratumKey {
    long bucket;
    char sex;
    std::string label;
    bool operator<(const StratumKey& o) const {
      if (bucket != o.bucket) return bucket < o.bucket;
      if (sex != o.sex) return sex < o.sex;
      return label < o.label;
    }
  };

  std::map<StratumKey, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& rec = manifest.records[i];
    StratumKey key{static_cast<long>(std::floor(rec.age / spec.age_bucket_years)), rec.sex,
                   rec.label};
    strata[key].push_back(i);
  }

  SplitResult result;
  // merge strata smaller than 3 into the nearest age bucket with same sex/label
  bool merged = true;
  while (merged) {
    merged = false;
    for (auto it = strata.begin(); it != strata.end(); ++it) {
      if (it->second.size() >= 3) continue;
      const StratumKey& key = it->first;
      auto best = strata.end();
      long best_dist = 0;
      for (auto jt = strata.begin(); jt != strata.end(); ++jt) {
        if (jt == it || jt->first.sex != key.sex || jt->first.label != key.label) continue;
        const long dist = std::abs(jt->first.bucket - key.bucket);
        if (best == strata.end() || dist < best_dist) {
          best = jt;
          best_dist = dist;
        }
      }
      if (best == strata.end()) continue;  // nothing to merge into
      result.warnings.push_back("merged stratum (bucket " + std::to_string(key.bucket) + ", " +
                                key.sex + ", " + key.label + ") into bucket " +
                                std::to_string(best->first.bucket));
      best->second.insert(best->second.end(), it->second.begin(), it->second.end());
      strata.erase(it);
      merged = true;
      break;
    }
  }

  result.train.base_dir = result.val.base_dir = result.test.base_dir = manifest.base_dir;
  for (auto& [key, members] : strata) {
    std::sort(members.begin(), members.end());
    std::ostringstream key_str;
    key_str << key.bucket << '|' << key.sex << '|' << key.label;
    Rng rng(stream_seed(seed, fnv1a64(key_str.str())));
    rng.shuffle(members);

    const std::size_t n = members.size();
    const double fracs[3] = {spec.train, spec.val, spec.test};
    std::size_t counts[3];
    double rema[3];
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double want = fracs[s] * static_cast<double>(n);
      counts[s] = static_cast<std::size_t>(std::floor(want));
      rema[s] = want - std::floor(want);
      assigned += counts[s];
    }
    // largest remainder; ties resolved in train, val, test order
    while (assigned < n) {
      int pick = 0;
      for (int s = 1; s < 3; ++s)
        if (rema[s] > rema[pick]) pick = s;
      ++counts[pick];
      rema[pick] = -1.0;
      ++assigned;
    }

    std::size_t at = 0;
    DatasetManifest* outs[3] = {&result.train, &result.val, &result.test};
    for (int s = 0; s < 3; ++s)
      for (std::size_t k = 0; k < counts[s]; ++k)
        outs[s]->records.push_back(manifest.records[members[at++]]);
  }

  auto by_id = [](DatasetManifest& m) {
    std::sort(m.records.begin(), m.records.end(),
              [](const ManifestRecord& a, const ManifestRecord& b) { return a.id < b.id; });
  };
  by_id(result.train);
  by_id(result.val);
  by_id(result.test);
  return result;
}

int PatientSequence::visit_count() const {
  int n = 0;
  for (const auto& s : slots) n += s.has_visit() ? 1 : 0;
  return n;
}

int PatientSequence::last_mesh_slot() const {
  int last = -1;
  for (int i = 0; i < static_cast<int>(slots.size()); ++i)
    if (slots[i].observed()) last = i;
  return last;
}

int PatientSequence::observed_count() const {
  int n = 0;
  for (const auto& s : slots) n += s.observed() ? 1 : 0;
  return n;
}

std::vector<std::optional<double>> PatientSequence::adas_by_slot() const {
  std::vector<std::optional<double>> out(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) out[i] = slots[i].adas;
  return out;
}

std::vector<PatientSequence> load_dataset(const DatasetManifest& manifest,
                                          const NormalizationTransform& transform,
                                          std::size_t expected_vertices) {
  std::vector<PatientSequence> out;
  out.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    validate_record(rec);
    PatientSequence seq;
    seq.id = rec.id;
    seq.label = rec.label;
    seq.age = rec.age;
    seq.sex = rec.sex;
    for (std::size_t i = 0; i < rec.visits.size(); ++i) {
      const auto& v = rec.visits[i];
      VisitSlot& slot = seq.slots[i];
      slot.month = v.month;
      slot.adas = v.adas;
      if (!v.mesh_path.empty()) {
        Mesh m = load_mesh(manifest.resolve(v.mesh_path));
        require(m.vertex_count() == expected_vertices,
                "load_dataset: vertex count mismatch for patient " + rec.id);
        slot.mesh = apply_normalization(m.coords(), transform);
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

SynthProfile SynthProfile::preset(const std::string& name) {
  SynthProfile p;
  if (name == "default") return p;
  if (name == "separable") {
    p.noise_sigma = 0.0;
    p.retention = 1.0;
    p.p_adas_missing = 0.0;
    return p;
  }
  throw Error("unknown synth profile: " + name);
}

SynthProfile SynthProfile::from_key_values(const KeyValues& kv) {
  SynthProfile p = preset(kv.get("synth.profile", "default"));
  p.noise_sigma = kv.get_double("synth.noise_sigma", p.noise_sigma);
  p.p_converter = kv.get_double("synth.p_converter", p.p_converter);
  p.stable_slope_min = kv.get_double("synth.stable_slope_min", p.stable_slope_min);
  p.stable_slope_max = kv.get_double("synth.stable_slope_max", p.stable_slope_max);
  p.converter_slope_min = kv.get_double("synth.converter_slope_min", p.converter_slope_min);
  p.converter_slope_max = kv.get_double("synth.converter_slope_max", p.converter_slope_max);
  p.baseline_adas_min = kv.get_double("synth.baseline_adas_min", p.baseline_adas_min);
  p.baseline_adas_max = kv.get_double("synth.baseline_adas_max", p.baseline_adas_max);
  p.deform_gain = kv.get_double("synth.deform_gain", p.deform_gain);
  p.baseline_offset_scale = kv.get_double("synth.baseline_offset_scale", p.baseline_offset_scale);
  p.n_modes = kv.get_size("synth.n_modes", p.n_modes);
  p.smooth_iters = kv.get_size("synth.smooth_iters", p.smooth_iters);
  p.retention = kv.get_double("synth.retention", p.retention);
  p.p_adas_missing = kv.get_double("synth.p_adas_missing", p.p_adas_missing);
  return p;
}

namespace {

// low-frequency displacement modes: random vertex fields smoothed by
// neighbor averaging
std::vector<Tensor> make_modes(const Mesh& mesh, std::size_t n_modes, std::size_t smooth_iters,
                               std::uint64_t seed) {
  auto adj = build_adjacency(mesh);
  std::vector<Tensor> modes;
  for (std::size_t j = 0; j < n_modes; ++j) {
    Rng rng(stream_seed(seed, 0x900d5eedull + j));
    Tensor field({mesh.vertex_count(), 3});
    for (std::size_t i = 0; i < field.size(); ++i) field[i] = rng.normal();
    for (std::size_t it = 0; it < smooth_iters; ++it) {
      Tensor next({mesh.vertex_count(), 3});
      for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
        for (std::size_t c = 0; c < 3; ++c) {
          double s = field.at(v, c);
          for (std::uint32_t n : adj[v]) s += field.at(n, c);
          next.at(v, c) = s / static_cast<double>(adj[v].size() + 1);
        }
      }
      field = std::move(next);
    }
    modes.push_back(std::move(field));
  }
  return modes;
}

std::string patient_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "p%04zu", i);
  return buf;
}

}  // namespace

DatasetManifest synth_generate(const Mesh& template_mesh, std::size_t n_patients,
                               std::uint64_t seed, const SynthProfile& profile,
                               const std::string& out_dir) {
  require(n_patients > 0, "synth_generate: need at least one patient");
  require(!profile.schedule.empty() && profile.schedule.front() == 0,
          "synth_generate: schedule must start at month 0");
  require(profile.schedule.size() <= kMaxSlots, "synth_generate: schedule exceeds 8 visits");

  NormalizationTransform transform = compute_normalization(template_mesh);
  Mesh tpl = apply_normalization(template_mesh, transform);
  validate_mesh(tpl);

  fs::create_directories(fs::path(out_dir) / "meshes");
  save_mesh(tpl, (fs::path(out_dir) / "template.mesh").string());

  auto modes = make_modes(tpl, profile.n_modes, profile.smooth_iters, seed);
  const Tensor tpl_coords = tpl.coords();
  const std::size_t nv = tpl.vertex_count();

  DatasetManifest manifest;
  manifest.base_dir = out_dir;

  Mesh scratch = tpl;
  for (std::size_t pi = 0; pi < n_patients; ++pi) {
    Rng rng(stream_seed(seed, pi));
    ManifestRecord rec;
    rec.id = patient_id(pi);
    const bool converter = rng.bernoulli(profile.p_converter);
    rec.label = converter ? "converter" : "stable";
    rec.age = 55.0 + 35.0 * rng.uniform();
    rec.sex = rng.bernoulli(0.5) ? 'F' : 'M';

    const double slope = converter
                             ? rng.uniform(profile.converter_slope_min, profile.converter_slope_max)
                             : rng.uniform(profile.stable_slope_min, profile.stable_slope_max);
    const double baseline_adas = rng.uniform(profile.baseline_adas_min, profile.baseline_adas_max);

    // unit-Frobenius deformation direction
    Tensor direction({nv, 3});
    for (std::size_t j = 0; j < modes.size(); ++j) {
      const double c = rng.normal();
      axpy(c, modes[j], direction);
    }
    double dn = 0.0;
    for (std::size_t i = 0; i < direction.size(); ++i) dn += direction[i] * direction[i];
    dn = std::sqrt(dn);
    if (dn > 0.0)
      for (std::size_t i = 0; i < direction.size(); ++i) direction[i] /= dn;

    // per-patient baseline shape offset
    Tensor baseline = tpl_coords;
    for (std::size_t j = 0; j < modes.size(); ++j) {
      const double c = rng.normal() * profile.baseline_offset_scale /
                       std::sqrt(static_cast<double>(modes.size()));
      axpy(c, modes[j], baseline);
    }

    for (int month : profile.schedule) {
      const bool keep = month == 0 || rng.bernoulli(profile.retention);
      // draws below must happen regardless of retention so that kept visits
      // do not depend on which earlier visits were dropped
      const double adas_raw = std::clamp(baseline_adas + slope * month, 0.0, 85.0);
      const bool adas_missing = month != 0 && rng.bernoulli(profile.p_adas_missing);
      Tensor coords = baseline;
      if (month != 0) {
        const double d = adas_raw - std::clamp(baseline_adas, 0.0, 85.0);
        axpy(profile.deform_gain * d, direction, coords);
        for (std::size_t i = 0; i < coords.size(); ++i)
          coords[i] += profile.noise_sigma * rng.normal();
      }
      if (!keep) continue;
      ManifestVisit visit;
      visit.month = month;
      if (!adas_missing) visit.adas = adas_raw;
      char name[64];
      std::snprintf(name, sizeof(name), "meshes/%s_m%03d.mesh", rec.id.c_str(), month);
      visit.mesh_path = name;
      scratch.set_coords(coords);
      save_mesh(scratch, (fs::path(out_dir) / name).string());
      rec.visits.push_back(std::move(visit));
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

}  // namespace meshseq
