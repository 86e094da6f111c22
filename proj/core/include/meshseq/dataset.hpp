#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "meshseq/mesh.hpp"
#include "meshseq/model.hpp"
#include "meshseq/tensor.hpp"

namespace meshseq {

// --- manifest ---

struct ManifestVisit {
  int month = 0;
  std::string mesh_path;  // empty when absent
  std::optional<double> adas;
};

struct ManifestRecord {
  std::string id;
  std::string label;  // "stable" | "converter"
  double age = 0.0;
  char sex = 'F';
  std::vector<ManifestVisit> visits;  // sorted by month
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::string base_dir;  // directory of the manifest file; resolves mesh paths

  std::string resolve(const std::string& mesh_path) const;
};

// Text format, one header line, then one line per visit:
//   patient_id<TAB>label<TAB>age<TAB>sex<TAB>month<TAB>mesh_path_or_-<TAB>adas_or_-
// Validates the 8-visit limit, months within [0, 72] strictly increasing, and
// the baseline visit (month 0 with a mesh). When expected_vertices is given,
// referenced mesh files are checked for existence and vertex count.
DatasetManifest load_manifest(const std::string& path,
                              std::optional<std::size_t> expected_vertices = std::nullopt);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// --- stratified split ---

struct SplitSpec {
  double train = 0.7, val = 0.1, test = 0.2;
  double age_bucket_years = 10.0;
};

struct SplitResult {
  DatasetManifest train, val, test;
  std::vector<std::string> warnings;  // merged strata
};

// Assigns patients split-wise within each (age bucket x sex x label) stratum,
// matching the fractions up to +-1 patient; strata smaller than 3 are merged
// into the nearest age bucket with a warning. Deterministic per seed.
SplitResult stratified_split(const DatasetManifest& manifest, const SplitSpec& spec,
                             std::uint64_t seed);

// --- in-memory sequences ---

struct VisitSlot {
  int month = -1;  // -1: no visit in this slot
  std::optional<Tensor> mesh;
  std::optional<double> adas;

  bool has_visit() const { return month >= 0; }
  bool observed() const { return mesh.has_value(); }
};

// Up to 8 visit slots; slot index is the visit's position in the sorted
// visit list. Slot 0 is the baseline and always carries a mesh.
struct PatientSequence {
  std::string id;
  std::string label;
  double age = 0.0;
  char sex = 'F';
  std::array<VisitSlot, kMaxSlots> slots;

  int visit_count() const;
  int last_mesh_slot() const;  // -1 when no mesh anywhere
  int observed_count() const;
  std::vector<std::optional<double>> adas_by_slot() const;
};

// Loads every referenced mesh, applies the normalization transform, and
// checks vertex counts against the template.
std::vector<PatientSequence> load_dataset(const DatasetManifest& manifest,
                                          const NormalizationTransform& transform,
                                          std::size_t expected_vertices);

// --- synthetic generator ---

struct SynthProfile {
  double noise_sigma = 0.005;  // unit-cube units
  double p_converter = 0.5;
  double stable_slope_min = 0.0, stable_slope_max = 0.05;    // ADAS points / month
  double converter_slope_min = 0.1, converter_slope_max = 0.3;
  double baseline_adas_min = 5.0, baseline_adas_max = 20.0;
  double deform_gain = 0.003;          // geometry units per ADAS point
  double baseline_offset_scale = 0.02; // per-patient baseline shape variation
  std::size_t n_modes = 8;
  std::size_t smooth_iters = 10;
  double retention = 0.33142857142857146;  // E[visits] = 1 + 7 * retention = 3.32
  double p_adas_missing = 0.05;            // non-baseline visits only
  std::vector<int> schedule = {0, 6, 12, 18, 24, 36, 48, 72};

  // "default"; "separable" = sigma 0, full retention, no missing ADAS
  static SynthProfile preset(const std::string& name);
  static SynthProfile from_key_values(const KeyValues& kv);
};

// Writes <out_dir>/template.mesh (normalized), <out_dir>/meshes/*.mesh and
// returns the manifest (not yet saved). Per-patient RNG streams are keyed by
// patient index, so output bytes depend only on (template, n, seed, profile).
DatasetManifest synth_generate(const Mesh& template_mesh, std::size_t n_patients,
                               std::uint64_t seed, const SynthProfile& profile,
                               const std::string& out_dir);

}  // namespace meshseq
