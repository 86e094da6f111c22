#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meshseq/decimate.hpp"
#include "meshseq/mesh.hpp"
#include "meshseq/spiral.hpp"
#include "meshseq/tensor.hpp"

namespace meshseq {

// Row-stochastic sparse matrix in CSR form (fine x coarse for upsampling).
struct SparseMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> row_ptr;  // rows + 1
  std::vector<std::uint32_t> col_idx;
  std::vector<double> values;

  static SparseMatrix identity(std::size_t n);
  Tensor apply(const Tensor& x) const;       // (rows x C) = U * x (cols x C)
  void apply_transposed_add(const Tensor& g, Tensor& out) const;  // out += U^T * g
};

// Barycentric upsampling matrix: retained fine vertices get a one-hot row on
// their coarse counterpart; removed fine vertices get the barycentric weights
// of their closest point on the nearest coarse triangle. All rows sum to 1.
SparseMatrix upsample_matrix(const Mesh& fine, const Mesh& coarse,
                             const std::vector<std::uint32_t>& selection);

struct LevelSpec {
  std::uint32_t downsample = 1;      // vertex-count reduction factor
  std::uint32_t spiral_length = 9;   // l
  std::uint32_t dilation = 1;        // d
};

// One hierarchy level. selection/up map the previous level (the template for
// level 0) onto this one.
struct HierarchyLevel {
  Mesh mesh;
  SpiralTable spirals;
  std::vector<std::uint32_t> selection;  // this-level vertex -> previous-level vertex
  SparseMatrix up;                       // previous-level count x this-level count
};

struct MeshHierarchy {
  Mesh template_mesh;  // normalized
  NormalizationTransform normalization;
  std::vector<HierarchyLevel> levels;

  std::size_t level_count() const { return levels.size(); }
  std::size_t vertex_count(std::size_t level) const { return levels[level].mesh.vertex_count(); }
};

// Normalizes the template to the unit cube, then builds one level per spec.
// Deterministic: identical (template, specs) produce identical bytes on save.
MeshHierarchy precompute_hierarchy(const Mesh& template_mesh,
                                   const std::vector<LevelSpec>& specs);

// Binary format, little-endian: magic "CSHH", version u32, level count u32,
// normalization (center f64x3, scale f64), template block, per-level offsets
// u64, then the level blocks. Arrays are f64 / u32.
void save_hierarchy(const MeshHierarchy& h, const std::string& path);
MeshHierarchy load_hierarchy(const std::string& path);

}  // namespace meshseq
