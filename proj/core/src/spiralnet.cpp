#include "meshseq/spiralnet.hpp"

namespace meshseq {

namespace {

ValueId apply_norm(Graph& g, ParameterStore& store, ValueId x, const std::string& prefix,
                   NormMode mode) {
  ValueId gamma = g.param(store, prefix + ".gamma");
  ValueId beta = g.param(store, prefix + ".beta");
  // Both modes normalize per channel over vertices; `batch` exists as a
  // config switch and behaves identically at batch size 1, which is how
  // meshes flow through this implementation.
  (void)mode;
  return g.channel_norm(x, gamma, beta);
}

bool identity_selection(const std::vector<std::uint32_t>& selection, std::size_t prev_count) {
  if (selection.size() != prev_count) return false;
  for (std::size_t i = 0; i < selection.size(); ++i)
    if (selection[i] != i) return false;
  return true;
}

bool identity_up(const SparseMatrix& u) {
  if (u.rows != u.cols) return false;
  for (std::size_t r = 0; r < u.rows; ++r) {
    if (u.row_ptr[r + 1] - u.row_ptr[r] != 1) return false;
    if (u.col_idx[u.row_ptr[r]] != r || u.values[u.row_ptr[r]] != 1.0) return false;
  }
  return true;
}

}  // namespace

ValueId spiral_conv(Graph& g, ParameterStore& store, ValueId x, const SpiralTable& table,
                    const std::string& prefix, std::size_t gamma_depth) {
  ValueId y = g.spiral_gather(x, table);
  y = g.linear(y, g.param(store, prefix + ".w0"), g.param(store, prefix + ".b0"));
  for (std::size_t k = 1; k < gamma_depth; ++k) {
    y = g.elu(y);
    y = g.linear(y, g.param(store, prefix + ".w" + std::to_string(k)),
                 g.param(store, prefix + ".b" + std::to_string(k)));
  }
  return y;
}

ValueId res_block(Graph& g, ParameterStore& store, ValueId x, const SpiralTable& table,
                  const std::string& prefix, std::size_t cin, std::size_t cout,
                  NormMode norm_mode, std::size_t gamma_depth) {
  require(g.value(x).cols() == cin, "res_block: input channel mismatch at " + prefix);
  ValueId h = spiral_conv(g, store, x, table, prefix + "conv1", gamma_depth);
  h = apply_norm(g, store, h, prefix + "norm1", norm_mode);
  h = g.elu(h);
  h = spiral_conv(g, store, h, table, prefix + "conv2", gamma_depth);
  h = apply_norm(g, store, h, prefix + "norm2", norm_mode);
  ValueId skip = x;
  if (cin != cout)
    skip = g.linear(x, g.param(store, prefix + "skip.w"), g.param(store, prefix + "skip.b"));
  return g.elu(g.add(h, skip));
}

ValueId encode_mesh(Graph& g, ParameterStore& store, ValueId coords,
                    const MeshHierarchy& hierarchy, const ModelConfig& cfg) {
  require(g.value(coords).rank() == 2 && g.value(coords).cols() == 3,
          "encode_mesh: coords must be V x 3");
  require(g.value(coords).rows() == hierarchy.template_mesh.vertex_count(),
          "encode_mesh: vertex count does not match the template");
  const std::size_t levels = hierarchy.level_count();
  const auto& ch = cfg.mesh.channels;

  ValueId x = coords;
  std::size_t prev_count = hierarchy.template_mesh.vertex_count();
  for (std::size_t i = 0; i < levels; ++i) {
    const HierarchyLevel& level = hierarchy.levels[i];
    if (!identity_selection(level.selection, prev_count)) x = g.gather_rows(x, level.selection);
    const std::size_t cin = i == 0 ? 3 : ch[i - 1];
    x = res_block(g, store, x, level.spirals, "mesh.enc.block" + std::to_string(i) + ".", cin,
                  ch[i], cfg.norm_mode, cfg.mesh.gamma_depth);
    prev_count = level.mesh.vertex_count();
  }
  const std::size_t flat = hierarchy.vertex_count(levels - 1) * ch[levels - 1];
  x = g.reshape(x, {1, flat});
  return g.linear(x, g.param(store, "mesh.enc.flatten.w"), g.param(store, "mesh.enc.flatten.b"));
}

ValueId decode_embedding(Graph& g, ParameterStore& store, ValueId z,
                         const MeshHierarchy& hierarchy, const ModelConfig& cfg) {
  require(g.value(z).size() == cfg.transformer.dim, "decode_embedding: dimension mismatch");
  const std::size_t levels = hierarchy.level_count();
  const auto& ch = cfg.mesh.channels;
  ValueId zin = z;
  if (g.value(z).rank() != 2) zin = g.reshape(z, {1, cfg.transformer.dim});

  ValueId x = g.linear(zin, g.param(store, "mesh.dec.expand.w"),
                       g.param(store, "mesh.dec.expand.b"));
  x = g.reshape(x, {hierarchy.vertex_count(levels - 1), ch[levels - 1]});

  for (std::size_t i = levels; i-- > 1;) {
    const HierarchyLevel& level = hierarchy.levels[i];
    x = res_block(g, store, x, level.spirals, "mesh.dec.block" + std::to_string(i) + ".", ch[i],
                  ch[i - 1], cfg.norm_mode, cfg.mesh.gamma_depth);
    x = g.upsample(x, level.up);
  }
  const HierarchyLevel& level0 = hierarchy.levels[0];
  x = res_block(g, store, x, level0.spirals, "mesh.dec.block0.", ch[0], ch[0], cfg.norm_mode,
                cfg.mesh.gamma_depth);
  x = spiral_conv(g, store, x, level0.spirals, "mesh.dec.head", 1);
  if (!identity_up(level0.up)) x = g.upsample(x, level0.up);
  return x;
}

Tensor encode(const Tensor& coords, ParameterStore& store, const MeshHierarchy& hierarchy,
              const ModelConfig& cfg) {
  Graph g;
  ValueId id = encode_mesh(g, store, g.constant(coords), hierarchy, cfg);
  return g.value(id);
}

Tensor decode(const Tensor& embedding, ParameterStore& store, const MeshHierarchy& hierarchy,
              const ModelConfig& cfg) {
  Graph g;
  ValueId id = decode_embedding(g, store, g.constant(embedding), hierarchy, cfg);
  return g.value(id);
}

}  // namespace meshseq
