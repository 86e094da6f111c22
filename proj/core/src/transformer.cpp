#include "meshseq/transformer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace meshseq {

namespace {

std::string block_prefix(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "transformer.block%02zu.", i);
  return buf;
}

}  // namespace

ValueId encoder_block(Graph& g, ParameterStore& store, ValueId x,
                      const std::vector<std::uint8_t>& key_masked, const std::string& prefix,
                      const TransformerConfig& cfg) {
  const std::size_t d = cfg.dim, heads = cfg.heads, dh = d / heads;
  require(g.value(x).rank() == 2 && g.value(x).cols() == d,
          "encoder_block: input must be T x D");

  ValueId h = g.layer_norm(x, g.param(store, prefix + "ln1.gamma"),
                           g.param(store, prefix + "ln1.beta"));
  ValueId q = g.linear(h, g.param(store, prefix + "attn.wq"), g.param(store, prefix + "attn.bq"));
  ValueId k = g.linear(h, g.param(store, prefix + "attn.wk"), g.param(store, prefix + "attn.bk"));
  ValueId v = g.linear(h, g.param(store, prefix + "attn.wv"), g.param(store, prefix + "attn.bv"));

  std::vector<ValueId> contexts;
  contexts.reserve(heads);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t i = 0; i < heads; ++i) {
    ValueId qh = g.slice_cols(q, i * dh, dh);
    ValueId kh = g.slice_cols(k, i * dh, dh);
    ValueId vh = g.slice_cols(v, i * dh, dh);
    ValueId scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
    ValueId weights = g.masked_softmax(scores, key_masked);
    contexts.push_back(g.matmul(weights, vh));
  }
  ValueId ctx = heads == 1 ? contexts[0] : g.concat_cols(contexts);
  ValueId attn = g.linear(ctx, g.param(store, prefix + "attn.wo"),
                          g.param(store, prefix + "attn.bo"));
  x = g.add(x, attn);

  ValueId h2 = g.layer_norm(x, g.param(store, prefix + "ln2.gamma"),
                            g.param(store, prefix + "ln2.beta"));
  ValueId m = g.linear(h2, g.param(store, prefix + "mlp.w1"), g.param(store, prefix + "mlp.b1"));
  m = g.gelu(m);
  m = g.linear(m, g.param(store, prefix + "mlp.w2"), g.param(store, prefix + "mlp.b2"));
  return g.add(x, m);
}

ValueId transformer_forward(Graph& g, ParameterStore& store, ValueId x,
                            const std::vector<std::uint8_t>& key_masked,
                            const TransformerConfig& cfg) {
  for (std::size_t b = 0; b < cfg.blocks; ++b)
    x = encoder_block(g, store, x, key_masked, block_prefix(b), cfg);
  return g.layer_norm(x, g.param(store, "transformer.final_ln.gamma"),
                      g.param(store, "transformer.final_ln.beta"));
}

Tensor modulate(const Tensor& mesh_embedding, const Tensor& positional, const Tensor& cognitive) {
  require(mesh_embedding.size() == positional.size() &&
              mesh_embedding.size() == cognitive.size(),
          "modulate: dimension mismatch");
  Tensor out = mesh_embedding;
  axpy(1.0, positional, out);
  axpy(1.0, cognitive, out);
  return out;
}

NameMap load_name_map(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_name_map: cannot open " + path);
  NameMap map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const std::string sep = " -> ";
    std::size_t pos = line.find(sep);
    require(pos != std::string::npos,
            "load_name_map: missing ' -> ' at line " + std::to_string(lineno));
    std::string ext = line.substr(0, pos);
    std::string internal = line.substr(pos + sep.size());
    map.external_to_internal[ext] = internal;
    map.internal_to_external[internal] = ext;
  }
  return map;
}

ParameterStore load_pretrained(const std::string& checkpoint_path, const ModelConfig& cfg,
                               const MeshHierarchy& hierarchy, const NameMap& names, bool frozen,
                               std::uint64_t fresh_seed, bool classifier_head) {
  ModelSpecOptions opts;
  opts.frozen = frozen;
  opts.classifier_head = classifier_head;
  auto specs = build_param_specs(cfg, hierarchy, opts);
  ParameterStore store = init_store(specs, fresh_seed);

  auto manifest = read_checkpoint_manifest(checkpoint_path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : manifest) by_name[e.name] = &e;

  for (const auto& spec : specs) {
    if (!is_transformer_param(spec.name)) continue;
    const std::string ext = names.external_for(spec.name);
    auto it = by_name.find(ext);
    require(it != by_name.end(), "load_pretrained: checkpoint is missing tensor " + ext);
    Tensor t = read_checkpoint_tensor(checkpoint_path, *it->second);
    require(t.shape() == spec.shape, "load_pretrained: shape mismatch for " + ext);
    store.get(spec.name).value = std::move(t);
  }
  return store;
}

}  // namespace meshseq
