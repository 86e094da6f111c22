#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "meshseq/gradcheck.hpp"
#include "meshseq/rng.hpp"
#include "meshseq/spiralnet.hpp"
#include "meshseq/transformer.hpp"

using namespace meshseq;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

ModelConfig toy_config() { return model_preset("toy"); }

MeshHierarchy toy_hierarchy() {
  return precompute_hierarchy(make_icosahedron(), {{1, 6, 1}, {2, 6, 1}});
}

ParameterStore transformer_store(const TransformerConfig& cfg, std::uint64_t seed,
                                 bool frozen = false) {
  return init_store(transformer_param_specs(cfg, frozen), seed);
}

}  // namespace

TEST_CASE("masked softmax rows sum to 1 over unmasked keys") {
  Graph g;
  std::vector<std::uint8_t> mask = {0, 1, 0, 1, 0};
  ValueId w = g.masked_softmax(g.constant(random_tensor({6, 5}, 1, 3.0)), mask);
  for (std::size_t r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      if (mask[c]) CHECK(g.value(w).at(r, c) == 0.0);  // exactly zero weight
      sum += g.value(w).at(r, c);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax over a single unmasked key routes that value exactly") {
  Graph g;
  std::vector<std::uint8_t> mask = {1, 0, 1};
  Tensor v = random_tensor({3, 4}, 2);
  ValueId w = g.masked_softmax(g.constant(random_tensor({3, 3}, 3)), mask);
  ValueId ctx = g.matmul(w, g.constant(v));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(g.value(ctx).at(r, c) == v.at(1, c));
}

TEST_CASE("all keys masked is rejected") {
  Graph g;
  std::vector<std::uint8_t> mask = {1, 1, 1};
  CHECK_THROWS_AS(g.masked_softmax(g.constant(random_tensor({3, 3}, 4)), mask), Error);
}

TEST_CASE("perturbing a masked value row leaves attention output unchanged") {
  std::vector<std::uint8_t> mask = {0, 1, 0, 0};
  Tensor scores = random_tensor({4, 4}, 5);
  Tensor v = random_tensor({4, 8}, 6);
  Graph g1;
  Tensor ctx1 = g1.value(g1.matmul(g1.masked_softmax(g1.constant(scores), mask), g1.constant(v)));
  for (std::size_t c = 0; c < 8; ++c) v.at(1, c) += 1e6 * (c + 1.0);
  Graph g2;
  Tensor ctx2 = g2.value(g2.matmul(g2.masked_softmax(g2.constant(scores), mask), g2.constant(v)));
  for (std::size_t i = 0; i < ctx1.size(); ++i) CHECK(ctx1[i] == ctx2[i]);
}

TEST_CASE("perturbing a masked slot's embedding leaves unmasked outputs identical") {
  TransformerConfig cfg{2, 16, 2, 32, kMaxSlots};
  ParameterStore store = transformer_store(cfg, 7);
  std::vector<std::uint8_t> mask = {0, 0, 1, 0, 1, 1, 1, 1};
  Tensor x = random_tensor({kMaxSlots, 16}, 8);

  Graph g1;
  Tensor out1 = g1.value(transformer_forward(g1, store, g1.constant(x), mask, cfg));
  for (std::size_t c = 0; c < 16; ++c) {
    x.at(2, c) = 1e3 * (c + 1.0);
    x.at(4, c) = -42.0 * (c + 2.0);
  }
  Graph g2;
  Tensor out2 = g2.value(transformer_forward(g2, store, g2.constant(x), mask, cfg));
  for (std::size_t t = 0; t < kMaxSlots; ++t) {
    if (mask[t]) continue;
    for (std::size_t c = 0; c < 16; ++c) CHECK(out1.at(t, c) == out2.at(t, c));
  }
}

TEST_CASE("zeroed residual branches reduce the transformer to the final LN") {
  TransformerConfig cfg{2, 16, 2, 32, kMaxSlots};
  ParameterStore store = transformer_store(cfg, 9);
  for (auto& [name, p] : store.entries()) {
    if (name.find(".attn.wo") != std::string::npos || name.find(".attn.bo") != std::string::npos ||
        name.find(".mlp.w2") != std::string::npos || name.find(".mlp.b2") != std::string::npos)
      p.value.fill(0.0);
  }
  Tensor x = random_tensor({kMaxSlots, 16}, 10);
  std::vector<std::uint8_t> mask(kMaxSlots, 0);
  Graph g;
  Tensor out = g.value(transformer_forward(g, store, g.constant(x), mask, cfg));
  Graph g2;
  Tensor ln = g2.value(g2.layer_norm(g2.constant(x),
                                     g2.param(store, "transformer.final_ln.gamma"),
                                     g2.param(store, "transformer.final_ln.beta")));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(ln[i]).epsilon(1e-12));
}

TEST_CASE("transformer forward is deterministic") {
  TransformerConfig cfg{2, 16, 4, 32, kMaxSlots};
  ParameterStore store = transformer_store(cfg, 11);
  Tensor x = random_tensor({kMaxSlots, 16}, 12);
  std::vector<std::uint8_t> mask = {0, 0, 0, 1, 1, 1, 1, 1};
  Graph g1, g2;
  Tensor a = g1.value(transformer_forward(g1, store, g1.constant(x), mask, cfg));
  Tensor b = g2.value(transformer_forward(g2, store, g2.constant(x), mask, cfg));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("encoder block gradients pass finite differences on a toy config") {
  TransformerConfig cfg{2, 16, 2, 32, 4};
  cfg.max_slots = kMaxSlots;  // unused here; block works on T=4 rows
  ParameterStore store = transformer_store(cfg, 13);
  Tensor x = random_tensor({4, 16}, 14, 0.5);
  std::vector<std::uint8_t> mask = {0, 0, 1, 0};

  auto build = [&](ParameterStore& s, Graph& g) {
    ValueId y = encoder_block(g, s, g.constant(x), mask, "transformer.block00.", cfg);
    return g.mean(g.mul(y, y));
  };
  auto loss = [&](ParameterStore& s) {
    Graph g;
    return g.scalar(build(s, g));
  };
  auto analytic = [&](ParameterStore& s) {
    Graph g;
    return forward_backward(g, build(s, g));
  };
  ParameterStore block_params;
  for (const auto& [name, p] : store.entries())
    if (name.rfind("transformer.block00.", 0) == 0) block_params.create(name, p.value, true);
  CHECK(grad_check(loss, analytic, block_params, 1e-5, 15, 8).max_rel_err < 1e-4);
}

TEST_CASE("full transformer gradients pass finite differences") {
  TransformerConfig cfg{2, 16, 2, 32, kMaxSlots};
  ParameterStore store = transformer_store(cfg, 16);
  Tensor x = random_tensor({4, 16}, 17, 0.5);
  std::vector<std::uint8_t> mask = {0, 1, 0, 0};

  auto build = [&](ParameterStore& s, Graph& g) {
    ValueId y = transformer_forward(g, s, g.constant(x), mask, cfg);
    return g.mean(g.mul(y, y));
  };
  auto loss = [&](ParameterStore& s) {
    Graph g;
    return g.scalar(build(s, g));
  };
  auto analytic = [&](ParameterStore& s) {
    Graph g;
    return forward_backward(g, build(s, g));
  };
  CHECK(grad_check(loss, analytic, store, 1e-5, 18, 4).max_rel_err < 1e-4);
}

TEST_CASE("permuting slots with the key mask permutes outputs identically") {
  TransformerConfig cfg{2, 16, 2, 32, kMaxSlots};
  ParameterStore store = transformer_store(cfg, 19);
  Tensor x = random_tensor({kMaxSlots, 16}, 20);
  std::vector<std::uint8_t> mask = {0, 0, 1, 0, 1, 1, 0, 1};

  std::vector<std::size_t> perm = {3, 0, 6, 2, 7, 1, 5, 4};
  Tensor xp({kMaxSlots, 16});
  std::vector<std::uint8_t> maskp(kMaxSlots);
  for (std::size_t t = 0; t < kMaxSlots; ++t) {
    maskp[t] = mask[perm[t]];
    for (std::size_t c = 0; c < 16; ++c) xp.at(t, c) = x.at(perm[t], c);
  }
  Graph g1, g2;
  Tensor out = g1.value(transformer_forward(g1, store, g1.constant(x), mask, cfg));
  Tensor outp = g2.value(transformer_forward(g2, store, g2.constant(xp), maskp, cfg));
  // attention reduces over slots in slot order, so equality holds to rounding
  for (std::size_t t = 0; t < kMaxSlots; ++t)
    for (std::size_t c = 0; c < 16; ++c)
      CHECK(outp.at(t, c) == doctest::Approx(out.at(perm[t], c)).epsilon(1e-10));
}

TEST_CASE("modulate sums mesh, positional and cognitive embeddings") {
  Tensor z = random_tensor({16}, 21);
  Tensor pos = random_tensor({16}, 22);
  Tensor ce = random_tensor({16}, 23);

  Tensor zero({16});
  Tensor plain = modulate(z, zero, zero);
  for (std::size_t i = 0; i < 16; ++i) CHECK(plain[i] == z[i]);

  Tensor a = modulate(modulate(z, pos, zero), zero, ce);
  Tensor b = modulate(z, zero, modulate(pos, ce, zero));
  for (std::size_t i = 0; i < 16; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

  // distinct CE rows with identical meshes give distinct slot vectors
  Tensor ce2 = random_tensor({16}, 24);
  Tensor s1 = modulate(z, pos, ce);
  Tensor s2 = modulate(z, pos, ce2);
  bool differs = false;
  for (std::size_t i = 0; i < 16; ++i) differs = differs || s1[i] != s2[i];
  CHECK(differs);
}

TEST_CASE("load_pretrained loads transformer weights and freezes all but LN") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore source = init_store(build_param_specs(cfg, h, {}), 31);
  const std::string ckpt = temp_path("meshseq_pretrained.cshw");
  save_checkpoint(source, ckpt);

  ParameterStore loaded = load_pretrained(ckpt, cfg, h, {}, /*frozen=*/true, /*fresh_seed=*/77);
  for (const auto& [name, p] : loaded.entries()) {
    if (is_transformer_param(name)) {
      // weights come from the checkpoint (f32 storage, exact under round-trip)
      const Param& src = source.get(name);
      for (std::size_t i = 0; i < p.value.size(); ++i)
        CHECK(p.value[i] == static_cast<double>(static_cast<float>(src.value[i])));
      CHECK(p.trainable == is_transformer_ln_param(name));
    } else {
      CHECK(p.trainable);
    }
  }

  // fresh mesh weights differ from the source store
  bool mesh_differs = false;
  const Tensor& a = loaded.get("mesh.enc.flatten.w").value;
  const Tensor& b = source.get("mesh.enc.flatten.w").value;
  for (std::size_t i = 0; i < a.size(); ++i) mesh_differs = mesh_differs || a[i] != b[i];
  CHECK(mesh_differs);

  ParameterStore unfrozen = load_pretrained(ckpt, cfg, h, {}, /*frozen=*/false, 77);
  for (const auto& [name, p] : unfrozen.entries()) CHECK(p.trainable);
}

TEST_CASE("load_pretrained rejects a missing tensor by name") {
  MeshHierarchy h = toy_hierarchy();
  ModelConfig cfg = toy_config();
  ParameterStore source = init_store(transformer_param_specs(cfg.transformer, false), 32);
  // drop one tensor
  ParameterStore partial;
  for (const auto& [name, p] : source.entries())
    if (name != "transformer.block01.mlp.w2") partial.create(name, p.value, p.trainable);
  const std::string ckpt = temp_path("meshseq_partial.cshw");
  save_checkpoint(partial, ckpt);
  try {
    load_pretrained(ckpt, cfg, h, {}, true, 1);
    FAIL("expected a missing-tensor error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("transformer.block01.mlp.w2") != std::string::npos);
  }
}

TEST_CASE("name map translates external checkpoint names") {
  const std::string path = temp_path("meshseq_names.map");
  {
    std::ofstream out(path);
    out << "h.0.ln_1.g -> transformer.block00.ln1.gamma\n";
    out << "# comment line\n";
    out << "h.0.ln_1.b -> transformer.block00.ln1.beta\n";
  }
  NameMap map = load_name_map(path);
  CHECK(map.external_for("transformer.block00.ln1.gamma") == "h.0.ln_1.g");
  CHECK(map.external_for("transformer.block00.ln1.beta") == "h.0.ln_1.b");
  CHECK(map.external_for("transformer.block00.attn.wq") == "transformer.block00.attn.wq");
}

TEST_CASE("frozen spec counts LN parameters as the only trainable transformer weights") {
  TransformerConfig vit_large{24, 1024, 16, 4096, kMaxSlots};
  auto specs = transformer_param_specs(vit_large, true);
  std::size_t trainable = 0, total = 0;
  for (const auto& s : specs) {
    total += s.size();
    if (s.trainable) trainable += s.size();
  }
  CHECK(trainable == (2 * 24 + 1) * 2 * 1024);
  CHECK(trainable == 100352);
  CHECK(total > 300000000);
}
