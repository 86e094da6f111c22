#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "meshseq/gradcheck.hpp"
#include "meshseq/graph.hpp"
#include "meshseq/optimizer.hpp"
#include "meshseq/param_store.hpp"
#include "meshseq/rng.hpp"

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

}  // namespace

TEST_CASE("loss = sum(p) has an all-ones gradient") {
  ParameterStore store;
  store.create("p", random_tensor({5}, 1));
  Graph g;
  ValueId loss = g.sum(g.param(store, "p"));
  auto grads = forward_backward(g, loss);
  REQUIRE(grads.count("p"));
  for (std::size_t i = 0; i < 5; ++i) CHECK(grads.at("p")[i] == 1.0);
}

TEST_CASE("loss = 0.5 * ||p||^2 has gradient p") {
  ParameterStore store;
  store.create("p", random_tensor({7}, 2));
  Graph g;
  ValueId p = g.param(store, "p");
  ValueId loss = g.scale(g.sum(g.mul(p, p)), 0.5);
  auto grads = forward_backward(g, loss);
  for (std::size_t i = 0; i < 7; ++i)
    CHECK(grads.at("p")[i] == doctest::Approx(store.get("p").value[i]).epsilon(1e-12));
}

TEST_CASE("non-trainable parameters receive no gradient") {
  ParameterStore store;
  store.create("w", random_tensor({4}, 3), false);
  store.create("v", random_tensor({4}, 4), true);
  Graph g;
  ValueId loss = g.sum(g.mul(g.param(store, "w"), g.param(store, "v")));
  auto grads = forward_backward(g, loss);
  CHECK(grads.count("w") == 0);
  CHECK(grads.count("v") == 1);
}

TEST_CASE("grad_check is exact for a linear function") {
  ParameterStore store;
  store.create("p", random_tensor({6}, 5));
  Tensor coeff = random_tensor({6}, 6);

  auto loss = [&](ParameterStore& s) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 6; ++i) sum += coeff[i] * s.get("p").value[i];
    return sum;
  };
  auto analytic = [&](ParameterStore& s) {
    (void)s;
    std::map<std::string, Tensor> grads;
    grads.emplace("p", coeff);
    return grads;
  };
  auto report = grad_check(loss, analytic, store, 1e-5, 0);
  CHECK(report.max_rel_err < 1e-10);
}

TEST_CASE("grad_check flags a wrong gradient") {
  ParameterStore store;
  store.create("p", random_tensor({4}, 7));
  auto loss = [&](ParameterStore& s) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) sum += s.get("p").value[i] * s.get("p").value[i];
    return sum;
  };
  auto analytic = [&](ParameterStore& s) {
    std::map<std::string, Tensor> grads;
    grads.emplace("p", s.get("p").value);  // wrong: should be 2p
    return grads;
  };
  CHECK(grad_check(loss, analytic, store, 1e-5, 0).max_rel_err > 1e-2);
}

TEST_CASE("elementwise and reduction ops pass finite differences") {
  ParameterStore store;
  store.create("a", random_tensor({3, 4}, 11, 0.5));
  store.create("b", random_tensor({3, 4}, 12, 0.5));

  auto build = [&](ParameterStore& s, Graph& g) {
    ValueId a = g.param(s, "a");
    ValueId b = g.param(s, "b");
    ValueId x = g.mul(g.add(a, b), g.sub(a, b));
    x = g.add(g.elu(x), g.gelu(a));
    ValueId d = g.div(g.frobenius_norm(x), g.add(g.frobenius_norm(b), g.constant(Tensor::scalar(1.0))));
    return g.add(g.mean(x), g.add(d, g.log(g.exp(g.mean(a)))));
  };
  auto loss = [&](ParameterStore& s) {
    Graph g;
    return g.scalar(build(s, g));
  };
  auto analytic = [&](ParameterStore& s) {
    Graph g;
    return forward_backward(g, build(s, g));
  };
  CHECK(grad_check(loss, analytic, store, 1e-5, 1).max_rel_err < 1e-6);
}

TEST_CASE("normalization and softmax ops pass finite differences") {
  ParameterStore store;
  store.create("x", random_tensor({4, 6}, 21));
  store.create("gamma", random_tensor({6}, 22, 0.3));
  store.create("beta", random_tensor({6}, 23, 0.3));
  std::vector<std::uint8_t> mask = {0, 1, 0, 0};

  auto build = [&](ParameterStore& s, Graph& g) {
    ValueId x = g.param(s, "x");
    ValueId ln = g.layer_norm(x, g.param(s, "gamma"), g.param(s, "beta"));
    ValueId cn = g.channel_norm(x, g.param(s, "gamma"), g.param(s, "beta"));
    ValueId scores = g.matmul_nt(ln, cn);  // 4 x 4
    ValueId w = g.masked_softmax(scores, mask);
    ValueId ctx = g.matmul(w, g.gather_rows(x, {0, 1, 2, 3}));
    return g.mean(g.mean_rows_masked(ctx, mask));
  };
  auto loss = [&](ParameterStore& s) {
    Graph g;
    return g.scalar(build(s, g));
  };
  auto analytic = [&](ParameterStore& s) {
    Graph g;
    return forward_backward(g, build(s, g));
  };
  CHECK(grad_check(loss, analytic, store, 1e-5, 2).max_rel_err < 1e-6);
}

TEST_CASE("adam leaves parameters unchanged on a zero gradient") {
  ParameterStore store;
  store.create("p", random_tensor({5}, 31));
  const Tensor before = store.get("p").value;
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor({5}));
  adam_step(store, grads, {}, 1);
  for (std::size_t i = 0; i < 5; ++i) CHECK(store.get("p").value[i] == before[i]);
}

TEST_CASE("first adam step from zero moments is a signed unit step") {
  ParameterStore store;
  Tensor p({1});
  p[0] = 2.0;
  store.create("p", p);
  std::map<std::string, Tensor> grads;
  Tensor gt({1});
  gt[0] = 3.0;
  grads.emplace("p", gt);
  AdamConfig cfg;
  adam_step(store, grads, cfg, 1);
  // mhat = g, vhat = g^2  =>  update = -lr * g / (|g| + eps)
  const double expected = 2.0 - cfg.lr * 3.0 / (3.0 + cfg.eps);
  CHECK(store.get("p").value[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("frozen parameters are bit-identical after adam steps") {
  ParameterStore store;
  store.create("frozen", random_tensor({8}, 41), false);
  const Tensor before = store.get("frozen").value;
  std::map<std::string, Tensor> grads;
  grads.emplace("frozen", random_tensor({8}, 42));
  for (std::size_t t = 1; t <= 10; ++t) adam_step(store, grads, {}, t);
  for (std::size_t i = 0; i < 8; ++i) CHECK(store.get("frozen").value[i] == before[i]);
}

TEST_CASE("adam rejects a shape mismatch") {
  ParameterStore store;
  store.create("p", random_tensor({4}, 43));
  std::map<std::string, Tensor> grads;
  grads.emplace("p", random_tensor({5}, 44));
  CHECK_THROWS_AS(adam_step(store, grads, {}, 1), Error);
}

TEST_CASE("training steps are deterministic for a fixed seed") {
  auto run = [](std::uint64_t seed) {
    ParameterStore store;
    store.create("w", random_tensor({6, 6}, seed));
    Tensor x = random_tensor({6}, 99);
    for (std::size_t t = 1; t <= 30; ++t) {
      Graph g;
      ValueId w = g.param(store, "w");
      ValueId v = g.reshape(g.constant(x), {1, 6});
      ValueId y = g.matmul_nt(v, w);
      ValueId loss = g.mean(g.mul(y, y));
      adam_step(store, forward_backward(g, loss), {}, t);
    }
    return store.get("w").value;
  };
  const Tensor a = run(5), b = run(5), c = run(6);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i] != c[i];
  CHECK(any_diff);
}

TEST_CASE("non-finite loss aborts the step with a diagnostic") {
  ParameterStore store;
  store.create("p", random_tensor({2}, 51));
  Graph g;
  ValueId p = g.param(store, "p");
  ValueId loss = g.log(g.scale(g.sum(g.mul(p, p)), -1.0));  // log of a negative number
  CHECK(!std::isfinite(g.scalar(loss)));
  CHECK_THROWS_AS(forward_backward(g, loss), Error);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  ParameterStore store;
  store.create("alpha.w", random_tensor({3, 4}, 61));
  store.create("alpha.b", random_tensor({4}, 62), false);
  store.create("beta.m", random_tensor({2, 2, 2}, 63));

  for (auto dtype : {CheckpointDtype::f32, CheckpointDtype::f64}) {
    const std::string path = temp_path("meshseq_ckpt_roundtrip.cshw");
    save_checkpoint(store, path, dtype);
    ParameterStore loaded = load_checkpoint(path);
    REQUIRE(loaded.entries().size() == 3);
    CHECK(loaded.get("alpha.b").trainable == false);
    CHECK(loaded.get("alpha.w").trainable == true);

    // saving the loaded store again must reproduce the file byte for byte
    const std::string path2 = temp_path("meshseq_ckpt_roundtrip2.cshw");
    save_checkpoint(loaded, path2, dtype);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    if (dtype == CheckpointDtype::f64) {
      for (const auto& [name, param] : store.entries())
        for (std::size_t i = 0; i < param.value.size(); ++i)
          CHECK(loaded.get(name).value[i] == param.value[i]);
    }
  }
}

TEST_CASE("checkpoint manifest exposes named tensors") {
  ParameterStore store;
  store.create("x", random_tensor({4, 2}, 71));
  const std::string path = temp_path("meshseq_ckpt_manifest.cshw");
  save_checkpoint(store, path, CheckpointDtype::f64);
  auto manifest = read_checkpoint_manifest(path);
  REQUIRE(manifest.size() == 1);
  CHECK(manifest[0].name == "x");
  CHECK(manifest[0].shape == std::vector<std::size_t>{4, 2});
  Tensor t = read_checkpoint_tensor(path, manifest[0]);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == store.get("x").value[i]);
}

TEST_CASE("reused parameter leaves accumulate gradients") {
  ParameterStore store;
  store.create("p", random_tensor({3}, 81));
  Graph g;
  ValueId p1 = g.param(store, "p");
  ValueId p2 = g.param(store, "p");
  CHECK(p1 == p2);  // memoized leaf
  ValueId loss = g.sum(g.add(p1, p2));
  auto grads = forward_backward(g, loss);
  for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at("p")[i] == 2.0);
}
