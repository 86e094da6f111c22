#include "meshseq/optimizer.hpp"

#include <cmath>

namespace meshseq {

void adam_step(ParameterStore& store, const std::map<std::string, Tensor>& grads,
               const AdamConfig& cfg, std::size_t t) {
  require(t >= 1, "adam_step: t must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (const auto& [name, grad] : grads) {
    Param& p = store.get(name);
    if (!p.trainable) continue;
    require(grad.same_shape(p.value), "adam_step: gradient shape mismatch for " + name);
    if (p.adam_m.size() != p.value.size()) {
      p.adam_m = Tensor(p.value.shape());
      p.adam_v = Tensor(p.value.shape());
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = grad[i];
      p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
      p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.adam_m[i] / bc1;
      const double vhat = p.adam_v[i] / bc2;
      p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace meshseq
