#pragma once

#include <map>
#include <string>

#include "meshseq/param_store.hpp"

namespace meshseq {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected Adam applied only to trainable parameters present
// in grads. Moment buffers live in the store. t is 1-based.
void adam_step(ParameterStore& store, const std::map<std::string, Tensor>& grads,
               const AdamConfig& cfg, std::size_t t);

}  // namespace meshseq
