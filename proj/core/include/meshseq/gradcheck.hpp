#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "meshseq/param_store.hpp"

namespace meshseq {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass(double tol) const { return max_rel_err < tol; }
};

// Forward-only loss evaluation; must not mutate the store.
using ScalarFn = std::function<double(ParameterStore&)>;
// Forward + backward, returning per-name gradients for trainable parameters.
using GradFn = std::function<std::map<std::string, Tensor>(ParameterStore&)>;

// Central differences (f(p+h) - f(p-h)) / 2h against analytic gradients on a
// seeded random subsample of at least min_coords coordinates per trainable
// parameter. Relative error is |a - fd| / max(1, |a|, |fd|).
GradCheckReport grad_check(const ScalarFn& loss, const GradFn& analytic, ParameterStore& params,
                           double step, std::uint64_t seed, std::size_t min_coords = 32);

}  // namespace meshseq
