#include "meshseq/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "meshseq/rng.hpp"

namespace meshseq {

GradCheckReport grad_check(const ScalarFn& loss, const GradFn& analytic, ParameterStore& params,
                           double step, std::uint64_t seed, std::size_t min_coords) {
  require(step > 0.0, "grad_check: step must be > 0");
  GradCheckReport report;
  auto grads = analytic(params);
  for (auto& [name, grad] : grads) {
    Param& p = params.get(name);
    require(grad.same_shape(p.value), "grad_check: gradient shape mismatch for " + name);

    std::vector<std::size_t> coords(p.value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > min_coords) {
      Rng rng(stream_seed(seed, fnv1a64(name)));
      rng.shuffle(coords);
      coords.resize(min_coords);
    }

    GradCheckEntry entry;
    entry.name = name;
    for (std::size_t i : coords) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double f_plus = loss(params);
      p.value[i] = orig - step;
      const double f_minus = loss(params);
      p.value[i] = orig;
      const double fd = (f_plus - f_minus) / (2.0 * step);
      const double a = grad[i];
      const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace meshseq
