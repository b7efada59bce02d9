#pragma once

#include "caranet/tensor.hpp"

#include <functional>
#include <vector>

namespace caranet {

/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
double relative_error(double analytic, double numeric);

/// Central-difference check of a scalar-valued f at x. Returns the max
/// relative error over all elements of x.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps = 1e-3);

struct GradCheckOptions {
    double eps = 1e-3;
    /// Entries probed per tensor; <= 0 probes every entry.
    Index max_entries_per_tensor = 0;
    std::uint64_t seed = 0;
    /// Compare one directional derivative per tensor (random direction in
    /// [-1, 1]^n) instead of single entries. Needed on deep graphs where many
    /// per-entry gradients sit near double rounding noise.
    bool directional = false;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_tensor = 0;
    Index worst_entry = 0;  // -1 for a directional probe
    Index probed = 0;
};

/// Checks d loss / d t for every tensor in `inputs` (all must be leaves with
/// requires_grad). `loss` rebuilds the graph from the current input values.
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options);

}  // namespace caranet
