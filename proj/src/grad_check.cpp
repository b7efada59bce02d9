#include "caranet/grad_check.hpp"

#include "caranet/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace caranet {

double relative_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x, double eps)
{
    Tensor<double> probe(x.shape(), x.values(), true);
    GradCheckOptions options;
    options.eps = eps;
    return grad_check([&] { return f(probe); }, {probe}, options).max_rel_error;
}

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options)
{
    for (auto& t : inputs) {
        if (!t.requires_grad()) throw std::invalid_argument("grad_check: inputs must require grad");
        t.zero_grad();
    }
    {
        const Tensor<double> root = loss();
        if (root.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
        root.backward();
    }
    std::vector<Tensor<double>::Array> analytic;
    for (const auto& t : inputs) analytic.push_back(t.grad());

    NoGradGuard no_grad;
    Rng rng(options.seed);
    GradCheckResult result;
    const auto record = [&](double a, double numeric, std::size_t k, Index e) {
        const double err = relative_error(a, numeric);
        ++result.probed;
        if (err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_tensor = k;
            result.worst_entry = e;
        }
    };
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& values = inputs[k].mutable_values();
        if (options.directional) {
            const Tensor<double>::Array original = values;
            Tensor<double>::Array dir(values.size());
            for (auto& d : dir) d = rng.uniform(-1.0, 1.0);
            values = original + options.eps * dir;
            const double plus = loss().item();
            values = original - options.eps * dir;
            const double minus = loss().item();
            values = original;
            record((analytic[k] * dir).sum(), (plus - minus) / (2.0 * options.eps), k, -1);
            continue;
        }
        std::vector<Index> entries(static_cast<std::size_t>(values.size()));
        std::iota(entries.begin(), entries.end(), Index{0});
        if (options.max_entries_per_tensor > 0 && values.size() > options.max_entries_per_tensor) {
            // partial Fisher-Yates: first max_entries positions become a random sample
            for (Index i = 0; i < options.max_entries_per_tensor; ++i) {
                const auto j = static_cast<std::size_t>(rng.uniform_int(i, values.size() - 1));
                std::swap(entries[static_cast<std::size_t>(i)], entries[j]);
            }
            entries.resize(static_cast<std::size_t>(options.max_entries_per_tensor));
        }
        for (Index e : entries) {
            const double original = values[e];
            values[e] = original + options.eps;
            const double plus = loss().item();
            values[e] = original - options.eps;
            const double minus = loss().item();
            values[e] = original;
            record(analytic[k][e], (plus - minus) / (2.0 * options.eps), k, e);
        }
    }
    return result;
}

}  // namespace caranet
