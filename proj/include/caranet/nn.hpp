#pragma once

#include "caranet/ops.hpp"
#include "caranet/random.hpp"
#include "caranet/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace caranet {

/// A named trainable tensor. Names are unique within a model and double as
/// checkpoint keys.
template <typename Scalar>
struct Parameter {
    std::string name;
    Tensor<Scalar> value;
};

/// Owns every parameter of a model in creation order.
template <typename Scalar>
class ParameterStore {
public:
    /// Zero-mean uniform init in [-b, b], b = sqrt(3 / fan_in) (unit variance
    /// per input). With b = 1/sqrt(fan_in) the signal dies out before the decoder.
    Tensor<Scalar> uniform(const std::string& name, Shape shape, Index fan_in, Rng& rng)
    {
        const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
        typename Tensor<Scalar>::Array values(shape_numel(shape));
        for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
        return insert(name, Tensor<Scalar>(std::move(shape), std::move(values), true));
    }

    Tensor<Scalar> zeros(const std::string& name, Shape shape)
    {
        return insert(name, Tensor<Scalar>::zeros(std::move(shape), true));
    }

    const std::vector<Parameter<Scalar>>& parameters() const { return params_; }

    const Parameter<Scalar>* find(const std::string& name) const
    {
        const auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    Index parameter_count() const
    {
        Index n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void zero_grad()
    {
        for (auto& p : params_) p.value.zero_grad();
    }

private:
    Tensor<Scalar> insert(const std::string& name, Tensor<Scalar> t)
    {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        index_.emplace(name, params_.size());
        params_.push_back({name, t});
        return t;
    }

    std::vector<Parameter<Scalar>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// 2-D convolution layer with registered weight and (zero-initialized) bias.
template <typename Scalar>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParameterStore<Scalar>& store, const std::string& name, Index in_channels, Index out_channels,
           std::array<Index, 2> kernel, Conv2dOptions options, Rng& rng)
        : options_(options)
    {
        const Index fan_in = in_channels * kernel[0] * kernel[1];
        weight_ = store.uniform(name + ".weight", Shape{out_channels, in_channels, kernel[0], kernel[1]}, fan_in, rng);
        bias_ = store.zeros(name + ".bias", Shape{out_channels});
    }

    /// Square kernel with "same" padding for stride 1.
    static Conv2d same(ParameterStore<Scalar>& store, const std::string& name, Index in_channels, Index out_channels,
                       Index kernel, Index dilation, Rng& rng)
    {
        return Conv2d(store, name, in_channels, out_channels, {kernel, kernel},
                      Conv2dOptions(1, dilation * (kernel - 1) / 2, dilation), rng);
    }

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv2d(x, weight_, bias_, options_); }

    const Tensor<Scalar>& weight() const { return weight_; }
    const Tensor<Scalar>& bias() const { return bias_; }
    Index in_channels() const { return weight_.dim(1); }
    Index out_channels() const { return weight_.dim(0); }
    const Conv2dOptions& options() const { return options_; }

private:
    Tensor<Scalar> weight_;
    Tensor<Scalar> bias_;
    Conv2dOptions options_;
};

}  // namespace caranet
