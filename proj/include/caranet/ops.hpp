#pragma once

#include "caranet/tensor.hpp"

#include <array>
#include <optional>
#include <vector>

namespace caranet {

// Differentiable operator set. All functions are pure: they read their inputs
// and return a fresh tensor, recording a backward rule when any input tracks
// gradients and GradMode is enabled. Inner products and reductions accumulate
// in double regardless of Scalar.

struct Conv2dOptions {
    Index stride = 1;
    Index pad_h = 0;
    Index pad_w = 0;
    Index dilation = 1;

    Conv2dOptions() = default;
    Conv2dOptions(Index stride_, Index padding, Index dilation_)
        : stride(stride_), pad_h(padding), pad_w(padding), dilation(dilation_)
    {
    }
    Conv2dOptions(Index stride_, std::array<Index, 2> padding, Index dilation_)
        : stride(stride_), pad_h(padding[0]), pad_w(padding[1]), dilation(dilation_)
    {
    }
};

/// floor((n + 2p - d(k-1) - 1)/s) + 1
Index conv_output_extent(Index n, Index kernel, Index stride, Index padding, Index dilation);

/// x: N x I x H x W, w: O x I x Kh x Kw, b: O or undefined. Zero padding.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b,
                      const Conv2dOptions& opt);

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b, Index stride,
                      Index padding, Index dilation)
{
    return conv2d(x, w, b, Conv2dOptions(stride, padding, dilation));
}

/// Bilinear enlargement (align_corners = false) of an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, Index out_h, Index out_w);

template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, double factor);

/// Batched product of (..., M, K) and (..., K, N); batch extents broadcast
/// numpy-style (missing or unit extents stretch).
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// Pointwise family. Binary operands must have equal shapes, or one of them a
// single element (scalar broadcast).
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
/// log(1 + e^x), stable for both signs.
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x);
/// scale * x + shift
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, double scale, double shift = 0.0);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, double factor)
{
    return affine(x, factor, 0.0);
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis, bool keepdim = false);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis, bool keepdim = false);
/// Largest element; the gradient flows to the first maximal entry.
template <typename Scalar>
Tensor<Scalar> max(const Tensor<Scalar>& x);

/// Average pooling; the divisor is always kernel^2, zero padding included.
template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, Index kernel, Index stride, Index padding);

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);
/// Contiguous sub-range [start, start + length) along one axis.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start, Index length);
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& order);
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// N x 1 x H x W -> N x C x H x W by repeating the single channel.
template <typename Scalar>
Tensor<Scalar> expand_channels(const Tensor<Scalar>& x, Index channels);

}  // namespace caranet
