#include "caranet/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace caranet {

namespace {

using detail::make_result;
using detail::Node;

template <typename Scalar>
using Arr = typename Tensor<Scalar>::Array;
using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
void require_rank(const Tensor<Scalar>& x, int rank, const char* op)
{
    if (x.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(x.shape()));
}

int normalize_axis(int axis, int rank, const char* op)
{
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
    return axis;
}

// Splits a shape around an axis into (outer, axis extent, inner).
struct AxisSplit {
    Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis)
{
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    s.extent = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <typename Scalar>
bool tracks(const NodePtr<Scalar>& p)
{
    return p && p->requires_grad;
}

template <typename Scalar, typename Derived>
void accumulate(const NodePtr<Scalar>& p, const Eigen::ArrayBase<Derived>& delta)
{
    p->grad_buffer() += delta.template cast<Scalar>();
}

// ----- binary pointwise ------------------------------------------------------

enum class Broadcast { none, lhs_scalar, rhs_scalar };

template <typename Scalar>
Broadcast check_binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op)
{
    if (a.shape() == b.shape()) return Broadcast::none;
    if (b.numel() == 1) return Broadcast::rhs_scalar;
    if (a.numel() == 1) return Broadcast::lhs_scalar;
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename Scalar>
Arr<Scalar> expanded(const Tensor<Scalar>& t, Index n)
{
    if (t.numel() == n) return t.values();
    return Arr<Scalar>::Constant(n, t.values()[0]);
}

template <typename Scalar, typename Derived>
void accumulate_operand(const NodePtr<Scalar>& p, const Eigen::ArrayBase<Derived>& delta)
{
    if (!tracks(p)) return;
    if (p->value.size() == delta.size()) {
        accumulate(p, delta);
    } else {
        // scalar operand: reduce in double
        double s = 0.0;
        for (Index i = 0; i < delta.size(); ++i) s += static_cast<double>(delta.derived()[i]);
        p->grad_buffer()[0] += static_cast<Scalar>(s);
    }
}

}  // namespace

Index conv_output_extent(Index n, Index kernel, Index stride, Index padding, Index dilation)
{
    const Index span = n + 2 * padding - dilation * (kernel - 1) - 1;
    if (span < 0) return 0;
    return span / stride + 1;
}

// ----- conv2d ----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b,
                      const Conv2dOptions& opt)
{
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d weight");
    if (opt.stride < 1 || opt.dilation < 1 || opt.pad_h < 0 || opt.pad_w < 0)
        throw ShapeError("conv2d: stride and dilation must be >= 1, padding >= 0");
    const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Index O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw ShapeError("conv2d: input has " + std::to_string(C) + " channels, weight expects " +
                         std::to_string(w.dim(1)));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != O)) throw ShapeError("conv2d: bias must have shape (O)");
    const Index Ho = conv_output_extent(H, kh, opt.stride, opt.pad_h, opt.dilation);
    const Index Wo = conv_output_extent(W, kw, opt.stride, opt.pad_w, opt.dilation);
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: non-positive output extent for input " + shape_str(x.shape()));

    const Index K = C * kh * kw;
    const Index P = Ho * Wo;
    const bool pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.pad_h == 0 && opt.pad_w == 0;
    const bool record = GradMode::enabled() && (x.requires_grad() || w.requires_grad() ||
                                                (b.defined() && b.requires_grad()));

    const RowMatD weight = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                               w.data(), O, K)
                               .template cast<double>();

    auto im2col = [&, opt](const Scalar* xn) {
        RowMatD col(K, P);
        for (Index c = 0; c < C; ++c)
            for (Index ki = 0; ki < kh; ++ki)
                for (Index kj = 0; kj < kw; ++kj) {
                    double* row = col.row((c * kh + ki) * kw + kj).data();
                    for (Index oh = 0; oh < Ho; ++oh) {
                        const Index ih = oh * opt.stride - opt.pad_h + ki * opt.dilation;
                        double* dst = row + oh * Wo;
                        if (ih < 0 || ih >= H) {
                            std::fill(dst, dst + Wo, 0.0);
                            continue;
                        }
                        const Scalar* src = xn + (c * H + ih) * W;
                        for (Index ow = 0; ow < Wo; ++ow) {
                            const Index iw = ow * opt.stride - opt.pad_w + kj * opt.dilation;
                            dst[ow] = (iw >= 0 && iw < W) ? static_cast<double>(src[iw]) : 0.0;
                        }
                    }
                }
        return col;
    };

    auto cols = std::make_shared<std::vector<RowMatD>>();
    Arr<Scalar> out(N * O * P);
    for (Index n = 0; n < N; ++n) {
        const Scalar* xn = x.data() + n * C * H * W;
        RowMatD col = pointwise ? RowMatD(Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                                                         Eigen::RowMajor>>(xn, C, P)
                                              .template cast<double>())
                                : im2col(xn);
        RowMatD y = weight * col;
        if (b.defined())
            for (Index o = 0; o < O; ++o) y.row(o).array() += static_cast<double>(b.values()[o]);
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data() + n * O * P, O,
                                                                                             P) = y.template cast<Scalar>();
        if (record && w.requires_grad()) cols->push_back(std::move(col));
    }

    std::vector<NodePtr<Scalar>> parents{x.node_ptr(), w.node_ptr()};
    if (b.defined()) parents.push_back(b.node_ptr());
    return make_result<Scalar>(
        "conv2d", Shape{N, O, Ho, Wo}, std::move(out), std::move(parents),
        [=](Node<Scalar>& self) {
            const auto& px = self.parents[0];
            const auto& pw = self.parents[1];
            const NodePtr<Scalar> pb = self.parents.size() > 2 ? self.parents[2] : nullptr;
            RowMatD dweight = RowMatD::Zero(O, K);
            Eigen::VectorXd dbias = Eigen::VectorXd::Zero(O);
            Arr<Scalar>* dx = tracks(px) ? &px->grad_buffer() : nullptr;
            for (Index n = 0; n < N; ++n) {
                const RowMatD dy = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                                                  Eigen::RowMajor>>(self.grad.data() + n * O * P, O, P)
                                       .template cast<double>();
                if (tracks(pw)) dweight.noalias() += dy * (*cols)[static_cast<std::size_t>(n)].transpose();
                if (tracks(pb)) dbias += dy.rowwise().sum();
                if (!dx) continue;
                const RowMatD dcol = weight.transpose() * dy;
                Scalar* dxn = dx->data() + n * C * H * W;
                if (pointwise) {
                    for (Index i = 0; i < C * P; ++i) dxn[i] += static_cast<Scalar>(dcol.data()[i]);
                    continue;
                }
                // col2im: accumulate in double per image, then add once
                Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(C * H * W);
                for (Index c = 0; c < C; ++c)
                    for (Index ki = 0; ki < kh; ++ki)
                        for (Index kj = 0; kj < kw; ++kj) {
                            const double* row = dcol.row((c * kh + ki) * kw + kj).data();
                            for (Index oh = 0; oh < Ho; ++oh) {
                                const Index ih = oh * opt.stride - opt.pad_h + ki * opt.dilation;
                                if (ih < 0 || ih >= H) continue;
                                double* dst = acc.data() + (c * H + ih) * W;
                                for (Index ow = 0; ow < Wo; ++ow) {
                                    const Index iw = ow * opt.stride - opt.pad_w + kj * opt.dilation;
                                    if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
                                }
                            }
                        }
                for (Index i = 0; i < C * H * W; ++i) dxn[i] += static_cast<Scalar>(acc[i]);
            }
            if (tracks(pw)) accumulate(pw, Eigen::Map<const Eigen::ArrayXd>(dweight.data(), O * K));
            if (tracks(pb)) accumulate(pb, dbias.array());
        });
}

// ----- bilinear upsample -----------------------------------------------------

namespace {

struct LerpTap {
    Index i0, i1;
    double w0, w1;
};

// align_corners = false: source coordinate (i + 0.5) * in/out - 0.5, clamped at 0.
std::vector<LerpTap> lerp_taps(Index in, Index out)
{
    std::vector<LerpTap> taps(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        Index i0 = static_cast<Index>(src);
        if (i0 > in - 1) i0 = in - 1;
        const Index i1 = i0 < in - 1 ? i0 + 1 : i0;
        const double l1 = src - static_cast<double>(i0);
        taps[static_cast<std::size_t>(i)] = {i0, i1, 1.0 - l1, l1};
    }
    return taps;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, Index out_h, Index out_w)
{
    require_rank(x, 4, "bilinear_upsample");
    const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (out_h < H || out_w < W)
        throw ShapeError("bilinear_upsample: downscaling requested " + shape_str(x.shape()) + " -> " +
                         std::to_string(out_h) + "x" + std::to_string(out_w));
    if (out_h == H && out_w == W) return x;

    const auto ty = std::make_shared<const std::vector<LerpTap>>(lerp_taps(H, out_h));
    const auto tx = std::make_shared<const std::vector<LerpTap>>(lerp_taps(W, out_w));
    const Index planes = N * C;
    Arr<Scalar> out(planes * out_h * out_w);
    for (Index p = 0; p < planes; ++p) {
        const Scalar* src = x.data() + p * H * W;
        Scalar* dst = out.data() + p * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
            const LerpTap& a = (*ty)[static_cast<std::size_t>(oy)];
            const Scalar* r0 = src + a.i0 * W;
            const Scalar* r1 = src + a.i1 * W;
            for (Index ox = 0; ox < out_w; ++ox) {
                const LerpTap& bx = (*tx)[static_cast<std::size_t>(ox)];
                const double top = bx.w0 * r0[bx.i0] + bx.w1 * r0[bx.i1];
                const double bot = bx.w0 * r1[bx.i0] + bx.w1 * r1[bx.i1];
                dst[oy * out_w + ox] = static_cast<Scalar>(a.w0 * top + a.w1 * bot);
            }
        }
    }
    return make_result<Scalar>("bilinear_upsample", Shape{N, C, out_h, out_w}, std::move(out), {x.node_ptr()},
                               [=](Node<Scalar>& self) {
                                   Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(planes * H * W);
                                   for (Index p = 0; p < planes; ++p) {
                                       const Scalar* g = self.grad.data() + p * out_h * out_w;
                                       double* d = acc.data() + p * H * W;
                                       for (Index oy = 0; oy < out_h; ++oy) {
                                           const LerpTap& a = (*ty)[static_cast<std::size_t>(oy)];
                                           for (Index ox = 0; ox < out_w; ++ox) {
                                               const LerpTap& bx = (*tx)[static_cast<std::size_t>(ox)];
                                               const double gv = g[oy * out_w + ox];
                                               d[a.i0 * W + bx.i0] += a.w0 * bx.w0 * gv;
                                               d[a.i0 * W + bx.i1] += a.w0 * bx.w1 * gv;
                                               d[a.i1 * W + bx.i0] += a.w1 * bx.w0 * gv;
                                               d[a.i1 * W + bx.i1] += a.w1 * bx.w1 * gv;
                                           }
                                       }
                                   }
                                   accumulate(self.parents[0], acc);
                               });
}

template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, double factor)
{
    require_rank(x, 4, "bilinear_upsample");
    if (!(factor > 0)) throw ShapeError("bilinear_upsample: factor must be positive");
    const auto target = [factor](Index n) { return static_cast<Index>(std::llround(static_cast<double>(n) * factor)); };
    return bilinear_upsample(x, target(x.dim(2)), target(x.dim(3)));
}

// ----- matmul ----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
    const Index M = a.dim(-2), K = a.dim(-1), K2 = b.dim(-2), N = b.dim(-1);
    if (K != K2)
        throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const std::size_t rank = std::max(batch_a.size(), batch_b.size());
    Shape batch(rank), ea(rank, 1), eb(rank, 1);
    std::copy(batch_a.begin(), batch_a.end(), ea.begin() + static_cast<std::ptrdiff_t>(rank - batch_a.size()));
    std::copy(batch_b.begin(), batch_b.end(), eb.begin() + static_cast<std::ptrdiff_t>(rank - batch_b.size()));
    for (std::size_t i = 0; i < rank; ++i) {
        if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
            throw ShapeError("matmul: batch extents not broadcastable " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        batch[i] = std::max(ea[i], eb[i]);
    }
    const Index batches = shape_numel(batch);
    // offsets (in matrices) of each operand for every output batch entry
    auto offsets = std::make_shared<std::vector<std::pair<Index, Index>>>();
    offsets->reserve(static_cast<std::size_t>(batches));
    for (Index flat = 0; flat < batches; ++flat) {
        Index rem = flat, oa = 0, ob = 0, sa = 1, sb = 1;
        for (std::size_t i = rank; i-- > 0;) {
            const Index idx = rem % batch[i];
            rem /= batch[i];
            oa += (ea[i] == 1 ? 0 : idx) * sa;
            ob += (eb[i] == 1 ? 0 : idx) * sb;
            sa *= ea[i];
            sb *= eb[i];
        }
        offsets->emplace_back(oa, ob);
    }

    using MapC = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    Arr<Scalar> out(batches * M * N);
    for (Index i = 0; i < batches; ++i) {
        const auto [oa, ob] = (*offsets)[static_cast<std::size_t>(i)];
        const RowMatD prod = MapC(a.data() + oa * M * K, M, K).template cast<double>() *
                             MapC(b.data() + ob * K * N, K, N).template cast<double>();
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data() + i * M * N, M,
                                                                                             N) = prod.template cast<Scalar>();
    }
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);
    return make_result<Scalar>(
        "matmul", std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()}, [=](Node<Scalar>& self) {
            const auto& pa = self.parents[0];
            const auto& pb = self.parents[1];
            Eigen::ArrayXd da = tracks(pa) ? Eigen::ArrayXd::Zero(pa->value.size()) : Eigen::ArrayXd();
            Eigen::ArrayXd db = tracks(pb) ? Eigen::ArrayXd::Zero(pb->value.size()) : Eigen::ArrayXd();
            for (Index i = 0; i < batches; ++i) {
                const auto [oa, ob] = (*offsets)[static_cast<std::size_t>(i)];
                const RowMatD g = MapC(self.grad.data() + i * M * N, M, N).template cast<double>();
                if (tracks(pa)) {
                    const RowMatD bm = MapC(pb->value.data() + ob * K * N, K, N).template cast<double>();
                    Eigen::Map<RowMatD>(da.data() + oa * M * K, M, K) += g * bm.transpose();
                }
                if (tracks(pb)) {
                    const RowMatD am = MapC(pa->value.data() + oa * M * K, M, K).template cast<double>();
                    Eigen::Map<RowMatD>(db.data() + ob * K * N, K, N) += am.transpose() * g;
                }
            }
            if (tracks(pa)) accumulate(pa, da);
            if (tracks(pb)) accumulate(pb, db);
        });
}

// ----- pointwise -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    const Broadcast bc = check_binary(a, b, "add");
    const Index n = bc == Broadcast::lhs_scalar ? b.numel() : a.numel();
    const Shape shape = bc == Broadcast::lhs_scalar ? b.shape() : a.shape();
    Arr<Scalar> out = expanded(a, n) + expanded(b, n);
    return make_result<Scalar>("add", shape, std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<Scalar>& self) {
        accumulate_operand(self.parents[0], self.grad);
        accumulate_operand(self.parents[1], self.grad);
    });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    const Broadcast bc = check_binary(a, b, "sub");
    const Index n = bc == Broadcast::lhs_scalar ? b.numel() : a.numel();
    const Shape shape = bc == Broadcast::lhs_scalar ? b.shape() : a.shape();
    Arr<Scalar> out = expanded(a, n) - expanded(b, n);
    return make_result<Scalar>("sub", shape, std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<Scalar>& self) {
        accumulate_operand(self.parents[0], self.grad);
        accumulate_operand(self.parents[1], (-self.grad).eval());
    });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    const Broadcast bc = check_binary(a, b, "mul");
    const Index n = bc == Broadcast::lhs_scalar ? b.numel() : a.numel();
    const Shape shape = bc == Broadcast::lhs_scalar ? b.shape() : a.shape();
    Arr<Scalar> out = expanded(a, n) * expanded(b, n);
    return make_result<Scalar>("mul", shape, std::move(out), {a.node_ptr(), b.node_ptr()}, [n](Node<Scalar>& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        auto value_of = [n](const NodePtr<Scalar>& p) {
            return p->value.size() == n ? p->value : Arr<Scalar>::Constant(n, p->value[0]);
        };
        if (tracks(pa)) accumulate_operand(pa, (self.grad * value_of(pb)).eval());
        if (tracks(pb)) accumulate_operand(pb, (self.grad * value_of(pa)).eval());
    });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    const Broadcast bc = check_binary(a, b, "div");
    const Index n = bc == Broadcast::lhs_scalar ? b.numel() : a.numel();
    const Shape shape = bc == Broadcast::lhs_scalar ? b.shape() : a.shape();
    const Arr<Scalar> den = expanded(b, n);
    if ((den == Scalar(0)).any()) throw NumericError("div: division by zero");
    Arr<Scalar> out = expanded(a, n) / den;
    return make_result<Scalar>("div", shape, std::move(out), {a.node_ptr(), b.node_ptr()}, [n](Node<Scalar>& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        auto value_of = [n](const NodePtr<Scalar>& p) {
            return p->value.size() == n ? p->value : Arr<Scalar>::Constant(n, p->value[0]);
        };
        const Arr<Scalar> bv = value_of(pb);
        if (tracks(pa)) accumulate_operand(pa, (self.grad / bv).eval());
        if (tracks(pb)) accumulate_operand(pb, (-self.grad * self.value / bv).eval());
    });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x)
{
    Arr<Scalar> out = x.values().max(Scalar(0));
    return make_result<Scalar>("relu", x.shape(), std::move(out), {x.node_ptr()}, [](Node<Scalar>& self) {
        const auto& p = self.parents[0];
        accumulate(p, (p->value > Scalar(0)).select(self.grad, Scalar(0)));
    });
}

namespace {

template <typename Scalar>
Scalar stable_sigmoid(Scalar t)
{
    if (t >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-t));
    const Scalar e = std::exp(t);
    return e / (Scalar(1) + e);
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x)
{
    Arr<Scalar> out = x.values().unaryExpr([](Scalar t) { return stable_sigmoid(t); });
    return make_result<Scalar>("sigmoid", x.shape(), std::move(out), {x.node_ptr()}, [](Node<Scalar>& self) {
        accumulate(self.parents[0], self.grad * self.value * (Scalar(1) - self.value));
    });
}

template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x)
{
    Arr<Scalar> out =
        x.values().unaryExpr([](Scalar t) { return std::max(t, Scalar(0)) + std::log1p(std::exp(-std::abs(t))); });
    return make_result<Scalar>("softplus", x.shape(), std::move(out), {x.node_ptr()}, [](Node<Scalar>& self) {
        const auto& p = self.parents[0];
        accumulate(p, self.grad * p->value.unaryExpr([](Scalar t) { return stable_sigmoid(t); }));
    });
}

template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, double scale_by, double shift)
{
    Arr<Scalar> out = (x.values().template cast<double>() * scale_by + shift).template cast<Scalar>();
    return make_result<Scalar>("affine", x.shape(), std::move(out), {x.node_ptr()}, [scale_by](Node<Scalar>& self) {
        accumulate(self.parents[0], self.grad.template cast<double>() * scale_by);
    });
}

// ----- softmax -----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis)
{
    axis = normalize_axis(axis, x.rank(), "softmax");
    const AxisSplit s = split_at(x.shape(), axis);
    Arr<Scalar> out(x.numel());
    for (Index o = 0; o < s.outer; ++o)
        for (Index i = 0; i < s.inner; ++i) {
            const Index base = o * s.extent * s.inner + i;
            double m = -std::numeric_limits<double>::infinity();
            for (Index k = 0; k < s.extent; ++k) m = std::max(m, static_cast<double>(x.values()[base + k * s.inner]));
            double total = 0.0;
            for (Index k = 0; k < s.extent; ++k) total += std::exp(static_cast<double>(x.values()[base + k * s.inner]) - m);
            for (Index k = 0; k < s.extent; ++k)
                out[base + k * s.inner] =
                    static_cast<Scalar>(std::exp(static_cast<double>(x.values()[base + k * s.inner]) - m) / total);
        }
    return make_result<Scalar>("softmax", x.shape(), std::move(out), {x.node_ptr()}, [s](Node<Scalar>& self) {
        Eigen::ArrayXd d(self.value.size());
        for (Index o = 0; o < s.outer; ++o)
            for (Index i = 0; i < s.inner; ++i) {
                const Index base = o * s.extent * s.inner + i;
                double dot = 0.0;
                for (Index k = 0; k < s.extent; ++k)
                    dot += static_cast<double>(self.grad[base + k * s.inner]) * self.value[base + k * s.inner];
                for (Index k = 0; k < s.extent; ++k) {
                    const Index j = base + k * s.inner;
                    d[j] = static_cast<double>(self.value[j]) * (static_cast<double>(self.grad[j]) - dot);
                }
            }
        accumulate(self.parents[0], d);
    });
}

// ----- reductions --------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x)
{
    double total = 0.0;
    for (Index i = 0; i < x.numel(); ++i) total += static_cast<double>(x.values()[i]);
    return make_result<Scalar>("sum", Shape{}, Arr<Scalar>::Constant(1, static_cast<Scalar>(total)), {x.node_ptr()},
                               [](Node<Scalar>& self) {
                                   auto& p = self.parents[0];
                                   p->grad_buffer() += self.grad[0];
                               });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x)
{
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return affine(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis, bool keepdim)
{
    axis = normalize_axis(axis, x.rank(), "sum");
    const AxisSplit s = split_at(x.shape(), axis);
    Arr<Scalar> out(s.outer * s.inner);
    for (Index o = 0; o < s.outer; ++o)
        for (Index i = 0; i < s.inner; ++i) {
            double total = 0.0;
            for (Index k = 0; k < s.extent; ++k) total += static_cast<double>(x.values()[(o * s.extent + k) * s.inner + i]);
            out[o * s.inner + i] = static_cast<Scalar>(total);
        }
    Shape shape = x.shape();
    if (keepdim)
        shape[static_cast<std::size_t>(axis)] = 1;
    else
        shape.erase(shape.begin() + axis);
    return make_result<Scalar>("sum_axis", std::move(shape), std::move(out), {x.node_ptr()}, [s](Node<Scalar>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (Index o = 0; o < s.outer; ++o)
            for (Index k = 0; k < s.extent; ++k)
                for (Index i = 0; i < s.inner; ++i) g[(o * s.extent + k) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis, bool keepdim)
{
    const Index extent = x.dim(axis);
    if (extent == 0) throw ShapeError("mean over empty axis");
    return affine(sum(x, axis, keepdim), 1.0 / static_cast<double>(extent));
}

template <typename Scalar>
Tensor<Scalar> max(const Tensor<Scalar>& x)
{
    if (x.numel() == 0) throw ShapeError("max of empty tensor");
    Index arg = 0;
    for (Index i = 1; i < x.numel(); ++i)
        if (x.values()[i] > x.values()[arg]) arg = i;
    return make_result<Scalar>("max", Shape{}, Arr<Scalar>::Constant(1, x.values()[arg]), {x.node_ptr()},
                               [arg](Node<Scalar>& self) { self.parents[0]->grad_buffer()[arg] += self.grad[0]; });
}

template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, Index kernel, Index stride, Index padding)
{
    require_rank(x, 4, "avg_pool2d");
    if (kernel < 1 || stride < 1 || padding < 0) throw ShapeError("avg_pool2d: invalid window parameters");
    const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (kernel > H + 2 * padding || kernel > W + 2 * padding)
        throw ShapeError("avg_pool2d: window larger than padded input " + shape_str(x.shape()));
    const Index Ho = (H + 2 * padding - kernel) / stride + 1;
    const Index Wo = (W + 2 * padding - kernel) / stride + 1;
    const double inv_area = 1.0 / static_cast<double>(kernel * kernel);
    // Clipped window bounds per output row/column: [lo, hi) in input coordinates.
    auto bounds = [&](Index out, Index in) {
        std::vector<std::pair<Index, Index>> b(static_cast<std::size_t>(out));
        for (Index o = 0; o < out; ++o) {
            const Index lo = o * stride - padding;
            b[static_cast<std::size_t>(o)] = {std::max<Index>(lo, 0), std::min<Index>(lo + kernel, in)};
        }
        return b;
    };
    const auto by = std::make_shared<const std::vector<std::pair<Index, Index>>>(bounds(Ho, H));
    const auto bx = std::make_shared<const std::vector<std::pair<Index, Index>>>(bounds(Wo, W));

    Arr<Scalar> out(N * C * Ho * Wo);
    Eigen::ArrayXXd integral(H + 1, W + 1);
    for (Index p = 0; p < N * C; ++p) {
        const Scalar* src = x.data() + p * H * W;
        integral.setZero();
        for (Index i = 0; i < H; ++i) {
            double row = 0.0;
            for (Index j = 0; j < W; ++j) {
                row += static_cast<double>(src[i * W + j]);
                integral(i + 1, j + 1) = integral(i, j + 1) + row;
            }
        }
        for (Index oy = 0; oy < Ho; ++oy) {
            const auto [y0, y1] = (*by)[static_cast<std::size_t>(oy)];
            for (Index ox = 0; ox < Wo; ++ox) {
                const auto [x0, x1] = (*bx)[static_cast<std::size_t>(ox)];
                double s = 0.0;
                if (y1 > y0 && x1 > x0) s = integral(y1, x1) - integral(y0, x1) - integral(y1, x0) + integral(y0, x0);
                out[(p * Ho + oy) * Wo + ox] = static_cast<Scalar>(s * inv_area);
            }
        }
    }
    return make_result<Scalar>(
        "avg_pool2d", Shape{N, C, Ho, Wo}, std::move(out), {x.node_ptr()}, [=](Node<Scalar>& self) {
            // Scatter each output gradient onto its clipped window through a 2-D
            // difference array, then integrate.
            Eigen::ArrayXd acc(N * C * H * W);
            Eigen::ArrayXXd diff(H + 1, W + 1);
            for (Index p = 0; p < N * C; ++p) {
                diff.setZero();
                for (Index oy = 0; oy < Ho; ++oy) {
                    const auto [y0, y1] = (*by)[static_cast<std::size_t>(oy)];
                    for (Index ox = 0; ox < Wo; ++ox) {
                        const auto [x0, x1] = (*bx)[static_cast<std::size_t>(ox)];
                        if (y1 <= y0 || x1 <= x0) continue;
                        const double g = static_cast<double>(self.grad[(p * Ho + oy) * Wo + ox]) * inv_area;
                        diff(y0, x0) += g;
                        diff(y0, x1) -= g;
                        diff(y1, x0) -= g;
                        diff(y1, x1) += g;
                    }
                }
                for (Index i = 0; i < H; ++i) {
                    double row = 0.0;
                    for (Index j = 0; j < W; ++j) {
                        row += diff(i, j);
                        const double above = i > 0 ? acc[(p * H + i - 1) * W + j] : 0.0;
                        acc[(p * H + i) * W + j] = above + row;
                    }
                }
            }
            accumulate(self.parents[0], acc);
        });
}

// ----- layout ----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis)
{
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int rank = parts.front().rank();
    axis = normalize_axis(axis, rank, "concat");
    Shape shape = parts.front().shape();
    Index total = 0;
    std::vector<Index> extents;
    for (const auto& t : parts) {
        Shape probe = t.shape();
        if (static_cast<int>(probe.size()) != rank) throw ShapeError("concat: rank mismatch");
        probe[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
        if (probe != shape)
            throw ShapeError("concat: extent mismatch " + shape_str(t.shape()) + " vs " + shape_str(parts.front().shape()));
        extents.push_back(t.dim(axis));
        total += t.dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = total;
    const AxisSplit s = split_at(shape, axis);
    Arr<Scalar> out(shape_numel(shape));
    std::vector<NodePtr<Scalar>> parents;
    Index offset = 0;
    for (std::size_t t = 0; t < parts.size(); ++t) {
        const Index len = extents[t];
        for (Index o = 0; o < s.outer; ++o)
            out.segment((o * total + offset) * s.inner, len * s.inner) = parts[t].values().segment(o * len * s.inner, len * s.inner);
        offset += len;
        parents.push_back(parts[t].node_ptr());
    }
    return make_result<Scalar>("concat", std::move(shape), std::move(out), std::move(parents),
                               [s, total, extents](Node<Scalar>& self) {
                                   Index offset = 0;
                                   for (std::size_t t = 0; t < extents.size(); ++t) {
                                       const Index len = extents[t];
                                       const auto& p = self.parents[t];
                                       if (tracks(p)) {
                                           auto& g = p->grad_buffer();
                                           for (Index o = 0; o < s.outer; ++o)
                                               g.segment(o * len * s.inner, len * s.inner) +=
                                                   self.grad.segment((o * total + offset) * s.inner, len * s.inner);
                                       }
                                       offset += len;
                                   }
                               });
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start, Index length)
{
    axis = normalize_axis(axis, x.rank(), "slice");
    const AxisSplit s = split_at(x.shape(), axis);
    if (start < 0 || length < 0 || start + length > s.extent) throw ShapeError("slice: range out of bounds");
    Shape shape = x.shape();
    shape[static_cast<std::size_t>(axis)] = length;
    Arr<Scalar> out(s.outer * length * s.inner);
    for (Index o = 0; o < s.outer; ++o)
        out.segment(o * length * s.inner, length * s.inner) =
            x.values().segment((o * s.extent + start) * s.inner, length * s.inner);
    return make_result<Scalar>("slice", std::move(shape), std::move(out), {x.node_ptr()},
                               [s, start, length](Node<Scalar>& self) {
                                   auto& g = self.parents[0]->grad_buffer();
                                   for (Index o = 0; o < s.outer; ++o)
                                       g.segment((o * s.extent + start) * s.inner, length * s.inner) +=
                                           self.grad.segment(o * length * s.inner, length * s.inner);
                               });
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& order)
{
    const int rank = x.rank();
    if (static_cast<int>(order.size()) != rank) throw ShapeError("permute: order length differs from rank");
    std::vector<bool> seen(static_cast<std::size_t>(rank), false);
    for (int a : order) {
        if (a < 0 || a >= rank || seen[static_cast<std::size_t>(a)]) throw ShapeError("permute: invalid axis order");
        seen[static_cast<std::size_t>(a)] = true;
    }
    Shape in_strides(static_cast<std::size_t>(rank), 1);
    for (int i = rank - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i) + 1] * x.shape()[static_cast<std::size_t>(i) + 1];
    Shape shape(static_cast<std::size_t>(rank));
    Shape strides(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    }
    // source index for every output position
    const Index n = x.numel();
    auto source = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
    std::vector<Index> counter(static_cast<std::size_t>(rank), 0);
    Index src = 0;
    for (Index i = 0; i < n; ++i) {
        (*source)[static_cast<std::size_t>(i)] = src;
        for (int d = rank - 1; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            if (++counter[du] < shape[du]) {
                src += strides[du];
                break;
            }
            src -= strides[du] * (shape[du] - 1);
            counter[du] = 0;
        }
    }
    Arr<Scalar> out(n);
    for (Index i = 0; i < n; ++i) out[i] = x.values()[(*source)[static_cast<std::size_t>(i)]];
    return make_result<Scalar>("permute", std::move(shape), std::move(out), {x.node_ptr()}, [source](Node<Scalar>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < source->size(); ++i) g[(*source)[i]] += self.grad[static_cast<Index>(i)];
    });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape)
{
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    return make_result<Scalar>("reshape", std::move(shape), x.values(), {x.node_ptr()},
                               [](Node<Scalar>& self) { self.parents[0]->grad_buffer() += self.grad; });
}

template <typename Scalar>
Tensor<Scalar> expand_channels(const Tensor<Scalar>& x, Index channels)
{
    require_rank(x, 4, "expand_channels");
    if (x.dim(1) != 1) throw ShapeError("expand_channels: input must have one channel");
    const Index N = x.dim(0), plane = x.dim(2) * x.dim(3);
    Arr<Scalar> out(N * channels * plane);
    for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < channels; ++c) out.segment((n * channels + c) * plane, plane) = x.values().segment(n * plane, plane);
    return make_result<Scalar>("expand_channels", Shape{N, channels, x.dim(2), x.dim(3)}, std::move(out), {x.node_ptr()},
                               [N, channels, plane](Node<Scalar>& self) {
                                   auto& g = self.parents[0]->grad_buffer();
                                   for (Index n = 0; n < N; ++n) {
                                       Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(plane);
                                       for (Index c = 0; c < channels; ++c)
                                           acc += self.grad.segment((n * channels + c) * plane, plane).template cast<double>();
                                       g.segment(n * plane, plane) += acc.cast<Scalar>();
                                   }
                               });
}

#define CARANET_INSTANTIATE_OPS(S)                                                                              \
    template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Conv2dOptions&); \
    template Tensor<S> bilinear_upsample<S>(const Tensor<S>&, Index, Index);                                  \
    template Tensor<S> bilinear_upsample<S>(const Tensor<S>&, double);                                        \
    template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                                         \
    template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                            \
    template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                            \
    template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                            \
    template Tensor<S> div<S>(const Tensor<S>&, const Tensor<S>&);                                            \
    template Tensor<S> relu<S>(const Tensor<S>&);                                                             \
    template Tensor<S> sigmoid<S>(const Tensor<S>&);                                                          \
    template Tensor<S> softplus<S>(const Tensor<S>&);                                                         \
    template Tensor<S> affine<S>(const Tensor<S>&, double, double);                                           \
    template Tensor<S> softmax<S>(const Tensor<S>&, int);                                                     \
    template Tensor<S> sum<S>(const Tensor<S>&);                                                              \
    template Tensor<S> sum<S>(const Tensor<S>&, int, bool);                                                   \
    template Tensor<S> mean<S>(const Tensor<S>&);                                                             \
    template Tensor<S> mean<S>(const Tensor<S>&, int, bool);                                                  \
    template Tensor<S> max<S>(const Tensor<S>&);                                                              \
    template Tensor<S> avg_pool2d<S>(const Tensor<S>&, Index, Index, Index);                                  \
    template Tensor<S> concat<S>(const std::vector<Tensor<S>>&, int);                                         \
    template Tensor<S> slice<S>(const Tensor<S>&, int, Index, Index);                                         \
    template Tensor<S> permute<S>(const Tensor<S>&, const std::vector<int>&);                                 \
    template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                                   \
    template Tensor<S> expand_channels<S>(const Tensor<S>&, Index);

CARANET_INSTANTIATE_OPS(float)
CARANET_INSTANTIATE_OPS(double)

}  // namespace caranet
