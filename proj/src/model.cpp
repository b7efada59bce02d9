#include "caranet/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace caranet {

void CaraNetConfig::validate() const
{
    if (input_h <= 0 || input_w <= 0 || input_h % 16 != 0 || input_w % 16 != 0)
        throw std::invalid_argument("input extents must be positive multiples of 16");
    if (base_channels < 1 || decoder_channels < 1) throw std::invalid_argument("channel widths must be positive");
    if (cfp_rate < 0) throw std::invalid_argument("cfp_rate must be >= 0");
    if (cfp_channels != 4) throw std::invalid_argument("cfp_channels must be 4 (one branch per derived dilation rate)");
    if (res2net_scale < 2) throw std::invalid_argument("res2net_scale must be >= 2");
    for (int level = 1; level <= 5; ++level)
        if (level_channels(level) % res2net_scale != 0)
            throw std::invalid_argument("level " + std::to_string(level) + " width " +
                                        std::to_string(level_channels(level)) + " not divisible by res2net_scale");
    for (int level = 3; level <= 5; ++level)
        if (level_channels(level) % cfp_channels != 0)
            throw std::invalid_argument("CFP channel count K must divide the level width");
}

Index CaraNetConfig::level_channels(int level) const
{
    static constexpr std::array<Index, 5> multiplier{1, 2, 4, 8, 8};
    if (level < 1 || level > 5) throw std::out_of_range("encoder level must be 1..5");
    return base_channels * multiplier[static_cast<std::size_t>(level - 1)];
}

std::array<Index, 4> cfp_dilation_rates(Index d)
{
    auto at_least_one = [](Index r) { return std::max<Index>(1, r); };
    return {at_least_one(d / 8), at_least_one(d / 4), at_least_one(d / 2), at_least_one(d)};
}

std::array<Index, 2> level_extent(Index h, Index w, int level)
{
    const Index div = Index{1} << (level - 1);
    return {h / div, w / div};
}

// ----- Res2Net block ------------------------------------------------------------

template <typename Scalar>
Res2NetBlock<Scalar>::Res2NetBlock(ParameterStore<Scalar>& store, const std::string& name, Index in_channels,
                                   Index out_channels, Index scale, Rng& rng)
    : scale_(scale), width_(out_channels / scale)
{
    expand_ = Conv2d<Scalar>(store, name + ".expand", in_channels, out_channels, {1, 1}, {}, rng);
    for (Index g = 1; g < scale; ++g)
        group_convs_.push_back(Conv2d<Scalar>::same(store, name + ".group" + std::to_string(g), width_, width_, 3, 1, rng));
    merge_ = Conv2d<Scalar>(store, name + ".merge", out_channels, out_channels, {1, 1}, {}, rng);
    project_shortcut_ = in_channels != out_channels;
    if (project_shortcut_)
        shortcut_ = Conv2d<Scalar>(store, name + ".shortcut", in_channels, out_channels, {1, 1}, {}, rng);
}

template <typename Scalar>
Tensor<Scalar> Res2NetBlock<Scalar>::operator()(const Tensor<Scalar>& x) const
{
    const Tensor<Scalar> y = relu(expand_(x));
    std::vector<Tensor<Scalar>> groups;
    groups.reserve(static_cast<std::size_t>(scale_));
    groups.push_back(slice(y, 1, 0, width_));
    Tensor<Scalar> carry;
    for (Index g = 1; g < scale_; ++g) {
        Tensor<Scalar> part = slice(y, 1, g * width_, width_);
        if (carry.defined()) part = add(part, carry);
        carry = relu(group_convs_[static_cast<std::size_t>(g - 1)](part));
        groups.push_back(carry);
    }
    const Tensor<Scalar> merged = merge_(concat(groups, 1));
    return relu(add(merged, project_shortcut_ ? shortcut_(x) : x));
}

// ----- encoder ---------------------------------------------------------------------

template <typename Scalar>
Encoder<Scalar>::Encoder(ParameterStore<Scalar>& store, const CaraNetConfig& cfg, Rng& rng)
{
    stem_ = Conv2d<Scalar>::same(store, "encoder.stem", 3, cfg.level_channels(1), 3, 1, rng);
    Index in = cfg.level_channels(1);
    for (int level = 1; level <= 5; ++level) {
        const Index out = cfg.level_channels(level);
        levels_[static_cast<std::size_t>(level - 1)] =
            Res2NetBlock<Scalar>(store, "encoder.level" + std::to_string(level), in, out, cfg.res2net_scale, rng);
        in = out;
    }
}

template <typename Scalar>
EncoderFeatures<Scalar> Encoder<Scalar>::operator()(const Tensor<Scalar>& image) const
{
    if (image.rank() != 4 || image.dim(1) != 3) throw ShapeError("encoder expects N x 3 x H x W, got " + shape_str(image.shape()));
    if (image.dim(2) % 16 != 0 || image.dim(3) % 16 != 0)
        throw ShapeError("encoder input extents must be divisible by 16, got " + shape_str(image.shape()));
    EncoderFeatures<Scalar> out;
    Tensor<Scalar> x = relu(stem_(image));
    for (std::size_t i = 0; i < 5; ++i) {
        if (i > 0) x = avg_pool2d(x, 2, 2, 0);
        x = levels_[i](x);
        out.f[i] = x;
    }
    return out;
}

// ----- partial decoder ---------------------------------------------------------------

template <typename Scalar>
PartialDecoder<Scalar>::PartialDecoder(ParameterStore<Scalar>& store, const std::string& name,
                                       std::array<Index, 3> in_channels, Index c, Rng& rng)
{
    reduce3_ = Conv2d<Scalar>(store, name + ".reduce3", in_channels[0], c, {1, 1}, {}, rng);
    reduce4_ = Conv2d<Scalar>(store, name + ".reduce4", in_channels[1], c, {1, 1}, {}, rng);
    reduce5_ = Conv2d<Scalar>(store, name + ".reduce5", in_channels[2], c, {1, 1}, {}, rng);
    up1_ = Conv2d<Scalar>::same(store, name + ".up1", c, c, 3, 1, rng);
    up2_ = Conv2d<Scalar>::same(store, name + ".up2", c, c, 3, 1, rng);
    up3_ = Conv2d<Scalar>::same(store, name + ".up3", c, c, 3, 1, rng);
    up4_ = Conv2d<Scalar>::same(store, name + ".up4", c, c, 3, 1, rng);
    up5_ = Conv2d<Scalar>::same(store, name + ".up5", 2 * c, 2 * c, 3, 1, rng);
    cat2_ = Conv2d<Scalar>::same(store, name + ".cat2", 2 * c, 2 * c, 3, 1, rng);
    cat3_ = Conv2d<Scalar>::same(store, name + ".cat3", 3 * c, 3 * c, 3, 1, rng);
    fuse_ = Conv2d<Scalar>::same(store, name + ".fuse", 3 * c, 3 * c, 3, 1, rng);
    head_ = Conv2d<Scalar>(store, name + ".head", 3 * c, 1, {1, 1}, {}, rng);
}

template <typename Scalar>
Tensor<Scalar> PartialDecoder<Scalar>::operator()(const Tensor<Scalar>& f3, const Tensor<Scalar>& f4,
                                                  const Tensor<Scalar>& f5) const
{
    if (f4.dim(2) * 2 != f3.dim(2) || f4.dim(3) * 2 != f3.dim(3) || f5.dim(2) * 2 != f4.dim(2) ||
        f5.dim(3) * 2 != f4.dim(3))
        throw ShapeError("partial decoder inputs must have extents in ratio 4:2:1, got " + shape_str(f3.shape()) + ", " +
                         shape_str(f4.shape()) + ", " + shape_str(f5.shape()));
    const auto up = [](const Tensor<Scalar>& t) { return bilinear_upsample(t, t.dim(2) * 2, t.dim(3) * 2); };
    const Tensor<Scalar> x3 = relu(reduce3_(f3));
    const Tensor<Scalar> x4 = relu(reduce4_(f4));
    const Tensor<Scalar> x5 = relu(reduce5_(f5));

    const Tensor<Scalar> x5_up = up(x5);
    const Tensor<Scalar> x4_1 = mul(up1_(x5_up), x4);
    const Tensor<Scalar> x3_1 = mul(mul(up2_(up(x5_up)), up3_(up(x4))), x3);
    const Tensor<Scalar> x4_2 = cat2_(concat<Scalar>({x4_1, up4_(x5_up)}, 1));
    const Tensor<Scalar> x3_2 = cat3_(concat<Scalar>({x3_1, up5_(up(x4_2))}, 1));
    return head_(relu(fuse_(x3_2)));
}

// ----- CFP ---------------------------------------------------------------------------

template <typename Scalar>
CfpModule<Scalar>::CfpModule(ParameterStore<Scalar>& store, const std::string& name, Index channels, Index branches,
                             Index rate, Rng& rng)
{
    if (branches != 4 || channels % branches != 0)
        throw std::invalid_argument("CFP needs 4 branches dividing the channel count, got M=" + std::to_string(channels));
    const Index width = channels / branches;
    const auto rates = cfp_dilation_rates(rate);
    rates_.assign(rates.begin(), rates.end());
    project_in_ = Conv2d<Scalar>(store, name + ".project_in", channels, width, {1, 1}, {}, rng);
    for (std::size_t k = 0; k < rates.size(); ++k) {
        std::array<Conv2d<Scalar>, 3> convs;
        for (std::size_t j = 0; j < 3; ++j)
            convs[j] = Conv2d<Scalar>::same(store, name + ".branch" + std::to_string(k + 1) + ".conv" + std::to_string(j + 1),
                                            width, width, 3, rates[k], rng);
        branches_.push_back(convs);
    }
    project_out_ = Conv2d<Scalar>(store, name + ".project_out", channels, channels, {1, 1}, {}, rng);
}

template <typename Scalar>
Tensor<Scalar> CfpModule<Scalar>::operator()(const Tensor<Scalar>& x) const
{
    const Tensor<Scalar> u = relu(project_in_(x));
    std::vector<Tensor<Scalar>> levels;
    for (const auto& convs : branches_) {
        const Tensor<Scalar> a1 = relu(convs[0](u));
        const Tensor<Scalar> a2 = relu(convs[1](a1));
        const Tensor<Scalar> a3 = relu(convs[2](a2));
        const Tensor<Scalar> out = add(add(a1, a2), a3);
        levels.push_back(levels.empty() ? out : add(levels.back(), out));
    }
    return add(project_out_(concat(levels, 1)), x);
}

// ----- axial attention ----------------------------------------------------------------

template <typename Scalar>
AxialAttention<Scalar>::AxialAttention(ParameterStore<Scalar>& store, const std::string& name, Index c, Rng& rng)
{
    qh_ = Conv2d<Scalar>(store, name + ".height.query", c, c, {1, 1}, {}, rng);
    kh_ = Conv2d<Scalar>(store, name + ".height.key", c, c, {1, 1}, {}, rng);
    vh_ = Conv2d<Scalar>(store, name + ".height.value", c, c, {1, 1}, {}, rng);
    qw_ = Conv2d<Scalar>(store, name + ".width.query", c, c, {1, 1}, {}, rng);
    kw_ = Conv2d<Scalar>(store, name + ".width.key", c, c, {1, 1}, {}, rng);
    vw_ = Conv2d<Scalar>(store, name + ".width.value", c, c, {1, 1}, {}, rng);
}

template <typename Scalar>
Tensor<Scalar> AxialAttention<Scalar>::attend_height(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                                     const Tensor<Scalar>& v)
{
    // each column is a sequence of H tokens with C features
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    const Tensor<Scalar> qs = permute(q, {0, 3, 2, 1});  // N W H C
    const Tensor<Scalar> ks = permute(k, {0, 3, 1, 2});  // N W C H
    const Tensor<Scalar> vs = permute(v, {0, 3, 2, 1});  // N W H C
    const Tensor<Scalar> weights = sigmoid(scale(matmul(qs, ks), inv_sqrt_dk));
    return permute(matmul(weights, vs), {0, 3, 2, 1});
}

template <typename Scalar>
Tensor<Scalar> AxialAttention<Scalar>::attend_width(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                                    const Tensor<Scalar>& v)
{
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    const Tensor<Scalar> qs = permute(q, {0, 2, 3, 1});  // N H W C
    const Tensor<Scalar> ks = permute(k, {0, 2, 1, 3});  // N H C W
    const Tensor<Scalar> vs = permute(v, {0, 2, 3, 1});  // N H W C
    const Tensor<Scalar> weights = sigmoid(scale(matmul(qs, ks), inv_sqrt_dk));
    return permute(matmul(weights, vs), {0, 3, 1, 2});
}

template <typename Scalar>
Tensor<Scalar> AxialAttention<Scalar>::height_pass(const Tensor<Scalar>& x) const
{
    return attend_height(qh_(x), kh_(x), vh_(x));
}

template <typename Scalar>
Tensor<Scalar> AxialAttention<Scalar>::width_pass(const Tensor<Scalar>& x) const
{
    return attend_width(qw_(x), kw_(x), vw_(x));
}

// ----- reverse attention ------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> reverse_map(const Tensor<Scalar>& logits)
{
    return affine(sigmoid(logits), -1.0, 1.0);
}

template <typename Scalar>
Tensor<Scalar> apply_reverse_attention(const Tensor<Scalar>& attention, const Tensor<Scalar>& reverse)
{
    if (reverse.rank() != 4 || reverse.dim(1) != 1 || reverse.dim(0) != attention.dim(0) ||
        reverse.dim(2) != attention.dim(2) || reverse.dim(3) != attention.dim(3))
        throw ShapeError("reverse map " + shape_str(reverse.shape()) + " does not match features " +
                         shape_str(attention.shape()));
    return mul(attention, expand_channels(reverse, attention.dim(1)));
}

template <typename Scalar>
Tensor<Scalar> resize_logits(const Tensor<Scalar>& map, Index h, Index w)
{
    const Index H = map.dim(2), W = map.dim(3);
    if (H == h && W == w) return map;
    if (H <= h && W <= w) return bilinear_upsample(map, h, w);
    if (H % h == 0 && W % w == 0 && H / h == W / w) return avg_pool2d(map, H / h, H / h, 0);
    throw ShapeError("cannot resize " + shape_str(map.shape()) + " to " + std::to_string(h) + "x" + std::to_string(w));
}

template <typename Scalar>
AraStage<Scalar>::AraStage(ParameterStore<Scalar>& store, const std::string& name, Index channels, bool use_attention,
                           Rng& rng)
    : use_attention_(use_attention)
{
    if (use_attention_) attention_ = AxialAttention<Scalar>(store, name + ".attention", channels, rng);
    head_ = Conv2d<Scalar>(store, name + ".head", channels, 1, {1, 1}, {}, rng);
}

template <typename Scalar>
AraOutput<Scalar> AraStage<Scalar>::operator()(const Tensor<Scalar>& features, const Tensor<Scalar>& previous) const
{
    AraOutput<Scalar> out;
    const Tensor<Scalar> prev = resize_logits(previous, features.dim(2), features.dim(3));
    if (!use_attention_) {
        out.logits = add(head_(features), prev);
        return out;
    }
    out.attention = attention_(features);
    out.reverse = reverse_map(prev);
    out.ara = apply_reverse_attention(out.attention, out.reverse);
    out.logits = add(head_(out.ara), prev);
    return out;
}

// ----- CaraNet ---------------------------------------------------------------------------

template <typename Scalar>
CaraNet<Scalar>::CaraNet(const CaraNetConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    Rng rng(cfg_.seed);
    encoder_ = Encoder<Scalar>(store_, cfg_, rng);
    decoder_ = PartialDecoder<Scalar>(store_, "decoder",
                                      {cfg_.level_channels(3), cfg_.level_channels(4), cfg_.level_channels(5)},
                                      cfg_.decoder_channels, rng);
    for (int level = 3; level <= 5; ++level) {
        const auto i = static_cast<std::size_t>(level - 3);
        const Index c = cfg_.level_channels(level);
        const std::string suffix = std::to_string(level);
        if (cfg_.use_cfp)
            cfp_[i] = CfpModule<Scalar>(store_, "cfp" + suffix, c, cfg_.cfp_channels, cfg_.cfp_rate, rng);
        else
            projection_[i] = Conv2d<Scalar>(store_, "projection" + suffix, c, c, {1, 1}, {}, rng);
    }
    for (int level = 5; level >= 3; --level) {
        const auto i = static_cast<std::size_t>(level - 3);
        stages_[i] = AraStage<Scalar>(store_, "stage" + std::to_string(level), cfg_.level_channels(level), cfg_.use_ara,
                                      rng);
    }
}

template <typename Scalar>
Tensor<Scalar> CaraNet<Scalar>::decode_global(const EncoderFeatures<Scalar>& f) const
{
    return decoder_(f.level(3), f.level(4), f.level(5));
}

template <typename Scalar>
Tensor<Scalar> CaraNet<Scalar>::context(int level, const Tensor<Scalar>& f) const
{
    const auto i = static_cast<std::size_t>(level - 3);
    return cfg_.use_cfp ? cfp_.at(i)(f) : projection_.at(i)(f);
}

template <typename Scalar>
const AraStage<Scalar>& CaraNet<Scalar>::stage(int level) const
{
    return stages_.at(static_cast<std::size_t>(level - 3));
}

template <typename Scalar>
const CfpModule<Scalar>& CaraNet<Scalar>::cfp(int level) const
{
    if (!cfg_.use_cfp) throw std::logic_error("model was built without CFP modules");
    return cfp_.at(static_cast<std::size_t>(level - 3));
}

template <typename Scalar>
PredictionSet<Scalar> CaraNet<Scalar>::operator()(const Tensor<Scalar>& image) const
{
    const EncoderFeatures<Scalar> f = encoder_(image);
    PredictionSet<Scalar> p;
    p.global = decode_global(f);
    p.s5 = stage(5)(context(5, f.level(5)), p.global).logits;
    p.s4 = stage(4)(context(4, f.level(4)), p.s5).logits;
    p.s3 = stage(3)(context(3, f.level(3)), p.s4).logits;
    p.final = bilinear_upsample(p.s3, image.dim(2), image.dim(3));
    return p;
}

// ----- receptive field probe -------------------------------------------------------------------

template <typename Scalar>
Footprint receptive_field_probe(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& block, Index channels,
                                Index height, Index width, std::uint64_t seed)
{
    Rng rng(seed);
    typename Tensor<Scalar>::Array field(channels * height * width);
    for (Index i = 0; i < field.size(); ++i) field[i] = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
    const Tensor<Scalar> input(Shape{1, channels, height, width}, field, true);
    const Tensor<Scalar> out = block(input);
    if (out.rank() != 4 || out.dim(2) != height || out.dim(3) != width)
        throw ShapeError("receptive_field_probe: block must preserve spatial extent");
    typename Tensor<Scalar>::Array selector = Tensor<Scalar>::Array::Zero(out.numel());
    const Index cy = height / 2, cx = width / 2;
    for (Index c = 0; c < out.dim(1); ++c) selector[(c * height + cy) * width + cx] = Scalar(1);
    sum(mul(out, Tensor<Scalar>(out.shape(), selector))).backward();

    const auto grad = input.grad();
    Index y0 = height, y1 = -1, x0 = width, x1 = -1;
    for (Index c = 0; c < channels; ++c)
        for (Index y = 0; y < height; ++y)
            for (Index x = 0; x < width; ++x)
                if (std::abs(static_cast<double>(grad[(c * height + y) * width + x])) > 1e-9) {
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                }
    Footprint fp;
    if (y1 < 0) return fp;
    fp.height = y1 - y0 + 1;
    fp.width = x1 - x0 + 1;
    fp.truncated = y0 == 0 || x0 == 0 || y1 == height - 1 || x1 == width - 1;
    return fp;
}

#define CARANET_INSTANTIATE_MODEL(S)                                                                          \
    template class Res2NetBlock<S>;                                                                           \
    template class Encoder<S>;                                                                                \
    template class PartialDecoder<S>;                                                                         \
    template class CfpModule<S>;                                                                              \
    template class AxialAttention<S>;                                                                         \
    template class AraStage<S>;                                                                               \
    template class CaraNet<S>;                                                                                \
    template Tensor<S> reverse_map<S>(const Tensor<S>&);                                                      \
    template Tensor<S> apply_reverse_attention<S>(const Tensor<S>&, const Tensor<S>&);                        \
    template Tensor<S> resize_logits<S>(const Tensor<S>&, Index, Index);                                      \
    template Footprint receptive_field_probe<S>(const std::function<Tensor<S>(const Tensor<S>&)>&, Index, Index, \
                                                Index, std::uint64_t);

CARANET_INSTANTIATE_MODEL(float)
CARANET_INSTANTIATE_MODEL(double)

}  // namespace caranet
