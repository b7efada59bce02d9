#pragma once

#include "caranet/nn.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace caranet {

/// Architecture hyper-parameters. Channel widths per encoder level are
/// {c, 2c, 4c, 8c, 8c} for base width c.
struct CaraNetConfig {
    Index input_h = 64;
    Index input_w = 64;
    Index base_channels = 4;
    Index decoder_channels = 8;
    Index cfp_channels = 4;  // K parallel pyramid channels
    Index cfp_rate = 8;      // d; per-channel rates derived by cfp_dilation_rates
    Index res2net_scale = 4;
    bool use_cfp = true;
    bool use_ara = true;
    std::uint64_t seed = 1;

    /// Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
    Index level_channels(int level) const;  // level in 1..5
};

/// {max(1, d/8), max(1, d/4), max(1, d/2), max(1, d)}
std::array<Index, 4> cfp_dilation_rates(Index d);

/// f_i has spatial extent (h / 2^(i-1), w / 2^(i-1)).
std::array<Index, 2> level_extent(Index h, Index w, int level);

template <typename Scalar>
struct EncoderFeatures {
    std::array<Tensor<Scalar>, 5> f;  // f[0] is f1

    const Tensor<Scalar>& level(int i) const { return f[static_cast<std::size_t>(i - 1)]; }
};

/// Logit maps; S_i share the spatial extent of f_i, final matches the input.
template <typename Scalar>
struct PredictionSet {
    Tensor<Scalar> global;  // S_g at f3 resolution
    Tensor<Scalar> s5;
    Tensor<Scalar> s4;
    Tensor<Scalar> s3;
    Tensor<Scalar> final;
};

/// Res2Net-style bottleneck: 1x1 expand, split into `scale` groups processed by
/// chained 3x3 convolutions, merge, 1x1 project, residual add.
template <typename Scalar>
class Res2NetBlock {
public:
    Res2NetBlock() = default;
    Res2NetBlock(ParameterStore<Scalar>& store, const std::string& name, Index in_channels, Index out_channels,
                 Index scale, Rng& rng);
    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;

private:
    Index scale_ = 4;
    Index width_ = 1;
    Conv2d<Scalar> expand_;
    std::vector<Conv2d<Scalar>> group_convs_;
    Conv2d<Scalar> merge_;
    Conv2d<Scalar> shortcut_;
    bool project_shortcut_ = false;
};

template <typename Scalar>
class Encoder {
public:
    Encoder() = default;
    Encoder(ParameterStore<Scalar>& store, const CaraNetConfig& cfg, Rng& rng);
    EncoderFeatures<Scalar> operator()(const Tensor<Scalar>& image) const;

private:
    Conv2d<Scalar> stem_;
    std::array<Res2NetBlock<Scalar>, 5> levels_;
};

/// Parallel partial decoder over {f3, f4, f5}; emits the one-channel global map.
template <typename Scalar>
class PartialDecoder {
public:
    PartialDecoder() = default;
    PartialDecoder(ParameterStore<Scalar>& store, const std::string& name, std::array<Index, 3> in_channels,
                   Index channels, Rng& rng);
    Tensor<Scalar> operator()(const Tensor<Scalar>& f3, const Tensor<Scalar>& f4, const Tensor<Scalar>& f5) const;

private:
    Conv2d<Scalar> reduce3_, reduce4_, reduce5_;
    Conv2d<Scalar> up1_, up2_, up3_, up4_, up5_;
    Conv2d<Scalar> cat2_, cat3_, fuse_, head_;
};

/// Channel-wise feature pyramid: K dilated sub-pyramids fused hierarchically
/// (level_k = level_{k-1} + out_k), concatenated, projected and added to the input.
template <typename Scalar>
class CfpModule {
public:
    CfpModule() = default;
    CfpModule(ParameterStore<Scalar>& store, const std::string& name, Index channels, Index branches, Index rate,
              Rng& rng);
    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;

    const std::vector<Index>& rates() const { return rates_; }

private:
    Conv2d<Scalar> project_in_;
    std::vector<std::array<Conv2d<Scalar>, 3>> branches_;
    Conv2d<Scalar> project_out_;
    std::vector<Index> rates_;
};

/// Height-then-width factorized attention with sigmoid weights:
/// out = sigmoid(Q K^T / sqrt(C)) V along each axis.
template <typename Scalar>
class AxialAttention {
public:
    AxialAttention() = default;
    AxialAttention(ParameterStore<Scalar>& store, const std::string& name, Index channels, Rng& rng);
    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return width_pass(height_pass(x)); }

    Tensor<Scalar> height_pass(const Tensor<Scalar>& x) const;
    Tensor<Scalar> width_pass(const Tensor<Scalar>& x) const;

    /// Attention along the H axis given precomputed Q, K, V (all N x C x H x W).
    static Tensor<Scalar> attend_height(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v);
    static Tensor<Scalar> attend_width(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v);

private:
    Conv2d<Scalar> qh_, kh_, vh_, qw_, kw_, vw_;
};

/// R = 1 - sigmoid(S)
template <typename Scalar>
Tensor<Scalar> reverse_map(const Tensor<Scalar>& logits);

/// ARA = AA (.) R with R broadcast over AA's channels.
template <typename Scalar>
Tensor<Scalar> apply_reverse_attention(const Tensor<Scalar>& attention, const Tensor<Scalar>& reverse);

/// Resizes a one-channel map to (h, w): bilinear enlargement, or average
/// pooling by an integer factor when shrinking.
template <typename Scalar>
Tensor<Scalar> resize_logits(const Tensor<Scalar>& map, Index h, Index w);

template <typename Scalar>
struct AraOutput {
    Tensor<Scalar> attention;  // AA
    Tensor<Scalar> reverse;    // R
    Tensor<Scalar> ara;        // AA (.) R
    Tensor<Scalar> logits;     // S_i
};

/// One refinement stage. With attention disabled the stage reduces to a conv
/// head on the features plus the resized previous map.
template <typename Scalar>
class AraStage {
public:
    AraStage() = default;
    AraStage(ParameterStore<Scalar>& store, const std::string& name, Index channels, bool use_attention, Rng& rng);
    AraOutput<Scalar> operator()(const Tensor<Scalar>& features, const Tensor<Scalar>& previous) const;

    const AxialAttention<Scalar>& attention() const { return attention_; }
    const Conv2d<Scalar>& head() const { return head_; }

private:
    bool use_attention_ = true;
    AxialAttention<Scalar> attention_;
    Conv2d<Scalar> head_;
};

template <typename Scalar>
class CaraNet {
public:
    explicit CaraNet(const CaraNetConfig& cfg);
    CaraNet(const CaraNet&) = delete;
    CaraNet& operator=(const CaraNet&) = delete;
    CaraNet(CaraNet&&) = default;
    CaraNet& operator=(CaraNet&&) = default;

    /// Image N x 3 x H x W with H, W divisible by 16 (any such size, not only
    /// the configured one: multi-scale training feeds rescaled inputs).
    PredictionSet<Scalar> operator()(const Tensor<Scalar>& image) const;

    EncoderFeatures<Scalar> encode(const Tensor<Scalar>& image) const { return encoder_(image); }
    Tensor<Scalar> decode_global(const EncoderFeatures<Scalar>& f) const;
    /// CFP block of level 3..5 (or the 1x1 projection in the no-CFP variant).
    Tensor<Scalar> context(int level, const Tensor<Scalar>& f) const;
    const AraStage<Scalar>& stage(int level) const;
    const CfpModule<Scalar>& cfp(int level) const;

    const CaraNetConfig& config() const { return cfg_; }
    ParameterStore<Scalar>& parameters() { return store_; }
    const ParameterStore<Scalar>& parameters() const { return store_; }

private:
    CaraNetConfig cfg_;
    ParameterStore<Scalar> store_;
    Encoder<Scalar> encoder_;
    PartialDecoder<Scalar> decoder_;
    std::array<CfpModule<Scalar>, 3> cfp_;         // levels 3, 4, 5
    std::array<Conv2d<Scalar>, 3> projection_;     // replaces CFP when disabled
    std::array<AraStage<Scalar>, 3> stages_;       // levels 3, 4, 5
};

struct Footprint {
    Index height = 0;
    Index width = 0;
    bool truncated = false;  // touches the probe field border
};

/// Impulse-response footprint: bounding box of input positions whose gradient
/// w.r.t. the centre output unit (summed over channels) exceeds 1e-9.
/// The probe input is a seeded uniform field in [-1, 1].
template <typename Scalar>
Footprint receptive_field_probe(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& block, Index channels,
                                Index height, Index width, std::uint64_t seed = 7);

}  // namespace caranet
