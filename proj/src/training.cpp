#include "caranet/training.hpp"

#include "caranet/config.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <unordered_map>

namespace caranet {

void TrainConfig::validate() const
{
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw std::invalid_argument("adam betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be > 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (scales.empty()) throw std::invalid_argument("scales must be nonempty");
    for (const double s : scales)
        if (!(s > 0.0)) throw std::invalid_argument("scales must be positive");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

// ----- losses ------------------------------------------------------------------

namespace {

template <typename Scalar>
void require_binary(const Tensor<Scalar>& g, const char* who)
{
    for (Index i = 0; i < g.numel(); ++i) {
        const Scalar v = g.values()[i];
        if (v != Scalar(0) && v != Scalar(1)) throw std::invalid_argument(std::string(who) + ": mask is not binary");
    }
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* who)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// N x C x H x W -> N
template <typename Scalar>
Tensor<Scalar> per_image_sum(const Tensor<Scalar>& x)
{
    return sum(sum(sum(x, 3), 2), 1);
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> weight_map(const Tensor<Scalar>& mask)
{
    if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("weight_map: expected N x 1 x H x W mask");
    require_binary(mask, "weight_map");
    NoGradGuard no_grad;
    const Tensor<Scalar> pooled = avg_pool2d(mask.detach(), 31, 1, 15);
    typename Tensor<Scalar>::Array w = 1.0 + 5.0 * (pooled.values() - mask.values()).abs();
    return Tensor<Scalar>(mask.shape(), std::move(w));
}

template <typename Scalar>
Tensor<Scalar> weighted_bce(const Tensor<Scalar>& logits, const Tensor<Scalar>& mask, const Tensor<Scalar>& weight)
{
    require_same_shape(logits, mask, "weighted_bce");
    require_same_shape(logits, weight, "weighted_bce");
    if (logits.rank() != 4) throw ShapeError("weighted_bce: expected rank-4 maps");
    const Tensor<Scalar> g = mask.detach(), w = weight.detach();
    const Tensor<Scalar> pixel = sub(softplus(logits), mul(g, logits));
    return mean(div(per_image_sum(mul(w, pixel)), per_image_sum(w)));
}

template <typename Scalar>
Tensor<Scalar> weighted_iou(const Tensor<Scalar>& logits, const Tensor<Scalar>& mask, const Tensor<Scalar>& weight)
{
    require_same_shape(logits, mask, "weighted_iou");
    require_same_shape(logits, weight, "weighted_iou");
    if (logits.rank() != 4) throw ShapeError("weighted_iou: expected rank-4 maps");
    const Tensor<Scalar> g = mask.detach(), w = weight.detach();
    const Tensor<Scalar> p = sigmoid(logits);
    const Tensor<Scalar> inter = per_image_sum(mul(w, mul(p, g)));
    const Tensor<Scalar> union_ = sub(per_image_sum(mul(w, add(p, g))), inter);
    return affine(mean(div(inter, union_)), -1.0, 1.0);
}

template <typename Scalar>
LossTerms<Scalar> total_loss(const PredictionSet<Scalar>& preds, const Tensor<Scalar>& mask)
{
    if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("total_loss: expected N x 1 x H x W mask");
    const Index h = mask.dim(2), w = mask.dim(3);
    const Tensor<Scalar> weight = weight_map(mask);
    LossTerms<Scalar> out;
    const std::array<const Tensor<Scalar>*, 4> maps{&preds.global, &preds.s5, &preds.s4, &preds.s3};
    for (std::size_t k = 0; k < maps.size(); ++k) {
        const Tensor<Scalar> up = bilinear_upsample(*maps[k], h, w);
        out.terms[k] = add(weighted_iou(up, mask, weight), weighted_bce(up, mask, weight));
        out.total = k == 0 ? out.terms[k] : add(out.total, out.terms[k]);
    }
    return out;
}

// ----- optimizer -----------------------------------------------------------------

void adam_step(ParameterStore<float>& params, AdamState& state, const TrainConfig& cfg)
{
    const auto& list = params.parameters();
    if (state.m.empty() && state.t == 0) {
        for (const auto& p : list) {
            state.m.push_back(Tensor<float>::Array::Zero(p.value.numel()));
            state.v.push_back(Tensor<float>::Array::Zero(p.value.numel()));
        }
    }
    if (state.m.size() != list.size() || state.v.size() != list.size())
        throw std::logic_error("adam_step: optimizer state does not match the parameter list");
    for (std::size_t k = 0; k < list.size(); ++k) {
        if (state.m[k].size() != list[k].value.numel() || state.v[k].size() != list[k].value.numel())
            throw std::logic_error("adam_step: moment shape mismatch for " + list[k].name);
        if (list[k].value.has_grad() && !list[k].value.grad().allFinite())
            throw NumericError("non-finite gradient in parameter " + list[k].name);
    }

    ++state.t;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < list.size(); ++k) {
        Tensor<float> value = list[k].value;
        const Tensor<float>::Array g = value.has_grad() ? value.grad() : Tensor<float>::Array::Zero(value.numel());
        auto& theta = value.mutable_values();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (Index i = 0; i < theta.size(); ++i) {
            const double gi = g[i];
            m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
            v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
            const double mhat = m[i] / c1, vhat = v[i] / c2;
            theta[i] = static_cast<float>(theta[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

Index scaled_extent(Index base, double scale)
{
    const double units = static_cast<double>(base) * scale / 32.0;
    const auto n = static_cast<Index>(std::floor(units + 0.5));
    if (n < 1)
        throw ShapeError("scaled extent of " + std::to_string(base) + " at scale " + format_double(scale) +
                         " rounds to zero");
    return 32 * n;
}

std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<const Sample*>& batch)
{
    if (batch.empty()) throw std::invalid_argument("stack_batch: empty batch");
    const Index h = batch.front()->image.dim(1), w = batch.front()->image.dim(2);
    const auto n = static_cast<Index>(batch.size());
    Tensor<float>::Array images(n * 3 * h * w), masks(n * h * w);
    for (Index k = 0; k < n; ++k) {
        const Sample& s = *batch[static_cast<std::size_t>(k)];
        if (s.image.shape() != Shape{3, h, w} || s.mask.shape() != Shape{1, h, w})
            throw ShapeError("stack_batch: sample " + s.id + " has extent " + shape_str(s.image.shape()) +
                             ", expected 3x" + std::to_string(h) + "x" + std::to_string(w));
        images.segment(k * 3 * h * w, 3 * h * w) = s.image.values();
        masks.segment(k * h * w, h * w) = s.mask.values();
    }
    return {Tensor<float>(Shape{n, 3, h, w}, std::move(images)), Tensor<float>(Shape{n, 1, h, w}, std::move(masks))};
}

std::vector<double> multiscale_step(const Tensor<float>& images, const Tensor<float>& masks,
                                    const std::vector<double>& scales, CaraNet<float>& model, AdamState& state,
                                    const TrainConfig& cfg)
{
    std::vector<double> losses;
    for (const double s : scales) {
        const Index h = scaled_extent(images.dim(2), s), w = scaled_extent(images.dim(3), s);
        if (h % 16 != 0 || w % 16 != 0) throw ShapeError("multiscale_step: invalid rescaled extent");
        const Tensor<float> x = resize_bilinear(images, h, w);
        const Tensor<float> g = binarize_map(resize_bilinear(masks, h, w), 0.5);
        model.parameters().zero_grad();
        const Tensor<float> loss = total_loss(model(x), g).total;
        loss.backward();
        adam_step(model.parameters(), state, cfg);
        losses.push_back(loss.item());
    }
    model.parameters().zero_grad();
    return losses;
}

std::string format_train_log(const std::vector<TrainRecord>& records)
{
    std::string out = "epoch,step,scale,loss\n";
    char buf[96];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%d,%lld,%s,%.9g\n", r.epoch, static_cast<long long>(r.step),
                      format_double(r.scale).c_str(), r.loss);
        out += buf;
    }
    return out;
}

std::vector<TrainRecord> fit(CaraNet<float>& model, AdamState& state, const std::vector<Sample>& train,
                             const TrainConfig& cfg, const std::function<void(int)>& on_epoch_end)
{
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("fit: no training samples");
    std::vector<TrainRecord> records;
    std::vector<std::size_t> order(train.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const Sample*> batch;
            for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++k)
                batch.push_back(&train[order[k]]);
            const auto [images, masks] = stack_batch(batch);
            const auto losses = multiscale_step(images, masks, cfg.scales, model, state, cfg);
            for (std::size_t k = 0; k < losses.size(); ++k) {
                const std::int64_t step = state.t - static_cast<std::int64_t>(losses.size() - 1 - k);
                records.push_back({epoch, step, cfg.scales[k], losses[k]});
            }
        }
        if (on_epoch_end) on_epoch_end(epoch);
    }
    return records;
}

// ----- checkpoints ---------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'R', 'A'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_entry(std::string& out, const std::string& name, const Shape& shape, const float* data, Index n)
{
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (const Index e : shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    out.append(reinterpret_cast<const char*>(data), static_cast<std::size_t>(n) * sizeof(float));
}

struct Reader {
    std::string_view bytes;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const
    {
        if (bytes.size() - pos < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }

    template <typename T>
    T get(const char* what)
    {
        need(sizeof(T), what);
        T value;
        std::memcpy(&value, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return value;
    }

    std::string_view take(std::size_t n, const char* what)
    {
        need(n, what);
        const auto out = bytes.substr(pos, n);
        pos += n;
        return out;
    }
};

}  // namespace

std::string encode_checkpoint(const CaraNet<float>& model, const AdamState& state)
{
    const auto& params = model.parameters().parameters();
    const bool has_moments = !state.m.empty();
    if (has_moments && (state.m.size() != params.size() || state.v.size() != params.size()))
        throw std::logic_error("encode_checkpoint: optimizer state does not match the model");

    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    const std::string meta = format_model_config(model.config());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(state.t));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size() * 3));
    for (const auto& p : params) put_entry(out, p.name, p.value.shape(), p.value.data(), p.value.numel());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& p = params[k];
        const Tensor<float>::Array zero = Tensor<float>::Array::Zero(p.value.numel());
        put_entry(out, p.name + ".m", p.value.shape(), has_moments ? state.m[k].data() : zero.data(), p.value.numel());
        put_entry(out, p.name + ".v", p.value.shape(), has_moments ? state.v[k].data() : zero.data(), p.value.numel());
    }
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes)
{
    Reader r{bytes};
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
    r.pos = 4;
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const auto meta_len = r.get<std::uint32_t>("metadata length");
    Checkpoint ckpt;
    try {
        ckpt.config = parse_model_config(r.take(meta_len, "metadata"));
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    ckpt.step = static_cast<std::int64_t>(r.get<std::uint64_t>("step counter"));
    const auto count = r.get<std::uint32_t>("entry count");
    for (std::uint32_t k = 0; k < count; ++k) {
        CheckpointEntry e;
        const auto name_len = r.get<std::uint32_t>("entry name length");
        e.name = std::string(r.take(name_len, "entry name"));
        const auto rank = r.get<std::uint32_t>("entry rank");
        if (rank > 8) throw FormatError("checkpoint: entry '" + e.name + "' has implausible rank");
        Shape shape;
        Index n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto extent = r.get<std::uint64_t>("entry extents");
            if (extent == 0 || extent > (1ULL << 31)) throw FormatError("checkpoint: entry '" + e.name + "' bad extent");
            shape.push_back(static_cast<Index>(extent));
            n *= static_cast<Index>(extent);
            if (n > (Index{1} << 40)) throw FormatError("checkpoint: entry '" + e.name + "' too large");
        }
        const auto payload = r.take(static_cast<std::size_t>(n) * sizeof(float), "entry payload");
        Tensor<float>::Array values(n);
        std::memcpy(values.data(), payload.data(), payload.size());
        e.value = Tensor<float>(std::move(shape), std::move(values));
        ckpt.entries.push_back(std::move(e));
    }
    if (r.pos != bytes.size()) throw FormatError("checkpoint: trailing bytes");
    return ckpt;
}

void save_checkpoint(const CaraNet<float>& model, const AdamState& state, const std::filesystem::path& path)
{
    write_file(path, encode_checkpoint(model, state));
}

Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    try {
        return decode_checkpoint(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void restore_checkpoint(const Checkpoint& ckpt, CaraNet<float>& model, AdamState& state)
{
    std::unordered_map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : ckpt.entries)
        if (!by_name.emplace(e.name, &e).second) throw FormatError("checkpoint: duplicate entry '" + e.name + "'");

    const auto& params = model.parameters().parameters();
    std::unordered_map<std::string, bool> expected;
    for (const auto& p : params)
        for (const char* suffix : {"", ".m", ".v"}) expected.emplace(p.name + suffix, true);
    for (const auto& e : ckpt.entries)
        if (!expected.count(e.name)) throw FormatError("checkpoint: unknown parameter name '" + e.name + "'");

    auto lookup = [&](const Parameter<float>& p, const std::string& name) -> const Tensor<float>::Array& {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint: missing parameter '" + name + "'");
        if (it->second->value.shape() != p.value.shape())
            throw FormatError("checkpoint: parameter '" + name + "' has shape " + shape_str(it->second->value.shape()) +
                              ", model expects " + shape_str(p.value.shape()));
        return it->second->value.values();
    };
    // validate everything before touching the model
    for (const auto& p : params)
        for (const char* suffix : {"", ".m", ".v"}) lookup(p, p.name + suffix);

    AdamState restored;
    restored.t = ckpt.step;
    for (const auto& p : params) {
        Tensor<float> value = p.value;
        value.mutable_values() = lookup(p, p.name);
        restored.m.push_back(lookup(p, p.name + ".m"));
        restored.v.push_back(lookup(p, p.name + ".v"));
    }
    state = std::move(restored);
}

LoadedModel load_checkpoint(const std::filesystem::path& path)
{
    const Checkpoint ckpt = read_checkpoint(path);
    LoadedModel out{CaraNet<float>(ckpt.config), {}};
    restore_checkpoint(ckpt, out.model, out.state);
    return out;
}

#define CARANET_INSTANTIATE_LOSSES(S)                                                                            \
    template Tensor<S> weight_map<S>(const Tensor<S>&);                                                          \
    template Tensor<S> weighted_bce<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                    \
    template Tensor<S> weighted_iou<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                    \
    template LossTerms<S> total_loss<S>(const PredictionSet<S>&, const Tensor<S>&);

CARANET_INSTANTIATE_LOSSES(float)
CARANET_INSTANTIATE_LOSSES(double)

}  // namespace caranet
