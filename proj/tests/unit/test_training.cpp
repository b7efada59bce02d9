#include "caranet/grad_check.hpp"
#include "caranet/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace caranet;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0, bool rg = true)
{
    Rng rng(seed);
    Tensor<double>::Array v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(std::move(shape), std::move(v), rg);
}

Tensor<double> random_mask(Shape shape, std::uint64_t seed, double p = 0.3)
{
    Rng rng(seed);
    Tensor<double>::Array v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
    return Tensor<double>(std::move(shape), std::move(v));
}

Tensor<double> square_mask(Index n, Index y0, Index x0, Index side)
{
    Tensor<double>::Array v = Tensor<double>::Array::Zero(n * n);
    for (Index y = y0; y < y0 + side; ++y)
        for (Index x = x0; x < x0 + side; ++x) v[y * n + x] = 1.0;
    return Tensor<double>({1, 1, n, n}, v);
}

Tensor<double> ones_like(const Tensor<double>& t) { return Tensor<double>::full(t.shape(), 1.0); }

std::vector<Sample> synthetic_batch(Index n, std::uint64_t seed)
{
    SyntheticSpec spec;
    spec.seed = seed;
    std::vector<Sample> out;
    for (Index i = 0; i < n; ++i) out.push_back(synthesize_sample(spec, i).sample);
    return out;
}

std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("caranet_test_training_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(WeightMap, ConstantMasks)
{
    const auto zero = weight_map(Tensor<double>::zeros({1, 1, 40, 40})).values();
    EXPECT_TRUE((zero == 1.0).all());

    const auto one = weight_map(Tensor<double>::full({1, 1, 40, 40}, 1.0)).values();
    // the 31x31 window only fits without padding at the centre of a 40x40 map
    for (Index y = 15; y < 25; ++y)
        for (Index x = 15; x < 25; ++x) EXPECT_DOUBLE_EQ(one[y * 40 + x], 1.0);
    // corner: 16 x 16 of the 961 taps land inside
    EXPECT_NEAR(one[0], 1.0 + 5.0 * (1.0 - 256.0 / 961.0), 1e-12);
    EXPECT_GT(one[3 * 40 + 20], 1.0);
}

TEST(WeightMap, IsolatedPixel)
{
    const auto w = weight_map(square_mask(64, 30, 30, 1)).values();
    EXPECT_NEAR(w[30 * 64 + 30], 1.0 + 5.0 * (1.0 - 1.0 / 961.0), 1e-12);
    EXPECT_NEAR(w[30 * 64 + 31], 1.0 + 5.0 / 961.0, 1e-12);
    EXPECT_DOUBLE_EQ(w[0], 1.0);
    EXPECT_GE(w.minCoeff(), 1.0);
    EXPECT_LE(w.maxCoeff(), 6.0);
}

TEST(WeightMap, RejectsNonBinary)
{
    EXPECT_THROW(weight_map(Tensor<double>::full({1, 1, 4, 4}, 0.5)), std::invalid_argument);
}

TEST(WeightedBce, ClosedForms)
{
    const auto g = random_mask({2, 1, 6, 6}, 1);
    const auto w = random_tensor({2, 1, 6, 6}, 2, 1.0, 6.0, false);
    EXPECT_NEAR(weighted_bce(Tensor<double>::zeros(g.shape()), g, w).item(), std::log(2.0), 1e-12);

    const auto ones = Tensor<double>::full({1, 1, 5, 5}, 1.0);
    EXPECT_LT(weighted_bce(Tensor<double>::full({1, 1, 5, 5}, 40.0), ones, ones).item(), 1e-15);
    // extreme logits stay finite
    EXPECT_NEAR(weighted_bce(Tensor<double>::full({1, 1, 5, 5}, -800.0), ones, ones).item(), 800.0, 1e-9);
}

TEST(WeightedBce, MatchesDirectFormula)
{
    const auto l = random_tensor({1, 1, 4, 4}, 3, -3.0, 3.0, false);
    const auto g = random_mask({1, 1, 4, 4}, 4, 0.5);
    const auto w = random_tensor({1, 1, 4, 4}, 5, 1.0, 6.0, false);
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < 16; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-l.values()[i]));
        const double gi = g.values()[i];
        num += -w.values()[i] * (gi * std::log(p) + (1.0 - gi) * std::log(1.0 - p));
        den += w.values()[i];
    }
    EXPECT_NEAR(weighted_bce(l, g, w).item(), num / den, 1e-12);
}

TEST(WeightedIou, ClosedForms)
{
    const auto g = square_mask(8, 2, 2, 3);
    const auto w = ones_like(g);
    // +/-40 logits: p equals G to double precision
    EXPECT_NEAR(weighted_iou(affine(g, 80.0, -40.0), g, w).item(), 0.0, 1e-15);
    EXPECT_NEAR(weighted_iou(affine(g, -80.0, 40.0), g, w).item(), 1.0, 1e-15);

    // 2x2, p = 0.5, half foreground: 1 - (2 * 0.5) / (4 * 0.5 + 2 - 2 * 0.5) = 2/3
    const auto half = Tensor<double>::from({1, 1, 2, 2}, {1.0, 0.0, 1.0, 0.0});
    EXPECT_NEAR(weighted_iou(Tensor<double>::zeros({1, 1, 2, 2}), half, ones_like(half)).item(), 2.0 / 3.0, 1e-15);
}

TEST(Losses, InvariantUnderWeightScaling)
{
    const auto l = random_tensor({2, 1, 7, 7}, 6, -4.0, 4.0, false);
    const auto g = random_mask({2, 1, 7, 7}, 7);
    const auto w = random_tensor({2, 1, 7, 7}, 8, 1.0, 6.0, false);
    for (double k : {2.0, 0.125, 1000.0}) {
        const auto wk = scale(w, k);
        EXPECT_NEAR(weighted_bce(l, g, w).item(), weighted_bce(l, g, wk).item(), 1e-9);
        EXPECT_NEAR(weighted_iou(l, g, w).item(), weighted_iou(l, g, wk).item(), 1e-9);
    }
}

TEST(Losses, RangeOnRandomInputs)
{
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto l = random_tensor({1, 1, 9, 9}, 100 + s, -20.0, 20.0, false);
        const auto g = random_mask({1, 1, 9, 9}, 200 + s, 0.1 + 0.04 * static_cast<double>(s));
        const auto w = weight_map(g);
        const double iou = weighted_iou(l, g, w).item();
        EXPECT_GE(iou, 0.0);
        EXPECT_LE(iou, 1.0);
        EXPECT_GE(weighted_bce(l, g, w).item(), 0.0);
    }
}

TEST(Losses, RejectShapeMismatch)
{
    const auto a = Tensor<double>::zeros({1, 1, 4, 4});
    const auto b = Tensor<double>::zeros({1, 1, 4, 5});
    EXPECT_THROW(weighted_bce(a, b, a), ShapeError);
    EXPECT_THROW(weighted_iou(a, a, b), ShapeError);
}

TEST(Losses, GradientCheck)
{
    const auto g = random_mask({2, 1, 5, 5}, 9, 0.4);
    const auto w = weight_map(g);
    const auto l = random_tensor({2, 1, 5, 5}, 10, -2.0, 2.0);
    GradCheckOptions opt;
    EXPECT_LT(grad_check([&] { return weighted_bce(l, g, w); }, {l}, opt).max_rel_error, 1e-3);
    EXPECT_LT(grad_check([&] { return weighted_iou(l, g, w); }, {l}, opt).max_rel_error, 1e-3);
}

TEST(TotalLoss, ConfidentCorrectIsNearZero)
{
    const auto g = Tensor<double>::full({1, 1, 32, 32}, 1.0);
    PredictionSet<double> p;
    p.global = Tensor<double>::full({1, 1, 8, 8}, 40.0);
    p.s5 = Tensor<double>::full({1, 1, 2, 2}, 40.0);
    p.s4 = Tensor<double>::full({1, 1, 4, 4}, 40.0);
    p.s3 = Tensor<double>::full({1, 1, 8, 8}, 40.0);
    p.final = Tensor<double>::full({1, 1, 32, 32}, 40.0);
    const double total = total_loss(p, g).total.item();
    EXPECT_GE(total, 0.0);
    EXPECT_LT(total, 1e-3);
}

TEST(TotalLoss, SumOfFourTerms)
{
    const auto g = square_mask(32, 10, 12, 6);
    PredictionSet<double> p;
    p.global = random_tensor({1, 1, 8, 8}, 1, -3, 3, false);
    p.s5 = random_tensor({1, 1, 2, 2}, 2, -3, 3, false);
    p.s4 = random_tensor({1, 1, 4, 4}, 3, -3, 3, false);
    p.s3 = random_tensor({1, 1, 8, 8}, 4, -3, 3, false);
    const auto terms = total_loss(p, g);
    double sum = 0.0;
    for (const auto& t : terms.terms) sum += t.item();
    EXPECT_NEAR(terms.total.item(), sum, 1e-12);

    const auto w = weight_map(g);
    const auto up = bilinear_upsample(p.s4, 32, 32);
    EXPECT_NEAR(terms.terms[2].item(), weighted_iou(up, g, w).item() + weighted_bce(up, g, w).item(), 1e-12);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    ParameterStore<float> store;
    auto p = store.zeros("p", {3});
    p.mutable_values() << 1.0f, -2.0f, 0.5f;
    p.mutable_grad().setConstant(1.0f);
    AdamState state;
    TrainConfig cfg;
    adam_step(store, state, cfg);
    EXPECT_EQ(state.t, 1);
    EXPECT_NEAR(p.values()[0], 1.0f - 1e-4f, 1e-7);
    EXPECT_NEAR(p.values()[1], -2.0f - 1e-4f, 1e-7);
    EXPECT_NEAR(static_cast<double>(p.values()[2]) - 0.5, -1e-4 / (1.0 + 1e-8), 3e-8);  // half a float ulp at 0.5
    EXPECT_TRUE((state.v[0] >= 0.0f).all());
}

TEST(Adam, ZeroGradientLeavesParameters)
{
    ParameterStore<float> store;
    auto p = store.zeros("p", {4});
    p.mutable_values().setConstant(0.25f);
    p.mutable_grad().setZero();
    auto q = store.zeros("q", {2});  // never receives a gradient
    AdamState state;
    adam_step(store, state, TrainConfig{});
    EXPECT_TRUE((p.values() == 0.25f).all());
    EXPECT_TRUE((q.values() == 0.0f).all());
    EXPECT_EQ(state.m.size(), 2u);
}

TEST(Adam, NonFiniteGradientNamesParameter)
{
    ParameterStore<float> store;
    auto a = store.zeros("layer.a", {2});
    auto b = store.zeros("layer.b", {2});
    a.mutable_grad().setConstant(1.0f);
    b.mutable_grad() << 0.0f, std::nanf("");
    AdamState state;
    try {
        adam_step(store, state, TrainConfig{});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
    }
    EXPECT_TRUE((a.values() == 0.0f).all());  // nothing was applied
    EXPECT_EQ(state.t, 0);
}

TEST(Adam, FiveStepsAreDeterministic)
{
    const auto batch = synthetic_batch(2, 3);
    std::vector<Tensor<float>::Array> finals;
    for (int run = 0; run < 2; ++run) {
        CaraNet<float> net(CaraNetConfig{});
        AdamState state;
        TrainConfig cfg;
        cfg.scales = {1.0};
        const auto [x, g] = stack_batch({&batch[0], &batch[1]});
        for (int s = 0; s < 5; ++s) multiscale_step(x, g, cfg.scales, net, state, cfg);
        EXPECT_EQ(state.t, 5);
        Tensor<float>::Array all(net.parameters().parameter_count());
        Index k = 0;
        for (const auto& p : net.parameters().parameters()) {
            all.segment(k, p.value.numel()) = p.value.values();
            k += p.value.numel();
        }
        finals.push_back(all);
    }
    EXPECT_TRUE((finals[0] == finals[1]).all());
}

TEST(MultiScale, ExtentRounding)
{
    EXPECT_EQ(scaled_extent(352, 0.75), 256);
    EXPECT_EQ(scaled_extent(352, 1.0), 352);
    EXPECT_EQ(scaled_extent(352, 1.25), 448);
    EXPECT_EQ(scaled_extent(64, 0.75), 64);  // 48 is a tie, rounded up
    EXPECT_EQ(scaled_extent(64, 1.25), 96);  // 80 is a tie, rounded up
    EXPECT_EQ(scaled_extent(64, 1.0), 64);
}

TEST(MultiScale, OneStepPerScale)
{
    const auto batch = synthetic_batch(1, 4);
    CaraNet<float> net(CaraNetConfig{});
    AdamState state;
    TrainConfig cfg;
    const auto [x, g] = stack_batch({&batch[0]});
    const auto losses = multiscale_step(x, g, cfg.scales, net, state, cfg);
    EXPECT_EQ(losses.size(), 3u);
    EXPECT_EQ(state.t, 3);
    for (double l : losses) EXPECT_TRUE(std::isfinite(l) && l > 0.0);

    // a single unit scale is a plain step on the unresized batch
    CaraNet<float> a(CaraNetConfig{}), b(CaraNetConfig{});
    AdamState sa, sb;
    TrainConfig one = cfg;
    one.scales = {1.0};
    multiscale_step(x, g, one.scales, a, sa, one);
    a.parameters().zero_grad();
    const double plain = total_loss(b(x), g).total.item();
    EXPECT_DOUBLE_EQ(multiscale_step(x, g, one.scales, b, sb, one)[0], plain);
}

TEST(MultiScale, LossHalvesOnFixedBatch)
{
    const auto batch = synthetic_batch(8, 11);
    std::vector<const Sample*> ptrs;
    for (const auto& s : batch) ptrs.push_back(&s);
    const auto [x, g] = stack_batch(ptrs);
    CaraNet<float> net(CaraNetConfig{});
    AdamState state;
    TrainConfig cfg;
    cfg.scales = {1.0};
    cfg.learning_rate = 2e-3;
    const double first = multiscale_step(x, g, cfg.scales, net, state, cfg)[0];
    double last = first;
    for (int s = 1; s < 200; ++s) last = multiscale_step(x, g, cfg.scales, net, state, cfg)[0];
    NoGradGuard guard;
    const double after = total_loss(net(x), g).total.item();
    EXPECT_LE(after, 0.5 * first) << "first " << first << " last step " << last;
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    const auto batch = synthetic_batch(1, 5);
    CaraNet<float> net(CaraNetConfig{});
    AdamState state;
    TrainConfig cfg;
    cfg.scales = {1.0};
    const auto [x, g] = stack_batch({&batch[0]});
    multiscale_step(x, g, cfg.scales, net, state, cfg);
    multiscale_step(x, g, cfg.scales, net, state, cfg);

    const auto path = scratch_dir("roundtrip") / "model.ckpt";
    save_checkpoint(net, state, path);
    const std::string bytes = read_file(path);
    EXPECT_EQ(bytes.substr(0, 4), "CARA");
    LoadedModel loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.state.t, 2);
    ASSERT_EQ(loaded.state.m.size(), state.m.size());
    for (std::size_t i = 0; i < state.m.size(); ++i) {
        EXPECT_TRUE((loaded.state.m[i] == state.m[i]).all());
        EXPECT_TRUE((loaded.state.v[i] == state.v[i]).all());
    }
    EXPECT_EQ(encode_checkpoint(loaded.model, loaded.state), bytes);

    NoGradGuard guard;
    EXPECT_TRUE((loaded.model(x).final.values() == net(x).final.values()).all());
}

TEST(Checkpoint, CorruptionIsRejected)
{
    CaraNet<float> net(CaraNetConfig{});
    const std::string bytes = encode_checkpoint(net, AdamState{});
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
    bad = bytes;
    bad[4] = 9;  // version
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, NameMismatchIsExplicit)
{
    CaraNet<float> full(CaraNetConfig{});
    CaraNetConfig cfg;
    cfg.use_cfp = false;
    CaraNet<float> reduced(cfg);
    const Checkpoint ckpt = decode_checkpoint(encode_checkpoint(full, AdamState{}));
    AdamState state;
    try {
        restore_checkpoint(ckpt, reduced, state);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("cfp"), std::string::npos) << e.what();
    }
    const Checkpoint small = decode_checkpoint(encode_checkpoint(reduced, AdamState{}));
    EXPECT_THROW(restore_checkpoint(small, full, state), FormatError);
}

TEST(TrainLog, Format)
{
    const std::vector<TrainRecord> records{{1, 1, 0.75, 2.5}, {1, 2, 1.0, 0.125}};
    EXPECT_EQ(format_train_log(records), "epoch,step,scale,loss\n1,1,0.75,2.5\n1,2,1,0.125\n");
}

TEST(TrainConfigTest, Validation)
{
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.learning_rate = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.scales.clear();
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
