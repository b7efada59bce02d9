#include "caranet/data_io.hpp"
#include "caranet/metrics.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace caranet;

namespace {

Map2d from_grid(const oracle::Grid& g)
{
    Map2d m(static_cast<Index>(g.size()), static_cast<Index>(g[0].size()));
    for (Index y = 0; y < m.rows(); ++y)
        for (Index x = 0; x < m.cols(); ++x) m(y, x) = g[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
    return m;
}

oracle::Grid bits3(unsigned code)
{
    oracle::Grid g(3, std::vector<double>(3, 0.0));
    for (unsigned i = 0; i < 9; ++i) g[i / 3][i % 3] = (code >> i) & 1u ? 1.0 : 0.0;
    return g;
}

oracle::Grid random_grid(oracle::Lcg& rng, int h, int w, bool binary, double p = 0.5)
{
    oracle::Grid g(static_cast<std::size_t>(h), std::vector<double>(static_cast<std::size_t>(w)));
    for (auto& row : g)
        for (auto& v : row) v = binary ? (rng.next() < p ? 1.0 : 0.0) : rng.next();
    return g;
}

Map2d constant(Index h, Index w, double v) { return Map2d::Constant(h, w, v); }

}  // namespace

TEST(Binarize, InclusiveThreshold)
{
    Map2d m(1, 4);
    m << 0.49, 0.5, 0.51, 0.6;
    const Map2d b = binarize(m, 0.5);
    EXPECT_EQ(b(0, 0), 0.0);
    EXPECT_EQ(b(0, 1), 1.0);
    EXPECT_EQ(b(0, 2), 1.0);
    EXPECT_TRUE((binarize(constant(3, 3, 0.6)) == 1.0).all());
    EXPECT_THROW(binarize(m, 0.0), std::invalid_argument);
    EXPECT_THROW(binarize(m, 1.0), std::invalid_argument);
}

TEST(Overlap, Examples)
{
    Map2d p = constant(3, 3, 0.0), g = constant(3, 3, 0.0);
    EXPECT_EQ(dice(p, g), 1.0);
    EXPECT_EQ(iou(p, g), 1.0);
    p << 1, 1, 1, 1, 0, 0, 0, 0, 0;
    g << 0, 0, 1, 1, 1, 1, 0, 0, 0;
    EXPECT_DOUBLE_EQ(dice(p, g), 0.5);
    EXPECT_DOUBLE_EQ(iou(p, g), 1.0 / 3.0);
    EXPECT_EQ(dice(p, p), 1.0);
    EXPECT_EQ(dice(p, 1.0 - p), 0.0);
    EXPECT_THROW(dice(p, constant(3, 4, 0.0)), std::invalid_argument);
}

TEST(Mae, Examples)
{
    Map2d g(2, 2);
    g << 1, 0, 0, 1;
    EXPECT_EQ(mae(g, g), 0.0);
    EXPECT_EQ(mae(1.0 - g, g), 1.0);
    EXPECT_EQ(mae(constant(2, 2, 0.25), constant(2, 2, 0.0)), 0.25);
    const Map2d pred = Map2d::Random(5, 5).abs();
    const Map2d gg = binarize(Map2d::Random(5, 5).abs().min(0.99).max(0.01), 0.5);
    EXPECT_NEAR(mae(pred, gg), mae(1.0 - pred, 1.0 - gg), 1e-15);
}

TEST(Oracle, AllThreeByThreePairs)
{
    for (unsigned a = 0; a < 512; ++a) {
        const oracle::Grid pg = bits3(a);
        const Map2d p = from_grid(pg);
        for (unsigned b = 0; b < 512; ++b) {
            const oracle::Grid gg = bits3(b);
            const Map2d g = from_grid(gg);
            ASSERT_EQ(dice(p, g), oracle::dice(pg, gg)) << a << " " << b;
            ASSERT_EQ(iou(p, g), oracle::iou(pg, gg)) << a << " " << b;
            ASSERT_EQ(mae(p, g), oracle::mae(pg, gg)) << a << " " << b;
            if (a % 7 != 0 || b % 11 != 0) continue;  // the structured measures are slow; sample
            ASSERT_NEAR(f_beta_w(p, g), oracle::weighted_f(pg, gg), 1e-9) << a << " " << b;
            ASSERT_NEAR(s_alpha(p, g), oracle::structure_measure(pg, gg), 1e-9) << a << " " << b;
            ASSERT_NEAR(e_phi_max(p, g), oracle::enhanced_alignment_max(pg, gg), 1e-9) << a << " " << b;
        }
    }
}

TEST(Oracle, RandomEightByEight)
{
    oracle::Lcg rng(2024);
    for (int k = 0; k < 25; ++k) {
        const oracle::Grid gg = random_grid(rng, 8, 8, true, 0.15 + 0.03 * k);
        const oracle::Grid pg = random_grid(rng, 8, 8, false);
        const Map2d p = from_grid(pg), g = from_grid(gg);
        EXPECT_NEAR(f_beta_w(p, g), oracle::weighted_f(pg, gg), 1e-9) << k;
        EXPECT_NEAR(s_alpha(p, g), oracle::structure_measure(pg, gg), 1e-9) << k;
        EXPECT_NEAR(e_phi_max(p, g), oracle::enhanced_alignment_max(pg, gg), 1e-9) << k;
        EXPECT_NEAR(mae(p, g), oracle::mae(pg, gg), 1e-15) << k;
    }
}

TEST(Oracle, RandomOddShapes)
{
    oracle::Lcg rng(77);
    for (auto [h, w] : {std::pair{5, 11}, std::pair{13, 4}, std::pair{1, 9}, std::pair{16, 16}}) {
        const oracle::Grid gg = random_grid(rng, h, w, true, 0.3);
        const oracle::Grid pg = random_grid(rng, h, w, false);
        const Map2d p = from_grid(pg), g = from_grid(gg);
        EXPECT_NEAR(f_beta_w(p, g), oracle::weighted_f(pg, gg), 1e-9);
        EXPECT_NEAR(s_alpha(p, g), oracle::structure_measure(pg, gg), 1e-9);
        EXPECT_NEAR(e_phi_max(p, g), oracle::enhanced_alignment_max(pg, gg), 1e-9);
    }
}

TEST(DistanceTransform, MatchesBruteForce)
{
    oracle::Lcg rng(5);
    for (int k = 0; k < 40; ++k) {
        const int h = 1 + static_cast<int>(rng.next() * 20), w = 1 + static_cast<int>(rng.next() * 20);
        const oracle::Grid gg = random_grid(rng, h, w, true, 0.02 + 0.2 * rng.next());
        oracle::Grid d2;
        std::vector<std::vector<long>> idx;
        oracle::nearest_foreground(gg, d2, idx);
        const DistanceField df = distance_transform(from_grid(gg));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double expect = d2[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
                if (std::isinf(expect)) {
                    EXPECT_TRUE(std::isinf(df.dist2(y, x)));
                    EXPECT_EQ(df.nearest(y, x), -1);
                } else {
                    EXPECT_EQ(df.dist2(y, x), expect);
                    EXPECT_EQ(df.nearest(y, x), idx[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]);
                }
            }
    }
}

TEST(FBetaW, Conventions)
{
    Map2d g = constant(5, 5, 0.0);
    g.block(1, 1, 3, 2) = 1.0;
    EXPECT_NEAR(f_beta_w(g, g), 1.0, 1e-12);
    EXPECT_EQ(f_beta_w(constant(5, 5, 0.0), constant(5, 5, 0.0)), 1.0);
    EXPECT_EQ(f_beta_w(constant(5, 5, 0.3), constant(5, 5, 0.0)), 0.0);
    // Inverted prediction. The 7x7 smoothing pads with zeros, so on a map this
    // small the smoothed error drops below 1 at the border and a little true
    // positive mass survives; the reference formula gives the same.
    EXPECT_NEAR(f_beta_w(1.0 - g, g), 0.13894, 1e-5);
    oracle::Grid gg(5, std::vector<double>(5, 0.0)), inv(5, std::vector<double>(5, 1.0));
    for (int y = 1; y < 4; ++y)
        for (int x = 1; x < 3; ++x) gg[y][x] = 1.0, inv[y][x] = 0.0;
    EXPECT_NEAR(f_beta_w(1.0 - g, g), oracle::weighted_f(inv, gg), 1e-12);
    // away from the border the inverted prediction scores zero
    Map2d big = constant(32, 32, 0.0);
    big.block(12, 10, 6, 9) = 1.0;
    EXPECT_LT(f_beta_w(1.0 - big, big), 1e-6);
}

TEST(SAlpha, Conventions)
{
    Map2d g = constant(6, 6, 0.0);
    g.block(2, 1, 3, 3) = 1.0;
    EXPECT_NEAR(s_alpha(g, g), 1.0, 1e-12);
    EXPECT_EQ(s_alpha(constant(4, 4, 0.0), constant(4, 4, 0.0)), 1.0);
    EXPECT_DOUBLE_EQ(s_alpha(constant(4, 4, 0.2), constant(4, 4, 0.0)), 0.8);
    EXPECT_DOUBLE_EQ(s_alpha(constant(4, 4, 0.7), constant(4, 4, 1.0)), 0.7);
    const double v = s_alpha(Map2d::Random(6, 6).abs(), g);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
}

TEST(EPhi, Conventions)
{
    Map2d g = constant(4, 4, 0.0);
    g.block(0, 0, 2, 3) = 1.0;
    EXPECT_EQ(e_phi(g, g), 1.0);
    EXPECT_EQ(e_phi_max(g, g), 1.0);
    // inverted prediction: every threshold above zero scores the total miss
    const Map2d inv = 1.0 - g;
    EXPECT_NEAR(e_phi(binarize(inv, 0.5), g), 0.0, 1e-12);
    for (int k = 1; k < 256; k += 37) EXPECT_NEAR(e_phi(binarize(inv, k / 255.0), g), 0.0, 1e-12);
    const Map2d pred = Map2d::Random(4, 4).abs();
    EXPECT_GE(e_phi_max(pred, g), e_phi(binarize(pred, 0.5), g));
}

TEST(Invariants, DiceJaccardIdentityAndPermutation)
{
    oracle::Lcg rng(9);
    for (int k = 0; k < 50; ++k) {
        const Map2d p = from_grid(random_grid(rng, 7, 9, true, 0.4));
        const Map2d g = from_grid(random_grid(rng, 7, 9, true, 0.4));
        const double d = dice(p, g), j = iou(p, g);
        EXPECT_LE(j, d);
        EXPECT_NEAR(d, 2.0 * j / (1.0 + j), 1e-12);
        // reversing the pixel order is a spatial permutation
        const Map2d pr = p.reverse(), gr = g.reverse();
        EXPECT_EQ(dice(pr, gr), d);
        EXPECT_EQ(iou(pr, gr), j);
        EXPECT_EQ(mae(pr, gr), mae(p, g));
    }
}

TEST(Report, PerfectPredictionsAndCsv)
{
    MetricReport report;
    Map2d g = constant(8, 8, 0.0);
    g.block(2, 3, 3, 2) = 1.0;
    report.records.push_back(evaluate_sample("a", g, g));
    report.records.back().size_ratio = 6.0 / 64.0;
    const MetricRecord m = report.mean();
    EXPECT_EQ(m.id, "MEAN");
    EXPECT_DOUBLE_EQ(m.dice, 1.0);
    EXPECT_DOUBLE_EQ(m.iou, 1.0);
    EXPECT_NEAR(m.fbw, 1.0, 1e-12);
    EXPECT_NEAR(m.salpha, 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(m.ephi, 1.0);
    EXPECT_DOUBLE_EQ(m.mae, 0.0);

    Map2d pred = g * 0.8;
    pred(0, 0) = 0.3;
    report.records.push_back(evaluate_sample("b", pred, g));
    const std::string csv = format_report(report);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,size_ratio,dice,iou,fbw,salpha,ephi,mae");
    EXPECT_NE(csv.find("\nMEAN,"), std::string::npos);
    const MetricReport back = parse_report(csv);
    ASSERT_EQ(back.records.size(), 2u);
    EXPECT_EQ(back.records[1].id, "b");
    EXPECT_EQ(back.records[1].fbw, report.records[1].fbw);
    EXPECT_EQ(back.records[1].salpha, report.records[1].salpha);
    EXPECT_EQ(format_report(back), csv);
}

TEST(Report, PredictionFolder)
{
    const auto root = std::filesystem::temp_directory_path() / "caranet_test_metrics";
    std::filesystem::remove_all(root);
    SyntheticSpec spec;
    spec.n_samples = 5;
    spec.height = spec.width = 32;
    const GenerateResult gen = generate_synthetic(spec, root / "data");
    const auto test = gen.manifest.select(Split::test);
    ASSERT_FALSE(test.empty());
    std::filesystem::create_directories(root / "pred");
    for (const auto& e : test) write_image(read_mask(gen.manifest.resolve(e.mask_path)), root / "pred" / (e.id + ".pgm"));
    const MetricReport report = evaluate_predictions(root / "pred", gen.manifest, Split::test);
    ASSERT_EQ(report.records.size(), test.size());
    EXPECT_DOUBLE_EQ(report.mean().dice, 1.0);
    EXPECT_DOUBLE_EQ(report.mean().mae, 0.0);
    EXPECT_EQ(report.records[0].size_ratio, test[0].size_ratio);

    std::filesystem::remove(root / "pred" / (test[0].id + ".pgm"));
    try {
        evaluate_predictions(root / "pred", gen.manifest, Split::test);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(test[0].id), std::string::npos);
    }
}
