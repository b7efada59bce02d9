#include "caranet/data_io.hpp"
#include "caranet/size_analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace caranet;

namespace {

std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("caranet_test_data_io_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

Tensor<float> quantized_image(Index c, Index h, Index w, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor<float>::Array v(c * h * w);
    for (auto& x : v) x = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
    return Tensor<float>({c, h, w}, v);
}

std::vector<ManifestEntry> entries(int n)
{
    std::vector<ManifestEntry> out;
    for (int i = 0; i < n; ++i) {
        ManifestEntry e;
        e.id = "s" + std::to_string(i);
        e.image_path = "images/" + e.id + ".ppm";
        e.mask_path = "masks/" + e.id + ".pgm";
        e.size_ratio = 0.01 * i;
        out.push_back(e);
    }
    return out;
}

}  // namespace

TEST(Netpbm, RoundTripIsBitExact)
{
    for (Index c : {1, 3}) {
        const auto img = quantized_image(c, 7, 13, 40 + static_cast<std::uint64_t>(c));
        const std::string bytes = encode_netpbm(img);
        EXPECT_EQ(bytes.substr(0, 2), c == 1 ? "P5" : "P6");
        const auto back = decode_netpbm(bytes);
        EXPECT_EQ(back.shape(), img.shape());
        EXPECT_TRUE((back.values() == img.values()).all());
        EXPECT_EQ(encode_netpbm(back), bytes);
    }
    const auto dir = scratch_dir("roundtrip");
    const auto img = quantized_image(3, 16, 16, 3);
    write_image(img, dir / "a.ppm");
    EXPECT_TRUE((read_image(dir / "a.ppm").values() == img.values()).all());
}

TEST(Netpbm, HandWrittenP5)
{
    const std::string bytes = std::string("P5\n2 2\n255\n") + '\x00' + '\x80' + '\xff' + '\x7f';
    const auto t = decode_netpbm(bytes);
    EXPECT_EQ(t.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(t.values()[0], 0.0f);
    EXPECT_EQ(t.values()[1], 128.0f / 255.0f);
    EXPECT_EQ(t.values()[2], 1.0f);
    // comments are allowed in the header
    EXPECT_EQ(decode_netpbm("P5 # c\n2 # w\n1\n255\n\x01\x02").shape(), (Shape{1, 1, 2}));
}

TEST(Netpbm, WriteRoundsHalfUp)
{
    Tensor<float>::Array v(4);
    v << 0.5f / 255.0f, 1.5f / 255.0f, -0.2f, 1.7f;
    const std::string bytes = encode_netpbm(Tensor<float>({1, 1, 4}, v));
    const std::string payload = bytes.substr(bytes.size() - 4);
    EXPECT_EQ(static_cast<unsigned char>(payload[0]), 1);
    EXPECT_EQ(static_cast<unsigned char>(payload[1]), 2);
    EXPECT_EQ(static_cast<unsigned char>(payload[2]), 0);
    EXPECT_EQ(static_cast<unsigned char>(payload[3]), 255);
}

TEST(Netpbm, MasksBinarizeAt128)
{
    const auto dir = scratch_dir("mask");
    write_file(dir / "m.pgm", std::string("P5\n4 1\n255\n") + '\x00' + '\x7f' + '\x80' + '\xff');
    const auto m = read_mask(dir / "m.pgm");
    EXPECT_EQ(m.values()[0], 0.0f);
    EXPECT_EQ(m.values()[1], 0.0f);
    EXPECT_EQ(m.values()[2], 1.0f);
    EXPECT_EQ(m.values()[3], 1.0f);
}

TEST(Netpbm, MalformedCorpusIsRejected)
{
    const std::string px = std::string(4, '\x10');
    const std::vector<std::string> corpus{
        "",
        "P",
        "P4\n2 2\n255\n" + px,
        "P2\n2 2\n255\n0 0 0 0",
        "P7\n2 2\n255\n" + px,
        "p5\n2 2\n255\n" + px,
        "P5",
        "P5\n",
        "P5\n2",
        "P5\n2 2",
        "P5\n2 2\n",
        "P5\n2 2\n255",
        "P5\n2 2\n65535\n" + px + px,
        "P5\n2 2\n254\n" + px,
        "P5\n2 2\n0\n" + px,
        "P5\n0 2\n255\n",
        "P5\n2 0\n255\n",
        "P5\n-2 2\n255\n" + px,
        "P5\n2 2\n255\n\x10\x10\x10",
        "P5\n2 2\n255\n" + px + "x",
        "P6\n2 2\n255\n" + px,
        "P5\nA 2\n255\n" + px,
        "P5\n2 2\n2x5\n" + px,
        "P5\n99999999999999999999 2\n255\n" + px,
        "P5\n40000 40000\n255\n",
        "P52 2\n255\n" + px,
        "P5\n2 2\n255" + px,
        "P5 # unterminated comment",
    };
    for (const auto& bytes : corpus) EXPECT_THROW(decode_netpbm(bytes), FormatError) << "input: " << bytes;
}

TEST(Netpbm, RandomMutationsNeverCrash)
{
    const std::string valid = encode_netpbm(quantized_image(3, 4, 5, 9));
    Rng rng(17);
    int rejected = 0;
    for (int t = 0; t < 3000; ++t) {
        std::string s = valid;
        const int edits = 1 + static_cast<int>(rng.uniform_int(0, 3));
        for (int e = 0; e < edits; ++e) {
            const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s.size()) - 1));
            switch (rng.uniform_int(0, 2)) {
            case 0: s[pos] = static_cast<char>(rng.uniform_int(0, 255)); break;
            case 1: s.erase(pos, 1); break;
            default: s.insert(pos, 1, static_cast<char>(rng.uniform_int(0, 255)));
            }
        }
        try {
            const auto t2 = decode_netpbm(s);
            EXPECT_EQ(t2.values().size(), t2.numel());
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    EXPECT_GT(rejected, 0);
}

TEST(Manifest, FormatParseRoundTrip)
{
    DatasetManifest m;
    m.entries = entries(3);
    m.entries[1].split = Split::test;
    m.entries[2].size_ratio = 0.1234567890123;
    const std::string text = format_manifest(m);
    EXPECT_EQ(text.substr(0, text.find('\n')), "s0\timages/s0.ppm\tmasks/s0.pgm\ttrain\t0");
    const DatasetManifest back = parse_manifest(text, "/data");
    ASSERT_EQ(back.entries.size(), 3u);
    EXPECT_EQ(back.entries[1].split, Split::test);
    EXPECT_EQ(back.entries[2].size_ratio, 0.1234567890123);
    EXPECT_EQ(format_manifest(back), text);
    EXPECT_EQ(back.resolve("images/s0.ppm"), std::filesystem::path("/data/images/s0.ppm"));

    EXPECT_THROW(parse_manifest("a\tb\tc\ttrain\n", "."), FormatError);
    EXPECT_THROW(parse_manifest("a\tb\tc\tval\t0.1\n", "."), FormatError);
    EXPECT_THROW(parse_manifest("a\tb\tc\ttrain\t1.5\n", "."), FormatError);
    EXPECT_THROW(parse_manifest("a\tb\tc\ttrain\t0.1\na\tb\tc\ttest\t0.1\n", "."), FormatError);
}

TEST(Split, EightyTwenty)
{
    const DatasetManifest m = split_manifest(entries(10), 0.8, 5);
    std::set<std::string> train, test;
    for (const auto& e : m.entries) (e.split == Split::train ? train : test).insert(e.id);
    EXPECT_EQ(train.size(), 8u);
    EXPECT_EQ(test.size(), 2u);
    for (const auto& id : test) EXPECT_EQ(train.count(id), 0u);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(m.entries[i].id, "s" + std::to_string(i));  // order kept

    EXPECT_EQ(format_manifest(split_manifest(entries(10), 0.8, 5)), format_manifest(m));
    EXPECT_NE(format_manifest(split_manifest(entries(10), 0.8, 6)), format_manifest(m));
    EXPECT_EQ(split_manifest(entries(7), 0.8, 1).select(Split::train).size(), 5u);  // floor(5.6)

    EXPECT_THROW(split_manifest(entries(1), 0.8, 1), std::invalid_argument);
    EXPECT_THROW(split_manifest(entries(10), 1.0, 1), std::invalid_argument);
    EXPECT_THROW(split_manifest(entries(10), 0.0, 1), std::invalid_argument);
}

TEST(Synthetic, FixedRatioHitsPixelTarget)
{
    SyntheticSpec spec;
    spec.ratio_lo = spec.ratio_hi = 0.05;
    for (Index i = 0; i < 20; ++i) {
        const SyntheticSample s = synthesize_sample(spec, i);
        const double pixels = s.sample.mask.values().sum();
        EXPECT_NEAR(pixels, 204.8, 20.48) << i;
        EXPECT_EQ(s.sample.size_ratio, pixels / 4096.0);
        EXPECT_EQ(s.target_ratio, 0.05);
    }
}

TEST(Synthetic, SamplesAreWellFormed)
{
    SyntheticSpec spec;
    for (Index i = 0; i < 30; ++i) {
        const SyntheticSample s = synthesize_sample(spec, i);
        EXPECT_EQ(s.sample.image.shape(), (Shape{3, 64, 64}));
        EXPECT_EQ(s.sample.mask.shape(), (Shape{1, 64, 64}));
        for (float v : s.sample.mask.values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
        for (float v : s.sample.image.values()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
            EXPECT_EQ(std::round(v * 255.0f) / 255.0f, v);
        }
        EXPECT_GE(s.target_ratio, spec.ratio_lo);
        EXPECT_LE(s.target_ratio, spec.ratio_hi);
        EXPECT_LT(std::abs(s.sample.size_ratio - s.target_ratio) / s.target_ratio, 0.1);
        EXPECT_EQ(s.sample.size_ratio, size_ratio(to_map(s.sample.mask)));
    }
    const auto a = synthesize_sample(spec, 4), b = synthesize_sample(spec, 4);
    EXPECT_TRUE((a.sample.image.values() == b.sample.image.values()).all());
}

TEST(Synthetic, InvalidSpecs)
{
    SyntheticSpec spec;
    spec.ratio_lo = 0.2;
    spec.ratio_hi = 0.1;
    EXPECT_THROW(spec.validate(), std::invalid_argument);
    spec = SyntheticSpec{};
    spec.ratio_lo = 1e-5;  // below one pixel of 64 x 64
    EXPECT_THROW(spec.validate(), std::invalid_argument);
    spec = SyntheticSpec{};
    spec.height = 60;
    EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(Synthetic, GenerationIsByteIdenticalAndIncremental)
{
    const auto dir = scratch_dir("generate");
    SyntheticSpec spec;
    spec.n_samples = 12;
    const GenerateResult first = generate_synthetic(spec, dir);
    EXPECT_FALSE(first.up_to_date);
    EXPECT_EQ(first.files_written, 25u);
    ASSERT_EQ(first.manifest.entries.size(), 12u);
    const std::string manifest_bytes = read_file(dir / "manifest.tsv");

    const GenerateResult again = generate_synthetic(spec, dir);
    EXPECT_TRUE(again.up_to_date);
    EXPECT_EQ(again.files_written, 0u);
    EXPECT_EQ(read_file(dir / "manifest.tsv"), manifest_bytes);

    const DatasetManifest m = read_manifest(dir / "manifest.tsv");
    for (const auto& e : m.entries) {
        const Map2d mask = to_map(read_mask(m.resolve(e.mask_path)));
        EXPECT_EQ(size_ratio(mask), e.size_ratio) << e.id;
    }
    const auto samples = load_samples(m, Split::train);
    EXPECT_EQ(samples.size(), 9u);  // floor(0.8 * 12)

    const auto other = scratch_dir("generate2");
    generate_synthetic(spec, other);
    for (const auto& e : m.entries) {
        EXPECT_EQ(read_file(dir / e.image_path), read_file(other / e.image_path));
        EXPECT_EQ(read_file(dir / e.mask_path), read_file(other / e.mask_path));
    }

    std::filesystem::remove(dir / m.entries[0].mask_path);
    EXPECT_THROW(load_samples(m, m.entries[0].split), std::runtime_error);
}

TEST(Resize, Properties)
{
    Sample s;
    s.id = "x";
    s.image = quantized_image(3, 32, 32, 2);
    s.mask = Tensor<float>::full({1, 32, 32}, 1.0f);
    s.size_ratio = 1.0;
    const Sample same = resize_sample(s, 32, 32);
    EXPECT_TRUE((same.image.values() == s.image.values()).all());
    const Sample up = resize_sample(s, 64, 64);
    EXPECT_TRUE((up.mask.values() == 1.0f).all());
    EXPECT_EQ(up.size_ratio, 1.0);
    EXPECT_THROW(resize_sample(s, 40, 32), std::invalid_argument);

    // disk covering half the area
    Tensor<float>::Array m(64 * 64);
    const double r = std::sqrt(0.5 * 64 * 64 / 3.141592653589793);
    for (Index y = 0; y < 64; ++y)
        for (Index x = 0; x < 64; ++x) m[y * 64 + x] = std::hypot(y - 31.5, x - 31.5) <= r ? 1.0f : 0.0f;
    s.mask = Tensor<float>({1, 64, 64}, m);
    s.image = quantized_image(3, 64, 64, 3);
    s.size_ratio = size_ratio(to_map(s.mask));
    const Sample big = resize_sample(s, 128, 128);
    EXPECT_NEAR(big.size_ratio, s.size_ratio, 0.02);
    EXPECT_EQ(big.size_ratio, size_ratio(to_map(big.mask)));
    const Sample small = resize_sample(s, 32, 32);
    EXPECT_NEAR(small.size_ratio, s.size_ratio, 0.02);
}
