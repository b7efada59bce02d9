#include "caranet/data_io.hpp"

#include "caranet/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace caranet {

namespace fs = std::filesystem;

// ----- netpbm ----------------------------------------------------------------

namespace {

constexpr Index kMaxExtent = 1 << 15;

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

struct HeaderReader {
    std::string_view bytes;
    std::size_t pos = 0;

    void skip_space_and_comments()
    {
        while (pos < bytes.size()) {
            if (is_space(bytes[pos])) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    }

    Index number(const char* what)
    {
        skip_space_and_comments();
        const std::size_t start = pos;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') ++pos;
        if (pos == start) throw FormatError(std::string("netpbm: expected ") + what);
        if (pos - start > 9) throw FormatError(std::string("netpbm: ") + what + " out of range");
        Index value = 0;
        std::from_chars(bytes.data() + start, bytes.data() + pos, value);
        return value;
    }
};

}  // namespace

Tensor<float> decode_netpbm(std::string_view bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("netpbm: bad magic (expected P5 or P6)");
    const Index channels = bytes[1] == '5' ? 1 : 3;
    HeaderReader reader{bytes, 2};
    if (reader.pos >= bytes.size() || !(is_space(bytes[reader.pos]) || bytes[reader.pos] == '#'))
        throw FormatError("netpbm: bad magic (expected P5 or P6)");
    const Index width = reader.number("width");
    const Index height = reader.number("height");
    const Index maxval = reader.number("maxval");
    if (width < 1 || height < 1 || width > kMaxExtent || height > kMaxExtent)
        throw FormatError("netpbm: unsupported extent " + std::to_string(width) + "x" + std::to_string(height));
    if (maxval != 255) throw FormatError("netpbm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
    if (reader.pos >= bytes.size() || !is_space(bytes[reader.pos]))
        throw FormatError("netpbm: missing separator after header");
    const std::size_t payload_start = reader.pos + 1;
    const auto expected = static_cast<std::size_t>(channels * width * height);
    if (bytes.size() - payload_start < expected) throw FormatError("netpbm: truncated payload");
    if (bytes.size() - payload_start > expected) throw FormatError("netpbm: trailing bytes after payload");

    Tensor<float>::Array values(channels * height * width);
    const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data() + payload_start);
    const Index plane = height * width;
    // interleaved on disk, planar in memory
    for (Index p = 0; p < plane; ++p)
        for (Index c = 0; c < channels; ++c) values[c * plane + p] = static_cast<float>(payload[p * channels + c]) / 255.0f;
    return Tensor<float>(Shape{channels, height, width}, std::move(values));
}

std::string encode_netpbm(const Tensor<float>& image)
{
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
        throw ShapeError("encode_netpbm: expected 1xHxW or 3xHxW, got " + shape_str(image.shape()));
    const Index channels = image.dim(0), height = image.dim(1), width = image.dim(2);
    std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + static_cast<std::size_t>(channels * height * width));
    const Index plane = height * width;
    const auto& v = image.values();
    for (Index p = 0; p < plane; ++p) {
        for (Index c = 0; c < channels; ++c) {
            const double x = std::clamp(static_cast<double>(v[c * plane + p]), 0.0, 1.0);
            out[header + static_cast<std::size_t>(p * channels + c)] =
                static_cast<char>(static_cast<unsigned char>(std::floor(255.0 * x + 0.5)));
        }
    }
    return out;
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const fs::path& path, std::string_view bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::uint64_t content_hash(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

Tensor<float> read_image(const fs::path& path)
{
    try {
        return decode_netpbm(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

Tensor<float> read_mask(const fs::path& path)
{
    const Tensor<float> raw = read_image(path);
    if (raw.dim(0) != 1) throw FormatError(path.string() + ": mask must be a grayscale PGM");
    // byte >= 128  <=>  byte / 255 >= 128 / 255
    return binarize_map(raw, 128.0 / 255.0);
}

void write_image(const Tensor<float>& image, const fs::path& path) { write_file(path, encode_netpbm(image)); }

// ----- manifests -------------------------------------------------------------

std::string_view split_name(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view name)
{
    if (name == "train") return Split::train;
    if (name == "test") return Split::test;
    throw FormatError("unknown split tag '" + std::string(name) + "'");
}

std::vector<ManifestEntry> DatasetManifest::select(Split split) const
{
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e);
    return out;
}

fs::path DatasetManifest::resolve(const std::string& relative) const
{
    const fs::path p(relative);
    return p.is_absolute() ? p : root / p;
}

namespace {

std::string format_real(double x)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace

std::string format_manifest(const DatasetManifest& manifest)
{
    std::string out;
    for (const auto& e : manifest.entries) {
        out += e.id + '\t' + e.image_path + '\t' + e.mask_path + '\t' + std::string(split_name(e.split)) + '\t' +
               format_real(e.size_ratio) + '\n';
    }
    return out;
}

DatasetManifest parse_manifest(std::string_view text, const fs::path& root)
{
    DatasetManifest manifest;
    manifest.root = root;
    std::set<std::string> ids;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const std::size_t eol = text.find('\n');
        std::string_view line = text.substr(0, eol);
        text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;

        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        const std::string where = "manifest line " + std::to_string(line_no) + ": ";
        if (fields.size() != 5) throw FormatError(where + "expected 5 tab-separated fields");
        ManifestEntry e;
        e.id = fields[0];
        e.image_path = fields[1];
        e.mask_path = fields[2];
        try {
            e.split = parse_split(fields[3]);
        } catch (const FormatError& err) {
            throw FormatError(where + err.what());
        }
        const char* first = fields[4].c_str();
        char* last = nullptr;
        e.size_ratio = std::strtod(first, &last);
        if (last == first || *last != '\0' || !(e.size_ratio >= 0.0 && e.size_ratio <= 1.0))
            throw FormatError(where + "bad size_ratio '" + fields[4] + "'");
        if (e.id.empty()) throw FormatError(where + "empty id");
        if (!ids.insert(e.id).second) throw FormatError(where + "duplicate id '" + e.id + "'");
        manifest.entries.push_back(std::move(e));
    }
    return manifest;
}

DatasetManifest read_manifest(const fs::path& path)
{
    return parse_manifest(read_file(path), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) { write_file(path, format_manifest(manifest)); }

DatasetManifest split_manifest(std::vector<ManifestEntry> entries, double train_fraction, std::uint64_t seed)
{
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train_fraction must be in (0, 1)");
    const std::size_t n = entries.size();
    if (n < 2) throw std::invalid_argument("split_manifest: need at least 2 samples");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
    for (std::size_t k = 0; k < n; ++k) entries[order[k]].split = k < n_train ? Split::train : Split::test;
    DatasetManifest manifest;
    manifest.entries = std::move(entries);
    return manifest;
}

// ----- samples -----------------------------------------------------------------

std::vector<Sample> load_samples(const DatasetManifest& manifest, Split split)
{
    std::vector<Sample> out;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        Sample s;
        s.id = e.id;
        s.image = read_image(manifest.resolve(e.image_path));
        s.mask = read_mask(manifest.resolve(e.mask_path));
        if (s.image.dim(0) != 3) throw FormatError(e.id + ": image must be a color PPM");
        if (s.image.dim(1) != s.mask.dim(1) || s.image.dim(2) != s.mask.dim(2))
            throw FormatError(e.id + ": image " + shape_str(s.image.shape()) + " and mask " + shape_str(s.mask.shape()) +
                              " extents differ");
        s.size_ratio = e.size_ratio;
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

struct Taps {
    std::vector<Index> lo, hi;
    std::vector<double> frac;
};

Taps bilinear_taps(Index in, Index out)
{
    Taps t;
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index i = 0; i < out; ++i) {
        const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * ratio - 0.5);
        const Index i0 = std::min(static_cast<Index>(src), in - 1);
        t.lo.push_back(i0);
        t.hi.push_back(std::min(i0 + 1, in - 1));
        t.frac.push_back(src - static_cast<double>(i0));
    }
    return t;
}

}  // namespace

Tensor<float> resize_bilinear(const Tensor<float>& x, Index out_h, Index out_w)
{
    if (x.rank() != 3 && x.rank() != 4) throw ShapeError("resize_bilinear: expected rank 3 or 4");
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: target extent must be positive");
    const Index in_h = x.dim(-2), in_w = x.dim(-1);
    const Index planes = x.numel() / (in_h * in_w);
    Shape shape = x.shape();
    shape[shape.size() - 2] = out_h;
    shape[shape.size() - 1] = out_w;
    if (in_h == out_h && in_w == out_w) return Tensor<float>(shape, x.values());

    const Taps ty = bilinear_taps(in_h, out_h), tx = bilinear_taps(in_w, out_w);
    Tensor<float>::Array out(planes * out_h * out_w);
    const auto& v = x.values();
    for (Index p = 0; p < planes; ++p) {
        const float* src = v.data() + p * in_h * in_w;
        float* dst = out.data() + p * out_h * out_w;
        for (Index i = 0; i < out_h; ++i) {
            const double fy = ty.frac[static_cast<std::size_t>(i)];
            const float* r0 = src + ty.lo[static_cast<std::size_t>(i)] * in_w;
            const float* r1 = src + ty.hi[static_cast<std::size_t>(i)] * in_w;
            for (Index j = 0; j < out_w; ++j) {
                const auto sj = static_cast<std::size_t>(j);
                const double fx = tx.frac[sj];
                const Index a = tx.lo[sj], b = tx.hi[sj];
                const double top = (1.0 - fx) * r0[a] + fx * r0[b];
                const double bottom = (1.0 - fx) * r1[a] + fx * r1[b];
                dst[i * out_w + j] = static_cast<float>((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    return Tensor<float>(std::move(shape), std::move(out));
}

Tensor<float> binarize_map(const Tensor<float>& x, double threshold)
{
    Tensor<float>::Array out(x.numel());
    const auto& v = x.values();
    for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]) >= threshold ? 1.0f : 0.0f;
    return Tensor<float>(x.shape(), std::move(out));
}

Sample resize_sample(const Sample& sample, Index out_h, Index out_w)
{
    if (out_h < 16 || out_w < 16 || out_h % 16 != 0 || out_w % 16 != 0)
        throw ShapeError("resize_sample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " not divisible by 16");
    Sample out;
    out.id = sample.id;
    out.image = resize_bilinear(sample.image, out_h, out_w);
    out.mask = binarize_map(resize_bilinear(sample.mask, out_h, out_w), 0.5);
    out.size_ratio = out.mask.values().template cast<double>().mean();
    return out;
}

// ----- synthetic generator -----------------------------------------------------

void SyntheticSpec::validate() const
{
    if (n_samples < 2) throw std::invalid_argument("n_samples must be >= 2");
    if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0)
        throw std::invalid_argument("extent must be a positive multiple of 16");
    if (!(ratio_lo > 0.0) || !(ratio_hi <= 1.0) || ratio_lo > ratio_hi)
        throw std::invalid_argument("ratio range must satisfy 0 < lo <= hi <= 1");
    if (ratio_lo * static_cast<double>(height * width) < 1.0)
        throw std::invalid_argument("ratio lo below one pixel at this extent");
    if (blobs_min < 1 || blobs_max < blobs_min) throw std::invalid_argument("blob count range must satisfy 1 <= min <= max");
    if (contrast < 0.0 || texture < 0.0 || noise < 0.0) throw std::invalid_argument("contrast, texture and noise must be >= 0");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train_fraction must be in (0, 1)");
}

namespace {

struct Blob {
    double cy, cx;
    double size;  // relative radius
    double cos_t, sin_t, aspect;
    std::array<double, 3> amp, phase;  // harmonics 2..4
};

// Union of blobs scaled by a common radius factor; pixel centres are tested.
struct BlobField {
    std::vector<Blob> blobs;
    Index height, width;

    bool inside(const Blob& b, double scale, double y, double x) const
    {
        const double dy = y - b.cy, dx = x - b.cx;
        const double u = dx * b.cos_t + dy * b.sin_t;
        const double v = (-dx * b.sin_t + dy * b.cos_t) / b.aspect;
        const double r = std::sqrt(u * u + v * v);
        if (r == 0.0) return scale > 0.0;
        const double theta = std::atan2(v, u);
        double contour = 1.0;
        for (int k = 0; k < 3; ++k) contour += b.amp[k] * std::cos((k + 2) * theta + b.phase[k]);
        return r <= scale * b.size * contour;
    }

    std::vector<unsigned char> rasterize(double scale) const
    {
        std::vector<unsigned char> mask(static_cast<std::size_t>(height * width), 0);
        for (Index i = 0; i < height; ++i)
            for (Index j = 0; j < width; ++j)
                for (const auto& b : blobs)
                    if (inside(b, scale, static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5)) {
                        mask[static_cast<std::size_t>(i * width + j)] = 1;
                        break;
                    }
        return mask;
    }

    Index area(double scale) const
    {
        const auto m = rasterize(scale);
        return static_cast<Index>(std::count(m.begin(), m.end(), 1));
    }
};

std::string sample_id(Index index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "syn%05lld", static_cast<long long>(index));
    return buf;
}

}  // namespace

SyntheticSample synthesize_sample(const SyntheticSpec& spec, Index index)
{
    spec.validate();
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
    const Index H = spec.height, W = spec.width;
    const double pixels = static_cast<double>(H * W);
    const double target = rng.uniform(spec.ratio_lo, spec.ratio_hi);

    BlobField field{{}, H, W};
    const auto n_blobs = rng.uniform_int(spec.blobs_min, spec.blobs_max);
    for (std::int64_t k = 0; k < n_blobs; ++k) {
        Blob b;
        b.cy = rng.uniform(0.15, 0.85) * static_cast<double>(H);
        b.cx = rng.uniform(0.15, 0.85) * static_cast<double>(W);
        b.size = rng.uniform(0.6, 1.0);
        const double angle = rng.uniform(0.0, std::numbers::pi);
        b.cos_t = std::cos(angle);
        b.sin_t = std::sin(angle);
        b.aspect = rng.uniform(0.6, 1.0);
        for (int h = 0; h < 3; ++h) {
            b.amp[static_cast<std::size_t>(h)] = rng.uniform(0.0, 0.12);
            b.phase[static_cast<std::size_t>(h)] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        }
        field.blobs.push_back(b);
    }

    // Bisection on the common radius factor; area is monotone in it.
    const double target_px = target * pixels;
    double lo = 0.0, hi = 2.0 * static_cast<double>(std::max(H, W));
    double best_scale = -1.0;
    double best_err = 0.0;
    for (int it = 0; it < 64; ++it) {
        const double mid = 0.5 * (lo + hi);
        const Index a = field.area(mid);
        const double err = std::abs(static_cast<double>(a) - target_px) / target_px;
        if (a >= 1 && (best_scale < 0.0 || err < best_err)) {
            best_scale = mid;
            best_err = err;
        }
        if (err < 0.1) break;
        (static_cast<double>(a) < target_px ? lo : hi) = mid;
    }
    if (best_scale < 0.0)
        throw std::runtime_error("synthetic sample " + std::to_string(index) + ": target ratio " + format_real(target) +
                                 " unreachable at " + std::to_string(H) + "x" + std::to_string(W));
    const auto mask_bits = field.rasterize(best_scale);

    // Background: per-channel base colour, smooth plane-wave texture, noise.
    std::array<double, 3> base{}, lift{};
    for (auto& c : base) c = rng.uniform(0.3, 0.5);
    static constexpr std::array<double, 3> tint{1.0, 0.6, 0.4};
    for (std::size_t c = 0; c < 3; ++c) lift[c] = spec.contrast * tint[c];
    struct Wave {
        double ky, kx, phase;
    };
    std::array<Wave, 3> waves{};
    for (auto& w : waves) {
        const double freq = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi;
        const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w = {freq * std::sin(dir) / static_cast<double>(H), freq * std::cos(dir) / static_cast<double>(W),
             rng.uniform(0.0, 2.0 * std::numbers::pi)};
    }

    Tensor<float>::Array image(3 * H * W), mask(H * W);
    for (Index i = 0; i < H; ++i) {
        for (Index j = 0; j < W; ++j) {
            double tex = 0.0;
            for (const auto& w : waves) tex += std::cos(w.ky * static_cast<double>(i) + w.kx * static_cast<double>(j) + w.phase);
            tex *= spec.texture / 3.0;
            const bool fg = mask_bits[static_cast<std::size_t>(i * W + j)] != 0;
            mask[i * W + j] = fg ? 1.0f : 0.0f;
            for (Index c = 0; c < 3; ++c) {
                double v = base[static_cast<std::size_t>(c)] + tex + spec.noise * rng.normal();
                if (fg) v += lift[static_cast<std::size_t>(c)];
                v = std::clamp(v, 0.0, 1.0);
                image[c * H * W + i * W + j] = static_cast<float>(std::floor(255.0 * v + 0.5) / 255.0);
            }
        }
    }

    SyntheticSample out;
    out.target_ratio = target;
    out.sample.id = sample_id(index);
    out.sample.image = Tensor<float>(Shape{3, H, W}, std::move(image));
    out.sample.size_ratio = static_cast<double>(mask.template cast<double>().sum()) / pixels;
    out.sample.mask = Tensor<float>(Shape{1, H, W}, std::move(mask));
    return out;
}

GenerateResult generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir)
{
    spec.validate();
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");

    GenerateResult result;
    std::vector<ManifestEntry> entries;
    // Only rewrite files whose bytes changed, so reruns are cheap and detectable.
    auto put = [&](const fs::path& path, const std::string& bytes) {
        if (fs::exists(path) && content_hash(read_file(path)) == content_hash(bytes)) return;
        write_file(path, bytes);
        ++result.files_written;
    };
    for (Index i = 0; i < spec.n_samples; ++i) {
        const SyntheticSample s = synthesize_sample(spec, i);
        ManifestEntry e;
        e.id = s.sample.id;
        e.image_path = "images/" + e.id + ".ppm";
        e.mask_path = "masks/" + e.id + ".pgm";
        e.size_ratio = s.sample.size_ratio;
        put(out_dir / e.image_path, encode_netpbm(s.sample.image));
        put(out_dir / e.mask_path, encode_netpbm(s.sample.mask));
        entries.push_back(std::move(e));
    }
    result.manifest = split_manifest(std::move(entries), spec.train_fraction, derive_seed(spec.seed, 0xC0FFEE));
    result.manifest.root = out_dir;
    put(out_dir / "manifest.tsv", format_manifest(result.manifest));
    result.up_to_date = result.files_written == 0;
    return result;
}

}  // namespace caranet
