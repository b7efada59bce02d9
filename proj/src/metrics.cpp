#include "caranet/metrics.hpp"

#include "caranet/config.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace caranet {

namespace {

constexpr double kEps = 2.220446049250313e-16;  // double machine epsilon

void require_same_size(const Map2d& a, const Map2d& b, const char* who)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(who) + ": extent mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace

Map2d to_map(const Tensor<float>& t)
{
    const Index h = t.dim(-2), w = t.dim(-1);
    if (t.numel() != h * w) throw ShapeError("to_map: expected a single plane, got " + shape_str(t.shape()));
    Map2d m(h, w);
    for (Index i = 0; i < h * w; ++i) m.data()[i] = t.values()[i];
    return m;
}

Tensor<float> from_map(const Map2d& m)
{
    Tensor<float>::Array v(m.size());
    for (Index i = 0; i < m.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
    return Tensor<float>(Shape{1, m.rows(), m.cols()}, std::move(v));
}

Map2d binarize(const Map2d& pred, double tau)
{
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("binarize: threshold must be in (0, 1)");
    return (pred >= tau).cast<double>();
}

double dice(const Map2d& p, const Map2d& g)
{
    require_same_size(p, g, "dice");
    const double inter = (p * g).sum(), total = p.sum() + g.sum();
    return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

double iou(const Map2d& p, const Map2d& g)
{
    require_same_size(p, g, "iou");
    const double inter = (p * g).sum(), uni = p.sum() + g.sum() - inter;
    return uni == 0.0 ? 1.0 : inter / uni;
}

double mae(const Map2d& pred, const Map2d& g)
{
    require_same_size(pred, g, "mae");
    return (pred - g).abs().mean();
}

// ----- distance transform --------------------------------------------------------

namespace {

// Squared distance transform of a sampled function (lower envelope of parabolas).
void edt_1d(const double* f, double* d, Index n, std::vector<Index>& v, std::vector<double>& z)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n + 1), 0.0);
    Index k = -1;
    for (Index q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        while (true) {
            const Index p = v[static_cast<std::size_t>(k)];
            const double s = ((f[q] + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) /
                             (2.0 * static_cast<double>(q - p));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
                if (k < 0) break;
                continue;
            }
            ++k;
            v[static_cast<std::size_t>(k)] = q;
            z[static_cast<std::size_t>(k)] = s;
            z[static_cast<std::size_t>(k + 1)] = inf;
            break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
        }
    }
    if (k < 0) {
        for (Index q = 0; q < n; ++q) d[q] = inf;
        return;
    }
    Index j = 0;
    for (Index q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(j + 1)] < static_cast<double>(q)) ++j;
        const Index p = v[static_cast<std::size_t>(j)];
        d[q] = static_cast<double>((q - p) * (q - p)) + f[p];
    }
}

Index isqrt(Index n)
{
    auto r = static_cast<Index>(std::sqrt(static_cast<double>(n)));
    while (r * r > n) --r;
    while ((r + 1) * (r + 1) <= n) ++r;
    return r;
}

}  // namespace

DistanceField distance_transform(const Map2d& mask)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    const Index h = mask.rows(), w = mask.cols();
    DistanceField out{Map2d(h, w), {}};
    out.nearest.resize(h, w);

    std::vector<Index> v;
    std::vector<double> z;
    std::vector<double> f(static_cast<std::size_t>(std::max(h, w))), d(static_cast<std::size_t>(std::max(h, w)));
    Map2d cols(h, w);
    for (Index x = 0; x < w; ++x) {
        for (Index y = 0; y < h; ++y) f[static_cast<std::size_t>(y)] = mask(y, x) != 0.0 ? 0.0 : inf;
        edt_1d(f.data(), d.data(), h, v, z);
        for (Index y = 0; y < h; ++y) cols(y, x) = d[static_cast<std::size_t>(y)];
    }
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) f[static_cast<std::size_t>(x)] = cols(y, x);
        edt_1d(f.data(), d.data(), w, v, z);
        for (Index x = 0; x < w; ++x) out.dist2(y, x) = d[static_cast<std::size_t>(x)];
    }

    // Nearest site: scan rows top-down; on each row only the two columns at
    // the exact remaining squared offset can hit, so the first hit has the
    // smallest row-major index.
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const double d2 = out.dist2(y, x);
            if (d2 == inf) {
                out.nearest(y, x) = -1;
                continue;
            }
            const auto D2 = static_cast<Index>(d2);
            const Index r = isqrt(D2);
            Index found = -1;
            for (Index yy = std::max<Index>(0, y - r); yy <= std::min(h - 1, y + r) && found < 0; ++yy) {
                const Index rem = D2 - (yy - y) * (yy - y);
                const Index dx = isqrt(rem);
                if (dx * dx != rem) continue;
                for (const Index xx : {x - dx, x + dx})
                    if (xx >= 0 && xx < w && mask(yy, xx) != 0.0) {
                        found = yy * w + xx;
                        break;
                    }
            }
            if (found < 0) throw std::logic_error("distance_transform: nearest site not found");
            out.nearest(y, x) = found;
        }
    }
    return out;
}

// ----- weighted F-measure ------------------------------------------------------

double f_beta_w(const Map2d& pred, const Map2d& g, const FbwOptions& options)
{
    require_same_size(pred, g, "f_beta_w");
    const Index h = g.rows(), w = g.cols();
    if (g.sum() == 0.0) return pred.mean() < 1e-6 ? 1.0 : 0.0;

    const Map2d e = (pred - g).abs();
    const DistanceField df = distance_transform(g);

    // background pixels borrow the error of their nearest foreground pixel
    Map2d et = e;
    for (Index i = 0; i < g.size(); ++i)
        if (g.data()[i] == 0.0) et.data()[i] = e.data()[df.nearest.data()[i]];

    // normalized Gaussian window, correlation with zero padding
    const int half = options.window / 2;
    Map2d kernel(options.window, options.window);
    for (int a = -half; a <= half; ++a)
        for (int b = -half; b <= half; ++b)
            kernel(a + half, b + half) = std::exp(-(a * a + b * b) / (2.0 * options.sigma * options.sigma));
    const double kmax = kernel.maxCoeff();
    kernel = (kernel < kEps * kmax).select(0.0, kernel);
    kernel /= kernel.sum();

    Map2d ea = Map2d::Zero(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int a = -half; a <= half; ++a)
                for (int b = -half; b <= half; ++b) {
                    const Index yy = y + a, xx = x + b;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) acc += kernel(a + half, b + half) * et(yy, xx);
                }
            ea(y, x) = acc;
        }

    const double alpha = std::log(2.0) / 5.0;
    double tp_w = 0.0, fp_w = 0.0, fg_err = 0.0, fg_count = 0.0;
    for (Index i = 0; i < g.size(); ++i) {
        if (g.data()[i] != 0.0) {
            const double ew = std::min(e.data()[i], ea.data()[i]);
            fg_err += ew;
            fg_count += 1.0;
        } else {
            const double b = 2.0 - std::exp(-alpha * std::sqrt(df.dist2.data()[i]));
            fp_w += e.data()[i] * b;
        }
    }
    tp_w = fg_count - fg_err;
    const double recall = 1.0 - fg_err / fg_count;
    const double precision = tp_w / (kEps + tp_w + fp_w);
    return (1.0 + options.beta2) * recall * precision / (kEps + recall + options.beta2 * precision);
}

// ----- structure measure -------------------------------------------------------

namespace {

double object_score(const Map2d& values, const Map2d& region)
{
    double n = 0.0, s = 0.0;
    for (Index i = 0; i < region.size(); ++i)
        if (region.data()[i] != 0.0) {
            s += values.data()[i];
            n += 1.0;
        }
    if (n == 0.0) return 0.0;
    const double mean = s / n;
    double ss = 0.0;
    for (Index i = 0; i < region.size(); ++i)
        if (region.data()[i] != 0.0) ss += (values.data()[i] - mean) * (values.data()[i] - mean);
    const double sd = n > 1.0 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    return 2.0 * mean / (mean * mean + 1.0 + sd + kEps);
}

double block_ssim(const Map2d& x, const Map2d& y)
{
    const double n = static_cast<double>(x.size());
    const double mx = x.mean(), my = y.mean();
    const double sx2 = (x - mx).square().sum() / (n - 1.0 + kEps);
    const double sy2 = (y - my).square().sum() / (n - 1.0 + kEps);
    const double sxy = ((x - mx) * (y - my)).sum() / (n - 1.0 + kEps);
    const double a = 4.0 * mx * my * sxy;
    const double b = (mx * mx + my * my) * (sx2 + sy2);
    if (a != 0.0) return a / (b + kEps);
    return b == 0.0 ? 1.0 : 0.0;
}

}  // namespace

double s_alpha(const Map2d& pred, const Map2d& g)
{
    require_same_size(pred, g, "s_alpha");
    const double y = g.mean();
    if (y == 0.0) return 1.0 - pred.mean();
    if (y == 1.0) return pred.mean();

    const Map2d bg = 1.0 - g;
    const double o_fg = object_score(pred, g);
    const double o_bg = object_score(1.0 - pred, bg);
    const double s_object = y * o_fg + (1.0 - y) * o_bg;

    // centroid in 1-based coordinates, rounded half away from zero
    const Index h = g.rows(), w = g.cols();
    const double total = g.sum();
    double sx = 0.0, sy = 0.0;
    for (Index r = 0; r < h; ++r)
        for (Index c = 0; c < w; ++c) {
            sx += g(r, c) * static_cast<double>(c + 1);
            sy += g(r, c) * static_cast<double>(r + 1);
        }
    const auto cx = static_cast<Index>(std::round(sx / total));
    const auto cy = static_cast<Index>(std::round(sy / total));

    const double area = static_cast<double>(h * w);
    const std::array<Index, 4> r0{0, 0, cy, cy}, rn{cy, cy, h - cy, h - cy};
    const std::array<Index, 4> c0{0, cx, 0, cx}, cn{cx, w - cx, cx, w - cx};
    double s_region = 0.0;
    for (std::size_t q = 0; q < 4; ++q) {
        if (rn[q] == 0 || cn[q] == 0) continue;  // empty quadrant carries zero weight
        const double weight = static_cast<double>(rn[q] * cn[q]) / area;
        s_region += weight * block_ssim(pred.block(r0[q], c0[q], rn[q], cn[q]), g.block(r0[q], c0[q], rn[q], cn[q]));
    }
    return std::max(0.0, 0.5 * s_object + 0.5 * s_region);
}

// ----- enhanced alignment --------------------------------------------------------

double e_phi(const Map2d& fm, const Map2d& g)
{
    require_same_size(fm, g, "e_phi");
    const double n = static_cast<double>(g.size());
    const double g_sum = g.sum();
    if ((fm == g).all()) return 1.0;
    if (g_sum == 0.0) return (1.0 - fm).sum() / n;
    if (g_sum == n) return fm.sum() / n;
    const Map2d a = fm - fm.mean(), b = g - g.mean();
    const Map2d xi = 2.0 * (a * b) / (a * a + b * b + kEps);
    return ((xi + 1.0).square() / 4.0).sum() / n;
}

double e_phi_max(const Map2d& pred, const Map2d& g)
{
    require_same_size(pred, g, "e_phi_max");
    double best = 0.0;
    for (int k = 0; k <= 255; ++k) {
        const double tau = k / 255.0;
        best = std::max(best, e_phi((pred >= tau).cast<double>(), g));
    }
    return best;
}

// ----- reports -------------------------------------------------------------------

MetricRecord MetricReport::mean() const
{
    MetricRecord m;
    m.id = "MEAN";
    if (records.empty()) return m;
    for (const auto& r : records) {
        m.size_ratio += r.size_ratio;
        m.dice += r.dice;
        m.iou += r.iou;
        m.fbw += r.fbw;
        m.salpha += r.salpha;
        m.ephi += r.ephi;
        m.mae += r.mae;
    }
    const auto n = static_cast<double>(records.size());
    m.size_ratio /= n;
    m.dice /= n;
    m.iou /= n;
    m.fbw /= n;
    m.salpha /= n;
    m.ephi /= n;
    m.mae /= n;
    return m;
}

MetricRecord evaluate_sample(const std::string& id, const Map2d& pred, const Map2d& g, double threshold)
{
    require_same_size(pred, g, "evaluate_sample");
    MetricRecord r;
    r.id = id;
    r.size_ratio = g.mean();
    const Map2d p = binarize(pred, threshold);
    r.dice = dice(p, g);
    r.iou = iou(p, g);
    r.fbw = f_beta_w(pred, g);
    r.salpha = s_alpha(pred, g);
    r.ephi = e_phi_max(pred, g);
    r.mae = mae(pred, g);
    return r;
}

Map2d predict(const CaraNet<float>& model, const Tensor<float>& image)
{
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("predict: expected a 3 x H x W image");
    NoGradGuard no_grad;
    const Tensor<float> x = reshape(image, Shape{1, 3, image.dim(1), image.dim(2)});
    return to_map(sigmoid(model(x).final));
}

MetricReport evaluate_dataset(const CaraNet<float>& model, const std::vector<Sample>& samples, double threshold,
                              std::vector<Map2d>* predictions)
{
    MetricReport report;
    for (const auto& s : samples) {
        const Map2d pred = predict(model, s.image);
        const Map2d g = to_map(s.mask);
        MetricRecord r = evaluate_sample(s.id, pred, g, threshold);
        r.size_ratio = s.size_ratio;
        report.records.push_back(std::move(r));
        if (predictions) predictions->push_back(pred);
    }
    return report;
}

MetricReport evaluate_predictions(const std::filesystem::path& prediction_dir, const DatasetManifest& manifest,
                                  Split split, double threshold)
{
    MetricReport report;
    std::string missing;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        const auto pred_path = prediction_dir / (e.id + ".pgm");
        const auto mask_path = manifest.resolve(e.mask_path);
        if (!std::filesystem::exists(pred_path)) missing += "\n  " + e.id + ": missing prediction " + pred_path.string();
        if (!std::filesystem::exists(mask_path)) missing += "\n  " + e.id + ": missing mask " + mask_path.string();
    }
    if (!missing.empty()) throw FormatError("missing files:" + missing);
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        const Map2d pred = to_map(read_image(prediction_dir / (e.id + ".pgm")));
        const Map2d g = to_map(read_mask(manifest.resolve(e.mask_path)));
        if (pred.rows() != g.rows() || pred.cols() != g.cols())
            throw FormatError(e.id + ": prediction and mask extents differ");
        MetricRecord r = evaluate_sample(e.id, pred, g, threshold);
        r.size_ratio = e.size_ratio;
        report.records.push_back(std::move(r));
    }
    return report;
}

namespace {

std::string report_row(const MetricRecord& r)
{
    return r.id + "," + format_double(r.size_ratio) + "," + format_double(r.dice) + "," + format_double(r.iou) + "," +
           format_double(r.fbw) + "," + format_double(r.salpha) + "," + format_double(r.ephi) + "," +
           format_double(r.mae) + "\n";
}

constexpr std::string_view kReportHeader = "id,size_ratio,dice,iou,fbw,salpha,ephi,mae";

}  // namespace

std::string format_report(const MetricReport& report)
{
    std::string out(kReportHeader);
    out += '\n';
    for (const auto& r : report.records) out += report_row(r);
    out += report_row(report.mean());
    return out;
}

MetricReport parse_report(std::string_view csv)
{
    MetricReport report;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (!csv.empty()) {
        const std::size_t eol = csv.find('\n');
        std::string_view line = csv.substr(0, eol);
        csv = eol == std::string_view::npos ? std::string_view{} : csv.substr(eol + 1);
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        if (!header_seen) {
            if (line != kReportHeader)
                throw FormatError("report: expected header '" + std::string(kReportHeader) + "'");
            header_seen = true;
            continue;
        }
        std::vector<std::string> cells;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            cells.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        const std::string where = "report line " + std::to_string(line_no) + ": ";
        if (cells.size() != 8) throw FormatError(where + "expected 8 columns");
        if (cells[0] == "MEAN") continue;
        MetricRecord r;
        r.id = cells[0];
        std::array<double*, 7> slots{&r.size_ratio, &r.dice, &r.iou, &r.fbw, &r.salpha, &r.ephi, &r.mae};
        for (std::size_t k = 0; k < slots.size(); ++k) {
            char* end = nullptr;
            *slots[k] = std::strtod(cells[k + 1].c_str(), &end);
            if (cells[k + 1].empty() || *end != '\0') throw FormatError(where + "bad number '" + cells[k + 1] + "'");
        }
        report.records.push_back(std::move(r));
    }
    if (!header_seen) throw FormatError("report: empty file");
    return report;
}

}  // namespace caranet
