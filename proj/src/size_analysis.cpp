#include "caranet/size_analysis.hpp"

#include "caranet/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace caranet {

double size_ratio(const Map2d& mask)
{
    if (!((mask == 0.0) || (mask == 1.0)).all()) throw std::invalid_argument("size_ratio: mask is not binary");
    return mask.size() == 0 ? 0.0 : mask.sum() / static_cast<double>(mask.size());
}

std::vector<SizePoint> size_points(const MetricReport& report)
{
    std::vector<SizePoint> out;
    for (const auto& r : report.records) out.push_back({r.id, r.size_ratio, r.dice});
    return out;
}

std::size_t SizeCurve::nonempty() const
{
    return static_cast<std::size_t>(std::count_if(mean.begin(), mean.end(), [](const auto& m) { return m.has_value(); }));
}

SizeCurve interval_average(const std::vector<SizePoint>& points, double lo, double hi, std::size_t n_intervals)
{
    if (n_intervals < 1) throw std::invalid_argument("interval_average: need at least one interval");
    if (!(hi > lo)) throw std::invalid_argument("interval_average: need hi > lo");
    SizeCurve curve;
    for (std::size_t k = 0; k < n_intervals; ++k)
        curve.edges.push_back(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n_intervals));
    curve.edges.push_back(hi);

    std::vector<std::vector<double>> bins(n_intervals);
    const double width = (hi - lo) / static_cast<double>(n_intervals);
    for (const auto& p : points) {
        if (!(p.ratio >= lo && p.ratio <= hi)) {
            ++curve.dropped;
            continue;
        }
        auto k = static_cast<std::size_t>(std::min<double>(std::floor((p.ratio - lo) / width), static_cast<double>(n_intervals - 1)));
        // settle rounding so membership agrees with the reported edges
        while (k + 1 < n_intervals && p.ratio >= curve.edges[k + 1]) ++k;
        while (k > 0 && p.ratio < curve.edges[k]) --k;
        bins[k].push_back(p.dice);
    }
    for (auto& bin : bins) {
        curve.count.push_back(bin.size());
        if (bin.empty()) {
            curve.mean.emplace_back();
            continue;
        }
        std::sort(bin.begin(), bin.end());
        double s = 0.0;
        for (const double d : bin) s += d;
        curve.mean.emplace_back(s / static_cast<double>(bin.size()));
    }
    return curve;
}

CurveComparison compare_curves(const SizeCurve& a, const SizeCurve& b)
{
    if (a.edges != b.edges) throw std::invalid_argument("compare_curves: interval grids differ");
    CurveComparison out;
    out.edges = a.edges;
    for (std::size_t k = 0; k < a.intervals(); ++k) {
        if (!a.mean[k] || !b.mean[k]) {
            out.diff.emplace_back();
            continue;
        }
        const double d = *a.mean[k] - *b.mean[k];
        out.diff.emplace_back(d);
        out.sum_positive += std::max(d, 0.0);
        out.sum_negative += std::min(d, 0.0);
    }
    return out;
}

std::optional<double> watershed(const SizeCurve& curve, std::size_t window, double tolerance)
{
    if (window < 1) throw std::invalid_argument("watershed: window must be >= 1");
    std::vector<double> values, left;
    for (std::size_t k = 0; k < curve.intervals(); ++k)
        if (curve.mean[k]) {
            values.push_back(*curve.mean[k]);
            left.push_back(curve.edges[k]);
        }
    if (values.size() < window)
        throw std::invalid_argument("watershed: " + std::to_string(values.size()) + " nonempty intervals, window needs " +
                                    std::to_string(window));
    const std::size_t n_windows = values.size() - window + 1;
    std::vector<bool> stable(n_windows);
    for (std::size_t t = 0; t < n_windows; ++t) {
        double m = 0.0;
        for (std::size_t i = t; i < t + window; ++i) m += values[i];
        m /= static_cast<double>(window);
        double ss = 0.0;
        for (std::size_t i = t; i < t + window; ++i) ss += (values[i] - m) * (values[i] - m);
        stable[t] = std::sqrt(ss / static_cast<double>(window)) < tolerance;
    }
    std::optional<std::size_t> first;
    for (std::size_t t = n_windows; t-- > 0;) {
        if (!stable[t]) break;
        first = t;
    }
    if (!first) return std::nullopt;
    return left[*first];
}

MetricReport filter_small(const MetricReport& report, double cutoff)
{
    if (!(cutoff > 0.0 && cutoff <= 1.0)) throw std::invalid_argument("filter_small: cutoff must be in (0, 1]");
    MetricReport out;
    for (const auto& r : report.records)
        if (r.size_ratio <= cutoff) out.records.push_back(r);
    if (out.records.empty()) throw std::invalid_argument("filter_small: no samples at or below cutoff " + format_double(cutoff));
    return out;
}

namespace {

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::string xml_escape(const std::string& text)
{
    std::string out;
    for (char c : text) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string format_curve(const SizeCurve& curve)
{
    std::string out = "interval_lo,interval_hi,mean_dice,count\n";
    for (std::size_t k = 0; k < curve.intervals(); ++k)
        out += format_double(curve.edges[k]) + "," + format_double(curve.edges[k + 1]) + "," +
               optional_cell(curve.mean[k]) + "," + std::to_string(curve.count[k]) + "\n";
    return out;
}

std::string format_comparison(const SizeCurve& a, const SizeCurve& b, const CurveComparison& cmp)
{
    std::string out = "interval_lo,interval_hi,mean_dice_a,count_a,mean_dice_b,count_b,diff\n";
    for (std::size_t k = 0; k < a.intervals(); ++k)
        out += format_double(a.edges[k]) + "," + format_double(a.edges[k + 1]) + "," + optional_cell(a.mean[k]) + "," +
               std::to_string(a.count[k]) + "," + optional_cell(b.mean[k]) + "," + std::to_string(b.count[k]) + "," +
               optional_cell(cmp.diff[k]) + "\n";
    return out;
}

std::string render_svg(const std::vector<std::pair<std::string, const SizeCurve*>>& series)
{
    if (series.empty()) throw std::invalid_argument("render_svg: no series");
    constexpr double width = 640, height = 400, left = 60, right = 20, top = 20, bottom = 50;
    const SizeCurve& ref = *series.front().second;
    const double x_lo = 100.0 * ref.edges.front(), x_hi = 100.0 * ref.edges.back();
    auto px = [&](double ratio) { return left + (100.0 * ratio - x_lo) / (x_hi - x_lo) * (width - left - right); };
    auto py = [&](double dice) { return top + (1.0 - dice) * (height - top - bottom); };
    auto mid = [](const SizeCurve& c, std::size_t k) { return 0.5 * (c.edges[k] + c.edges[k + 1]); };
    char buf[160];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.2f", v);
        return std::string(buf);
    };

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) +
                      "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    // axes and ticks
    svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(py(0)) + "\" x2=\"" + num(width - right) + "\" y2=\"" + num(py(0)) +
           "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(py(0)) + "\" x2=\"" + num(left) + "\" y2=\"" + num(py(1)) +
           "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 5; ++t) {
        const double d = t / 5.0;
        svg += "<text x=\"" + num(left - 8) + "\" y=\"" + num(py(d) + 4) + "\" text-anchor=\"end\">" + num(d) + "</text>\n";
        const double r = ref.edges.front() + (ref.edges.back() - ref.edges.front()) * t / 5.0;
        svg += "<text x=\"" + num(px(r)) + "\" y=\"" + num(py(0) + 18) + "\" text-anchor=\"middle\">" + num(100.0 * r) +
               "</text>\n";
    }
    svg += "<text x=\"" + num((left + width - right) / 2) + "\" y=\"" + num(height - 10) +
           "\" text-anchor=\"middle\">size ratio (%)</text>\n";
    svg += "<text x=\"15\" y=\"" + num((top + py(0)) / 2) + "\" transform=\"rotate(-90 15 " + num((top + py(0)) / 2) +
           ")\" text-anchor=\"middle\">mean dice</text>\n";

    if (series.size() == 2) {
        const SizeCurve& a = *series[0].second;
        const SizeCurve& b = *series[1].second;
        if (a.edges != b.edges) throw std::invalid_argument("render_svg: interval grids differ");
        std::optional<std::size_t> prev;
        for (std::size_t k = 0; k < a.intervals(); ++k) {
            if (!a.mean[k] || !b.mean[k]) continue;
            if (prev) {
                const std::size_t j = *prev;
                const double sign = (*a.mean[j] - *b.mean[j]) + (*a.mean[k] - *b.mean[k]);
                svg += "<polygon fill=\"" + std::string(sign >= 0 ? "red" : "blue") + "\" fill-opacity=\"0.25\" points=\"" +
                       num(px(mid(a, j))) + "," + num(py(*a.mean[j])) + " " + num(px(mid(a, k))) + "," +
                       num(py(*a.mean[k])) + " " + num(px(mid(a, k))) + "," + num(py(*b.mean[k])) + " " +
                       num(px(mid(a, j))) + "," + num(py(*b.mean[j])) + "\"/>\n";
            }
            prev = k;
        }
    }

    static constexpr const char* colours[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd"};
    for (std::size_t s = 0; s < series.size(); ++s) {
        const SizeCurve& c = *series[s].second;
        std::string points;
        for (std::size_t k = 0; k < c.intervals(); ++k)
            if (c.mean[k]) points += num(px(mid(c, k))) + "," + num(py(*c.mean[k])) + " ";
        if (!points.empty()) points.pop_back();
        const char* colour = colours[s % 4];
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
        svg += "<text x=\"" + num(width - right - 5) + "\" y=\"" + num(top + 14 + 16 * static_cast<double>(s)) +
               "\" text-anchor=\"end\" fill=\"" + colour + "\">" + xml_escape(series[s].first) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace caranet
