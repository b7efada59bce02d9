#pragma once

#include "caranet/metrics.hpp"

#include <optional>
#include <string>
#include <vector>

namespace caranet {

/// Foreground pixels / total pixels of a binary mask.
double size_ratio(const Map2d& mask);

struct SizePoint {
    std::string id;
    double ratio = 0.0;
    double dice = 0.0;
};

std::vector<SizePoint> size_points(const MetricReport& report);

/// Equal-width intervals over [lo, hi]; empty intervals have no mean.
struct SizeCurve {
    std::vector<double> edges;               // n + 1 edges, edges.back() == hi
    std::vector<std::optional<double>> mean;  // per interval
    std::vector<std::size_t> count;
    std::size_t dropped = 0;  // points outside [lo, hi]

    std::size_t intervals() const { return mean.size(); }
    std::size_t nonempty() const;
};

/// Interval k is [edges[k], edges[k+1]), the last one closed on the right.
/// Means are accumulated in sorted order, so they do not depend on the input
/// order.
SizeCurve interval_average(const std::vector<SizePoint>& points, double lo, double hi, std::size_t n_intervals);

struct CurveComparison {
    std::vector<double> edges;
    std::vector<std::optional<double>> diff;  // a - b where both are nonempty
    double sum_positive = 0.0;
    double sum_negative = 0.0;
};

CurveComparison compare_curves(const SizeCurve& a, const SizeCurve& b);

/// Left edge of the first nonempty interval j such that every rolling window
/// of `window` consecutive nonempty intervals starting at j or later has a
/// population standard deviation of mean dice strictly below `tolerance`.
std::optional<double> watershed(const SizeCurve& curve, std::size_t window, double tolerance);

/// Rows with size_ratio <= cutoff. Throws when nothing remains.
MetricReport filter_small(const MetricReport& report, double cutoff);

/// `interval_lo,interval_hi,mean_dice,count`; absent means are left blank.
std::string format_curve(const SizeCurve& curve);
/// `interval_lo,interval_hi,mean_dice_a,count_a,mean_dice_b,count_b,diff`.
std::string format_comparison(const SizeCurve& a, const SizeCurve& b, const CurveComparison& cmp);

/// Line plot of mean dice against size ratio (percent). With two curves the
/// gaps between them are shaded red (a above b) or blue (a below b).
std::string render_svg(const std::vector<std::pair<std::string, const SizeCurve*>>& series);

}  // namespace caranet
