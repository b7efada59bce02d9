#pragma once

#include "caranet/data_io.hpp"
#include "caranet/model.hpp"

#include <Eigen/Core>

#include <string>
#include <string_view>
#include <vector>

namespace caranet {

/// H x W map, row-major like the tensors it is read from.
using Map2d = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Spatial plane of a 1 x H x W or 1 x 1 x H x W tensor.
Map2d to_map(const Tensor<float>& t);
Tensor<float> from_map(const Map2d& m);

/// pixel >= tau -> 1, else 0. tau must lie in (0, 1).
Map2d binarize(const Map2d& pred, double tau = 0.5);

/// Both maps binary; both empty -> 1.
double dice(const Map2d& p, const Map2d& g);
double iou(const Map2d& p, const Map2d& g);
double mae(const Map2d& pred, const Map2d& g);

/// Squared Euclidean distance to the nearest nonzero pixel of `mask` and that
/// pixel's row-major index (ties: smallest index). Empty mask -> +inf / -1.
struct DistanceField {
    Map2d dist2;
    Eigen::Array<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> nearest;
};
DistanceField distance_transform(const Map2d& mask);

struct FbwOptions {
    double beta2 = 1.0;
    double sigma = 2.2360679774997898;  // sqrt(5): Gaussian variance 5
    int window = 7;
};

/// Weighted F-measure. Empty G: 1 if mean(pred) < 1e-6, else 0.
double f_beta_w(const Map2d& pred, const Map2d& g, const FbwOptions& options = {});

/// Structure measure with alpha = 0.5, clamped at 0.
double s_alpha(const Map2d& pred, const Map2d& g);

/// Enhanced-alignment score of one binary map against G (mean over pixels).
double e_phi(const Map2d& binary_pred, const Map2d& g);
/// Max of e_phi over the 256 thresholds k / 255.
double e_phi_max(const Map2d& pred, const Map2d& g);

struct MetricRecord {
    std::string id;
    double size_ratio = 0.0;
    double dice = 0.0;
    double iou = 0.0;
    double fbw = 0.0;
    double salpha = 0.0;
    double ephi = 0.0;
    double mae = 0.0;
};

struct MetricReport {
    std::vector<MetricRecord> records;

    /// Column means in record order; id "MEAN". Empty report -> zeros.
    MetricRecord mean() const;
};

MetricRecord evaluate_sample(const std::string& id, const Map2d& pred, const Map2d& g, double threshold = 0.5);

/// Probability map of the final output for one 3 x H x W image.
Map2d predict(const CaraNet<float>& model, const Tensor<float>& image);

/// Runs the model over samples in order; `predictions` (if non-null)
/// receives each probability map.
MetricReport evaluate_dataset(const CaraNet<float>& model, const std::vector<Sample>& samples, double threshold = 0.5,
                              std::vector<Map2d>* predictions = nullptr);

/// Scores stored prediction maps (PGM, one per manifest entry of the split,
/// named <id>.pgm in `prediction_dir`) against the manifest masks.
MetricReport evaluate_predictions(const std::filesystem::path& prediction_dir, const DatasetManifest& manifest,
                                  Split split, double threshold = 0.5);

/// Header `id,size_ratio,dice,iou,fbw,salpha,ephi,mae`, one row per record,
/// final `MEAN` row.
std::string format_report(const MetricReport& report);
/// Inverse of format_report; a trailing MEAN row is dropped (means are
/// recomputed from the rows).
MetricReport parse_report(std::string_view csv);

}  // namespace caranet
