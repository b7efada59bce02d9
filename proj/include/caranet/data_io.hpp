#pragma once

#include "caranet/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace caranet {

/// Malformed or unsupported file contents.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ----- netpbm ----------------------------------------------------------------

/// Decodes binary PGM (P5, one channel) or PPM (P6, three channels), maxval
/// 255. Returns a C x H x W tensor scaled to [0, 1] by /255.
Tensor<float> decode_netpbm(std::string_view bytes);
/// Inverse of decode_netpbm: 1 channel -> P5, 3 channels -> P6. Values are
/// clamped to [0, 1] and quantized as floor(255 v + 0.5).
std::string encode_netpbm(const Tensor<float>& image);

Tensor<float> read_image(const std::filesystem::path& path);
/// Grayscale mask binarized at byte value 128.
Tensor<float> read_mask(const std::filesystem::path& path);
void write_image(const Tensor<float>& image, const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
/// FNV-1a, 64 bit.
std::uint64_t content_hash(std::string_view bytes);

// ----- manifests -------------------------------------------------------------

enum class Split { train, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ManifestEntry {
    std::string id;
    std::string image_path;  // relative to the manifest's directory unless absolute
    std::string mask_path;
    Split split = Split::train;
    double size_ratio = 0.0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path root;  // directory relative paths resolve against

    std::vector<ManifestEntry> select(Split split) const;
    std::filesystem::path resolve(const std::string& relative) const;
};

/// Tab-separated `id, image_path, mask_path, split, size_ratio`, LF endings.
std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& root);
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Seeded shuffle assigns floor(fraction * n) entries to train and the rest
/// to test; the entry order itself is preserved.
DatasetManifest split_manifest(std::vector<ManifestEntry> entries, double train_fraction, std::uint64_t seed);

// ----- samples -----------------------------------------------------------------

struct Sample {
    std::string id;
    Tensor<float> image;  // 3 x H x W in [0, 1]
    Tensor<float> mask;   // 1 x H x W in {0, 1}
    double size_ratio = 0.0;
};

/// Loads every entry of the given split, validating extents and mask values.
std::vector<Sample> load_samples(const DatasetManifest& manifest, Split split);

/// Bilinear resampling (align_corners = false) of the last two axes of a rank
/// 3 or 4 tensor, in either direction. No gradient.
Tensor<float> resize_bilinear(const Tensor<float>& x, Index out_h, Index out_w);
/// Values >= threshold become 1, the rest 0.
Tensor<float> binarize_map(const Tensor<float>& x, double threshold = 0.5);

/// Image bilinear, mask bilinear then re-binarized at 0.5. Target extents must
/// be divisible by 16.
Sample resize_sample(const Sample& sample, Index out_h, Index out_w);

// ----- synthetic generator -----------------------------------------------------

struct SyntheticSpec {
    Index n_samples = 200;
    Index height = 64;
    Index width = 64;
    double ratio_lo = 0.005;
    double ratio_hi = 0.05;
    Index blobs_min = 1;
    Index blobs_max = 3;
    double contrast = 0.25;  // blob intensity lift
    double texture = 0.08;   // amplitude of the smooth background pattern
    double noise = 0.04;     // per-pixel Gaussian sigma
    double train_fraction = 0.8;
    std::uint64_t seed = 1;

    void validate() const;
};

struct SyntheticSample {
    Sample sample;
    double target_ratio = 0.0;
};

/// Deterministic in (spec.seed, index); image values are already 8-bit
/// quantized so the in-memory sample equals its on-disk form.
SyntheticSample synthesize_sample(const SyntheticSpec& spec, Index index);

struct GenerateResult {
    DatasetManifest manifest;
    bool up_to_date = false;  // every file already existed byte-identical
    std::size_t files_written = 0;
};

/// Writes images/<id>.ppm, masks/<id>.pgm and manifest.tsv under out_dir.
GenerateResult generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

}  // namespace caranet
