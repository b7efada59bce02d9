#pragma once

#include "caranet/data_io.hpp"
#include "caranet/model.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace caranet {

struct TrainConfig {
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 20;
    int batch_size = 1;
    std::vector<double> scales{0.75, 1.0, 1.25};
    std::uint64_t seed = 1;
    int checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints

    void validate() const;
};

/// Per-parameter moments in parameter-store order, plus the step counter.
struct AdamState {
    std::vector<Tensor<float>::Array> m;
    std::vector<Tensor<float>::Array> v;
    std::int64_t t = 0;
};

/// w = 1 + 5 |avg_pool31(G) - G| (zero padding counted in the divisor).
/// G must be binary, N x 1 x H x W.
template <typename Scalar>
Tensor<Scalar> weight_map(const Tensor<Scalar>& mask);

/// Stable weighted BCE from logits: per image sum(w (softplus(l) - G l)) / sum(w),
/// averaged over the batch.
template <typename Scalar>
Tensor<Scalar> weighted_bce(const Tensor<Scalar>& logits, const Tensor<Scalar>& mask, const Tensor<Scalar>& weight);

/// 1 - sum(w p G) / sum(w (p + G - p G)) with p = sigmoid(logits), per image,
/// averaged over the batch.
template <typename Scalar>
Tensor<Scalar> weighted_iou(const Tensor<Scalar>& logits, const Tensor<Scalar>& mask, const Tensor<Scalar>& weight);

template <typename Scalar>
struct LossTerms {
    Tensor<Scalar> total;
    std::array<Tensor<Scalar>, 4> terms;  // global, s5, s4, s3
};

/// Deep-supervised objective: every map is upsampled to the mask extent and
/// scored with weighted_iou + weighted_bce; the four terms are summed.
template <typename Scalar>
LossTerms<Scalar> total_loss(const PredictionSet<Scalar>& preds, const Tensor<Scalar>& mask);

/// Bias-corrected Adam over every parameter of the store. Parameters that
/// received no gradient see g = 0. Throws NumericError naming the first
/// parameter with a non-finite gradient, before anything is modified.
void adam_step(ParameterStore<float>& params, AdamState& state, const TrainConfig& cfg);

/// base * scale rounded to the nearest multiple of 32 (ties upward).
Index scaled_extent(Index base, double scale);

/// Stacks samples of equal extent into N x 3 x H x W images and N x 1 x H x W masks.
std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<const Sample*>& batch);

/// One optimizer step per scale on the resized batch; returns the losses.
std::vector<double> multiscale_step(const Tensor<float>& images, const Tensor<float>& masks,
                                    const std::vector<double>& scales, CaraNet<float>& model, AdamState& state,
                                    const TrainConfig& cfg);

struct TrainRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double scale = 1.0;
    double loss = 0.0;
};

/// CSV with header `epoch,step,scale,loss`.
std::string format_train_log(const std::vector<TrainRecord>& records);

/// Runs cfg.epochs epochs with a seeded per-epoch shuffle. `on_epoch_end`
/// (optional) is called with the 1-based epoch number after each epoch.
std::vector<TrainRecord> fit(CaraNet<float>& model, AdamState& state, const std::vector<Sample>& train,
                             const TrainConfig& cfg, const std::function<void(int)>& on_epoch_end = {});

// ----- checkpoints ---------------------------------------------------------------

struct CheckpointEntry {
    std::string name;
    Tensor<float> value;
};

struct Checkpoint {
    CaraNetConfig config;
    std::int64_t step = 0;
    std::vector<CheckpointEntry> entries;
};

/// Little-endian: "CARA", u32 version, u32 meta length, meta (model config as
/// `key = value` lines), u64 Adam step, u32 entry count, then per entry
/// u32 name length, name, u32 rank, u64 extents, f32 payload. Adam moments
/// are stored as "<name>.m" and "<name>.v".
std::string encode_checkpoint(const CaraNet<float>& model, const AdamState& state);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const CaraNet<float>& model, const AdamState& state, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into an existing model; fails with FormatError
/// naming the parameter on any missing, unknown or shape-mismatched entry.
void restore_checkpoint(const Checkpoint& ckpt, CaraNet<float>& model, AdamState& state);

struct LoadedModel {
    CaraNet<float> model;
    AdamState state;
};

LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace caranet
