#pragma once

// The three regressor families (recurrent, operator, attention), the batch
// builder that turns a normalised dataset into model inputs, the trainer,
// and checkpoints.

#include "wqtrust/dataio.hpp"
#include "wqtrust/ndcore.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace wqt::models {

using nd::Tensor;

enum class Family { Recurrent, Operator, Attention };
std::string_view to_string(Family f);
Family parse_family(std::string_view s);

inline constexpr double kFillValue = -1.0;

struct ModelSpec {
    Family family = Family::Recurrent;
    std::size_t seq_len = 60;
    std::size_t decoder_window = 16; // attention only
    std::size_t hidden = 64;
    /// Recurrent: stacked LSTM layers. Operator: blocks in branch and trunk.
    /// Attention: encoder blocks (the decoder has one).
    std::size_t layers = 2;
    double dropout = 0.0;
    std::size_t heads = 4;
    std::size_t ff_dim = 128;
    /// Operator only: widths of the D network after the fused product.
    std::vector<std::size_t> head_widths{64, 32};
    std::size_t n_dynamic = 0;
    std::size_t n_static = 0;
    std::size_t n_targets = 0;

    bool operator==(const ModelSpec&) const = default;
};

/// Desk-scale spec with the reference layer topology: 2 LSTM layers, 7
/// branch/trunk blocks, 3 encoder blocks.
ModelSpec default_spec(Family family, std::size_t n_dynamic, std::size_t n_static, std::size_t n_targets);

/// Throws ConfigError on an invalid spec.
void validate(const ModelSpec& spec);

/// Rows of dynamic input per sample: seq_len (recurrent), 1 (operator),
/// seq_len + 1 (attention: history followed by the prediction day).
std::size_t window_rows(const ModelSpec& spec);

/// One model input batch, everything in normalised space.
struct ModelInput {
    Tensor dynamic; // [B x window_rows x F_d]
    Tensor statics; // [B x F_s]
    Tensor coords;  // [B x 2], longitude then latitude
};

struct ForwardOptions {
    /// Batch statistics for batch norm (and running-stat updates).
    bool training = false;
    /// Dropout probability applied at every dropout site; defaults to the
    /// spec value while training and 0 otherwise.
    std::optional<double> dropout;
    std::mt19937_64* rng = nullptr;
    /// When set, receives the softmax attention weights of every attention
    /// layer as [B*heads x queries x keys].
    std::vector<Tensor>* attention_weights = nullptr;
};

/// Owns its parameters. Tensors are shared handles, so copies are explicit
/// through clone().
class Model {
public:
    Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    /// Deterministic initialisation from the seed.
    static Model build(const ModelSpec& spec, std::uint64_t seed);
    Model clone() const;

    const ModelSpec& spec() const { return spec_; }
    /// Returns predictions [B x n_targets] in normalised target space.
    Tensor forward(const ModelInput& in, const ForwardOptions& opts = {});

    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
    /// Running statistics and other non-trainable state.
    std::vector<std::pair<std::string, std::vector<double>>>& buffers() { return buffers_; }
    const std::vector<std::pair<std::string, std::vector<double>>>& buffers() const { return buffers_; }

    std::size_t parameter_count() const;
    Tensor& parameter(std::string_view name);

private:
    ModelSpec spec_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, std::vector<double>>> buffers_;

    Tensor forward_recurrent(const ModelInput& in, const ForwardOptions& opts, double p);
    Tensor forward_operator(const ModelInput& in, const ForwardOptions& opts, double p);
    Tensor forward_attention(const ModelInput& in, const ForwardOptions& opts, double p);
    const Tensor& param(std::string_view name) const;
    std::vector<double>& buffer(std::string_view name);
};

/// Closed-form count for a stacked single-bias LSTM plus linear head.
std::size_t lstm_parameter_count(std::size_t inputs, std::size_t hidden, std::size_t layers,
                                 std::size_t outputs);

// ------------------------------------------------------------------ data views

/// Dataset in normalised space, laid out for fast batch assembly. Missing
/// dynamic values hold the fill value; targets are NaN where unobserved.
struct NormalizedData {
    std::size_t n_days = 0;
    std::size_t n_dynamic = 0;
    std::size_t n_static = 0;
    std::size_t n_targets = 0;
    std::vector<data::FeatureGroup> dynamic_groups;
    std::vector<data::FeatureGroup> static_groups;
    std::vector<Matrix> dynamic;                        // per basin, days x F_d
    std::vector<std::vector<std::uint8_t>> dyn_present; // per basin, days x F_d
    std::vector<std::vector<double>> statics;           // per basin
    std::vector<std::array<double, 2>> coords;          // per basin
    std::vector<Matrix> targets;                        // per basin, days x n_targets
};

NormalizedData normalize(const data::BasinDataset& ds, const data::DatasetNormalizer& norm);

/// Copy with every input column of the given groups set to 0.
NormalizedData without_groups(const NormalizedData& data, const std::set<data::FeatureGroup>& removed);

/// Additive perturbations of individual samples' dynamic windows
/// ([window_rows x F_d] each), keyed by row.
using WindowDeltas = std::map<data::RowIndex, std::vector<double>>;

struct Batch {
    ModelInput input;
    std::vector<double> targets;      // B x n_targets, 0 where unobserved
    std::vector<double> mask;         // B x n_targets, 1 = observed
    std::vector<std::uint8_t> dyn_present; // B x window_rows x F_d, 0 at fill positions
    std::size_t size = 0;
};

Batch make_batch(const NormalizedData& data, std::span<const data::RowIndex> rows, const ModelSpec& spec,
                 const WindowDeltas* deltas = nullptr);

/// Masked mean squared error over observed entries.
Tensor masked_mse(const Tensor& pred, const Batch& batch);

// ------------------------------------------------------------------ training

enum class Optimizer { AdamW, Adam };
enum class Schedule { Step, Cosine };

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    Optimizer optimizer = Optimizer::AdamW;
    double lr = 1e-3;
    Schedule schedule = Schedule::Step;
    double decay = 0.5;
    std::size_t decay_every = 100;
    double min_lr = 1e-6;
    double weight_decay = 0.01; // AdamW only
    /// Caps the samples drawn per epoch (0 = all training rows).
    std::size_t samples_per_epoch = 0;
    bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg);

/// Learning rate for a zero-based epoch.
double learning_rate(const TrainConfig& cfg, std::size_t epoch);

struct TrainedModel {
    Model model;
    data::DatasetNormalizer normalizer;
    std::uint64_t seed = 0;
    std::vector<double> epoch_loss;
};

/// Trains on rows with at least one observed target. Deterministic given
/// the seed; shuffles with its own stream.
void train(Model& model, const NormalizedData& data, std::span<const data::RowIndex> rows,
           const TrainConfig& cfg, std::uint64_t seed, std::vector<double>* epoch_loss = nullptr,
           const WindowDeltas* deltas = nullptr);

/// Builds, trains and packages a model.
TrainedModel fit(const ModelSpec& spec, const TrainConfig& cfg, const data::DatasetNormalizer& norm,
                 const NormalizedData& data, std::span<const data::RowIndex> rows, std::uint64_t seed,
                 const WindowDeltas* deltas = nullptr);

/// Predictions [rows x n_targets] in normalised space, without recording a graph.
Matrix predict(Model& model, const NormalizedData& data, std::span<const data::RowIndex> rows,
               const ForwardOptions& opts = {}, std::size_t batch_size = 256);

/// Maps normalised predictions back to target units.
Matrix denormalize(const Matrix& normalized, const data::DatasetNormalizer& norm);

// ------------------------------------------------------------------ checkpoints

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_checkpoint(const std::filesystem::path& path);

} // namespace wqt::models
