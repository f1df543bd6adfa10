#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wf/autoencoder.hpp"
#include "wf/tokenizer.hpp"

namespace wf {

struct TrainingConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 16;
    double max_lr = 1e-3;
    double weight_decay = 3e-9;
    double gamma = 0.05;
    double sigma_aug = 0.05;
    double temperature = 0.1;
    std::uint64_t seed = 0;
    double pct_start = 0.3;
    double div_factor = 25.0;
    double final_div_factor = 1e4;

    /// Large-zoo regime: 150 epochs, lr 2e-5, wd 3e-9.
    static TrainingConfig full_scale();
    void validate() const;
};

struct OptimizerState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;

    static OptimizerState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }
};

/// One AdamW update in place: decoupled decay w <- w - lr*wd*w, then the
/// bias-corrected adaptive step. Throws NonFiniteUpdate.
void adamw_step(std::span<double> weights, std::span<const double> grads, OptimizerState& state, double lr,
                double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Cosine warm-up from max_lr/div_factor to max_lr over round(pct_start*total)
/// steps, then cosine anneal to max_lr/final_div_factor at the last step.
double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainingConfig& cfg);

/// One tokenized model with its runtime loss scale.
struct TrainingItem {
    TokenSequence sequence;
    double norm = 1.0;

    static TrainingItem from_sequence(TokenSequence seq);
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    bool operator==(const EpochRecord&) const = default;
};

struct TrainingHistory {
    double initial_train_loss = 0.0;
    double initial_val_loss = 0.0;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    std::string best_checkpoint_path;

    bool operator==(const TrainingHistory&) const = default;
};

std::string history_to_jsonl(const TrainingHistory& history);

struct TrainingResult {
    AutoencoderWeights best;
    AutoencoderWeights final;
    TrainingHistory history;
};

struct TrainingOptions {
    /// When set, the best-validation weights are written here after every improvement.
    std::optional<std::filesystem::path> checkpoint_path;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// True when the model id falls in the held-out 10% (FNV-1a hash mod 10 == 0).
bool is_validation_model(const std::string& model_id);

/// Mean objective over a fixed chunk list, batched like training and with
/// deterministic noise seeds.
double dataset_loss(std::span<const ChunkPair> pairs, const AutoencoderWeights& w, const TrainingConfig& cfg);

/// Builds (clean, noised) pairs for every chunk of every item; noise seeds are
/// derived from `seed` and the pair's position.
std::vector<ChunkPair> make_pairs(std::span<const TrainingItem> items, std::size_t window, double sigma,
                                  std::uint64_t seed);

TrainingResult train(std::span<const TrainingItem> dataset, const TrainingConfig& cfg,
                     const AutoencoderConfig& model_cfg, const std::optional<AutoencoderWeights>& init = std::nullopt,
                     const TrainingOptions& options = {});

}  // namespace wf
