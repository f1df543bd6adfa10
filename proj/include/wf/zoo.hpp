#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wf/autoencoder.hpp"
#include "wf/checkpoint_io.hpp"
#include "wf/generation.hpp"
#include "wf/linalg.hpp"

namespace wf {

// -- toy tasks ----------------------------------------------------------------

/// Synthetic classification task: isotropic Gaussian blobs whose class means
/// are drawn N(0, separation^2 I) from the task seed.
struct ToyTask {
    std::string name;
    std::size_t input_dim = 8;
    std::size_t num_classes = 4;
    double separation = 1.5;
    double noise = 1.0;
    std::size_t n_train = 256;
    std::size_t n_val = 128;
    std::size_t n_probe = 128;
    std::size_t n_test = 512;
    std::uint64_t seed = 0;
};

struct LabeledData {
    Matrix x;
    std::vector<int> y;
    std::size_t size() const { return y.size(); }
};

struct TaskData {
    LabeledData train, val, probe, test;
};

/// Deterministic from the task seed; splits are disjoint draws. Throws
/// TaskDegenerate when two class means nearly coincide.
TaskData make_task_data(const ToyTask& task);

/// Five blob tasks with distinct seeds.
std::vector<ToyTask> default_tasks(std::uint64_t seed, std::size_t count = 5);

// -- perceptron classifiers ---------------------------------------------------

/// Layer widths [input, hidden..., classes]. Parameters are named
/// layers.{i}.weight [out, in] and layers.{i}.bias [out], ReLU between layers.
using MlpWidths = std::vector<std::size_t>;

TensorMap mlp_init(const MlpWidths& widths, std::uint64_t seed, Dtype dtype = Dtype::F32);
/// Recovers the widths from parameter shapes; throws ShapeMismatch when the
/// map is not a perceptron stack.
MlpWidths mlp_widths(const TensorMap& map);
Matrix mlp_logits(const TensorMap& map, const Matrix& x);
double mlp_loss(const TensorMap& map, const LabeledData& data);
double mlp_accuracy(const TensorMap& map, const LabeledData& data);

/// Zero-shot probe built from a task's probe split.
Probe make_probe(const LabeledData& probe);

struct FinetuneConfig {
    std::size_t epochs = 3;
    double lr = 1e-2;
    std::size_t batch_size = 32;
    bool reinit_head = false;
};

struct FinetuneResult {
    /// Validation accuracy before training and after every epoch.
    std::vector<double> val_accuracy;
    double test_accuracy = 0.0;
    double test_loss = 0.0;
    TensorMap weights;
};

/// Supervised AdamW training from the given weights.
FinetuneResult finetune(const TensorMap& init, const ToyTask& task, const TaskData& data, const FinetuneConfig& cfg,
                        std::uint64_t seed);

// -- zoo ----------------------------------------------------------------------

struct ZooSpec {
    std::size_t count = 50;
    MlpWidths widths = {8, 16, 4};
    std::vector<ToyTask> tasks;
    std::size_t train_epochs = 30;
    double lr = 1e-2;
    std::uint64_t seed = 0;
    std::string prefix = "zoo";
};

struct ZooMember {
    TensorMap weights;
    std::size_t task_index = 0;
    double test_accuracy = 0.0;
};

/// Member i trains on task i % tasks.size() from a seeded random init.
/// Checkpoints carry metadata "task" (name) and "task_spec" (task JSON).
std::vector<ZooMember> build_zoo(const ZooSpec& spec);

/// One held-out model per task, trained like a member but from seeds no
/// member uses. These serve as prompts.
std::vector<ZooMember> build_prompts(const ZooSpec& spec);

/// Writes member checkpoints plus zoo.json into dir and prompts into dir/prompts.
void save_zoo(const std::filesystem::path& dir, const ZooSpec& spec, const std::vector<ZooMember>& members,
              const std::vector<ZooMember>& prompts = {});

struct LoadedZoo {
    ZooSpec spec;
    std::vector<ZooMember> members;
    std::vector<ZooMember> prompts;
};

/// Task stored in a checkpoint's "task_spec" metadata, if any.
std::optional<ToyTask> task_of(const TensorMap& model);
LoadedZoo load_zoo(const std::filesystem::path& dir);

std::string task_to_json(const ToyTask& task);
ToyTask task_from_json(std::string_view text);

// -- baselines ----------------------------------------------------------------

struct DareStats {
    std::size_t kept = 0;
    std::size_t total = 0;
};

/// base + mean over donors of (Bernoulli(1 - drop_p) mask * (donor - base) / (1 - drop_p)).
TensorMap dare_merge(const TensorMap& base, const std::vector<TensorMap>& donors, double drop_p, std::uint64_t seed,
                     DareStats* stats = nullptr);

/// Zeroes the floor(sparsity * N) entries of smallest magnitude over the whole
/// model; ties go to the earlier entry in canonical order.
TensorMap magnitude_prune(const TensorMap& weights, double sparsity);

// -- comparison ---------------------------------------------------------------

enum class Condition { Scratch, Prompt, Generated, Dare, Pruned };
std::string_view to_string(Condition c);
Condition condition_from_string(std::string_view s);

struct ComparisonConfig {
    std::vector<Condition> conditions = {Condition::Scratch, Condition::Prompt, Condition::Generated,
                                         Condition::Dare, Condition::Pruned};
    FinetuneConfig budget;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::size_t candidates = 10;
    std::size_t keep = 3;
    BandwidthRule bandwidth = BandwidthRule::scott();
    double drop_p = 0.3;
    double sparsity = 0.5;
    std::size_t dare_donors = 2;
};

struct ReportCell {
    std::string task;
    Condition condition = Condition::Scratch;
    /// One test accuracy per fine-tuned model; value_seeds[i] is its seed.
    std::vector<double> values;
    std::vector<std::uint64_t> value_seeds;
    double mean = 0.0;
    double stddev = 0.0;
    /// Mean validation accuracy per epoch (index 0 = before fine-tuning).
    std::vector<double> mean_val_curve;
};

struct EvalReport {
    std::vector<std::string> tasks;
    std::vector<Condition> conditions;
    std::vector<std::uint64_t> seeds;
    FinetuneConfig budget;
    std::vector<ReportCell> cells;

    const ReportCell* find(const std::string& task, Condition c) const;
};

/// Mean and sample standard deviation (n - 1) of a value list.
std::pair<double, double> mean_std(const std::vector<double>& values);

/// Runs every condition on every task under one fine-tune budget and seed set.
/// prompts[t] is the prompt model for tasks[t]; zoo supplies DARE donors.
EvalReport run_comparison(const std::vector<ZooMember>& zoo, const AutoencoderWeights& autoencoder,
                          const std::vector<ToyTask>& tasks, const std::vector<TensorMap>& prompts,
                          const MlpWidths& widths, const ComparisonConfig& cfg);

std::string report_to_json(const EvalReport& report);
std::string report_to_table(const EvalReport& report);

// -- latent export ------------------------------------------------------------

struct LabeledEmbedding {
    PromptEmbedding embedding;
    std::string family;
    std::string modality;
};

/// CSV with header latent_0..latent_{d-1},model_id,family,modality and up to
/// per_model randomly sampled token latents per model.
std::string export_latents(const std::vector<LabeledEmbedding>& embeddings, std::uint64_t seed,
                           std::size_t per_model = 100);

}  // namespace wf
