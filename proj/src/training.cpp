#include "wf/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "wf/rng.hpp"

namespace wf {

TrainingConfig TrainingConfig::full_scale() {
    TrainingConfig c;
    c.epochs = 150;
    c.max_lr = 2e-5;
    c.weight_decay = 3e-9;
    return c;
}

void TrainingConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorKind::InvalidArgument, std::string("training config: ") + what);
    };
    require(epochs > 0 && batch_size > 0, "epochs and batch_size must be positive");
    require(max_lr >= 0.0 && std::isfinite(max_lr), "max_lr must be non-negative");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
    require(sigma_aug >= 0.0, "sigma_aug must be non-negative");
    require(temperature > 0.0, "temperature must be positive");
    require(pct_start > 0.0 && pct_start < 1.0, "pct_start must lie in (0, 1)");
    require(div_factor > 1.0 && final_div_factor > 1.0, "div factors must exceed 1");
}

void adamw_step(std::span<double> weights, std::span<const double> grads, OptimizerState& state, double lr,
                double weight_decay, double beta1, double beta2, double eps) {
    if (weights.size() != grads.size() || state.m.size() != weights.size() || state.v.size() != weights.size()) {
        throw Error(ErrorKind::ShapeMismatch, "weights, gradients and optimizer state differ in size");
    }
    if (!(lr >= 0.0)) throw Error(ErrorKind::InvalidArgument, "learning rate must be non-negative");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        double w = weights[i];
        if (weight_decay != 0.0) w *= decay;
        w -= lr * m_hat / (std::sqrt(v_hat) + eps);
        if (!std::isfinite(w)) throw Error(ErrorKind::NonFiniteUpdate, "AdamW produced a non-finite weight");
        weights[i] = w;
    }
}

double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainingConfig& cfg) {
    if (step >= total_steps) {
        throw Error(ErrorKind::StepOutOfRange,
                    "step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
    }
    const double initial = cfg.max_lr / cfg.div_factor;
    const double minimum = cfg.max_lr / cfg.final_div_factor;
    const auto peak = static_cast<std::size_t>(std::llround(cfg.pct_start * static_cast<double>(total_steps)));
    auto cosine = [](double from, double to, double frac) {
        return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    };
    if (step <= peak) {
        if (peak == 0) return cfg.max_lr;
        return cosine(initial, cfg.max_lr, static_cast<double>(step) / static_cast<double>(peak));
    }
    const std::size_t span = total_steps - 1 - peak;
    return cosine(cfg.max_lr, minimum, static_cast<double>(step - peak) / static_cast<double>(span));
}

TrainingItem TrainingItem::from_sequence(TokenSequence seq) {
    const double norm = runtime_norm_scale(seq);
    return {std::move(seq), norm};
}

std::string history_to_jsonl(const TrainingHistory& history) {
    std::string out;
    for (const auto& e : history.epochs) {
        const nlohmann::json j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

bool is_validation_model(const std::string& model_id) {
    return fnv1a64(model_id) % 10 == 0;
}

std::vector<ChunkPair> make_pairs(std::span<const TrainingItem> items, std::size_t window, double sigma,
                                  std::uint64_t seed) {
    std::vector<ChunkPair> pairs;
    for (const auto& item : items) {
        for (auto& chunk : chunk_sequence(item.sequence, window)) {
            const std::uint64_t s = derive_seed(seed, pairs.size());
            TokenChunk noised = noise_view(chunk, sigma, s);
            pairs.push_back({std::move(chunk), std::move(noised), item.norm});
        }
    }
    return pairs;
}

namespace {

/// Consecutive batches of `size`; a trailing single-element batch is folded
/// into its predecessor when the contrastive term needs negatives.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t size,
                                                   bool need_pairs) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
    }
    if (need_pairs && batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

std::vector<ChunkPair> gather(std::span<const ChunkPair> pairs, const std::vector<std::size_t>& idx) {
    std::vector<ChunkPair> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(pairs[i]);
    return out;
}

}  // namespace

double dataset_loss(std::span<const ChunkPair> pairs, const AutoencoderWeights& w, const TrainingConfig& cfg) {
    if (pairs.empty()) return 0.0;
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const bool contrastive = cfg.gamma > 0.0 && pairs.size() >= 2;
    const double gamma = contrastive ? cfg.gamma : 0.0;
    double sum = 0.0;
    const auto batches = make_batches(order, cfg.batch_size, contrastive);
    for (const auto& b : batches) {
        const auto batch = gather(pairs, b);
        sum += evaluate_loss(batch, w, gamma, cfg.temperature).loss;
    }
    return sum / static_cast<double>(batches.size());
}

TrainingResult train(std::span<const TrainingItem> dataset, const TrainingConfig& cfg,
                     const AutoencoderConfig& model_cfg, const std::optional<AutoencoderWeights>& init,
                     const TrainingOptions& options) {
    cfg.validate();
    model_cfg.validate();
    if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "no models to train on");
    for (const auto& item : dataset) {
        if (item.sequence.d_t != model_cfg.d_t) {
            throw Error(ErrorKind::ShapeMismatch, "model '" + item.sequence.source_id + "' tokenized with d_t=" +
                                                      std::to_string(item.sequence.d_t));
        }
    }
    if (init && !(init->config() == model_cfg)) {
        throw Error(ErrorKind::ShapeMismatch, "initial weights use a different autoencoder config");
    }

    std::vector<TrainingItem> train_items;
    std::vector<TrainingItem> val_items;
    for (const auto& item : dataset) {
        (is_validation_model(item.sequence.source_id) ? val_items : train_items).push_back(item);
    }
    if (train_items.empty()) {
        train_items.swap(val_items);
    }

    const auto train_pairs_clean = make_pairs(train_items, model_cfg.window, 0.0, 0);
    const auto train_eval_pairs = make_pairs(train_items, model_cfg.window, cfg.sigma_aug, derive_seed(cfg.seed, 1));
    const auto val_pairs = make_pairs(val_items, model_cfg.window, cfg.sigma_aug, derive_seed(cfg.seed, 2));
    if (cfg.gamma > 0.0 && train_pairs_clean.size() < 2) {
        throw Error(ErrorKind::SinglePair, "contrastive training needs at least two chunks");
    }

    AutoencoderWeights weights = init ? *init : AutoencoderWeights::initialize(model_cfg, derive_seed(cfg.seed, 3));
    OptimizerState opt = OptimizerState::zeros(weights.params().size());
    std::mt19937_64 rng(derive_seed(cfg.seed, 4));

    std::vector<std::size_t> order(train_pairs_clean.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const bool need_pairs = cfg.gamma > 0.0;
    const std::size_t steps_per_epoch = make_batches(order, cfg.batch_size, need_pairs).size();
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;

    TrainingResult result{weights, weights, {}};
    TrainingHistory& hist = result.history;
    hist.initial_train_loss = dataset_loss(train_eval_pairs, weights, cfg);
    hist.initial_val_loss = val_pairs.empty() ? hist.initial_train_loss : dataset_loss(val_pairs, weights, cfg);
    double best = std::numeric_limits<double>::infinity();

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const auto batches = make_batches(order, cfg.batch_size, need_pairs);
        double epoch_loss = 0.0;
        double lr = 0.0;
        for (const auto& idx : batches) {
            std::vector<ChunkPair> batch;
            batch.reserve(idx.size());
            for (std::size_t i : idx) {
                const ChunkPair& src = train_pairs_clean[i];
                const std::uint64_t noise_seed = rng();
                batch.push_back({src.clean, noise_view(src.clean, cfg.sigma_aug, noise_seed), src.norm});
            }
            lr = onecycle_lr(step, total_steps, cfg);
            const LossGradient lg = backward(batch, weights, cfg.gamma, cfg.temperature);
            adamw_step(weights.params().flat(), lg.grad.flat(), opt, lr, cfg.weight_decay);
            epoch_loss += lg.loss;
            ++step;
        }
        EpochRecord rec{epoch, epoch_loss / static_cast<double>(batches.size()), 0.0, lr};
        if (!std::isfinite(rec.train_loss)) throw Error(ErrorKind::DivergedLoss, "training loss diverged");
        rec.val_loss = val_pairs.empty() ? dataset_loss(train_eval_pairs, weights, cfg) : dataset_loss(val_pairs, weights, cfg);
        hist.epochs.push_back(rec);
        if (rec.val_loss < best) {
            best = rec.val_loss;
            hist.best_epoch = epoch;
            result.best = weights;
            if (options.checkpoint_path) {
                weights.save(*options.checkpoint_path);
                hist.best_checkpoint_path = options.checkpoint_path->string();
            }
        }
        spdlog::debug("epoch {} train {:.6g} val {:.6g} lr {:.3g}", epoch, rec.train_loss, rec.val_loss, rec.lr);
        if (options.on_epoch) options.on_epoch(rec);
    }
    result.final = weights;
    return result;
}

}  // namespace wf
