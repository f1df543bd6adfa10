#include "wf/generation.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace wf {

std::size_t PromptEmbedding::latent_count() const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += real_rows(c.mask).size();
    return n;
}

PromptEmbedding embed_prompt(const TensorMap& prompt, const AutoencoderWeights& w) {
    const auto& cfg = w.config();
    PromptEmbedding emb;
    emb.prompt_id = prompt.source_id();
    emb.tokens = tokenize_model(prompt, cfg.d_t);
    for (const auto& chunk : chunk_sequence(emb.tokens, cfg.window)) {
        emb.chunks.push_back(encode(chunk, w));
        emb.pad_rows.push_back(chunk.pad_rows);
    }
    return emb;
}

BandwidthRule BandwidthRule::parse(std::string_view text) {
    if (text == "scott") return scott();
    constexpr std::string_view prefix = "fixed:";
    if (text.substr(0, prefix.size()) == prefix) {
        const std::string num(text.substr(prefix.size()));
        std::size_t used = 0;
        double h = 0.0;
        try {
            h = std::stod(num, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == num.size() && used > 0 && h >= 0.0 && std::isfinite(h)) return fixed(h);
    }
    throw Error(ErrorKind::InvalidArgument, "bandwidth must be 'scott' or 'fixed:<h>' with h >= 0, got '" +
                                                std::string(text) + "'");
}

double scott_factor(std::size_t n, std::size_t d) {
    return std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(d) + 4.0));
}

KdeModel fit_kde(const PromptEmbedding& emb, const BandwidthRule& rule) {
    const std::size_t n = emb.latent_count();
    if (n == 0 || emb.chunks.empty()) throw Error(ErrorKind::EmptyEmbedding, "prompt has no real token latents");
    KdeModel kde;
    kde.dim = static_cast<std::size_t>(emb.chunks.front().latents.cols());
    kde.centers.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kde.dim));
    Eigen::Index at = 0;
    for (const auto& c : emb.chunks) {
        for (Eigen::Index r : real_rows(c.mask)) kde.centers.row(at++) = c.latents.row(r);
    }
    if (rule.kind == BandwidthRule::Kind::Fixed) {
        if (!(rule.h >= 0.0)) throw Error(ErrorKind::InvalidArgument, "fixed bandwidth must be non-negative");
        kde.bandwidth = rule.h;
        return kde;
    }
    const RowVector mean = kde.centers.colwise().mean();
    const RowVector var = (kde.centers.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(n);
    const double mean_std = var.array().sqrt().mean();
    kde.bandwidth = scott_factor(n, kde.dim) * mean_std;
    if (!(kde.bandwidth > 0.0)) {
        spdlog::warn("degenerate KDE for '{}': latent spread is zero, bandwidth set to 0", emb.prompt_id);
        kde.bandwidth = 0.0;
    }
    return kde;
}

PromptEmbedding sample_latents(const KdeModel& kde, const PromptEmbedding& emb, std::uint64_t seed) {
    PromptEmbedding out = emb;
    if (kde.bandwidth == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& c : out.chunks) {
        for (Eigen::Index r : real_rows(c.mask)) {
            for (Eigen::Index j = 0; j < c.latents.cols(); ++j) c.latents(r, j) += kde.bandwidth * normal(rng);
        }
    }
    return out;
}

TensorMap decode_embedding(const PromptEmbedding& emb, const AutoencoderWeights& w) {
    std::vector<TokenChunk> chunks;
    chunks.reserve(emb.chunks.size());
    for (std::size_t i = 0; i < emb.chunks.size(); ++i) {
        TokenChunk c;
        c.tokens = decode(emb.chunks[i], w);
        c.mask = emb.chunks[i].mask;
        c.positions = emb.chunks[i].positions;
        c.pad_rows = emb.pad_rows[i];
        c.chunk_index = i;
        c.model_id = emb.prompt_id;
        chunks.push_back(std::move(c));
    }
    // Decoded values are already on the prompt's raw scale: the runtime norm
    // only rescales the loss, so de-normalization is the identity here.
    return detokenize(assemble_chunks(chunks, emb.tokens));
}

TensorMap autoencode_model(const TensorMap& model, const AutoencoderWeights& w) {
    return decode_embedding(embed_prompt(model, w), w);
}

std::vector<std::uint64_t> GenerationConfig::seeds() const {
    std::vector<std::uint64_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = base_seed + i;
    return out;
}

std::vector<CandidateModel> generate(const TensorMap& prompt, const AutoencoderWeights& w, const GenerationConfig& cfg) {
    if (cfg.count == 0) throw Error(ErrorKind::InvalidArgument, "candidate count must be positive");
    const PromptEmbedding emb = embed_prompt(prompt, w);
    const KdeModel kde = fit_kde(emb, cfg.bandwidth);
    std::vector<CandidateModel> out;
    out.reserve(cfg.count);
    for (std::uint64_t seed : cfg.seeds()) {
        CandidateModel c;
        c.weights = decode_embedding(sample_latents(kde, emb, seed), w);
        c.prompt_id = emb.prompt_id;
        c.seed = seed;
        c.weights.set_source_id(fmt::format("{}.gen{}", emb.prompt_id, seed));
        c.weights.metadata()["prompt_id"] = emb.prompt_id;
        c.weights.metadata()["seed"] = std::to_string(seed);
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<CandidateModel> rank_candidates(std::vector<CandidateModel> candidates, const Probe& probe, std::size_t m,
                                            RankCriterion criterion) {
    if (probe.size == 0) throw Error(ErrorKind::EmptyProbe, "probe set is empty");
    if (m == 0 || m > candidates.size()) {
        throw Error(ErrorKind::InvalidArgument,
                    "cannot keep " + std::to_string(m) + " of " + std::to_string(candidates.size()) + " candidates");
    }
    const auto& scorer = criterion == RankCriterion::Loss ? probe.loss : probe.accuracy;
    if (!scorer) throw Error(ErrorKind::InvalidArgument, "probe lacks an evaluator for the chosen criterion");
    for (auto& c : candidates) c.probe_score = scorer(c.weights);
    const double sign = criterion == RankCriterion::Loss ? 1.0 : -1.0;
    std::stable_sort(candidates.begin(), candidates.end(), [sign](const CandidateModel& a, const CandidateModel& b) {
        const double ka = sign * a.probe_score;
        const double kb = sign * b.probe_score;
        return ka != kb ? ka < kb : a.seed < b.seed;
    });
    candidates.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        candidates[i].rank = i + 1;
        candidates[i].weights.metadata()["probe_score"] = fmt::format("{:.17g}", candidates[i].probe_score);
        candidates[i].weights.metadata()["rank"] = std::to_string(i + 1);
    }
    return candidates;
}

std::filesystem::path save_candidate(const std::filesystem::path& dir, const CandidateModel& candidate) {
    const auto path = dir / fmt::format("{}.gen{}.safetensors", candidate.prompt_id, candidate.seed);
    TensorMap map = candidate.weights;
    map.metadata()["prompt_id"] = candidate.prompt_id;
    map.metadata()["seed"] = std::to_string(candidate.seed);
    map.metadata()["probe_score"] = fmt::format("{:.17g}", candidate.probe_score);
    if (candidate.rank > 0) map.metadata()["rank"] = std::to_string(candidate.rank);
    write_checkpoint_file(path, map);
    return path;
}

}  // namespace wf
