#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "wf/autoencoder.hpp"
#include "wf/checkpoint_io.hpp"
#include "wf/tokenizer.hpp"

namespace wf {

/// Latents of every chunk of a prompt model, plus the token layout needed to
/// turn decoded tokens back into weights.
struct PromptEmbedding {
    std::string prompt_id;
    std::vector<LatentSequence> chunks;
    std::vector<std::size_t> pad_rows;
    TokenSequence tokens;

    /// Number of real (non-padding) token latents across all chunks.
    std::size_t latent_count() const;
};

PromptEmbedding embed_prompt(const TensorMap& prompt, const AutoencoderWeights& w);

struct BandwidthRule {
    enum class Kind { Scott, Fixed };
    Kind kind = Kind::Scott;
    double h = 0.0;

    static BandwidthRule scott() { return {Kind::Scott, 0.0}; }
    static BandwidthRule fixed(double h) { return {Kind::Fixed, h}; }
    /// Accepts "scott" or "fixed:<h>".
    static BandwidthRule parse(std::string_view text);
};

struct KdeModel {
    Matrix centers;
    double bandwidth = 0.0;
    std::size_t dim = 0;
};

/// Scott factor n^(-1/(d+4)) for n latents in d dimensions.
double scott_factor(std::size_t n, std::size_t d);

/// Scott: h = n^(-1/(d+4)) * mean per-dimension (population) std of the
/// prompt's real token latents. A degenerate spread yields h = 0 with a warning.
KdeModel fit_kde(const PromptEmbedding& emb, const BandwidthRule& rule);

/// Perturbs each real token latent around its own center: z + h * N(0, I).
/// Padding rows are untouched; h == 0 returns the embedding unchanged.
PromptEmbedding sample_latents(const KdeModel& kde, const PromptEmbedding& emb, std::uint64_t seed);

/// Decodes every chunk and de-tokenizes with the prompt's layout.
TensorMap decode_embedding(const PromptEmbedding& emb, const AutoencoderWeights& w);

/// Plain reconstruction of a model through the autoencoder.
TensorMap autoencode_model(const TensorMap& model, const AutoencoderWeights& w);

struct CandidateModel {
    TensorMap weights;
    std::string prompt_id;
    std::uint64_t seed = 0;
    double probe_score = 0.0;
    std::size_t rank = 0;
};

struct GenerationConfig {
    std::size_t count = 10;
    std::uint64_t base_seed = 0;
    BandwidthRule bandwidth = BandwidthRule::scott();

    /// Candidate i uses seed base_seed + i.
    std::vector<std::uint64_t> seeds() const;
};

std::vector<CandidateModel> generate(const TensorMap& prompt, const AutoencoderWeights& w, const GenerationConfig& cfg);

/// Labeled probe set seen only through its evaluators.
struct Probe {
    std::size_t size = 0;
    std::function<double(const TensorMap&)> loss;
    std::function<double(const TensorMap&)> accuracy;
};

enum class RankCriterion { Loss, Accuracy };

/// Scores every candidate on the probe and returns the best m, ranked 1..m.
/// Loss sorts ascending, accuracy descending; ties go to the lower seed.
std::vector<CandidateModel> rank_candidates(std::vector<CandidateModel> candidates, const Probe& probe, std::size_t m,
                                            RankCriterion criterion = RankCriterion::Loss);

/// Writes {prompt_id}.gen{seed}.safetensors with prompt_id/seed/probe_score/rank metadata.
std::filesystem::path save_candidate(const std::filesystem::path& dir, const CandidateModel& candidate);

}  // namespace wf
