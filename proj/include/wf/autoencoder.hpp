#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wf/checkpoint_io.hpp"
#include "wf/linalg.hpp"
#include "wf/tokenizer.hpp"

namespace wf {

struct AutoencoderConfig {
    std::size_t d_t = 16;
    std::size_t latent_dim = 32;
    std::size_t proj_dim = 16;
    std::size_t num_layers_enc = 1;
    std::size_t num_layers_dec = 1;
    std::size_t num_heads = 2;
    std::size_t ff_dim = 64;
    std::size_t window = 8;
    std::size_t max_layer_index = 15;
    std::size_t max_k_index = 63;

    void validate() const;
    bool operator==(const AutoencoderConfig&) const = default;
};

std::string config_to_json(const AutoencoderConfig& cfg);
AutoencoderConfig config_from_json(std::string_view text);

struct ParamSlot {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
};

struct LinearSlots {
    std::size_t weight = 0;
    std::size_t bias = 0;
};

struct NormSlots {
    std::size_t gain = 0;
    std::size_t bias = 0;
};

struct BlockSlots {
    NormSlots ln1;
    LinearSlots query, key, value, out;
    NormSlots ln2;
    LinearSlots ff1, ff2;
};

/// Index of every parameter array inside the flat buffer. Linear weights are
/// stored [in, out] so a layer computes X * W + b.
struct ParamLayout {
    std::vector<ParamSlot> slots;
    std::size_t total = 0;

    LinearSlots input;
    std::size_t pos_n = 0;
    std::size_t pos_l = 0;
    std::size_t pos_k = 0;
    std::vector<BlockSlots> encoder;
    NormSlots encoder_norm;
    std::vector<BlockSlots> decoder;
    NormSlots decoder_norm;
    LinearSlots output;
    LinearSlots proj_hidden;
    LinearSlots proj_out;

    static std::shared_ptr<const ParamLayout> build(const AutoencoderConfig& cfg);
};

/// A flat parameter-shaped buffer (weights or gradients).
class ParamBuffer {
public:
    ParamBuffer() = default;
    explicit ParamBuffer(std::shared_ptr<const ParamLayout> layout);

    const ParamLayout& layout() const { return *layout_; }
    const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }

    MatrixMap operator[](std::size_t slot);
    ConstMatrixMap operator[](std::size_t slot) const;

    std::span<double> flat() { return values_; }
    std::span<const double> flat() const { return values_; }
    std::size_t size() const { return values_.size(); }

    void set_zero();

private:
    std::shared_ptr<const ParamLayout> layout_;
    std::vector<double> values_;
};

/// Parameters of the encoder, decoder and projection head.
class AutoencoderWeights {
public:
    AutoencoderWeights() = default;
    explicit AutoencoderWeights(const AutoencoderConfig& cfg);

    /// Seeded initialization: linear weights N(0, 1/fan_in), embeddings
    /// N(0, 0.02^2), norm gains 1, biases 0.
    static AutoencoderWeights initialize(const AutoencoderConfig& cfg, std::uint64_t seed);

    const AutoencoderConfig& config() const { return config_; }
    const ParamLayout& layout() const { return params_.layout(); }
    ParamBuffer& params() { return params_; }
    const ParamBuffer& params() const { return params_; }

    ParamBuffer zeros_like() const { return ParamBuffer(params_.layout_ptr()); }

    TensorMap to_tensor_map() const;
    static AutoencoderWeights from_tensor_map(const AutoencoderConfig& cfg, const TensorMap& map);

    void save(const std::filesystem::path& path) const;
    static AutoencoderWeights load(const std::filesystem::path& path);

private:
    AutoencoderConfig config_;
    ParamBuffer params_;
};

/// Per-token latents Z for one chunk.
struct LatentSequence {
    Matrix latents;
    std::vector<Position> positions;
    Matrix mask;
};

/// Indices of the rows that carry at least one real parameter.
std::vector<Eigen::Index> real_rows(const Matrix& mask);

LatentSequence encode(const TokenChunk& chunk, const AutoencoderWeights& w);
Matrix decode(const LatentSequence& z, const AutoencoderWeights& w);
/// Masked mean over token latents, two-layer perceptron, L2 normalization.
Vector project(const LatentSequence& z, const AutoencoderWeights& w);
Matrix autoencode(const TokenChunk& chunk, const AutoencoderWeights& w);

/// Sum of masked squared residuals divided by norm times the number of
/// unmasked entries.
double recon_loss(const Matrix& tokens, const Matrix& reconstruction, const Matrix& mask, double norm);

using EmbeddingPair = std::pair<Vector, Vector>;

/// NT-Xent over 2B anchors; positives are the two views of a pair, every other
/// embedding in the batch is a negative.
double ntxent_loss(std::span<const EmbeddingPair> pairs, double temperature);

double total_loss(double l_rec, double l_c, double gamma);

/// A clean chunk, its noised view, and the owning model's runtime norm scale.
struct ChunkPair {
    TokenChunk clean;
    TokenChunk noised;
    double norm = 1.0;
};

struct LossGradient {
    double loss = 0.0;
    double recon = 0.0;
    double contrastive = 0.0;
    ParamBuffer grad;
};

/// Loss and gradients of (1 - gamma) * mean_b L_rec(b) + gamma * L_c over a
/// batch. A term with zero weight is neither evaluated nor differentiated.
LossGradient backward(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double gamma,
                      double temperature);
LossGradient reconstruction_gradient(std::span<const ChunkPair> batch, const AutoencoderWeights& w);
LossGradient contrastive_gradient(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double temperature);

/// Forward-only evaluation of the same objective.
LossGradient evaluate_loss(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double gamma,
                           double temperature);

}  // namespace wf
