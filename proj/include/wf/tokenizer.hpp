#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wf/checkpoint_io.hpp"
#include "wf/linalg.hpp"

namespace wf {

/// 3-D token position: global index, layer index, within-layer index.
struct Position {
    std::int64_t n = 0;
    std::int64_t l = 0;
    std::int64_t k = 0;
    bool operator==(const Position&) const = default;
    auto operator<=>(const Position&) const = default;
};

struct LayerLayout {
    std::string name;
    Shape original_shape;
    Dtype dtype = Dtype::F32;
    std::size_t matrix_rows = 0;
    std::size_t matrix_cols = 0;
    std::size_t first_token_index = 0;
    std::size_t tokens_per_row = 0;

    std::size_t token_count() const { return matrix_rows * tokens_per_row; }
    bool operator==(const LayerLayout&) const = default;
};

/// Tokens T, mask M and positions P of one model, plus everything needed to
/// rebuild the original TensorMap exactly.
struct TokenSequence {
    Matrix tokens;
    Matrix mask;
    std::vector<Position> positions;
    std::vector<LayerLayout> layout;
    std::size_t d_t = 0;
    std::string source_id;
    Metadata metadata;

    std::size_t size() const { return static_cast<std::size_t>(tokens.rows()); }
};

/// Fixed-length training window cut from a TokenSequence.
struct TokenChunk {
    Matrix tokens;
    Matrix mask;
    std::vector<Position> positions;
    std::size_t pad_rows = 0;
    std::size_t chunk_index = 0;
    std::string model_id;

    std::size_t window() const { return static_cast<std::size_t>(tokens.rows()); }
    std::size_t real_rows() const { return window() - pad_rows; }
};

/// Row-major 2-D view of a tensor: rank 1 [n] -> [1, n], rank 2 unchanged,
/// rank 3 [a, b, c] -> [a, b*c], rank 4 [O, C, kh, kw] -> [O, C*kh*kw].
/// Rank 0 is treated as [1, 1]. Throws RankUnsupported above rank 4.
std::pair<std::size_t, std::size_t> matrix_shape(const Shape& shape);
Matrix layer_to_matrix(const TensorRecord& record);

TokenSequence tokenize_model(const TensorMap& map, std::size_t d_t);
TensorMap detokenize(const TokenSequence& seq);

std::vector<TokenChunk> chunk_sequence(const TokenSequence& seq, std::size_t window);

/// Rebuilds the sequence rows (pad rows dropped) from consecutive chunks.
TokenSequence assemble_chunks(const std::vector<TokenChunk>& chunks, const TokenSequence& shell);

/// Gaussian noise with std sigma * s on unmasked entries, where s is the std
/// of the chunk's unmasked values.
TokenChunk noise_view(const TokenChunk& chunk, double sigma, std::uint64_t seed);

/// Variance of the model's real (unmasked) token values; 1 when degenerate.
double runtime_norm_scale(const TokenSequence& seq);

void save_token_sequence(const std::filesystem::path& path, const TokenSequence& seq);
TokenSequence load_token_sequence(const std::filesystem::path& path);

}  // namespace wf
