#include "wf/tokenizer.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

namespace wf {

using json = nlohmann::json;

std::pair<std::size_t, std::size_t> matrix_shape(const Shape& shape) {
    switch (shape.size()) {
        case 0: return {1, 1};
        case 1: return {1, shape[0]};
        case 2: return {shape[0], shape[1]};
        case 3: return {shape[0], shape[1] * shape[2]};
        case 4: return {shape[0], shape[1] * shape[2] * shape[3]};
        default:
            throw Error(ErrorKind::RankUnsupported, "rank " + std::to_string(shape.size()) + " tensors are not tokenized");
    }
}

Matrix layer_to_matrix(const TensorRecord& record) {
    record.validate();
    const auto [rows, cols] = matrix_shape(record.shape);
    Matrix m(rows, cols);
    std::copy(record.values.begin(), record.values.end(), m.data());
    return m;
}

TokenSequence tokenize_model(const TensorMap& map, std::size_t d_t) {
    if (d_t == 0) throw Error(ErrorKind::InvalidArgument, "token size must be positive");
    if (map.empty()) throw Error(ErrorKind::InvalidArgument, "cannot tokenize an empty model");

    TokenSequence seq;
    seq.d_t = d_t;
    seq.source_id = map.source_id();
    seq.metadata = map.metadata();

    std::size_t total = 0;
    for (const auto& r : map.records()) {
        const auto [rows, cols] = matrix_shape(r.shape);
        LayerLayout lay{r.name, r.shape, r.dtype, rows, cols, total, (cols + d_t - 1) / d_t};
        total += lay.token_count();
        seq.layout.push_back(std::move(lay));
    }

    seq.tokens = Matrix::Zero(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d_t));
    seq.mask = Matrix::Zero(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d_t));
    seq.positions.reserve(total);

    for (std::size_t l = 0; l < seq.layout.size(); ++l) {
        const auto& lay = seq.layout[l];
        const auto& values = map.records()[l].values;
        std::size_t row_token = lay.first_token_index;
        for (std::size_t r = 0; r < lay.matrix_rows; ++r) {
            for (std::size_t t = 0; t < lay.tokens_per_row; ++t, ++row_token) {
                const std::size_t c0 = t * d_t;
                const std::size_t width = std::min(d_t, lay.matrix_cols - c0);
                for (std::size_t j = 0; j < width; ++j) {
                    seq.tokens(row_token, j) = values[r * lay.matrix_cols + c0 + j];
                    seq.mask(row_token, j) = 1.0;
                }
                seq.positions.push_back({static_cast<std::int64_t>(row_token), static_cast<std::int64_t>(l),
                                         static_cast<std::int64_t>(row_token - lay.first_token_index)});
            }
        }
    }
    return seq;
}

TensorMap detokenize(const TokenSequence& seq) {
    std::size_t expected = 0;
    for (const auto& lay : seq.layout) {
        if (lay.first_token_index != expected || lay.matrix_rows * lay.matrix_cols != numel(lay.original_shape) ||
            lay.tokens_per_row != (lay.matrix_cols + seq.d_t - 1) / seq.d_t) {
            throw Error(ErrorKind::LayoutMismatch, "layout entry '" + lay.name + "' is inconsistent");
        }
        expected += lay.token_count();
    }
    if (expected != seq.size() || static_cast<std::size_t>(seq.tokens.cols()) != seq.d_t) {
        throw Error(ErrorKind::LayoutMismatch, "sequence holds " + std::to_string(seq.size()) +
                                                   " tokens, layout expects " + std::to_string(expected));
    }

    std::vector<TensorRecord> records;
    records.reserve(seq.layout.size());
    for (const auto& lay : seq.layout) {
        TensorRecord r{lay.name, lay.original_shape, lay.dtype, std::vector<double>(numel(lay.original_shape))};
        std::size_t tok = lay.first_token_index;
        for (std::size_t row = 0; row < lay.matrix_rows; ++row) {
            for (std::size_t t = 0; t < lay.tokens_per_row; ++t, ++tok) {
                const std::size_t c0 = t * seq.d_t;
                const std::size_t width = std::min(seq.d_t, lay.matrix_cols - c0);
                for (std::size_t j = 0; j < width; ++j) {
                    double v = seq.tokens(tok, j);
                    if (lay.dtype == Dtype::F32) v = static_cast<double>(static_cast<float>(v));
                    r.values[row * lay.matrix_cols + c0 + j] = v;
                }
            }
        }
        records.push_back(std::move(r));
    }
    return TensorMap(std::move(records), seq.source_id, seq.metadata);
}

std::vector<TokenChunk> chunk_sequence(const TokenSequence& seq, std::size_t window) {
    if (window == 0) throw Error(ErrorKind::InvalidArgument, "window must be positive");
    const std::size_t n = seq.size();
    const auto d = static_cast<Eigen::Index>(seq.d_t);
    const auto w = static_cast<Eigen::Index>(window);
    std::vector<TokenChunk> chunks;
    for (std::size_t start = 0, idx = 0; start < n; start += window, ++idx) {
        const std::size_t len = std::min(window, n - start);
        TokenChunk c;
        c.tokens = Matrix::Zero(w, d);
        c.mask = Matrix::Zero(w, d);
        const auto s = static_cast<Eigen::Index>(start);
        const auto rows = static_cast<Eigen::Index>(len);
        c.tokens.topRows(rows) = seq.tokens.middleRows(s, rows);
        c.mask.topRows(rows) = seq.mask.middleRows(s, rows);
        c.positions.assign(seq.positions.begin() + static_cast<std::ptrdiff_t>(start),
                           seq.positions.begin() + static_cast<std::ptrdiff_t>(start + len));
        c.positions.resize(window, Position{});
        c.pad_rows = window - len;
        c.chunk_index = idx;
        c.model_id = seq.source_id;
        chunks.push_back(std::move(c));
    }
    return chunks;
}

TokenSequence assemble_chunks(const std::vector<TokenChunk>& chunks, const TokenSequence& shell) {
    TokenSequence out;
    out.layout = shell.layout;
    out.d_t = shell.d_t;
    out.source_id = shell.source_id;
    out.metadata = shell.metadata;
    std::size_t total = 0;
    for (const auto& c : chunks) total += c.real_rows();
    const auto d = static_cast<Eigen::Index>(shell.d_t);
    out.tokens.resize(static_cast<Eigen::Index>(total), d);
    out.mask.resize(static_cast<Eigen::Index>(total), d);
    Eigen::Index at = 0;
    for (const auto& c : chunks) {
        if (c.tokens.cols() != d) throw Error(ErrorKind::ShapeMismatch, "chunk token width differs from d_t");
        const auto rows = static_cast<Eigen::Index>(c.real_rows());
        out.tokens.middleRows(at, rows) = c.tokens.topRows(rows);
        out.mask.middleRows(at, rows) = c.mask.topRows(rows);
        out.positions.insert(out.positions.end(), c.positions.begin(), c.positions.begin() + rows);
        at += rows;
    }
    return out;
}

TokenChunk noise_view(const TokenChunk& chunk, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw Error(ErrorKind::InvalidArgument, "noise sigma must be non-negative");
    TokenChunk out = chunk;
    if (sigma == 0.0) return out;

    double sum = 0.0;
    double count = 0.0;
    for (Eigen::Index i = 0; i < chunk.tokens.size(); ++i) {
        if (chunk.mask.data()[i] != 0.0) {
            sum += chunk.tokens.data()[i];
            count += 1.0;
        }
    }
    if (count == 0.0) return out;
    const double mean = sum / count;
    double ss = 0.0;
    for (Eigen::Index i = 0; i < chunk.tokens.size(); ++i) {
        if (chunk.mask.data()[i] != 0.0) {
            const double d = chunk.tokens.data()[i] - mean;
            ss += d * d;
        }
    }
    const double scale = sigma * std::sqrt(ss / count);
    if (scale == 0.0) return out;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.tokens.size(); ++i) {
        if (out.mask.data()[i] != 0.0) out.tokens.data()[i] += scale * normal(rng);
    }
    return out;
}

double runtime_norm_scale(const TokenSequence& seq) {
    double sum = 0.0;
    double count = 0.0;
    for (Eigen::Index i = 0; i < seq.tokens.size(); ++i) {
        if (seq.mask.data()[i] != 0.0) {
            sum += seq.tokens.data()[i];
            count += 1.0;
        }
    }
    if (count == 0.0) return 1.0;
    const double mean = sum / count;
    double ss = 0.0;
    for (Eigen::Index i = 0; i < seq.tokens.size(); ++i) {
        if (seq.mask.data()[i] != 0.0) ss += (seq.tokens.data()[i] - mean) * (seq.tokens.data()[i] - mean);
    }
    const double var = ss / count;
    return var > 1e-12 ? var : 1.0;
}

// -- persistence --------------------------------------------------------------

namespace {

constexpr const char* kTokensKey = "__tokens__";
constexpr const char* kMaskKey = "__mask__";
constexpr const char* kPositionsKey = "__positions__";

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    auto p = path;
    p += ".json";
    return p;
}

TensorRecord matrix_record(const char* name, const Matrix& m, Dtype dtype) {
    return {name,
            {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
            dtype,
            std::vector<double>(m.data(), m.data() + m.size())};
}

}  // namespace

void save_token_sequence(const std::filesystem::path& path, const TokenSequence& seq) {
    Matrix pos(static_cast<Eigen::Index>(seq.positions.size()), 3);
    for (std::size_t i = 0; i < seq.positions.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        pos(r, 0) = static_cast<double>(seq.positions[i].n);
        pos(r, 1) = static_cast<double>(seq.positions[i].l);
        pos(r, 2) = static_cast<double>(seq.positions[i].k);
    }
    TensorMap container({matrix_record(kTokensKey, seq.tokens, Dtype::F64),
                         matrix_record(kMaskKey, seq.mask, Dtype::F32),
                         matrix_record(kPositionsKey, pos, Dtype::F64)},
                        seq.source_id);
    write_checkpoint_file(path, container);

    json layout = json::array();
    for (const auto& lay : seq.layout) {
        layout.push_back({{"name", lay.name},
                          {"original_shape", lay.original_shape},
                          {"dtype", std::string(to_string(lay.dtype))},
                          {"matrix_rows", lay.matrix_rows},
                          {"matrix_cols", lay.matrix_cols},
                          {"first_token_index", lay.first_token_index},
                          {"tokens_per_row", lay.tokens_per_row}});
    }
    const json side = {{"d_t", seq.d_t},
                       {"source_id", seq.source_id},
                       {"metadata", seq.metadata},
                       {"norm_scale", runtime_norm_scale(seq)},
                       {"layout", layout}};
    const std::string text = side.dump(2);
    write_file_bytes(sidecar_path(path), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

TokenSequence load_token_sequence(const std::filesystem::path& path) {
    const TensorMap container = read_checkpoint_file(path);
    const auto side_bytes = read_file_bytes(sidecar_path(path));
    const json side = json::parse(side_bytes.begin(), side_bytes.end(), nullptr, false);
    if (side.is_discarded()) throw Error(ErrorKind::MalformedHeader, "token sidecar is not JSON");

    const auto* tok = container.find(kTokensKey);
    const auto* msk = container.find(kMaskKey);
    const auto* pos = container.find(kPositionsKey);
    if (!tok || !msk || !pos || tok->shape.size() != 2 || msk->shape != tok->shape || pos->shape.size() != 2 ||
        pos->shape[1] != 3 || pos->shape[0] != tok->shape[0]) {
        throw Error(ErrorKind::LayoutMismatch, "token container lacks consistent reserved tensors");
    }
    TokenSequence seq;
    try {
        seq.d_t = side.at("d_t").get<std::size_t>();
        seq.source_id = side.at("source_id").get<std::string>();
        seq.metadata = side.at("metadata").get<Metadata>();
        for (const auto& j : side.at("layout")) {
            LayerLayout lay;
            lay.name = j.at("name").get<std::string>();
            lay.original_shape = j.at("original_shape").get<Shape>();
            lay.dtype = j.at("dtype").get<std::string>() == "F64" ? Dtype::F64 : Dtype::F32;
            lay.matrix_rows = j.at("matrix_rows").get<std::size_t>();
            lay.matrix_cols = j.at("matrix_cols").get<std::size_t>();
            lay.first_token_index = j.at("first_token_index").get<std::size_t>();
            lay.tokens_per_row = j.at("tokens_per_row").get<std::size_t>();
            seq.layout.push_back(std::move(lay));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, std::string("token sidecar: ") + e.what());
    }
    const auto rows = static_cast<Eigen::Index>(tok->shape[0]);
    const auto cols = static_cast<Eigen::Index>(tok->shape[1]);
    seq.tokens = ConstMatrixMap(tok->values.data(), rows, cols);
    seq.mask = ConstMatrixMap(msk->values.data(), rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double* p = pos->values.data() + 3 * i;
        seq.positions.push_back({static_cast<std::int64_t>(p[0]), static_cast<std::int64_t>(p[1]),
                                 static_cast<std::int64_t>(p[2])});
    }
    return seq;
}

}  // namespace wf
