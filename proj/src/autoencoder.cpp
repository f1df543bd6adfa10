#include "wf/autoencoder.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

namespace wf {

using json = nlohmann::json;

// -- configuration ------------------------------------------------------------

void AutoencoderConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorKind::InvalidArgument, std::string("autoencoder config: ") + what);
    };
    require(d_t > 0 && latent_dim > 0 && proj_dim > 0 && ff_dim > 0 && window > 0, "sizes must be positive");
    require(num_layers_enc > 0 && num_layers_dec > 0 && num_heads > 0, "layer and head counts must be positive");
    require(latent_dim % num_heads == 0, "latent_dim must be divisible by num_heads");
    require(proj_dim <= latent_dim, "proj_dim must not exceed latent_dim");
    require(max_layer_index > 0 && max_k_index > 0, "position table sizes must be positive");
}

std::string config_to_json(const AutoencoderConfig& c) {
    const json j = {{"d_t", c.d_t},
                    {"latent_dim", c.latent_dim},
                    {"proj_dim", c.proj_dim},
                    {"num_layers_enc", c.num_layers_enc},
                    {"num_layers_dec", c.num_layers_dec},
                    {"num_heads", c.num_heads},
                    {"ff_dim", c.ff_dim},
                    {"window", c.window},
                    {"max_layer_index", c.max_layer_index},
                    {"max_k_index", c.max_k_index}};
    return j.dump(2);
}

AutoencoderConfig config_from_json(std::string_view text) {
    const json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorKind::InvalidArgument, "autoencoder config is not a JSON object");
    AutoencoderConfig c;
    try {
        c.d_t = j.at("d_t").get<std::size_t>();
        c.latent_dim = j.at("latent_dim").get<std::size_t>();
        c.proj_dim = j.at("proj_dim").get<std::size_t>();
        c.num_layers_enc = j.at("num_layers_enc").get<std::size_t>();
        c.num_layers_dec = j.at("num_layers_dec").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.ff_dim = j.at("ff_dim").get<std::size_t>();
        c.window = j.at("window").get<std::size_t>();
        c.max_layer_index = j.at("max_layer_index").get<std::size_t>();
        c.max_k_index = j.at("max_k_index").get<std::size_t>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("autoencoder config: ") + e.what());
    }
    c.validate();
    return c;
}

// -- parameter layout ---------------------------------------------------------

std::shared_ptr<const ParamLayout> ParamLayout::build(const AutoencoderConfig& cfg) {
    cfg.validate();
    auto lay = std::make_shared<ParamLayout>();
    auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
        lay->slots.push_back({std::move(name), lay->total, rows, cols});
        lay->total += rows * cols;
        return lay->slots.size() - 1;
    };
    auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
        return LinearSlots{add(prefix + ".weight", in, out), add(prefix + ".bias", 1, out)};
    };
    auto norm = [&](const std::string& prefix, std::size_t dim) {
        return NormSlots{add(prefix + ".gain", 1, dim), add(prefix + ".bias", 1, dim)};
    };
    const std::size_t d = cfg.latent_dim;
    auto block = [&](const std::string& prefix) {
        BlockSlots b;
        b.ln1 = norm(prefix + ".ln1", d);
        b.query = linear(prefix + ".attn.query", d, d);
        b.key = linear(prefix + ".attn.key", d, d);
        b.value = linear(prefix + ".attn.value", d, d);
        b.out = linear(prefix + ".attn.out", d, d);
        b.ln2 = norm(prefix + ".ln2", d);
        b.ff1 = linear(prefix + ".mlp.fc1", d, cfg.ff_dim);
        b.ff2 = linear(prefix + ".mlp.fc2", cfg.ff_dim, d);
        return b;
    };

    lay->input = linear("encoder.input", cfg.d_t, d);
    lay->pos_n = add("encoder.pos_n", cfg.window, d);
    lay->pos_l = add("encoder.pos_l", cfg.max_layer_index + 1, d);
    lay->pos_k = add("encoder.pos_k", cfg.max_k_index + 1, d);
    for (std::size_t i = 0; i < cfg.num_layers_enc; ++i) lay->encoder.push_back(block("encoder.blocks." + std::to_string(i)));
    lay->encoder_norm = norm("encoder.norm", d);
    for (std::size_t i = 0; i < cfg.num_layers_dec; ++i) lay->decoder.push_back(block("decoder.blocks." + std::to_string(i)));
    lay->decoder_norm = norm("decoder.norm", d);
    lay->output = linear("decoder.output", d, cfg.d_t);
    lay->proj_hidden = linear("projection.fc1", d, d);
    lay->proj_out = linear("projection.fc2", d, cfg.proj_dim);
    return lay;
}

ParamBuffer::ParamBuffer(std::shared_ptr<const ParamLayout> layout)
    : layout_(std::move(layout)), values_(layout_->total, 0.0) {}

MatrixMap ParamBuffer::operator[](std::size_t slot) {
    const auto& s = layout_->slots[slot];
    return MatrixMap(values_.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

ConstMatrixMap ParamBuffer::operator[](std::size_t slot) const {
    const auto& s = layout_->slots[slot];
    return ConstMatrixMap(values_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                          static_cast<Eigen::Index>(s.cols));
}

void ParamBuffer::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

AutoencoderWeights::AutoencoderWeights(const AutoencoderConfig& cfg)
    : config_(cfg), params_(ParamLayout::build(cfg)) {}

AutoencoderWeights AutoencoderWeights::initialize(const AutoencoderConfig& cfg, std::uint64_t seed) {
    AutoencoderWeights w(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto& lay = w.layout();
    auto fill_normal = [&](std::size_t slot, double stddev) {
        auto m = w.params_[slot];
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
    };
    auto fill_const = [&](std::size_t slot, double v) { w.params_[slot].setConstant(v); };
    auto init_linear = [&](const LinearSlots& s) {
        fill_normal(s.weight, 1.0 / std::sqrt(static_cast<double>(lay.slots[s.weight].rows)));
        fill_const(s.bias, 0.0);
    };
    auto init_norm = [&](const NormSlots& s) {
        fill_const(s.gain, 1.0);
        fill_const(s.bias, 0.0);
    };
    auto init_block = [&](const BlockSlots& b) {
        init_norm(b.ln1);
        init_linear(b.query);
        init_linear(b.key);
        init_linear(b.value);
        init_linear(b.out);
        init_norm(b.ln2);
        init_linear(b.ff1);
        init_linear(b.ff2);
    };
    init_linear(lay.input);
    fill_normal(lay.pos_n, 0.02);
    fill_normal(lay.pos_l, 0.02);
    fill_normal(lay.pos_k, 0.02);
    for (const auto& b : lay.encoder) init_block(b);
    init_norm(lay.encoder_norm);
    for (const auto& b : lay.decoder) init_block(b);
    init_norm(lay.decoder_norm);
    init_linear(lay.output);
    init_linear(lay.proj_hidden);
    init_linear(lay.proj_out);
    return w;
}

TensorMap AutoencoderWeights::to_tensor_map() const {
    TensorMap map;
    for (std::size_t i = 0; i < layout().slots.size(); ++i) {
        const auto& s = layout().slots[i];
        const auto m = params_[i];
        map.insert({s.name, {s.rows, s.cols}, Dtype::F64, std::vector<double>(m.data(), m.data() + m.size())});
    }
    map.set_source_id("autoencoder");
    return map;
}

AutoencoderWeights AutoencoderWeights::from_tensor_map(const AutoencoderConfig& cfg, const TensorMap& map) {
    AutoencoderWeights w(cfg);
    for (std::size_t i = 0; i < w.layout().slots.size(); ++i) {
        const auto& s = w.layout().slots[i];
        const TensorRecord* r = map.find(s.name);
        if (!r || r->shape != Shape{s.rows, s.cols}) {
            throw Error(ErrorKind::ShapeMismatch, "autoencoder checkpoint lacks a matching '" + s.name + "'");
        }
        std::copy(r->values.begin(), r->values.end(), w.params_[i].data());
    }
    if (map.size() != w.layout().slots.size()) {
        throw Error(ErrorKind::ShapeMismatch, "autoencoder checkpoint has unexpected extra tensors");
    }
    return w;
}

void AutoencoderWeights::save(const std::filesystem::path& path) const {
    write_checkpoint_file(path, to_tensor_map());
    auto side = path;
    side += ".json";
    const std::string text = config_to_json(config_);
    write_file_bytes(side, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

AutoencoderWeights AutoencoderWeights::load(const std::filesystem::path& path) {
    auto side = path;
    side += ".json";
    const auto bytes = read_file_bytes(side);
    const AutoencoderConfig cfg = config_from_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    return from_tensor_map(cfg, read_checkpoint_file(path));
}

// -- building blocks ----------------------------------------------------------

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.79788456080286535588;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

Matrix linear(const Matrix& x, const ParamBuffer& p, const LinearSlots& s) {
    Matrix y = x * p[s.weight];
    y.rowwise() += p[s.bias].row(0);
    return y;
}

/// Accumulates weight/bias gradients and returns dL/dx.
Matrix linear_backward(const Matrix& x, const Matrix& dy, const ParamBuffer& p, const LinearSlots& s, ParamBuffer& g) {
    g[s.weight].noalias() += x.transpose() * dy;
    g[s.bias].row(0) += dy.colwise().sum();
    return dy * p[s.weight].transpose();
}

struct NormCache {
    Matrix xhat;
    Vector inv_std;
};

Matrix layer_norm(const Matrix& x, const ParamBuffer& p, const NormSlots& s, NormCache& cache) {
    const Eigen::Index n = x.rows();
    const auto d = static_cast<double>(x.cols());
    cache.xhat.resize(n, x.cols());
    cache.inv_std.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.row(i).sum() / d;
        const RowVector centered = x.row(i).array() - mean;
        const double var = centered.squaredNorm() / d;
        cache.inv_std(i) = 1.0 / std::sqrt(var + kNormEps);
        cache.xhat.row(i) = centered * cache.inv_std(i);
    }
    Matrix y = cache.xhat.array().rowwise() * p[s.gain].row(0).array();
    y.rowwise() += p[s.bias].row(0);
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const ParamBuffer& p, const NormSlots& s,
                           ParamBuffer& g) {
    g[s.gain].row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    g[s.bias].row(0) += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * p[s.gain].row(0).array();
    const auto d = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double mean_dxhat = dxhat.row(i).sum() / d;
        const double mean_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i)) / d;
        dx.row(i) = cache.inv_std(i) *
                    (dxhat.row(i).array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Matrix apply_gelu(const Matrix& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

struct BlockCache {
    NormCache ln1;
    Matrix h1, q, k, v;
    std::vector<Matrix> probs;
    Matrix attn;
    NormCache ln2;
    Matrix h2, pre_act, act;
};

/// Pre-norm transformer block with full bidirectional attention; keys whose
/// row is entirely padding are excluded from every softmax.
Matrix block_forward(const Matrix& x, const BlockSlots& s, const ParamBuffer& p, std::size_t heads,
                     const std::vector<bool>& key_valid, BlockCache& c) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index dim = x.cols();
    const Eigen::Index hd = dim / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    c.h1 = layer_norm(x, p, s.ln1, c.ln1);
    c.q = linear(c.h1, p, s.query);
    c.k = linear(c.h1, p, s.key);
    c.v = linear(c.h1, p, s.value);
    c.attn.resize(rows, dim);
    c.probs.assign(heads, Matrix());
    for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * hd;
        Matrix scores = c.q.middleCols(off, hd) * c.k.middleCols(off, hd).transpose() * scale;
        Matrix& pr = c.probs[h];
        pr = Matrix::Zero(rows, rows);
        for (Eigen::Index i = 0; i < rows; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < rows; ++j) {
                if (key_valid[static_cast<std::size_t>(j)]) mx = std::max(mx, scores(i, j));
            }
            double sum = 0.0;
            for (Eigen::Index j = 0; j < rows; ++j) {
                if (key_valid[static_cast<std::size_t>(j)]) {
                    pr(i, j) = std::exp(scores(i, j) - mx);
                    sum += pr(i, j);
                }
            }
            pr.row(i) /= sum;
        }
        c.attn.middleCols(off, hd) = pr * c.v.middleCols(off, hd);
    }
    Matrix x2 = x + linear(c.attn, p, s.out);
    c.h2 = layer_norm(x2, p, s.ln2, c.ln2);
    c.pre_act = linear(c.h2, p, s.ff1);
    c.act = apply_gelu(c.pre_act);
    return x2 + linear(c.act, p, s.ff2);
}

Matrix block_backward(const Matrix& dy, const BlockSlots& s, const ParamBuffer& p, std::size_t heads,
                      const BlockCache& c, ParamBuffer& g) {
    const Eigen::Index rows = dy.rows();
    const Eigen::Index dim = dy.cols();
    const Eigen::Index hd = dim / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // Feed-forward branch.
    const Matrix dact = linear_backward(c.act, dy, p, s.ff2, g);
    const Matrix dpre = dact.array() * c.pre_act.unaryExpr([](double v) { return gelu_grad(v); }).array();
    const Matrix dh2 = linear_backward(c.h2, dpre, p, s.ff1, g);
    Matrix dx2 = dy + layer_norm_backward(dh2, c.ln2, p, s.ln2, g);

    // Attention branch.
    const Matrix dattn = linear_backward(c.attn, dx2, p, s.out, g);
    Matrix dq(rows, dim), dk(rows, dim), dv(rows, dim);
    for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * hd;
        const Matrix& pr = c.probs[h];
        const Matrix dO = dattn.middleCols(off, hd);
        const Matrix dP = dO * c.v.middleCols(off, hd).transpose();
        dv.middleCols(off, hd) = pr.transpose() * dO;
        const Vector row_dot = (dP.array() * pr.array()).rowwise().sum();
        const Matrix dS = (pr.array() * (dP.colwise() - row_dot).array()).matrix() * scale;
        dq.middleCols(off, hd) = dS * c.k.middleCols(off, hd);
        dk.middleCols(off, hd) = dS.transpose() * c.q.middleCols(off, hd);
    }
    Matrix dh1 = linear_backward(c.h1, dq, p, s.query, g);
    dh1 += linear_backward(c.h1, dk, p, s.key, g);
    dh1 += linear_backward(c.h1, dv, p, s.value, g);
    return dx2 + layer_norm_backward(dh1, c.ln1, p, s.ln1, g);
}

std::vector<bool> key_mask(const Matrix& mask) {
    std::vector<bool> valid(static_cast<std::size_t>(mask.rows()));
    bool any = false;
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
        valid[static_cast<std::size_t>(i)] = (mask.row(i).array() != 0.0).any();
        any = any || valid[static_cast<std::size_t>(i)];
    }
    if (!any) std::fill(valid.begin(), valid.end(), true);
    return valid;
}

struct PositionRows {
    std::vector<Eigen::Index> n, l, k;
};

PositionRows position_rows(const std::vector<Position>& positions, const AutoencoderConfig& cfg) {
    PositionRows out;
    const auto w = static_cast<std::int64_t>(cfg.window);
    for (const auto& pos : positions) {
        out.n.push_back(static_cast<Eigen::Index>(((pos.n % w) + w) % w));
        out.l.push_back(static_cast<Eigen::Index>(std::clamp<std::int64_t>(pos.l, 0, static_cast<std::int64_t>(cfg.max_layer_index))));
        out.k.push_back(static_cast<Eigen::Index>(std::clamp<std::int64_t>(pos.k, 0, static_cast<std::int64_t>(cfg.max_k_index))));
    }
    return out;
}

struct EncoderCache {
    Matrix tokens;
    PositionRows pos;
    std::vector<bool> keys;
    std::vector<BlockCache> blocks;
    NormCache norm;
};

struct DecoderCache {
    std::vector<BlockCache> blocks;
    NormCache norm;
    Matrix normed;
};

struct ProjectionCache {
    std::vector<Eigen::Index> rows;
    Matrix pooled, pre_act, act;
    Vector raw;
    double length = 0.0;
};

void check_chunk(const TokenChunk& chunk, const AutoencoderConfig& cfg) {
    if (static_cast<std::size_t>(chunk.tokens.cols()) != cfg.d_t ||
        static_cast<std::size_t>(chunk.tokens.rows()) != cfg.window || chunk.mask.rows() != chunk.tokens.rows() ||
        chunk.mask.cols() != chunk.tokens.cols() || chunk.positions.size() != cfg.window) {
        throw Error(ErrorKind::ShapeMismatch, "chunk is " + std::to_string(chunk.tokens.rows()) + "x" +
                                                  std::to_string(chunk.tokens.cols()) + ", model expects " +
                                                  std::to_string(cfg.window) + "x" + std::to_string(cfg.d_t));
    }
}

Matrix encode_forward(const TokenChunk& chunk, const AutoencoderWeights& w, EncoderCache& c) {
    const auto& cfg = w.config();
    const auto& lay = w.layout();
    const auto& p = w.params();
    check_chunk(chunk, cfg);
    c.tokens = chunk.tokens;
    c.pos = position_rows(chunk.positions, cfg);
    c.keys = key_mask(chunk.mask);
    Matrix x = linear(chunk.tokens, p, lay.input);
    const auto pn = p[lay.pos_n];
    const auto pl = p[lay.pos_l];
    const auto pk = p[lay.pos_k];
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        x.row(i) += pn.row(c.pos.n[ui]) + pl.row(c.pos.l[ui]) + pk.row(c.pos.k[ui]);
    }
    c.blocks.resize(lay.encoder.size());
    for (std::size_t b = 0; b < lay.encoder.size(); ++b) {
        x = block_forward(x, lay.encoder[b], p, cfg.num_heads, c.keys, c.blocks[b]);
    }
    return layer_norm(x, p, lay.encoder_norm, c.norm);
}

void encode_backward(const Matrix& dz, const AutoencoderWeights& w, const EncoderCache& c, ParamBuffer& g) {
    const auto& lay = w.layout();
    const auto& p = w.params();
    Matrix dx = layer_norm_backward(dz, c.norm, p, lay.encoder_norm, g);
    for (std::size_t b = lay.encoder.size(); b-- > 0;) {
        dx = block_backward(dx, lay.encoder[b], p, w.config().num_heads, c.blocks[b], g);
    }
    auto gn = g[lay.pos_n];
    auto gl = g[lay.pos_l];
    auto gk = g[lay.pos_k];
    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        gn.row(c.pos.n[ui]) += dx.row(i);
        gl.row(c.pos.l[ui]) += dx.row(i);
        gk.row(c.pos.k[ui]) += dx.row(i);
    }
    linear_backward(c.tokens, dx, p, lay.input, g);
}

Matrix decode_forward(const Matrix& z, const std::vector<bool>& keys, const AutoencoderWeights& w, DecoderCache& c) {
    const auto& lay = w.layout();
    const auto& p = w.params();
    Matrix x = z;
    c.blocks.resize(lay.decoder.size());
    for (std::size_t b = 0; b < lay.decoder.size(); ++b) {
        x = block_forward(x, lay.decoder[b], p, w.config().num_heads, keys, c.blocks[b]);
    }
    c.normed = layer_norm(x, p, lay.decoder_norm, c.norm);
    return linear(c.normed, p, lay.output);
}

Matrix decode_backward(const Matrix& dout, const AutoencoderWeights& w, const DecoderCache& c, ParamBuffer& g) {
    const auto& lay = w.layout();
    const auto& p = w.params();
    const Matrix dnormed = linear_backward(c.normed, dout, p, lay.output, g);
    Matrix dx = layer_norm_backward(dnormed, c.norm, p, lay.decoder_norm, g);
    for (std::size_t b = lay.decoder.size(); b-- > 0;) {
        dx = block_backward(dx, lay.decoder[b], p, w.config().num_heads, c.blocks[b], g);
    }
    return dx;
}

Vector project_forward(const Matrix& z, const Matrix& mask, const AutoencoderWeights& w, ProjectionCache& c) {
    const auto& lay = w.layout();
    const auto& p = w.params();
    c.rows = real_rows(mask);
    if (c.rows.empty()) throw Error(ErrorKind::AllMasked, "every row of the chunk is padding");
    c.pooled = Matrix::Zero(1, z.cols());
    for (Eigen::Index r : c.rows) c.pooled += z.row(r);
    c.pooled /= static_cast<double>(c.rows.size());
    c.pre_act = linear(c.pooled, p, lay.proj_hidden);
    c.act = apply_gelu(c.pre_act);
    c.raw = linear(c.act, p, lay.proj_out).row(0).transpose();
    c.length = c.raw.norm();
    if (!(c.length > 0.0)) throw Error(ErrorKind::NonFiniteGradient, "projection has zero length");
    return c.raw / c.length;
}

/// Returns dL/dZ given dL/d(normalized projection).
Matrix project_backward(const Vector& dout, Eigen::Index rows, const AutoencoderWeights& w, const ProjectionCache& c,
                        ParamBuffer& g) {
    const auto& lay = w.layout();
    const auto& p = w.params();
    const Vector unit = c.raw / c.length;
    const Vector draw = (dout - unit * unit.dot(dout)) / c.length;
    const Matrix dact = linear_backward(c.act, draw.transpose(), p, lay.proj_out, g);
    const Matrix dpre = dact.array() * c.pre_act.unaryExpr([](double v) { return gelu_grad(v); }).array();
    const Matrix dpooled = linear_backward(c.pooled, dpre, p, lay.proj_hidden, g);
    Matrix dz = Matrix::Zero(rows, dpooled.cols());
    const double inv = 1.0 / static_cast<double>(c.rows.size());
    for (Eigen::Index r : c.rows) dz.row(r) = dpooled.row(0) * inv;
    return dz;
}

std::size_t unmasked_count(const Matrix& mask) {
    return static_cast<std::size_t>((mask.array() != 0.0).count());
}

/// NT-Xent over embeddings ordered [view_i(0..B-1), view_j(0..B-1)].
/// Writes dL/de for each embedding when grads is non-null.
double ntxent_with_grad(const std::vector<Vector>& emb, double temperature, std::vector<Vector>* grads) {
    const std::size_t n = emb.size();
    const std::size_t b = n / 2;
    Matrix sim(n, n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t k = 0; k < n; ++k) sim(a, k) = emb[a].dot(emb[k]) / temperature;
    }
    double loss = 0.0;
    Matrix dsim = Matrix::Zero(n, n);
    for (std::size_t a = 0; a < n; ++a) {
        const std::size_t pos = a < b ? a + b : a - b;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            if (k != a) mx = std::max(mx, sim(a, k));
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k != a) sum += std::exp(sim(a, k) - mx);
        }
        loss += (mx + std::log(sum)) - sim(a, pos);
        for (std::size_t k = 0; k < n; ++k) {
            if (k != a) dsim(a, k) = std::exp(sim(a, k) - mx) / sum;
        }
        dsim(a, pos) -= 1.0;
    }
    loss /= static_cast<double>(n);
    if (grads) {
        dsim /= static_cast<double>(n) * temperature;
        grads->assign(n, Vector::Zero(emb[0].size()));
        for (std::size_t a = 0; a < n; ++a) {
            for (std::size_t k = 0; k < n; ++k) {
                if (k == a) continue;
                (*grads)[a] += dsim(a, k) * emb[k];
                (*grads)[k] += dsim(a, k) * emb[a];
            }
        }
    }
    return loss;
}

struct PairCaches {
    EncoderCache clean_enc;
    DecoderCache dec;
    Matrix reconstruction;
    ProjectionCache clean_proj;
    EncoderCache noised_enc;
    ProjectionCache noised_proj;
};

/// Shared forward/backward driver. Term weights of exactly zero skip the term.
LossGradient run_objective(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double rec_weight,
                           double con_weight, double temperature, bool want_grad) {
    if (batch.empty()) throw Error(ErrorKind::EmptyDataset, "empty batch");
    const bool use_rec = rec_weight != 0.0;
    const bool use_con = con_weight != 0.0;
    if (use_con && batch.size() < 2) throw Error(ErrorKind::SinglePair, "contrastive loss needs at least two pairs");
    if (use_con && !(temperature > 0.0)) throw Error(ErrorKind::InvalidArgument, "temperature must be positive");

    const std::size_t bsz = batch.size();
    std::vector<PairCaches> caches(bsz);
    std::vector<Matrix> latents_clean(bsz), latents_noised(bsz);
    LossGradient out;

    std::vector<Matrix> drec(bsz);
    for (std::size_t i = 0; i < bsz; ++i) {
        const ChunkPair& pr = batch[i];
        latents_clean[i] = encode_forward(pr.clean, w, caches[i].clean_enc);
        if (use_rec) {
            caches[i].reconstruction = decode_forward(latents_clean[i], caches[i].clean_enc.keys, w, caches[i].dec);
            const double l = recon_loss(pr.clean.tokens, caches[i].reconstruction, pr.clean.mask, pr.norm);
            out.recon += l;
            const double coeff = -2.0 / (pr.norm * static_cast<double>(unmasked_count(pr.clean.mask)));
            drec[i] = (coeff * rec_weight / static_cast<double>(bsz)) *
                      (pr.clean.mask.array() * (pr.clean.tokens - caches[i].reconstruction).array()).matrix();
        }
    }
    if (use_rec) out.recon /= static_cast<double>(bsz);

    std::vector<Vector> demb;
    if (use_con) {
        std::vector<Vector> emb(2 * bsz);
        for (std::size_t i = 0; i < bsz; ++i) {
            emb[i] = project_forward(latents_clean[i], batch[i].clean.mask, w, caches[i].clean_proj);
            latents_noised[i] = encode_forward(batch[i].noised, w, caches[i].noised_enc);
            emb[bsz + i] = project_forward(latents_noised[i], batch[i].noised.mask, w, caches[i].noised_proj);
        }
        out.contrastive = ntxent_with_grad(emb, temperature, want_grad ? &demb : nullptr);
    }
    out.loss = (use_rec ? rec_weight * out.recon : 0.0) + (use_con ? con_weight * out.contrastive : 0.0);
    if (!std::isfinite(out.loss)) throw Error(ErrorKind::DivergedLoss, "objective is not finite");
    if (!want_grad) return out;

    out.grad = w.zeros_like();
    for (std::size_t i = 0; i < bsz; ++i) {
        const Eigen::Index rows = latents_clean[i].rows();
        Matrix dz = Matrix::Zero(rows, latents_clean[i].cols());
        if (use_rec) dz += decode_backward(drec[i], w, caches[i].dec, out.grad);
        if (use_con) dz += project_backward(con_weight * demb[i], rows, w, caches[i].clean_proj, out.grad);
        encode_backward(dz, w, caches[i].clean_enc, out.grad);
        if (use_con) {
            const Matrix dzn = project_backward(con_weight * demb[bsz + i], rows, w, caches[i].noised_proj, out.grad);
            encode_backward(dzn, w, caches[i].noised_enc, out.grad);
        }
    }
    for (double v : out.grad.flat()) {
        if (!std::isfinite(v)) throw Error(ErrorKind::NonFiniteGradient, "gradient contains non-finite entries");
    }
    return out;
}

void check_gamma(double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorKind::InvalidArgument, "gamma must lie in [0, 1]");
}

}  // namespace

// -- public operations --------------------------------------------------------

std::vector<Eigen::Index> real_rows(const Matrix& mask) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
        if ((mask.row(i).array() != 0.0).any()) rows.push_back(i);
    }
    return rows;
}

LatentSequence encode(const TokenChunk& chunk, const AutoencoderWeights& w) {
    EncoderCache cache;
    return {encode_forward(chunk, w, cache), chunk.positions, chunk.mask};
}

Matrix decode(const LatentSequence& z, const AutoencoderWeights& w) {
    if (static_cast<std::size_t>(z.latents.cols()) != w.config().latent_dim || z.mask.rows() != z.latents.rows()) {
        throw Error(ErrorKind::ShapeMismatch, "latent sequence does not match the model");
    }
    DecoderCache cache;
    return decode_forward(z.latents, key_mask(z.mask), w, cache);
}

Vector project(const LatentSequence& z, const AutoencoderWeights& w) {
    if (static_cast<std::size_t>(z.latents.cols()) != w.config().latent_dim) {
        throw Error(ErrorKind::ShapeMismatch, "latent sequence does not match the model");
    }
    ProjectionCache cache;
    return project_forward(z.latents, z.mask, w, cache);
}

Matrix autoencode(const TokenChunk& chunk, const AutoencoderWeights& w) {
    return decode(encode(chunk, w), w);
}

double recon_loss(const Matrix& tokens, const Matrix& reconstruction, const Matrix& mask, double norm) {
    if (tokens.rows() != reconstruction.rows() || tokens.cols() != reconstruction.cols() ||
        tokens.rows() != mask.rows() || tokens.cols() != mask.cols()) {
        throw Error(ErrorKind::ShapeMismatch, "token, reconstruction and mask shapes differ");
    }
    if (!(norm > 0.0)) throw Error(ErrorKind::InvalidArgument, "norm must be positive");
    const std::size_t count = unmasked_count(mask);
    if (count == 0) throw Error(ErrorKind::EmptyMask, "no unmasked entries");
    const double sum = (mask.array() * (tokens - reconstruction).array()).square().sum();
    return sum / (norm * static_cast<double>(count));
}

double ntxent_loss(std::span<const EmbeddingPair> pairs, double temperature) {
    if (pairs.size() < 2) throw Error(ErrorKind::SinglePair, "NT-Xent needs at least two pairs");
    if (!(temperature > 0.0)) throw Error(ErrorKind::InvalidArgument, "temperature must be positive");
    std::vector<Vector> emb(2 * pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        emb[i] = pairs[i].first;
        emb[pairs.size() + i] = pairs[i].second;
    }
    return ntxent_with_grad(emb, temperature, nullptr);
}

double total_loss(double l_rec, double l_c, double gamma) {
    check_gamma(gamma);
    return (1.0 - gamma) * l_rec + gamma * l_c;
}

LossGradient backward(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double gamma, double temperature) {
    check_gamma(gamma);
    return run_objective(batch, w, 1.0 - gamma, gamma, temperature, true);
}

LossGradient reconstruction_gradient(std::span<const ChunkPair> batch, const AutoencoderWeights& w) {
    return run_objective(batch, w, 1.0, 0.0, 1.0, true);
}

LossGradient contrastive_gradient(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double temperature) {
    return run_objective(batch, w, 0.0, 1.0, temperature, true);
}

LossGradient evaluate_loss(std::span<const ChunkPair> batch, const AutoencoderWeights& w, double gamma,
                           double temperature) {
    check_gamma(gamma);
    return run_objective(batch, w, 1.0 - gamma, gamma, temperature, false);
}

}  // namespace wf
