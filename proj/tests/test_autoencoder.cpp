#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "support.hpp"
#include "wf/autoencoder.hpp"
#include "wf/error.hpp"

using namespace wf;

namespace {

// Straight-line re-implementation of the autoencoder forward pass. It reads
// parameters by name from the exported TensorMap and uses plain loops.
using Mat = std::vector<std::vector<double>>;

struct Oracle {
    TensorMap params;
    AutoencoderConfig cfg;

    const TensorRecord& rec(const std::string& name) const {
        const TensorRecord* r = params.find(name);
        REQUIRE(r != nullptr);
        return *r;
    }

    Mat linear(const Mat& x, const std::string& prefix) const {
        const auto& w = rec(prefix + ".weight");
        const auto& b = rec(prefix + ".bias");
        const std::size_t in = w.shape[0], out = w.shape[1];
        Mat y(x.size(), std::vector<double>(out));
        for (std::size_t i = 0; i < x.size(); ++i) {
            for (std::size_t o = 0; o < out; ++o) {
                double s = b.values[o];
                for (std::size_t k = 0; k < in; ++k) s += x[i][k] * w.values[k * out + o];
                y[i][o] = s;
            }
        }
        return y;
    }

    Mat norm(const Mat& x, const std::string& prefix) const {
        const auto& g = rec(prefix + ".gain");
        const auto& b = rec(prefix + ".bias");
        Mat y = x;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double n = static_cast<double>(x[i].size());
            double mean = 0.0;
            for (double v : x[i]) mean += v;
            mean /= n;
            double var = 0.0;
            for (double v : x[i]) var += (v - mean) * (v - mean);
            var /= n;
            for (std::size_t j = 0; j < x[i].size(); ++j) {
                y[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * g.values[j] + b.values[j];
            }
        }
        return y;
    }

    static double gelu(double x) {
        return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    }

    Mat block(const Mat& x, const std::string& p, const std::vector<bool>& valid) const {
        const Mat h = norm(x, p + ".ln1");
        const Mat q = linear(h, p + ".attn.query");
        const Mat k = linear(h, p + ".attn.key");
        const Mat v = linear(h, p + ".attn.value");
        const std::size_t rows = x.size(), dim = x[0].size(), hd = dim / cfg.num_heads;
        Mat attn(rows, std::vector<double>(dim, 0.0));
        for (std::size_t head = 0; head < cfg.num_heads; ++head) {
            for (std::size_t i = 0; i < rows; ++i) {
                std::vector<double> s(rows, 0.0);
                double mx = -1e300;
                for (std::size_t j = 0; j < rows; ++j) {
                    if (!valid[j]) continue;
                    for (std::size_t c = head * hd; c < (head + 1) * hd; ++c) s[j] += q[i][c] * k[j][c];
                    s[j] /= std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < rows; ++j) {
                    s[j] = valid[j] ? std::exp(s[j] - mx) : 0.0;
                    z += s[j];
                }
                for (std::size_t j = 0; j < rows; ++j) {
                    for (std::size_t c = head * hd; c < (head + 1) * hd; ++c) attn[i][c] += s[j] / z * v[j][c];
                }
            }
        }
        Mat x2 = x;
        const Mat o = linear(attn, p + ".attn.out");
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < dim; ++c) x2[i][c] += o[i][c];
        }
        Mat f = linear(norm(x2, p + ".ln2"), p + ".mlp.fc1");
        for (auto& row : f) {
            for (auto& e : row) e = gelu(e);
        }
        const Mat f2 = linear(f, p + ".mlp.fc2");
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < dim; ++c) x2[i][c] += f2[i][c];
        }
        return x2;
    }

    static std::vector<bool> valid_rows(const Matrix& mask) {
        std::vector<bool> v(static_cast<std::size_t>(mask.rows()));
        bool any = false;
        for (Eigen::Index i = 0; i < mask.rows(); ++i) {
            for (Eigen::Index j = 0; j < mask.cols(); ++j) v[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(i)] || mask(i, j) != 0.0;
            any = any || v[static_cast<std::size_t>(i)];
        }
        if (!any) v.assign(v.size(), true);
        return v;
    }

    Mat encode(const TokenChunk& c) const {
        Mat t(static_cast<std::size_t>(c.tokens.rows()), std::vector<double>(static_cast<std::size_t>(c.tokens.cols())));
        for (std::size_t i = 0; i < t.size(); ++i) {
            for (std::size_t j = 0; j < t[i].size(); ++j) t[i][j] = c.tokens(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
        Mat x = linear(t, "encoder.input");
        const auto& pn = rec("encoder.pos_n");
        const auto& pl = rec("encoder.pos_l");
        const auto& pk = rec("encoder.pos_k");
        const std::size_t d = cfg.latent_dim;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const auto w = static_cast<std::int64_t>(cfg.window);
            const auto n = static_cast<std::size_t>(((c.positions[i].n % w) + w) % w);
            const auto l = static_cast<std::size_t>(std::min<std::int64_t>(std::max<std::int64_t>(c.positions[i].l, 0), static_cast<std::int64_t>(cfg.max_layer_index)));
            const auto k = static_cast<std::size_t>(std::min<std::int64_t>(std::max<std::int64_t>(c.positions[i].k, 0), static_cast<std::int64_t>(cfg.max_k_index)));
            for (std::size_t j = 0; j < d; ++j) x[i][j] += pn.values[n * d + j] + pl.values[l * d + j] + pk.values[k * d + j];
        }
        const auto valid = valid_rows(c.mask);
        for (std::size_t b = 0; b < cfg.num_layers_enc; ++b) x = block(x, "encoder.blocks." + std::to_string(b), valid);
        return norm(x, "encoder.norm");
    }

    Mat decode(Mat z, const Matrix& mask) const {
        const auto valid = valid_rows(mask);
        for (std::size_t b = 0; b < cfg.num_layers_dec; ++b) z = block(z, "decoder.blocks." + std::to_string(b), valid);
        return linear(norm(z, "decoder.norm"), "decoder.output");
    }

    std::vector<double> project(const Mat& z, const Matrix& mask) const {
        const auto valid = valid_rows(mask);
        Mat pooled(1, std::vector<double>(z[0].size(), 0.0));
        double count = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (!valid[i]) continue;
            count += 1.0;
            for (std::size_t j = 0; j < z[i].size(); ++j) pooled[0][j] += z[i][j];
        }
        for (auto& v : pooled[0]) v /= count;
        Mat h = linear(pooled, "projection.fc1");
        for (auto& v : h[0]) v = gelu(v);
        std::vector<double> out = linear(h, "projection.fc2")[0];
        double len = 0.0;
        for (double v : out) len += v * v;
        len = std::sqrt(len);
        for (auto& v : out) v /= len;
        return out;
    }
};

Mat to_mat(const Matrix& m) {
    Mat out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    return out;
}

double max_abs_diff(const Matrix& a, const Mat& b) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            worst = std::max(worst, std::abs(a(i, j) - b[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
        }
    }
    return worst;
}

std::vector<ChunkPair> random_batch(const AutoencoderConfig& cfg, std::mt19937_64& rng, std::size_t n) {
    std::vector<ChunkPair> batch;
    for (std::size_t i = 0; i < n; ++i) {
        TokenChunk clean = test::random_chunk(cfg, rng, i % 2);
        TokenChunk noised = noise_view(clean, 0.3, rng());
        batch.push_back({clean, noised, 0.5 + static_cast<double>(i)});
    }
    return batch;
}

}  // namespace

TEST_CASE("forward pass matches the straight-line oracle") {
    std::mt19937_64 rng(17);
    for (std::size_t heads : {1u, 2u}) {
        AutoencoderConfig cfg = test::tiny_config();
        cfg.num_heads = heads;
        cfg.num_layers_enc = heads;
        const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 40 + heads);
        AutoencoderWeights noisy = w;
        std::normal_distribution<double> normal(0.0, 0.1);
        for (auto& v : noisy.params().flat()) v += normal(rng);
        const Oracle oracle{noisy.to_tensor_map(), cfg};
        for (std::size_t pad : {0u, 2u}) {
            const TokenChunk chunk = test::random_chunk(cfg, rng, pad);
            const LatentSequence z = encode(chunk, noisy);
            const Mat zo = oracle.encode(chunk);
            CHECK(max_abs_diff(z.latents, zo) <= 1e-12);
            CHECK(max_abs_diff(decode(z, noisy), oracle.decode(zo, chunk.mask)) <= 1e-12);
            const Vector p = project(z, noisy);
            const auto po = oracle.project(zo, chunk.mask);
            for (std::size_t i = 0; i < po.size(); ++i) CHECK(std::abs(p(static_cast<Eigen::Index>(i)) - po[i]) <= 1e-12);
        }
    }
}

TEST_CASE("encode is deterministic and permutation equivariant") {
    const AutoencoderConfig cfg = test::tiny_config();
    std::mt19937_64 rng(2);
    const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 9);
    const TokenChunk chunk = test::random_chunk(cfg, rng, 1);
    CHECK(encode(chunk, w).latents == encode(chunk, w).latents);

    TokenChunk swapped = chunk;
    swapped.tokens.row(0).swap(swapped.tokens.row(2));
    swapped.mask.row(0).swap(swapped.mask.row(2));
    std::swap(swapped.positions[0], swapped.positions[2]);
    const Matrix a = encode(chunk, w).latents;
    Matrix b = encode(swapped, w).latents;
    b.row(0).swap(b.row(2));
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("shape errors") {
    const AutoencoderConfig cfg = test::tiny_config();
    std::mt19937_64 rng(1);
    const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 1);
    TokenChunk c = test::random_chunk(cfg, rng);
    c.tokens.conservativeResize(Eigen::NoChange, 3);
    c.mask.conservativeResize(Eigen::NoChange, 3);
    try {
        encode(c, w);
        FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ShapeMismatch);
    }
}

TEST_CASE("decode of zero latents with zero weights is zero") {
    const AutoencoderConfig cfg = test::tiny_config();
    AutoencoderWeights w(cfg);
    LatentSequence z{Matrix::Zero(5, 8), std::vector<Position>(5), Matrix::Ones(5, 4)};
    const Matrix out = decode(z, w);
    CHECK(out.isZero(0.0));
    CHECK(decode(z, w) == out);
}

TEST_CASE("projection") {
    const AutoencoderConfig cfg = test::tiny_config();
    std::mt19937_64 rng(5);
    const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 3);
    for (int i = 0; i < 20; ++i) {
        const LatentSequence z = encode(test::random_chunk(cfg, rng, i % 3), w);
        CHECK(std::abs(project(z, w).norm() - 1.0) <= 1e-12);
    }
    SUBCASE("single real token equals that token alone") {
        LatentSequence z = encode(test::random_chunk(cfg, rng, 0), w);
        z.mask.setZero();
        z.mask(3, 1) = 1.0;
        LatentSequence alone{z.latents.row(3), {z.positions[3]}, z.mask.row(3)};
        CHECK((project(z, w) - project(alone, w)).cwiseAbs().maxCoeff() <= 1e-15);
    }
    SUBCASE("scaling latents moves the projection only through the nonlinearity") {
        const LatentSequence z = encode(test::random_chunk(cfg, rng, 1), w);
        LatentSequence doubled = z;
        doubled.latents *= 2.0;
        const Oracle oracle{w.to_tensor_map(), cfg};
        const auto po = oracle.project(to_mat(doubled.latents), doubled.mask);
        const Vector p = project(doubled, w);
        for (std::size_t i = 0; i < po.size(); ++i) CHECK(std::abs(p(static_cast<Eigen::Index>(i)) - po[i]) <= 1e-12);
        CHECK((p - project(z, w)).norm() > 1e-6);
    }
    SUBCASE("all padding") {
        LatentSequence z = encode(test::random_chunk(cfg, rng, 0), w);
        z.mask.setZero();
        try {
            project(z, w);
            FAIL("expected AllMasked");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::AllMasked);
        }
    }
}

TEST_CASE("reconstruction loss") {
    Matrix t(1, 2), th(1, 2), m(1, 2);
    t << 1, 0;
    th << 0, 0;
    m << 1, 1;
    CHECK(recon_loss(t, th, m, 1.0) == 0.5);
    CHECK(recon_loss(t, t, m, 1.0) == 0.0);
    CHECK(recon_loss(t, th, m, 2.0) == 0.25);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int c = 0; c < 120; ++c) {
        const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng() % 8), cols = 1 + static_cast<Eigen::Index>(rng() % 6);
        Matrix a(rows, cols), b(rows, cols), mask(rows, cols);
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            a.data()[i] = normal(rng);
            b.data()[i] = normal(rng);
            mask.data()[i] = (rng() % 4) ? 1.0 : 0.0;
        }
        mask(0, 0) = 1.0;
        const double norm = 0.1 + std::abs(normal(rng));
        CHECK(std::abs(recon_loss(a, b, mask, norm) - test::recon_oracle(a, b, mask, norm)) <= 1e-10);

        Matrix corrupted = b;
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            if (mask.data()[i] == 0.0) corrupted.data()[i] = 99.0;
        }
        CHECK(recon_loss(a, corrupted, mask, norm) == recon_loss(a, b, mask, norm));
    }
    try {
        recon_loss(t, th, Matrix::Zero(1, 2), 1.0);
        FAIL("expected EmptyMask");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::EmptyMask);
    }
    CHECK_THROWS_AS(recon_loss(t, Matrix::Zero(2, 2), m, 1.0), Error);
}

TEST_CASE("NT-Xent") {
    SUBCASE("orthogonal negatives, identical positives") {
        Vector e1 = Vector::Zero(4), e2 = Vector::Zero(4);
        e1(0) = 1.0;
        e2(1) = 1.0;
        const std::vector<EmbeddingPair> pairs = {{e1, e1}, {e2, e2}};
        const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
        CHECK(std::abs(ntxent_loss(pairs, 1.0) - expected) <= 1e-12);
    }
    SUBCASE("random cases against brute force") {
        std::mt19937_64 rng(99);
        for (int c = 0; c < 150; ++c) {
            const std::size_t b = 2 + rng() % 7;
            const auto d = static_cast<Eigen::Index>(2 + rng() % 10);
            std::vector<EmbeddingPair> pairs;
            for (std::size_t i = 0; i < b; ++i) pairs.emplace_back(test::unit_vector(rng, d), test::unit_vector(rng, d));
            const double tau = 0.05 + 0.01 * static_cast<double>(rng() % 100);
            CHECK(std::abs(ntxent_loss(pairs, tau) - test::ntxent_oracle(pairs, tau)) <= 1e-10);

            std::vector<EmbeddingPair> swapped;
            for (const auto& p : pairs) swapped.emplace_back(p.second, p.first);
            CHECK(std::abs(ntxent_loss(swapped, tau) - ntxent_loss(pairs, tau)) <= 1e-12);
        }
    }
    SUBCASE("large temperature approaches log(2B - 1)") {
        std::mt19937_64 rng(4);
        for (std::size_t b : {2u, 5u, 8u}) {
            std::vector<EmbeddingPair> pairs;
            for (std::size_t i = 0; i < b; ++i) pairs.emplace_back(test::unit_vector(rng, 6), test::unit_vector(rng, 6));
            CHECK(std::abs(ntxent_loss(pairs, 1e9) - std::log(2.0 * static_cast<double>(b) - 1.0)) <= 1e-8);
        }
    }
    SUBCASE("a single pair has no negatives") {
        const std::vector<EmbeddingPair> one = {{Vector::Ones(3) / std::sqrt(3.0), Vector::Ones(3) / std::sqrt(3.0)}};
        try {
            ntxent_loss(one, 0.1);
            FAIL("expected SinglePair");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::SinglePair);
        }
    }
}

TEST_CASE("total loss is the convex combination") {
    CHECK(total_loss(2.0, 4.0, 0.0) == 2.0);
    CHECK(total_loss(2.0, 4.0, 1.0) == 4.0);
    CHECK(total_loss(2.0, 4.0, 0.25) == 2.5);
    CHECK_THROWS_AS(total_loss(1.0, 1.0, 1.5), Error);
}

TEST_CASE("analytic gradient matches central differences") {
    const AutoencoderConfig cfg = test::tiny_config();
    std::mt19937_64 rng(12);
    AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 77);
    std::normal_distribution<double> normal(0.0, 0.05);
    for (auto& v : w.params().flat()) v += normal(rng);
    const auto batch = random_batch(cfg, rng, 3);
    for (double gamma : {0.0, 0.5, 1.0}) {
        const LossGradient g = backward(batch, w, gamma, 0.5);
        const double h = 1e-5;
        double worst = 0.0;
        std::size_t worst_index = 0;
        auto flat = w.params().flat();
        for (std::size_t i = 0; i < flat.size(); ++i) {
            const double keep = flat[i];
            flat[i] = keep + h;
            const double up = evaluate_loss(batch, w, gamma, 0.5).loss;
            flat[i] = keep - h;
            const double down = evaluate_loss(batch, w, gamma, 0.5).loss;
            flat[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = g.grad.flat()[i];
            const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            const double rel = std::abs(numeric - analytic) / scale;
            if (rel > worst) {
                worst = rel;
                worst_index = i;
            }
        }
        INFO("gamma " << gamma << " worst parameter " << worst_index);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("gradient of the mixed objective is the mix of gradients") {
    const AutoencoderConfig cfg = test::tiny_config();
    std::mt19937_64 rng(31);
    const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 5);
    const auto batch = random_batch(cfg, rng, 4);
    const LossGradient rec = reconstruction_gradient(batch, w);
    const LossGradient con = contrastive_gradient(batch, w, 0.1);
    const LossGradient mix = backward(batch, w, 0.3, 0.1);
    for (std::size_t i = 0; i < rec.grad.size(); ++i) {
        CHECK(std::abs(mix.grad.flat()[i] - (0.7 * rec.grad.flat()[i] + 0.3 * con.grad.flat()[i])) <= 1e-12);
    }
    CHECK(mix.loss == doctest::Approx(total_loss(rec.loss, con.loss, 0.3)).epsilon(1e-14));

    const LossGradient g0 = backward(batch, w, 0.0, 0.1);
    const LossGradient g1 = backward(batch, w, 1.0, 0.1);
    CHECK(std::equal(g0.grad.flat().begin(), g0.grad.flat().end(), rec.grad.flat().begin()));
    CHECK(std::equal(g1.grad.flat().begin(), g1.grad.flat().end(), con.grad.flat().begin()));
    CHECK(g0.loss == rec.loss);
    CHECK(g1.loss == con.loss);
}

TEST_CASE("frozen parameters outside the objective get zero gradient") {
    const AutoencoderConfig cfg = test::tiny_config();
    std::mt19937_64 rng(8);
    const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 2);
    const LossGradient g = reconstruction_gradient(random_batch(cfg, rng, 2), w);
    const auto& lay = w.layout();
    CHECK(g.grad[lay.proj_hidden.weight].isZero(0.0));
    CHECK(g.grad[lay.proj_out.bias].isZero(0.0));
    CHECK(g.grad[lay.pos_l].row(static_cast<Eigen::Index>(cfg.max_layer_index)).isZero(0.0));
}

TEST_CASE("weights persist with their config") {
    test::TempDir dir("ae");
    const AutoencoderConfig cfg = test::tiny_config();
    const AutoencoderWeights w = AutoencoderWeights::initialize(cfg, 4);
    w.save(dir / "ae.safetensors");
    const AutoencoderWeights back = AutoencoderWeights::load(dir / "ae.safetensors");
    CHECK(back.config() == cfg);
    CHECK(std::equal(back.params().flat().begin(), back.params().flat().end(), w.params().flat().begin()));
    CHECK(config_from_json(config_to_json(cfg)) == cfg);
    CHECK_THROWS_AS(config_from_json("{\"d_t\": 4}"), Error);
}
