#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "wf/error.hpp"
#include "wf/tokenizer.hpp"

using namespace wf;

namespace {

TensorMap single_layer(const Shape& shape, Dtype dtype = Dtype::F64) {
    TensorMap m;
    std::vector<double> v(numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i + 1);
    m.insert({"layer", shape, dtype, v});
    m.set_source_id("single");
    return m;
}

double mask_sum(const Matrix& m) { return m.sum(); }

}  // namespace

TEST_CASE("matrix shapes per rank") {
    CHECK(matrix_shape({}) == std::pair<std::size_t, std::size_t>{1, 1});
    CHECK(matrix_shape({4}) == std::pair<std::size_t, std::size_t>{1, 4});
    CHECK(matrix_shape({2, 3}) == std::pair<std::size_t, std::size_t>{2, 3});
    CHECK(matrix_shape({2, 3, 5}) == std::pair<std::size_t, std::size_t>{2, 15});
    CHECK(matrix_shape({8, 3, 7, 7}) == std::pair<std::size_t, std::size_t>{8, 147});
    try {
        matrix_shape({1, 1, 1, 1, 1});
        FAIL("rank 5 accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::RankUnsupported);
    }
}

TEST_CASE("layer_to_matrix follows row-major order") {
    const Matrix v = layer_to_matrix({"v", {4}, Dtype::F64, {1, 2, 3, 4}});
    CHECK(v.rows() == 1);
    CHECK(v(0, 3) == 4);
    const Matrix conv = layer_to_matrix({"c", {2, 3, 1, 1}, Dtype::F64, {1, 2, 3, 4, 5, 6}});
    REQUIRE(conv.rows() == 2);
    REQUIRE(conv.cols() == 3);
    CHECK(conv(0, 0) == 1);
    CHECK(conv(0, 2) == 3);
    CHECK(conv(1, 0) == 4);
    const Matrix id = layer_to_matrix({"i", {2, 2}, Dtype::F64, {1, 0, 0, 1}});
    CHECK(id == Matrix::Identity(2, 2));
}

TEST_CASE("a [2,6] layer at d_t=4 splits into four tokens") {
    const TokenSequence seq = tokenize_model(single_layer({2, 6}), 4);
    REQUIRE(seq.size() == 4);
    CHECK(seq.tokens.cols() == 4);
    CHECK(seq.mask.row(0) == RowVector::Ones(4));
    RowVector half(4);
    half << 1, 1, 0, 0;
    CHECK(seq.mask.row(1) == half);
    CHECK(seq.tokens(1, 0) == 5);
    CHECK(seq.tokens(1, 1) == 6);
    CHECK(seq.tokens(1, 2) == 0);
    CHECK(seq.positions == std::vector<Position>{{0, 0, 0}, {1, 0, 1}, {2, 0, 2}, {3, 0, 3}});
    REQUIRE(seq.layout.size() == 1);
    CHECK(seq.layout[0].tokens_per_row == 2);
    CHECK(seq.layout[0].matrix_rows == 2);
    CHECK(bitwise_equal(detokenize(seq), single_layer({2, 6})));
}

TEST_CASE("one row of 230 values is a single full token at d_t=230") {
    const TokenSequence seq = tokenize_model(single_layer({1, 230}), 230);
    CHECK(seq.size() == 1);
    CHECK(mask_sum(seq.mask) == 230);
}

TEST_CASE("second layer starts a new layer index") {
    TensorMap m;
    m.insert({"a", {3}, Dtype::F32, {1, 2, 3}});
    m.insert({"b", {2}, Dtype::F32, {4, 5}});
    const TokenSequence seq = tokenize_model(m, 4);
    REQUIRE(seq.size() == 2);
    CHECK(seq.positions[1] == Position{1, 1, 0});
    CHECK(seq.layout[1].first_token_index == 1);
}

TEST_CASE("padding contents never reach the detokenized weights") {
    const TensorMap m = single_layer({3, 5}, Dtype::F32);
    TokenSequence seq = tokenize_model(m, 4);
    for (Eigen::Index i = 0; i < seq.tokens.rows(); ++i) {
        for (Eigen::Index j = 0; j < seq.tokens.cols(); ++j) {
            if (seq.mask(i, j) == 0.0) seq.tokens(i, j) = 1e6 + static_cast<double>(i);
        }
    }
    CHECK(bitwise_equal(detokenize(seq), m));
}

TEST_CASE("detokenize rejects a sequence that disagrees with its layout") {
    TokenSequence seq = tokenize_model(single_layer({2, 6}), 4);
    seq.tokens.conservativeResize(3, Eigen::NoChange);
    seq.mask.conservativeResize(3, Eigen::NoChange);
    seq.positions.pop_back();
    try {
        detokenize(seq);
        FAIL("expected LayoutMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::LayoutMismatch);
    }
}

TEST_CASE("random architectures round-trip exactly for every d_t") {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<std::size_t> dt(1, 64);
    for (int i = 0; i < 100; ++i) {
        const TensorMap m = test::random_map(rng);
        const std::size_t d = dt(rng);
        const TokenSequence seq = tokenize_model(m, d);
        REQUIRE(bitwise_equal(detokenize(seq), m));

        std::size_t params = 0;
        for (const auto& r : m.records()) params += r.values.size() == 0 ? 0 : r.values.size();
        CHECK(static_cast<std::size_t>(mask_sum(seq.mask)) == params);
        for (Eigen::Index r = 0; r < seq.tokens.rows(); ++r) {
            for (Eigen::Index c = 0; c < seq.tokens.cols(); ++c) {
                if (seq.mask(r, c) == 0.0) REQUIRE(seq.tokens(r, c) == 0.0);
            }
        }
        std::set<std::pair<std::int64_t, std::int64_t>> lk;
        for (std::size_t n = 0; n < seq.positions.size(); ++n) {
            CHECK(seq.positions[n].n == static_cast<std::int64_t>(n));
            lk.insert({seq.positions[n].l, seq.positions[n].k});
        }
        CHECK(lk.size() == seq.positions.size());
    }
}

TEST_CASE("chunking pads only the tail and reassembles") {
    TensorMap m;
    m.insert({"w", {10, 3}, Dtype::F64, std::vector<double>(30, 2.0)});
    const TokenSequence seq = tokenize_model(m, 4);
    REQUIRE(seq.size() == 10);
    const auto chunks = chunk_sequence(seq, 4);
    REQUIRE(chunks.size() == 3);
    CHECK(chunks[0].pad_rows == 0);
    CHECK(chunks[1].pad_rows == 0);
    CHECK(chunks[2].pad_rows == 2);
    CHECK(chunks[2].mask.bottomRows(2).isZero());
    CHECK(chunks[2].positions[1] == seq.positions[9]);
    for (const auto& c : chunks) CHECK(c.window() == 4);

    const TokenSequence back = assemble_chunks(chunks, seq);
    CHECK(back.tokens == seq.tokens);
    CHECK(back.mask == seq.mask);
    CHECK(back.positions == seq.positions);

    CHECK(chunk_sequence(seq, 64).size() == 1);
    CHECK(chunk_sequence(seq, 10).front().pad_rows == 0);
}

TEST_CASE("chunking conserves mask mass and positions") {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 30; ++i) {
        const TokenSequence seq = tokenize_model(test::random_map(rng), 1 + rng() % 9);
        const auto chunks = chunk_sequence(seq, 1 + rng() % 7);
        double mass = 0.0;
        std::multiset<std::tuple<std::int64_t, std::int64_t, std::int64_t>> seen, want;
        for (const auto& c : chunks) {
            mass += mask_sum(c.mask);
            CHECK(c.pad_rows < c.window());
            for (std::size_t r = 0; r < c.real_rows(); ++r) seen.insert({c.positions[r].n, c.positions[r].l, c.positions[r].k});
        }
        for (const auto& p : seq.positions) want.insert({p.n, p.l, p.k});
        CHECK(mass == mask_sum(seq.mask));
        CHECK(seen == want);
    }
}

TEST_CASE("noise view") {
    TensorMap m;
    std::vector<double> v(100 * 100);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal(0.0, 3.0);
    for (auto& x : v) x = normal(rng);
    m.insert({"w", {100, 100}, Dtype::F64, v});
    const TokenSequence seq = tokenize_model(m, 100);
    const TokenChunk chunk = chunk_sequence(seq, 100).front();

    SUBCASE("zero sigma is the identity") {
        const TokenChunk same = noise_view(chunk, 0.0, 1);
        CHECK(same.tokens == chunk.tokens);
    }
    SUBCASE("deterministic per seed") {
        CHECK(noise_view(chunk, 0.1, 9).tokens == noise_view(chunk, 0.1, 9).tokens);
        CHECK(noise_view(chunk, 0.1, 9).tokens != noise_view(chunk, 0.1, 10).tokens);
    }
    SUBCASE("empirical noise std within 5 percent of sigma times the value std") {
        const double mean = chunk.tokens.mean();
        const double s = std::sqrt((chunk.tokens.array() - mean).square().sum() / static_cast<double>(chunk.tokens.size()));
        const Matrix diff = noise_view(chunk, 0.05, 3).tokens - chunk.tokens;
        const double dm = diff.mean();
        const double ds = std::sqrt((diff.array() - dm).square().sum() / static_cast<double>(diff.size()));
        CHECK(ds == doctest::Approx(0.05 * s).epsilon(0.05));
    }
    SUBCASE("masked entries and metadata untouched") {
        TensorMap small;
        small.insert({"w", {3, 5}, Dtype::F64, std::vector<double>(15, 1.5)});
        const TokenChunk c = chunk_sequence(tokenize_model(small, 4), 8).front();
        const TokenChunk n = noise_view(c, 0.5, 2);
        for (Eigen::Index i = 0; i < c.tokens.rows(); ++i) {
            for (Eigen::Index j = 0; j < c.tokens.cols(); ++j) {
                if (c.mask(i, j) == 0.0) CHECK(n.tokens(i, j) == c.tokens(i, j));
            }
        }
        CHECK(n.mask == c.mask);
        CHECK(n.positions == c.positions);
        CHECK(n.pad_rows == c.pad_rows);
    }
}

TEST_CASE("runtime norm scale is the variance of real values") {
    TensorMap m;
    m.insert({"w", {1, 3}, Dtype::F64, {1, 2, 3}});
    CHECK(runtime_norm_scale(tokenize_model(m, 4)) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    TensorMap flat;
    flat.insert({"w", {4}, Dtype::F64, {2, 2, 2, 2}});
    CHECK(runtime_norm_scale(tokenize_model(flat, 3)) == 1.0);
}

TEST_CASE("token sequences persist with their layout") {
    test::TempDir dir("tokens");
    std::mt19937_64 rng(6);
    TensorMap m = test::random_map(rng);
    m.metadata()["origin"] = "unit";
    const TokenSequence seq = tokenize_model(m, 5);
    save_token_sequence(dir / "m.tokens.safetensors", seq);
    const TokenSequence back = load_token_sequence(dir / "m.tokens.safetensors");
    CHECK(back.tokens == seq.tokens);
    CHECK(back.mask == seq.mask);
    CHECK(back.positions == seq.positions);
    CHECK(back.layout == seq.layout);
    CHECK(back.d_t == 5);
    CHECK(bitwise_equal(detokenize(back), m));
}
