#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "wf/autoencoder.hpp"
#include "wf/checkpoint_io.hpp"
#include "wf/tokenizer.hpp"

namespace wf::test {

/// Directory under the system temp path, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("wf_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(++counter));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Random value with a spread of magnitudes, signed zeros and subnormals
/// included so bitwise round-trips are exercised.
inline double random_value(std::mt19937_64& rng, Dtype dtype) {
    std::uniform_int_distribution<int> kind(0, 19);
    std::normal_distribution<double> normal(0.0, 1.0);
    double v = 0.0;
    switch (kind(rng)) {
        case 0: v = -0.0; break;
        case 1: v = 0.0; break;
        case 2: v = dtype == Dtype::F32 ? 1e-40 : 4.9e-324; break;
        case 3: v = normal(rng) * 1e30; break;
        default: v = normal(rng) * std::pow(10.0, std::uniform_int_distribution<int>(-6, 3)(rng));
    }
    return dtype == Dtype::F32 ? static_cast<double>(static_cast<float>(v)) : v;
}

/// A random architecture: 1-8 records of rank 0-4 with small dimensions,
/// mixed dtypes and optional metadata.
inline TensorMap random_map(std::mt19937_64& rng, std::size_t max_dim = 9) {
    std::uniform_int_distribution<int> nrec(1, 8);
    std::uniform_int_distribution<int> rank(0, 4);
    std::uniform_int_distribution<std::size_t> dim(1, max_dim);
    std::bernoulli_distribution f32(0.6);
    TensorMap map;
    const int n = nrec(rng);
    for (int i = 0; i < n; ++i) {
        TensorRecord r;
        r.name = "block" + std::to_string(i) + (i % 2 ? ".weight" : ".bias");
        r.dtype = f32(rng) ? Dtype::F32 : Dtype::F64;
        const int rk = rank(rng);
        for (int d = 0; d < rk; ++d) r.shape.push_back(dim(rng));
        r.values.resize(numel(r.shape));
        for (auto& v : r.values) v = random_value(rng, r.dtype);
        map.insert(std::move(r));
    }
    map.set_source_id("rand" + std::to_string(rng() % 100000));
    if (rng() % 2) map.metadata()["note"] = "seeded fixture";
    return map;
}

/// Smallest useful autoencoder for oracle and gradient checks.
inline AutoencoderConfig tiny_config() {
    AutoencoderConfig c;
    c.d_t = 4;
    c.latent_dim = 8;
    c.proj_dim = 4;
    c.num_layers_enc = 1;
    c.num_layers_dec = 1;
    c.num_heads = 1;
    c.ff_dim = 12;
    c.window = 5;
    c.max_layer_index = 3;
    c.max_k_index = 7;
    return c;
}

/// Random chunk for cfg with `pad` all-padding rows at the tail and a few
/// masked entries inside real rows.
inline TokenChunk random_chunk(const AutoencoderConfig& cfg, std::mt19937_64& rng, std::size_t pad = 1) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto w = static_cast<Eigen::Index>(cfg.window);
    const auto d = static_cast<Eigen::Index>(cfg.d_t);
    TokenChunk c;
    c.tokens = Matrix::Zero(w, d);
    c.mask = Matrix::Zero(w, d);
    c.pad_rows = pad;
    for (Eigen::Index i = 0; i < w; ++i) {
        const bool real = i < w - static_cast<Eigen::Index>(pad);
        const Eigen::Index filled = real ? d - (i % 2) : 0;
        for (Eigen::Index j = 0; j < filled; ++j) {
            c.tokens(i, j) = normal(rng);
            c.mask(i, j) = 1.0;
        }
        c.positions.push_back(real ? Position{i + 3, i / 2, i % 3} : Position{});
    }
    c.model_id = "fixture";
    return c;
}

}  // namespace wf::test
