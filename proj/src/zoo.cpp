#include "wf/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "wf/rng.hpp"
#include "wf/training.hpp"

namespace wf {

using json = nlohmann::json;

// -- toy tasks ----------------------------------------------------------------

TaskData make_task_data(const ToyTask& task) {
    if (task.num_classes < 2 || task.input_dim == 0) {
        throw Error(ErrorKind::TaskDegenerate, "task '" + task.name + "' needs >= 2 classes and >= 1 input dim");
    }
    std::mt19937_64 rng(task.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto dim = static_cast<Eigen::Index>(task.input_dim);
    Matrix means(static_cast<Eigen::Index>(task.num_classes), dim);
    for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = task.separation * normal(rng);
    for (Eigen::Index a = 0; a < means.rows(); ++a) {
        for (Eigen::Index b = a + 1; b < means.rows(); ++b) {
            if ((means.row(a) - means.row(b)).norm() < 0.25 * task.noise) {
                throw Error(ErrorKind::TaskDegenerate, "task '" + task.name + "' has overlapping class means");
            }
        }
    }
    auto draw = [&](std::size_t n) {
        LabeledData d;
        d.x.resize(static_cast<Eigen::Index>(n), dim);
        d.y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto label = static_cast<int>(i % task.num_classes);
            d.y[i] = label;
            for (Eigen::Index j = 0; j < dim; ++j) {
                d.x(static_cast<Eigen::Index>(i), j) = means(label, j) + task.noise * normal(rng);
            }
        }
        return d;
    };
    TaskData data;
    data.train = draw(task.n_train);
    data.val = draw(task.n_val);
    data.probe = draw(task.n_probe);
    data.test = draw(task.n_test);
    return data;
}

std::vector<ToyTask> default_tasks(std::uint64_t seed, std::size_t count) {
    std::vector<ToyTask> tasks;
    for (std::size_t i = 0; i < count; ++i) {
        ToyTask t;
        t.name = fmt::format("blobs{}", i);
        t.seed = derive_seed(seed, 100 + i);
        tasks.push_back(std::move(t));
    }
    return tasks;
}

// -- perceptrons --------------------------------------------------------------

namespace {

std::string weight_name(std::size_t layer) { return fmt::format("layers.{}.weight", layer); }
std::string bias_name(std::size_t layer) { return fmt::format("layers.{}.bias", layer); }

struct MlpView {
    std::vector<ConstMatrixMap> weights;  // [out, in]
    std::vector<ConstMatrixMap> biases;   // [1, out]
};

MlpView view_of(const TensorMap& map, std::span<const double> flat, const std::vector<std::size_t>& offsets,
                const MlpWidths& widths) {
    MlpView v;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const auto out = static_cast<Eigen::Index>(widths[l + 1]);
        const auto in = static_cast<Eigen::Index>(widths[l]);
        v.weights.emplace_back(flat.data() + offsets[map.records().size() + 2 * l], out, in);
        v.biases.emplace_back(flat.data() + offsets[map.records().size() + 2 * l + 1], 1, out);
    }
    return v;
}

/// Flat parameter buffer in canonical record order plus, appended, the
/// offsets of each layer's weight and bias for direct lookup.
struct FlatMlp {
    MlpWidths widths;
    std::vector<double> values;
    std::vector<std::size_t> offsets;
};

FlatMlp flatten(const TensorMap& map) {
    FlatMlp f;
    f.widths = mlp_widths(map);
    for (const auto& r : map.records()) {
        f.offsets.push_back(f.values.size());
        f.values.insert(f.values.end(), r.values.begin(), r.values.end());
    }
    for (std::size_t l = 0; l + 1 < f.widths.size(); ++l) {
        for (const auto& name : {weight_name(l), bias_name(l)}) {
            const auto it = std::find_if(map.records().begin(), map.records().end(),
                                         [&](const TensorRecord& r) { return r.name == name; });
            f.offsets.push_back(f.offsets[static_cast<std::size_t>(it - map.records().begin())]);
        }
    }
    return f;
}

TensorMap unflatten(const TensorMap& like, const FlatMlp& f) {
    TensorMap out = like;
    auto& recs = out.mutable_records();
    for (std::size_t i = 0; i < recs.size(); ++i) {
        auto& r = recs[i];
        for (std::size_t j = 0; j < r.values.size(); ++j) {
            double v = f.values[f.offsets[i] + j];
            if (r.dtype == Dtype::F32) v = static_cast<double>(static_cast<float>(v));
            r.values[j] = v;
        }
    }
    return out;
}

struct Forward {
    std::vector<Matrix> pre;  // pre-activations per layer
    std::vector<Matrix> act;  // inputs to each layer (act[0] = x)
};

Matrix forward(const MlpView& v, const Matrix& x, Forward* cache) {
    Matrix a = x;
    if (cache) cache->act.push_back(a);
    for (std::size_t l = 0; l < v.weights.size(); ++l) {
        Matrix z = a * v.weights[l].transpose();
        z.rowwise() += v.biases[l].row(0);
        if (cache) cache->pre.push_back(z);
        if (l + 1 < v.weights.size()) {
            a = z.cwiseMax(0.0);
            if (cache) cache->act.push_back(a);
        } else {
            a = std::move(z);
        }
    }
    return a;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        loss += lse - logits(i, labels[static_cast<std::size_t>(i)]);
    }
    return loss / static_cast<double>(logits.rows());
}

double accuracy_of(const Matrix& logits, std::span<const int> labels) {
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        if (static_cast<int>(arg) == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

/// Cross-entropy gradient into a flat buffer laid out like FlatMlp::values.
void mlp_gradient(const MlpView& v, const FlatMlp& f, std::size_t nrec, const Matrix& x, std::span<const int> labels,
                  std::vector<double>& grad) {
    Forward cache;
    const Matrix logits = forward(v, x, &cache);
    Matrix dz = softmax_rows(logits);
    for (Eigen::Index i = 0; i < dz.rows(); ++i) dz(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    dz /= static_cast<double>(x.rows());
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t l = v.weights.size(); l-- > 0;) {
        const auto out = v.weights[l].rows();
        const auto in = v.weights[l].cols();
        MatrixMap gw(grad.data() + f.offsets[nrec + 2 * l], out, in);
        MatrixMap gb(grad.data() + f.offsets[nrec + 2 * l + 1], 1, out);
        gw.noalias() = dz.transpose() * cache.act[l];
        gb.row(0) = dz.colwise().sum();
        if (l > 0) {
            Matrix da = dz * v.weights[l];
            dz = (cache.pre[l - 1].array() > 0.0).select(da, 0.0);
        }
    }
}

}  // namespace

TensorMap mlp_init(const MlpWidths& widths, std::uint64_t seed, Dtype dtype) {
    if (widths.size() < 2) throw Error(ErrorKind::InvalidArgument, "a perceptron needs at least input and output widths");
    std::mt19937_64 rng(seed);
    TensorMap map;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
        std::uniform_real_distribution<double> uni(-bound, bound);
        auto draw = [&](std::size_t n) {
            std::vector<double> v(n);
            for (auto& x : v) {
                x = uni(rng);
                if (dtype == Dtype::F32) x = static_cast<double>(static_cast<float>(x));
            }
            return v;
        };
        map.insert({weight_name(l), {widths[l + 1], widths[l]}, dtype, draw(widths[l + 1] * widths[l])});
        map.insert({bias_name(l), {widths[l + 1]}, dtype, draw(widths[l + 1])});
    }
    return map;
}

MlpWidths mlp_widths(const TensorMap& map) {
    const std::size_t layers = map.size() / 2;
    if (layers == 0 || map.size() % 2 != 0) throw Error(ErrorKind::ShapeMismatch, "not a perceptron stack");
    MlpWidths widths;
    for (std::size_t l = 0; l < layers; ++l) {
        const TensorRecord* w = map.find(weight_name(l));
        const TensorRecord* b = map.find(bias_name(l));
        if (!w || !b || w->shape.size() != 2 || b->shape.size() != 1 || b->shape[0] != w->shape[0]) {
            throw Error(ErrorKind::ShapeMismatch, "perceptron layer " + std::to_string(l) + " missing or malformed");
        }
        if (l == 0) {
            widths.push_back(w->shape[1]);
        } else if (widths.back() != w->shape[1]) {
            throw Error(ErrorKind::ShapeMismatch, "perceptron layer " + std::to_string(l) + " fan-in mismatch");
        }
        widths.push_back(w->shape[0]);
    }
    return widths;
}

Matrix mlp_logits(const TensorMap& map, const Matrix& x) {
    const FlatMlp f = flatten(map);
    if (static_cast<std::size_t>(x.cols()) != f.widths.front()) {
        throw Error(ErrorKind::ShapeMismatch, "input width differs from the perceptron's fan-in");
    }
    return forward(view_of(map, f.values, f.offsets, f.widths), x, nullptr);
}

double mlp_loss(const TensorMap& map, const LabeledData& data) {
    return cross_entropy(mlp_logits(map, data.x), data.y);
}

double mlp_accuracy(const TensorMap& map, const LabeledData& data) {
    return accuracy_of(mlp_logits(map, data.x), data.y);
}

Probe make_probe(const LabeledData& probe) {
    return {probe.size(), [probe](const TensorMap& m) { return mlp_loss(m, probe); },
            [probe](const TensorMap& m) { return mlp_accuracy(m, probe); }};
}

FinetuneResult finetune(const TensorMap& init, const ToyTask& task, const TaskData& data, const FinetuneConfig& cfg,
                        std::uint64_t seed) {
    TensorMap start = init;
    MlpWidths widths = mlp_widths(start);
    if (widths.front() != task.input_dim) {
        throw Error(ErrorKind::ShapeMismatch, "model fan-in " + std::to_string(widths.front()) + " != task input " +
                                                  std::to_string(task.input_dim));
    }
    if (widths.back() != task.num_classes) {
        if (!cfg.reinit_head) {
            throw Error(ErrorKind::ShapeMismatch, "model head has " + std::to_string(widths.back()) +
                                                      " outputs, task has " + std::to_string(task.num_classes));
        }
        MlpWidths head_widths = {widths[widths.size() - 2], task.num_classes};
        const TensorMap head = mlp_init(head_widths, derive_seed(seed, 77), start.records().front().dtype);
        const std::size_t last = widths.size() - 2;
        std::vector<TensorRecord> recs;
        for (const auto& r : start.records()) {
            if (r.name == weight_name(last) || r.name == bias_name(last)) continue;
            recs.push_back(r);
        }
        recs.push_back({weight_name(last), head.find("layers.0.weight")->shape, head.find("layers.0.weight")->dtype,
                        head.find("layers.0.weight")->values});
        recs.push_back({bias_name(last), head.find("layers.0.bias")->shape, head.find("layers.0.bias")->dtype,
                        head.find("layers.0.bias")->values});
        start = TensorMap(std::move(recs), start.source_id(), start.metadata());
        widths = mlp_widths(start);
    }

    FlatMlp f = flatten(start);
    const std::size_t nrec = start.records().size();
    OptimizerState opt = OptimizerState::zeros(f.values.size());
    std::vector<double> grad(f.values.size());
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    FinetuneResult res;
    auto val_acc = [&] {
        return accuracy_of(forward(view_of(start, f.values, f.offsets, f.widths), data.val.x, nullptr), data.val.y);
    };
    res.val_accuracy.push_back(val_acc());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            Matrix xb(static_cast<Eigen::Index>(e - b), data.train.x.cols());
            std::vector<int> yb(e - b);
            for (std::size_t i = b; i < e; ++i) {
                xb.row(static_cast<Eigen::Index>(i - b)) = data.train.x.row(static_cast<Eigen::Index>(order[i]));
                yb[i - b] = data.train.y[order[i]];
            }
            mlp_gradient(view_of(start, f.values, f.offsets, f.widths), f, nrec, xb, yb, grad);
            adamw_step(f.values, grad, opt, cfg.lr, 0.0);
        }
        res.val_accuracy.push_back(val_acc());
    }
    res.weights = unflatten(start, f);
    res.test_accuracy = mlp_accuracy(res.weights, data.test);
    res.test_loss = mlp_loss(res.weights, data.test);
    return res;
}

// -- zoo ----------------------------------------------------------------------

namespace {

ZooMember train_member(const ZooSpec& spec, const TaskData& data, std::size_t task_index, std::uint64_t stream,
                       std::string id) {
    const ToyTask& task = spec.tasks[task_index];
    MlpWidths widths = spec.widths;
    widths.front() = task.input_dim;
    widths.back() = task.num_classes;
    const TensorMap init = mlp_init(widths, derive_seed(spec.seed, 2 * stream));
    FinetuneConfig fc;
    fc.epochs = spec.train_epochs;
    fc.lr = spec.lr;
    FinetuneResult r = finetune(init, task, data, fc, derive_seed(spec.seed, 2 * stream + 1));
    ZooMember m{std::move(r.weights), task_index, r.test_accuracy};
    m.weights.set_source_id(std::move(id));
    m.weights.metadata()["task"] = task.name;
    m.weights.metadata()["task_spec"] = task_to_json(task);
    return m;
}

void check_spec(const ZooSpec& spec) {
    if (spec.tasks.empty()) throw Error(ErrorKind::InvalidArgument, "zoo spec lists no tasks");
    if (spec.widths.size() < 2) throw Error(ErrorKind::InvalidArgument, "zoo widths need input and output entries");
}

constexpr std::uint64_t kPromptStream = 1'000'000;

}  // namespace

std::vector<ZooMember> build_zoo(const ZooSpec& spec) {
    check_spec(spec);
    if (spec.count == 0) throw Error(ErrorKind::InvalidArgument, "zoo count must be positive");
    std::vector<TaskData> data;
    for (const auto& t : spec.tasks) data.push_back(make_task_data(t));
    std::vector<ZooMember> zoo;
    zoo.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t ti = i % spec.tasks.size();
        zoo.push_back(train_member(spec, data[ti], ti, i, fmt::format("{}_{}_{:03d}", spec.prefix, spec.tasks[ti].name, i)));
    }
    return zoo;
}

std::vector<ZooMember> build_prompts(const ZooSpec& spec) {
    check_spec(spec);
    std::vector<ZooMember> prompts;
    for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
        prompts.push_back(train_member(spec, make_task_data(spec.tasks[t]), t, kPromptStream + t,
                                       fmt::format("{}_prompt_{}", spec.prefix, spec.tasks[t].name)));
    }
    return prompts;
}

std::optional<ToyTask> task_of(const TensorMap& model) {
    const auto it = model.metadata().find("task_spec");
    if (it == model.metadata().end()) return std::nullopt;
    return task_from_json(it->second);
}

std::string task_to_json(const ToyTask& t) {
    const json j = {{"name", t.name},       {"input_dim", t.input_dim}, {"num_classes", t.num_classes},
                    {"separation", t.separation}, {"noise", t.noise},  {"n_train", t.n_train},
                    {"n_val", t.n_val},     {"n_probe", t.n_probe},     {"n_test", t.n_test},
                    {"seed", t.seed}};
    return j.dump();
}

namespace {

ToyTask task_from(const json& j) {
    ToyTask t;
    t.name = j.at("name").get<std::string>();
    t.input_dim = j.at("input_dim").get<std::size_t>();
    t.num_classes = j.at("num_classes").get<std::size_t>();
    t.separation = j.at("separation").get<double>();
    t.noise = j.at("noise").get<double>();
    t.n_train = j.at("n_train").get<std::size_t>();
    t.n_val = j.at("n_val").get<std::size_t>();
    t.n_probe = j.at("n_probe").get<std::size_t>();
    t.n_test = j.at("n_test").get<std::size_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    return t;
}

}  // namespace

ToyTask task_from_json(std::string_view text) {
    try {
        return task_from(json::parse(text));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("task description: ") + e.what());
    }
}

namespace {

json write_members(const std::filesystem::path& dir, const std::string& prefix, const std::vector<ZooMember>& members) {
    json out = json::array();
    for (const auto& m : members) {
        const std::string file = prefix + m.weights.source_id() + ".safetensors";
        write_checkpoint_file(dir / file, m.weights);
        out.push_back({{"file", file}, {"task_index", m.task_index}, {"test_accuracy", m.test_accuracy}});
    }
    return out;
}

std::vector<ZooMember> read_members(const std::filesystem::path& dir, const json& list) {
    std::vector<ZooMember> out;
    for (const auto& m : list) {
        out.push_back({read_checkpoint_file(dir / m.at("file").get<std::string>()), m.at("task_index").get<std::size_t>(),
                       m.at("test_accuracy").get<double>()});
    }
    return out;
}

}  // namespace

void save_zoo(const std::filesystem::path& dir, const ZooSpec& spec, const std::vector<ZooMember>& members,
              const std::vector<ZooMember>& prompts) {
    std::filesystem::create_directories(dir);
    if (!prompts.empty()) std::filesystem::create_directories(dir / "prompts");
    json tasks = json::array();
    for (const auto& t : spec.tasks) tasks.push_back(json::parse(task_to_json(t)));
    const json j = {{"count", spec.count},
                    {"widths", spec.widths},
                    {"train_epochs", spec.train_epochs},
                    {"lr", spec.lr},
                    {"seed", spec.seed},
                    {"prefix", spec.prefix},
                    {"tasks", tasks},
                    {"members", write_members(dir, "", members)},
                    {"prompts", write_members(dir, "prompts/", prompts)}};
    const std::string text = j.dump(2) + "\n";
    write_file_bytes(dir / "zoo.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

LoadedZoo load_zoo(const std::filesystem::path& dir) {
    const auto bytes = read_file_bytes(dir / "zoo.json");
    LoadedZoo z;
    try {
        const json j = json::parse(bytes.begin(), bytes.end());
        z.spec.count = j.at("count").get<std::size_t>();
        z.spec.widths = j.at("widths").get<MlpWidths>();
        z.spec.train_epochs = j.at("train_epochs").get<std::size_t>();
        z.spec.lr = j.at("lr").get<double>();
        z.spec.seed = j.at("seed").get<std::uint64_t>();
        z.spec.prefix = j.at("prefix").get<std::string>();
        for (const auto& t : j.at("tasks")) z.spec.tasks.push_back(task_from(t));
        z.members = read_members(dir, j.at("members"));
        if (j.contains("prompts")) z.prompts = read_members(dir, j.at("prompts"));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("zoo.json: ") + e.what());
    }
    return z;
}

// -- baselines ----------------------------------------------------------------

TensorMap dare_merge(const TensorMap& base, const std::vector<TensorMap>& donors, double drop_p, std::uint64_t seed,
                     DareStats* stats) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) throw Error(ErrorKind::InvalidArgument, "drop_p must lie in [0, 1)");
    if (donors.empty()) throw Error(ErrorKind::InvalidArgument, "DARE needs at least one donor");
    for (const auto& d : donors) {
        if (!same_shapes(base, d)) {
            throw Error(ErrorKind::ShapeMismatch, "donor '" + d.source_id() + "' differs in shape from the base");
        }
    }
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(1.0 - drop_p);
    const double rescale = 1.0 / (1.0 - drop_p);
    const double count = static_cast<double>(donors.size());
    DareStats local;
    TensorMap merged = base;
    auto& recs = merged.mutable_records();
    for (std::size_t r = 0; r < recs.size(); ++r) {
        auto& rec = recs[r];
        for (std::size_t i = 0; i < rec.values.size(); ++i) {
            const double b = base.records()[r].values[i];
            double sum = 0.0;
            for (const auto& d : donors) {
                const double delta = d.records()[r].values[i] - b;
                const bool kept = drop_p == 0.0 || keep(rng);
                if (kept) {
                    sum += delta * rescale;
                    ++local.kept;
                }
                ++local.total;
            }
            double v = b + sum / count;
            if (rec.dtype == Dtype::F32) v = static_cast<double>(static_cast<float>(v));
            rec.values[i] = v;
        }
    }
    merged.set_source_id(base.source_id() + ".dare");
    if (stats) *stats = local;
    return merged;
}

TensorMap magnitude_prune(const TensorMap& weights, double sparsity) {
    if (!(sparsity >= 0.0 && sparsity < 1.0)) throw Error(ErrorKind::InvalidArgument, "sparsity must lie in [0, 1)");
    const std::size_t n = weights.parameter_count();
    const auto k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n)));
    TensorMap out = weights;
    if (k == 0) return out;
    std::vector<std::pair<double, std::size_t>> keyed;
    keyed.reserve(n);
    std::vector<std::pair<std::size_t, std::size_t>> where;
    where.reserve(n);
    for (std::size_t r = 0; r < weights.records().size(); ++r) {
        const auto& vals = weights.records()[r].values;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            keyed.emplace_back(std::abs(vals[i]), keyed.size());
            where.emplace_back(r, i);
        }
    }
    std::nth_element(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k - 1), keyed.end());
    std::sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k));
    auto& recs = out.mutable_records();
    for (std::size_t j = 0; j < k; ++j) {
        const auto [r, i] = where[keyed[j].second];
        recs[r].values[i] = 0.0;
    }
    return out;
}

// -- comparison ---------------------------------------------------------------

std::string_view to_string(Condition c) {
    switch (c) {
        case Condition::Scratch: return "scratch";
        case Condition::Prompt: return "prompt";
        case Condition::Generated: return "generated";
        case Condition::Dare: return "dare";
        case Condition::Pruned: return "pruned";
    }
    return "scratch";
}

Condition condition_from_string(std::string_view s) {
    for (auto c : {Condition::Scratch, Condition::Prompt, Condition::Generated, Condition::Dare, Condition::Pruned}) {
        if (to_string(c) == s) return c;
    }
    throw Error(ErrorKind::InvalidArgument, "unknown condition '" + std::string(s) + "'");
}

const ReportCell* EvalReport::find(const std::string& task, Condition c) const {
    for (const auto& cell : cells) {
        if (cell.task == task && cell.condition == c) return &cell;
    }
    return nullptr;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
    if (values.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

EvalReport run_comparison(const std::vector<ZooMember>& zoo, const AutoencoderWeights& autoencoder,
                          const std::vector<ToyTask>& tasks, const std::vector<TensorMap>& prompts,
                          const MlpWidths& widths, const ComparisonConfig& cfg) {
    if (prompts.size() != tasks.size()) {
        throw Error(ErrorKind::InvalidArgument, "need exactly one prompt per task");
    }
    if (cfg.seeds.empty()) throw Error(ErrorKind::InvalidArgument, "comparison needs at least one seed");
    EvalReport report;
    report.conditions = cfg.conditions;
    report.seeds = cfg.seeds;
    report.budget = cfg.budget;

    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const ToyTask& task = tasks[t];
        report.tasks.push_back(task.name);
        const TaskData data = make_task_data(task);
        MlpWidths task_widths = widths;
        task_widths.front() = task.input_dim;
        task_widths.back() = task.num_classes;

        for (Condition cond : cfg.conditions) {
            ReportCell cell;
            cell.task = task.name;
            cell.condition = cond;
            std::vector<std::vector<double>> curves;
            auto run = [&](const TensorMap& init, std::uint64_t seed) {
                FinetuneResult r = finetune(init, task, data, cfg.budget, derive_seed(seed, 1000 + t));
                cell.values.push_back(r.test_accuracy);
                cell.value_seeds.push_back(seed);
                curves.push_back(std::move(r.val_accuracy));
            };
            for (std::uint64_t seed : cfg.seeds) {
                switch (cond) {
                    case Condition::Scratch:
                        run(mlp_init(task_widths, derive_seed(seed, 5000 + t)), seed);
                        break;
                    case Condition::Prompt:
                        run(prompts[t], seed);
                        break;
                    case Condition::Generated: {
                        GenerationConfig gc;
                        gc.count = cfg.candidates;
                        gc.base_seed = derive_seed(seed, 7000 + t) & 0xffffffffULL;
                        gc.bandwidth = cfg.bandwidth;
                        auto kept = rank_candidates(generate(prompts[t], autoencoder, gc), make_probe(data.probe),
                                                    cfg.keep, RankCriterion::Loss);
                        for (const auto& c : kept) run(c.weights, seed);
                        break;
                    }
                    case Condition::Dare: {
                        std::vector<TensorMap> donors;
                        for (const auto& m : zoo) {
                            if (m.task_index == t && same_shapes(m.weights, prompts[t])) donors.push_back(m.weights);
                            if (donors.size() == cfg.dare_donors) break;
                        }
                        if (donors.empty()) {
                            throw Error(ErrorKind::InvalidArgument, "no DARE donors for task '" + task.name + "'");
                        }
                        run(dare_merge(prompts[t], donors, cfg.drop_p, derive_seed(seed, 9000 + t)), seed);
                        break;
                    }
                    case Condition::Pruned:
                        run(magnitude_prune(prompts[t], cfg.sparsity), seed);
                        break;
                }
            }
            const auto [mean, sd] = mean_std(cell.values);
            cell.mean = mean;
            cell.stddev = sd;
            if (!curves.empty()) {
                cell.mean_val_curve.assign(curves.front().size(), 0.0);
                for (const auto& c : curves) {
                    for (std::size_t e = 0; e < c.size(); ++e) cell.mean_val_curve[e] += c[e];
                }
                for (auto& v : cell.mean_val_curve) v /= static_cast<double>(curves.size());
            }
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

std::string report_to_json(const EvalReport& report) {
    json cells = json::array();
    for (const auto& c : report.cells) {
        cells.push_back({{"task", c.task},
                         {"condition", std::string(to_string(c.condition))},
                         {"values", c.values},
                         {"value_seeds", c.value_seeds},
                         {"mean", c.mean},
                         {"std", c.stddev},
                         {"mean_val_curve", c.mean_val_curve}});
    }
    json conds = json::array();
    for (auto c : report.conditions) conds.push_back(std::string(to_string(c)));
    const json j = {{"tasks", report.tasks},
                    {"conditions", conds},
                    {"seeds", report.seeds},
                    {"budget", {{"epochs", report.budget.epochs}, {"lr", report.budget.lr},
                                {"batch_size", report.budget.batch_size}}},
                    {"cells", cells}};
    return j.dump(2);
}

std::string report_to_table(const EvalReport& report) {
    std::ostringstream out;
    out << fmt::format("{:<12}", "task");
    for (auto c : report.conditions) out << fmt::format(" {:>17}", to_string(c));
    out << '\n';
    for (const auto& task : report.tasks) {
        out << fmt::format("{:<12}", task);
        for (auto c : report.conditions) {
            const ReportCell* cell = report.find(task, c);
            out << (cell ? fmt::format(" {:>9.2f} +- {:<5.2f}", 100.0 * cell->mean, 100.0 * cell->stddev)
                         : fmt::format(" {:>17}", "-"));
        }
        out << '\n';
    }
    return out.str();
}

// -- latent export ------------------------------------------------------------

std::string export_latents(const std::vector<LabeledEmbedding>& embeddings, std::uint64_t seed, std::size_t per_model) {
    if (embeddings.empty()) throw Error(ErrorKind::EmptyInput, "no embeddings to export");
    const auto dim = static_cast<std::size_t>(embeddings.front().embedding.chunks.front().latents.cols());
    std::ostringstream out;
    for (std::size_t j = 0; j < dim; ++j) out << "latent_" << j << ',';
    out << "model_id,family,modality\n";
    for (std::size_t m = 0; m < embeddings.size(); ++m) {
        const auto& e = embeddings[m];
        std::vector<RowVector> rows;
        for (const auto& c : e.embedding.chunks) {
            for (Eigen::Index r : real_rows(c.mask)) rows.push_back(c.latents.row(r));
        }
        std::mt19937_64 rng(derive_seed(seed, m));
        const std::size_t take = std::min(per_model, rows.size());
        // Partial Fisher-Yates: the first `take` entries become the sample.
        std::vector<std::size_t> idx(rows.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        for (std::size_t i = 0; i < take; ++i) {
            const RowVector& row = rows[idx[i]];
            for (Eigen::Index j = 0; j < row.size(); ++j) out << fmt::format("{:.17g}", row(j)) << ',';
            out << e.embedding.prompt_id << ',' << e.family << ',' << e.modality << '\n';
        }
    }
    return out.str();
}

}  // namespace wf
