#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "wf/autoencoder.hpp"
#include "wf/checkpoint_io.hpp"
#include "wf/error.hpp"
#include "wf/generation.hpp"
#include "wf/tokenizer.hpp"
#include "wf/training.hpp"
#include "wf/zoo.hpp"

namespace wf::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr std::string_view kCheckpointExt = ".safetensors";
constexpr std::string_view kTokenExt = ".tokens.safetensors";

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

/// Regular files in dir whose names end in ext, sorted by name. Token files
/// are excluded from plain checkpoint listings.
std::vector<fs::path> list_files(const fs::path& dir, std::string_view ext) {
    if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (!e.is_regular_file() || !ends_with(name, ext)) continue;
        if (ext == kCheckpointExt && ends_with(name, kTokenExt)) continue;
        out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    return {bytes.begin(), bytes.end()};
}

/// Model paths from --manifest when given, otherwise from --in (file or directory).
std::vector<fs::path> model_inputs(const std::string& in, const std::string& manifest) {
    if (!manifest.empty()) {
        std::vector<fs::path> out;
        for (const auto& e : manifest_from_json(read_text(manifest)).entries) out.emplace_back(e.path);
        return out;
    }
    if (in.empty()) throw UsageError("one of --in or --manifest is required");
    if (fs::is_directory(in)) return list_files(in, kCheckpointExt);
    return {fs::path(in)};
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

struct Common {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string log_level = "info";
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--seed", c.seed, "Random seed (falls back to WF_SEED, then 0)");
    sub->add_option("--config", c.config, "JSON file of flag values; explicit flags win");
    sub->add_option("--log-level", c.log_level, "trace|debug|info|warn|error|off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
}

std::uint64_t resolve_seed(const Common& c) {
    if (c.seed) return *c.seed;
    if (const char* env = std::getenv("WF_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(env, &used);
            if (used == std::string_view(env).size()) return v;
        } catch (const std::exception&) {
        }
        throw UsageError(fmt::format("WF_SEED must be an unsigned integer, got '{}'", env));
    }
    return 0;
}

std::string json_scalar(const json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer() || v.is_number_unsigned() || v.is_number_float()) return v.dump();
    throw UsageError("config key '" + key + "' must be a scalar or a list of scalars");
}

/// Fills options not given on the command line from the JSON config. Keys
/// are flag names without the leading dashes; '_' and '-' are interchangeable.
void apply_config(CLI::App* sub, const std::string& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw UsageError("config " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config " + path + " must hold a JSON object");
    for (const auto& [raw_key, value] : j.items()) {
        std::string key = raw_key;
        std::replace(key.begin(), key.end(), '_', '-');
        if (key == "config") throw UsageError("config files cannot nest --config");
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (!opt) throw UsageError("unknown config key '" + raw_key + "' for " + sub->get_name());
        if (opt->count() > 0) continue;
        if (value.is_array()) {
            for (const auto& v : value) opt->add_result(json_scalar(v, raw_key));
        } else {
            opt->add_result(json_scalar(value, raw_key));
        }
        opt->run_callback();
    }
}

const CLI::Validator kBandwidth(
    [](std::string& s) {
        try {
            BandwidthRule::parse(s);
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    },
    "scott|fixed:<h>");

void set_logging(const std::string& level) {
    auto logger = std::make_shared<spdlog::logger>("wf", std::make_shared<spdlog::sinks::stderr_sink_st>());
    logger->set_pattern("[%l] %v");
    logger->set_level(spdlog::level::from_str(level));
    spdlog::set_default_logger(logger);
}

// -- subcommands --------------------------------------------------------------

struct CollectArgs {
    std::string in, out;
};

int do_collect(const CollectArgs& a, std::ostream& out) {
    require(a.in, "--in");
    require(a.out, "--out");
    const auto manifest = build_manifest(list_files(a.in, kCheckpointExt));
    write_text(a.out, manifest_to_json(manifest));
    out << fmt::format("collected {} models ({} skipped) into {}\n", manifest.entries.size(), manifest.skipped.size(),
                       a.out);
    return 0;
}

struct TokenizeArgs {
    std::string in, manifest, out;
    std::size_t d_t = 16;
};

int do_tokenize(const TokenizeArgs& a, std::ostream& out) {
    require(a.out, "--out");
    if (a.d_t == 0) throw UsageError("--d-t must be positive");
    const auto inputs = model_inputs(a.in, a.manifest);
    fs::create_directories(a.out);
    std::size_t tokens = 0;
    for (const auto& p : inputs) {
        const TokenSequence seq = tokenize_model(read_checkpoint_file(p), a.d_t);
        save_token_sequence(fs::path(a.out) / (seq.source_id + std::string(kTokenExt)), seq);
        tokens += static_cast<std::size_t>(seq.tokens.rows());
    }
    out << fmt::format("tokenized {} models into {} tokens (d_t={})\n", inputs.size(), tokens, a.d_t);
    return 0;
}

struct TrainArgs {
    std::string in, out, init;
    TrainingConfig train;
    AutoencoderConfig model;
};

int do_train(TrainArgs a, std::uint64_t seed, std::ostream& out) {
    require(a.in, "--in");
    require(a.out, "--out");
    a.train.seed = seed;
    std::vector<TrainingItem> items;
    for (const auto& p : list_files(a.in, kTokenExt)) items.push_back(TrainingItem::from_sequence(load_token_sequence(p)));
    if (items.empty()) throw Error(ErrorKind::EmptyDataset, "no token files in " + a.in);
    a.model.d_t = items.front().sequence.d_t;
    std::optional<AutoencoderWeights> init;
    if (!a.init.empty()) {
        init = AutoencoderWeights::load(a.init);
        a.model = init->config();
    }
    TrainingOptions opts;
    opts.checkpoint_path = fs::path(a.out);
    opts.on_epoch = [&](const EpochRecord& e) {
        spdlog::info("epoch {:>4} train {:.6g} val {:.6g} lr {:.3g}", e.epoch, e.train_loss, e.val_loss, e.lr);
    };
    const TrainingResult r = train(items, a.train, a.model, init, opts);
    write_text(a.out + ".history.jsonl", history_to_jsonl(r.history));
    out << fmt::format("trained on {} models; initial loss {:.6g}, best val {:.6g} at epoch {}; saved {}\n",
                       items.size(), r.history.initial_train_loss, r.history.epochs[r.history.best_epoch - 1].val_loss,
                       r.history.best_epoch, a.out);
    return 0;
}

struct GenerateArgs {
    std::string prompt, model, out, task, bandwidth = "scott", rank_by = "loss";
    std::size_t count = 10, keep = 3;
};

int do_generate(const GenerateArgs& a, std::uint64_t seed, std::ostream& out) {
    require(a.prompt, "--prompt");
    require(a.model, "--model");
    require(a.out, "--out");
    GenerationConfig gc;
    gc.count = a.count;
    gc.base_seed = seed;
    gc.bandwidth = BandwidthRule::parse(a.bandwidth);
    if (a.keep == 0 || a.keep > a.count) throw UsageError("--keep must lie in [1, --count]");
    const TensorMap prompt = read_checkpoint_file(a.prompt);
    const AutoencoderWeights ae = AutoencoderWeights::load(a.model);
    const std::optional<ToyTask> task = a.task.empty() ? task_of(prompt) : task_from_json(read_text(a.task));
    if (!task) throw Error(ErrorKind::EmptyProbe, "no probe task: pass --task or use a prompt with task_spec metadata");
    const Probe probe = make_probe(make_task_data(*task).probe);
    const auto kept = rank_candidates(generate(prompt, ae, gc), probe, a.keep,
                                      a.rank_by == "accuracy" ? RankCriterion::Accuracy : RankCriterion::Loss);
    fs::create_directories(a.out);
    for (const auto& c : kept) {
        const auto path = save_candidate(a.out, c);
        out << fmt::format("rank {} seed {} probe_{} {:.6g} -> {}\n", c.rank, c.seed, a.rank_by, c.probe_score,
                           path.string());
    }
    return 0;
}

struct EvaluateArgs {
    std::string in, model, out, bandwidth = "scott";
    std::size_t epochs = 1, count = 10, keep = 3, num_seeds = 3, batch_size = 32;
    double lr = 1e-2, drop_p = 0.3, sparsity = 0.5;
};

int do_evaluate(const EvaluateArgs& a, std::uint64_t seed, std::ostream& out) {
    require(a.in, "--in");
    require(a.model, "--model");
    const LoadedZoo zoo = load_zoo(a.in);
    if (zoo.prompts.size() != zoo.spec.tasks.size()) {
        throw Error(ErrorKind::InvalidArgument, "zoo in " + a.in + " lacks one prompt per task");
    }
    if (a.keep == 0 || a.keep > a.count) throw UsageError("--keep must lie in [1, --count]");
    ComparisonConfig cc;
    cc.budget.epochs = a.epochs;
    cc.budget.lr = a.lr;
    cc.budget.batch_size = a.batch_size;
    cc.candidates = a.count;
    cc.keep = a.keep;
    cc.bandwidth = BandwidthRule::parse(a.bandwidth);
    cc.drop_p = a.drop_p;
    cc.sparsity = a.sparsity;
    cc.seeds.clear();
    for (std::size_t i = 0; i < a.num_seeds; ++i) cc.seeds.push_back(seed + i);
    std::vector<TensorMap> prompts;
    for (const auto& p : zoo.prompts) prompts.push_back(p.weights);
    const EvalReport report =
        run_comparison(zoo.members, AutoencoderWeights::load(a.model), zoo.spec.tasks, prompts, zoo.spec.widths, cc);
    if (!a.out.empty()) write_text(a.out, report_to_json(report) + "\n");
    out << report_to_table(report);
    return 0;
}

struct ExportArgs {
    std::string in, manifest, model, out;
    std::size_t per_model = 100;
};

int do_export(const ExportArgs& a, std::uint64_t seed, std::ostream& out) {
    require(a.model, "--model");
    require(a.out, "--out");
    const AutoencoderWeights ae = AutoencoderWeights::load(a.model);
    std::vector<LabeledEmbedding> embs;
    for (const auto& p : model_inputs(a.in, a.manifest)) {
        const TensorMap m = read_checkpoint_file(p);
        const ArchInference arch = infer_architecture(m, p.filename().string());
        embs.push_back({embed_prompt(m, ae), std::string(to_string(arch.family)), std::string(to_string(arch.modality_hint))});
    }
    write_text(a.out, export_latents(embs, seed, a.per_model));
    out << fmt::format("exported latents of {} models to {}\n", embs.size(), a.out);
    return 0;
}

struct MergeArgs {
    std::string in, out;
    std::vector<std::string> donors;
    double drop_p = 0.3;
};

int do_merge(const MergeArgs& a, std::uint64_t seed, std::ostream& out) {
    require(a.in, "--in");
    require(a.out, "--out");
    if (a.donors.empty()) throw UsageError("at least one --donor is required");
    std::vector<TensorMap> donors;
    for (const auto& d : a.donors) donors.push_back(read_checkpoint_file(d));
    DareStats stats;
    const TensorMap merged = dare_merge(read_checkpoint_file(a.in), donors, a.drop_p, seed, &stats);
    write_checkpoint_file(a.out, merged);
    out << fmt::format("merged {} donors, kept {}/{} deltas -> {}\n", donors.size(), stats.kept, stats.total, a.out);
    return 0;
}

struct PruneArgs {
    std::string in, out;
    double sparsity = 0.5;
};

int do_prune(const PruneArgs& a, std::ostream& out) {
    require(a.in, "--in");
    require(a.out, "--out");
    const TensorMap pruned = magnitude_prune(read_checkpoint_file(a.in), a.sparsity);
    write_checkpoint_file(a.out, pruned);
    std::size_t zeros = 0;
    for (const auto& r : pruned.records()) zeros += static_cast<std::size_t>(std::count(r.values.begin(), r.values.end(), 0.0));
    out << fmt::format("pruned to {}/{} zeros -> {}\n", zeros, pruned.parameter_count(), a.out);
    return 0;
}

struct MakeZooArgs {
    std::string out;
    std::size_t count = 50, epochs = 30, num_tasks = 5;
    double lr = 1e-2;
};

int do_make_zoo(const MakeZooArgs& a, std::uint64_t seed, std::ostream& out) {
    require(a.out, "--out");
    ZooSpec spec;
    spec.count = a.count;
    spec.train_epochs = a.epochs;
    spec.lr = a.lr;
    spec.seed = seed;
    spec.tasks = default_tasks(seed, a.num_tasks);
    const auto members = build_zoo(spec);
    const auto prompts = build_prompts(spec);
    save_zoo(a.out, spec, members, prompts);
    double acc = 0.0;
    for (const auto& m : members) acc += m.test_accuracy;
    out << fmt::format("built {} models over {} tasks (mean test accuracy {:.4f}) in {}\n", members.size(),
                       spec.tasks.size(), acc / static_cast<double>(members.size()), a.out);
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Weight-space toolkit: collect, tokenize, train, generate and evaluate model zoos", "wf"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    Common common;
    CollectArgs collect;
    TokenizeArgs tokenize;
    TrainArgs train_args;
    GenerateArgs gen;
    EvaluateArgs eval;
    ExportArgs exp;
    MergeArgs merge;
    PruneArgs prune;
    MakeZooArgs zoo;

    auto* c = app.add_subcommand("collect", "Parse checkpoints in a directory into a manifest");
    c->add_option("--in", collect.in, "Directory of .safetensors checkpoints");
    c->add_option("--out", collect.out, "Manifest JSON path");

    auto* t = app.add_subcommand("tokenize", "Turn checkpoints into weight-token sequences");
    t->add_option("--in", tokenize.in, "Checkpoint file or directory");
    t->add_option("--manifest", tokenize.manifest, "Manifest from collect (instead of --in)");
    t->add_option("--out", tokenize.out, "Output directory for .tokens.safetensors files");
    t->add_option("--d-t", tokenize.d_t, "Token length");

    auto* tr = app.add_subcommand("train", "Train the weight autoencoder on token files");
    tr->add_option("--in", train_args.in, "Directory of .tokens.safetensors files");
    tr->add_option("--out", train_args.out, "Autoencoder checkpoint path (best validation weights)");
    tr->add_option("--init", train_args.init, "Resume from an autoencoder checkpoint");
    tr->add_option("--window", train_args.model.window, "Tokens per chunk");
    tr->add_option("--latent-dim", train_args.model.latent_dim, "Latent width");
    tr->add_option("--proj-dim", train_args.model.proj_dim, "Projection head width");
    tr->add_option("--num-heads", train_args.model.num_heads, "Attention heads");
    tr->add_option("--ff-dim", train_args.model.ff_dim, "Feed-forward width");
    tr->add_option("--enc-layers", train_args.model.num_layers_enc, "Encoder blocks");
    tr->add_option("--dec-layers", train_args.model.num_layers_dec, "Decoder blocks");
    tr->add_option("--epochs", train_args.train.epochs, "Training epochs");
    tr->add_option("--batch-size", train_args.train.batch_size, "Chunks per batch");
    tr->add_option("--max-lr", train_args.train.max_lr, "Peak learning rate of the one-cycle schedule");
    tr->add_option("--weight-decay", train_args.train.weight_decay, "AdamW decoupled weight decay");
    tr->add_option("--gamma", train_args.train.gamma, "Contrastive weight in [0, 1]");
    tr->add_option("--sigma-aug", train_args.train.sigma_aug, "Noise augmentation strength");
    tr->add_option("--temperature", train_args.train.temperature, "NT-Xent temperature");

    auto* g = app.add_subcommand("generate", "Sample candidate models around a prompt and keep the best");
    g->add_option("--prompt,--in", gen.prompt, "Prompt checkpoint");
    g->add_option("--model", gen.model, "Autoencoder checkpoint");
    g->add_option("--out", gen.out, "Output directory for ranked candidates");
    g->add_option("--task", gen.task, "Task JSON for the probe (default: prompt task_spec metadata)");
    g->add_option("--count", gen.count, "Candidates to generate");
    g->add_option("--keep", gen.keep, "Candidates to keep");
    g->add_option("--bandwidth", gen.bandwidth, "scott or fixed:<h>")->check(kBandwidth);
    g->add_option("--rank-by", gen.rank_by, "Probe criterion")->check(CLI::IsMember({"loss", "accuracy"}));

    auto* e = app.add_subcommand("evaluate", "Compare initializations on a zoo's tasks under one fine-tune budget");
    e->add_option("--in", eval.in, "Zoo directory from make-zoo");
    e->add_option("--model", eval.model, "Autoencoder checkpoint");
    e->add_option("--out", eval.out, "Report JSON path");
    e->add_option("--epochs", eval.epochs, "Fine-tune epochs per model");
    e->add_option("--batch-size", eval.batch_size, "Fine-tune batch size");
    e->add_option("--lr", eval.lr, "Fine-tune learning rate");
    e->add_option("--count", eval.count, "Candidates generated per prompt");
    e->add_option("--keep", eval.keep, "Candidates kept per prompt");
    e->add_option("--bandwidth", eval.bandwidth, "scott or fixed:<h>")->check(kBandwidth);
    e->add_option("--drop-p", eval.drop_p, "DARE drop probability");
    e->add_option("--sparsity", eval.sparsity, "Magnitude pruning sparsity");
    e->add_option("--num-seeds", eval.num_seeds, "Seeds seed, seed+1, ...");

    auto* x = app.add_subcommand("export-latents", "Write sampled token latents as CSV");
    x->add_option("--in", exp.in, "Checkpoint file or directory");
    x->add_option("--manifest", exp.manifest, "Manifest from collect (instead of --in)");
    x->add_option("--model", exp.model, "Autoencoder checkpoint");
    x->add_option("--out", exp.out, "CSV path");
    x->add_option("--per-model", exp.per_model, "Latents sampled per model");

    auto* m = app.add_subcommand("merge", "DARE-merge donors into a base model");
    m->add_option("--in", merge.in, "Base checkpoint");
    m->add_option("--donor", merge.donors, "Donor checkpoint (repeatable)");
    m->add_option("--out", merge.out, "Merged checkpoint path");
    m->add_option("--drop-p", merge.drop_p, "Drop probability in [0, 1)");

    auto* p = app.add_subcommand("prune", "Zero the smallest-magnitude weights");
    p->add_option("--in", prune.in, "Checkpoint");
    p->add_option("--out", prune.out, "Pruned checkpoint path");
    p->add_option("--sparsity", prune.sparsity, "Fraction of entries to zero, in [0, 1)");

    auto* z = app.add_subcommand("make-zoo", "Train a toy zoo of perceptrons plus one prompt per task");
    z->add_option("--out", zoo.out, "Zoo directory");
    z->add_option("--count", zoo.count, "Zoo size");
    z->add_option("--epochs", zoo.epochs, "Training epochs per member");
    z->add_option("--lr", zoo.lr, "Member learning rate");
    z->add_option("--num-tasks", zoo.num_tasks, "Number of toy tasks");

    for (auto* sub : app.get_subcommands({})) add_common(sub, common);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex, out, err);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex, out, err);
    } catch (const CLI::ParseError& ex) {
        err << "usage error: " << ex.what() << "\n";
        err << "Run with --help for more information.\n";
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    try {
        if (!common.config.empty()) apply_config(sub, common.config);
        set_logging(common.log_level);
        const std::uint64_t seed = resolve_seed(common);
        const std::string name = sub->get_name();
        if (name == "collect") return do_collect(collect, out);
        if (name == "tokenize") return do_tokenize(tokenize, out);
        if (name == "train") return do_train(train_args, seed, out);
        if (name == "generate") return do_generate(gen, seed, out);
        if (name == "evaluate") return do_evaluate(eval, seed, out);
        if (name == "export-latents") return do_export(exp, seed, out);
        if (name == "merge") return do_merge(merge, seed, out);
        if (name == "prune") return do_prune(prune, out);
        if (name == "make-zoo") return do_make_zoo(zoo, seed, out);
        throw UsageError("unknown subcommand " + name);
    } catch (const UsageError& ex) {
        err << "usage error: " << ex.what() << "\n";
        err << "Run '" << sub->get_name() << " --help' for the available flags.\n";
        return 2;
    } catch (const CLI::ParseError& ex) {
        err << "usage error: " << ex.what() << "\n";
        err << "Run '" << sub->get_name() << " --help' for the available flags.\n";
        return 2;
    } catch (const Error& ex) {
        err << "error: " << ex.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& ex) {
        err << "error: " << ex.what() << "\n";
        return 1;
    }
}

}  // namespace wf::cli
