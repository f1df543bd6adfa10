#include "wf/checkpoint_io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace wf {

using json = nlohmann::json;

namespace {

constexpr std::string_view kMetadataKey = "__metadata__";
constexpr std::string_view kSourceIdKey = "source_id";

template <typename T>
T load_le(const std::uint8_t* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        u |= static_cast<U>(p[i]) << (8 * i);
    }
    return std::bit_cast<T>(u);
}

template <typename T>
void store_le(std::vector<std::uint8_t>& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U u = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
}

bool checked_numel(const Shape& shape, std::size_t& out) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (__builtin_mul_overflow(n, d, &n)) return false;
    }
    out = n;
    return true;
}

Dtype parse_dtype(const std::string& s) {
    if (s == "F32") return Dtype::F32;
    if (s == "F64") return Dtype::F64;
    throw Error(ErrorKind::UnsupportedDtype, "dtype '" + s + "'");
}

struct PendingTensor {
    std::string name;
    Dtype dtype;
    Shape shape;
    std::uint64_t begin;
    std::uint64_t end;
};

}  // namespace

std::string_view to_string(Dtype dtype) {
    return dtype == Dtype::F32 ? "F32" : "F64";
}

std::size_t element_size(Dtype dtype) {
    return dtype == Dtype::F32 ? 4 : 8;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void TensorRecord::validate() const {
    if (name.empty()) throw Error(ErrorKind::InvalidArgument, "tensor name is empty");
    if (numel(shape) != values.size()) {
        throw Error(ErrorKind::InvalidArgument,
                    "tensor '" + name + "': shape product " + std::to_string(numel(shape)) +
                        " != value count " + std::to_string(values.size()));
    }
}

TensorMap::TensorMap(std::vector<TensorRecord> records, std::string source_id, Metadata metadata)
    : source_id_(std::move(source_id)), metadata_(std::move(metadata)) {
    records_.reserve(records.size());
    for (auto& r : records) insert(std::move(r));
}

void TensorMap::insert(TensorRecord record) {
    record.validate();
    auto it = std::lower_bound(records_.begin(), records_.end(), record.name,
                               [](const TensorRecord& r, const std::string& n) { return r.name < n; });
    if (it != records_.end() && it->name == record.name) {
        throw Error(ErrorKind::InvalidArgument, "duplicate tensor name '" + record.name + "'");
    }
    records_.insert(it, std::move(record));
}

const TensorRecord* TensorMap::find(std::string_view name) const {
    auto it = std::lower_bound(records_.begin(), records_.end(), name,
                               [](const TensorRecord& r, std::string_view n) { return r.name < n; });
    if (it != records_.end() && it->name == name) return &*it;
    return nullptr;
}

std::size_t TensorMap::parameter_count() const {
    std::size_t n = 0;
    for (const auto& r : records_) n += numel(r.shape);
    return n;
}

std::vector<std::pair<std::string, Shape>> TensorMap::shape_list() const {
    std::vector<std::pair<std::string, Shape>> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.emplace_back(r.name, r.shape);
    return out;
}

bool same_shapes(const TensorMap& a, const TensorMap& b) {
    return a.shape_list() == b.shape_list();
}

bool bitwise_equal(const TensorMap& a, const TensorMap& b) {
    if (a.source_id() != b.source_id() || a.metadata() != b.metadata()) return false;
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& ra = a.records()[i];
        const auto& rb = b.records()[i];
        if (ra.name != rb.name || ra.shape != rb.shape || ra.dtype != rb.dtype) return false;
        if (ra.values.size() != rb.values.size()) return false;
        if (!ra.values.empty() &&
            std::memcmp(ra.values.data(), rb.values.data(), ra.values.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

TensorMap parse_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw Error(ErrorKind::MalformedHeader, "buffer shorter than length prefix");
    const auto header_len = load_le<std::uint64_t>(bytes.data());
    if (header_len > bytes.size() - 8) {
        throw Error(ErrorKind::MalformedHeader, "header length exceeds buffer");
    }
    const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);
    json header = json::parse(header_begin, header_begin + header_len, nullptr, /*allow_exceptions=*/false);
    if (header.is_discarded() || !header.is_object()) {
        throw Error(ErrorKind::MalformedHeader, "header is not a JSON object");
    }

    const std::span<const std::uint8_t> data = bytes.subspan(8 + header_len);
    std::vector<PendingTensor> pending;
    Metadata metadata;

    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& key = it.key();
        const json& entry = it.value();
        if (key == kMetadataKey) {
            if (!entry.is_object()) throw Error(ErrorKind::MalformedHeader, "__metadata__ is not an object");
            for (auto m = entry.begin(); m != entry.end(); ++m) {
                if (!m.value().is_string()) {
                    throw Error(ErrorKind::MalformedHeader, "metadata value for '" + m.key() + "' is not a string");
                }
                metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (key.empty()) throw Error(ErrorKind::MalformedHeader, "empty tensor name");
        if (!entry.is_object()) throw Error(ErrorKind::MalformedHeader, "entry '" + key + "' is not an object");
        const auto dt = entry.find("dtype");
        const auto sh = entry.find("shape");
        const auto off = entry.find("data_offsets");
        if (dt == entry.end() || !dt->is_string() || sh == entry.end() || !sh->is_array() ||
            off == entry.end() || !off->is_array() || off->size() != 2) {
            throw Error(ErrorKind::MalformedHeader, "entry '" + key + "' lacks dtype/shape/data_offsets");
        }
        PendingTensor t{key, parse_dtype(dt->get<std::string>()), {}, 0, 0};
        for (const auto& d : *sh) {
            if (!d.is_number_unsigned()) throw Error(ErrorKind::MalformedHeader, "bad shape in '" + key + "'");
            t.shape.push_back(d.get<std::size_t>());
        }
        if (!(*off)[0].is_number_unsigned() || !(*off)[1].is_number_unsigned()) {
            throw Error(ErrorKind::MalformedHeader, "bad data_offsets in '" + key + "'");
        }
        t.begin = (*off)[0].get<std::uint64_t>();
        t.end = (*off)[1].get<std::uint64_t>();
        if (t.begin > t.end || t.end > data.size()) {
            throw Error(ErrorKind::OffsetOverlap, "data region of '" + key + "' exceeds buffer");
        }
        std::size_t n = 0;
        std::size_t nbytes = 0;
        if (!checked_numel(t.shape, n) || __builtin_mul_overflow(n, element_size(t.dtype), &nbytes) ||
            nbytes != t.end - t.begin) {
            throw Error(ErrorKind::MalformedHeader, "data region size of '" + key + "' disagrees with shape");
        }
        pending.push_back(std::move(t));
    }

    std::vector<const PendingTensor*> by_offset;
    for (const auto& t : pending) by_offset.push_back(&t);
    std::sort(by_offset.begin(), by_offset.end(), [](const PendingTensor* a, const PendingTensor* b) {
        return a->begin != b->begin ? a->begin < b->begin : a->end < b->end;
    });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->begin < by_offset[i - 1]->end) {
            throw Error(ErrorKind::OffsetOverlap,
                        "data regions of '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "' overlap");
        }
    }

    std::vector<TensorRecord> records;
    records.reserve(pending.size());
    for (auto& t : pending) {
        TensorRecord r{std::move(t.name), std::move(t.shape), t.dtype, {}};
        const std::size_t esize = element_size(r.dtype);
        const std::size_t n = (t.end - t.begin) / esize;
        r.values.resize(n);
        const std::uint8_t* p = data.data() + t.begin;
        for (std::size_t i = 0; i < n; ++i, p += esize) {
            r.values[i] = r.dtype == Dtype::F32 ? static_cast<double>(load_le<float>(p)) : load_le<double>(p);
        }
        records.push_back(std::move(r));
    }

    std::string source_id;
    if (auto it = metadata.find(std::string(kSourceIdKey)); it != metadata.end()) {
        source_id = it->second;
        metadata.erase(it);
    }
    return TensorMap(std::move(records), std::move(source_id), std::move(metadata));
}

std::vector<std::uint8_t> write_checkpoint(const TensorMap& map) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& r : map.records()) {
        r.validate();
        const std::uint64_t nbytes = r.values.size() * element_size(r.dtype);
        header[r.name] = {{"dtype", std::string(to_string(r.dtype))},
                          {"shape", r.shape},
                          {"data_offsets", {offset, offset + nbytes}}};
        offset += nbytes;
    }
    Metadata meta = map.metadata();
    if (!map.source_id().empty()) meta[std::string(kSourceIdKey)] = map.source_id();
    if (!meta.empty()) header[std::string(kMetadataKey)] = meta;

    std::string text = header.dump();
    while ((8 + text.size()) % 8 != 0) text.push_back(' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    store_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& r : map.records()) {
        for (double v : r.values) {
            if (r.dtype == Dtype::F32) {
                store_le<float>(out, static_cast<float>(v));
            } else {
                store_le<double>(out, v);
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "short write to '" + path.string() + "'");
}

TensorMap read_checkpoint_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    TensorMap map = parse_checkpoint(bytes);
    if (map.source_id().empty()) map.set_source_id(path.stem().string());
    return map;
}

void write_checkpoint_file(const std::filesystem::path& path, const TensorMap& map) {
    write_file_bytes(path, write_checkpoint(map));
}

// -- architecture inference ---------------------------------------------------

namespace {

constexpr ArchRule kRules[] = {
    {"patch_embed.conv4d", "4-D patch-embedding weight [E, C, ph, pw] -> vit, in_channels=C, embed_dim=E"},
    {"patch_embed.swin_blocks", "patch embedding plus windowed-attention tables -> swin"},
    {"stem.conv7x7", "4-D stem convolution [O, C, 7, 7] -> resnet, in_channels=C"},
    {"unet.encoder_decoder_conv", "4-D convolutions under both encoder and decoder prefixes -> unet"},
    {"stem.conv3x3_depthwise", "3x3 stem convolution plus depthwise [C, 1, k, k] kernels -> mobilenet"},
    {"yolo.cv_blocks", "model.N.* layers with cv1/cv2 convolution blocks -> yolo_like"},
    {"dense.stack", "only rank <= 2 weight/bias tensors -> mlp, in_channels = first layer fan-in"},
    {"filename.modality", "filename tokens select the sensing modality"},
    {"channels.modality", "input channel count selects the sensing modality"},
};

bool contains(std::string_view s, std::string_view needle) {
    return s.find(needle) != std::string_view::npos;
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool is_stem_key(std::string_view name) {
    static constexpr std::string_view kStems[] = {
        "conv1.weight",         "backbone.conv1.weight", "encoder.conv1.weight", "model.conv1.weight",
        "stem.conv1.weight",    "stem.conv.weight",      "stem.0.weight",        "features.0.0.weight",
        "conv_stem.weight",     "backbone.conv_stem.weight", "encoder.conv_stem.weight",
    };
    return std::find(std::begin(kStems), std::end(kStems), name) != std::end(kStems);
}

std::vector<std::string> filename_tokens(std::string_view filename) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : filename) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc)) {
            cur.push_back(static_cast<char>(std::tolower(uc)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

struct ModalityPattern {
    Modality modality;
    std::string_view token;
};

// Checked in order; bigrams are written "a b" and match adjacent tokens.
constexpr ModalityPattern kModalityPatterns[] = {
    {Modality::Sar, "sar"},           {Modality::Sar, "s1"},          {Modality::Sar, "sentinel1"},
    {Modality::Sar, "sentinel 1"},    {Modality::Sar, "radar"},       {Modality::Sar, "vv"},
    {Modality::Sar, "vh"},            {Modality::Multispectral, "multispectral"},
    {Modality::Multispectral, "multi spectral"}, {Modality::Multispectral, "hyperspectral"},
    {Modality::Multispectral, "s2"},  {Modality::Multispectral, "sentinel2"},
    {Modality::Multispectral, "sentinel 2"},     {Modality::Multispectral, "landsat"},
    {Modality::Multispectral, "landsat7"},       {Modality::Multispectral, "landsat8"},
    {Modality::Multispectral, "landsat9"},       {Modality::Multispectral, "msi"},
    {Modality::Multispectral, "ms"},  {Modality::Rgb, "rgb"},         {Modality::Rgb, "naip"},
    {Modality::Rgb, "aerial"},        {Modality::Rgb, "optical"},
};

std::optional<std::pair<Modality, std::string>> modality_from_filename(std::string_view filename) {
    const auto tokens = filename_tokens(filename);
    for (const auto& p : kModalityPatterns) {
        const auto space = p.token.find(' ');
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (space == std::string_view::npos) {
                if (tokens[i] == p.token) return std::pair{p.modality, tokens[i]};
            } else if (i + 1 < tokens.size() && tokens[i] == p.token.substr(0, space) &&
                       tokens[i + 1] == p.token.substr(space + 1)) {
                return std::pair{p.modality, tokens[i] + "-" + tokens[i + 1]};
            }
        }
    }
    return std::nullopt;
}

bool is_rank4(const TensorRecord& r) { return r.shape.size() == 4; }

}  // namespace

std::span<const ArchRule> architecture_rules() { return kRules; }

std::string_view to_string(ArchFamily family) {
    switch (family) {
        case ArchFamily::Vit: return "vit";
        case ArchFamily::Swin: return "swin";
        case ArchFamily::Resnet: return "resnet";
        case ArchFamily::Unet: return "unet";
        case ArchFamily::Mobilenet: return "mobilenet";
        case ArchFamily::Mlp: return "mlp";
        case ArchFamily::YoloLike: return "yolo_like";
        case ArchFamily::Unknown: return "unknown";
    }
    return "unknown";
}

std::string_view to_string(Modality modality) {
    switch (modality) {
        case Modality::Rgb: return "rgb";
        case Modality::Multispectral: return "multispectral";
        case Modality::Sar: return "sar";
        case Modality::Unknown: return "unknown";
    }
    return "unknown";
}

ArchFamily arch_family_from_string(std::string_view s) {
    for (auto f : {ArchFamily::Vit, ArchFamily::Swin, ArchFamily::Resnet, ArchFamily::Unet, ArchFamily::Mobilenet,
                   ArchFamily::Mlp, ArchFamily::YoloLike}) {
        if (to_string(f) == s) return f;
    }
    return ArchFamily::Unknown;
}

Modality modality_from_string(std::string_view s) {
    for (auto m : {Modality::Rgb, Modality::Multispectral, Modality::Sar}) {
        if (to_string(m) == s) return m;
    }
    return Modality::Unknown;
}

ArchInference infer_architecture(const TensorMap& map, std::string_view filename) {
    ArchInference out;
    const auto& recs = map.records();

    // Rule 1: patch embedding.
    for (const auto& r : recs) {
        if (contains(r.name, "patch_embed") && ends_with(r.name, "weight") && is_rank4(r)) {
            out.family = ArchFamily::Vit;
            out.embed_dim = r.shape[0];
            out.in_channels = r.shape[1];
            out.evidence.push_back({"patch_embed.conv4d", r.name});
            for (const auto& s : recs) {
                if (contains(s.name, "relative_position_bias_table")) {
                    out.family = ArchFamily::Swin;
                    out.evidence.push_back({"patch_embed.swin_blocks", s.name});
                    break;
                }
            }
            break;
        }
    }

    // Rule 2: 7x7 stem convolution.
    if (out.family == ArchFamily::Unknown) {
        for (const auto& r : recs) {
            if (is_stem_key(r.name) && is_rank4(r) && r.shape[2] == 7 && r.shape[3] == 7) {
                out.family = ArchFamily::Resnet;
                out.in_channels = r.shape[1];
                out.evidence.push_back({"stem.conv7x7", r.name});
                break;
            }
        }
    }

    // Rule 3: paired encoder/decoder convolutions.
    if (out.family == ArchFamily::Unknown) {
        const TensorRecord* enc = nullptr;
        const TensorRecord* dec = nullptr;
        for (const auto& r : recs) {
            if (!is_rank4(r)) continue;
            if (!enc && (contains(r.name, "encoder") || contains(r.name, "down"))) enc = &r;
            if (!dec && (contains(r.name, "decoder") || contains(r.name, "up"))) dec = &r;
        }
        if (enc && dec) {
            out.family = ArchFamily::Unet;
            out.in_channels = enc->shape[1];
            out.evidence.push_back({"unet.encoder_decoder_conv", enc->name});
            out.evidence.push_back({"unet.encoder_decoder_conv", dec->name});
        }
    }

    // MobileNet: 3x3 stem plus depthwise kernels.
    if (out.family == ArchFamily::Unknown) {
        const TensorRecord* stem = nullptr;
        const TensorRecord* depthwise = nullptr;
        for (const auto& r : recs) {
            if (!stem && is_stem_key(r.name) && is_rank4(r) && r.shape[2] == 3 && r.shape[3] == 3) stem = &r;
            if (!depthwise && is_rank4(r) && r.shape[1] == 1 && r.shape[2] == r.shape[3] && r.shape[2] > 1) {
                depthwise = &r;
            }
        }
        if (stem && depthwise) {
            out.family = ArchFamily::Mobilenet;
            out.in_channels = stem->shape[1];
            out.evidence.push_back({"stem.conv3x3_depthwise", stem->name});
            out.evidence.push_back({"stem.conv3x3_depthwise", depthwise->name});
        }
    }

    // YOLO-style: ultralytics model.N.cv1 blocks.
    if (out.family == ArchFamily::Unknown) {
        const TensorRecord* first = map.find("model.0.conv.weight");
        if (first && is_rank4(*first)) {
            for (const auto& r : recs) {
                if (r.name.rfind("model.", 0) == 0 && contains(r.name, ".cv1.")) {
                    out.family = ArchFamily::YoloLike;
                    out.in_channels = first->shape[1];
                    out.evidence.push_back({"yolo.cv_blocks", r.name});
                    break;
                }
            }
        }
    }

    // Dense stack.
    if (out.family == ArchFamily::Unknown && !recs.empty()) {
        const TensorRecord* first_weight = nullptr;
        bool dense = true;
        for (const auto& r : recs) {
            if (r.shape.size() > 2 || !(ends_with(r.name, "weight") || ends_with(r.name, "bias"))) {
                dense = false;
                break;
            }
            if (!first_weight && r.shape.size() == 2 && ends_with(r.name, "weight")) first_weight = &r;
        }
        if (dense && first_weight) {
            out.family = ArchFamily::Mlp;
            out.in_channels = first_weight->shape[1];
            out.evidence.push_back({"dense.stack", first_weight->name});
        }
    }

    if (auto m = modality_from_filename(filename)) {
        out.modality_hint = m->first;
        out.evidence.push_back({"filename.modality", m->second});
    } else if (out.in_channels && out.family != ArchFamily::Mlp) {
        const std::size_t c = *out.in_channels;
        out.modality_hint = c == 3 ? Modality::Rgb : (c <= 2 ? Modality::Sar : Modality::Multispectral);
        out.evidence.push_back({"channels.modality", std::to_string(c)});
    }
    return out;
}

// -- manifest -----------------------------------------------------------------

namespace {

json arch_to_json(const ArchInference& a) {
    json ev = json::array();
    for (const auto& e : a.evidence) ev.push_back({{"rule_id", e.rule_id}, {"matched_key", e.matched_key}});
    json j = {{"family", std::string(to_string(a.family))},
              {"modality_hint", std::string(to_string(a.modality_hint))},
              {"evidence", ev}};
    j["in_channels"] = a.in_channels ? json(*a.in_channels) : json(nullptr);
    j["embed_dim"] = a.embed_dim ? json(*a.embed_dim) : json(nullptr);
    return j;
}

ArchInference arch_from_json(const json& j) {
    ArchInference a;
    a.family = arch_family_from_string(j.at("family").get<std::string>());
    a.modality_hint = modality_from_string(j.at("modality_hint").get<std::string>());
    if (!j.at("in_channels").is_null()) a.in_channels = j.at("in_channels").get<std::size_t>();
    if (!j.at("embed_dim").is_null()) a.embed_dim = j.at("embed_dim").get<std::size_t>();
    for (const auto& e : j.at("evidence")) {
        a.evidence.push_back({e.at("rule_id").get<std::string>(), e.at("matched_key").get<std::string>()});
    }
    return a;
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

CollectionManifest build_manifest(const std::vector<std::filesystem::path>& paths) {
    CollectionManifest manifest;
    manifest.created_at = utc_timestamp();
    for (const auto& path : paths) {
        try {
            TensorMap map = read_checkpoint_file(path);
            ManifestEntry e;
            e.source_id = map.source_id();
            e.path = path.string();
            e.arch = infer_architecture(map, path.filename().string());
            e.parameter_count = map.parameter_count();
            manifest.entries.push_back(std::move(e));
        } catch (const Error& err) {
            spdlog::warn("skipping '{}': {}", path.string(), err.what());
            manifest.skipped.push_back({path.string(), err.what()});
        }
    }
    if (manifest.entries.empty()) {
        throw Error(ErrorKind::AllInputsFailed,
                    "none of " + std::to_string(paths.size()) + " input file(s) parsed");
    }
    std::stable_sort(manifest.entries.begin(), manifest.entries.end(),
                     [](const ManifestEntry& a, const ManifestEntry& b) { return a.source_id < b.source_id; });
    return manifest;
}

std::string manifest_to_json(const CollectionManifest& manifest) {
    json arr = json::array();
    for (const auto& e : manifest.entries) {
        arr.push_back({{"source_id", e.source_id},
                       {"path", e.path},
                       {"arch", arch_to_json(e.arch)},
                       {"parameter_count", e.parameter_count},
                       {"created_at", manifest.created_at}});
    }
    return arr.dump(2);
}

CollectionManifest manifest_from_json(std::string_view text) {
    json arr = json::parse(text, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) {
        throw Error(ErrorKind::InvalidArgument, "manifest is not a JSON array");
    }
    CollectionManifest m;
    try {
        for (const auto& j : arr) {
            ManifestEntry e;
            e.source_id = j.at("source_id").get<std::string>();
            e.path = j.at("path").get<std::string>();
            e.arch = arch_from_json(j.at("arch"));
            e.parameter_count = j.at("parameter_count").get<std::size_t>();
            if (m.created_at.empty() && j.contains("created_at")) m.created_at = j["created_at"].get<std::string>();
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& ex) {
        throw Error(ErrorKind::InvalidArgument, std::string("manifest entry: ") + ex.what());
    }
    return m;
}

std::vector<std::string> load_keyword_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        out.push_back(line.substr(b, e - b + 1));
    }
    return out;
}

}  // namespace wf
