#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wf/error.hpp"

namespace wf {

enum class Dtype { F32, F64 };

std::string_view to_string(Dtype dtype);
std::size_t element_size(Dtype dtype);

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);

/// One named parameter array. Values are held as double regardless of the
/// stored dtype; every F32 value is exactly representable, so F32 records
/// survive a parse/write cycle bit for bit.
struct TensorRecord {
    std::string name;
    Shape shape;
    Dtype dtype = Dtype::F32;
    std::vector<double> values;

    /// Throws InvalidArgument when the record violates its invariants.
    void validate() const;
};

using Metadata = std::map<std::string, std::string>;

/// Records of one checkpoint, always kept in canonical (lexicographic by
/// name) order.
class TensorMap {
public:
    TensorMap() = default;
    TensorMap(std::vector<TensorRecord> records, std::string source_id = {}, Metadata metadata = {});

    const std::vector<TensorRecord>& records() const { return records_; }
    std::vector<TensorRecord>& mutable_records() { return records_; }

    /// Inserts keeping canonical order; duplicate names are rejected.
    void insert(TensorRecord record);
    const TensorRecord* find(std::string_view name) const;

    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    std::size_t parameter_count() const;

    const std::string& source_id() const { return source_id_; }
    void set_source_id(std::string id) { source_id_ = std::move(id); }
    const Metadata& metadata() const { return metadata_; }
    Metadata& metadata() { return metadata_; }

    /// (name, shape) list in canonical order.
    std::vector<std::pair<std::string, Shape>> shape_list() const;

private:
    std::vector<TensorRecord> records_;
    std::string source_id_;
    Metadata metadata_;
};

/// Bitwise comparison of names, shapes, dtypes, values, source id and
/// metadata. Distinguishes -0.0 from +0.0.
bool bitwise_equal(const TensorMap& a, const TensorMap& b);
bool same_shapes(const TensorMap& a, const TensorMap& b);

// -- container format ---------------------------------------------------------
//
// [u64 LE header length H][H bytes JSON header][data buffer]
// header: { name: {"dtype": "F32"|"F64", "shape": [...], "data_offsets": [b, e]},
//           "__metadata__": {string: string} }
// Offsets are relative to the start of the data buffer.

TensorMap parse_checkpoint(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_checkpoint(const TensorMap& map);

TensorMap read_checkpoint_file(const std::filesystem::path& path);
void write_checkpoint_file(const std::filesystem::path& path, const TensorMap& map);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// -- architecture inference ---------------------------------------------------

enum class ArchFamily { Vit, Swin, Resnet, Unet, Mobilenet, Mlp, YoloLike, Unknown };
enum class Modality { Rgb, Multispectral, Sar, Unknown };

std::string_view to_string(ArchFamily family);
std::string_view to_string(Modality modality);
ArchFamily arch_family_from_string(std::string_view s);
Modality modality_from_string(std::string_view s);

struct Evidence {
    std::string rule_id;
    std::string matched_key;
    bool operator==(const Evidence&) const = default;
};

struct ArchInference {
    ArchFamily family = ArchFamily::Unknown;
    std::optional<std::size_t> in_channels;
    std::optional<std::size_t> embed_dim;
    Modality modality_hint = Modality::Unknown;
    std::vector<Evidence> evidence;

    bool operator==(const ArchInference&) const = default;
};

/// One entry of the shipped rule table. Rules are evaluated in table order.
struct ArchRule {
    std::string_view rule_id;
    std::string_view description;
};

std::span<const ArchRule> architecture_rules();

/// Pure function of (map, filename): structural rules first, then filename
/// heuristics for the modality.
ArchInference infer_architecture(const TensorMap& map, std::string_view filename);

// -- collection manifest ------------------------------------------------------

struct ManifestEntry {
    std::string source_id;
    std::string path;
    ArchInference arch;
    std::size_t parameter_count = 0;
};

struct SkipRecord {
    std::string path;
    std::string reason;
};

struct CollectionManifest {
    std::vector<ManifestEntry> entries;
    std::string created_at;
    std::vector<SkipRecord> skipped;
};

/// Parses every path; unreadable or corrupt files become skip records.
/// Throws AllInputsFailed when nothing parsed.
CollectionManifest build_manifest(const std::vector<std::filesystem::path>& paths);

std::string manifest_to_json(const CollectionManifest& manifest);
CollectionManifest manifest_from_json(std::string_view text);

/// Keyword vocabulary file: one keyword per line, blank lines ignored.
std::vector<std::string> load_keyword_vocabulary(const std::filesystem::path& path);

}  // namespace wf
