#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cosim {

/// Image identifier token: non-empty and free of whitespace.
using ImageId = std::string;

bool is_valid_image_id(std::string_view id);

/// 2AFC label. ACloser (-1) means candidate A is closer to the reference.
enum class Label : std::int8_t { ACloser = -1, BCloser = +1 };

constexpr int sign(Label y) { return static_cast<int>(y); }
constexpr Label negate(Label y) { return y == Label::ACloser ? Label::BCloser : Label::ACloser; }
/// Throws BadFormat for anything other than -1 or +1.
Label label_from_int(long value);

struct Triple {
  ImageId ref;
  ImageId a;
  ImageId b;
  Label y = Label::ACloser;

  friend bool operator==(const Triple&, const Triple&) = default;
};

/// Precomputed embedding vectors keyed by image id, stored as f32 in the
/// order they were inserted.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }

  /// Throws DuplicateId, BadId, DimMismatch or NonFiniteValue.
  void add(ImageId id, std::span<const float> values);

  bool contains(std::string_view id) const;
  /// Row index of `id`; throws MissingId.
  std::size_t index_of(std::string_view id) const;
  std::optional<std::size_t> find(std::string_view id) const;

  std::span<const float> row(std::size_t index) const;
  std::span<const float> row(std::string_view id) const { return row(index_of(id)); }
  const ImageId& id_at(std::size_t index) const { return ids_[index]; }
  const std::vector<ImageId>& ids() const { return ids_; }
  std::span<const float> values() const { return values_; }

  friend bool operator==(const EmbeddingTable& lhs, const EmbeddingTable& rhs);

 private:
  struct Hash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const { return std::hash<std::string_view>{}(s); }
  };

  std::size_t dim_ = 0;
  std::vector<ImageId> ids_;
  std::vector<float> values_;
  std::unordered_map<ImageId, std::size_t, Hash, std::equal_to<>> index_;
};

// CSEB: "CSEB", u16 version=1, u32 count, u32 dim, then count records of
// [u16 id length, id bytes, dim x f32]. Little-endian.
std::string encode_embedding_table(const EmbeddingTable& table);
EmbeddingTable decode_embedding_table(std::string_view bytes, const std::string& context = "CSEB");
EmbeddingTable load_embedding_table(const std::filesystem::path& path);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);

enum class DiscardReason { EquallySimilar, BothIrrelevant };

struct RawAnnotation {
  ImageId ref;
  ImageId a;
  ImageId b;
  std::vector<int> votes;
  std::optional<DiscardReason> discard;
};

struct LabelResolution {
  std::vector<Triple> kept;
  std::vector<RawAnnotation> dropped;
};

/// Majority vote per annotation. Discarded annotations and vote-sum ties are
/// dropped.
LabelResolution resolve_labels(std::span<const RawAnnotation> raw);

/// Mean pairwise percent agreement between annotators. Throws EmptyInput.
double agreement_rate(std::span<const RawAnnotation> raw);

/// Indices of triples whose preference edge lies on a directed cycle of its
/// reference's candidate graph (edge loser -> winner).
std::vector<std::size_t> detect_preference_cycles(std::span<const Triple> triples);

/// Input minus every triple flagged by detect_preference_cycles.
std::vector<Triple> clean_dataset(std::span<const Triple> triples);

struct ContextCluster {
  std::string name;
  ImageId anchor_ref;
  std::vector<Triple> triples;
};

/// Throws BadFormat when a triple does not use `anchor_ref` as reference.
void validate_cluster(const ContextCluster& cluster);

struct ClusterSplit {
  ContextCluster train;
  ContextCluster val;
};

/// Seeded Fisher-Yates partition; identical on every platform for a seed.
/// Throws TrainCountOutOfRange unless 0 < train_count < |triples|.
ClusterSplit split_cluster(const ContextCluster& cluster, std::size_t train_count, std::uint64_t seed);

struct DatasetBundle {
  EmbeddingTable embeddings;
  std::vector<ContextCluster> clusters;
  std::vector<Triple> cc_validation;
  std::vector<Triple> cc_test;

  const ContextCluster& cluster(std::string_view name) const;
};

struct BundleCheck {
  std::vector<std::string> overlap_warnings;
};

/// Every id must exist in the embedding table (MissingId otherwise). Overlap
/// between cc_test and the training/validation sets is reported, not fatal.
BundleCheck validate_bundle(const DatasetBundle& bundle);

// Triples file: one JSON object per line.
//   {"ref": str, "a": str, "b": str, "y": -1|1}
// Raw annotations carry "votes": [int] and optionally
//   "discard": "equally_similar"|"both_irrelevant"; "y" is then optional.
std::vector<Triple> parse_triples_jsonl(std::string_view text, const std::string& context = "triples");
std::string format_triples_jsonl(std::span<const Triple> triples);
std::vector<Triple> load_triples(const std::filesystem::path& path);
void save_triples(std::span<const Triple> triples, const std::filesystem::path& path);

std::vector<RawAnnotation> parse_annotations_jsonl(std::string_view text,
                                                   const std::string& context = "annotations");
std::string format_annotations_jsonl(std::span<const RawAnnotation> raw);

/// Mixed file for the clean command: lines with "votes" become annotations,
/// lines with only "y" become already-resolved triples.
struct MixedTriples {
  std::vector<RawAnnotation> annotations;
  std::vector<Triple> labelled;
};
MixedTriples parse_mixed_jsonl(std::string_view text, const std::string& context = "triples");

// Dataset manifest (dataset.json):
//   {"embeddings": path, "clusters": [{"name", "anchor_ref", "triples"}],
//    "cc_validation": path, "cc_test": path}
// Paths are relative to the manifest's directory.
DatasetBundle load_dataset(const std::filesystem::path& manifest);
void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir);

}  // namespace cosim
