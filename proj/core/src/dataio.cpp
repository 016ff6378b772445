#include "cosim/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "cosim/rng.hpp"
#include "log_internal.hpp"

namespace cosim {

using nlohmann::json;

bool is_valid_image_id(std::string_view id) {
  if (id.empty()) return false;
  return std::none_of(id.begin(), id.end(),
                      [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; });
}

Label label_from_int(long value) {
  if (value == -1) return Label::ACloser;
  if (value == 1) return Label::BCloser;
  throw Error(ErrorCode::BadFormat, "label must be -1 or 1, got " + std::to_string(value));
}

// ---------------------------------------------------------------------------
// EmbeddingTable

EmbeddingTable::EmbeddingTable(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw Error(ErrorCode::DimMismatch, "embedding dim must be positive");
}

void EmbeddingTable::add(ImageId id, std::span<const float> values) {
  if (!is_valid_image_id(id)) throw Error(ErrorCode::BadId, "invalid image id '" + id + "'");
  if (values.size() != dim_) {
    throw Error(ErrorCode::DimMismatch, "row '" + id + "' has " + std::to_string(values.size()) +
                                            " values, table dim is " + std::to_string(dim_));
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, "row '" + id + "' has a non-finite value");
  }
  if (index_.contains(id)) throw Error(ErrorCode::DuplicateId, "duplicate image id '" + id + "'");
  index_.emplace(id, ids_.size());
  ids_.push_back(std::move(id));
  values_.insert(values_.end(), values.begin(), values.end());
}

bool EmbeddingTable::contains(std::string_view id) const { return index_.find(id) != index_.end(); }

std::optional<std::size_t> EmbeddingTable::find(std::string_view id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t EmbeddingTable::index_of(std::string_view id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error(ErrorCode::MissingId, "no embedding for image id '" + std::string(id) + "'");
  return it->second;
}

std::span<const float> EmbeddingTable::row(std::size_t index) const {
  return std::span<const float>(values_).subspan(index * dim_, dim_);
}

bool operator==(const EmbeddingTable& lhs, const EmbeddingTable& rhs) {
  if (lhs.dim_ != rhs.dim_ || lhs.ids_ != rhs.ids_ || lhs.values_.size() != rhs.values_.size()) return false;
  // Bitwise comparison so that -0.0/+0.0 differences are caught.
  return std::equal(lhs.values_.begin(), lhs.values_.end(), rhs.values_.begin(), [](float x, float y) {
    return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
  });
}

namespace {

constexpr std::string_view kEmbeddingMagic = "CSEB";
constexpr std::uint16_t kEmbeddingVersion = 1;

}  // namespace

std::string encode_embedding_table(const EmbeddingTable& table) {
  binio::Writer out;
  out.put_magic(kEmbeddingMagic);
  out.put<std::uint16_t>(kEmbeddingVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(table.dim()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& id = table.id_at(i);
    if (id.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw Error(ErrorCode::BadId, "image id longer than 65535 bytes");
    }
    out.put<std::uint16_t>(static_cast<std::uint16_t>(id.size()));
    out.put_bytes(id);
    out.put_span(table.row(i));
  }
  return out.take();
}

namespace {

// Number of records in `payload` when every record has `dim` values and the
// records end exactly at the end of the payload.
std::optional<std::size_t> count_records(std::string_view payload, std::size_t dim) {
  const std::size_t row_bytes = dim * sizeof(float);
  std::size_t pos = 0, records = 0;
  while (pos < payload.size()) {
    if (payload.size() - pos < sizeof(std::uint16_t)) return std::nullopt;
    std::uint16_t id_len;
    std::memcpy(&id_len, payload.data() + pos, sizeof id_len);
    pos += sizeof id_len;
    if (payload.size() - pos < id_len + row_bytes) return std::nullopt;
    pos += id_len + row_bytes;
    ++records;
  }
  return records;
}

}  // namespace

EmbeddingTable decode_embedding_table(std::string_view bytes, const std::string& context) {
  binio::Reader in(bytes, context);
  in.expect_magic(kEmbeddingMagic);
  const auto version = in.get<std::uint16_t>();
  if (version != kEmbeddingVersion) {
    throw Error(ErrorCode::BadVersion, context + ": unsupported CSEB version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  const auto dim = in.get<std::uint32_t>();
  if (dim == 0) throw Error(ErrorCode::DimMismatch, context + ": declared dim is 0");

  const std::string_view payload = bytes.substr(in.position());
  const auto parsed = count_records(payload, dim);
  if (parsed != count) {
    // Find out which header field disagrees with the payload.
    const std::size_t max_dim = std::min<std::size_t>(payload.size() / sizeof(float), 1 << 16);
    for (std::size_t alt = 1; alt <= max_dim; ++alt) {
      if (alt != dim && count_records(payload, alt) == count) {
        throw Error(ErrorCode::DimMismatch, context + ": header declares dim " + std::to_string(dim) +
                                                " but rows hold " + std::to_string(alt) + " values");
      }
    }
    throw Error(ErrorCode::CountMismatch,
                context + ": header declares " + std::to_string(count) + " rows of dim " + std::to_string(dim) +
                    (parsed ? ", payload holds " + std::to_string(*parsed) : ", payload length is inconsistent"));
  }

  EmbeddingTable table(dim);
  std::vector<float> row(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto id_len = in.get<std::uint16_t>();
    ImageId id(in.get_bytes(id_len));
    in.get_span(std::span<float>(row));
    table.add(std::move(id), row);
  }
  return table;
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  return decode_embedding_table(binio::read_file(path), path.string());
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  binio::write_file(path, encode_embedding_table(table));
}

// ---------------------------------------------------------------------------
// Label cleaning

LabelResolution resolve_labels(std::span<const RawAnnotation> raw) {
  LabelResolution out;
  for (const auto& ann : raw) {
    const int sum = std::accumulate(ann.votes.begin(), ann.votes.end(), 0);
    if (ann.discard.has_value() || ann.votes.empty() || sum == 0) {
      out.dropped.push_back(ann);
      continue;
    }
    out.kept.push_back(Triple{ann.ref, ann.a, ann.b, sum < 0 ? Label::ACloser : Label::BCloser});
  }
  return out;
}

double agreement_rate(std::span<const RawAnnotation> raw) {
  if (raw.empty()) throw Error(ErrorCode::EmptyInput, "agreement_rate needs at least one annotation");
  double total = 0.0;
  for (const auto& ann : raw) {
    const std::size_t n = ann.votes.size();
    if (n < 2) throw Error(ErrorCode::BadArgument, "agreement_rate needs >= 2 votes per annotation");
    std::size_t agree = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) agree += ann.votes[i] == ann.votes[j] ? 1 : 0;
    }
    total += static_cast<double>(agree) / static_cast<double>(n * (n - 1) / 2);
  }
  return total / static_cast<double>(raw.size());
}

namespace {

// Iterative Tarjan; returns the component id of every vertex.
std::vector<std::size_t> strongly_connected_components(std::size_t n,
                                                       const std::vector<std::vector<std::size_t>>& adj) {
  constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> index(n, kUnset), lowlink(n, 0), component(n, kUnset);
  std::vector<bool> on_stack(n, false);
  std::vector<std::size_t> stack;
  std::vector<std::pair<std::size_t, std::size_t>> call;  // (vertex, next edge)
  std::size_t counter = 0, components = 0;

  for (std::size_t root = 0; root < n; ++root) {
    if (index[root] != kUnset) continue;
    call.emplace_back(root, 0);
    while (!call.empty()) {
      auto& [v, edge] = call.back();
      if (edge == 0 && index[v] == kUnset) {
        index[v] = lowlink[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
      }
      if (edge < adj[v].size()) {
        const std::size_t w = adj[v][edge++];
        if (index[w] == kUnset) {
          call.emplace_back(w, 0);
        } else if (on_stack[w]) {
          lowlink[v] = std::min(lowlink[v], index[w]);
        }
        continue;
      }
      if (lowlink[v] == index[v]) {
        std::size_t w;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack[w] = false;
          component[w] = components;
        } while (w != v);
        ++components;
      }
      const std::size_t finished = v;
      call.pop_back();
      if (!call.empty()) {
        const std::size_t parent = call.back().first;
        lowlink[parent] = std::min(lowlink[parent], lowlink[finished]);
      }
    }
  }
  return component;
}

}  // namespace

std::vector<std::size_t> detect_preference_cycles(std::span<const Triple> triples) {
  std::map<std::string_view, std::vector<std::size_t>> by_ref;
  for (std::size_t i = 0; i < triples.size(); ++i) by_ref[triples[i].ref].push_back(i);

  std::vector<std::size_t> flagged;
  for (const auto& [ref, members] : by_ref) {
    std::map<std::string_view, std::size_t> vertex;
    auto vertex_of = [&](std::string_view id) {
      auto [it, inserted] = vertex.emplace(id, vertex.size());
      return it->second;
    };
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // loser -> winner
    edges.reserve(members.size());
    for (std::size_t i : members) {
      const auto& t = triples[i];
      const std::size_t a = vertex_of(t.a), b = vertex_of(t.b);
      edges.push_back(t.y == Label::ACloser ? std::pair{b, a} : std::pair{a, b});
    }
    std::vector<std::vector<std::size_t>> adj(vertex.size());
    for (auto [from, to] : edges) adj[from].push_back(to);
    const auto component = strongly_connected_components(vertex.size(), adj);
    for (std::size_t k = 0; k < members.size(); ++k) {
      const auto [from, to] = edges[k];
      if (from != to && component[from] == component[to]) flagged.push_back(members[k]);
    }
  }
  std::sort(flagged.begin(), flagged.end());
  return flagged;
}

std::vector<Triple> clean_dataset(std::span<const Triple> triples) {
  const auto flagged = detect_preference_cycles(triples);
  std::vector<Triple> out;
  out.reserve(triples.size() - flagged.size());
  auto next = flagged.begin();
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (next != flagged.end() && *next == i) {
      ++next;
      continue;
    }
    out.push_back(triples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clusters and bundles

void validate_cluster(const ContextCluster& cluster) {
  for (const auto& t : cluster.triples) {
    if (t.ref != cluster.anchor_ref) {
      throw Error(ErrorCode::BadFormat, "cluster '" + cluster.name + "' has a triple with reference '" + t.ref +
                                            "' but anchor is '" + cluster.anchor_ref + "'");
    }
  }
}

ClusterSplit split_cluster(const ContextCluster& cluster, std::size_t train_count, std::uint64_t seed) {
  const std::size_t n = cluster.triples.size();
  if (train_count == 0 || train_count >= n) {
    throw Error(ErrorCode::TrainCountOutOfRange, "train_count " + std::to_string(train_count) +
                                                     " must lie strictly between 0 and " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  ClusterSplit split{{cluster.name, cluster.anchor_ref, {}}, {cluster.name, cluster.anchor_ref, {}}};
  // Each side keeps the original file order so outputs are easy to diff.
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_count));
  std::vector<std::size_t> val_idx(order.begin() + static_cast<std::ptrdiff_t>(train_count), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  for (auto i : train_idx) split.train.triples.push_back(cluster.triples[i]);
  for (auto i : val_idx) split.val.triples.push_back(cluster.triples[i]);
  return split;
}

const ContextCluster& DatasetBundle::cluster(std::string_view name) const {
  for (const auto& c : clusters) {
    if (c.name == name) return c;
  }
  throw Error(ErrorCode::BadArgument, "no cluster named '" + std::string(name) + "'");
}

BundleCheck validate_bundle(const DatasetBundle& bundle) {
  auto check_ids = [&](const Triple& t, std::string_view where) {
    for (const auto* id : {&t.ref, &t.a, &t.b}) {
      if (!bundle.embeddings.contains(*id)) {
        throw Error(ErrorCode::MissingId, std::string(where) + ": image id '" + *id + "' has no embedding");
      }
    }
    if (t.ref == t.a || t.ref == t.b || t.a == t.b) {
      throw Error(ErrorCode::BadFormat, std::string(where) + ": triple ids must be pairwise distinct (" + t.ref +
                                            ", " + t.a + ", " + t.b + ")");
    }
  };

  std::set<std::string_view> seen_refs, seen_candidates;
  for (const auto& c : bundle.clusters) {
    validate_cluster(c);
    for (const auto& t : c.triples) {
      check_ids(t, "cluster " + c.name);
      seen_refs.insert(t.ref);
      seen_candidates.insert(t.a);
      seen_candidates.insert(t.b);
    }
  }
  for (const auto& t : bundle.cc_validation) {
    check_ids(t, "cc_validation");
    seen_refs.insert(t.ref);
    seen_candidates.insert(t.a);
    seen_candidates.insert(t.b);
  }

  BundleCheck check;
  std::size_t ref_overlap = 0, candidate_overlap = 0;
  for (const auto& t : bundle.cc_test) {
    check_ids(t, "cc_test");
    for (const auto* id : {&t.ref, &t.a, &t.b}) {
      if (seen_refs.contains(*id)) ++ref_overlap;
      if (seen_candidates.contains(*id)) ++candidate_overlap;
    }
  }
  if (ref_overlap > 0) {
    check.overlap_warnings.push_back("cc_test shares " + std::to_string(ref_overlap) +
                                     " id occurrences with training/validation references");
  }
  if (candidate_overlap > 0) {
    check.overlap_warnings.push_back("cc_test shares " + std::to_string(candidate_overlap) +
                                     " id occurrences with training/validation candidates");
  }
  for (const auto& w : check.overlap_warnings) detail::warn("{}", w);
  return check;
}

// ---------------------------------------------------------------------------
// JSON Lines

namespace {

template <typename Fn>
void for_each_json_line(std::string_view text, const std::string& context, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const bool blank = std::all_of(line.begin(), line.end(),
                                   [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; });
    if (!blank) {
      json obj;
      try {
        obj = json::parse(line);
      } catch (const json::parse_error& e) {
        throw Error(ErrorCode::BadFormat, context + ":" + std::to_string(line_no) + ": " + e.what());
      }
      if (!obj.is_object()) throw Error(ErrorCode::BadFormat, context + ":" + std::to_string(line_no) + ": not an object");
      try {
        fn(obj, context + ":" + std::to_string(line_no));
      } catch (const json::exception& e) {
        throw Error(ErrorCode::BadFormat, context + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (end == text.size()) break;
    start = end + 1;
  }
}

ImageId id_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key) || !obj[key].is_string()) {
    throw Error(ErrorCode::BadFormat, where + ": field '" + key + "' must be a string");
  }
  auto id = obj[key].get<std::string>();
  if (!is_valid_image_id(id)) throw Error(ErrorCode::BadId, where + ": invalid image id '" + id + "'");
  return id;
}

void check_distinct(const ImageId& r, const ImageId& a, const ImageId& b, const std::string& where) {
  if (r == a || r == b || a == b) {
    throw Error(ErrorCode::BadFormat, where + ": ref, a and b must be pairwise distinct");
  }
}

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error(ErrorCode::BadFormat, where + ": unknown field '" + key + "'");
    }
  }
}

Triple triple_from_json(const json& obj, const std::string& where) {
  Triple t{id_field(obj, "ref", where), id_field(obj, "a", where), id_field(obj, "b", where), Label::ACloser};
  check_distinct(t.ref, t.a, t.b, where);
  if (!obj.contains("y") || !obj["y"].is_number_integer()) {
    throw Error(ErrorCode::BadFormat, where + ": field 'y' must be -1 or 1");
  }
  t.y = label_from_int(obj["y"].get<long>());
  return t;
}

RawAnnotation annotation_from_json(const json& obj, const std::string& where) {
  RawAnnotation ann{id_field(obj, "ref", where), id_field(obj, "a", where), id_field(obj, "b", where), {}, {}};
  check_distinct(ann.ref, ann.a, ann.b, where);
  const auto& votes = obj.at("votes");
  if (!votes.is_array() || votes.empty()) throw Error(ErrorCode::BadFormat, where + ": 'votes' must be a non-empty array");
  for (const auto& v : votes) {
    if (!v.is_number_integer()) throw Error(ErrorCode::BadFormat, where + ": votes must be -1 or 1");
    ann.votes.push_back(sign(label_from_int(v.get<long>())));
  }
  if (obj.contains("discard")) {
    const auto reason = obj["discard"].get<std::string>();
    if (reason == "equally_similar") {
      ann.discard = DiscardReason::EquallySimilar;
    } else if (reason == "both_irrelevant") {
      ann.discard = DiscardReason::BothIrrelevant;
    } else {
      throw Error(ErrorCode::BadFormat, where + ": unknown discard reason '" + reason + "'");
    }
  }
  return ann;
}

}  // namespace

std::vector<Triple> parse_triples_jsonl(std::string_view text, const std::string& context) {
  std::vector<Triple> out;
  for_each_json_line(text, context, [&](const json& obj, const std::string& where) {
    check_keys(obj, {"ref", "a", "b", "y"}, where);
    out.push_back(triple_from_json(obj, where));
  });
  return out;
}

std::string format_triples_jsonl(std::span<const Triple> triples) {
  std::string out;
  for (const auto& t : triples) {
    json obj = {{"ref", t.ref}, {"a", t.a}, {"b", t.b}, {"y", sign(t.y)}};
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::vector<Triple> load_triples(const std::filesystem::path& path) {
  return parse_triples_jsonl(binio::read_file(path), path.string());
}

void save_triples(std::span<const Triple> triples, const std::filesystem::path& path) {
  binio::write_file(path, format_triples_jsonl(triples));
}

std::vector<RawAnnotation> parse_annotations_jsonl(std::string_view text, const std::string& context) {
  std::vector<RawAnnotation> out;
  for_each_json_line(text, context, [&](const json& obj, const std::string& where) {
    check_keys(obj, {"ref", "a", "b", "y", "votes", "discard"}, where);
    out.push_back(annotation_from_json(obj, where));
  });
  return out;
}

std::string format_annotations_jsonl(std::span<const RawAnnotation> raw) {
  std::string out;
  for (const auto& ann : raw) {
    json obj = {{"ref", ann.ref}, {"a", ann.a}, {"b", ann.b}, {"votes", ann.votes}};
    if (ann.discard) {
      obj["discard"] = *ann.discard == DiscardReason::EquallySimilar ? "equally_similar" : "both_irrelevant";
    }
    out += obj.dump();
    out += '\n';
  }
  return out;
}

MixedTriples parse_mixed_jsonl(std::string_view text, const std::string& context) {
  MixedTriples out;
  for_each_json_line(text, context, [&](const json& obj, const std::string& where) {
    check_keys(obj, {"ref", "a", "b", "y", "votes", "discard"}, where);
    if (obj.contains("votes")) {
      out.annotations.push_back(annotation_from_json(obj, where));
    } else {
      if (obj.contains("discard")) throw Error(ErrorCode::BadFormat, where + ": 'discard' requires 'votes'");
      out.labelled.push_back(triple_from_json(obj, where));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifest

DatasetBundle load_dataset(const std::filesystem::path& manifest) {
  const auto base = manifest.parent_path();
  json doc;
  try {
    doc = json::parse(binio::read_file(manifest));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::BadFormat, manifest.string() + ": " + e.what());
  }
  DatasetBundle bundle;
  try {
    for (const auto& [key, _] : doc.items()) {
      if (key != "embeddings" && key != "clusters" && key != "cc_validation" && key != "cc_test") {
        throw Error(ErrorCode::BadFormat, manifest.string() + ": unknown key '" + key + "'");
      }
    }
    bundle.embeddings = load_embedding_table(base / doc.at("embeddings").get<std::string>());
    for (const auto& entry : doc.at("clusters")) {
      ContextCluster c;
      c.name = entry.at("name").get<std::string>();
      c.anchor_ref = entry.at("anchor_ref").get<std::string>();
      c.triples = load_triples(base / entry.at("triples").get<std::string>());
      bundle.clusters.push_back(std::move(c));
    }
    bundle.cc_validation = load_triples(base / doc.at("cc_validation").get<std::string>());
    bundle.cc_test = load_triples(base / doc.at("cc_test").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadFormat, manifest.string() + ": " + e.what());
  }
  validate_bundle(bundle);
  return bundle;
}

void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "clusters");
  save_embedding_table(bundle.embeddings, dir / "embeddings.cseb");
  json clusters = json::array();
  for (const auto& c : bundle.clusters) {
    const std::string rel = "clusters/" + c.name + ".jsonl";
    save_triples(c.triples, dir / rel);
    clusters.push_back({{"name", c.name}, {"anchor_ref", c.anchor_ref}, {"triples", rel}});
  }
  save_triples(bundle.cc_validation, dir / "cc_validation.jsonl");
  save_triples(bundle.cc_test, dir / "cc_test.jsonl");
  json doc = {{"embeddings", "embeddings.cseb"},
              {"clusters", clusters},
              {"cc_validation", "cc_validation.jsonl"},
              {"cc_test", "cc_test.jsonl"}};
  binio::write_file(dir / "dataset.json", doc.dump(2) + "\n");
}

}  // namespace cosim
