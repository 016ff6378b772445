#include "run_config.hpp"

#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "cosim/rng.hpp"

namespace cosim::cli {

using json = nlohmann::json;

namespace {

// Reads keys from one JSON object and rejects any key nobody asked for.
class Section {
 public:
  Section(const json& doc, std::string where) : doc_(doc), where_(std::move(where)) {
    if (!doc_.is_object()) throw Error(ErrorCode::BadFormat, where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& value) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    try {
      value = doc_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error(ErrorCode::BadFormat, fmt::format("{}.{}: wrong type", where_, key));
    }
  }

  std::optional<Section> child(const char* key) {
    seen_.insert(key);
    if (!doc_.contains(key)) return std::nullopt;
    return Section(doc_.at(key), where_ + "." + key);
  }

  bool has(const char* key) {
    seen_.insert(key);
    return doc_.contains(key);
  }

  const json& at(const char* key) const { return doc_.at(key); }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.contains(key)) throw Error(ErrorCode::BadFormat, fmt::format("{}: unknown key \"{}\"", where_, key));
    }
  }

 private:
  const json& doc_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Fn>
auto rethrow_as_format(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::BadArgument) throw Error(ErrorCode::BadFormat, where + ": " + e.what());
    throw;
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

void RunConfig::validate() const {
  if (threads == 0) throw Error(ErrorCode::BadConfig, "threads must be positive");
  world.validate();
  train.validate();
  regressor.validate();
  if (shape.proj_hidden == 0 || shape.proj_dim == 0) throw Error(ErrorCode::BadConfig, "model shape must be positive");
  for (std::size_t h : shape.rank_hidden) {
    if (h == 0) throw Error(ErrorCode::BadConfig, "ranking block widths must be positive");
  }
  if (train_count == 0) throw Error(ErrorCode::BadConfig, "train_count must be positive");
  if (pca_dim == 0) throw Error(ErrorCode::BadConfig, "pca_dim must be positive");
  if (map_resolution == 0 || trace_resolution == 0) throw Error(ErrorCode::BadConfig, "resolutions must be positive");
  if (map_axes.empty()) throw Error(ErrorCode::BadConfig, "map_axes must not be empty");
  for (const auto& axes : map_axes) {
    if (axes.empty() || axes.size() > 2) throw Error(ErrorCode::BadConfig, "each map needs 1 or 2 axes");
  }
  if (repeats == 0) throw Error(ErrorCode::BadConfig, "repeats must be positive");
  for (std::size_t r : sweep_r) {
    if (r == 0) throw Error(ErrorCode::BadConfig, "sweep r values must be positive");
  }
  if (filter.kind == FilterRule::Kind::TopK && filter.top_k == 0) throw Error(ErrorCode::BadConfig, "filter top_k must be positive");
}

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string("config: ") + e.what());
  }
  RunConfig cfg;
  Section root(doc, "config");

  std::string path;
  if (root.has("dataset")) {
    root.get("dataset", path);
    cfg.dataset = resolve(base_dir, path);
  }
  if (root.has("out")) {
    root.get("out", path);
    cfg.out = resolve(base_dir, path);
  }
  root.get("seed", cfg.seed);
  root.get("threads", cfg.threads);
  if (root.has("predict_mode")) {
    std::string mode;
    root.get("predict_mode", mode);
    cfg.mode = rethrow_as_format("config.predict_mode", [&] { return parse_predict_mode(mode); });
  }

  if (auto w = root.child("world")) {
    auto& wc = cfg.world;
    w->get("n_images", wc.n_images);
    w->get("latent_dim", wc.latent_dim);
    w->get("embed_dim", wc.embed_dim);
    w->get("n_contexts", wc.n_contexts);
    w->get("context_sharpness", wc.context_sharpness);
    w->get("noise_sigma", wc.noise_sigma);
    w->get("triples_per_cluster", wc.triples_per_cluster);
    w->get("cc_val_size", wc.cc_val_size);
    w->get("cc_test_size", wc.cc_test_size);
    w->get("min_triples_per_ref", wc.min_triples_per_ref);
    w->get("test_image_fraction", wc.test_image_fraction);
    w->finish();
  }

  if (auto t = root.child("train")) {
    t->get("epochs", cfg.train.epochs);
    t->get("batch_size", cfg.train.batch_size);
    t->get("lr", cfg.train.lr);
    t->get("triplet_weight", cfg.train.triplet_weight);
    t->get("margin", cfg.train.margin);
    t->get("swap_augment", cfg.train.swap_augment);
    t->get("train_count", cfg.train_count);
    t->get("proj_hidden", cfg.shape.proj_hidden);
    t->get("proj_dim", cfg.shape.proj_dim);
    t->get("rank_hidden", cfg.shape.rank_hidden);
    t->finish();
  }

  if (auto e = root.child("ensemble")) {
    e->get("pca_dim", cfg.pca_dim);
    e->get("map_resolution", cfg.map_resolution);
    e->get("map_axes", cfg.map_axes);
    if (e->has("strategy")) {
      std::string s;
      e->get("strategy", s);
      cfg.strategy = rethrow_as_format("config.ensemble.strategy", [&] { return parse_strategy(s); });
    }
    e->get("repeats", cfg.repeats);
    e->get("sweep_r", cfg.sweep_r);
    if (auto f = e->child("filter")) {
      if (f->has("kind")) {
        std::string kind;
        f->get("kind", kind);
        if (kind == "top_k") {
          cfg.filter.kind = FilterRule::Kind::TopK;
        } else if (kind == "threshold") {
          cfg.filter.kind = FilterRule::Kind::Threshold;
        } else {
          throw Error(ErrorCode::BadFormat, "config.ensemble.filter.kind: expected top_k or threshold");
        }
      }
      f->get("top_k", cfg.filter.top_k);
      f->get("threshold", cfg.filter.threshold);
      if (f->has("scores")) {
        std::string scores;
        f->get("scores", scores);
        cfg.filter_scores = rethrow_as_format("config.ensemble.filter.scores", [&] { return parse_score_source(scores); });
      }
      f->finish();
    }
    e->finish();
  }

  if (auto r = root.child("regressor")) {
    r->get("hidden", cfg.regressor.hidden);
    r->get("epochs", cfg.regressor.epochs);
    r->get("batch_size", cfg.regressor.batch_size);
    r->get("lr", cfg.regressor.lr);
    r->finish();
  }

  if (auto tr = root.child("trace")) {
    tr->get("enabled", cfg.trace);
    tr->get("resolution", cfg.trace_resolution);
    tr->finish();
  }
  root.finish();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(binio::read_file(path), path.parent_path());
}

std::string run_config_json(const RunConfig& cfg) {
  const auto& wc = cfg.world;
  json doc = {
      {"out", cfg.out.generic_string()},
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"predict_mode", std::string(to_string(cfg.mode))},
      {"world",
       {{"n_images", wc.n_images},
        {"latent_dim", wc.latent_dim},
        {"embed_dim", wc.embed_dim},
        {"n_contexts", wc.n_contexts},
        {"context_sharpness", wc.context_sharpness},
        {"noise_sigma", wc.noise_sigma},
        {"triples_per_cluster", wc.triples_per_cluster},
        {"cc_val_size", wc.cc_val_size},
        {"cc_test_size", wc.cc_test_size},
        {"min_triples_per_ref", wc.min_triples_per_ref},
        {"test_image_fraction", wc.test_image_fraction}}},
      {"train",
       {{"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"lr", cfg.train.lr},
        {"triplet_weight", cfg.train.triplet_weight},
        {"margin", cfg.train.margin},
        {"swap_augment", cfg.train.swap_augment},
        {"train_count", cfg.train_count},
        {"proj_hidden", cfg.shape.proj_hidden},
        {"proj_dim", cfg.shape.proj_dim},
        {"rank_hidden", cfg.shape.rank_hidden}}},
      {"ensemble",
       {{"pca_dim", cfg.pca_dim},
        {"map_resolution", cfg.map_resolution},
        {"map_axes", cfg.map_axes},
        {"strategy", std::string(to_string(cfg.strategy))},
        {"repeats", cfg.repeats},
        {"sweep_r", cfg.sweep_r},
        {"filter",
         {{"kind", cfg.filter.kind == FilterRule::Kind::TopK ? "top_k" : "threshold"},
          {"top_k", cfg.filter.top_k},
          {"threshold", cfg.filter.threshold},
          {"scores", std::string(to_string(cfg.filter_scores))}}}}},
      {"regressor",
       {{"hidden", cfg.regressor.hidden},
        {"epochs", cfg.regressor.epochs},
        {"batch_size", cfg.regressor.batch_size},
        {"lr", cfg.regressor.lr}}},
      {"trace", {{"enabled", cfg.trace}, {"resolution", cfg.trace_resolution}}},
  };
  if (cfg.dataset) doc["dataset"] = cfg.dataset->generic_string();
  return doc.dump();
}

std::string config_hash(const RunConfig& cfg) { return fmt::format("{:016x}", fnv1a64(run_config_json(cfg))); }

std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage) { return derive_seed(cfg.seed, stage); }

}  // namespace cosim::cli
