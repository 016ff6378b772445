#include "cosim/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "cosim/rng.hpp"

namespace cosim::synth {

using nlohmann::json;

void WorldConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::BadConfig, "world: " + what); };
  if (n_images == 0 || latent_dim == 0 || embed_dim == 0 || n_contexts == 0) fail("sizes must be positive");
  if (embed_dim < latent_dim) fail("embed_dim must be >= latent_dim");
  if (!(context_sharpness >= 0.0) || !std::isfinite(context_sharpness)) fail("context_sharpness must be >= 0");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be >= 0");
  if (triples_per_cluster < 2) fail("triples_per_cluster must be >= 2");
  if (min_triples_per_ref == 0) fail("min_triples_per_ref must be positive");
  if (cc_val_size < min_triples_per_ref || cc_test_size < min_triples_per_ref) {
    fail("CC splits need at least min_triples_per_ref triples");
  }
  if (!(test_image_fraction > 0.0 && test_image_fraction < 1.0)) fail("test_image_fraction must lie in (0, 1)");
  const auto test_images = static_cast<std::size_t>(std::floor(static_cast<double>(n_images) * test_image_fraction));
  const std::size_t train_images = n_images - test_images;
  const std::size_t val_refs = cc_val_size / min_triples_per_ref;
  const std::size_t test_refs = cc_test_size / min_triples_per_ref;
  if (train_images < n_contexts + val_refs || train_images < 3) fail("too few images for the clusters and CC validation");
  if (test_images < test_refs || test_images < 3) fail("too few images for the CC test split");
}

std::string cluster_name(std::size_t context) { return "context_" + std::to_string(context); }

std::size_t GroundTruth::context_of(const Vector& latent) const {
  Eigen::Index best;
  (anchors.rowwise() - latent.transpose()).rowwise().squaredNorm().minCoeff(&best);
  return static_cast<std::size_t>(best);
}

double GroundTruth::distance(std::size_t context, std::size_t i, std::size_t j) const {
  const auto w = metric_weights.row(static_cast<Eigen::Index>(context)).array();
  const auto u = latents.row(static_cast<Eigen::Index>(i)).array();
  const auto v = latents.row(static_cast<Eigen::Index>(j)).array();
  const double uv = (w * u * v).sum();
  const double uu = (w * u * u).sum();
  const double vv = (w * v * v).sum();
  return 1.0 - uv / std::sqrt(uu * vv);
}

Label GroundTruth::label(std::size_t ref, std::size_t a, std::size_t b) const {
  const std::size_t c = image_context[ref];
  return distance(c, ref, a) < distance(c, ref, b) ? Label::ACloser : Label::BCloser;
}

std::size_t GroundTruth::index_of(const ImageId& id) const {
  // ids are "img" + zero-padded row index
  if (id.size() < 4 || id.compare(0, 3, "img") != 0) throw Error(ErrorCode::MissingId, "not a synthetic id: " + id);
  const auto idx = static_cast<std::size_t>(std::stoull(id.substr(3)));
  if (idx >= ids.size() || ids[idx] != id) throw Error(ErrorCode::MissingId, "unknown synthetic id: " + id);
  return idx;
}

namespace {

// Uniform in [-1, 1]^m, never the zero vector.
Vector random_cube_point(std::size_t m, Rng& rng) {
  Vector v(static_cast<Eigen::Index>(m));
  do {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.uniform(-1.0, 1.0);
  } while (v.squaredNorm() == 0.0);
  return v;
}

Matrix random_rotation(std::size_t d, Rng& rng) {
  Matrix g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (Eigen::Index c = 0; c < g.cols(); ++c) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < q.cols(); ++c) {
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  }
  return q;
}

// Draws `count` triples for reference `ref` with candidates from `pool`.
void draw_triples(const GroundTruth& truth, std::size_t ref, std::span<const std::size_t> pool, std::size_t count,
                  Rng& rng, std::vector<Triple>& out) {
  const std::size_t c = truth.image_context[ref];
  auto draw_other = [&](std::size_t exclude1, std::size_t exclude2) {
    std::size_t x;
    do {
      x = pool[rng.uniform_index(pool.size())];
    } while (x == exclude1 || x == exclude2);
    return x;
  };
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t a = draw_other(ref, ref);
    std::size_t b = draw_other(ref, a);
    // Regenerate b until the two distances differ, so labels are never ties.
    while (truth.distance(c, ref, a) == truth.distance(c, ref, b)) b = draw_other(ref, a);
    out.push_back(Triple{truth.ids[ref], truth.ids[a], truth.ids[b], truth.label(ref, a, b)});
  }
}

// CC split: distinct references, each with >= min_per_ref triples.
std::vector<Triple> draw_cc_split(const GroundTruth& truth, std::span<const std::size_t> ref_pool,
                                  std::span<const std::size_t> candidate_pool, std::size_t size, std::size_t min_per_ref,
                                  Rng& rng) {
  const std::size_t n_refs = size / min_per_ref;
  const std::size_t extra = size - n_refs * min_per_ref;
  std::vector<Triple> out;
  out.reserve(size);
  for (std::size_t i = 0; i < n_refs; ++i) {
    // First `extra` references take one more triple so the split size is exact.
    const std::size_t count = min_per_ref + (i < extra % n_refs ? 1 : 0) + extra / n_refs;
    draw_triples(truth, ref_pool[i], candidate_pool, count, rng, out);
  }
  return out;
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "synth/world"));
  const auto m = static_cast<Eigen::Index>(cfg.latent_dim);
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto K = static_cast<Eigen::Index>(cfg.n_contexts);
  const auto n = static_cast<Eigen::Index>(cfg.n_images);

  World world;
  GroundTruth& truth = world.truth;
  truth.anchors.resize(K, m);
  truth.metric_weights.resize(K, m);
  for (Eigen::Index c = 0; c < K; ++c) {
    truth.anchors.row(c) = random_cube_point(cfg.latent_dim, rng).transpose();
    for (Eigen::Index i = 0; i < m; ++i) truth.metric_weights(c, i) = std::exp(cfg.context_sharpness * rng.normal());
  }
  truth.rotation = random_rotation(cfg.embed_dim, rng);

  truth.latents.resize(n, m);
  truth.image_context.resize(cfg.n_images);
  truth.ids.resize(cfg.n_images);
  EmbeddingTable table(cfg.embed_dim);
  std::vector<float> row(cfg.embed_dim);
  const std::size_t width = std::max<std::size_t>(6, std::to_string(cfg.n_images).size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector z = random_cube_point(cfg.latent_dim, rng);
    truth.latents.row(i) = z.transpose();
    truth.image_context[static_cast<std::size_t>(i)] = truth.context_of(z);
    Vector padded = Vector::Zero(d);
    padded.head(m) = z;
    Vector e = truth.rotation * padded;
    for (Eigen::Index k = 0; k < d; ++k) e(k) += cfg.noise_sigma * rng.normal();
    for (Eigen::Index k = 0; k < d; ++k) row[static_cast<std::size_t>(k)] = static_cast<float>(e(k));
    std::string digits = std::to_string(i);
    const std::string id = "img" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(digits.size(), width), '0') + digits;
    truth.ids[static_cast<std::size_t>(i)] = id;
    table.add(id, row);
  }

  // Disjoint image pools for the test split and everything else.
  std::vector<std::size_t> order(cfg.n_images);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.n_images) * cfg.test_image_fraction));
  std::vector<std::size_t> test_pool(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train_pool(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());

  // One fixed reference per context: the training-pool image closest to its anchor.
  std::vector<bool> used(cfg.n_images, false);
  for (std::size_t c = 0; c < cfg.n_contexts; ++c) {
    std::size_t best = train_pool.front();
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i : train_pool) {
      if (used[i]) continue;
      const double dist =
          (truth.latents.row(static_cast<Eigen::Index>(i)) - truth.anchors.row(static_cast<Eigen::Index>(c))).squaredNorm();
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    used[best] = true;
    ContextCluster cluster{cluster_name(c), truth.ids[best], {}};
    draw_triples(truth, best, train_pool, cfg.triples_per_cluster, rng, cluster.triples);
    world.bundle.clusters.push_back(std::move(cluster));
    world.cluster_context.push_back(truth.image_context[best]);
  }

  std::vector<std::size_t> val_refs;
  for (std::size_t i : train_pool) {
    if (!used[i]) val_refs.push_back(i);
  }
  world.bundle.cc_validation =
      draw_cc_split(truth, val_refs, train_pool, cfg.cc_val_size, cfg.min_triples_per_ref, rng);
  world.bundle.cc_test = draw_cc_split(truth, test_pool, test_pool, cfg.cc_test_size, cfg.min_triples_per_ref, rng);
  world.bundle.embeddings = std::move(table);
  return world;
}

std::string ground_truth_json(const World& world, const WorldConfig& cfg) {
  const auto& t = world.truth;
  auto rows = [](const Matrix& mat) {
    json out = json::array();
    for (Eigen::Index r = 0; r < mat.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(mat.cols()));
      for (Eigen::Index c = 0; c < mat.cols(); ++c) row[static_cast<std::size_t>(c)] = mat(r, c);
      out.push_back(row);
    }
    return out;
  };
  json images = json::array();
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    std::vector<double> z(static_cast<std::size_t>(t.latents.cols()));
    for (Eigen::Index k = 0; k < t.latents.cols(); ++k) z[static_cast<std::size_t>(k)] = t.latents(static_cast<Eigen::Index>(i), k);
    images.push_back({{"id", t.ids[i]}, {"context", t.image_context[i]}, {"latent", z}});
  }
  json clusters = json::array();
  for (std::size_t c = 0; c < world.bundle.clusters.size(); ++c) {
    clusters.push_back({{"name", world.bundle.clusters[c].name},
                        {"anchor_ref", world.bundle.clusters[c].anchor_ref},
                        {"context", world.cluster_context[c]}});
  }
  json doc = {{"config",
               {{"n_images", cfg.n_images},
                {"latent_dim", cfg.latent_dim},
                {"embed_dim", cfg.embed_dim},
                {"n_contexts", cfg.n_contexts},
                {"context_sharpness", cfg.context_sharpness},
                {"noise_sigma", cfg.noise_sigma},
                {"seed", cfg.seed}}},
              {"distance", "weighted_cosine"},
              {"anchors", rows(t.anchors)},
              {"metric_weights", rows(t.metric_weights)},
              {"rotation", rows(t.rotation)},
              {"clusters", clusters},
              {"images", images}};
  return doc.dump() + "\n";
}

void save_world(const World& world, const WorldConfig& cfg, const std::filesystem::path& dir) {
  save_dataset(world.bundle, dir);
  binio::write_file(dir / "ground_truth.json", ground_truth_json(world, cfg));
}

}  // namespace cosim::synth
