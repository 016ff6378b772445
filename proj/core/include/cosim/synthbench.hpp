#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cosim/dataio.hpp"
#include "cosim/numerics.hpp"

namespace cosim::synth {

struct WorldConfig {
  std::size_t n_images = 6000;
  std::size_t latent_dim = 4;
  std::size_t embed_dim = 64;
  std::size_t n_contexts = 8;
  /// Spread of the per-context log metric weights; 0 makes every metric the
  /// identity.
  double context_sharpness = 2.5;
  double noise_sigma = 0.02;
  std::size_t triples_per_cluster = 1000;
  std::size_t cc_val_size = 12000;
  std::size_t cc_test_size = 10000;
  std::size_t min_triples_per_ref = 9;
  /// Share of images reserved for the CC test split (disjoint from the rest).
  double test_image_fraction = 0.4;
  std::uint64_t seed = 0;

  /// Throws BadConfig on inconsistent settings.
  void validate() const;
};

/// Latent geometry behind a world. Latent points and anchors are uniform in
/// [-1, 1]^m; an image belongs to its nearest anchor's context, and context c
/// compares points with a diagonally weighted cosine distance.
struct GroundTruth {
  Matrix anchors;         // K x m
  Matrix metric_weights;  // K x m, positive
  Matrix rotation;        // d x d orthogonal; embedding = rotation * [z; 0] + noise
  Matrix latents;         // n x m
  std::vector<std::size_t> image_context;  // nearest anchor per image
  std::vector<ImageId> ids;                // image ids by latent row

  std::size_t context_of(const Vector& latent) const;
  double distance(std::size_t context, std::size_t i, std::size_t j) const;
  /// Label under the reference image's context metric.
  Label label(std::size_t ref, std::size_t a, std::size_t b) const;
  std::size_t index_of(const ImageId& id) const;
};

struct World {
  DatasetBundle bundle;
  GroundTruth truth;
  std::vector<std::size_t> cluster_context;  // context of each cluster
};

World generate_world(const WorldConfig& cfg);

std::string cluster_name(std::size_t context);

/// Ground-truth record (anchors, metrics, rotation, latents) as JSON.
std::string ground_truth_json(const World& world, const WorldConfig& cfg);

/// Writes the dataset (see save_dataset) plus ground_truth.json.
void save_world(const World& world, const WorldConfig& cfg, const std::filesystem::path& dir);

}  // namespace cosim::synth
