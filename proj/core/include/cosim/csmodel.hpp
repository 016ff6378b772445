#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cosim/dataio.hpp"
#include "cosim/nets.hpp"
#include "cosim/numerics.hpp"

namespace cosim {

struct ModelShape {
  std::size_t proj_hidden = 256;
  std::size_t proj_dim = 128;
  std::vector<std::size_t> rank_hidden = {256, 64};
};

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  double triplet_weight = nets::kDefaultTripletWeight;
  double margin = nets::kDefaultMargin;
  bool swap_augment = true;
  std::uint64_t seed = 0;

  /// Throws BadConfig.
  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean combined loss over the epoch's samples
  double ranking_accuracy = 0.0;    // running ranking-block accuracy during the epoch
  double embedding_accuracy = 0.0;  // embedding-distance accuracy on the training triples after the epoch
};

/// Projection head g (stand-in for a fine-tuned backbone) plus a ranking
/// block over [g(r) | g(a) | g(b)].
struct CsModel {
  std::string name;
  nets::MlpParams projection;
  nets::MlpParams ranking_block;
  double margin = nets::kDefaultMargin;
  std::vector<std::string> trained_on;
  TrainConfig config;
  std::vector<EpochMetrics> history;

  std::size_t input_dim() const { return projection.input_dim(); }
  std::size_t proj_dim() const { return projection.output_dim(); }
  Vector project(std::span<const float> embedding) const;
};

using EpochHook = std::function<void(const CsModel& model, const EpochMetrics& metrics)>;

struct TrainOptions {
  std::string name = "cs";
  std::vector<std::string> trained_on;
  ModelShape shape;
  EpochHook on_epoch;
};

/// Untrained model. When proj_hidden == 2 * proj_dim the projection starts
/// as an exact linear isometry-like map x -> P x (P with orthonormal rows or
/// columns), so untrained embedding distances equal the raw ones up to the
/// random projection.
CsModel init_cs_model(std::size_t input_dim, const ModelShape& shape, std::uint64_t seed, double margin);

/// Adam on the mean combined loss. Deterministic in cfg.seed.
/// Throws BadConfig, EmptyInput, MissingId, NonFiniteLoss.
CsModel train_cs_model(std::span<const Triple> train, const EmbeddingTable& embeddings, const TrainConfig& cfg,
                       const TrainOptions& options = {});

enum class PredictMode { Embedding, Ranking };
std::string_view to_string(PredictMode mode);
/// Accepts "embedding" or "ranking"; throws BadArgument.
PredictMode parse_predict_mode(std::string_view text);

enum class DecidedBy { RankingBlock, Confidence, EmbeddingDistance };
std::string_view to_string(DecidedBy by);

struct Prediction {
  Label label = Label::BCloser;
  double confidence_ab = 0.5;
  double confidence_ba = 0.5;
  bool ambiguous = false;
  DecidedBy decided_by = DecidedBy::EmbeddingDistance;
};

/// Raw ranking-block output for one candidate order, in that order's frame.
struct BlockOutput {
  Label label = Label::ACloser;
  double confidence = 0.5;  // softmax probability of the predicted class
};

/// -1 when dist(g(r), g(a)) < dist(g(r), g(b)); exact ties give +1 with
/// ambiguous = true. Confidence is 0.5 + |d_a - d_b| / 4 in both orders.
Prediction embedding_prediction(const Vector& g_r, const Vector& g_a, const Vector& g_b);

BlockOutput block_output(const nets::MlpParams& ranking_block, const Vector& g_r, const Vector& g_a, const Vector& g_b);

/// Ambiguity rule for the ranking block: consistent outputs keep the
/// forward prediction; otherwise the more confident order wins, and equal
/// confidences fall back to `embedding`.
Prediction resolve_block_outputs(const BlockOutput& forward, const BlockOutput& swapped,
                                 const std::function<Prediction()>& embedding);

Prediction predict_by_embedding(const CsModel& model, const Triple& triple, const EmbeddingTable& embeddings);
Prediction predict_by_ranking_block(const CsModel& model, const Triple& triple, const EmbeddingTable& embeddings);

/// (r, a, b, y) -> (r, b, a, -y).
Triple swap_augment(const Triple& triple);

/// Projections of every row of an embedding table under one model.
class ProjectedTable {
 public:
  ProjectedTable(const CsModel& model, const EmbeddingTable& embeddings);

  Vector row(std::string_view id) const { return projected_.col(static_cast<Eigen::Index>(embeddings_->index_of(id))); }
  const EmbeddingTable& embeddings() const { return *embeddings_; }

 private:
  const EmbeddingTable* embeddings_;
  Matrix projected_;  // proj_dim x N
};

/// Callable predictor with cached projections. Both model and embeddings must
/// outlive it.
class CsPredictor {
 public:
  CsPredictor(const CsModel& model, const EmbeddingTable& embeddings, PredictMode mode);

  Prediction operator()(const Triple& triple) const;
  const CsModel& model() const { return *model_; }
  PredictMode mode() const { return mode_; }

 private:
  const CsModel* model_;
  std::shared_ptr<const ProjectedTable> projected_;
  PredictMode mode_;
};

// Checkpoint: "CSCK", u16 version=1, u32 header length, JSON header (name,
// margin, trained_on, config, history), then the projection and ranking
// block as CSMD sections.
std::string encode_checkpoint(const CsModel& model);
CsModel decode_checkpoint(std::string_view bytes, const std::string& context = "checkpoint");
void save_checkpoint(const CsModel& model, const std::filesystem::path& path);
CsModel load_checkpoint(const std::filesystem::path& path);

Vector to_vector(std::span<const float> values);

}  // namespace cosim
