#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cosim/csmodel.hpp"
#include "cosim/dataio.hpp"
#include "cosim/evalkit.hpp"
#include "cosim/nets.hpp"
#include "cosim/numerics.hpp"

namespace cosim {

inline constexpr std::size_t kDefaultMapResolution = 200;

/// Per-cell correctness counts of one model over a 1-D or 2-D subspace of
/// the reference PCA features.
struct CredibilityMap {
  std::string model_name;
  std::vector<std::size_t> dim_indices;
  std::vector<std::array<double, 2>> bounds;  // (min, max) per axis
  std::size_t resolution = kDefaultMapResolution;
  std::vector<Tally> cells;  // row-major, first axis fastest

  std::size_t cell_of(const Vector& features) const;
  /// (correct + 1) / (total + 2) for the cell holding `features`.
  double cell_score(const Vector& features) const;
  bool operator==(const CredibilityMap&) const = default;
};

/// (0,1), (0,2), (1,2), (0), (1).
std::vector<std::vector<std::size_t>> default_map_axes();

/// Counts `correct[i]` into the cell of `features.col(i)` (one column per
/// validation triple, holding its reference's features). Bounds come from
/// the same features. Throws EmptyInput, BadArgument.
CredibilityMap build_credibility_map(const std::string& model_name, const Matrix& features, std::span<const std::uint8_t> correct,
                                     std::span<const std::size_t> dim_indices, std::size_t resolution = kDefaultMapResolution);

/// Reference features of every triple: one column per triple.
Matrix reference_features(const PcaModel& pca, std::span<const Triple> triples, const EmbeddingTable& embeddings);

/// Fits PCA on the distinct reference embeddings, in order of first
/// appearance. l is clamped to what the data allows.
PcaModel fit_reference_pca(std::span<const Triple> triples, const EmbeddingTable& embeddings, std::size_t l = kDefaultPcaDim);

/// 1 where predict(t) matches t.y.
std::vector<std::uint8_t> correctness(const PredictFn& predict, std::span<const Triple> triples,
                                      const EmbeddingTable& embeddings, std::size_t threads = 1);

/// One map per axis set for one model.
std::vector<CredibilityMap> build_credibility_maps(const std::string& model_name, const PredictFn& predict,
                                                   std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                                   const PcaModel& pca,
                                                   const std::vector<std::vector<std::size_t>>& axes = default_map_axes(),
                                                   std::size_t resolution = kDefaultMapResolution, std::size_t threads = 1);

/// Mean of the per-map cell scores. Throws BadArgument without maps.
double credibility_score(std::span<const CredibilityMap> maps, const Vector& features);

/// score_i / sum; all-zero scores give uniform weights.
/// Throws BadArgument on empty input or negative / non-finite scores.
std::vector<double> normalize_weights(std::span<const double> scores);

/// Sign of the summed member labels. Ties go to the member with the largest
/// |confidence_ab - 0.5|, then to the first-listed one.
Label majority_vote(std::span<const Prediction> predictions);
/// Sign of the weighted label sum; an exact zero falls back to majority_vote.
/// Throws BadArgument on size mismatch, negative weights, or all-zero weights.
Label weighted_vote(std::span<const Prediction> predictions, std::span<const double> weights);

struct FilterRule {
  enum class Kind { TopK, Threshold };
  Kind kind = Kind::TopK;
  std::size_t top_k = 1;
  double threshold = 0.5;  // keep members scoring at least this
};

/// Keeps members passing `rule`, then weighted_vote with their normalized
/// scores. When nothing survives, majority vote over all members.
Label filtered_vote(std::span<const Prediction> predictions, std::span<const double> scores, const FilterRule& rule);
/// Indices of the members `rule` keeps (in member order).
std::vector<std::size_t> apply_filter(std::span<const double> scores, const FilterRule& rule);

std::vector<Prediction> member_predictions(std::span<const PredictFn> members, const Triple& triple);
Label majority_vote(std::span<const PredictFn> members, const Triple& triple);
Label weighted_vote(std::span<const PredictFn> members, std::span<const double> weights, const Triple& triple);
Label filtered_vote(std::span<const PredictFn> members, std::span<const double> scores, const FilterRule& rule,
                    const Triple& triple);

struct RegressorConfig {
  std::size_t hidden = 32;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  /// Throws BadConfig.
  void validate() const;
};

/// Per-member MLP regressors predicting a member's accuracy for a reference
/// from the reference's PCA features.
struct WeightRegressorSet {
  PcaModel pca;
  double feature_scale = 1.0;  // applied to PCA features before the regressors
  std::vector<std::string> member_names;
  std::vector<nets::MlpParams> regressors;

  Vector features(std::span<const float> embedding) const;
  /// Predicted accuracies clamped to [0, 1], one per member.
  std::vector<double> predict_accuracies(std::span<const float> embedding) const;
  /// Compares the encoded bytes.
  friend bool operator==(const WeightRegressorSet& lhs, const WeightRegressorSet& rhs);
};

/// Validation predictions of every member for every triple: triple-major.
struct PredictionPanel {
  std::size_t n_members = 0;
  std::size_t n_triples = 0;
  std::vector<Prediction> predictions;

  std::span<const Prediction> triple(std::size_t t) const {
    return std::span<const Prediction>(predictions).subspan(t * n_members, n_members);
  }
  const Prediction& at(std::size_t member, std::size_t t) const { return predictions[t * n_members + member]; }
};

PredictionPanel build_panel(std::span<const PredictFn> members, std::span<const Triple> triples,
                            const EmbeddingTable& embeddings, std::size_t threads = 1);

/// Member per-reference accuracies on `triples` drive the targets. Each
/// member's regressor depends only on its own data, name, and cfg.seed.
WeightRegressorSet train_weight_regressors(std::span<const std::string> member_names, const PredictionPanel& panel,
                                           std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                           std::size_t l, const RegressorConfig& cfg);
WeightRegressorSet train_weight_regressors(std::span<const std::string> member_names, const PredictionPanel& panel,
                                           std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                           const PcaModel& pca, const RegressorConfig& cfg);
WeightRegressorSet train_weight_regressors(std::span<const PredictFn> members, std::span<const std::string> member_names,
                                           std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                           std::size_t l, const RegressorConfig& cfg, std::size_t threads = 1);

/// Normalized predicted accuracies. Throws LengthMismatch.
std::vector<double> predict_weights(const WeightRegressorSet& set, std::span<const float> reference_embedding);

enum class Strategy { MajorityVote, CredibilityWeighted, FilteredVote, RegressorWeighted };
std::string_view to_string(Strategy strategy);
/// "majority_vote", "credibility_weighted", "filtered_vote", "regressor_weighted".
Strategy parse_strategy(std::string_view text);

enum class ScoreSource { Credibility, Regressor };
std::string_view to_string(ScoreSource source);
ScoreSource parse_score_source(std::string_view text);

struct EnsembleModel {
  std::vector<CsModel> members;
  PredictMode mode = PredictMode::Embedding;
  Strategy strategy = Strategy::MajorityVote;
  std::vector<std::vector<CredibilityMap>> maps;  // per member
  std::optional<PcaModel> map_pca;
  std::optional<WeightRegressorSet> regressors;
  FilterRule filter;
  ScoreSource filter_scores = ScoreSource::Credibility;

  /// Throws BadConfig when the strategy's data is missing or inconsistent.
  void validate() const;
};

/// The ensemble restricted to `members` (indices into model.members), with
/// the matching maps and regressors. Throws BadArgument on bad indices.
EnsembleModel select_members(const EnsembleModel& model, std::span<const std::size_t> members);

/// Per-triple strategy dispatch. Members' projections are cached; the
/// ensemble and embeddings must outlive the predictor.
class EnsemblePredictor {
 public:
  EnsemblePredictor(const EnsembleModel& model, const EmbeddingTable& embeddings);

  Prediction operator()(const Triple& triple) const;
  /// Scores the strategy uses for this reference (empty for majority vote).
  std::vector<double> member_scores(const ImageId& ref) const;

 private:
  const EnsembleModel* model_;
  const EmbeddingTable* embeddings_;
  std::vector<CsPredictor> members_;
};

EvalReport evaluate_ensemble(const EnsembleModel& model, std::span<const Triple> triples,
                             const EmbeddingTable& embeddings, std::size_t threads = 1);

/// Member scores per triple (n_members x n_triples) for panel-based sweeps.
Matrix credibility_score_panel(const std::vector<std::vector<CredibilityMap>>& maps, const PcaModel& pca,
                               std::span<const Triple> triples, const EmbeddingTable& embeddings);
Matrix regressor_score_panel(const WeightRegressorSet& set, std::span<const Triple> triples,
                             const EmbeddingTable& embeddings);

/// Accuracy of an ensemble restricted to `members`, from precomputed member
/// predictions and (for weighted strategies) member scores.
double panel_accuracy(const PredictionPanel& panel, std::span<const Triple> triples, std::span<const std::size_t> members,
                      Strategy strategy, const Matrix* scores = nullptr, const FilterRule* filter = nullptr);

/// Sweep strategies over a test panel. score_repeats holds one score matrix
/// per repeat; the strategy runs once per entry.
SweepStrategy vote_sweep_strategy(const PredictionPanel& panel, std::span<const Triple> triples,
                                  std::string name = "vote");
SweepStrategy weighted_sweep_strategy(const PredictionPanel& panel, std::span<const Triple> triples,
                                      std::vector<Matrix> score_repeats, std::string name);

// Credibility map file: "CSCM", u16 version=1, u32 n_axes, u32 axes...,
// u32 resolution, u32 n_cells, then (correct, total) u32 pairs. A JSON
// sidecar with the same stem holds model, axes, bounds, and resolution.
std::string encode_credibility_map(const CredibilityMap& map);
CredibilityMap decode_credibility_map(std::string_view bytes, const std::string& sidecar_json,
                                      const std::string& context = "credibility map");
std::string credibility_map_sidecar(const CredibilityMap& map);
void save_credibility_map(const CredibilityMap& map, const std::filesystem::path& path);
CredibilityMap load_credibility_map(const std::filesystem::path& path);

// Regressor set file: "CSWR", u16 version=1, u32 n_members, f64
// feature_scale, u32 length + CSPC section, then per member u32 name length,
// name bytes, u32 length + CSMD section.
std::string encode_weight_regressors(const WeightRegressorSet& set);
WeightRegressorSet decode_weight_regressors(std::string_view bytes, const std::string& context = "weight regressors");
void save_weight_regressors(const WeightRegressorSet& set, const std::filesystem::path& path);
WeightRegressorSet load_weight_regressors(const std::filesystem::path& path);

/// Ensemble manifest: JSON with member checkpoint paths, strategy,
/// predict_mode, per-member map paths, map PCA, regressors, and filter.
/// Relative paths resolve against the manifest's directory.
struct EnsembleManifest {
  std::vector<std::filesystem::path> members;
  Strategy strategy = Strategy::MajorityVote;
  PredictMode mode = PredictMode::Embedding;
  std::optional<std::filesystem::path> embeddings;
  std::vector<std::vector<std::filesystem::path>> maps;
  std::optional<std::filesystem::path> map_pca;
  std::optional<std::filesystem::path> regressors;
  FilterRule filter;
  ScoreSource filter_scores = ScoreSource::Credibility;
};

std::string format_manifest(const EnsembleManifest& manifest);
/// Throws BadFormat on unknown keys or bad values.
EnsembleManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
EnsembleManifest load_manifest(const std::filesystem::path& path);
EnsembleModel load_ensemble(const EnsembleManifest& manifest);

}  // namespace cosim
