#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cosim/csmodel.hpp"
#include "cosim/dataio.hpp"
#include "cosim/numerics.hpp"

namespace cosim {

using PredictFn = std::function<Prediction(const Triple&)>;

/// References with fewer triples than this are reported as low-support.
inline constexpr std::size_t kMinReferenceSupport = 9;

struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
  Tally& operator+=(const Tally& other) {
    correct += other.correct;
    total += other.total;
    return *this;
  }
  bool operator==(const Tally&) const = default;
};

struct EvalReport {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t correct = 0;
  std::map<ImageId, Tally> per_reference;
  std::optional<double> mean_symmetry_score;
  std::optional<double> symmetry_accuracy;

  std::vector<ImageId> low_support_references() const;
};

/// Fraction of triples whose predicted label equals y. With threads > 1 the
/// triples are split into contiguous chunks and tallies merged, so results
/// do not depend on the thread count. predict must be safe to call
/// concurrently in that case.
/// Throws EmptyInput, MissingId.
EvalReport accuracy_2afc(const PredictFn& predict, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                         std::size_t threads = 1);

/// |c_f * m_f + c_s * m_s| over the raw ranking-block outputs for both
/// candidate orders, each in its own frame. In [0, 2].
double symmetry_score(const BlockOutput& forward, const BlockOutput& swapped);
double symmetry_score(const CsModel& model, const Triple& triple, const EmbeddingTable& embeddings);

/// Accuracy on the swapped (r, b, a, -y) version of every triple.
double symmetry_accuracy(const PredictFn& predict, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                         std::size_t threads = 1);

/// Accuracy plus mean symmetry score and symmetry accuracy.
EvalReport evaluate_cs_model(const CsModel& model, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                             PredictMode mode, std::size_t threads = 1);

struct CrossValMatrix {
  std::vector<std::string> rows;  // model names
  std::vector<std::string> cols;  // cluster names
  std::vector<std::vector<double>> cells;
  std::vector<std::vector<bool>> diagonal;  // model was trained on that cluster
  std::vector<double> row_average;
  std::vector<double> col_average;
  std::vector<std::optional<double>> row_offdiag_average;
  std::vector<std::optional<double>> col_offdiag_average;  // "Average wo diagonal"
  std::optional<double> diagonal_mean;
  std::optional<double> offdiag_mean;
};

/// Accuracy of every model on every cluster's triples. A cell is diagonal
/// when the model's trained_on list names that cluster.
/// Throws EmptyInput and anything accuracy_2afc throws.
CrossValMatrix cross_validation(std::span<const CsModel> models, std::span<const ContextCluster> clusters,
                                const EmbeddingTable& embeddings, PredictMode mode, std::size_t threads = 1);

/// All r-subsets of {0..n-1} in lexicographic order. Throws BadArgument
/// unless 1 <= r <= n.
std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t r);

struct SweepStrategy {
  std::string name;
  std::size_t repeats = 1;
  /// Accuracy of the ensemble over `members` for one repeat.
  std::function<double(std::span<const std::size_t> members, std::size_t repeat)> evaluate;
};

struct SweepRow {
  std::size_t r = 0;
  std::vector<std::size_t> combination;
  std::string strategy;
  std::size_t repeat = 0;
  double accuracy = 0.0;
};

/// Every C(n, r) subset for each requested r, each strategy evaluated
/// `repeats` times per subset.
std::vector<SweepRow> combination_sweep(std::size_t n_models, std::span<const SweepStrategy> strategies,
                                        std::span<const std::size_t> r_values);

using EnsembleBuilder = std::function<PredictFn(std::span<const std::size_t> members)>;

struct LooRow {
  std::size_t left_out = 0;
  std::string left_out_name;
  std::vector<double> cluster_accuracy;
  double test_accuracy = 0.0;
};

struct LooTable {
  std::vector<std::string> cluster_names;
  std::vector<LooRow> rows;
};

/// For each model i, the ensemble over all other models evaluated on every
/// cluster and on the test triples. Throws BadArgument when fewer than two
/// models are given.
LooTable leave_one_out(std::span<const std::string> model_names, const EnsembleBuilder& builder,
                       std::span<const ContextCluster> clusters, std::span<const Triple> test,
                       const EmbeddingTable& embeddings, std::size_t threads = 1);

/// Bin of `value` among `resolution` equal cells over [lo, hi]; values
/// outside the range clamp to the edge cells.
std::size_t bin_index(double value, double lo, double hi, std::size_t resolution);

struct TraceGrid {
  std::size_t epoch = 0;
  std::size_t resolution = 0;
  std::array<double, 2> x_bounds{};
  std::array<double, 2> y_bounds{};
  std::vector<Tally> cells;  // row-major: y_bin * resolution + x_bin
  double accuracy = 0.0;
  double loss = 0.0;
};

inline constexpr std::size_t kDefaultTraceResolution = 50;

/// Records per-epoch accuracy grids of a model under training, binned by the
/// reference's first two PCA features, and writes them as CSV under `dir`
/// (epoch_NNN.csv plus summary.csv).
class TrainingTraceRecorder {
 public:
  /// Throws EmptyInput for empty validation, BadArgument for PCA with fewer
  /// than two components, MissingId for unknown references.
  TrainingTraceRecorder(std::span<const Triple> validation, const EmbeddingTable& embeddings, const PcaModel& pca,
                        std::filesystem::path dir, std::size_t resolution = kDefaultTraceResolution,
                        PredictMode mode = PredictMode::Embedding);

  void record(const CsModel& model, const EpochMetrics& metrics);
  EpochHook hook();
  const std::vector<TraceGrid>& grids() const { return grids_; }

 private:
  std::vector<Triple> validation_;
  const EmbeddingTable* embeddings_;
  std::vector<std::size_t> cell_of_;  // per validation triple
  std::array<double, 2> x_bounds_{};
  std::array<double, 2> y_bounds_{};
  std::filesystem::path dir_;
  std::size_t resolution_;
  PredictMode mode_;
  std::vector<TraceGrid> grids_;
};

std::string trace_grid_csv(const TraceGrid& grid);

std::string report_to_json(const EvalReport& report);
std::string crossval_to_csv(const CrossValMatrix& matrix);
std::string crossval_to_json(const CrossValMatrix& matrix);
std::string sweep_to_csv(std::span<const SweepRow> rows, std::span<const std::string> model_names);
std::string loo_to_csv(const LooTable& table);

}  // namespace cosim
