#include "cosim/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"

namespace cosim {

using nlohmann::json;

std::vector<ImageId> EvalReport::low_support_references() const {
  std::vector<ImageId> out;
  for (const auto& [id, tally] : per_reference) {
    if (tally.total < kMinReferenceSupport) out.push_back(id);
  }
  return out;
}

namespace {

void require_ids(std::span<const Triple> triples, const EmbeddingTable& embeddings) {
  for (const auto& t : triples) {
    for (const auto* id : {&t.ref, &t.a, &t.b}) {
      if (!embeddings.contains(*id)) throw Error(ErrorCode::MissingId, "id not in embedding table: " + *id);
    }
  }
}

struct ChunkResult {
  std::size_t correct = 0;
  std::map<ImageId, Tally> per_reference;
};

ChunkResult tally_chunk(const PredictFn& predict, std::span<const Triple> triples) {
  ChunkResult out;
  for (const auto& t : triples) {
    const bool ok = predict(t).label == t.y;
    auto& tally = out.per_reference[t.ref];
    tally.total += 1;
    if (ok) {
      tally.correct += 1;
      out.correct += 1;
    }
  }
  return out;
}

// Runs fn(begin, end) on contiguous chunks of [0, n) and returns results in
// chunk order.
template <typename Fn>
auto run_chunks(std::size_t n, std::size_t threads, Fn fn) {
  using Result = decltype(fn(std::size_t{0}, std::size_t{0}));
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  std::vector<Result> results(threads);
  if (threads == 1) {
    results[0] = fn(0, n);
    return results;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t begin = n * w / threads;
    const std::size_t end = n * (w + 1) / threads;
    workers.emplace_back([&, w, begin, end] {
      try {
        results[w] = fn(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& worker : workers) worker.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace

EvalReport accuracy_2afc(const PredictFn& predict, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                         std::size_t threads) {
  if (triples.empty()) throw Error(ErrorCode::EmptyInput, "accuracy_2afc: no triples");
  require_ids(triples, embeddings);
  const auto chunks = run_chunks(triples.size(), threads, [&](std::size_t begin, std::size_t end) {
    return tally_chunk(predict, triples.subspan(begin, end - begin));
  });
  EvalReport report;
  report.n = triples.size();
  for (const auto& chunk : chunks) {
    report.correct += chunk.correct;
    for (const auto& [id, tally] : chunk.per_reference) report.per_reference[id] += tally;
  }
  report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.n);
  return report;
}

double symmetry_score(const BlockOutput& forward, const BlockOutput& swapped) {
  return std::abs(forward.confidence * sign(forward.label) + swapped.confidence * sign(swapped.label));
}

double symmetry_score(const CsModel& model, const Triple& triple, const EmbeddingTable& embeddings) {
  const Vector g_r = model.project(embeddings.row(triple.ref));
  const Vector g_a = model.project(embeddings.row(triple.a));
  const Vector g_b = model.project(embeddings.row(triple.b));
  return symmetry_score(block_output(model.ranking_block, g_r, g_a, g_b), block_output(model.ranking_block, g_r, g_b, g_a));
}

double symmetry_accuracy(const PredictFn& predict, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                         std::size_t threads) {
  std::vector<Triple> swapped;
  swapped.reserve(triples.size());
  for (const auto& t : triples) swapped.push_back(swap_augment(t));
  return accuracy_2afc(predict, swapped, embeddings, threads).accuracy;
}

EvalReport evaluate_cs_model(const CsModel& model, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                             PredictMode mode, std::size_t threads) {
  const CsPredictor predictor(model, embeddings, mode);
  const PredictFn fn = [&predictor](const Triple& t) { return predictor(t); };
  EvalReport report = accuracy_2afc(fn, triples, embeddings, threads);
  report.symmetry_accuracy = symmetry_accuracy(fn, triples, embeddings, threads);

  const ProjectedTable projected(model, embeddings);
  const auto sums = run_chunks(triples.size(), threads, [&](std::size_t begin, std::size_t end) {
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& t = triples[i];
      const Vector g_r = projected.row(t.ref);
      const Vector g_a = projected.row(t.a);
      const Vector g_b = projected.row(t.b);
      sum += symmetry_score(block_output(model.ranking_block, g_r, g_a, g_b),
                            block_output(model.ranking_block, g_r, g_b, g_a));
    }
    return sum;
  });
  double total = 0.0;
  for (double s : sums) total += s;
  report.mean_symmetry_score = total / static_cast<double>(triples.size());
  return report;
}

CrossValMatrix cross_validation(std::span<const CsModel> models, std::span<const ContextCluster> clusters,
                                const EmbeddingTable& embeddings, PredictMode mode, std::size_t threads) {
  if (models.empty() || clusters.empty()) throw Error(ErrorCode::EmptyInput, "cross_validation: no models or clusters");
  CrossValMatrix m;
  const std::size_t R = models.size();
  const std::size_t C = clusters.size();
  for (const auto& model : models) m.rows.push_back(model.name);
  for (const auto& cluster : clusters) m.cols.push_back(cluster.name);
  m.cells.assign(R, std::vector<double>(C, 0.0));
  m.diagonal.assign(R, std::vector<bool>(C, false));
  for (std::size_t i = 0; i < R; ++i) {
    const CsPredictor predictor(models[i], embeddings, mode);
    const PredictFn fn = [&predictor](const Triple& t) { return predictor(t); };
    for (std::size_t j = 0; j < C; ++j) {
      m.cells[i][j] = accuracy_2afc(fn, clusters[j].triples, embeddings, threads).accuracy;
      const auto& on = models[i].trained_on;
      m.diagonal[i][j] = std::find(on.begin(), on.end(), clusters[j].name) != on.end();
    }
  }

  auto mean_of = [](double sum, std::size_t count) -> std::optional<double> {
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  };
  m.row_average.assign(R, 0.0);
  m.col_average.assign(C, 0.0);
  m.row_offdiag_average.assign(R, std::nullopt);
  m.col_offdiag_average.assign(C, std::nullopt);
  double diag_sum = 0.0, off_sum = 0.0;
  std::size_t diag_count = 0, off_count = 0;
  for (std::size_t i = 0; i < R; ++i) {
    double sum = 0.0, off = 0.0;
    std::size_t n_off = 0;
    for (std::size_t j = 0; j < C; ++j) {
      sum += m.cells[i][j];
      if (m.diagonal[i][j]) {
        diag_sum += m.cells[i][j];
        ++diag_count;
      } else {
        off += m.cells[i][j];
        ++n_off;
      }
    }
    m.row_average[i] = sum / static_cast<double>(C);
    m.row_offdiag_average[i] = mean_of(off, n_off);
    off_sum += off;
    off_count += n_off;
  }
  for (std::size_t j = 0; j < C; ++j) {
    double sum = 0.0, off = 0.0;
    std::size_t n_off = 0;
    for (std::size_t i = 0; i < R; ++i) {
      sum += m.cells[i][j];
      if (!m.diagonal[i][j]) {
        off += m.cells[i][j];
        ++n_off;
      }
    }
    m.col_average[j] = sum / static_cast<double>(R);
    m.col_offdiag_average[j] = mean_of(off, n_off);
  }
  m.diagonal_mean = mean_of(diag_sum, diag_count);
  m.offdiag_mean = mean_of(off_sum, off_count);
  return m;
}

std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t r) {
  if (r < 1 || r > n) throw Error(ErrorCode::BadArgument, fmt::format("combinations: need 1 <= r <= n, got n={} r={}", n, r));
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> current(r);
  for (std::size_t i = 0; i < r; ++i) current[i] = i;
  while (true) {
    out.push_back(current);
    // Advance the rightmost index that still has room.
    std::size_t i = r;
    while (i > 0 && current[i - 1] == n - r + i - 1) --i;
    if (i == 0) break;
    ++current[i - 1];
    for (std::size_t k = i; k < r; ++k) current[k] = current[k - 1] + 1;
  }
  return out;
}

std::vector<SweepRow> combination_sweep(std::size_t n_models, std::span<const SweepStrategy> strategies,
                                        std::span<const std::size_t> r_values) {
  std::vector<SweepRow> rows;
  for (std::size_t r : r_values) {
    for (const auto& subset : combinations(n_models, r)) {
      for (const auto& strategy : strategies) {
        for (std::size_t rep = 0; rep < strategy.repeats; ++rep) {
          rows.push_back(SweepRow{r, subset, strategy.name, rep, strategy.evaluate(subset, rep)});
        }
      }
    }
  }
  return rows;
}

LooTable leave_one_out(std::span<const std::string> model_names, const EnsembleBuilder& builder,
                       std::span<const ContextCluster> clusters, std::span<const Triple> test,
                       const EmbeddingTable& embeddings, std::size_t threads) {
  const std::size_t n = model_names.size();
  if (n < 2) throw Error(ErrorCode::BadArgument, "leave_one_out: need at least two models");
  LooTable table;
  for (const auto& c : clusters) table.cluster_names.push_back(c.name);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> members;
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) members.push_back(k);
    }
    const PredictFn ensemble = builder(members);
    LooRow row{i, model_names[i], {}, 0.0};
    for (const auto& c : clusters) row.cluster_accuracy.push_back(accuracy_2afc(ensemble, c.triples, embeddings, threads).accuracy);
    row.test_accuracy = accuracy_2afc(ensemble, test, embeddings, threads).accuracy;
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::size_t bin_index(double value, double lo, double hi, std::size_t resolution) {
  if (!(hi > lo)) return 0;
  const double t = (value - lo) / (hi - lo) * static_cast<double>(resolution);
  if (!(t > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(t), resolution - 1);
}

TrainingTraceRecorder::TrainingTraceRecorder(std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                             const PcaModel& pca, std::filesystem::path dir, std::size_t resolution,
                                             PredictMode mode)
    : validation_(validation.begin(), validation.end()),
      embeddings_(&embeddings),
      dir_(std::move(dir)),
      resolution_(resolution),
      mode_(mode) {
  if (validation_.empty()) throw Error(ErrorCode::EmptyInput, "training trace: empty validation set");
  if (pca.components.rows() < 2) throw Error(ErrorCode::BadArgument, "training trace: PCA needs at least 2 components");
  if (resolution_ == 0) throw Error(ErrorCode::BadArgument, "training trace: resolution must be positive");
  require_ids(validation_, embeddings);

  std::vector<std::array<double, 2>> features;
  features.reserve(validation_.size());
  x_bounds_ = {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  y_bounds_ = x_bounds_;
  for (const auto& t : validation_) {
    const Vector f = pca_transform(pca, embeddings.row(t.ref));
    features.push_back({f(0), f(1)});
    x_bounds_ = {std::min(x_bounds_[0], f(0)), std::max(x_bounds_[1], f(0))};
    y_bounds_ = {std::min(y_bounds_[0], f(1)), std::max(y_bounds_[1], f(1))};
  }
  cell_of_.reserve(features.size());
  for (const auto& f : features) {
    const std::size_t x = bin_index(f[0], x_bounds_[0], x_bounds_[1], resolution_);
    const std::size_t y = bin_index(f[1], y_bounds_[0], y_bounds_[1], resolution_);
    cell_of_.push_back(y * resolution_ + x);
  }
}

void TrainingTraceRecorder::record(const CsModel& model, const EpochMetrics& metrics) {
  TraceGrid grid;
  grid.epoch = metrics.epoch;
  grid.resolution = resolution_;
  grid.x_bounds = x_bounds_;
  grid.y_bounds = y_bounds_;
  grid.loss = metrics.loss;
  grid.cells.assign(resolution_ * resolution_, Tally{});
  const CsPredictor predictor(model, *embeddings_, mode_);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < validation_.size(); ++i) {
    const bool ok = predictor(validation_[i]).label == validation_[i].y;
    auto& cell = grid.cells[cell_of_[i]];
    cell.total += 1;
    if (ok) {
      cell.correct += 1;
      ++correct;
    }
  }
  grid.accuracy = static_cast<double>(correct) / static_cast<double>(validation_.size());
  binio::write_file(dir_ / fmt::format("epoch_{:03d}.csv", grid.epoch), trace_grid_csv(grid));
  grids_.push_back(std::move(grid));

  std::string summary = "epoch,loss,validation_accuracy\n";
  for (const auto& g : grids_) summary += fmt::format("{},{:.17g},{:.17g}\n", g.epoch, g.loss, g.accuracy);
  binio::write_file(dir_ / "summary.csv", summary);
}

EpochHook TrainingTraceRecorder::hook() {
  return [this](const CsModel& model, const EpochMetrics& metrics) { record(model, metrics); };
}

std::string trace_grid_csv(const TraceGrid& grid) {
  std::string out = "x_bin,y_bin,correct,total\n";
  for (std::size_t y = 0; y < grid.resolution; ++y) {
    for (std::size_t x = 0; x < grid.resolution; ++x) {
      const auto& c = grid.cells[y * grid.resolution + x];
      out += fmt::format("{},{},{},{}\n", x, y, c.correct, c.total);
    }
  }
  return out;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string csv_optional(const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string(); }

}  // namespace

std::string report_to_json(const EvalReport& report) {
  json per_ref = json::object();
  for (const auto& [id, tally] : report.per_reference) {
    per_ref[id] = {{"correct", tally.correct},
                   {"total", tally.total},
                   {"accuracy", tally.accuracy()},
                   {"low_support", tally.total < kMinReferenceSupport}};
  }
  json doc = {{"accuracy", report.accuracy},
              {"n", report.n},
              {"correct", report.correct},
              {"n_references", report.per_reference.size()},
              {"low_support_references", report.low_support_references().size()},
              {"mean_symmetry_score", optional_json(report.mean_symmetry_score)},
              {"symmetry_accuracy", optional_json(report.symmetry_accuracy)},
              {"per_reference", per_ref}};
  return doc.dump(2) + "\n";
}

std::string crossval_to_csv(const CrossValMatrix& m) {
  std::string out = "model";
  for (const auto& c : m.cols) out += "," + c;
  out += ",average,average_wo_diagonal\n";
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    out += m.rows[i];
    for (double v : m.cells[i]) out += fmt::format(",{:.6f}", v);
    out += fmt::format(",{:.6f},{}\n", m.row_average[i], csv_optional(m.row_offdiag_average[i]));
  }
  out += "average";
  for (double v : m.col_average) out += fmt::format(",{:.6f}", v);
  out += ",,\naverage_wo_diagonal";
  for (const auto& v : m.col_offdiag_average) out += "," + csv_optional(v);
  out += ",,\n";
  return out;
}

std::string crossval_to_json(const CrossValMatrix& m) {
  json rows_offdiag = json::array();
  for (const auto& v : m.row_offdiag_average) rows_offdiag.push_back(optional_json(v));
  json cols_offdiag = json::array();
  for (const auto& v : m.col_offdiag_average) cols_offdiag.push_back(optional_json(v));
  json diag = json::array();
  for (const auto& row : m.diagonal) diag.push_back(std::vector<bool>(row.begin(), row.end()));
  json doc = {{"rows", m.rows},
              {"cols", m.cols},
              {"cells", m.cells},
              {"diagonal", diag},
              {"row_average", m.row_average},
              {"col_average", m.col_average},
              {"row_offdiag_average", rows_offdiag},
              {"col_offdiag_average", cols_offdiag},
              {"diagonal_mean", optional_json(m.diagonal_mean)},
              {"offdiag_mean", optional_json(m.offdiag_mean)}};
  return doc.dump(2) + "\n";
}

std::string sweep_to_csv(std::span<const SweepRow> rows, std::span<const std::string> model_names) {
  std::string out = "r,combination,strategy,repeat,accuracy\n";
  for (const auto& row : rows) {
    std::string combo;
    for (std::size_t k = 0; k < row.combination.size(); ++k) {
      if (k > 0) combo += '+';
      const std::size_t idx = row.combination[k];
      combo += idx < model_names.size() ? model_names[idx] : std::to_string(idx);
    }
    out += fmt::format("{},{},{},{},{:.6f}\n", row.r, combo, row.strategy, row.repeat, row.accuracy);
  }
  return out;
}

std::string loo_to_csv(const LooTable& table) {
  std::string out = "left_out";
  for (const auto& c : table.cluster_names) out += "," + c;
  out += ",test\n";
  for (const auto& row : table.rows) {
    out += row.left_out_name;
    for (double v : row.cluster_accuracy) out += fmt::format(",{:.6f}", v);
    out += fmt::format(",{:.6f}\n", row.test_accuracy);
  }
  return out;
}

}  // namespace cosim
