#include "cosim/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "cosim/rng.hpp"
#include "log_internal.hpp"

namespace cosim {

using nlohmann::json;

std::size_t CredibilityMap::cell_of(const Vector& features) const {
  std::size_t index = 0;
  std::size_t stride = 1;
  for (std::size_t k = 0; k < dim_indices.size(); ++k) {
    const auto axis = static_cast<Eigen::Index>(dim_indices[k]);
    if (axis >= features.size()) throw Error(ErrorCode::LengthMismatch, "credibility map axis beyond feature length");
    index += stride * bin_index(features(axis), bounds[k][0], bounds[k][1], resolution);
    stride *= resolution;
  }
  return index;
}

double CredibilityMap::cell_score(const Vector& features) const {
  const Tally& cell = cells[cell_of(features)];
  return (static_cast<double>(cell.correct) + 1.0) / (static_cast<double>(cell.total) + 2.0);
}

std::vector<std::vector<std::size_t>> default_map_axes() { return {{0, 1}, {0, 2}, {1, 2}, {0}, {1}}; }

CredibilityMap build_credibility_map(const std::string& model_name, const Matrix& features, std::span<const std::uint8_t> correct,
                                     std::span<const std::size_t> dim_indices, std::size_t resolution) {
  if (features.cols() == 0) throw Error(ErrorCode::EmptyInput, "credibility map: no validation triples");
  if (static_cast<std::size_t>(features.cols()) != correct.size()) {
    throw Error(ErrorCode::LengthMismatch, "credibility map: features and correctness differ in length");
  }
  if (dim_indices.empty() || dim_indices.size() > 2) throw Error(ErrorCode::BadArgument, "credibility map needs 1 or 2 axes");
  if (resolution == 0) throw Error(ErrorCode::BadArgument, "credibility map resolution must be positive");
  for (std::size_t axis : dim_indices) {
    if (axis >= static_cast<std::size_t>(features.rows())) {
      throw Error(ErrorCode::BadArgument, "credibility map axis " + std::to_string(axis) + " beyond feature dimension " +
                                              std::to_string(features.rows()));
    }
  }
  CredibilityMap map;
  map.model_name = model_name;
  map.dim_indices.assign(dim_indices.begin(), dim_indices.end());
  map.resolution = resolution;
  for (std::size_t axis : dim_indices) {
    const auto row = features.row(static_cast<Eigen::Index>(axis));
    map.bounds.push_back({row.minCoeff(), row.maxCoeff()});
  }
  std::size_t n_cells = 1;
  for (std::size_t k = 0; k < dim_indices.size(); ++k) n_cells *= resolution;
  map.cells.assign(n_cells, Tally{});
  for (Eigen::Index i = 0; i < features.cols(); ++i) {
    Tally& cell = map.cells[map.cell_of(features.col(i))];
    cell.total += 1;
    cell.correct += correct[static_cast<std::size_t>(i)] != 0 ? 1 : 0;
  }
  return map;
}

Matrix reference_features(const PcaModel& pca, std::span<const Triple> triples, const EmbeddingTable& embeddings) {
  Matrix out(static_cast<Eigen::Index>(pca.output_dim()), static_cast<Eigen::Index>(triples.size()));
  for (std::size_t i = 0; i < triples.size(); ++i) {
    out.col(static_cast<Eigen::Index>(i)) = pca_transform(pca, embeddings.row(triples[i].ref));
  }
  return out;
}

PcaModel fit_reference_pca(std::span<const Triple> triples, const EmbeddingTable& embeddings, std::size_t l) {
  std::vector<std::size_t> rows;
  std::unordered_set<std::size_t> seen;
  for (const auto& t : triples) {
    const std::size_t idx = embeddings.index_of(t.ref);
    if (seen.insert(idx).second) rows.push_back(idx);
  }
  const std::size_t d = embeddings.dim();
  Matrix data(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto row = embeddings.row(rows[r]);
    for (std::size_t k = 0; k < d; ++k) data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = row[k];
  }
  if (rows.size() < 2) throw Error(ErrorCode::BadArgument, "reference PCA needs at least two distinct references");
  return pca_fit(data, clamp_pca_dim(l, rows.size(), d));
}

std::vector<std::uint8_t> correctness(const PredictFn& predict, std::span<const Triple> triples,
                                      const EmbeddingTable& embeddings, std::size_t threads) {
  // accuracy_2afc validates ids; the per-triple bits are recomputed here.
  if (triples.empty()) throw Error(ErrorCode::EmptyInput, "correctness: no triples");
  for (const auto& t : triples) {
    for (const auto* id : {&t.ref, &t.a, &t.b}) {
      if (!embeddings.contains(*id)) throw Error(ErrorCode::MissingId, "id not in embedding table: " + *id);
    }
  }
  std::vector<std::uint8_t> out(triples.size());
  threads = std::clamp<std::size_t>(threads, 1, triples.size());
  if (threads == 1) {
    for (std::size_t i = 0; i < triples.size(); ++i) out[i] = predict(triples[i]).label == triples[i].y ? 1 : 0;
    return out;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        const std::size_t begin = triples.size() * w / threads;
        const std::size_t end = triples.size() * (w + 1) / threads;
        for (std::size_t i = begin; i < end; ++i) out[i] = predict(triples[i]).label == triples[i].y ? 1 : 0;
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& worker : workers) worker.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<CredibilityMap> build_credibility_maps(const std::string& model_name, const PredictFn& predict,
                                                   std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                                   const PcaModel& pca, const std::vector<std::vector<std::size_t>>& axes,
                                                   std::size_t resolution, std::size_t threads) {
  const auto bits = correctness(predict, validation, embeddings, threads);
  const Matrix features = reference_features(pca, validation, embeddings);
  std::vector<CredibilityMap> maps;
  for (const auto& a : axes) maps.push_back(build_credibility_map(model_name, features, bits, a, resolution));
  return maps;
}

double credibility_score(std::span<const CredibilityMap> maps, const Vector& features) {
  if (maps.empty()) throw Error(ErrorCode::BadArgument, "credibility_score: no maps");
  double sum = 0.0;
  for (const auto& m : maps) sum += m.cell_score(features);
  return sum / static_cast<double>(maps.size());
}

std::vector<double> normalize_weights(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::BadArgument, "normalize_weights: no scores");
  double sum = 0.0;
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0) throw Error(ErrorCode::BadArgument, "normalize_weights: scores must be finite and >= 0");
    sum += s;
  }
  std::vector<double> out(scores.size());
  if (sum == 0.0) {
    std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(scores.size()));
    return out;
  }
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] / sum;
  return out;
}

Label majority_vote(std::span<const Prediction> predictions) {
  if (predictions.empty()) throw Error(ErrorCode::BadArgument, "majority_vote: no members");
  long sum = 0;
  for (const auto& p : predictions) sum += sign(p.label);
  if (sum < 0) return Label::ACloser;
  if (sum > 0) return Label::BCloser;
  std::size_t best = 0;
  double best_margin = -1.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double margin = std::abs(predictions[i].confidence_ab - 0.5);
    if (margin > best_margin) {
      best_margin = margin;
      best = i;
    }
  }
  return predictions[best].label;
}

Label weighted_vote(std::span<const Prediction> predictions, std::span<const double> weights) {
  if (predictions.empty()) throw Error(ErrorCode::BadArgument, "weighted_vote: no members");
  if (predictions.size() != weights.size()) throw Error(ErrorCode::BadArgument, "weighted_vote: one weight per member required");
  double total = 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!std::isfinite(weights[i]) || weights[i] < 0.0) throw Error(ErrorCode::BadArgument, "weighted_vote: weights must be >= 0");
    total += weights[i];
    sum += weights[i] * sign(predictions[i].label);
  }
  if (total == 0.0) throw Error(ErrorCode::BadArgument, "weighted_vote: all weights are zero");
  if (sum < 0.0) return Label::ACloser;
  if (sum > 0.0) return Label::BCloser;
  return majority_vote(predictions);
}

std::vector<std::size_t> apply_filter(std::span<const double> scores, const FilterRule& rule) {
  std::vector<std::size_t> keep;
  if (rule.kind == FilterRule::Kind::Threshold) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= rule.threshold) keep.push_back(i);
    }
    return keep;
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(rule.top_k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

Label filtered_vote(std::span<const Prediction> predictions, std::span<const double> scores, const FilterRule& rule) {
  if (predictions.size() != scores.size()) throw Error(ErrorCode::BadArgument, "filtered_vote: one score per member required");
  const auto keep = apply_filter(scores, rule);
  if (keep.empty()) {
    detail::debug("filtered_vote: filter removed every member, using majority vote");
    return majority_vote(predictions);
  }
  std::vector<Prediction> kept;
  std::vector<double> kept_scores;
  for (std::size_t i : keep) {
    kept.push_back(predictions[i]);
    kept_scores.push_back(scores[i]);
  }
  return weighted_vote(kept, normalize_weights(kept_scores));
}

std::vector<Prediction> member_predictions(std::span<const PredictFn> members, const Triple& triple) {
  std::vector<Prediction> out;
  out.reserve(members.size());
  for (const auto& m : members) out.push_back(m(triple));
  return out;
}

Label majority_vote(std::span<const PredictFn> members, const Triple& triple) {
  return majority_vote(member_predictions(members, triple));
}

Label weighted_vote(std::span<const PredictFn> members, std::span<const double> weights, const Triple& triple) {
  return weighted_vote(member_predictions(members, triple), weights);
}

Label filtered_vote(std::span<const PredictFn> members, std::span<const double> scores, const FilterRule& rule,
                    const Triple& triple) {
  return filtered_vote(member_predictions(members, triple), scores, rule);
}

void RegressorConfig::validate() const {
  if (hidden == 0) throw Error(ErrorCode::BadConfig, "regressor hidden width must be positive");
  if (epochs == 0) throw Error(ErrorCode::BadConfig, "regressor epochs must be positive");
  if (batch_size == 0) throw Error(ErrorCode::BadConfig, "regressor batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::BadConfig, "regressor lr must be positive");
}

Vector WeightRegressorSet::features(std::span<const float> embedding) const {
  return pca_transform(pca, embedding) * feature_scale;
}

std::vector<double> WeightRegressorSet::predict_accuracies(std::span<const float> embedding) const {
  const Vector x = features(embedding);
  std::vector<double> out;
  out.reserve(regressors.size());
  for (const auto& r : regressors) out.push_back(std::clamp(nets::mlp_forward(r, x)(0), 0.0, 1.0));
  return out;
}

PredictionPanel build_panel(std::span<const PredictFn> members, std::span<const Triple> triples,
                            const EmbeddingTable& embeddings, std::size_t threads) {
  PredictionPanel panel;
  panel.n_members = members.size();
  panel.n_triples = triples.size();
  panel.predictions.resize(members.size() * triples.size());
  for (const auto& t : triples) {
    for (const auto* id : {&t.ref, &t.a, &t.b}) {
      if (!embeddings.contains(*id)) throw Error(ErrorCode::MissingId, "id not in embedding table: " + *id);
    }
  }
  auto fill = [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      for (std::size_t m = 0; m < members.size(); ++m) panel.predictions[t * members.size() + m] = members[m](triples[t]);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(triples.size(), 1));
  if (threads == 1) {
    fill(0, triples.size());
    return panel;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        fill(triples.size() * w / threads, triples.size() * (w + 1) / threads);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& worker : workers) worker.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return panel;
}

namespace {

nets::MlpParams train_regressor(const Matrix& x, const Vector& targets, const RegressorConfig& cfg, std::uint64_t seed) {
  Rng init_rng(derive_seed(seed, "init"));
  Rng order_rng(derive_seed(seed, "order"));
  const std::array<std::size_t, 3> dims{static_cast<std::size_t>(x.rows()), cfg.hidden, 1};
  nets::MlpParams net = nets::make_mlp(dims, nets::OutputActivation::Sigmoid, init_rng);
  nets::AdamState state = nets::AdamState::for_params(net);
  const auto n = static_cast<std::size_t>(x.cols());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      Matrix xb(x.rows(), static_cast<Eigen::Index>(count));
      Vector tb(static_cast<Eigen::Index>(count));
      for (std::size_t k = 0; k < count; ++k) {
        xb.col(static_cast<Eigen::Index>(k)) = x.col(static_cast<Eigen::Index>(order[start + k]));
        tb(static_cast<Eigen::Index>(k)) = targets(static_cast<Eigen::Index>(order[start + k]));
      }
      const auto step = nets::regression_loss_and_gradients(net, xb, tb);
      if (!std::isfinite(step.loss)) throw Error(ErrorCode::NonFiniteLoss, "weight regressor loss is not finite");
      nets::adam_step(net, step.grad, state, cfg.lr);
    }
  }
  return net;
}

}  // namespace

WeightRegressorSet train_weight_regressors(std::span<const std::string> member_names, const PredictionPanel& panel,
                                           std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                           const PcaModel& pca, const RegressorConfig& cfg) {
  cfg.validate();
  if (validation.empty()) throw Error(ErrorCode::EmptyInput, "weight regressors: no validation triples");
  if (panel.n_triples != validation.size() || panel.n_members != member_names.size()) {
    throw Error(ErrorCode::LengthMismatch, "weight regressors: panel does not match members and validation");
  }
  WeightRegressorSet set;
  set.pca = pca;
  set.feature_scale = pca.eigenvalues.size() > 0 && pca.eigenvalues(0) > 0.0 ? 1.0 / std::sqrt(pca.eigenvalues(0)) : 1.0;
  set.member_names.assign(member_names.begin(), member_names.end());

  // Distinct references in first-appearance order, with per-member tallies.
  std::vector<ImageId> refs;
  std::unordered_map<ImageId, std::size_t> ref_index;
  std::vector<std::size_t> ref_of(validation.size());
  for (std::size_t t = 0; t < validation.size(); ++t) {
    auto [it, inserted] = ref_index.try_emplace(validation[t].ref, refs.size());
    if (inserted) refs.push_back(validation[t].ref);
    ref_of[t] = it->second;
  }
  const auto R = static_cast<Eigen::Index>(refs.size());
  Matrix x(static_cast<Eigen::Index>(pca.output_dim()), R);
  for (Eigen::Index r = 0; r < R; ++r) x.col(r) = set.features(embeddings.row(refs[static_cast<std::size_t>(r)]));

  for (std::size_t m = 0; m < member_names.size(); ++m) {
    Vector correct = Vector::Zero(R);
    Vector total = Vector::Zero(R);
    for (std::size_t t = 0; t < validation.size(); ++t) {
      const auto r = static_cast<Eigen::Index>(ref_of[t]);
      total(r) += 1.0;
      if (panel.at(m, t).label == validation[t].y) correct(r) += 1.0;
    }
    const Vector targets = correct.cwiseQuotient(total);
    const std::uint64_t seed = derive_seed(cfg.seed, "weights/" + member_names[m]);
    set.regressors.push_back(train_regressor(x, targets, cfg, seed));
  }
  return set;
}

WeightRegressorSet train_weight_regressors(std::span<const std::string> member_names, const PredictionPanel& panel,
                                           std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                           std::size_t l, const RegressorConfig& cfg) {
  return train_weight_regressors(member_names, panel, validation, embeddings, fit_reference_pca(validation, embeddings, l),
                                 cfg);
}

WeightRegressorSet train_weight_regressors(std::span<const PredictFn> members, std::span<const std::string> member_names,
                                           std::span<const Triple> validation, const EmbeddingTable& embeddings,
                                           std::size_t l, const RegressorConfig& cfg, std::size_t threads) {
  const auto panel = build_panel(members, validation, embeddings, threads);
  return train_weight_regressors(member_names, panel, validation, embeddings, l, cfg);
}

std::vector<double> predict_weights(const WeightRegressorSet& set, std::span<const float> reference_embedding) {
  if (reference_embedding.size() != set.pca.input_dim()) {
    throw Error(ErrorCode::LengthMismatch, "predict_weights: embedding length " + std::to_string(reference_embedding.size()) +
                                               " but regressors expect " + std::to_string(set.pca.input_dim()));
  }
  return normalize_weights(set.predict_accuracies(reference_embedding));
}

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::MajorityVote: return "majority_vote";
    case Strategy::CredibilityWeighted: return "credibility_weighted";
    case Strategy::FilteredVote: return "filtered_vote";
    case Strategy::RegressorWeighted: return "regressor_weighted";
  }
  return "?";
}

Strategy parse_strategy(std::string_view text) {
  for (auto s : {Strategy::MajorityVote, Strategy::CredibilityWeighted, Strategy::FilteredVote, Strategy::RegressorWeighted}) {
    if (to_string(s) == text) return s;
  }
  throw Error(ErrorCode::BadArgument, "unknown ensemble strategy: " + std::string(text));
}

std::string_view to_string(ScoreSource source) { return source == ScoreSource::Credibility ? "credibility" : "regressor"; }

ScoreSource parse_score_source(std::string_view text) {
  if (text == "credibility") return ScoreSource::Credibility;
  if (text == "regressor") return ScoreSource::Regressor;
  throw Error(ErrorCode::BadArgument, "unknown score source: " + std::string(text));
}

void EnsembleModel::validate() const {
  if (members.empty()) throw Error(ErrorCode::BadConfig, "ensemble has no members");
  const bool needs_maps = strategy == Strategy::CredibilityWeighted ||
                          (strategy == Strategy::FilteredVote && filter_scores == ScoreSource::Credibility);
  const bool needs_regressors = strategy == Strategy::RegressorWeighted ||
                                (strategy == Strategy::FilteredVote && filter_scores == ScoreSource::Regressor);
  if (needs_maps) {
    if (!map_pca) throw Error(ErrorCode::BadConfig, "credibility strategy needs the map PCA");
    if (maps.size() != members.size()) throw Error(ErrorCode::BadConfig, "credibility strategy needs maps for every member");
    for (const auto& m : maps) {
      if (m.empty()) throw Error(ErrorCode::BadConfig, "every member needs at least one credibility map");
      for (const auto& map : m) {
        for (std::size_t axis : map.dim_indices) {
          if (axis >= map_pca->output_dim()) throw Error(ErrorCode::BadConfig, "credibility map axis beyond map PCA dimension");
        }
      }
    }
  }
  if (needs_regressors) {
    if (!regressors) throw Error(ErrorCode::BadConfig, "regressor strategy needs weight regressors");
    if (regressors->regressors.size() != members.size()) {
      throw Error(ErrorCode::BadConfig, "regressor strategy needs one regressor per member");
    }
  }
  if (strategy == Strategy::FilteredVote && filter.kind == FilterRule::Kind::TopK && filter.top_k == 0) {
    throw Error(ErrorCode::BadConfig, "filter top_k must be positive");
  }
}

EnsembleModel select_members(const EnsembleModel& model, std::span<const std::size_t> members) {
  EnsembleModel out;
  out.mode = model.mode;
  out.strategy = model.strategy;
  out.map_pca = model.map_pca;
  out.filter = model.filter;
  out.filter_scores = model.filter_scores;
  if (model.regressors) {
    out.regressors = WeightRegressorSet{model.regressors->pca, model.regressors->feature_scale, {}, {}};
  }
  for (std::size_t i : members) {
    if (i >= model.members.size()) throw Error(ErrorCode::BadArgument, fmt::format("member index {} out of range", i));
    out.members.push_back(model.members[i]);
    if (i < model.maps.size()) out.maps.push_back(model.maps[i]);
    if (model.regressors && i < model.regressors->regressors.size()) {
      out.regressors->member_names.push_back(model.regressors->member_names[i]);
      out.regressors->regressors.push_back(model.regressors->regressors[i]);
    }
  }
  return out;
}

EnsemblePredictor::EnsemblePredictor(const EnsembleModel& model, const EmbeddingTable& embeddings)
    : model_(&model), embeddings_(&embeddings) {
  model.validate();
  members_.reserve(model.members.size());
  for (const auto& m : model.members) members_.emplace_back(m, embeddings, model.mode);
}

std::vector<double> EnsemblePredictor::member_scores(const ImageId& ref) const {
  const auto& m = *model_;
  const bool use_maps = m.strategy == Strategy::CredibilityWeighted ||
                        (m.strategy == Strategy::FilteredVote && m.filter_scores == ScoreSource::Credibility);
  const bool use_regressors = m.strategy == Strategy::RegressorWeighted ||
                              (m.strategy == Strategy::FilteredVote && m.filter_scores == ScoreSource::Regressor);
  if (use_maps) {
    const Vector f = pca_transform(*m.map_pca, embeddings_->row(ref));
    std::vector<double> scores;
    for (const auto& maps : m.maps) scores.push_back(credibility_score(maps, f));
    return scores;
  }
  if (use_regressors) return m.regressors->predict_accuracies(embeddings_->row(ref));
  return {};
}

namespace {

Prediction ensemble_prediction(Label label, std::span<const Prediction> members, std::span<const double> weights) {
  double agree = 0.0, total = 0.0;
  for (std::size_t i = 0; i < members.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    total += w;
    if (members[i].label == label) agree += w;
  }
  Prediction p;
  p.label = label;
  p.confidence_ab = total > 0.0 ? agree / total : 0.5;
  p.confidence_ba = p.confidence_ab;
  return p;
}

Label dispatch(Strategy strategy, std::span<const Prediction> preds, std::span<const double> scores, const FilterRule& filter) {
  switch (strategy) {
    case Strategy::MajorityVote: return majority_vote(preds);
    case Strategy::CredibilityWeighted:
    case Strategy::RegressorWeighted: return weighted_vote(preds, normalize_weights(scores));
    case Strategy::FilteredVote: return filtered_vote(preds, scores, filter);
  }
  throw Error(ErrorCode::BadArgument, "unknown strategy");
}

}  // namespace

Prediction EnsemblePredictor::operator()(const Triple& triple) const {
  std::vector<Prediction> preds;
  preds.reserve(members_.size());
  for (const auto& m : members_) preds.push_back(m(triple));
  const auto scores = member_scores(triple.ref);
  const Label label = dispatch(model_->strategy, preds, scores, model_->filter);
  return ensemble_prediction(label, preds, scores);
}

EvalReport evaluate_ensemble(const EnsembleModel& model, std::span<const Triple> triples, const EmbeddingTable& embeddings,
                             std::size_t threads) {
  const EnsemblePredictor predictor(model, embeddings);
  return accuracy_2afc([&predictor](const Triple& t) { return predictor(t); }, triples, embeddings, threads);
}

Matrix credibility_score_panel(const std::vector<std::vector<CredibilityMap>>& maps, const PcaModel& pca,
                               std::span<const Triple> triples, const EmbeddingTable& embeddings) {
  Matrix out(static_cast<Eigen::Index>(maps.size()), static_cast<Eigen::Index>(triples.size()));
  for (std::size_t t = 0; t < triples.size(); ++t) {
    const Vector f = pca_transform(pca, embeddings.row(triples[t].ref));
    for (std::size_t m = 0; m < maps.size(); ++m) {
      out(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t)) = credibility_score(maps[m], f);
    }
  }
  return out;
}

Matrix regressor_score_panel(const WeightRegressorSet& set, std::span<const Triple> triples, const EmbeddingTable& embeddings) {
  Matrix out(static_cast<Eigen::Index>(set.regressors.size()), static_cast<Eigen::Index>(triples.size()));
  std::unordered_map<ImageId, std::vector<double>> cache;
  for (std::size_t t = 0; t < triples.size(); ++t) {
    auto it = cache.find(triples[t].ref);
    if (it == cache.end()) it = cache.emplace(triples[t].ref, set.predict_accuracies(embeddings.row(triples[t].ref))).first;
    for (std::size_t m = 0; m < it->second.size(); ++m) {
      out(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t)) = it->second[m];
    }
  }
  return out;
}

double panel_accuracy(const PredictionPanel& panel, std::span<const Triple> triples, std::span<const std::size_t> members,
                      Strategy strategy, const Matrix* scores, const FilterRule* filter) {
  if (triples.empty() || panel.n_triples != triples.size()) {
    throw Error(ErrorCode::LengthMismatch, "panel_accuracy: panel does not match the triples");
  }
  if (members.empty()) throw Error(ErrorCode::BadArgument, "panel_accuracy: no members");
  if (strategy != Strategy::MajorityVote && scores == nullptr) {
    throw Error(ErrorCode::BadArgument, "panel_accuracy: weighted strategies need member scores");
  }
  const FilterRule default_filter;
  const FilterRule& rule = filter != nullptr ? *filter : default_filter;
  std::vector<Prediction> preds(members.size());
  std::vector<double> member_scores(strategy == Strategy::MajorityVote ? 0 : members.size());
  std::size_t correct = 0;
  for (std::size_t t = 0; t < triples.size(); ++t) {
    for (std::size_t k = 0; k < members.size(); ++k) {
      preds[k] = panel.at(members[k], t);
      if (!member_scores.empty()) {
        member_scores[k] = (*scores)(static_cast<Eigen::Index>(members[k]), static_cast<Eigen::Index>(t));
      }
    }
    if (dispatch(strategy, preds, member_scores, rule) == triples[t].y) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(triples.size());
}

SweepStrategy vote_sweep_strategy(const PredictionPanel& panel, std::span<const Triple> triples, std::string name) {
  return SweepStrategy{std::move(name), 1, [&panel, triples](std::span<const std::size_t> members, std::size_t) {
                         return panel_accuracy(panel, triples, members, Strategy::MajorityVote);
                       }};
}

SweepStrategy weighted_sweep_strategy(const PredictionPanel& panel, std::span<const Triple> triples,
                                      std::vector<Matrix> score_repeats, std::string name) {
  const std::size_t repeats = score_repeats.size();
  auto scores = std::make_shared<const std::vector<Matrix>>(std::move(score_repeats));
  return SweepStrategy{std::move(name), repeats,
                       [&panel, triples, scores](std::span<const std::size_t> members, std::size_t repeat) {
                         return panel_accuracy(panel, triples, members, Strategy::CredibilityWeighted,
                                               &(*scores)[repeat]);
                       }};
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr std::string_view kMapMagic = "CSCM";
constexpr std::string_view kRegressorMagic = "CSWR";
constexpr std::uint16_t kFileVersion = 1;

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw Error(ErrorCode::BadArgument, std::string(what) + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string encode_credibility_map(const CredibilityMap& map) {
  binio::Writer w;
  w.put_magic(kMapMagic);
  w.put<std::uint16_t>(kFileVersion);
  w.put<std::uint32_t>(to_u32(map.dim_indices.size(), "axis count"));
  for (std::size_t a : map.dim_indices) w.put<std::uint32_t>(to_u32(a, "axis"));
  w.put<std::uint32_t>(to_u32(map.resolution, "resolution"));
  w.put<std::uint32_t>(to_u32(map.cells.size(), "cell count"));
  for (const auto& c : map.cells) {
    w.put<std::uint32_t>(to_u32(c.correct, "cell count"));
    w.put<std::uint32_t>(to_u32(c.total, "cell count"));
  }
  return w.take();
}

std::string credibility_map_sidecar(const CredibilityMap& map) {
  json bounds = json::array();
  for (const auto& b : map.bounds) bounds.push_back({b[0], b[1]});
  const json doc = {{"model", map.model_name}, {"axes", map.dim_indices}, {"bounds", bounds}, {"resolution", map.resolution}};
  return doc.dump(2) + "\n";
}

CredibilityMap decode_credibility_map(std::string_view bytes, const std::string& sidecar_json, const std::string& context) {
  binio::Reader r(bytes, context);
  r.expect_magic(kMapMagic);
  const auto version = r.get<std::uint16_t>();
  if (version != kFileVersion) throw Error(ErrorCode::BadVersion, context + ": unsupported version " + std::to_string(version));
  CredibilityMap map;
  const auto n_axes = r.get<std::uint32_t>();
  if (n_axes < 1 || n_axes > 2) throw Error(ErrorCode::BadFormat, context + ": map must have 1 or 2 axes");
  for (std::uint32_t k = 0; k < n_axes; ++k) map.dim_indices.push_back(r.get<std::uint32_t>());
  map.resolution = r.get<std::uint32_t>();
  const auto n_cells = r.get<std::uint32_t>();
  std::size_t expected = 1;
  for (std::uint32_t k = 0; k < n_axes; ++k) expected *= map.resolution;
  if (map.resolution == 0 || n_cells != expected) {
    throw Error(ErrorCode::CountMismatch, context + ": cell count does not match resolution");
  }
  map.cells.resize(n_cells);
  for (auto& c : map.cells) {
    c.correct = r.get<std::uint32_t>();
    c.total = r.get<std::uint32_t>();
    if (c.correct > c.total) throw Error(ErrorCode::BadFormat, context + ": cell has correct > total");
  }
  if (r.remaining() != 0) throw Error(ErrorCode::CountMismatch, context + ": trailing bytes");

  json doc;
  try {
    doc = json::parse(sidecar_json);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadFormat, context + " sidecar: " + e.what());
  }
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key != "model" && key != "axes" && key != "bounds" && key != "resolution") {
        throw Error(ErrorCode::BadFormat, context + " sidecar: unknown key " + key);
      }
    }
    map.model_name = doc.at("model").get<std::string>();
    if (doc.at("axes").get<std::vector<std::size_t>>() != map.dim_indices ||
        doc.at("resolution").get<std::size_t>() != map.resolution) {
      throw Error(ErrorCode::BadFormat, context + ": sidecar disagrees with the binary section");
    }
    for (const auto& b : doc.at("bounds")) map.bounds.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadFormat, context + " sidecar: " + e.what());
  }
  if (map.bounds.size() != map.dim_indices.size()) throw Error(ErrorCode::BadFormat, context + ": one bound pair per axis required");
  return map;
}

void save_credibility_map(const CredibilityMap& map, const std::filesystem::path& path) {
  binio::write_file(path, encode_credibility_map(map));
  auto sidecar = path;
  sidecar.replace_extension(".json");
  binio::write_file(sidecar, credibility_map_sidecar(map));
}

CredibilityMap load_credibility_map(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar.replace_extension(".json");
  return decode_credibility_map(binio::read_file(path), binio::read_file(sidecar), path.string());
}

std::string encode_weight_regressors(const WeightRegressorSet& set) {
  binio::Writer w;
  w.put_magic(kRegressorMagic);
  w.put<std::uint16_t>(kFileVersion);
  w.put<std::uint32_t>(to_u32(set.regressors.size(), "member count"));
  w.put<double>(set.feature_scale);
  const std::string pca = encode_pca(set.pca);
  w.put<std::uint32_t>(to_u32(pca.size(), "section length"));
  w.put_bytes(pca);
  for (std::size_t m = 0; m < set.regressors.size(); ++m) {
    const std::string& name = m < set.member_names.size() ? set.member_names[m] : std::string();
    w.put<std::uint32_t>(to_u32(name.size(), "name length"));
    w.put_bytes(name);
    const std::string net = nets::encode_mlp(set.regressors[m]);
    w.put<std::uint32_t>(to_u32(net.size(), "section length"));
    w.put_bytes(net);
  }
  return w.take();
}

WeightRegressorSet decode_weight_regressors(std::string_view bytes, const std::string& context) {
  binio::Reader r(bytes, context);
  r.expect_magic(kRegressorMagic);
  const auto version = r.get<std::uint16_t>();
  if (version != kFileVersion) throw Error(ErrorCode::BadVersion, context + ": unsupported version " + std::to_string(version));
  WeightRegressorSet set;
  const auto n = r.get<std::uint32_t>();
  set.feature_scale = r.get<double>();
  const auto pca_len = r.get<std::uint32_t>();
  set.pca = decode_pca(r.get_bytes(pca_len), context + " pca");
  for (std::uint32_t m = 0; m < n; ++m) {
    const auto name_len = r.get<std::uint32_t>();
    set.member_names.emplace_back(r.get_bytes(name_len));
    const auto net_len = r.get<std::uint32_t>();
    set.regressors.push_back(nets::decode_mlp(r.get_bytes(net_len), context + " regressor"));
    if (set.regressors.back().input_dim() != set.pca.output_dim() || set.regressors.back().output_dim() != 1) {
      throw Error(ErrorCode::DimMismatch, context + ": regressor shape does not match the PCA");
    }
  }
  if (r.remaining() != 0) throw Error(ErrorCode::CountMismatch, context + ": trailing bytes");
  return set;
}

bool operator==(const WeightRegressorSet& lhs, const WeightRegressorSet& rhs) {
  return encode_weight_regressors(lhs) == encode_weight_regressors(rhs);
}

void save_weight_regressors(const WeightRegressorSet& set, const std::filesystem::path& path) {
  binio::write_file(path, encode_weight_regressors(set));
}

WeightRegressorSet load_weight_regressors(const std::filesystem::path& path) {
  return decode_weight_regressors(binio::read_file(path), path.string());
}

namespace {

std::string path_string(const std::filesystem::path& p) { return p.generic_string(); }

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

std::string format_manifest(const EnsembleManifest& m) {
  json members = json::array();
  for (const auto& p : m.members) members.push_back(path_string(p));
  json maps = json::array();
  for (const auto& list : m.maps) {
    json inner = json::array();
    for (const auto& p : list) inner.push_back(path_string(p));
    maps.push_back(inner);
  }
  json doc = {{"members", members},
              {"strategy", std::string(to_string(m.strategy))},
              {"predict_mode", std::string(to_string(m.mode))},
              {"filter",
               {{"kind", m.filter.kind == FilterRule::Kind::TopK ? "top_k" : "threshold"},
                {"top_k", m.filter.top_k},
                {"threshold", m.filter.threshold},
                {"scores", std::string(to_string(m.filter_scores))}}}};
  if (m.embeddings) doc["embeddings"] = path_string(*m.embeddings);
  if (!m.maps.empty()) doc["maps"] = maps;
  if (m.map_pca) doc["map_pca"] = path_string(*m.map_pca);
  if (m.regressors) doc["regressors"] = path_string(*m.regressors);
  return doc.dump(2) + "\n";
}

EnsembleManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  const std::string ctx = "ensemble manifest";
  EnsembleManifest m;
  try {
    const json doc = json::parse(text);
    if (!doc.is_object()) throw Error(ErrorCode::BadFormat, ctx + ": expected an object");
    static const std::unordered_set<std::string> known{"members", "strategy",  "predict_mode", "embeddings",
                                                       "maps",    "map_pca",   "regressors",   "filter"};
    for (const auto& [key, value] : doc.items()) {
      if (!known.contains(key)) throw Error(ErrorCode::BadFormat, ctx + ": unknown key " + key);
    }
    for (const auto& p : doc.at("members")) m.members.push_back(resolve(base_dir, p.get<std::string>()));
    if (m.members.empty()) throw Error(ErrorCode::BadFormat, ctx + ": no members");
    m.strategy = parse_strategy(doc.at("strategy").get<std::string>());
    if (doc.contains("predict_mode")) m.mode = parse_predict_mode(doc.at("predict_mode").get<std::string>());
    if (doc.contains("embeddings")) m.embeddings = resolve(base_dir, doc.at("embeddings").get<std::string>());
    if (doc.contains("maps")) {
      for (const auto& list : doc.at("maps")) {
        std::vector<std::filesystem::path> inner;
        for (const auto& p : list) inner.push_back(resolve(base_dir, p.get<std::string>()));
        m.maps.push_back(std::move(inner));
      }
    }
    if (doc.contains("map_pca")) m.map_pca = resolve(base_dir, doc.at("map_pca").get<std::string>());
    if (doc.contains("regressors")) m.regressors = resolve(base_dir, doc.at("regressors").get<std::string>());
    if (doc.contains("filter")) {
      const auto& f = doc.at("filter");
      for (const auto& [key, value] : f.items()) {
        if (key != "kind" && key != "top_k" && key != "threshold" && key != "scores") {
          throw Error(ErrorCode::BadFormat, ctx + ": unknown filter key " + key);
        }
      }
      if (f.contains("kind")) {
        const auto kind = f.at("kind").get<std::string>();
        if (kind == "top_k") {
          m.filter.kind = FilterRule::Kind::TopK;
        } else if (kind == "threshold") {
          m.filter.kind = FilterRule::Kind::Threshold;
        } else {
          throw Error(ErrorCode::BadFormat, ctx + ": unknown filter kind " + kind);
        }
      }
      if (f.contains("top_k")) m.filter.top_k = f.at("top_k").get<std::size_t>();
      if (f.contains("threshold")) m.filter.threshold = f.at("threshold").get<double>();
      if (f.contains("scores")) m.filter_scores = parse_score_source(f.at("scores").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadFormat, ctx + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::BadArgument) throw Error(ErrorCode::BadFormat, e.what());
    throw;
  }
  return m;
}

EnsembleManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(binio::read_file(path), path.parent_path());
}

EnsembleModel load_ensemble(const EnsembleManifest& manifest) {
  EnsembleModel model;
  model.strategy = manifest.strategy;
  model.mode = manifest.mode;
  model.filter = manifest.filter;
  model.filter_scores = manifest.filter_scores;
  for (const auto& p : manifest.members) model.members.push_back(load_checkpoint(p));
  for (const auto& list : manifest.maps) {
    std::vector<CredibilityMap> maps;
    for (const auto& p : list) maps.push_back(load_credibility_map(p));
    model.maps.push_back(std::move(maps));
  }
  if (manifest.map_pca) model.map_pca = load_pca(*manifest.map_pca);
  if (manifest.regressors) model.regressors = load_weight_regressors(*manifest.regressors);
  model.validate();
  return model;
}

}  // namespace cosim
