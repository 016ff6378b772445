#include "cosim/csmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "cosim/rng.hpp"
#include "log_internal.hpp"

namespace cosim {

using nlohmann::json;

Vector to_vector(std::span<const float> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) v(static_cast<Eigen::Index>(i)) = values[i];
  return v;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::BadConfig, what); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (!(margin > 0.0) || !std::isfinite(margin)) fail("margin must be positive");
  if (!(triplet_weight >= 0.0) || !std::isfinite(triplet_weight)) fail("triplet_weight must be non-negative");
}

Vector CsModel::project(std::span<const float> embedding) const {
  return nets::forward_batch(projection, to_vector(embedding));
}

std::string_view to_string(PredictMode mode) { return mode == PredictMode::Embedding ? "embedding" : "ranking"; }

PredictMode parse_predict_mode(std::string_view text) {
  if (text == "embedding") return PredictMode::Embedding;
  if (text == "ranking") return PredictMode::Ranking;
  throw Error(ErrorCode::BadArgument, "predict mode must be 'embedding' or 'ranking', got '" + std::string(text) + "'");
}

std::string_view to_string(DecidedBy by) {
  switch (by) {
    case DecidedBy::RankingBlock: return "ranking_block";
    case DecidedBy::Confidence: return "confidence";
    case DecidedBy::EmbeddingDistance: return "embedding_distance";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

// Matrix with orthonormal rows (rows <= cols) or orthonormal columns.
Matrix random_orthonormal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const Eigen::Index tall = std::max(rows, cols), thin = std::min(rows, cols);
  Matrix gaussian(tall, thin);
  for (Eigen::Index c = 0; c < thin; ++c) {
    for (Eigen::Index r = 0; r < tall; ++r) gaussian(r, c) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(gaussian);
  Matrix q = qr.householderQ() * Matrix::Identity(tall, thin);
  // Fix column signs so the factorization is unique.
  const Matrix r = qr.matrixQR().topRows(thin).triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < thin; ++c) {
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  }
  return rows >= cols ? q : Matrix(q.transpose());
}

}  // namespace

CsModel init_cs_model(std::size_t input_dim, const ModelShape& shape, std::uint64_t seed, double margin) {
  if (input_dim == 0 || shape.proj_dim == 0 || shape.proj_hidden == 0) {
    throw Error(ErrorCode::BadConfig, "model dimensions must be positive");
  }
  CsModel model;
  model.margin = margin;
  Rng rng(derive_seed(seed, "cs-model/init"));

  const std::array<std::size_t, 3> proj_dims{input_dim, shape.proj_hidden, shape.proj_dim};
  model.projection = nets::make_mlp(proj_dims, nets::OutputActivation::Identity, rng);
  if (shape.proj_hidden == 2 * shape.proj_dim) {
    // relu(Px) - relu(-Px) = Px
    const auto p = static_cast<Eigen::Index>(shape.proj_dim);
    const Matrix basis = random_orthonormal(p, static_cast<Eigen::Index>(input_dim), rng);
    auto& hidden = model.projection.layers[0];
    hidden.weight.topRows(p) = basis;
    hidden.weight.bottomRows(p) = -basis;
    auto& out = model.projection.layers[1];
    out.weight.setZero();
    out.weight.leftCols(p).setIdentity();
    out.weight.rightCols(p) = -Matrix::Identity(p, p);
  }

  std::vector<std::size_t> rank_dims{3 * shape.proj_dim};
  rank_dims.insert(rank_dims.end(), shape.rank_hidden.begin(), shape.rank_hidden.end());
  rank_dims.push_back(2);
  model.ranking_block = nets::make_mlp(rank_dims, nets::OutputActivation::Softmax, rng);
  return model;
}

// ---------------------------------------------------------------------------
// Prediction

Triple swap_augment(const Triple& triple) { return Triple{triple.ref, triple.b, triple.a, negate(triple.y)}; }

Prediction embedding_prediction(const Vector& g_r, const Vector& g_a, const Vector& g_b) {
  const double d_a = cosine_distance(g_r, g_a);
  const double d_b = cosine_distance(g_r, g_b);
  Prediction p;
  p.decided_by = DecidedBy::EmbeddingDistance;
  p.label = d_a < d_b ? Label::ACloser : Label::BCloser;
  p.ambiguous = d_a == d_b;
  p.confidence_ab = p.confidence_ba = 0.5 + std::abs(d_a - d_b) / 4.0;
  return p;
}

BlockOutput block_output(const nets::MlpParams& ranking_block, const Vector& g_r, const Vector& g_a,
                         const Vector& g_b) {
  Vector input(g_r.size() + g_a.size() + g_b.size());
  input << g_r, g_a, g_b;
  const Vector probs = nets::mlp_forward(ranking_block, input);
  Eigen::Index k;
  const double confidence = probs.maxCoeff(&k);
  return BlockOutput{nets::label_of_class(k), confidence};
}

Prediction resolve_block_outputs(const BlockOutput& forward, const BlockOutput& swapped,
                                 const std::function<Prediction()>& embedding) {
  Prediction p;
  p.confidence_ab = forward.confidence;
  p.confidence_ba = swapped.confidence;
  if (forward.label == negate(swapped.label)) {
    p.label = forward.label;
    p.decided_by = DecidedBy::RankingBlock;
    return p;
  }
  p.ambiguous = true;
  if (forward.confidence > swapped.confidence) {
    p.label = forward.label;
    p.decided_by = DecidedBy::Confidence;
  } else if (swapped.confidence > forward.confidence) {
    p.label = negate(swapped.label);
    p.decided_by = DecidedBy::Confidence;
  } else {
    const Prediction fallback = embedding();
    p.label = fallback.label;
    p.decided_by = DecidedBy::EmbeddingDistance;
  }
  return p;
}

namespace {

Prediction ranking_prediction(const CsModel& model, const Vector& g_r, const Vector& g_a, const Vector& g_b) {
  const auto forward = block_output(model.ranking_block, g_r, g_a, g_b);
  const auto swapped = block_output(model.ranking_block, g_r, g_b, g_a);
  return resolve_block_outputs(forward, swapped, [&] { return embedding_prediction(g_r, g_a, g_b); });
}

}  // namespace

Prediction predict_by_embedding(const CsModel& model, const Triple& triple, const EmbeddingTable& embeddings) {
  return embedding_prediction(model.project(embeddings.row(triple.ref)), model.project(embeddings.row(triple.a)),
                              model.project(embeddings.row(triple.b)));
}

Prediction predict_by_ranking_block(const CsModel& model, const Triple& triple, const EmbeddingTable& embeddings) {
  return ranking_prediction(model, model.project(embeddings.row(triple.ref)), model.project(embeddings.row(triple.a)),
                            model.project(embeddings.row(triple.b)));
}

ProjectedTable::ProjectedTable(const CsModel& model, const EmbeddingTable& embeddings) : embeddings_(&embeddings) {
  if (embeddings.dim() != model.input_dim()) {
    throw Error(ErrorCode::DimMismatch, "model '" + model.name + "' expects dim " + std::to_string(model.input_dim()) +
                                            ", embeddings have dim " + std::to_string(embeddings.dim()));
  }
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  const auto d = static_cast<Eigen::Index>(embeddings.dim());
  projected_.resize(static_cast<Eigen::Index>(model.proj_dim()), n);
  constexpr Eigen::Index kChunk = 512;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index count = std::min(kChunk, n - start);
    Matrix raw(d, count);
    for (Eigen::Index j = 0; j < count; ++j) raw.col(j) = to_vector(embeddings.row(static_cast<std::size_t>(start + j)));
    projected_.middleCols(start, count) = nets::forward_batch(model.projection, raw);
  }
}

CsPredictor::CsPredictor(const CsModel& model, const EmbeddingTable& embeddings, PredictMode mode)
    : model_(&model), projected_(std::make_shared<ProjectedTable>(model, embeddings)), mode_(mode) {}

Prediction CsPredictor::operator()(const Triple& triple) const {
  const Vector g_r = projected_->row(triple.ref);
  const Vector g_a = projected_->row(triple.a);
  const Vector g_b = projected_->row(triple.b);
  return mode_ == PredictMode::Embedding ? embedding_prediction(g_r, g_a, g_b)
                                         : ranking_prediction(*model_, g_r, g_a, g_b);
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct IndexedTriple {
  Eigen::Index ref, a, b;
  Label y;
};

double embedding_accuracy(const CsModel& model, const Matrix& raw, std::span<const IndexedTriple> triples) {
  const Matrix g = nets::forward_batch(model.projection, raw);
  std::size_t correct = 0;
  for (const auto& t : triples) {
    const auto p = embedding_prediction(g.col(t.ref), g.col(t.a), g.col(t.b));
    correct += p.label == t.y ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(triples.size());
}

}  // namespace

CsModel train_cs_model(std::span<const Triple> train, const EmbeddingTable& embeddings, const TrainConfig& cfg,
                       const TrainOptions& options) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorCode::EmptyInput, "train_cs_model needs at least one triple");

  // Gather the distinct images once, as doubles.
  std::unordered_map<std::string_view, Eigen::Index> local;
  std::vector<std::size_t> table_rows;
  auto local_index = [&](const ImageId& id) {
    auto it = local.find(id);
    if (it != local.end()) return it->second;
    table_rows.push_back(embeddings.index_of(id));
    const auto idx = static_cast<Eigen::Index>(table_rows.size() - 1);
    local.emplace(id, idx);
    return idx;
  };
  std::vector<IndexedTriple> triples;
  triples.reserve(train.size());
  for (const auto& t : train) triples.push_back({local_index(t.ref), local_index(t.a), local_index(t.b), t.y});
  const auto d = static_cast<Eigen::Index>(embeddings.dim());
  Matrix raw(d, static_cast<Eigen::Index>(table_rows.size()));
  for (std::size_t j = 0; j < table_rows.size(); ++j) {
    raw.col(static_cast<Eigen::Index>(j)) = to_vector(embeddings.row(table_rows[j]));
  }

  CsModel model = init_cs_model(embeddings.dim(), options.shape, cfg.seed, cfg.margin);
  model.name = options.name;
  model.trained_on = options.trained_on;
  model.config = cfg;

  auto proj_state = nets::AdamState::for_params(model.projection);
  auto rank_state = nets::AdamState::for_params(model.ranking_block);
  const nets::LossSpec spec{cfg.margin, cfg.triplet_weight, 1.0};

  Rng rng(derive_seed(cfg.seed, "cs-model/train"));
  std::vector<std::size_t> order(triples.size());
  std::iota(order.begin(), order.end(), 0);

  nets::TripleBatch batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      const auto n = static_cast<Eigen::Index>(count);
      batch.ref.resize(d, n);
      batch.a.resize(d, n);
      batch.b.resize(d, n);
      batch.labels.resize(count);
      for (std::size_t j = 0; j < count; ++j) {
        const auto& t = triples[order[start + j]];
        const auto col = static_cast<Eigen::Index>(j);
        const bool swap = cfg.swap_augment && rng.bernoulli(0.5);
        batch.ref.col(col) = raw.col(t.ref);
        batch.a.col(col) = raw.col(swap ? t.b : t.a);
        batch.b.col(col) = raw.col(swap ? t.a : t.b);
        batch.labels[j] = swap ? negate(t.y) : t.y;
      }
      auto step = nets::ranking_loss_and_gradients(model.projection, model.ranking_block, batch, spec);
      if (!std::isfinite(step.loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "model '" + model.name + "': non-finite loss in epoch " +
                                                  std::to_string(epoch));
      }
      loss_sum += step.loss * static_cast<double>(count);
      correct += step.ranking_correct;
      nets::adam_step(model.projection, step.projection_grad, proj_state, cfg.lr);
      nets::adam_step(model.ranking_block, step.ranking_grad, rank_state, cfg.lr);
    }
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.loss = loss_sum / static_cast<double>(triples.size());
    metrics.ranking_accuracy = static_cast<double>(correct) / static_cast<double>(triples.size());
    metrics.embedding_accuracy = embedding_accuracy(model, raw, triples);
    model.history.push_back(metrics);
    detail::debug("{} epoch {}: loss {:.5f} ranking acc {:.4f} embedding acc {:.4f}", model.name, epoch, metrics.loss,
                  metrics.ranking_accuracy, metrics.embedding_accuracy);
    if (options.on_epoch) options.on_epoch(model, metrics);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "CSCK";
constexpr std::uint16_t kCheckpointVersion = 1;

json config_to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},   {"batch_size", cfg.batch_size},         {"lr", cfg.lr},
          {"margin", cfg.margin},   {"triplet_weight", cfg.triplet_weight}, {"swap_augment", cfg.swap_augment},
          {"seed", cfg.seed}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig cfg;
  cfg.epochs = j.at("epochs").get<std::size_t>();
  cfg.batch_size = j.at("batch_size").get<std::size_t>();
  cfg.lr = j.at("lr").get<double>();
  cfg.margin = j.at("margin").get<double>();
  cfg.triplet_weight = j.at("triplet_weight").get<double>();
  cfg.swap_augment = j.at("swap_augment").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

std::string encode_checkpoint(const CsModel& model) {
  json history = json::array();
  for (const auto& m : model.history) {
    history.push_back({{"epoch", m.epoch},
                       {"loss", m.loss},
                       {"ranking_accuracy", m.ranking_accuracy},
                       {"embedding_accuracy", m.embedding_accuracy}});
  }
  json header = {{"name", model.name},
                 {"margin", model.margin},
                 {"trained_on", model.trained_on},
                 {"config", config_to_json(model.config)},
                 {"history", history}};
  if (!model.history.empty()) {
    header["final_metrics"] = history.back();
  }
  const std::string header_text = header.dump();

  binio::Writer out;
  out.put_magic(kCheckpointMagic);
  out.put<std::uint16_t>(kCheckpointVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(header_text.size()));
  out.put_bytes(header_text);
  std::string bytes = out.take();
  nets::write_mlp(model.projection, bytes);
  nets::write_mlp(model.ranking_block, bytes);
  return bytes;
}

CsModel decode_checkpoint(std::string_view bytes, const std::string& context) {
  binio::Reader in(bytes, context);
  in.expect_magic(kCheckpointMagic);
  if (in.get<std::uint16_t>() != kCheckpointVersion) {
    throw Error(ErrorCode::BadVersion, context + ": unsupported checkpoint version");
  }
  const auto header_len = in.get<std::uint32_t>();
  const auto header_text = in.get_bytes(header_len);
  CsModel model;
  try {
    const json header = json::parse(header_text);
    model.name = header.at("name").get<std::string>();
    model.margin = header.at("margin").get<double>();
    model.trained_on = header.at("trained_on").get<std::vector<std::string>>();
    model.config = config_from_json(header.at("config"));
    for (const auto& m : header.at("history")) {
      model.history.push_back({m.at("epoch").get<std::size_t>(), m.at("loss").get<double>(),
                               m.at("ranking_accuracy").get<double>(), m.at("embedding_accuracy").get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadFormat, context + ": bad checkpoint header: " + e.what());
  }
  std::size_t offset = in.position();
  model.projection = nets::read_mlp(bytes, offset, context + " (projection)");
  model.ranking_block = nets::read_mlp(bytes, offset, context + " (ranking block)");
  if (offset != bytes.size()) throw Error(ErrorCode::CountMismatch, context + ": trailing bytes after checkpoint");
  if (model.ranking_block.input_dim() != 3 * model.projection.output_dim() || model.ranking_block.output_dim() != 2) {
    throw Error(ErrorCode::BadFormat, context + ": ranking block does not match the projection head");
  }
  return model;
}

void save_checkpoint(const CsModel& model, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(model));
}

CsModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path), path.string());
}

}  // namespace cosim
