#include "cosim/nets.hpp"

#include <algorithm>
#include <cmath>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"

namespace cosim::nets {

std::vector<std::size_t> MlpParams::layer_dims() const {
  std::vector<std::size_t> dims;
  if (layers.empty()) return dims;
  dims.push_back(static_cast<std::size_t>(layers.front().weight.cols()));
  for (const auto& layer : layers) dims.push_back(static_cast<std::size_t>(layer.weight.rows()));
  return dims;
}

std::size_t MlpParams::input_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols());
}

std::size_t MlpParams::output_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weight.rows());
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
  return n;
}

void MlpParams::validate() const {
  if (layers.empty()) throw Error(ErrorCode::BadArgument, "MLP has no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = layers[k];
    if (layer.weight.rows() == 0 || layer.weight.cols() == 0) throw Error(ErrorCode::BadArgument, "empty MLP layer");
    if (layer.bias.size() != layer.weight.rows()) throw Error(ErrorCode::BadArgument, "bias length mismatch in MLP layer");
    if (k > 0 && layer.weight.cols() != layers[k - 1].weight.rows()) {
      throw Error(ErrorCode::BadArgument, "MLP layer " + std::to_string(k) + " does not chain with its predecessor");
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      throw Error(ErrorCode::NonFiniteValue, "MLP layer " + std::to_string(k) + " has non-finite parameters");
    }
  }
  if (output == OutputActivation::Softmax && output_dim() < 2) {
    throw Error(ErrorCode::BadArgument, "softmax output needs at least 2 units");
  }
}

bool operator==(const MlpParams& lhs, const MlpParams& rhs) {
  if (lhs.output != rhs.output || lhs.layers.size() != rhs.layers.size()) return false;
  for (std::size_t k = 0; k < lhs.layers.size(); ++k) {
    const auto& a = lhs.layers[k];
    const auto& b = rhs.layers[k];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() || a.bias.size() != b.bias.size()) {
      return false;
    }
    if (!(a.weight.array() == b.weight.array()).all() || !(a.bias.array() == b.bias.array()).all()) return false;
  }
  return true;
}

MlpParams make_mlp(std::span<const std::size_t> dims, OutputActivation output, Rng& rng) {
  if (dims.size() < 2) throw Error(ErrorCode::BadArgument, "an MLP needs at least input and output dims");
  MlpParams params;
  params.output = output;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const auto in = static_cast<Eigen::Index>(dims[k]);
    const auto out = static_cast<Eigen::Index>(dims[k + 1]);
    if (in == 0 || out == 0) throw Error(ErrorCode::BadArgument, "MLP dims must be positive");
    Layer layer{Matrix(out, in), Vector::Zero(out)};
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = rng.normal(0.0, stddev);
    }
    params.layers.push_back(std::move(layer));
  }
  params.validate();
  return params;
}

MlpParams zeros_like(const MlpParams& params) {
  MlpParams out;
  out.output = params.output;
  out.layers.reserve(params.layers.size());
  for (const auto& layer : params.layers) {
    out.layers.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()), Vector::Zero(layer.bias.size())});
  }
  return out;
}

Vector softmax(const Vector& logits) {
  const double top = logits.maxCoeff();
  Vector e = (logits.array() - top).exp().matrix();
  return e / e.sum();
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Matrix forward_batch(const MlpParams& params, const Matrix& inputs, ForwardTrace* trace) {
  if (static_cast<std::size_t>(inputs.rows()) != params.input_dim()) {
    throw Error(ErrorCode::LengthMismatch, "MLP input has " + std::to_string(inputs.rows()) + " rows, expected " +
                                               std::to_string(params.input_dim()));
  }
  if (trace != nullptr) {
    trace->inputs.clear();
    trace->pre.clear();
  }
  Matrix current = inputs;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& layer = params.layers[k];
    Matrix pre = layer.weight * current;
    pre.colwise() += layer.bias;
    const bool last = k + 1 == params.layers.size();
    if (trace != nullptr) {
      trace->inputs.push_back(std::move(current));
      trace->pre.push_back(pre);
    }
    current = last ? std::move(pre) : Matrix(pre.cwiseMax(0.0));
  }
  return current;
}

Matrix backward_batch(const MlpParams& params, const ForwardTrace& trace, const Matrix& d_logits, MlpGradients& grads) {
  Matrix delta = d_logits;
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const auto& layer = params.layers[k];
    if (k + 1 < params.layers.size()) {
      // ReLU subgradient: 0 at the kink.
      delta.array() *= (trace.pre[k].array() > 0.0).cast<double>();
    }
    grads.layers[k].weight.noalias() += delta * trace.inputs[k].transpose();
    grads.layers[k].bias += delta.rowwise().sum();
    delta = layer.weight.transpose() * delta;
  }
  return delta;
}

Vector mlp_forward(const MlpParams& params, const Vector& x) {
  if (static_cast<std::size_t>(x.size()) != params.input_dim()) {
    throw Error(ErrorCode::LengthMismatch, "MLP input length " + std::to_string(x.size()) + ", expected " +
                                               std::to_string(params.input_dim()));
  }
  Vector out = forward_batch(params, x);
  switch (params.output) {
    case OutputActivation::Identity:
      return out;
    case OutputActivation::Softmax:
      return softmax(out);
    case OutputActivation::Sigmoid:
      return out.unaryExpr([](double z) { return sigmoid(z); });
  }
  return out;
}

// ---------------------------------------------------------------------------

double cross_entropy_loss(const Vector& logits, Label y) {
  const double top = logits.maxCoeff();
  const double log_sum = top + std::log((logits.array() - top).exp().sum());
  return log_sum - logits(class_index(y));
}

TripletTerms triplet_loss(const Vector& e_r, const Vector& e_a, const Vector& e_b, Label y, double margin) {
  TripletTerms t;
  t.l_diff = (cosine_distance(e_r, e_a) - cosine_distance(e_r, e_b)) * sign(y);
  t.l_triplet = std::max(margin - t.l_diff, 0.0);
  return t;
}

double combined_loss(const Vector& ranking_logits, const Vector& e_r, const Vector& e_a, const Vector& e_b, Label y,
                     const LossSpec& spec) {
  const double ce = cross_entropy_loss(ranking_logits, y);
  const double triplet = triplet_loss(e_r, e_a, e_b, y, spec.margin).l_triplet;
  return spec.scale * (ce + spec.triplet_weight * triplet);
}

RankingStep ranking_loss_and_gradients(const MlpParams& projection, const MlpParams& ranking, const TripleBatch& batch,
                                       const LossSpec& spec) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw Error(ErrorCode::EmptyInput, "empty training batch");
  if (batch.ref.cols() != n || batch.a.cols() != n || batch.b.cols() != n) {
    throw Error(ErrorCode::LengthMismatch, "triple batch columns do not match label count");
  }
  const auto p = static_cast<Eigen::Index>(projection.output_dim());
  if (ranking.input_dim() != static_cast<std::size_t>(3 * p) || ranking.output_dim() != 2) {
    throw Error(ErrorCode::LengthMismatch, "ranking block must map 3*d_proj inputs to 2 logits");
  }

  const auto d = batch.ref.rows();
  Matrix raw(d, 3 * n);
  raw << batch.ref, batch.a, batch.b;
  ForwardTrace proj_trace;
  const Matrix g = forward_batch(projection, raw, &proj_trace);

  Matrix rank_in(3 * p, n);
  rank_in.topRows(p) = g.leftCols(n);
  rank_in.middleRows(p, p) = g.middleCols(n, n);
  rank_in.bottomRows(p) = g.rightCols(n);
  ForwardTrace rank_trace;
  const Matrix logits = forward_batch(ranking, rank_in, &rank_trace);

  RankingStep step;
  step.projection_grad = zeros_like(projection);
  step.ranking_grad = zeros_like(ranking);

  const double per_sample = spec.scale / static_cast<double>(n);
  Matrix d_logits(2, n);
  Matrix d_g = Matrix::Zero(p, 3 * n);
  double ce_sum = 0.0, triplet_sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const Label y = batch.labels[static_cast<std::size_t>(j)];
    const Vector col = logits.col(j);
    ce_sum += cross_entropy_loss(col, y);
    Vector probs = softmax(col);
    Eigen::Index predicted;
    probs.maxCoeff(&predicted);
    if (predicted == class_index(y)) ++step.ranking_correct;
    probs(class_index(y)) -= 1.0;
    d_logits.col(j) = probs * per_sample;

    const Vector gr = g.col(j), ga = g.col(n + j), gb = g.col(2 * n + j);
    const auto terms = triplet_loss(gr, ga, gb, y, spec.margin);
    triplet_sum += terms.l_triplet;
    if (spec.triplet_weight != 0.0 && spec.margin - terms.l_diff > 0.0) {
      // d l_triplet = -d l_diff = -y (d dist(r,a) - d dist(r,b))
      const auto ra = cosine_distance_gradient(gr, ga);
      const auto rb = cosine_distance_gradient(gr, gb);
      const double coeff = -static_cast<double>(sign(y)) * spec.triplet_weight * per_sample;
      d_g.col(j) += coeff * (ra.d_u - rb.d_u);
      d_g.col(n + j) += coeff * ra.d_v;
      d_g.col(2 * n + j) -= coeff * rb.d_v;
    }
  }

  const Matrix d_rank_in = backward_batch(ranking, rank_trace, d_logits, step.ranking_grad);
  d_g.leftCols(n) += d_rank_in.topRows(p);
  d_g.middleCols(n, n) += d_rank_in.middleRows(p, p);
  d_g.rightCols(n) += d_rank_in.bottomRows(p);
  backward_batch(projection, proj_trace, d_g, step.projection_grad);

  step.mean_cross_entropy = ce_sum / static_cast<double>(n);
  step.mean_triplet = triplet_sum / static_cast<double>(n);
  step.loss = spec.scale * (step.mean_cross_entropy + spec.triplet_weight * step.mean_triplet);
  return step;
}

RegressionStep regression_loss_and_gradients(const MlpParams& net, const Matrix& inputs, const Vector& targets,
                                             double scale) {
  const auto n = inputs.cols();
  if (n == 0) throw Error(ErrorCode::EmptyInput, "empty regression batch");
  if (targets.size() != n || net.output_dim() != 1) {
    throw Error(ErrorCode::LengthMismatch, "regression needs one output unit and one target per sample");
  }
  ForwardTrace trace;
  const Matrix z = forward_batch(net, inputs, &trace);
  RegressionStep step;
  step.grad = zeros_like(net);
  Matrix dz(1, n);
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double out = z(0, j), dout_dz = 1.0;
    if (net.output == OutputActivation::Sigmoid) {
      out = sigmoid(z(0, j));
      dout_dz = out * (1.0 - out);
    }
    const double err = out - targets(j);
    sum += err * err;
    dz(0, j) = 2.0 * err * dout_dz * scale / static_cast<double>(n);
  }
  backward_batch(net, trace, dz, step.grad);
  step.loss = scale * sum / static_cast<double>(n);
  return step;
}

// ---------------------------------------------------------------------------

AdamState AdamState::for_params(const MlpParams& params) {
  return AdamState{zeros_like(params), zeros_like(params), 0};
}

void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state, double lr, const AdamConfig& config) {
  if (grads.layers.size() != params.layers.size() || state.first_moment.layers.size() != params.layers.size()) {
    throw Error(ErrorCode::LengthMismatch, "adam_step: gradient/state shapes do not match parameters");
  }
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    if (grads.layers[k].weight.rows() != params.layers[k].weight.rows() ||
        grads.layers[k].weight.cols() != params.layers[k].weight.cols() ||
        grads.layers[k].bias.size() != params.layers[k].bias.size()) {
      throw Error(ErrorCode::LengthMismatch, "adam_step: gradient shape mismatch in layer " + std::to_string(k));
    }
    if (!grads.layers[k].weight.allFinite() || !grads.layers[k].bias.allFinite()) {
      throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient in layer " + std::to_string(k));
    }
  }

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = config.beta1 * m + (1.0 - config.beta1) * grad;
    v = config.beta2 * v + (1.0 - config.beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + config.epsilon);
  };
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    update(params.layers[k].weight, grads.layers[k].weight, state.first_moment.layers[k].weight,
           state.second_moment.layers[k].weight);
    update(params.layers[k].bias, grads.layers[k].bias, state.first_moment.layers[k].bias,
           state.second_moment.layers[k].bias);
  }
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::string_view kMlpMagic = "CSMD";
constexpr std::uint16_t kMlpVersion = 1;
}  // namespace

void write_mlp(const MlpParams& params, std::string& out) {
  params.validate();
  binio::Writer w;
  w.put_magic(kMlpMagic);
  w.put<std::uint16_t>(kMlpVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(params.output));
  const auto dims = params.layer_dims();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (const auto& layer : params.layers) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = layer.weight;
    w.put_span(std::span<const double>(rows.data(), static_cast<std::size_t>(rows.size())));
    w.put_span(std::span<const double>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
  }
  out += w.bytes();
}

MlpParams read_mlp(std::string_view bytes, std::size_t& offset, const std::string& context) {
  binio::Reader in(bytes.substr(offset), context);
  in.expect_magic(kMlpMagic);
  if (in.get<std::uint16_t>() != kMlpVersion) throw Error(ErrorCode::BadVersion, context + ": unsupported CSMD version");
  const auto activation = in.get<std::uint8_t>();
  if (activation > static_cast<std::uint8_t>(OutputActivation::Sigmoid)) {
    throw Error(ErrorCode::BadFormat, context + ": unknown output activation " + std::to_string(activation));
  }
  const auto n_dims = in.get<std::uint32_t>();
  if (n_dims < 2 || n_dims > 64) throw Error(ErrorCode::BadFormat, context + ": implausible layer count");
  std::vector<std::size_t> dims(n_dims);
  for (auto& d : dims) d = in.get<std::uint32_t>();
  MlpParams params;
  params.output = static_cast<OutputActivation>(activation);
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const auto rows = static_cast<Eigen::Index>(dims[k + 1]);
    const auto cols = static_cast<Eigen::Index>(dims[k]);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w(rows, cols);
    in.get_span(std::span<double>(w.data(), static_cast<std::size_t>(w.size())));
    Vector b(rows);
    in.get_span(std::span<double>(b.data(), static_cast<std::size_t>(rows)));
    params.layers.push_back({w, b});
  }
  params.validate();
  offset += in.position();
  return params;
}

std::string encode_mlp(const MlpParams& params) {
  std::string out;
  write_mlp(params, out);
  return out;
}

MlpParams decode_mlp(std::string_view bytes, const std::string& context) {
  std::size_t offset = 0;
  auto params = read_mlp(bytes, offset, context);
  if (offset != bytes.size()) throw Error(ErrorCode::CountMismatch, context + ": trailing bytes after CSMD section");
  return params;
}

}  // namespace cosim::nets
