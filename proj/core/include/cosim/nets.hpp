#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cosim/dataio.hpp"
#include "cosim/numerics.hpp"
#include "cosim/rng.hpp"

namespace cosim::nets {

enum class OutputActivation : std::uint8_t { Identity = 0, Softmax = 1, Sigmoid = 2 };

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Feed-forward network: affine layers with ReLU between them and an output
/// activation after the last one. Also used to hold gradients and Adam
/// moments, which share the parameter shapes.
struct MlpParams {
  std::vector<Layer> layers;
  OutputActivation output = OutputActivation::Identity;

  std::vector<std::size_t> layer_dims() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;

  /// Throws BadArgument on broken shape chains, NonFiniteValue on NaN/inf.
  void validate() const;

  /// Visits every parameter in checkpoint order (per layer: weight
  /// row-major, then bias).
  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    for (auto& layer : layers) {
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) fn(layer.weight(r, c));
      }
      for (Eigen::Index r = 0; r < layer.bias.size(); ++r) fn(layer.bias(r));
    }
  }

  friend bool operator==(const MlpParams& lhs, const MlpParams& rhs);
};

using MlpGradients = MlpParams;

/// He-normal weights, zero biases.
MlpParams make_mlp(std::span<const std::size_t> dims, OutputActivation output, Rng& rng);
MlpParams zeros_like(const MlpParams& params);

/// Single-sample forward pass including the output activation.
Vector mlp_forward(const MlpParams& params, const Vector& x);

Vector softmax(const Vector& logits);
double sigmoid(double z);

/// Activations kept by forward_batch for the backward pass.
struct ForwardTrace {
  std::vector<Matrix> inputs;  // input of each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
};

/// Batched forward; columns are samples. Returns the last layer's
/// pre-activation (logits), i.e. without the output activation.
Matrix forward_batch(const MlpParams& params, const Matrix& inputs, ForwardTrace* trace = nullptr);

/// Accumulates parameter gradients into `grads` given d(loss)/d(logits) and
/// returns d(loss)/d(inputs).
Matrix backward_batch(const MlpParams& params, const ForwardTrace& trace, const Matrix& d_logits, MlpGradients& grads);

// ---------------------------------------------------------------------------
// Losses

/// Class index of a 2AFC label: ACloser -> 0, BCloser -> 1.
constexpr Eigen::Index class_index(Label y) { return y == Label::ACloser ? 0 : 1; }
constexpr Label label_of_class(Eigen::Index k) { return k == 0 ? Label::ACloser : Label::BCloser; }

/// -log softmax(logits)[class_index(y)], computed stably.
double cross_entropy_loss(const Vector& logits, Label y);

constexpr double kDefaultMargin = 0.1;
constexpr double kDefaultTripletWeight = 0.1;

struct TripletTerms {
  double l_diff = 0.0;
  double l_triplet = 0.0;
};

/// l_diff = (d(r,a) - d(r,b)) * y with cosine distance d;
/// l_triplet = max(margin - l_diff, 0).
TripletTerms triplet_loss(const Vector& e_r, const Vector& e_a, const Vector& e_b, Label y,
                          double margin = kDefaultMargin);

struct LossSpec {
  double margin = kDefaultMargin;
  double triplet_weight = kDefaultTripletWeight;
  /// Multiplies the whole loss (and hence every gradient).
  double scale = 1.0;
};

/// cross_entropy + triplet_weight * l_triplet, times spec.scale.
double combined_loss(const Vector& ranking_logits, const Vector& e_r, const Vector& e_a, const Vector& e_b, Label y,
                     const LossSpec& spec = {});

/// Raw embeddings of a batch of triples; column j is sample j.
struct TripleBatch {
  Matrix ref;
  Matrix a;
  Matrix b;
  std::vector<Label> labels;

  std::size_t size() const { return labels.size(); }
};

struct RankingStep {
  double loss = 0.0;  // mean combined loss over the batch, times spec.scale
  double mean_cross_entropy = 0.0;
  double mean_triplet = 0.0;
  std::size_t ranking_correct = 0;  // argmax(logits) matched the label
  MlpGradients projection_grad;
  MlpGradients ranking_grad;
};

/// Mean combined loss of the projection head + ranking block over a batch,
/// and its exact gradients with respect to both networks. The ranking block
/// input is [g(r) | g(a) | g(b)].
RankingStep ranking_loss_and_gradients(const MlpParams& projection, const MlpParams& ranking, const TripleBatch& batch,
                                       const LossSpec& spec = {});

struct RegressionStep {
  double loss = 0.0;  // mean squared error of the activated output, times scale
  MlpGradients grad;
};

/// Mean squared error between the network output (after its output
/// activation) and scalar targets. Columns of `inputs` are samples.
RegressionStep regression_loss_and_gradients(const MlpParams& net, const Matrix& inputs, const Vector& targets,
                                             double scale = 1.0);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  MlpParams first_moment;
  MlpParams second_moment;
  std::uint64_t step_count = 0;

  static AdamState for_params(const MlpParams& params);
};

/// Bias-corrected Adam update in place. Throws NonFiniteGradient (leaving
/// params and state untouched) when any gradient entry is NaN or infinite.
void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state, double lr,
               const AdamConfig& config = {});

// ---------------------------------------------------------------------------
// CSMD: "CSMD", u16 version=1, u8 output activation, u32 number of dims,
// u32 dims..., then per layer weight (out x in, row-major f64) and bias.

void write_mlp(const MlpParams& params, std::string& out);
MlpParams read_mlp(std::string_view bytes, std::size_t& offset, const std::string& context = "CSMD");
std::string encode_mlp(const MlpParams& params);
MlpParams decode_mlp(std::string_view bytes, const std::string& context = "CSMD");

}  // namespace cosim::nets
