#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace cosim {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// 1 - <u,v> / (|u| |v|), in [0, 2]. Throws ZeroVector or LengthMismatch.
double cosine_distance(std::span<const double> u, std::span<const double> v);
double cosine_distance(const Vector& u, const Vector& v);

/// Gradients of cosine_distance with respect to both arguments.
struct CosineGradient {
  Vector d_u;
  Vector d_v;
};
CosineGradient cosine_distance_gradient(const Vector& u, const Vector& v);

struct SymmetricEigen {
  Vector values;   // descending; ties keep original diagonal order
  Matrix vectors;  // column i pairs with values(i); sign-canonicalized
  int sweeps = 0;
};

struct JacobiOptions {
  /// Stop when the off-diagonal Frobenius norm falls to this fraction of the
  /// matrix's Frobenius norm.
  double tolerance = 1e-12;
  int max_sweeps = 100;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
SymmetricEigen jacobi_eigen(const Matrix& symmetric, const JacobiOptions& options = {});

/// Flips `v` so its largest-magnitude entry is positive (first one on ties).
void canonicalize_sign(Eigen::Ref<Vector> v);

/// Sample covariance with divisor n-1; rows are observations.
Matrix sample_covariance(const Matrix& data);

constexpr std::size_t kDefaultPcaDim = 64;

struct PcaModel {
  Vector mean;        // length d
  Matrix components;  // l x d, rows are principal axes in descending variance order
  Vector eigenvalues; // length l

  std::size_t input_dim() const { return static_cast<std::size_t>(mean.size()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(components.rows()); }
};

/// Throws BadArgument when n < 2 or l is outside [1, min(n-1, d)], and
/// NonFiniteValue for non-finite entries.
PcaModel pca_fit(const Matrix& data, std::size_t l);

/// Largest feasible dimension not above `requested`; logs a warning when it
/// has to clamp.
std::size_t clamp_pca_dim(std::size_t requested, std::size_t n, std::size_t d);

/// components * (x - mean). Throws LengthMismatch.
Vector pca_transform(const PcaModel& model, const Vector& x);
Vector pca_transform(const PcaModel& model, std::span<const float> x);

// CSPC: "CSPC", u16 version=1, u32 d, u32 l, mean (d f64), components
// (l*d f64, row-major), eigenvalues (l f64).
std::string encode_pca(const PcaModel& model);
PcaModel decode_pca(std::string_view bytes, const std::string& context = "CSPC");
void save_pca(const PcaModel& model, const std::filesystem::path& path);
PcaModel load_pca(const std::filesystem::path& path);

}  // namespace cosim
