#include "cosim/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "log_internal.hpp"

namespace cosim {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorCode::LengthMismatch,
                std::string(what) + ": lengths " + std::to_string(a) + " and " + std::to_string(b) + " differ");
  }
}

}  // namespace

double cosine_distance(std::span<const double> u, std::span<const double> v) {
  require_same_length(u.size(), v.size(), "cosine_distance");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu <= 0.0 || vv <= 0.0) throw Error(ErrorCode::ZeroVector, "cosine_distance of a zero-norm vector");
  const double cosine = dot / (std::sqrt(uu) * std::sqrt(vv));
  return 1.0 - std::clamp(cosine, -1.0, 1.0);
}

double cosine_distance(const Vector& u, const Vector& v) {
  return cosine_distance(std::span<const double>(u.data(), static_cast<std::size_t>(u.size())),
                         std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

CosineGradient cosine_distance_gradient(const Vector& u, const Vector& v) {
  require_same_length(static_cast<std::size_t>(u.size()), static_cast<std::size_t>(v.size()),
                      "cosine_distance_gradient");
  const double nu = u.norm(), nv = v.norm();
  if (nu <= 0.0 || nv <= 0.0) throw Error(ErrorCode::ZeroVector, "cosine gradient at a zero-norm vector");
  const double cosine = u.dot(v) / (nu * nv);
  // d(1 - cos)/du = -(v / (|u||v|) - cos * u / |u|^2)
  return {-(v / (nu * nv) - cosine * u / (nu * nu)), -(u / (nu * nv) - cosine * v / (nv * nv))};
}

void canonicalize_sign(Eigen::Ref<Vector> v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (std::abs(v(i)) > std::abs(v(best))) best = i;
  }
  if (v.size() > 0 && v(best) < 0.0) v = -v;
}

SymmetricEigen jacobi_eigen(const Matrix& symmetric, const JacobiOptions& options) {
  if (symmetric.rows() != symmetric.cols()) throw Error(ErrorCode::BadArgument, "jacobi_eigen needs a square matrix");
  const Eigen::Index n = symmetric.rows();
  Matrix a = 0.5 * (symmetric + symmetric.transpose());
  Matrix v = Matrix::Identity(n, n);

  auto off_norm = [&] {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i != j) sum += a(i, j) * a(i, j);
      }
    }
    return std::sqrt(sum);
  };

  const double scale = a.norm();
  const double threshold = options.tolerance * scale;
  int sweeps = 0;
  while (scale > 0.0 && off_norm() > threshold && sweeps < options.max_sweeps) {
    ++sweeps;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  out.sweeps = sweeps;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.values(k) = a(src, src);
    out.vectors.col(k) = v.col(src);
    canonicalize_sign(out.vectors.col(k));
  }
  return out;
}

Matrix sample_covariance(const Matrix& data) {
  if (data.rows() < 2) throw Error(ErrorCode::BadArgument, "covariance needs at least 2 observations");
  const Vector mean = data.colwise().mean();
  const Matrix centered = data.rowwise() - mean.transpose();
  return (centered.transpose() * centered) / static_cast<double>(data.rows() - 1);
}

std::size_t clamp_pca_dim(std::size_t requested, std::size_t n, std::size_t d) {
  const std::size_t feasible = std::min(n > 0 ? n - 1 : 0, d);
  if (requested > feasible) {
    detail::warn("PCA dimension {} exceeds min(n-1, d) = {}; clamping", requested, feasible);
    return feasible;
  }
  return requested;
}

PcaModel pca_fit(const Matrix& data, std::size_t l) {
  const auto n = static_cast<std::size_t>(data.rows());
  const auto d = static_cast<std::size_t>(data.cols());
  if (n < 2) throw Error(ErrorCode::BadArgument, "pca_fit needs n >= 2 rows, got " + std::to_string(n));
  if (l < 1 || l > std::min(n - 1, d)) {
    throw Error(ErrorCode::BadArgument, "pca_fit target dimension " + std::to_string(l) + " outside [1, " +
                                            std::to_string(std::min(n - 1, d)) + "]");
  }
  if (!data.allFinite()) throw Error(ErrorCode::NonFiniteValue, "pca_fit input has non-finite entries");

  const auto eig = jacobi_eigen(sample_covariance(data));
  PcaModel model;
  model.mean = data.colwise().mean();
  model.components = eig.vectors.leftCols(static_cast<Eigen::Index>(l)).transpose();
  model.eigenvalues = eig.values.head(static_cast<Eigen::Index>(l)).cwiseMax(0.0);
  return model;
}

Vector pca_transform(const PcaModel& model, const Vector& x) {
  require_same_length(static_cast<std::size_t>(x.size()), model.input_dim(), "pca_transform");
  return model.components * (x - model.mean);
}

Vector pca_transform(const PcaModel& model, std::span<const float> x) {
  require_same_length(x.size(), model.input_dim(), "pca_transform");
  Vector v(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) v(static_cast<Eigen::Index>(i)) = x[i];
  return pca_transform(model, v);
}

namespace {
constexpr std::string_view kPcaMagic = "CSPC";
constexpr std::uint16_t kPcaVersion = 1;
}  // namespace

std::string encode_pca(const PcaModel& model) {
  binio::Writer out;
  out.put_magic(kPcaMagic);
  out.put<std::uint16_t>(kPcaVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(model.input_dim()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(model.output_dim()));
  out.put_span(std::span<const double>(model.mean.data(), model.input_dim()));
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = model.components;
  out.put_span(std::span<const double>(rows.data(), static_cast<std::size_t>(rows.size())));
  out.put_span(std::span<const double>(model.eigenvalues.data(), model.output_dim()));
  return out.take();
}

PcaModel decode_pca(std::string_view bytes, const std::string& context) {
  binio::Reader in(bytes, context);
  in.expect_magic(kPcaMagic);
  if (in.get<std::uint16_t>() != kPcaVersion) throw Error(ErrorCode::BadVersion, context + ": unsupported CSPC version");
  const auto d = in.get<std::uint32_t>();
  const auto l = in.get<std::uint32_t>();
  if (in.remaining() != (static_cast<std::size_t>(d) + static_cast<std::size_t>(l) * d + l) * sizeof(double)) {
    throw Error(ErrorCode::CountMismatch, context + ": payload size does not match d=" + std::to_string(d) +
                                              ", l=" + std::to_string(l));
  }
  PcaModel model;
  model.mean.resize(d);
  in.get_span(std::span<double>(model.mean.data(), d));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(l, d);
  in.get_span(std::span<double>(rows.data(), static_cast<std::size_t>(rows.size())));
  model.components = rows;
  model.eigenvalues.resize(l);
  in.get_span(std::span<double>(model.eigenvalues.data(), l));
  return model;
}

void save_pca(const PcaModel& model, const std::filesystem::path& path) { binio::write_file(path, encode_pca(model)); }

PcaModel load_pca(const std::filesystem::path& path) { return decode_pca(binio::read_file(path), path.string()); }

}  // namespace cosim
