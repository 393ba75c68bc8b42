#include "wdfq/diag.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <string>

#include "wdfq/errors.hpp"

namespace wdfq {

namespace {

constexpr double kCovEps = 1e-8;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;

void check_fit(const GaussianFit& f, const char* which) {
  if (f.mean.rank() != 1 || f.cov.rank() != 2 || f.cov.extent(0) != f.mean.extent(0) ||
      f.cov.extent(1) != f.mean.extent(0))
    raise(ErrorCode::Shape, std::string("gaussian fit ") + which +
                                " needs mean [C] with covariance [C,C], got " +
                                shape_str(f.mean.shape()) + " / " + shape_str(f.cov.shape()));
}

struct Factored {
  EMat mat;  // the covariance actually used, regularized if needed
  Eigen::LLT<EMat> llt;
};

Factored factor(const Tensor& cov, const char* which) {
  const std::int64_t c = cov.extent(0);
  Factored f;
  f.mat = cov.as_matrix(c, c);
  f.llt.compute(f.mat);
  if (f.llt.info() != Eigen::Success) {
    f.mat += kCovEps * EMat::Identity(c, c);
    f.llt.compute(f.mat);
    if (f.llt.info() != Eigen::Success)
      raise(ErrorCode::Numeric, std::string("covariance of ") + which +
                                    " is not positive definite even after regularization");
  }
  return f;
}

double log_det(const Eigen::LLT<EMat>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

GaussianFit fit_gaussian(const Tensor& features) {
  if (features.rank() != 4)
    raise(ErrorCode::Shape, "fit_gaussian expects features [N,C,H,W], got " +
                                shape_str(features.shape()));
  const std::int64_t n = features.extent(0), c = features.extent(1);
  const std::int64_t h = features.extent(2), w = features.extent(3);
  const std::int64_t samples = n * h * w;
  if (samples < 2)
    raise(ErrorCode::Statistics, "fit_gaussian needs at least 2 samples per channel, got " +
                                     std::to_string(samples));

  GaussianFit fit;
  fit.mean = Tensor({c});
  fit.cov = Tensor({c, c});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) fit.mean[ci] += features.at(b, ci, y, x);
  for (std::int64_t ci = 0; ci < c; ++ci) fit.mean[ci] /= static_cast<double>(samples);

  // Upper triangle, mirrored, so the matrix is symmetric bit for bit.
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t cj = ci; cj < c; ++cj) {
      double acc = 0.0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x)
            acc += (features.at(b, ci, y, x) - fit.mean[ci]) *
                   (features.at(b, cj, y, x) - fit.mean[cj]);
      const double v = acc / static_cast<double>(samples - 1);
      fit.cov.at(ci, cj) = v;
      fit.cov.at(cj, ci) = v;
    }
  return fit;
}

double kl_gaussian(const GaussianFit& p, const GaussianFit& q) {
  check_fit(p, "p");
  check_fit(q, "q");
  const std::int64_t c = p.mean.extent(0);
  if (q.mean.extent(0) != c)
    raise(ErrorCode::Shape, "kl_gaussian fits disagree on channel count: " +
                                std::to_string(c) + " vs " + std::to_string(q.mean.extent(0)));

  const Factored fp = factor(p.cov, "p");
  const Factored fq = factor(q.cov, "q");
  const double tr = fq.llt.solve(fp.mat).trace();
  const EVec d = q.mean.as_vector() - p.mean.as_vector();
  const double maha = d.dot(fq.llt.solve(d));
  const double logdet = log_det(fq.llt) - log_det(fp.llt);
  return 0.5 * (tr + maha - static_cast<double>(c) + logdet);
}

double mean_gap(const GaussianFit& p, const GaussianFit& q) {
  check_fit(p, "p");
  check_fit(q, "q");
  if (q.mean.extent(0) != p.mean.extent(0))
    raise(ErrorCode::Shape, "mean_gap fits disagree on channel count: " +
                                std::to_string(p.mean.extent(0)) + " vs " +
                                std::to_string(q.mean.extent(0)));
  double s = 0.0;
  for (std::int64_t i = 0; i < p.mean.size(); ++i) {
    const double d = p.mean[i] - q.mean[i];
    s += d * d;
  }
  return s;
}

double trace_orth(const GaussianFit& p, const GaussianFit& q) {
  check_fit(p, "p");
  check_fit(q, "q");
  if (q.cov.extent(0) != p.cov.extent(0))
    raise(ErrorCode::Shape, "trace_orth fits disagree on channel count: " +
                                std::to_string(p.cov.extent(0)) + " vs " +
                                std::to_string(q.cov.extent(0)));
  double s = 0.0;
  for (std::int64_t i = 0; i < p.cov.size(); ++i) s += p.cov[i] * q.cov[i];
  return s;
}

}  // namespace wdfq
