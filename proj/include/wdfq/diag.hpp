#pragma once

#include "wdfq/tensor.hpp"

namespace wdfq {

// Gaussian moment summary of a feature population: per-channel mean over the
// batch and all spatial positions, plus the sample covariance across channels.
struct GaussianFit {
  Tensor mean;  // [C]
  Tensor cov;   // [C,C], bitwise symmetric
};

// features [N,C,H,W]; each of the N*H*W positions is one C-dimensional sample.
// Covariance divides by n-1, so at least two samples are required.
GaussianFit fit_gaussian(const Tensor& features);

// Closed-form KL divergence between the fitted Gaussians,
//   0.5*( tr(Sq^-1 Sp) + (mq-mp)^T Sq^-1 (mq-mp) - C + ln det Sq - ln det Sp ).
// Each covariance is used as given when positive definite; a non-definite one
// gets a single 1e-8*I bump (used consistently in every term), and a matrix
// that still fails to factor raises a numeric error.
double kl_gaussian(const GaussianFit& p, const GaussianFit& q);

// Squared L2 distance between the fit means.
double mean_gap(const GaussianFit& p, const GaussianFit& q);

// tr(cov_p * cov_q^T): the elementwise dot of the two covariance matrices.
// Zero means the populations occupy orthogonal covariance structure.
double trace_orth(const GaussianFit& p, const GaussianFit& q);

}  // namespace wdfq
