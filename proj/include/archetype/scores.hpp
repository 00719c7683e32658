#pragma once

#include <cmath>

#include "archetype/errors.hpp"
#include "archetype/matrix.hpp"

namespace archetype {

// Squared row norms of an orthonormal column basis of A. Sums to rank(A) = k.
inline Vec leverage_scores(const Mat& A) {
  const Mat U = orthonormal_basis(A);
  return U.rowwise().squaredNorm();
}

struct LewisResult {
  Vec weights;
  int iterations = 0;
  bool converged = false;
  double residual = 0.0;  // max_i |w_i - tau_i(w)^(p/2)|, recomputed at return
};

namespace detail {

// tau_i(w) = a_i^T (A^T W^(1-2/p) A)^{-1} a_i, computed through the scaled
// matrix B = W^(1/2-1/p) A so that tau_i = leverage_i(B) / w_i^(1-2/p).
inline Vec lewis_tau(const Mat& A, const Vec& w, double p) {
  const double e = 0.5 - 1.0 / p;
  Mat B = A;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    B.row(i) *= std::pow(w[i], e);
  }
  const Vec lev = leverage_scores(B);
  Vec tau(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    tau[i] = lev[i] / std::pow(w[i], 2.0 * e);
  }
  return tau;
}

}  // namespace detail

// Fixed point of w_i = tau_i(w)^(p/2). Initialized at leverage scores; plain
// iteration contracts for p < 4, a damped exponent step is used for p >= 4.
// Non-convergence is reported through the flag, not an exception: the weights
// are still usable for sampling at an inflated sample size.
inline LewisResult lewis_weights(const Mat& A, PNorm p, double tol = 1e-6,
                                 int max_iter = 500) {
  if (p.is_inf()) {
    throw PreconditionFailed("lewis_weights: p must be finite");
  }
  const double pd = p.as_double();
  LewisResult out;
  out.weights = leverage_scores(A);

  // At the exact fixed point the weights are the leverage scores of the
  // reweighted matrix, so they must sum to k. The per-entry residual alone
  // admits a sum drift of up to d*tol, hence the second condition.
  const double k = static_cast<double>(A.cols());
  const auto sum_ok = [&](const Vec& w) {
    return std::abs(w.sum() - k) <= tol * k;
  };

  const double theta = pd >= 4.0 ? 1.0 / (pd - 1.0) : 1.0;
  for (out.iterations = 0; out.iterations < max_iter; ++out.iterations) {
    const Vec tau = detail::lewis_tau(A, out.weights, pd);
    Vec next(out.weights.size());
    double res = 0.0;
    for (Eigen::Index i = 0; i < next.size(); ++i) {
      const double target = std::pow(tau[i], pd / 2.0);
      res = std::max(res, std::abs(target - out.weights[i]));
      const double stepped =
          theta == 1.0 ? target
                       : std::pow(out.weights[i], 1.0 - theta) *
                             std::pow(target, theta);
      next[i] = std::clamp(stepped, 1e-12, 1.0);
    }
    if (res <= tol && sum_ok(out.weights)) {
      out.converged = true;
      out.residual = res;
      return out;
    }
    out.weights = next;
  }
  // one fresh pass so the reported residual reflects the returned weights
  const Vec tau = detail::lewis_tau(A, out.weights, pd);
  double res = 0.0;
  for (Eigen::Index i = 0; i < out.weights.size(); ++i) {
    res = std::max(res, std::abs(std::pow(tau[i], pd / 2.0) - out.weights[i]));
  }
  out.residual = res;
  out.converged = res <= tol && sum_ok(out.weights);
  return out;
}

// Normalize nonnegative importance weights into a sampling distribution.
inline Vec to_probabilities(const Vec& weights) {
  if (weights.size() == 0) throw BadProbabilities("empty weight vector");
  Vec q = weights;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (!std::isfinite(q[i])) throw BadProbabilities("non-finite weight");
    q[i] = std::max(q[i], 1e-12);
  }
  const double s = q.sum();
  if (!(s > 0) || !std::isfinite(s)) {
    throw BadProbabilities("weights do not sum to a positive value");
  }
  return q / s;
}

}  // namespace archetype
