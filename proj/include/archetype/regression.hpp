#pragma once

#include <functional>
#include <optional>

#include "archetype/errors.hpp"
#include "archetype/lp.hpp"
#include "archetype/matrix.hpp"
#include "archetype/scores.hpp"
#include "archetype/sketch.hpp"

namespace archetype {

struct RegressionSolution {
  Vec z;
  double loss = 0.0;  // ||Az - b||_p on the operands that were solved
  int iterations = 0;
  bool converged = true;
};

// Unique least-squares minimizer via Householder QR.
inline RegressionSolution solve_l2(const Mat& A, const Vec& b) {
  check_design(A);
  if (b.size() != A.rows()) throw ShapeMismatch("solve_l2: length mismatch");
  if (numerical_rank(A) < A.cols()) {
    throw RankDeficient("solve_l2: rank-deficient design");
  }
  RegressionSolution out;
  out.z = A.householderQr().solve(b);
  out.loss = (A * out.z - b).norm();
  out.iterations = 1;
  out.converged = true;
  return out;
}

// Least absolute deviation. The textbook LP
//   min 1'e  s.t.  -e <= Az - b <= e
// is solved through its dual
//   max b'nu  s.t.  A'nu = 0,  ||nu||_inf <= 1,
// a box LP whose equality multipliers are the primal coefficients z. Strong
// duality holds (the primal is feasible and bounded), so the recovered z is a
// global minimizer.
inline RegressionSolution solve_l1(const Mat& A, const Vec& b) {
  if (b.size() != A.rows()) throw ShapeMismatch("solve_l1: length mismatch");
  const Eigen::Index d = A.rows();
  lp::BoxLp dual;
  dual.E = A.transpose();
  dual.h = Vec::Zero(A.cols());
  dual.c = -b;
  dual.lb = Vec::Constant(d, -1.0);
  dual.ub = Vec::Constant(d, 1.0);
  // Near-degenerate instances can stall a hair above the strict optimality
  // test; a relative gap of 1e-6 still leaves six correct digits, which every
  // downstream tolerance dominates.
  const lp::BoxLpResult res = lp::solve_box_lp(dual, 1e-9, 200);
  if (!res.optimal && res.gap > 1e-6) {
    throw SolverFailure("solve_l1: LP did not reach optimality, gap " +
                        std::to_string(res.gap));
  }
  RegressionSolution out;
  out.z = -res.lambda;
  out.loss = (A * out.z - b).lpNorm<1>();
  out.iterations = res.iterations;
  out.converged = true;
  return out;
}

// IRLS for integer p >= 3: weights (|r_i| + mu)^(p-2) with mu = 1e-10, step
// halved whenever the full reweighted step fails to decrease the loss.
// Non-convergence is reported via the flag; the best iterate is returned.
inline RegressionSolution solve_lp(const Mat& A, const Vec& b, int p,
                                   double tol = 1e-12, int max_iter = 500) {
  if (p < 3) throw PreconditionFailed("solve_lp: requires integer p >= 3");
  if (b.size() != A.rows()) throw ShapeMismatch("solve_lp: length mismatch");
  check_design(A);
  const double mu = 1e-10;
  const PNorm pn = PNorm::lp(p);

  RegressionSolution out;
  out.z = solve_l2(A, b).z;  // least-squares warm start
  out.loss = lp_norm(A * out.z - b, pn);

  for (out.iterations = 0; out.iterations < max_iter; ++out.iterations) {
    const Vec r = A * out.z - b;
    Vec w(r.size());
    for (Eigen::Index i = 0; i < r.size(); ++i) {
      w[i] = std::pow(std::abs(r[i]) + mu, double(p - 2));
    }
    const Vec sw = w.cwiseSqrt();
    const Mat Aw = sw.asDiagonal() * A;
    const Vec bw = sw.asDiagonal() * b;
    const Vec target = Aw.householderQr().solve(bw);

    double step = 1.0;
    Vec zn = target;
    double ln = lp_norm(A * zn - b, pn);
    while (ln >= out.loss && step > 1e-8) {
      step *= 0.5;
      zn = out.z + step * (target - out.z);
      ln = lp_norm(A * zn - b, pn);
    }
    if (ln >= out.loss) {
      out.converged = true;  // no descent direction left: stationary
      return out;
    }
    const double rel = (out.loss - ln) / std::max(out.loss, 1e-300);
    out.z = zn;
    out.loss = ln;
    if (rel < tol) {
      out.converged = true;
      return out;
    }
  }
  out.converged = false;
  return out;
}

// Entry access into the (noisy) type vector. Implementations must be pure:
// the same index always returns the same value, from any thread.
using EntryOracle = std::function<double(int)>;

namespace detail {

inline RegressionSolution solve_exact(const Mat& A, const Vec& b, PNorm p) {
  if (p.is_inf()) {
    throw PreconditionFailed("sketched solves support finite p only");
  }
  switch (p.p()) {
    case 1:
      return solve_l1(A, b);
    case 2:
      return solve_l2(A, b);
    default:
      return solve_lp(A, b, p.p());
  }
}

}  // namespace detail

// Solve the plan-sketched problem min ||S A z - S t||_p, touching the type
// vector only at the plan's indices.
inline RegressionSolution sketched_solve(const Mat& A, const EntryOracle& t,
                                         PNorm p, const SamplePlan& plan) {
  if (plan.p != p) throw ShapeMismatch("sketched_solve: plan built for other p");
  const Mat SA = apply_plan(plan, A);
  Vec Sb(plan.s);
  for (int i = 0; i < plan.s; ++i) {
    Sb[i] = plan.rescale[i] * t(plan.indices[static_cast<size_t>(i)]);
  }
  return detail::solve_exact(SA, Sb, p);
}

// reps independent sketched solves, then argmin of the candidates' losses on
// one fresh selection sketch of the same size. Total oracle traffic is exactly
// (reps+1)*s calls regardless of the ambient dimension. When q is not
// supplied it is built from leverage scores (p=2) or Lewis weights (p != 2).
inline RegressionSolution boosted_solve(const Mat& A, const EntryOracle& t,
                                        PNorm p, int s, int reps, Rng& rng,
                                        std::optional<Vec> q = std::nullopt) {
  if (reps < 1) throw PreconditionFailed("boosted_solve: reps >= 1 required");
  if (!q) {
    q = to_probabilities(p == PNorm::lp(2) ? leverage_scores(A)
                                           : lewis_weights(A, p).weights);
  }
  const int n = static_cast<int>(A.rows());

  std::vector<RegressionSolution> cand;
  cand.reserve(static_cast<size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    const auto plan = build_sample_plan(n, s, p, *q, rng.next_u64());
    cand.push_back(sketched_solve(A, t, p, plan));
  }

  const auto sel = build_sample_plan(n, s, p, *q, rng.next_u64());
  const Mat SA = apply_plan(sel, A);
  Vec Sb(sel.s);
  for (int i = 0; i < sel.s; ++i) {
    Sb[i] = sel.rescale[i] * t(sel.indices[static_cast<size_t>(i)]);
  }

  int best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int r = 0; r < reps; ++r) {
    const double l = lp_norm(SA * cand[static_cast<size_t>(r)].z - Sb, p);
    if (l < best_loss) {
      best_loss = l;
      best = r;
    }
  }
  RegressionSolution out = cand[static_cast<size_t>(best)];
  out.loss = best_loss;
  return out;
}

}  // namespace archetype
