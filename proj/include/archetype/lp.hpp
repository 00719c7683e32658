#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "archetype/errors.hpp"

namespace archetype {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace lp {

// Dense LP with box-bounded variables and a small number of equality rows:
//
//   minimize    c'x
//   subject to  E x = h,   lb <= x <= ub   (all bounds finite, lb < ub)
//
// Solved by a Mehrotra predictor-corrector method whose Newton systems reduce
// to an m-by-m solve, m = rows(E). Both LP uses in this library (least absolute
// deviation regression and the sigma_min_1 orthant subproblem) arrive in this
// form with m = k << n, so each iteration costs O(n m^2).
//
// The equality multipliers at the optimum are returned: for the LAD dual they
// are exactly the primal regression coefficients.
struct BoxLp {
  Mat E;
  Vec h;
  Vec c;
  Vec lb;
  Vec ub;
};

struct BoxLpResult {
  Vec x;
  Vec lambda;    // multipliers on E x = h
  double obj;    // c'x at the returned point
  double gap;    // relative complementarity gap at exit
  int iterations;
  bool optimal;
};

inline BoxLpResult solve_box_lp(const BoxLp& lp0, double tol = 1e-10,
                                int max_iter = 100) {
  const Eigen::Index m = lp0.E.rows();
  const Eigen::Index n = lp0.E.cols();
  if (lp0.h.size() != m || lp0.c.size() != n || lp0.lb.size() != n ||
      lp0.ub.size() != n) {
    throw ShapeMismatch("box LP: inconsistent dimensions");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(lp0.lb[i] < lp0.ub[i]) || !std::isfinite(lp0.lb[i]) ||
        !std::isfinite(lp0.ub[i])) {
      throw PreconditionFailed("box LP: bounds must be finite with lb < ub");
    }
  }

  // Row equilibration: scaling E x = h row-wise leaves x unchanged and only
  // rescales the multipliers, which are unscaled again on exit.
  Vec rowscale(m);
  Mat E = lp0.E;
  Vec h = lp0.h;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double norm = E.row(i).lpNorm<Eigen::Infinity>();
    rowscale[i] = norm > 0 ? 1.0 / norm : 1.0;
    E.row(i) *= rowscale[i];
    h[i] *= rowscale[i];
  }

  // Interior start: midpoint primal, duals at the cost scale.
  Vec x = 0.5 * (lp0.lb + lp0.ub);
  Vec lambda = Vec::Zero(m);
  const double z0 = 1.0 + lp0.c.lpNorm<Eigen::Infinity>();
  Vec zl = Vec::Constant(n, z0);
  Vec zu = Vec::Constant(n, z0);

  const double hnorm = 1.0 + h.lpNorm<Eigen::Infinity>();
  const double cnorm = 1.0 + lp0.c.lpNorm<Eigen::Infinity>();
  constexpr double kTiny = 1e-280;  // division floor, keeps inf out

  Vec sl(n), su(n), inv_sl(n), inv_su(n), d(n), rhat(n);
  Vec dx(n), dzl(n), dzu(n), dx_aff(n), dzl_aff(n), dzu_aff(n);

  BoxLpResult out;
  out.optimal = false;
  out.iterations = 0;

  // best-merit snapshot; returned if the iteration stalls or blows up
  double best_merit = std::numeric_limits<double>::infinity();
  Vec best_x = x, best_lambda = lambda;
  double best_gap = std::numeric_limits<double>::infinity();

  auto step_len = [&](const Vec& v, const Vec& dv) {
    double a = 1.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (dv[i] < 0.0) a = std::min(a, -0.9995 * v[i] / dv[i]);
    }
    return std::max(a, 0.0);
  };

  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it;
    sl = x - lp0.lb;
    su = lp0.ub - x;
    for (Eigen::Index i = 0; i < n; ++i) {
      inv_sl[i] = 1.0 / std::max(sl[i], kTiny);
      inv_su[i] = 1.0 / std::max(su[i], kTiny);
    }

    Vec rp = h - E * x;
    Vec rd = lp0.c - E.transpose() * lambda - zl + zu;
    const double gap = sl.dot(zl) + su.dot(zu);
    const double mu = gap / static_cast<double>(2 * n);
    const double objabs = 1.0 + std::abs(lp0.c.dot(x));

    // residuals relative to iterate magnitude (rows of E are unit-normed)
    const double rel_p =
        rp.lpNorm<Eigen::Infinity>() / (hnorm + x.lpNorm<Eigen::Infinity>());
    const double rel_d = rd.lpNorm<Eigen::Infinity>() /
                         (cnorm + lambda.lpNorm<Eigen::Infinity>());
    const double rel_g = gap / objabs;
    out.gap = rel_g;

    const double merit = std::max({rel_p, rel_d, rel_g});
    if (std::isfinite(merit) && merit < best_merit) {
      best_merit = merit;
      best_x = x;
      best_lambda = lambda;
      best_gap = rel_g;
    }

    if (rel_p <= tol && rel_d <= tol && rel_g <= tol) {
      out.optimal = true;
      break;
    }
    if (!std::isfinite(merit) || mu <= 0.0) break;

    d = (zl.array() * inv_sl.array() + zu.array() * inv_su.array()).matrix();

    // One factorization serves the affine and corrector solves.
    Mat K = E * d.cwiseInverse().asDiagonal() * E.transpose();
    const double ridge = 1e-13 * (1.0 + K.trace());
    K.diagonal().array() += ridge;
    Eigen::LDLT<Mat> kkt(K);
    if (kkt.info() != Eigen::Success) break;

    auto solve_dir = [&](const Vec& rcl, const Vec& rcu) {
      rhat = rd - (rcl.array() * inv_sl.array()).matrix() +
             (rcu.array() * inv_su.array()).matrix();
      Vec rhs = rp + E * (rhat.array() / d.array()).matrix();
      Vec dlam = kkt.solve(rhs);
      dx = ((E.transpose() * dlam - rhat).array() / d.array()).matrix();
      dzl = ((rcl.array() - zl.array() * dx.array()) * inv_sl.array()).matrix();
      dzu = ((rcu.array() + zu.array() * dx.array()) * inv_su.array()).matrix();
      return dlam;
    };

    // Affine (predictor) direction.
    Vec rcl = (-sl.array() * zl.array()).matrix();
    Vec rcu = (-su.array() * zu.array()).matrix();
    Vec dlam = solve_dir(rcl, rcu);
    dx_aff = dx;
    dzl_aff = dzl;
    dzu_aff = dzu;
    if (!dx_aff.allFinite() || !dzl_aff.allFinite() || !dzu_aff.allFinite())
      break;

    double ap = std::min(step_len(sl, dx_aff), step_len(su, -dx_aff));
    double ad = std::min(step_len(zl, dzl_aff), step_len(zu, dzu_aff));
    double gap_aff = (sl + ap * dx_aff).dot(zl + ad * dzl_aff) +
                     (su - ap * dx_aff).dot(zu + ad * dzu_aff);
    double mu_aff = std::max(gap_aff, 0.0) / static_cast<double>(2 * n);
    double sigma = std::clamp(std::pow(mu_aff / mu, 3), 0.0, 1.0);

    // Corrector + centering.
    rcl = (sigma * mu - sl.array() * zl.array() -
           dx_aff.array() * dzl_aff.array())
              .matrix();
    rcu = (sigma * mu - su.array() * zu.array() +
           dx_aff.array() * dzu_aff.array())
              .matrix();
    dlam = solve_dir(rcl, rcu);
    if (!dx.allFinite() || !dzl.allFinite() || !dzu.allFinite() ||
        !dlam.allFinite())
      break;

    ap = std::min(step_len(sl, dx), step_len(su, -dx));
    ad = std::min(step_len(zl, dzl), step_len(zu, dzu));

    x += ap * dx;
    lambda += ad * dlam;
    zl += ad * dzl;
    zu += ad * dzu;
    for (Eigen::Index i = 0; i < n; ++i) {
      zl[i] = std::max(zl[i], kTiny);
      zu[i] = std::max(zu[i], kTiny);
    }
  }

  if (!out.optimal) {
    out.x = best_x;
    out.lambda = best_lambda;
    out.gap = best_gap;
  } else {
    out.x = x;
    out.lambda = lambda;
  }
  out.lambda.array() *= rowscale.array();  // undo row equilibration
  out.obj = lp0.c.dot(out.x);
  return out;
}

}  // namespace lp
}  // namespace archetype
