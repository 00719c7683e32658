#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "archetype/errors.hpp"
#include "archetype/lp.hpp"
#include "archetype/rng.hpp"

namespace archetype {

// Norm index: an integer p >= 1 or infinity. Small value type passed around by
// every module that touches an lp norm.
class PNorm {
 public:
  static PNorm lp(int p) {
    if (p < 1) throw PreconditionFailed("PNorm: p must be >= 1");
    PNorm n;
    n.p_ = p;
    return n;
  }
  static PNorm linf() {
    PNorm n;
    n.inf_ = true;
    return n;
  }
  static PNorm parse(const std::string& s) {
    if (s == "inf" || s == "Inf" || s == "INF") return linf();
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ParseError("PNorm: expected a positive integer or 'inf'");
    }
    const int v = std::stoi(s);
    if (v < 1) throw ParseError("PNorm: p must be >= 1");
    return lp(v);
  }

  bool is_inf() const { return inf_; }
  int p() const {
    if (inf_) throw PreconditionFailed("PNorm: finite p requested on inf");
    return p_;
  }
  double as_double() const {
    return inf_ ? std::numeric_limits<double>::infinity() : p_;
  }
  std::string str() const { return inf_ ? "inf" : std::to_string(p_); }

  friend bool operator==(const PNorm& a, const PNorm& b) {
    return a.inf_ == b.inf_ && (a.inf_ || a.p_ == b.p_);
  }
  friend bool operator!=(const PNorm& a, const PNorm& b) { return !(a == b); }

 private:
  int p_ = 2;
  bool inf_ = false;
};

inline double lp_norm(const Vec& v, PNorm n) {
  if (n.is_inf()) return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0;
  switch (n.p()) {
    case 1:
      return v.lpNorm<1>();
    case 2:
      return v.norm();
    default: {
      double s = 0.0;
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        s += std::pow(std::abs(v[i]), n.p());
      }
      return std::pow(s, 1.0 / n.p());
    }
  }
}

inline void check_design(const Mat& A) {
  if (A.rows() < A.cols() || A.cols() < 1) {
    throw ShapeMismatch("design matrix needs d >= k >= 1");
  }
  if (!A.allFinite()) throw PreconditionFailed("design matrix has non-finite entries");
}

namespace detail {

inline int rank_from_singular_values(const Vec& sv) {
  if (sv.size() == 0) return 0;
  const double cut = 1e-10 * sv[0];
  int r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv[i] > cut) ++r;
  }
  return r;
}

}  // namespace detail

// Numerical rank with the library-wide cutoff: singular values below
// 1e-10 * sigma_max count as zero.
inline int numerical_rank(const Mat& A) {
  Eigen::JacobiSVD<Mat> svd(A);
  return detail::rank_from_singular_values(svd.singularValues());
}

// Thin orthonormal basis of col(A) via Householder QR. The SVD is used only to
// certify full column rank under the cutoff above.
inline Mat orthonormal_basis(const Mat& A) {
  check_design(A);
  Eigen::JacobiSVD<Mat> svd(A);
  if (detail::rank_from_singular_values(svd.singularValues()) < A.cols()) {
    throw RankDeficient("orthonormal_basis: numerical rank below column count");
  }
  Eigen::HouseholderQR<Mat> qr(A);
  Mat Q = Mat::Identity(A.rows(), A.cols());
  Q = qr.householderQ() * Q;
  return Q;
}

enum class SigmaMethod { svd, orthant_lp, sphere_search };

struct SigmaMinP {
  PNorm p = PNorm::lp(2);
  double value = 0.0;
  SigmaMethod method = SigmaMethod::svd;
  bool certified = false;
};

namespace detail {

// min_{y in simplex} ||A diag(s) y||_1 for one sign orthant, through its dual
//   max { t : B'u >= t*1, ||u||_inf <= 1 },  B = A diag(s),
// an LP with box variables and k equality rows after adding slacks. Strong
// duality (bilinear minimax on compact convex sets) makes the optimal t the
// orthant minimum.
inline double orthant_min_l1(const Mat& A, const std::vector<int>& sign,
                             double t_hi) {
  const Eigen::Index d = A.rows();
  const Eigen::Index k = A.cols();
  const Eigen::Index n = d + 1 + k;  // u, t, slack w

  lp::BoxLp prob;
  prob.E.setZero(k, n);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) {
      prob.E(j, i) = sign[static_cast<size_t>(j)] * A(i, j);
    }
    prob.E(j, d) = -1.0;
    prob.E(j, d + 1 + j) = -1.0;
  }
  prob.h = Vec::Zero(k);
  prob.c = Vec::Zero(n);
  prob.c[d] = -1.0;  // maximize t
  prob.lb = Vec::Constant(n, -1.0);
  prob.ub = Vec::Constant(n, 1.0);
  prob.lb[d] = 0.0;
  prob.ub[d] = t_hi;
  for (Eigen::Index j = 0; j < k; ++j) {
    prob.lb[d + 1 + j] = 0.0;
    prob.ub[d + 1 + j] = A.col(j).lpNorm<1>() + t_hi + 1.0;
  }

  // near-degenerate homogeneous instances stall with the relative
  // complementarity gap around 1e-7; that is far below the accuracy any
  // downstream bound consumes, so accept it rather than demand 1e-8
  lp::BoxLpResult res = lp::solve_box_lp(prob, 1e-9, 200);
  if (!res.optimal && res.gap > 1e-6) {
    throw SolverFailure("sigma_min_1 orthant LP did not converge");
  }
  return res.x[d];
}

// Multi-start projected descent on F(x) = ||Ax||_p / ||x||_p. Upper estimate
// only; used for p >= 3 and p = inf where no certified method exists.
inline double sphere_search_min(const Mat& A, PNorm p, int restarts, Rng rng) {
  const Eigen::Index k = A.cols();
  const bool inf = p.is_inf();
  const double pp = inf ? 0.0 : static_cast<double>(p.p());

  auto value = [&](const Vec& x) { return lp_norm(A * x, p) / lp_norm(x, p); };

  auto grad = [&](const Vec& x, double fx) {
    Vec r = A * x;
    Vec gr(k);
    if (inf) {
      Eigen::Index ir, jx;
      r.cwiseAbs().maxCoeff(&ir);
      x.cwiseAbs().maxCoeff(&jx);
      gr = A.row(ir).transpose() * (r[ir] >= 0 ? 1.0 : -1.0);
      Vec gx = Vec::Zero(k);
      gx[jx] = (x[jx] >= 0 ? 1.0 : -1.0);
      return Vec(gr - fx * gx);
    }
    const double nr = lp_norm(r, p);
    Vec sr(r.size());
    for (Eigen::Index i = 0; i < r.size(); ++i) {
      sr[i] = (r[i] >= 0 ? 1.0 : -1.0) * std::pow(std::abs(r[i]), pp - 1.0);
    }
    Vec sx(k);
    for (Eigen::Index j = 0; j < k; ++j) {
      sx[j] = (x[j] >= 0 ? 1.0 : -1.0) * std::pow(std::abs(x[j]), pp - 1.0);
    }
    // x is kept p-normalized, so ||x||_p^(p-1) = 1.
    return Vec(A.transpose() * sr / std::pow(std::max(nr, 1e-300), pp - 1.0) -
               fx * sx);
  };

  double best = std::numeric_limits<double>::infinity();
  for (int r0 = 0; r0 < restarts; ++r0) {
    Vec x(k);
    for (Eigen::Index j = 0; j < k; ++j) x[j] = rng.normal();
    if (lp_norm(x, p) == 0.0) continue;
    x /= lp_norm(x, p);
    double fx = value(x);
    for (int it = 0; it < 300; ++it) {
      Vec g = grad(x, fx);
      double t = 1.0;
      bool moved = false;
      const double g2 = g.squaredNorm();
      if (g2 < 1e-24) break;
      while (t > 1e-12) {
        Vec xn = x - t * g;
        const double nx = lp_norm(xn, p);
        if (nx > 1e-12) {
          xn /= nx;
          const double fn = value(xn);
          const bool ok = inf ? (fn < fx - 1e-14)
                              : (fn <= fx - 1e-4 * t * g2);
          if (ok) {
            const double drop = fx - fn;
            x = xn;
            fx = fn;
            moved = true;
            if (drop < 1e-8 * std::max(fx, 1e-12)) it = 300;
            break;
          }
        }
        t *= 0.5;
      }
      if (!moved) break;
    }
    best = std::min(best, fx);
  }
  return best;
}

}  // namespace detail

// sigma_min_p(A) = min ||Ax||_p over the lp unit sphere.
//   p = 2   : smallest singular value (certified)
//   p = 1   : exact via one LP per sign orthant, 2^(k-1) after symmetry (certified)
//   p >= 3, inf : multi-start sphere search, upper estimate (uncertified)
inline SigmaMinP sigma_min_p(const Mat& A, PNorm p, std::uint64_t seed = 20240817) {
  check_design(A);
  if (A.lpNorm<Eigen::Infinity>() == 0.0) {
    throw PreconditionFailed("sigma_min_p: A must be nonzero");
  }
  SigmaMinP out;
  out.p = p;
  if (!p.is_inf() && p.p() == 2) {
    Eigen::JacobiSVD<Mat> svd(A);
    out.value = svd.singularValues()[A.cols() - 1];
    out.method = SigmaMethod::svd;
    out.certified = true;
    return out;
  }
  if (!p.is_inf() && p.p() == 1) {
    const Eigen::Index k = A.cols();
    if (k > 20) {
      throw Infeasible("sigma_min_1: orthant enumeration guarded for k > 20");
    }
    double t_hi = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k; ++j) {
      t_hi = std::min(t_hi, A.col(j).lpNorm<1>());
    }
    if (t_hi <= 0.0) {
      out.value = 0.0;  // a zero column: e_j attains 0 on the sphere
    } else {
      // normalize so every LP variable is O(1); the optimum scales linearly
      const Mat As = A / t_hi;
      double best = std::numeric_limits<double>::infinity();
      std::vector<int> sign(static_cast<size_t>(k), 1);
      const std::uint64_t count = 1ull << (k - 1);
      for (std::uint64_t mask = 0; mask < count; ++mask) {
        for (Eigen::Index j = 1; j < k; ++j) {
          sign[static_cast<size_t>(j)] = (mask >> (j - 1)) & 1 ? -1 : 1;
        }
        best = std::min(best, detail::orthant_min_l1(As, sign, 1.0) * t_hi);
      }
      out.value = std::max(best, 0.0);
    }
    out.method = SigmaMethod::orthant_lp;
    out.certified = true;
    return out;
  }
  out.value = detail::sphere_search_min(A, p, 20, Rng(seed));
  out.method = SigmaMethod::sphere_search;
  out.certified = false;
  return out;
}

// Max absolute entry; the ||A||_inf used by every mechanism bound.
inline double max_abs_entry(const Mat& A) {
  return A.cwiseAbs().maxCoeff();
}

// Sylvester construction, d a power of two. Columns are orthogonal and the
// leverage scores of any leading column block are exactly uniform.
inline Mat hadamard_matrix(int d) {
  if (d < 1 || (d & (d - 1)) != 0) {
    throw PreconditionFailed("hadamard_matrix: d must be a power of two");
  }
  Mat H = Mat::Ones(1, 1);
  for (int m = 1; m < d; m *= 2) {
    Mat next(2 * m, 2 * m);
    next.topLeftCorner(m, m) = H;
    next.topRightCorner(m, m) = H;
    next.bottomLeftCorner(m, m) = H;
    next.bottomRightCorner(m, m) = -H;
    H = std::move(next);
  }
  return H;
}

}  // namespace archetype
