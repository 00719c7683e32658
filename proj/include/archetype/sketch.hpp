#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "archetype/errors.hpp"
#include "archetype/matrix.hpp"
#include "archetype/rng.hpp"

namespace archetype {

// A frozen importance-sampling sketch: s row indices drawn i.i.d. from q with
// replacement, plus the p-norm rescale factors (s * q_j)^(-1/p). The plan is
// plain data: it can be serialized, replayed on any matrix with n rows, and
// two runs from the same (n, s, p, q, seed) are identical.
struct SamplePlan {
  int n = 0;
  int s = 0;
  PNorm p = PNorm::lp(2);
  std::vector<int> indices;
  Vec rescale;
  Vec q;
  std::uint64_t seed = 0;
  std::uint64_t q_hash = 0;
};

inline SamplePlan build_sample_plan(int n, int s, PNorm p, const Vec& q,
                                    std::uint64_t seed) {
  if (n <= 0 || q.size() != n) {
    throw ShapeMismatch("build_sample_plan: q must have length n");
  }
  if (s <= 0) throw ShapeMismatch("build_sample_plan: s must be positive");
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (!(q[i] > 0.0) || !std::isfinite(q[i])) {
      throw BadProbabilities("build_sample_plan: q entries must be positive");
    }
    total += q[i];
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw BadProbabilities("build_sample_plan: q must sum to 1");
  }

  Vec cdf(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += q[i];
    cdf[i] = acc;
  }
  cdf[n - 1] = 1.0;  // guard the top against rounding

  SamplePlan plan;
  plan.n = n;
  plan.s = s;
  plan.p = p;
  plan.q = q;
  plan.seed = seed;
  plan.q_hash = fnv1a(q.data(), static_cast<size_t>(q.size()) * sizeof(double));
  plan.indices.resize(static_cast<size_t>(s));
  plan.rescale.resize(s);

  Rng rng(seed);
  const double inv_p = p.is_inf() ? 0.0 : 1.0 / p.as_double();
  for (int t = 0; t < s; ++t) {
    const double u = rng.uniform01();
    const int j = static_cast<int>(
        std::upper_bound(cdf.data(), cdf.data() + n, u) - cdf.data());
    const int idx = std::min(j, n - 1);
    plan.indices[static_cast<size_t>(t)] = idx;
    plan.rescale[t] = std::pow(double(s) * q[idx], -inv_p);
  }
  return plan;
}

// The no-op plan: every row once, unit rescale. Sketching with it reproduces
// the exact problem.
inline SamplePlan identity_plan(int n, PNorm p) {
  if (n <= 0) throw ShapeMismatch("identity_plan: n must be positive");
  SamplePlan plan;
  plan.n = n;
  plan.s = n;
  plan.p = p;
  plan.q = Vec::Constant(n, 1.0 / n);
  plan.indices.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) plan.indices[static_cast<size_t>(i)] = i;
  plan.rescale = Vec::Ones(n);
  plan.seed = 0;
  plan.q_hash =
      fnv1a(plan.q.data(), static_cast<size_t>(plan.q.size()) * sizeof(double));
  return plan;
}

inline Mat apply_plan(const SamplePlan& plan, const Mat& A) {
  if (A.rows() != plan.n) {
    throw ShapeMismatch("apply_plan: matrix row count does not match plan");
  }
  Mat SA(plan.s, A.cols());
  for (int t = 0; t < plan.s; ++t) {
    SA.row(t) = plan.rescale[t] * A.row(plan.indices[static_cast<size_t>(t)]);
  }
  return SA;
}

inline Vec apply_plan(const SamplePlan& plan, const Vec& b) {
  if (b.size() != plan.n) {
    throw ShapeMismatch("apply_plan: vector length does not match plan");
  }
  Vec Sb(plan.s);
  for (int t = 0; t < plan.s; ++t) {
    Sb[t] = plan.rescale[t] * b[plan.indices[static_cast<size_t>(t)]];
  }
  return Sb;
}

}  // namespace archetype
