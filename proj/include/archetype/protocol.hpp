#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <optional>

#include "archetype/regression.hpp"

namespace archetype {

struct ProtocolConfig {
  PNorm p = PNorm::lp(2);
  int k = 0;
  int n = 1;                     // number of instances sharing the budget
  double delta = 0.1;            // failure probability
  std::optional<int> s_override;
  std::optional<int> reps;       // default: ceil(ln(n/delta))

  int reps_or_default() const {
    if (reps) return *reps;
    return std::max(1, static_cast<int>(std::ceil(std::log(n / delta))));
  }
};

// Entry access into one instance's observed type vector: at(j) returns
// t_j + noise_j, the same value on every call, safely from any thread. The
// declared bounds promise ||t - A z||_p <= eps_mdl and ||noise||_p <= eps_nq.
struct TypeOracle {
  EntryOracle at;
  double eps_mdl = 0.0;
  double eps_nq = 0.0;
};

struct RecoveryResult {
  Vec z_hat;
  long long queries_used = 0;  // total oracle calls, never more than (reps+1)*s
  double zeta_bound = 0.0;
  bool within_bound = false;   // filled by harnesses that know the true z
};

// Sample count s_p. The asymptotic rates fix only the shape; these constants
// are the library defaults and can be overridden per run.
inline int sample_complexity(const ProtocolConfig& cfg) {
  if (cfg.k < 1) throw PreconditionFailed("sample_complexity: k >= 1");
  if (!(cfg.delta > 0.0 && cfg.delta < 1.0)) {
    throw PreconditionFailed("sample_complexity: delta in (0,1)");
  }
  if (cfg.p.is_inf()) {
    throw PreconditionFailed("sample_complexity: finite p only");
  }
  if (cfg.s_override) return *cfg.s_override;
  const double k = cfg.k;
  const double lk = std::log(k);
  const double ln_nd = std::log(cfg.n / cfg.delta);
  double s;
  if (cfg.p.p() <= 2) {
    s = 8.0 * k * lk * ln_nd;
  } else {
    s = 8.0 * std::pow(k, cfg.p.p() / 2.0) * lk * lk * lk * ln_nd;
  }
  return static_cast<int>(std::ceil(std::max(s, 0.0))) + cfg.k;
}

// zeta_p = c_p (eps_mdl + eps_nq) / sigma_min_p(A), with c_1 = 2.5, c_2 = 7.5
// and c_p = 18*200^(1/p) + 3 for p >= 3. Pass sigma_min when it is already
// known to skip the recomputation.
inline double recovery_error_bound(const Mat& A, PNorm p, double eps_mdl,
                                   double eps_nq,
                                   std::optional<double> sigma_min = {}) {
  if (p.is_inf()) {
    throw PreconditionFailed("recovery_error_bound: finite p only");
  }
  double cp;
  switch (p.p()) {
    case 1:
      cp = 2.5;
      break;
    case 2:
      cp = 7.5;
      break;
    default:
      cp = 18.0 * std::pow(200.0, 1.0 / p.p()) + 3.0;
  }
  const double sigma = sigma_min ? *sigma_min : sigma_min_p(A, p).value;
  if (!(sigma > 1e-10 * std::max(1.0, max_abs_entry(A)))) {
    throw SingularDesign("recovery_error_bound: sigma_min_p vanishes");
  }
  return cp * (eps_mdl + eps_nq) / sigma;
}

// The full protocol: score-based sampling probabilities, boosted sketched
// regression, query accounting. Oracle traffic is (reps+1)*s entry reads and
// never depends on the ambient dimension d.
inline RecoveryResult recover_latent(const Mat& A, const TypeOracle& oracle,
                                     const ProtocolConfig& cfg, Rng& rng,
                                     std::optional<double> sigma_min = {}) {
  check_design(A);
  ProtocolConfig c = cfg;
  if (c.k == 0) c.k = static_cast<int>(A.cols());
  if (c.k != A.cols()) throw ShapeMismatch("recover_latent: cfg.k != cols(A)");

  const int s = sample_complexity(c);
  const int reps = c.reps_or_default();
  const Vec q = to_probabilities(c.p == PNorm::lp(2)
                                     ? leverage_scores(A)
                                     : lewis_weights(A, c.p).weights);

  auto counter = std::make_shared<std::atomic<long long>>(0);
  EntryOracle counted = [at = oracle.at, counter](int j) {
    counter->fetch_add(1, std::memory_order_relaxed);
    return at(j);
  };

  RecoveryResult out;
  const RegressionSolution sol =
      boosted_solve(A, counted, c.p, s, reps, rng, q);
  out.z_hat = sol.z;
  out.queries_used = counter->load();
  out.zeta_bound =
      recovery_error_bound(A, c.p, oracle.eps_mdl, oracle.eps_nq, sigma_min);
  return out;
}

// Post-hoc bound for the uniform-sampling least-squares route:
//   sqrt(s) * (eps_mdl + eps_nq) * sigma_min(DSA)^{-1} * max rescale.
inline double linf_diagnostic(const Mat& A, const SamplePlan& plan,
                              double eps_mdl, double eps_nq) {
  if (plan.p != PNorm::lp(2)) {
    throw ShapeMismatch("linf_diagnostic: plan must carry p = 2 rescaling");
  }
  const Mat DSA = apply_plan(plan, A);
  Eigen::JacobiSVD<Mat> svd(DSA);
  if (detail::rank_from_singular_values(svd.singularValues()) < A.cols()) {
    throw RankDeficient("linf_diagnostic: sketched matrix rank deficient");
  }
  const double sigma = svd.singularValues()[A.cols() - 1];
  return std::sqrt(double(plan.s)) * (eps_mdl + eps_nq) / sigma *
         plan.rescale.maxCoeff();
}

// Materialize a synthetic oracle t = A z0 + model_err + query_noise with the
// two error vectors scaled to exact p-norms. Values are frozen at build time,
// so reads are pure.
inline TypeOracle make_type_oracle(const Mat& A, const Vec& z0, double eps_mdl,
                                   double eps_nq, PNorm p, Rng& rng) {
  if (z0.size() != A.cols()) throw ShapeMismatch("make_type_oracle: z0 size");
  Vec t = A * z0;
  for (double eps : {eps_mdl, eps_nq}) {
    if (eps < 0) throw PreconditionFailed("make_type_oracle: negative bound");
    if (eps == 0) continue;
    Vec e(A.rows());
    for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = rng.normal();
    const double norm = lp_norm(e, p);
    if (norm == 0) continue;
    t += e * (eps / norm);
  }
  auto values = std::make_shared<Vec>(std::move(t));
  TypeOracle oracle;
  oracle.at = [values](int j) { return (*values)[j]; };
  oracle.eps_mdl = eps_mdl;
  oracle.eps_nq = eps_nq;
  return oracle;
}

}  // namespace archetype
