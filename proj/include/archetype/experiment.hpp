#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "archetype/io.hpp"
#include "archetype/mechanism.hpp"
#include "archetype/protocol.hpp"

namespace archetype {

// ---------------------------------------------------------------------------
// Design families
// ---------------------------------------------------------------------------

enum class ArchetypeFamily { gaussian, orthonormal, near_singular, from_file };

inline std::string family_str(ArchetypeFamily f) {
  switch (f) {
    case ArchetypeFamily::gaussian:
      return "gaussian";
    case ArchetypeFamily::orthonormal:
      return "orthonormal";
    case ArchetypeFamily::near_singular:
      return "near_singular";
    default:
      return "from_file";
  }
}

inline ArchetypeFamily family_parse(const std::string& s) {
  if (s == "gaussian") return ArchetypeFamily::gaussian;
  if (s == "orthonormal") return ArchetypeFamily::orthonormal;
  if (s == "near_singular") return ArchetypeFamily::near_singular;
  if (s == "from_file") return ArchetypeFamily::from_file;
  throw ParseError("unknown archetype family: " + s);
}

// Random design matrix. near_singular is an orthonormal basis with the last
// column scaled to 1e-3, so sigma_min,2 is 1e-3 by construction.
inline Mat gen_archetypes(ArchetypeFamily family, int d, int k, Rng rng) {
  if (d < k || k < 1) throw PreconditionFailed("gen_archetypes: need d >= k >= 1");
  if (family == ArchetypeFamily::from_file) {
    throw PreconditionFailed("gen_archetypes: from_file needs a loaded matrix");
  }
  Mat G(d, k);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < k; ++j) G(i, j) = rng.normal();
  if (family == ArchetypeFamily::gaussian) return G;
  Mat Q = orthonormal_basis(G);
  if (family == ArchetypeFamily::near_singular) Q.col(k - 1) *= 1e-3;
  return Q;
}

// ---------------------------------------------------------------------------
// Perturbed distribution with an explicit coupling certificate
// ---------------------------------------------------------------------------

struct CouplingPair {
  int from = 0;  // index into the base support
  int to = 0;    // index into the perturbed support
  double mass = 0.0;
};

struct PerturbedDist {
  DiscreteDist dist;
  std::vector<CouplingPair> coupling;
  double eps = 0.0;
  PNorm p = PNorm::lp(2);
};

// Moves mass (1-eps) of every base atom within the lp ball of radius eps and
// mass eps to an arbitrary point of the unit cube. The returned coupling is a
// certificate that the Prokhorov distance to the base is at most eps: the
// mass of pairs farther apart than eps is exactly the moved eps share.
inline PerturbedDist gen_perturbed_dist(const DiscreteDist& base, double eps,
                                        PNorm p, Rng& rng) {
  validate_dist(base);
  if (!(eps >= 0.0 && eps < 1.0)) {
    throw PreconditionFailed("gen_perturbed_dist: eps in [0,1)");
  }
  PerturbedDist out;
  out.eps = eps;
  out.p = p;
  if (eps == 0.0) {
    out.dist = base;
    for (size_t i = 0; i < base.probs.size(); ++i) {
      out.coupling.push_back(
          {static_cast<int>(i), static_cast<int>(i), base.probs[i]});
    }
    return out;
  }

  const Eigen::Index dim = base.support.front().size();
  std::map<std::vector<double>, int> index_of;
  auto add_atom = [&](const Vec& x, double mass, int from) {
    std::vector<double> key(x.data(), x.data() + x.size());
    auto it = index_of.find(key);
    int idx;
    if (it == index_of.end()) {
      idx = static_cast<int>(out.dist.support.size());
      index_of.emplace(std::move(key), idx);
      out.dist.support.push_back(x);
      out.dist.probs.push_back(mass);
    } else {
      idx = it->second;
      out.dist.probs[static_cast<size_t>(idx)] += mass;
    }
    out.coupling.push_back({from, idx, mass});
  };

  for (size_t i = 0; i < base.support.size(); ++i) {
    const Vec& x = base.support[i];
    const double stay = base.probs[i] * (1.0 - eps);
    const double move = base.probs[i] - stay;  // exactly q_i - stay

    // within-ball part: random direction, radius strictly inside eps,
    // clamped to the unit cube (clamping never increases the distance)
    Vec dir(dim);
    for (Eigen::Index j = 0; j < dim; ++j) dir[j] = rng.normal();
    const double norm = lp_norm(dir, p);
    Vec y = x;
    if (norm > 0.0) {
      y += dir * (0.999 * eps * rng.uniform01() / norm);
      for (Eigen::Index j = 0; j < dim; ++j) {
        y[j] = std::min(1.0, std::max(0.0, y[j]));
      }
    }
    add_atom(y, stay, static_cast<int>(i));

    // arbitrary part anywhere in the cube
    Vec w(dim);
    for (Eigen::Index j = 0; j < dim; ++j) w[j] = rng.uniform01();
    add_atom(w, move, static_cast<int>(i));
  }
  validate_dist(out.dist);
  return out;
}

// Total coupling mass sitting on pairs farther apart than eps. The coupling
// is a valid Strassen certificate iff this is <= eps.
inline double coupling_excess_mass(const DiscreteDist& base,
                                   const PerturbedDist& pd) {
  double excess = 0.0;
  for (const auto& pair : pd.coupling) {
    const double dist = lp_norm(
        base.support[static_cast<size_t>(pair.from)] -
            pd.dist.support[static_cast<size_t>(pair.to)],
        pd.p);
    if (dist > pd.eps) excess += pair.mass;
  }
  return excess;
}

// Checks that the coupling's marginals reproduce the base and perturbed
// distributions exactly (atom by atom, no tolerance on single pairs beyond
// the additive rounding of the per-atom sums).
inline void check_coupling_marginals(const DiscreteDist& base,
                                     const PerturbedDist& pd) {
  std::vector<double> from_mass(base.probs.size(), 0.0);
  std::vector<double> to_mass(pd.dist.probs.size(), 0.0);
  for (const auto& pair : pd.coupling) {
    from_mass[static_cast<size_t>(pair.from)] += pair.mass;
    to_mass[static_cast<size_t>(pair.to)] += pair.mass;
  }
  for (size_t i = 0; i < from_mass.size(); ++i) {
    if (std::abs(from_mass[i] - base.probs[i]) > 1e-12) {
      throw PreconditionFailed("coupling: base marginal mismatch");
    }
  }
  for (size_t i = 0; i < to_mass.size(); ++i) {
    if (std::abs(to_mass[i] - pd.dist.probs[i]) > 1e-12) {
      throw PreconditionFailed("coupling: perturbed marginal mismatch");
    }
  }
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

struct ScenarioConfig {
  std::string mode = "recovery";  // "recovery" | "mechanism"
  int d = 100;
  int k = 5;
  int n = 2;
  PNorm p = PNorm::lp(2);
  ArchetypeFamily family = ArchetypeFamily::gaussian;
  std::string matrix_file;  // required iff family == from_file
  double eps_mdl = 0.0;
  double eps_nq = 0.0;
  std::string query_family = "value";  // "value" | "noisy"
  int dhat_support = 4;
  std::uint64_t dhat_seed = 1;
  std::string mhat = "second_price";  // "second_price" | "random_bic"
  double reserve = 0.1;
  int items = 1;
  double delta = 0.1;  // protocol failure probability
  std::uint64_t seed = 1;
  int trials = 10;
  bool fresh_archetypes = false;  // regenerate the design every trial
  std::optional<double> rounding_delta;  // override sqrt(zeta)
};

inline void validate_config(const ScenarioConfig& cfg) {
  if (cfg.mode != "recovery" && cfg.mode != "mechanism") {
    throw ParseError("config: mode must be recovery or mechanism");
  }
  if (cfg.d < cfg.k || cfg.k < 1 || cfg.n < 1 || cfg.trials < 1) {
    throw PreconditionFailed("config: need d >= k >= 1, n >= 1, trials >= 1");
  }
  if (!(cfg.delta > 0.0 && cfg.delta < 1.0)) {
    throw PreconditionFailed("config: delta in (0,1)");
  }
  if (cfg.eps_mdl < 0.0 || cfg.eps_nq < 0.0 || cfg.eps_mdl >= 1.0) {
    throw PreconditionFailed("config: eps bounds out of range");
  }
  if (cfg.query_family == "value" && cfg.eps_nq != 0.0) {
    throw PreconditionFailed(
        "config: value queries are noiseless, eps_nq must be 0");
  }
  if (cfg.query_family != "value" && cfg.query_family != "noisy") {
    throw ParseError("config: query_family must be value or noisy");
  }
  if (cfg.family == ArchetypeFamily::from_file && cfg.matrix_file.empty()) {
    throw ParseError("config: from_file family needs matrix_file");
  }
  if (cfg.mode == "mechanism") {
    if (cfg.mhat != "second_price" && cfg.mhat != "random_bic") {
      throw ParseError("config: mhat must be second_price or random_bic");
    }
    if (cfg.dhat_support < 1) {
      throw PreconditionFailed("config: dhat_support >= 1");
    }
    if (cfg.p.is_inf()) {
      throw PreconditionFailed("config: mechanism mode needs finite p");
    }
    if (cfg.fresh_archetypes) {
      throw PreconditionFailed(
          "config: mechanism mode fixes one market per scenario");
    }
  }
}

inline Json config_to_json(const ScenarioConfig& cfg) {
  Json j;
  j["mode"] = cfg.mode;
  j["d"] = cfg.d;
  j["k"] = cfg.k;
  j["n"] = cfg.n;
  j["p"] = cfg.p.str();
  j["family"] = family_str(cfg.family);
  if (!cfg.matrix_file.empty()) j["matrix_file"] = cfg.matrix_file;
  j["eps_mdl"] = cfg.eps_mdl;
  j["eps_nq"] = cfg.eps_nq;
  j["query_family"] = cfg.query_family;
  if (cfg.mode == "mechanism") {
    j["dhat_support"] = cfg.dhat_support;
    j["dhat_seed"] = cfg.dhat_seed;
    j["mhat"] = cfg.mhat;
    j["reserve"] = cfg.reserve;
    j["items"] = cfg.items;
  }
  j["delta"] = cfg.delta;
  j["seed"] = cfg.seed;
  j["trials"] = cfg.trials;
  j["fresh_archetypes"] = cfg.fresh_archetypes;
  if (cfg.rounding_delta) j["rounding_delta"] = *cfg.rounding_delta;
  return j;
}

inline ScenarioConfig config_from_json(const Json& j) {
  ScenarioConfig cfg;
  auto get = [&](const char* key, auto& slot) {
    using T = std::decay_t<decltype(slot)>;
    if (j.contains(key)) slot = j.at(key).get<T>();
  };
  get("mode", cfg.mode);
  get("d", cfg.d);
  get("k", cfg.k);
  get("n", cfg.n);
  if (j.contains("p")) cfg.p = PNorm::parse(j.at("p").get<std::string>());
  if (j.contains("family")) {
    cfg.family = family_parse(j.at("family").get<std::string>());
  }
  get("matrix_file", cfg.matrix_file);
  get("eps_mdl", cfg.eps_mdl);
  get("eps_nq", cfg.eps_nq);
  if (j.contains("query_family")) {
    cfg.query_family = j.at("query_family").get<std::string>();
  } else if (cfg.eps_nq > 0.0) {
    cfg.query_family = "noisy";
  }
  get("dhat_support", cfg.dhat_support);
  get("dhat_seed", cfg.dhat_seed);
  get("mhat", cfg.mhat);
  get("reserve", cfg.reserve);
  get("items", cfg.items);
  get("delta", cfg.delta);
  get("seed", cfg.seed);
  get("trials", cfg.trials);
  get("fresh_archetypes", cfg.fresh_archetypes);
  if (j.contains("rounding_delta")) {
    cfg.rounding_delta = j.at("rounding_delta").get<double>();
  }
  validate_config(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Experiment report
// ---------------------------------------------------------------------------

struct TrialRow {
  int trial = 0;
  bool failed = false;
  std::string error;
  // recovery mode
  double recovery_error = 0.0;  // max over bidders of ||z_hat - z||_p
  double zeta = 0.0;            // bound the trial was checked against
  long long queries = 0;        // max over bidders (identical by construction)
  bool within_bound = false;
  // mechanism mode
  double auction_revenue = 0.0;
  bool success = false;
};

struct ExperimentReport {
  ScenarioConfig cfg;
  // scenario-level quantities
  double sigma_min = 0.0;
  bool sigma_certified = false;
  double zeta = 0.0;
  // mechanism-mode scenario audit (exact, independent of trial draws)
  double ir_violation = 0.0;
  double eta_measured = 0.0;
  double mu_measured = 0.0;
  double eta_bound = 0.0;
  double mu_bound = 0.0;
  double rho_ell = 0.0;
  double revenue_robust = 0.0;
  double revenue_base = 0.0;
  double revenue_deficit = 0.0;
  bool ir_ok = true;
  bool eta_within = true;
  bool mu_within = true;
  bool revenue_within = true;
  // per-trial rows and aggregates
  std::vector<TrialRow> trials;
  int failed_count = 0;
  double success_rate = 0.0;
  double mean_error = 0.0;
  double se_error = 0.0;
  double mean_queries = 0.0;
  double mean_revenue = 0.0;
  double se_revenue = 0.0;

  bool all_assertions_pass() const {
    if (failed_count > 0) return false;
    if (cfg.mode == "mechanism") {
      return ir_ok && eta_within && mu_within && revenue_within;
    }
    return success_rate >= 0.9;
  }
};

namespace detail {

inline int sample_dist_index(const DiscreteDist& F, Rng& rng) {
  double u = rng.uniform01();
  for (size_t i = 0; i < F.probs.size(); ++i) {
    u -= F.probs[i];
    if (u <= 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(F.probs.size()) - 1;
}

inline void mean_se(const std::vector<double>& xs, double& mean, double& se) {
  mean = 0.0;
  se = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  se = std::sqrt(ss / (static_cast<double>(xs.size()) - 1.0) /
                 static_cast<double>(xs.size()));
}

// Random dhat_support-point prior on the unit cube with distinct atoms.
inline DiscreteDist random_prior(int support, int k, Rng& rng) {
  DiscreteDist F;
  std::map<std::vector<double>, bool> seen;
  while (static_cast<int>(F.support.size()) < support) {
    Vec x(k);
    for (int j = 0; j < k; ++j) x[j] = rng.uniform01();
    std::vector<double> key(x.data(), x.data() + k);
    if (seen.emplace(std::move(key), true).second) F.support.push_back(x);
  }
  std::vector<double> w(static_cast<size_t>(support));
  double total = 0.0;
  for (auto& wi : w) {
    wi = rng.uniform(0.5, 1.5);
    total += wi;
  }
  double acc = 0.0;
  F.probs.resize(w.size());
  for (size_t i = 0; i + 1 < w.size(); ++i) {
    F.probs[i] = w[i] / total;
    acc += F.probs[i];
  }
  F.probs.back() = 1.0 - acc;
  validate_dist(F);
  return F;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

inline ExperimentReport run_experiment(const ScenarioConfig& cfg,
                                       int threads = 1) {
  validate_config(cfg);
  ExperimentReport rep;
  rep.cfg = cfg;
  rep.trials.assign(static_cast<size_t>(cfg.trials), TrialRow{});

  const Rng master(cfg.seed);

  // the design is shared across trials unless fresh_archetypes asks otherwise
  Mat A;
  if (cfg.family == ArchetypeFamily::from_file) {
    A = load_matrix(cfg.matrix_file);
    if (A.rows() != cfg.d || A.cols() != cfg.k) {
      throw ShapeMismatch("config: matrix file dimensions disagree with d,k");
    }
  } else {
    A = gen_archetypes(cfg.family, cfg.d, cfg.k, master.derive(mix64(1)));
  }

  std::optional<double> sigma;
  if (!cfg.fresh_archetypes) {
    const SigmaMinP s = sigma_min_p(A, cfg.p);
    rep.sigma_min = s.value;
    rep.sigma_certified = s.certified;
    sigma = s.value;
    rep.zeta = recovery_error_bound(A, cfg.p, cfg.eps_mdl, cfg.eps_nq, sigma);
  }

  if (cfg.mode == "recovery") {
    auto run_trial = [&](int t) {
      TrialRow row;
      row.trial = t;
      try {
        Rng trial_rng = master.derive(mix64(0x7261 + static_cast<std::uint64_t>(t)));
        Mat At = A;
        std::optional<double> sig = sigma;
        double zeta = rep.zeta;
        if (cfg.fresh_archetypes) {
          At = gen_archetypes(cfg.family, cfg.d, cfg.k, trial_rng.derive(mix64(2)));
          sig = sigma_min_p(At, cfg.p).value;
          zeta = recovery_error_bound(At, cfg.p, cfg.eps_mdl, cfg.eps_nq, sig);
        }
        ProtocolConfig pc;
        pc.p = cfg.p;
        pc.k = cfg.k;
        pc.n = cfg.n;
        pc.delta = cfg.delta;
        double err = 0.0;
        long long queries = 0;
        for (int i = 0; i < cfg.n; ++i) {
          Rng bidder_rng = trial_rng.derive(mix64(0xb1d + static_cast<std::uint64_t>(i)));
          Vec z(cfg.k);
          for (int j = 0; j < cfg.k; ++j) z[j] = bidder_rng.uniform01();
          const TypeOracle oracle = make_type_oracle(At, z, cfg.eps_mdl,
                                                     cfg.eps_nq, cfg.p,
                                                     bidder_rng);
          const RecoveryResult res =
              recover_latent(At, oracle, pc, bidder_rng, sig);
          err = std::max(err, lp_norm(res.z_hat - z, cfg.p));
          queries = std::max(queries, res.queries_used);
        }
        row.recovery_error = err;
        row.zeta = zeta;
        row.queries = queries;
        row.within_bound = err <= zeta;
        row.success = row.within_bound;
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      rep.trials[static_cast<size_t>(t)] = std::move(row);
    };

    if (threads <= 1) {
      for (int t = 0; t < cfg.trials; ++t) run_trial(t);
    } else {
      std::atomic<int> next{0};
      std::vector<std::thread> pool;
      const int nw = std::min(threads, cfg.trials);
      pool.reserve(static_cast<size_t>(nw));
      for (int w = 0; w < nw; ++w) {
        pool.emplace_back([&] {
          for (int t = next.fetch_add(1); t < cfg.trials; t = next.fetch_add(1)) {
            run_trial(t);
          }
        });
      }
      for (auto& th : pool) th.join();
    }
  } else {
    // --- mechanism mode: one market per scenario, trials draw profiles ---
    Rng market(cfg.dhat_seed);
    Vec weights = Vec::Constant(cfg.d, 1.0 / cfg.d);
    const LatentValuation val =
        make_latent_valuation(A, additive_valuation(weights));

    std::vector<DiscreteDist> dhat;
    std::vector<DiscreteDist> truth;
    std::vector<PriorHandle> handles;
    for (int i = 0; i < cfg.n; ++i) {
      Rng prior_rng = market.derive(mix64(0xd4a7 + static_cast<std::uint64_t>(i)));
      dhat.push_back(detail::random_prior(cfg.dhat_support, cfg.k, prior_rng));
      PerturbedDist pd =
          gen_perturbed_dist(dhat.back(), cfg.eps_mdl, cfg.p, prior_rng);
      check_coupling_marginals(dhat.back(), pd);
      truth.push_back(std::move(pd.dist));
      handles.emplace_back(dhat.back());
    }

    std::shared_ptr<MechanismTable> mhat;
    {
      Rng mech_rng = market.derive(mix64(0x3cba));
      if (cfg.mhat == "second_price") {
        std::vector<std::vector<Vec>> supports;
        for (const auto& F : dhat) supports.push_back(F.support);
        mhat = std::make_shared<MechanismTable>(
            second_price_table(supports, val, cfg.reserve));
        const auto bic = audit_bic(*mhat, dhat, val);
        mhat->audited_ir = true;
        mhat->ir_slack = audit_ir(*mhat, dhat, val);
        mhat->audited_bic = true;
        mhat->bic_eta = bic.eta;
        mhat->bic_mu = bic.mu;
      } else {
        mhat = std::make_shared<MechanismTable>(
            random_bic_table(dhat, val, cfg.items, mech_rng));
      }
    }

    Rng build_rng = master.derive(mix64(0xb0b));
    RobustMechanism rm = build_robust(
        mhat, handles, rep.zeta, cfg.p, val.spec.lipschitz, val.a_inf, cfg.k,
        cfg.n, build_rng, cfg.eps_mdl, cfg.rounding_delta);

    rep.ir_violation = audit_ir(rm.mech(), truth, val);
    const BicAudit bic = audit_bic(rm.mech(), truth, val, rm.predicted_eta);
    rep.eta_measured = bic.eta;
    rep.mu_measured = bic.mu;
    rep.eta_bound = rm.predicted_eta;
    rep.mu_bound = rm.predicted_mu;
    rep.rho_ell = rho_ell_exact(truth, dhat, rm.rp);
    rep.revenue_robust = revenue_exact(rm.mech(), dhat);
    rep.revenue_base = revenue_exact(*mhat, dhat);
    rep.revenue_deficit = revenue_deficit_bound(
        rep.zeta, rm.delta, cfg.k, cfg.p, cfg.n, val.spec.lipschitz, val.a_inf,
        rep.rho_ell);
    rep.ir_ok = rep.ir_violation == 0.0;
    rep.eta_within = rep.eta_measured <= rep.eta_bound;
    rep.mu_within = rep.mu_measured <= rep.mu_bound;
    rep.revenue_within =
        rep.revenue_robust >= rep.revenue_base - rep.revenue_deficit - 1e-12;

    auto run_trial = [&](int t) {
      TrialRow row;
      row.trial = t;
      try {
        Rng trial_rng = master.derive(mix64(0x7261 + static_cast<std::uint64_t>(t)));
        std::vector<Vec> reports;
        reports.reserve(static_cast<size_t>(cfg.n));
        for (int i = 0; i < cfg.n; ++i) {
          Rng bidder_rng = trial_rng.derive(mix64(0xb1d + static_cast<std::uint64_t>(i)));
          const int a = detail::sample_dist_index(truth[static_cast<size_t>(i)],
                                                  bidder_rng);
          reports.push_back(truth[static_cast<size_t>(i)].support[static_cast<size_t>(a)]);
        }
        const Outcome out = run_auction(rm, reports);
        row.auction_revenue = out.pay.sum();
        row.within_bound = rep.revenue_within;
        row.success = rep.ir_ok && rep.eta_within && rep.mu_within &&
                      rep.revenue_within;
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      rep.trials[static_cast<size_t>(t)] = std::move(row);
    };

    if (threads <= 1) {
      for (int t = 0; t < cfg.trials; ++t) run_trial(t);
    } else {
      std::atomic<int> next{0};
      std::vector<std::thread> pool;
      const int nw = std::min(threads, cfg.trials);
      pool.reserve(static_cast<size_t>(nw));
      for (int w = 0; w < nw; ++w) {
        pool.emplace_back([&] {
          for (int t = next.fetch_add(1); t < cfg.trials; t = next.fetch_add(1)) {
            run_trial(t);
          }
        });
      }
      for (auto& th : pool) th.join();
    }
  }

  // aggregates; failed trials stay in the denominator
  std::vector<double> errs, revs, qs;
  int successes = 0;
  for (const auto& row : rep.trials) {
    if (row.failed) {
      ++rep.failed_count;
      continue;
    }
    if (row.success) ++successes;
    if (cfg.mode == "recovery") {
      errs.push_back(row.recovery_error);
      qs.push_back(static_cast<double>(row.queries));
    } else {
      revs.push_back(row.auction_revenue);
    }
  }
  rep.success_rate =
      static_cast<double>(successes) / static_cast<double>(cfg.trials);
  detail::mean_se(errs, rep.mean_error, rep.se_error);
  double dummy = 0.0;
  detail::mean_se(qs, rep.mean_queries, dummy);
  detail::mean_se(revs, rep.mean_revenue, rep.se_revenue);
  return rep;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline Json report_to_json(const ExperimentReport& rep) {
  Json j;
  j["config"] = config_to_json(rep.cfg);
  Json scen;
  scen["sigma_min"] = rep.sigma_min;
  scen["sigma_certified"] = rep.sigma_certified;
  scen["zeta"] = rep.zeta;
  if (rep.cfg.mode == "mechanism") {
    scen["ir_violation"] = rep.ir_violation;
    scen["eta_measured"] = rep.eta_measured;
    scen["mu_measured"] = rep.mu_measured;
    scen["eta_bound"] = rep.eta_bound;
    scen["mu_bound"] = rep.mu_bound;
    scen["rho_ell"] = rep.rho_ell;
    scen["revenue_robust"] = rep.revenue_robust;
    scen["revenue_base"] = rep.revenue_base;
    scen["revenue_deficit"] = rep.revenue_deficit;
    scen["ir_ok"] = rep.ir_ok;
    scen["eta_within"] = rep.eta_within;
    scen["mu_within"] = rep.mu_within;
    scen["revenue_within"] = rep.revenue_within;
  }
  j["scenario"] = std::move(scen);
  Json rows = Json::array();
  for (const auto& row : rep.trials) {
    Json r;
    r["trial"] = row.trial;
    r["failed"] = row.failed;
    if (row.failed) {
      r["error"] = row.error;
    } else if (rep.cfg.mode == "recovery") {
      r["recovery_error"] = row.recovery_error;
      r["zeta"] = row.zeta;
      r["queries"] = row.queries;
      r["within_bound"] = row.within_bound;
    } else {
      r["auction_revenue"] = row.auction_revenue;
      r["revenue_within"] = row.within_bound;
      r["success"] = row.success;
    }
    rows.push_back(std::move(r));
  }
  j["trials"] = std::move(rows);
  Json agg;
  agg["trials"] = rep.cfg.trials;
  agg["failed"] = rep.failed_count;
  agg["success_rate"] = rep.success_rate;
  if (rep.cfg.mode == "recovery") {
    agg["mean_error"] = rep.mean_error;
    agg["se_error"] = rep.se_error;
    agg["mean_queries"] = rep.mean_queries;
  } else {
    agg["mean_revenue"] = rep.mean_revenue;
    agg["se_revenue"] = rep.se_revenue;
  }
  j["aggregates"] = std::move(agg);
  return j;
}

inline std::string report_to_csv(const ExperimentReport& rep) {
  std::string head = "mode,p,d,k,n,trials,failed,success_rate";
  std::string row = rep.cfg.mode + "," + rep.cfg.p.str() + "," +
                    std::to_string(rep.cfg.d) + "," + std::to_string(rep.cfg.k) +
                    "," + std::to_string(rep.cfg.n) + "," +
                    std::to_string(rep.cfg.trials) + "," +
                    std::to_string(rep.failed_count) + "," +
                    detail::fmt_double(rep.success_rate);
  if (rep.cfg.mode == "recovery") {
    head += ",zeta,mean_error,se_error,mean_queries";
    row += "," + detail::fmt_double(rep.zeta) + "," +
           detail::fmt_double(rep.mean_error) + "," +
           detail::fmt_double(rep.se_error) + "," +
           detail::fmt_double(rep.mean_queries);
  } else {
    head += ",zeta,ir_violation,eta_measured,eta_bound,mu_measured,mu_bound,"
            "revenue_robust,revenue_base,revenue_deficit,mean_revenue,"
            "se_revenue";
    row += "," + detail::fmt_double(rep.zeta) + "," +
           detail::fmt_double(rep.ir_violation) + "," +
           detail::fmt_double(rep.eta_measured) + "," +
           detail::fmt_double(rep.eta_bound) + "," +
           detail::fmt_double(rep.mu_measured) + "," +
           detail::fmt_double(rep.mu_bound) + "," +
           detail::fmt_double(rep.revenue_robust) + "," +
           detail::fmt_double(rep.revenue_base) + "," +
           detail::fmt_double(rep.revenue_deficit) + "," +
           detail::fmt_double(rep.mean_revenue) + "," +
           detail::fmt_double(rep.se_revenue);
  }
  return head + "\n" + row + "\n";
}

}  // namespace archetype
