#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "archetype/distribution.hpp"
#include "archetype/errors.hpp"
#include "archetype/matrix.hpp"
#include "archetype/rng.hpp"

namespace archetype {

// A bundle is a sorted list of distinct item ids; empty = no allocation.
using Bundle = std::vector<int>;

struct BundleAtom {
  Bundle bundle;
  double prob = 0.0;
};

// One realization branch of a bidder's outcome: bundle and the payment that
// accompanies it, with the joint probability of that branch.
struct OutcomeAtom {
  Bundle bundle;
  double pay = 0.0;
  double prob = 0.0;
};
using BidderMarginal = std::vector<OutcomeAtom>;

struct Outcome {
  std::vector<Bundle> alloc;
  Vec pay;
};

// ---------------------------------------------------------------------------
// Valuations
// ---------------------------------------------------------------------------

enum class ValuationFamily { additive, table };

// v(t, S) over type vectors t and bundles S, with |v(t,S) - v(t',S)| bounded
// by lipschitz * ||t - t'||_inf and v(t, {}) = 0.
struct ValuationSpec {
  ValuationFamily family = ValuationFamily::additive;

  // additive: v(t, S) = sum_{j in S} item_weights[j] * t[j]
  Vec item_weights;

  // table: values for exact (type, bundle) pairs
  std::vector<Vec> table_types;
  std::vector<Bundle> table_bundles;
  Mat table_values;  // table_types.size() x table_bundles.size()

  double lipschitz = 0.0;

  double value(const Vec& t, const Bundle& bundle) const {
    if (bundle.empty()) return 0.0;
    if (family == ValuationFamily::additive) {
      double v = 0.0;
      for (int j : bundle) {
        if (j < 0 || j >= t.size() || j >= item_weights.size()) {
          throw ShapeMismatch("valuation: item id outside type dimension");
        }
        v += item_weights[j] * t[j];
      }
      return v;
    }
    int ti = -1;
    for (size_t i = 0; i < table_types.size(); ++i) {
      if (table_types[i].size() == t.size() &&
          (table_types[i] - t).lpNorm<Eigen::Infinity>() <= 1e-12) {
        ti = static_cast<int>(i);
        break;
      }
    }
    if (ti < 0) throw PreconditionFailed("valuation table: unknown type");
    for (size_t b = 0; b < table_bundles.size(); ++b) {
      if (table_bundles[b] == bundle) return table_values(ti, b);
    }
    throw PreconditionFailed("valuation table: unknown bundle");
  }
};

// Additive valuation with nonnegative per-item weights; the tight Lipschitz
// constant in the sup norm is the total weight.
inline ValuationSpec additive_valuation(Vec weights) {
  ValuationSpec vs;
  vs.family = ValuationFamily::additive;
  vs.lipschitz = weights.cwiseAbs().sum();
  vs.item_weights = std::move(weights);
  return vs;
}

// Spot-check the declared Lipschitz constant and v(.,{})=0 on random pairs.
inline void check_valuation(const ValuationSpec& vs, int dim, Rng& rng,
                            int trials = 200) {
  if (vs.family == ValuationFamily::table) {
    for (size_t a = 0; a < vs.table_types.size(); ++a) {
      for (size_t b = 0; b < vs.table_types.size(); ++b) {
        const double gap =
            (vs.table_types[a] - vs.table_types[b]).lpNorm<Eigen::Infinity>();
        for (size_t s = 0; s < vs.table_bundles.size(); ++s) {
          const double dv = std::abs(vs.table_values(a, s) - vs.table_values(b, s));
          if (dv > vs.lipschitz * gap + 1e-9) {
            throw PreconditionFailed("valuation: Lipschitz bound violated");
          }
        }
      }
    }
    return;
  }
  Bundle full(dim);
  for (int j = 0; j < dim; ++j) full[j] = j;
  for (int t = 0; t < trials; ++t) {
    Vec a(dim), b(dim);
    for (int j = 0; j < dim; ++j) {
      a[j] = rng.uniform(-1.0, 1.0);
      b[j] = rng.uniform(-1.0, 1.0);
    }
    if (vs.value(a, Bundle{}) != 0.0) {
      throw PreconditionFailed("valuation: v(t, {}) must be 0");
    }
    const double dv = std::abs(vs.value(a, full) - vs.value(b, full));
    if (dv > vs.lipschitz * (a - b).lpNorm<Eigen::Infinity>() + 1e-9) {
      throw PreconditionFailed("valuation: Lipschitz bound violated");
    }
  }
}

// Valuation lifted to latent space: vA(z, S) = v(A z, S). It is
// k * max|A_ij| * L Lipschitz in z under the sup norm.
struct LatentValuation {
  Mat A;
  ValuationSpec spec;
  double a_inf = 0.0;  // max |A_ij|
  int k = 0;

  double vA(const Vec& z, const Bundle& bundle) const {
    if (bundle.empty()) return 0.0;
    return spec.value(A * z, bundle);
  }
  double latent_lipschitz() const { return k * a_inf * spec.lipschitz; }
};

inline LatentValuation make_latent_valuation(Mat A, ValuationSpec spec) {
  LatentValuation lv;
  lv.a_inf = max_abs_entry(A);
  lv.k = static_cast<int>(A.cols());
  lv.A = std::move(A);
  lv.spec = std::move(spec);
  return lv;
}

// ---------------------------------------------------------------------------
// Instrumented prior access
// ---------------------------------------------------------------------------

// Shared handle to one bidder's prior. Every read of the underlying
// distribution bumps a counter, so a test can assert which distributions a
// mechanism actually consulted (the composed pipeline must never touch the
// true distribution, only the estimated one).
class PriorHandle {
 public:
  PriorHandle() = default;
  explicit PriorHandle(DiscreteDist d)
      : dist_(std::make_shared<DiscreteDist>(std::move(d))),
        touches_(std::make_shared<std::atomic<long long>>(0)) {
    validate_dist(*dist_);
  }

  const DiscreteDist& get() const {
    ++*touches_;
    return *dist_;
  }
  long long touches() const { return touches_ ? touches_->load() : 0; }
  int dim() const { return static_cast<int>(dist_->support.front().size()); }
  bool empty() const { return !dist_; }

 private:
  std::shared_ptr<DiscreteDist> dist_;
  std::shared_ptr<std::atomic<long long>> touches_;
};

namespace detail {

// Exact conditional atoms of F on the half-open cube [corner, corner+widths),
// with renormalized probabilities. Both edges are shifted down by the same
// relative tolerance the grid rounding uses to snap near-boundary points up,
// so an atom always belongs to the cell its own rounding names even when the
// rounded corner lands one ulp above the atom.
inline std::vector<std::pair<Vec, double>> conditional_atoms(
    const DiscreteDist& F, const Vec& corner, const Vec& widths) {
  std::vector<std::pair<Vec, double>> out;
  double total = 0.0;
  for (size_t i = 0; i < F.support.size(); ++i) {
    bool inside = true;
    for (Eigen::Index j = 0; j < corner.size() && inside; ++j) {
      const double tol = 1e-9 * std::max(1.0, widths[j]);
      inside = F.support[i][j] >= corner[j] - tol &&
               F.support[i][j] < corner[j] + widths[j] - tol;
    }
    if (inside) {
      out.emplace_back(F.support[i], F.probs[i]);
      total += F.probs[i];
    }
  }
  if (out.empty()) throw EmptyCube("conditional_atoms: cube misses support");
  for (auto& a : out) a.second /= total;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Mechanism interface
// ---------------------------------------------------------------------------

// A direct mechanism on latent bids. run() executes one deterministic
// instantiation of the (possibly randomized) rule; expect() returns, per
// bidder, the exact distribution over (bundle, payment) branches, which is
// what the exact IR/BIC/revenue audits integrate against.
class MechanismBase {
 public:
  virtual ~MechanismBase() = default;
  virtual int bidders() const = 0;
  virtual std::string stage_name() const = 0;
  virtual Outcome run(const std::vector<Vec>& bids, Rng& rng) const = 0;
  virtual std::vector<BidderMarginal> expect(const std::vector<Vec>& bids) const = 0;
};

// Explicit lookup-table mechanism over finite per-bidder type supports.
// Allocations may be randomized (a distribution over bundles per profile and
// bidder); payments are deterministic per profile and nonnegative.
class MechanismTable final : public MechanismBase {
 public:
  std::vector<std::vector<Vec>> support;                  // [bidder][type]
  std::vector<std::vector<std::vector<BundleAtom>>> alloc;  // [profile][bidder]
  std::vector<Vec> pay;                                    // [profile] size n

  bool audited_ir = false;
  double ir_slack = 0.0;
  bool audited_bic = false;
  double bic_eta = 0.0;
  double bic_mu = 0.0;

  int bidders() const override { return static_cast<int>(support.size()); }
  std::string stage_name() const override { return "table"; }

  long long profile_count() const {
    long long c = 1;
    for (const auto& s : support) c *= static_cast<long long>(s.size());
    return c;
  }

  void validate() const {
    const int n = bidders();
    if (n == 0) throw ShapeMismatch("mechanism table: no bidders");
    long long count = 1;
    for (const auto& s : support) {
      if (s.empty()) throw ShapeMismatch("mechanism table: empty support");
      count *= static_cast<long long>(s.size());
      if (count > 1000000) {
        throw TooLarge("mechanism table: profile count exceeds 10^6");
      }
    }
    if (static_cast<long long>(alloc.size()) != count ||
        static_cast<long long>(pay.size()) != count) {
      throw ShapeMismatch("mechanism table: incomplete profile coverage");
    }
    for (long long pi = 0; pi < count; ++pi) {
      if (static_cast<int>(alloc[pi].size()) != n || pay[pi].size() != n) {
        throw ShapeMismatch("mechanism table: per-profile arity mismatch");
      }
      for (int i = 0; i < n; ++i) {
        if (!(pay[pi][i] >= 0.0) || !std::isfinite(pay[pi][i])) {
          throw PreconditionFailed("mechanism table: payments must be >= 0");
        }
        double total = 0.0;
        for (const auto& atom : alloc[pi][i]) {
          if (!(atom.prob >= 0.0)) {
            throw BadProbabilities("mechanism table: negative bundle prob");
          }
          total += atom.prob;
          if (!std::is_sorted(atom.bundle.begin(), atom.bundle.end()) ||
              std::adjacent_find(atom.bundle.begin(), atom.bundle.end()) !=
                  atom.bundle.end()) {
            throw PreconditionFailed("mechanism table: bundle not canonical");
          }
        }
        if (std::abs(total - 1.0) > 1e-9) {
          throw BadProbabilities("mechanism table: bundle probs must sum to 1");
        }
      }
    }
  }

  int type_index(int bidder, const Vec& z) const {
    const auto& s = support[bidder];
    for (size_t t = 0; t < s.size(); ++t) {
      if (s[t].size() == z.size() &&
          (s[t] - z).lpNorm<Eigen::Infinity>() == 0.0) {
        return static_cast<int>(t);
      }
    }
    throw PreconditionFailed("mechanism table: bid outside table support");
  }

  // Row-major flattening, bidder 0 slowest.
  long long profile_index(const std::vector<int>& idx) const {
    long long pi = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
      pi = pi * static_cast<long long>(support[i].size()) + idx[i];
    }
    return pi;
  }

  std::vector<BidderMarginal> expect(const std::vector<Vec>& bids) const override {
    const long long pi = lookup(bids);
    const int n = bidders();
    std::vector<BidderMarginal> out(n);
    for (int i = 0; i < n; ++i) {
      for (const auto& atom : alloc[pi][i]) {
        out[i].push_back({atom.bundle, pay[pi][i], atom.prob});
      }
    }
    return out;
  }

  Outcome run(const std::vector<Vec>& bids, Rng& rng) const override {
    const long long pi = lookup(bids);
    const int n = bidders();
    Outcome out;
    out.alloc.resize(n);
    out.pay = pay[pi];
    for (int i = 0; i < n; ++i) {
      double u = rng.uniform01();
      const auto& atoms = alloc[pi][i];
      for (const auto& atom : atoms) {
        u -= atom.prob;
        if (u <= 0.0) {
          out.alloc[i] = atom.bundle;
          break;
        }
      }
      if (u > 0.0) out.alloc[i] = atoms.back().bundle;
    }
    return out;
  }

 private:
  long long lookup(const std::vector<Vec>& bids) const {
    if (static_cast<int>(bids.size()) != bidders()) {
      throw ShapeMismatch("mechanism table: wrong profile arity");
    }
    std::vector<int> idx(bids.size());
    for (size_t i = 0; i < bids.size(); ++i) {
      idx[i] = type_index(static_cast<int>(i), bids[i]);
    }
    return profile_index(idx);
  }
};

namespace detail {

inline void clamp_discount(BidderMarginal& marg, double discount) {
  for (auto& atom : marg) atom.pay = std::max(0.0, atom.pay - discount);
}

// Merge equal (bundle, payment) branches so marginals stay compact when a
// stage mixes over many inner draws.
inline BidderMarginal merge_atoms(const BidderMarginal& atoms) {
  std::map<std::pair<Bundle, double>, double> acc;
  for (const auto& a : atoms) acc[{a.bundle, a.pay}] += a.prob;
  BidderMarginal out;
  out.reserve(acc.size());
  for (const auto& [key, prob] : acc) out.push_back({key.first, key.second, prob});
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: conditional redraw inside the bid's grid cell
// ---------------------------------------------------------------------------

// On bids over the rounded grid, redraws each bidder's type from the
// estimated prior conditioned on the cell the bid names, runs the base
// mechanism on the redraw, and discounts payments by k*|A|_inf*L*delta
// (clamped at zero). The cell width is delta in coordinates where the bid is
// nonzero and ell_j where the bid was clamped to zero.
class ConditionalDrawMechanism final : public MechanismBase {
 public:
  ConditionalDrawMechanism(std::shared_ptr<const MechanismBase> base,
                           std::vector<PriorHandle> priors, RoundingParams rp,
                           double lipschitz, double a_inf, int k)
      : base_(std::move(base)),
        priors_(std::move(priors)),
        rp_(std::move(rp)),
        discount_(k * a_inf * lipschitz * rp_.delta) {
    validate_rounding(rp_);
    if (static_cast<int>(priors_.size()) != base_->bidders()) {
      throw ShapeMismatch("conditional draw: one prior per bidder required");
    }
  }

  int bidders() const override { return base_->bidders(); }
  std::string stage_name() const override { return "conditional-draw"; }
  double discount() const { return discount_; }

  Vec cell_widths(const Vec& bid) const {
    Vec beta(bid.size());
    for (Eigen::Index j = 0; j < bid.size(); ++j) {
      beta[j] = bid[j] != 0.0 ? rp_.delta : rp_.ell[j];
    }
    return beta;
  }

  Outcome run(const std::vector<Vec>& bids, Rng& rng) const override {
    std::vector<Vec> redrawn(bids.size());
    for (size_t i = 0; i < bids.size(); ++i) {
      // draw from the same atom set expect() integrates over
      const auto atoms = detail::conditional_atoms(
          priors_[i].get(), bids[i], cell_widths(bids[i]));
      double u = rng.uniform01();
      redrawn[i] = atoms.back().first;
      for (const auto& [point, prob] : atoms) {
        u -= prob;
        if (u <= 0.0) {
          redrawn[i] = point;
          break;
        }
      }
    }
    Outcome out = base_->run(redrawn, rng);
    for (int i = 0; i < out.pay.size(); ++i) {
      out.pay[i] = std::max(0.0, out.pay[i] - discount_);
    }
    return out;
  }

  std::vector<BidderMarginal> expect(const std::vector<Vec>& bids) const override {
    const int n = bidders();
    if (static_cast<int>(bids.size()) != n) {
      throw ShapeMismatch("conditional draw: wrong profile arity");
    }
    std::vector<std::vector<std::pair<Vec, double>>> cond(n);
    long long combos = 1;
    for (int i = 0; i < n; ++i) {
      cond[i] =
          detail::conditional_atoms(priors_[i].get(), bids[i], cell_widths(bids[i]));
      combos *= static_cast<long long>(cond[i].size());
      if (combos > 1000000) {
        throw TooLarge("conditional draw: redraw product exceeds 10^6");
      }
    }
    std::vector<BidderMarginal> out(n);
    std::vector<int> idx(n, 0);
    std::vector<Vec> redrawn(n);
    while (true) {
      double weight = 1.0;
      for (int i = 0; i < n; ++i) {
        redrawn[i] = cond[i][idx[i]].first;
        weight *= cond[i][idx[i]].second;
      }
      const auto inner = base_->expect(redrawn);
      for (int i = 0; i < n; ++i) {
        for (const auto& atom : inner[i]) {
          out[i].push_back({atom.bundle, std::max(0.0, atom.pay - discount_),
                            weight * atom.prob});
        }
      }
      int j = n - 1;
      while (j >= 0 && ++idx[j] == static_cast<int>(cond[j].size())) {
        idx[j] = 0;
        --j;
      }
      if (j < 0) break;
    }
    for (int i = 0; i < n; ++i) out[i] = detail::merge_atoms(out[i]);
    return out;
  }

 private:
  std::shared_ptr<const MechanismBase> base_;
  std::vector<PriorHandle> priors_;
  RoundingParams rp_;
  double discount_;
};

// ---------------------------------------------------------------------------
// Stage 2: map reports onto the rounded estimated support, or exclude
// ---------------------------------------------------------------------------

// Maps each report to the closest point of the estimated prior's support (in
// the chosen p norm), rounds that point down, and runs the inner mechanism on
// the mapped profile. Bidders whose report lies within zeta + delta*k^(1/p)
// of their mapped point keep the inner allocation with a further discounted
// payment; everyone else receives nothing and pays nothing.
class ClosestPointMechanism final : public MechanismBase {
 public:
  ClosestPointMechanism(std::shared_ptr<const MechanismBase> inner,
                        std::vector<PriorHandle> priors, double zeta,
                        RoundingParams rp, PNorm p, double lipschitz,
                        double a_inf, int k)
      : inner_(std::move(inner)),
        priors_(std::move(priors)),
        rp_(std::move(rp)),
        p_(p),
        threshold_(zeta + rp_.delta * std::pow(static_cast<double>(k),
                                               p.is_inf() ? 0.0 : 1.0 / p.p())),
        discount_(k * threshold_ * a_inf * lipschitz) {
    validate_rounding(rp_);
    if (static_cast<int>(priors_.size()) != inner_->bidders()) {
      throw ShapeMismatch("closest point: one prior per bidder required");
    }
  }

  int bidders() const override { return inner_->bidders(); }
  std::string stage_name() const override { return "closest-point-filter"; }
  double threshold() const { return threshold_; }
  double discount() const { return discount_; }

  // Mapped rounded-support point for one report.
  Vec map_report(int bidder, const Vec& bid) const {
    const Vec nearest = closest_support_point(priors_[bidder].get(), bid, p_);
    return round_point(nearest, rp_);
  }
  bool eligible(const Vec& bid, const Vec& mapped) const {
    return lp_norm(bid - mapped, p_) <= threshold_;
  }

  Outcome run(const std::vector<Vec>& bids, Rng& rng) const override {
    std::vector<Vec> mapped(bids.size());
    std::vector<bool> keep(bids.size());
    for (size_t i = 0; i < bids.size(); ++i) {
      mapped[i] = map_report(static_cast<int>(i), bids[i]);
      keep[i] = eligible(bids[i], mapped[i]);
    }
    Outcome out = inner_->run(mapped, rng);
    for (int i = 0; i < out.pay.size(); ++i) {
      if (keep[i]) {
        out.pay[i] = std::max(0.0, out.pay[i] - discount_);
      } else {
        out.alloc[i].clear();
        out.pay[i] = 0.0;
      }
    }
    return out;
  }

  std::vector<BidderMarginal> expect(const std::vector<Vec>& bids) const override {
    std::vector<Vec> mapped(bids.size());
    std::vector<bool> keep(bids.size());
    for (size_t i = 0; i < bids.size(); ++i) {
      mapped[i] = map_report(static_cast<int>(i), bids[i]);
      keep[i] = eligible(bids[i], mapped[i]);
    }
    auto out = inner_->expect(mapped);
    for (size_t i = 0; i < out.size(); ++i) {
      if (keep[i]) {
        detail::clamp_discount(out[i], discount_);
        out[i] = detail::merge_atoms(out[i]);
      } else {
        out[i] = {{Bundle{}, 0.0, 1.0}};
      }
    }
    return out;
  }

 private:
  std::shared_ptr<const MechanismBase> inner_;
  std::vector<PriorHandle> priors_;
  RoundingParams rp_;
  PNorm p_;
  double threshold_;
  double discount_;
};

// ---------------------------------------------------------------------------
// Stage 3: round raw bids down onto the grid
// ---------------------------------------------------------------------------

class RoundDownMechanism final : public MechanismBase {
 public:
  RoundDownMechanism(std::shared_ptr<const MechanismBase> inner,
                     RoundingParams rp, double lipschitz, double a_inf, int k)
      : inner_(std::move(inner)),
        rp_(std::move(rp)),
        discount_(k * a_inf * lipschitz * rp_.delta) {
    validate_rounding(rp_);
  }

  int bidders() const override { return inner_->bidders(); }
  std::string stage_name() const override { return "round-down"; }
  double discount() const { return discount_; }

  Outcome run(const std::vector<Vec>& bids, Rng& rng) const override {
    Outcome out = inner_->run(rounded(bids), rng);
    for (int i = 0; i < out.pay.size(); ++i) {
      out.pay[i] = std::max(0.0, out.pay[i] - discount_);
    }
    return out;
  }

  std::vector<BidderMarginal> expect(const std::vector<Vec>& bids) const override {
    auto out = inner_->expect(rounded(bids));
    for (auto& marg : out) {
      detail::clamp_discount(marg, discount_);
      marg = detail::merge_atoms(marg);
    }
    return out;
  }

 private:
  std::vector<Vec> rounded(const std::vector<Vec>& bids) const {
    std::vector<Vec> out(bids.size());
    for (size_t i = 0; i < bids.size(); ++i) out[i] = round_point(bids[i], rp_);
    return out;
  }

  std::shared_ptr<const MechanismBase> inner_;
  RoundingParams rp_;
  double discount_;
};

// ---------------------------------------------------------------------------
// Builders and the composed robust mechanism
// ---------------------------------------------------------------------------

inline std::shared_ptr<MechanismBase> build_m1(
    std::shared_ptr<const MechanismBase> base, std::vector<PriorHandle> priors,
    RoundingParams rp, double lipschitz, double a_inf, int k) {
  return std::make_shared<ConditionalDrawMechanism>(
      std::move(base), std::move(priors), std::move(rp), lipschitz, a_inf, k);
}

inline std::shared_ptr<MechanismBase> build_m2(
    std::shared_ptr<const MechanismBase> m1, std::vector<PriorHandle> priors,
    double zeta, RoundingParams rp, PNorm p, double lipschitz, double a_inf,
    int k) {
  return std::make_shared<ClosestPointMechanism>(std::move(m1), std::move(priors),
                                                 zeta, std::move(rp), p,
                                                 lipschitz, a_inf, k);
}

inline std::shared_ptr<MechanismBase> build_m_ell(
    std::shared_ptr<const MechanismBase> m2, RoundingParams rp,
    double lipschitz, double a_inf, int k) {
  return std::make_shared<RoundDownMechanism>(std::move(m2), std::move(rp),
                                              lipschitz, a_inf, k);
}

// Explicit slack bounds for the composed mechanism, with every constant
// carried through the three stages:
//   eta = 2k|A|L*delta            (conditional redraw)
//       + 4kL|A|*rho              (total variation between rounded priors)
//       + 3k(zeta+delta k^(1/p))|A|L   (closest-point filter)
//       + 2 delta k^((1+p)/p)|A|L      (closest point computed pre-rounding)
//       + 3kL|A|*delta            (final round-down)
//   mu  = zeta + delta k^(1/p)
// When rho is not supplied it is replaced by its expectation bound
// n(1 + k^(1-1/p)/delta) * zeta.
inline std::pair<double, double> eta_mu_bounds(
    double zeta, double delta, int k, PNorm p, int n, double lipschitz,
    double a_inf, std::optional<double> rho_ell = {}) {
  if (zeta < 0 || delta < 0 || k < 0 || n < 0 || lipschitz < 0 || a_inf < 0) {
    throw PreconditionFailed("eta_mu_bounds: parameters must be >= 0");
  }
  const double inv_p = p.is_inf() ? 0.0 : 1.0 / p.p();
  const double kd = static_cast<double>(k);
  const double rho = rho_ell.has_value()
                         ? *rho_ell
                         : (delta > 0.0 ? n * (1.0 + std::pow(kd, 1.0 - inv_p) /
                                                         delta) * zeta
                                        : 0.0);
  const double kal = kd * a_inf * lipschitz;
  const double mu = zeta + delta * std::pow(kd, inv_p);
  const double eta = 2.0 * kal * delta + 4.0 * kal * rho + 3.0 * kd * mu * a_inf * lipschitz +
                     2.0 * delta * std::pow(kd, inv_p + 1.0) * a_inf * lipschitz +
                     3.0 * kal * delta;
  return {eta, mu};
}

// Worst-case revenue loss of the composed mechanism relative to the base
// mechanism on the estimated prior, one term per stage plus the
// closest-point correction.
inline double revenue_deficit_bound(double zeta, double delta, int k, PNorm p,
                                    int n, double lipschitz, double a_inf,
                                    std::optional<double> rho_ell = {}) {
  const double inv_p = p.is_inf() ? 0.0 : 1.0 / p.p();
  const double kd = static_cast<double>(k);
  const double rho = rho_ell.has_value()
                         ? *rho_ell
                         : (delta > 0.0 ? n * (1.0 + std::pow(kd, 1.0 - inv_p) /
                                                         delta) * zeta
                                        : 0.0);
  const double nkal = n * kd * a_inf * lipschitz;
  return nkal * delta + nkal * rho +
         nkal * (zeta + delta * std::pow(kd, inv_p)) + nkal * delta +
         2.0 * n * delta * std::pow(kd, inv_p + 1.0) * a_inf * lipschitz;
}

// Exact per-offset total variation sum between the rounded true and rounded
// estimated priors; available to the harness, never to the mechanism.
inline double rho_ell_exact(const std::vector<DiscreteDist>& true_dists,
                            const std::vector<DiscreteDist>& est_dists,
                            const RoundingParams& rp) {
  if (true_dists.size() != est_dists.size()) {
    throw ShapeMismatch("rho_ell_exact: bidder count mismatch");
  }
  double rho = 0.0;
  for (size_t i = 0; i < true_dists.size(); ++i) {
    rho += tv_distance(round_dist(true_dists[i], rp), round_dist(est_dists[i], rp));
  }
  return rho;
}

// The composed robust mechanism: a grid offset sampled at build time, the
// three transform stages around the base mechanism, and the predicted slack
// bounds. The object is immutable after construction; auction runs derive
// their randomness from the stored stream and the bid profile, so equal
// profiles always see equal draws.
struct RobustMechanism {
  PNorm p = PNorm::lp(2);
  double zeta = 0.0;
  double delta = 0.0;
  Vec ell;
  int k = 0;
  int n = 0;
  double lipschitz = 0.0;
  double a_inf = 0.0;
  RoundingParams rp;
  std::shared_ptr<const MechanismBase> chain;
  std::vector<std::string> stages;  // outermost first
  double rho_ell_bound = 0.0;       // expectation bound used in predictions
  double predicted_eta = 0.0;
  double predicted_mu = 0.0;
  std::uint64_t run_seed = 0;

  const MechanismBase& mech() const { return *chain; }
};

inline RobustMechanism build_robust(std::shared_ptr<const MechanismBase> base,
                                    std::vector<PriorHandle> priors,
                                    double zeta, PNorm p, double lipschitz,
                                    double a_inf, int k, int n, Rng& rng,
                                    double eps_mdl = 0.0,
                                    std::optional<double> delta_override = {}) {
  if (zeta < eps_mdl) {
    throw PreconditionFailed("build_robust: zeta must be >= the model error");
  }
  if (static_cast<int>(priors.size()) != n || base->bidders() != n) {
    throw ShapeMismatch("build_robust: bidder count mismatch");
  }
  RobustMechanism rm;
  rm.p = p;
  rm.zeta = zeta;
  rm.delta = delta_override.value_or(std::sqrt(zeta));
  if (!(rm.delta > 0.0)) {
    throw PreconditionFailed("build_robust: delta must be positive");
  }
  rm.k = k;
  rm.n = n;
  rm.lipschitz = lipschitz;
  rm.a_inf = a_inf;
  rm.ell = Vec(k);
  for (int j = 0; j < k; ++j) rm.ell[j] = rng.uniform(0.0, rm.delta);
  rm.rp.ell = rm.ell;
  rm.rp.delta = rm.delta;

  auto m1 = build_m1(std::move(base), priors, rm.rp, lipschitz, a_inf, k);
  auto m2 = build_m2(m1, std::move(priors), zeta, rm.rp, p, lipschitz, a_inf, k);
  auto mell = build_m_ell(m2, rm.rp, lipschitz, a_inf, k);
  rm.stages = {mell->stage_name(), m2->stage_name(), m1->stage_name()};
  rm.chain = std::move(mell);

  const double inv_p = p.is_inf() ? 0.0 : 1.0 / p.p();
  rm.rho_ell_bound =
      n * (1.0 + std::pow(static_cast<double>(k), 1.0 - inv_p) / rm.delta) * zeta;
  std::tie(rm.predicted_eta, rm.predicted_mu) =
      eta_mu_bounds(zeta, rm.delta, k, p, n, lipschitz, a_inf, rm.rho_ell_bound);
  rm.run_seed = rng.next_u64();
  return rm;
}

inline Outcome run_auction(const RobustMechanism& rm,
                           const std::vector<Vec>& reports) {
  if (static_cast<int>(reports.size()) != rm.n) {
    throw ShapeMismatch("run_auction: wrong report count");
  }
  std::vector<double> flat;
  for (const auto& r : reports) {
    for (Eigen::Index j = 0; j < r.size(); ++j) flat.push_back(r[j]);
  }
  Rng stream(rm.run_seed ^ fnv1a(flat));
  return rm.chain->run(reports, stream);
}

// ---------------------------------------------------------------------------
// Exact audits
// ---------------------------------------------------------------------------

namespace detail {

// Enumerate the product support of per-bidder distributions, guarded at 10^6
// profiles; calls fn(indices, weight).
template <typename F>
void for_each_profile(const std::vector<DiscreteDist>& dists, F&& fn) {
  const int n = static_cast<int>(dists.size());
  long long count = 1;
  for (const auto& d : dists) {
    validate_dist(d);
    count *= static_cast<long long>(d.support.size());
    if (count > 1000000) throw TooLarge("audit: profile count exceeds 10^6");
  }
  std::vector<int> idx(n, 0);
  while (true) {
    double w = 1.0;
    for (int i = 0; i < n; ++i) w *= dists[i].probs[idx[i]];
    fn(idx, w);
    int j = n - 1;
    while (j >= 0 && ++idx[j] == static_cast<int>(dists[j].support.size())) {
      idx[j] = 0;
      --j;
    }
    if (j < 0) break;
  }
}

struct ProfileView {
  std::vector<std::map<Bundle, double>> bundle_marg;  // per bidder
  Vec epay;                                           // per bidder
};

inline ProfileView profile_view(const MechanismBase& M,
                                const std::vector<Vec>& profile) {
  const auto margs = M.expect(profile);
  ProfileView pv;
  pv.bundle_marg.resize(margs.size());
  pv.epay = Vec::Zero(static_cast<Eigen::Index>(margs.size()));
  for (size_t i = 0; i < margs.size(); ++i) {
    for (const auto& atom : margs[i]) {
      pv.bundle_marg[i][atom.bundle] += atom.prob;
      pv.epay[i] += atom.prob * atom.pay;
    }
  }
  return pv;
}

}  // namespace detail

// Exact ex-post individual rationality audit: minimum truthful utility over
// every profile of the product support; violation = max(0, -min).
inline double audit_ir(const MechanismBase& M,
                       const std::vector<DiscreteDist>& dists,
                       const LatentValuation& val) {
  if (static_cast<int>(dists.size()) != M.bidders()) {
    throw ShapeMismatch("audit_ir: bidder count mismatch");
  }
  double min_u = std::numeric_limits<double>::infinity();
  std::vector<Vec> profile(dists.size());
  detail::for_each_profile(dists, [&](const std::vector<int>& idx, double) {
    for (size_t i = 0; i < dists.size(); ++i) {
      profile[i] = dists[i].support[idx[i]];
    }
    const auto pv = detail::profile_view(M, profile);
    for (size_t i = 0; i < dists.size(); ++i) {
      double u = -pv.epay[i];
      for (const auto& [bundle, prob] : pv.bundle_marg[i]) {
        u += prob * val.vA(profile[i], bundle);
      }
      min_u = std::min(min_u, u);
    }
  });
  return std::max(0.0, -min_u);
}

struct BicAudit {
  double eta = 0.0;  // largest interim regret over all bidders and types
  double mu = 0.0;   // largest per-bidder type mass with regret > threshold
};

// Exact interim incentive audit. For every bidder, true type, and misreport
// within the same support, compares interim utilities with expectations taken
// exactly over the opponents' product distribution and the mechanism's own
// branching.
inline BicAudit audit_bic(const MechanismBase& M,
                          const std::vector<DiscreteDist>& dists,
                          const LatentValuation& val,
                          double eps_threshold = 1e-9) {
  const int n = M.bidders();
  if (static_cast<int>(dists.size()) != n) {
    throw ShapeMismatch("audit_bic: bidder count mismatch");
  }
  // Cache the mechanism view of every reported profile.
  std::vector<detail::ProfileView> views;
  std::vector<std::vector<int>> profiles;
  std::vector<Vec> profile(n);
  detail::for_each_profile(dists, [&](const std::vector<int>& idx, double) {
    for (int i = 0; i < n; ++i) profile[i] = dists[i].support[idx[i]];
    views.push_back(detail::profile_view(M, profile));
    profiles.push_back(idx);
  });
  std::vector<long long> stride(n, 1);
  for (int i = n - 2; i >= 0; --i) {
    stride[i] = stride[i + 1] * static_cast<long long>(dists[i + 1].support.size());
  }
  auto flat = [&](const std::vector<int>& idx) {
    long long f = 0;
    for (int i = 0; i < n; ++i) f += stride[i] * idx[i];
    return f;
  };

  BicAudit out;
  for (int i = 0; i < n; ++i) {
    const int S = static_cast<int>(dists[i].support.size());
    // interim[r][a]: expected utility of true type a when reporting r.
    std::vector<std::vector<double>> interim(S, std::vector<double>(S, 0.0));
    std::vector<DiscreteDist> others;
    std::vector<int> other_ids;
    for (int j = 0; j < n; ++j) {
      if (j != i) {
        others.push_back(dists[j]);
        other_ids.push_back(j);
      }
    }
    auto accumulate = [&](const std::vector<int>& oidx, double w) {
      std::vector<int> idx(n, 0);
      for (size_t j = 0; j < other_ids.size(); ++j) idx[other_ids[j]] = oidx[j];
      for (int r = 0; r < S; ++r) {
        idx[i] = r;
        const auto& pv = views[flat(idx)];
        for (int a = 0; a < S; ++a) {
          double u = -pv.epay[i];
          for (const auto& [bundle, prob] : pv.bundle_marg[i]) {
            u += prob * val.vA(dists[i].support[a], bundle);
          }
          interim[r][a] += w * u;
        }
      }
    };
    if (others.empty()) {
      accumulate({}, 1.0);
    } else {
      detail::for_each_profile(others, accumulate);
    }
    double mass = 0.0;
    for (int a = 0; a < S; ++a) {
      double best_dev = -std::numeric_limits<double>::infinity();
      for (int r = 0; r < S; ++r) best_dev = std::max(best_dev, interim[r][a]);
      const double regret = std::max(0.0, best_dev - interim[a][a]);
      out.eta = std::max(out.eta, regret);
      if (regret > eps_threshold) mass += dists[i].probs[a];
    }
    out.mu = std::max(out.mu, mass);
  }
  return out;
}

// Exact expected revenue over the product support.
inline double revenue_exact(const MechanismBase& M,
                            const std::vector<DiscreteDist>& dists) {
  if (static_cast<int>(dists.size()) != M.bidders()) {
    throw ShapeMismatch("revenue_exact: bidder count mismatch");
  }
  double rev = 0.0;
  std::vector<Vec> profile(dists.size());
  detail::for_each_profile(dists, [&](const std::vector<int>& idx, double w) {
    for (size_t i = 0; i < dists.size(); ++i) {
      profile[i] = dists[i].support[idx[i]];
    }
    rev += w * detail::profile_view(M, profile).epay.sum();
  });
  return rev;
}

struct McRevenue {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo revenue: samples type profiles and one mechanism instantiation
// per draw.
inline McRevenue revenue_mc(const MechanismBase& M,
                            const std::vector<DiscreteDist>& dists, int draws,
                            Rng& rng) {
  if (draws < 1) throw PreconditionFailed("revenue_mc: draws must be >= 1");
  double mean = 0.0, m2 = 0.0;
  std::vector<Vec> profile(dists.size());
  for (int t = 0; t < draws; ++t) {
    for (size_t i = 0; i < dists.size(); ++i) {
      double u = rng.uniform01();
      size_t pick = dists[i].support.size() - 1;
      for (size_t a = 0; a < dists[i].support.size(); ++a) {
        u -= dists[i].probs[a];
        if (u <= 0.0) {
          pick = a;
          break;
        }
      }
      profile[i] = dists[i].support[pick];
    }
    const Outcome o = M.run(profile, rng);
    const double x = o.pay.sum();
    const double d = x - mean;
    mean += d / (t + 1);
    m2 += d * (x - mean);
  }
  McRevenue out;
  out.value = mean;
  out.std_error = draws > 1 ? std::sqrt(m2 / (draws - 1) / draws) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Base mechanism generators
// ---------------------------------------------------------------------------

// Single-item second-price auction with a reserve, lifted to latent types:
// bidder i's value is vA(z_i, {item}). Highest value wins (lowest index on
// ties) if it clears the reserve, and pays the larger of the reserve and the
// best competing value. Truthful by construction, so it audits BIC-exact.
inline MechanismTable second_price_table(
    const std::vector<std::vector<Vec>>& supports, const LatentValuation& val,
    double reserve, int item = 0) {
  MechanismTable M;
  M.support = supports;
  const int n = static_cast<int>(supports.size());
  const long long count = M.profile_count();
  if (count > 1000000) throw TooLarge("second_price_table: too many profiles");
  const Bundle item_bundle{item};
  M.alloc.resize(count);
  M.pay.resize(count);

  std::vector<int> idx(n, 0);
  for (long long pi = 0; pi < count; ++pi) {
    M.alloc[pi].assign(n, {{Bundle{}, 1.0}});
    M.pay[pi] = Vec::Zero(n);
    int winner = -1;
    double best = reserve, second = reserve;
    for (int i = 0; i < n; ++i) {
      const double v = val.vA(supports[i][idx[i]], item_bundle);
      if (v > best || (winner < 0 && v >= reserve && v >= best)) {
        second = winner >= 0 ? best : reserve;
        best = v;
        winner = i;
      } else if (v > second) {
        second = v;
      }
    }
    if (winner >= 0) {
      M.alloc[pi][winner] = {{item_bundle, 1.0}};
      M.pay[pi][winner] = std::max(reserve, second);
    }
    int j = n - 1;
    while (j >= 0 && ++idx[j] == static_cast<int>(supports[j].size())) {
      idx[j] = 0;
      --j;
    }
  }
  M.validate();
  return M;
}

// Random table mechanism repaired to exact IR and (tol-close) BIC:
//   1. clamp each payment to the bidder's expected value at that profile;
//   2. repeatedly subsidize regretful truthful reports by their regret;
//   3. if regret persists, zero that bidder's payments;
//   4. if allocation-driven regret still persists, exclude the bidder.
// The result is re-audited and its flags carry the measured slacks.
inline MechanismTable random_bic_table(const std::vector<DiscreteDist>& dists,
                                       const LatentValuation& val, int items,
                                       Rng& rng, double tol = 1e-9,
                                       int repair_rounds = 60) {
  const int n = static_cast<int>(dists.size());
  MechanismTable M;
  M.support.resize(n);
  for (int i = 0; i < n; ++i) {
    validate_dist(dists[i]);
    M.support[i] = dists[i].support;
  }
  const long long count = M.profile_count();
  if (count > 1000000) throw TooLarge("random_bic_table: too many profiles");

  std::vector<Bundle> pool;
  pool.push_back(Bundle{});
  for (int j = 0; j < items; ++j) pool.push_back(Bundle{j});
  Bundle full(items);
  for (int j = 0; j < items; ++j) full[j] = j;
  if (items > 1) pool.push_back(full);

  M.alloc.resize(count);
  M.pay.resize(count);
  std::vector<int> idx(n, 0);
  for (long long pi = 0; pi < count; ++pi) {
    M.alloc[pi].resize(n);
    M.pay[pi] = Vec::Zero(n);
    for (int i = 0; i < n; ++i) {
      const Bundle& a = pool[rng.uniform_int(pool.size())];
      const Bundle& b = pool[rng.uniform_int(pool.size())];
      const double w = rng.uniform01();
      if (a == b) {
        M.alloc[pi][i] = {{a, 1.0}};
      } else {
        M.alloc[pi][i] = {{a, w}, {b, 1.0 - w}};
      }
      // IR clamp: never charge more than the expected bundle value. A
      // negative expected value cannot be made IR by any payment, so that
      // bidder gets nothing at this profile instead.
      double ev = 0.0;
      for (const auto& atom : M.alloc[pi][i]) {
        ev += atom.prob * val.vA(dists[i].support[idx[i]], atom.bundle);
      }
      if (ev < 0.0) {
        M.alloc[pi][i] = {{Bundle{}, 1.0}};
        ev = 0.0;
      }
      M.pay[pi][i] = std::min(rng.uniform(0.0, 1.0 + ev), ev);
    }
    int j = n - 1;
    while (j >= 0 && ++idx[j] == static_cast<int>(dists[j].support.size())) {
      idx[j] = 0;
      --j;
    }
  }

  auto reduce_pay = [&](int bidder, int type, double amount) {
    std::vector<int> at(n, 0);
    for (long long pi = 0; pi < count; ++pi) {
      if (at[bidder] == type) {
        M.pay[pi][bidder] = std::max(0.0, M.pay[pi][bidder] - amount);
      }
      int j = n - 1;
      while (j >= 0 && ++at[j] == static_cast<int>(dists[j].support.size())) {
        at[j] = 0;
        --j;
      }
    }
  };

  // Per-bidder per-type regrets against the given priors.
  auto regrets = [&]() {
    std::vector<std::vector<double>> out(n);
    for (int i = 0; i < n; ++i) {
      const int S = static_cast<int>(dists[i].support.size());
      std::vector<std::vector<double>> interim(S, std::vector<double>(S, 0.0));
      std::vector<int> at(n, 0);
      for (long long pi = 0; pi < count; ++pi) {
        double w = 1.0;
        for (int j = 0; j < n; ++j) {
          if (j != i) w *= dists[j].probs[at[j]];
        }
        const int r = at[i];
        for (int a = 0; a < S; ++a) {
          double u = -M.pay[pi][i];
          for (const auto& atom : M.alloc[pi][i]) {
            u += atom.prob * val.vA(dists[i].support[a], atom.bundle);
          }
          interim[r][a] += w * u;
        }
        int j = n - 1;
        while (j >= 0 && ++at[j] == static_cast<int>(dists[j].support.size())) {
          at[j] = 0;
          --j;
        }
      }
      out[i].resize(S);
      for (int a = 0; a < S; ++a) {
        double best = -std::numeric_limits<double>::infinity();
        for (int r = 0; r < S; ++r) best = std::max(best, interim[r][a]);
        out[i][a] = std::max(0.0, best - interim[a][a]);
      }
    }
    return out;
  };

  for (int round = 0; round < repair_rounds; ++round) {
    const auto gs = regrets();
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
      for (size_t a = 0; a < gs[i].size(); ++a) {
        worst = std::max(worst, gs[i][a]);
        if (gs[i][a] > tol) reduce_pay(i, static_cast<int>(a), gs[i][a]);
      }
    }
    if (worst <= tol) break;
  }
  {
    const auto gs = regrets();
    for (int i = 0; i < n; ++i) {
      if (*std::max_element(gs[i].begin(), gs[i].end()) > tol) {
        for (long long pi = 0; pi < count; ++pi) M.pay[pi][i] = 0.0;
      }
    }
  }
  {
    const auto gs = regrets();
    for (int i = 0; i < n; ++i) {
      if (*std::max_element(gs[i].begin(), gs[i].end()) > tol) {
        for (long long pi = 0; pi < count; ++pi) {
          M.alloc[pi][i] = {{Bundle{}, 1.0}};
          M.pay[pi][i] = 0.0;
        }
      }
    }
  }
  M.validate();
  const double ir = audit_ir(M, dists, val);
  const BicAudit bic = audit_bic(M, dists, val, tol);
  if (ir != 0.0 || bic.eta > tol) {
    throw SolverFailure("random_bic_table: repair failed to reach IR/BIC");
  }
  M.audited_ir = true;
  M.ir_slack = ir;
  M.audited_bic = true;
  M.bic_eta = bic.eta;
  M.bic_mu = bic.mu;
  return M;
}

}  // namespace archetype
