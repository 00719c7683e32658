#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "archetype/mechanism.hpp"

using archetype::Bundle;
using archetype::DiscreteDist;
using archetype::LatentValuation;
using archetype::MechanismTable;
using archetype::PNorm;
using archetype::PriorHandle;
using archetype::RoundingParams;
using archetype::Vec;

namespace {

Vec pt2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

Vec pt1(double a) {
  Vec v(1);
  v << a;
  return v;
}

// corner supports, pairwise l1 distance >= 0.9
DiscreteDist corner_dist(std::vector<double> probs) {
  DiscreteDist F;
  F.support = {pt2(0.05, 0.05), pt2(0.05, 0.95), pt2(0.95, 0.05),
               pt2(0.95, 0.95)};
  F.probs = std::move(probs);
  return F;
}

LatentValuation toy_valuation(double w0 = 1.0, double w1 = 1.0) {
  Vec w(2);
  w << w0, w1;
  return archetype::make_latent_valuation(archetype::Mat::Identity(2, 2),
                                          archetype::additive_valuation(w));
}

RoundingParams toy_rp() {
  RoundingParams rp;
  rp.ell = pt2(0.1, 0.15);
  rp.delta = 0.2;
  return rp;
}

struct Toy {
  std::vector<DiscreteDist> dhat;
  std::vector<DiscreteDist> dhat_rounded;
  std::vector<PriorHandle> handles;
  LatentValuation val;
  RoundingParams rp;
  std::shared_ptr<MechanismTable> mhat;
};

Toy make_toy() {
  Toy t;
  t.dhat = {corner_dist({0.4, 0.3, 0.2, 0.1}), corner_dist({0.25, 0.25, 0.25, 0.25})};
  t.val = toy_valuation();
  t.rp = toy_rp();
  for (const auto& d : t.dhat) {
    t.dhat_rounded.push_back(archetype::round_dist(d, t.rp));
    t.handles.emplace_back(d);
  }
  auto M = std::make_shared<MechanismTable>(archetype::second_price_table(
      {t.dhat[0].support, t.dhat[1].support}, t.val, 0.1));
  t.mhat = std::move(M);
  return t;
}

}  // namespace

TEST_CASE("additive valuation evaluates and respects its Lipschitz bound") {
  auto val = toy_valuation(0.5, 1.5);
  CHECK(val.spec.lipschitz == 2.0);
  CHECK(val.vA(pt2(0.4, 0.2), Bundle{}) == 0.0);
  CHECK(val.vA(pt2(0.4, 0.2), Bundle{0}) == Catch::Approx(0.2));
  CHECK(val.vA(pt2(0.4, 0.2), Bundle{0, 1}) == Catch::Approx(0.5));
  CHECK(val.latent_lipschitz() == Catch::Approx(2 * 1.0 * 2.0));

  archetype::Rng rng(3);
  CHECK_NOTHROW(archetype::check_valuation(val.spec, 2, rng));

  auto bad = val.spec;
  bad.lipschitz = 0.1;  // declared constant below the true one
  CHECK_THROWS_AS(archetype::check_valuation(bad, 2, rng),
                  archetype::PreconditionFailed);
}

TEST_CASE("table valuation looks up exact types") {
  archetype::ValuationSpec vs;
  vs.family = archetype::ValuationFamily::table;
  vs.table_types = {pt2(0.1, 0.1), pt2(0.9, 0.4)};
  vs.table_bundles = {Bundle{}, Bundle{0}};
  vs.table_values = archetype::Mat::Zero(2, 2);
  vs.table_values(0, 1) = 0.3;
  vs.table_values(1, 1) = 0.8;
  vs.lipschitz = 1.0;
  CHECK(vs.value(pt2(0.9, 0.4), Bundle{0}) == 0.8);
  CHECK(vs.value(pt2(0.1, 0.1), Bundle{}) == 0.0);
  CHECK_THROWS_AS(vs.value(pt2(0.5, 0.5), Bundle{0}),
                  archetype::PreconditionFailed);
}

TEST_CASE("second-price lift is IR and BIC exactly") {
  Toy t = make_toy();
  CHECK(t.mhat->bidders() == 2);
  CHECK(archetype::audit_ir(*t.mhat, t.dhat, t.val) == 0.0);
  const auto bic = archetype::audit_bic(*t.mhat, t.dhat, t.val);
  CHECK(bic.eta == 0.0);
  CHECK(bic.mu == 0.0);

  // hand check one profile: values are z0, reserve 0.1
  // bidder 0 at (0.95,0.05) vs bidder 1 at (0.05,...): winner 0 pays reserve
  const auto marg = t.mhat->expect({pt2(0.95, 0.05), pt2(0.05, 0.05)});
  REQUIRE(marg[0].size() == 1);
  CHECK(marg[0][0].bundle == Bundle{0});
  CHECK(marg[0][0].pay == Catch::Approx(0.1));
  CHECK(marg[1][0].bundle.empty());
  CHECK(marg[1][0].pay == 0.0);

  // both above reserve: winner pays the second value
  const auto m2 = t.mhat->expect({pt2(0.95, 0.05), pt2(0.95, 0.95)});
  CHECK(m2[0][0].bundle == Bundle{0});
  CHECK(m2[0][0].pay == Catch::Approx(0.95));
}

TEST_CASE("audit_ir reports a constructed violation exactly") {
  MechanismTable M;
  M.support = {{pt2(0.5, 0.5)}};
  M.alloc = {{{{Bundle{}, 1.0}}}};
  M.pay = {pt1(0.3)};
  M.validate();
  DiscreteDist D;
  D.support = {pt2(0.5, 0.5)};
  D.probs = {1.0};
  CHECK(archetype::audit_ir(M, {D}, toy_valuation()) == 0.3);

  // zero payments never violate IR
  M.pay = {pt1(0.0)};
  CHECK(archetype::audit_ir(M, {D}, toy_valuation()) == 0.0);
}

TEST_CASE("flat fee on one report produces that regret and mass") {
  // single bidder, two types; a fee of 0.1 is charged only when reporting
  // the first type; nothing is ever allocated
  MechanismTable M;
  M.support = {{pt2(0.2, 0.2), pt2(0.8, 0.8)}};
  M.alloc = {{{{Bundle{}, 1.0}}}, {{{Bundle{}, 1.0}}}};
  M.pay = {pt1(0.1), pt1(0.0)};
  M.validate();
  DiscreteDist D;
  D.support = M.support[0];
  D.probs = {0.6, 0.4};
  const auto bic = archetype::audit_bic(M, {D}, toy_valuation(), 1e-9);
  CHECK(bic.eta == Catch::Approx(0.1).margin(1e-15));
  CHECK(bic.mu == Catch::Approx(0.6).margin(1e-15));
}

TEST_CASE("revenue on explicit tables") {
  Toy t = make_toy();
  const double rev = archetype::revenue_exact(*t.mhat, t.dhat);
  CHECK(rev > 0.0);

  // deterministic single-profile distribution: revenue is that profile's sum
  std::vector<DiscreteDist> point(2);
  point[0].support = {pt2(0.95, 0.05)};
  point[0].probs = {1.0};
  point[1].support = {pt2(0.95, 0.95)};
  point[1].probs = {1.0};
  CHECK(archetype::revenue_exact(*t.mhat, point) == Catch::Approx(0.95));

  archetype::Rng rng(11);
  const auto mc = archetype::revenue_mc(*t.mhat, t.dhat, 4000, rng);
  CHECK(std::abs(mc.value - rev) <= 4.0 * mc.std_error + 1e-9);
}

TEST_CASE("conditional redraw stage matches the table on one-atom cells") {
  // grid-aligned supports, one atom per cell: the redraw is deterministic,
  // so the stage equals the base table with a clamped payment discount
  RoundingParams rp;
  rp.ell = pt2(0.2, 0.2);
  rp.delta = 0.2;
  std::vector<DiscreteDist> dhat(2);
  dhat[0].support = {pt2(0.2, 0.4), pt2(0.6, 0.8)};
  dhat[0].probs = {0.5, 0.5};
  dhat[1].support = {pt2(0.4, 0.2), pt2(0.8, 0.6)};
  dhat[1].probs = {0.3, 0.7};
  auto val = toy_valuation(0.5, 0.5);  // L = 1, discount = 2*1*1*0.2 = 0.4
  auto table = std::make_shared<MechanismTable>(archetype::second_price_table(
      {dhat[0].support, dhat[1].support}, val, 0.05));
  std::vector<PriorHandle> handles{PriorHandle(dhat[0]), PriorHandle(dhat[1])};
  auto m1 = archetype::build_m1(table, handles, rp, val.spec.lipschitz,
                                val.a_inf, val.k);

  const std::vector<Vec> bids{pt2(0.6, 0.8), pt2(0.4, 0.2)};
  const auto got = m1->expect(bids);
  const auto want = table->expect(bids);
  for (int i = 0; i < 2; ++i) {
    REQUIRE(got[i].size() == want[i].size());
    for (size_t a = 0; a < got[i].size(); ++a) {
      CHECK(got[i][a].bundle == want[i][a].bundle);
      CHECK(got[i][a].prob == Catch::Approx(want[i][a].prob).margin(1e-15));
      CHECK(got[i][a].pay ==
            Catch::Approx(std::max(0.0, want[i][a].pay - 0.4)).margin(1e-15));
    }
  }

  // a bid naming an empty cell propagates EmptyCube
  archetype::Rng rng(5);
  CHECK_THROWS_AS(m1->expect({pt2(0.2, 0.2), pt2(0.4, 0.2)}),
                  archetype::EmptyCube);
  CHECK_THROWS_AS(m1->run({pt2(0.2, 0.2), pt2(0.4, 0.2)}, rng),
                  archetype::EmptyCube);
}

TEST_CASE("stage chain on the toy instance") {
  Toy t = make_toy();
  const double L = t.val.spec.lipschitz;  // 2
  const double zeta = 0.04;
  const PNorm p = PNorm::lp(1);

  auto m1 = archetype::build_m1(t.mhat, t.handles, t.rp, L, t.val.a_inf, 2);
  auto m2 = archetype::build_m2(m1, t.handles, zeta, t.rp, p, L, t.val.a_inf, 2);
  auto mell = archetype::build_m_ell(m2, t.rp, L, t.val.a_inf, 2);

  SECTION("IR is exactly zero at every stage") {
    CHECK(archetype::audit_ir(*t.mhat, t.dhat, t.val) == 0.0);
    CHECK(archetype::audit_ir(*m1, t.dhat_rounded, t.val) == 0.0);
    CHECK(archetype::audit_ir(*m2, t.dhat_rounded, t.val) == 0.0);
    CHECK(archetype::audit_ir(*mell, t.dhat, t.val) == 0.0);
  }

  SECTION("BIC degradation of the redraw stage is bounded") {
    const double base_eta = archetype::audit_bic(*t.mhat, t.dhat, t.val).eta;
    const double eta1 =
        archetype::audit_bic(*m1, t.dhat_rounded, t.val).eta;
    CHECK(eta1 <= 2 * 2 * t.val.a_inf * L * t.rp.delta + base_eta + 1e-9);
  }

  SECTION("closest-point stage: identity on rounded support, exclusion afar") {
    auto* cp = dynamic_cast<const archetype::ClosestPointMechanism*>(m2.get());
    REQUIRE(cp != nullptr);
    // tau = zeta + delta * k = 0.04 + 0.4
    CHECK(cp->threshold() == Catch::Approx(0.44));

    const Vec zero_cell = archetype::round_point(pt2(0.05, 0.05), t.rp);
    const Vec mapped = cp->map_report(0, zero_cell);
    CHECK((mapped - zero_cell).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(cp->eligible(zero_cell, mapped));

    const Vec far = pt2(0.5, 0.5);
    const Vec far_mapped = cp->map_report(0, far);
    CHECK_FALSE(cp->eligible(far, far_mapped));

    // far report: that bidder excluded, the other unaffected
    const auto margs = m2->expect({far, archetype::round_point(pt2(0.95, 0.95), t.rp)});
    REQUIRE(margs[0].size() == 1);
    CHECK(margs[0][0].bundle.empty());
    CHECK(margs[0][0].pay == 0.0);
    double mass1 = 0.0;
    for (const auto& a : margs[1]) mass1 += a.prob;
    CHECK(mass1 == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("eta_mu_bounds and revenue_deficit_bound arithmetic") {
  // hand-summed values for zeta=0.04, delta=0.2, k=2, p=1, n=2, L=2, |A|=1,
  // rho=0.3:
  //   eta = 1.6 + 4.8 + 5.28 + 3.2 + 2.4 = 17.28, mu = 0.44
  const auto [eta, mu] = archetype::eta_mu_bounds(0.04, 0.2, 2, PNorm::lp(1), 2,
                                                  2.0, 1.0, 0.3);
  CHECK(eta == Catch::Approx(17.28).margin(1e-12));
  CHECK(mu == Catch::Approx(0.44).margin(1e-15));

  const double deficit = archetype::revenue_deficit_bound(
      0.04, 0.2, 2, PNorm::lp(1), 2, 2.0, 1.0, 0.3);
  CHECK(deficit == Catch::Approx(1.6 + 2.4 + 3.52 + 1.6 + 6.4).margin(1e-12));

  // all inputs zero
  const auto [e0, m0] =
      archetype::eta_mu_bounds(0.0, 0.0, 0, PNorm::lp(2), 0, 0.0, 0.0);
  CHECK(e0 == 0.0);
  CHECK(m0 == 0.0);
  CHECK(archetype::revenue_deficit_bound(0.0, 0.0, 0, PNorm::lp(2), 0, 0.0,
                                         0.0) == 0.0);

  // zeta = rho = 0 leaves only the rounding terms
  const auto [er, mr] =
      archetype::eta_mu_bounds(0.0, 0.2, 2, PNorm::lp(1), 2, 2.0, 1.0, 0.0);
  const double kal = 2 * 1.0 * 2.0;
  CHECK(er == Catch::Approx(2 * kal * 0.2 + 3 * 2 * (0.2 * 2) * 1.0 * 2.0 +
                            2 * 0.2 * 4 * 1.0 * 2.0 + 3 * kal * 0.2)
                  .margin(1e-12));
  CHECK(mr == Catch::Approx(0.4).margin(1e-15));

  // fixed rho: the deficit is linear in n
  const double d1 = archetype::revenue_deficit_bound(0.04, 0.2, 2, PNorm::lp(1),
                                                     1, 2.0, 1.0, 0.3);
  const double d2 = archetype::revenue_deficit_bound(0.04, 0.2, 2, PNorm::lp(1),
                                                     2, 2.0, 1.0, 0.3);
  CHECK(d2 == Catch::Approx(2.0 * d1).margin(1e-12));
}

TEST_CASE("rho_ell_exact") {
  Toy t = make_toy();
  CHECK(archetype::rho_ell_exact(t.dhat, t.dhat, t.rp) == 0.0);

  auto shifted = t.dhat;
  shifted[0].probs = {0.1, 0.3, 0.2, 0.4};  // same support, moved mass
  const double rho = archetype::rho_ell_exact(shifted, t.dhat, t.rp);
  CHECK(rho == Catch::Approx(0.3).margin(1e-12));  // tv of bidder 0 only
}

TEST_CASE("build_robust composes three stages and predicts slacks") {
  Toy t = make_toy();
  archetype::Rng rng(101);
  auto rm = archetype::build_robust(t.mhat, t.handles, 0.04, PNorm::lp(1),
                                    t.val.spec.lipschitz, t.val.a_inf, 2, 2,
                                    rng, 0.01);
  CHECK(rm.delta == Catch::Approx(0.2).margin(1e-15));
  for (int j = 0; j < 2; ++j) {
    CHECK(rm.ell[j] >= 0.0);
    CHECK(rm.ell[j] <= rm.delta);
  }
  REQUIRE(rm.stages.size() == 3);
  CHECK(rm.stages[0] == "round-down");
  CHECK(rm.stages[1] == "closest-point-filter");
  CHECK(rm.stages[2] == "conditional-draw");

  const auto [eta, mu] = archetype::eta_mu_bounds(
      0.04, rm.delta, 2, PNorm::lp(1), 2, t.val.spec.lipschitz, t.val.a_inf,
      rm.rho_ell_bound);
  CHECK(rm.predicted_eta == Catch::Approx(eta).margin(1e-12));
  CHECK(rm.predicted_mu == Catch::Approx(mu).margin(1e-15));

  CHECK_THROWS_AS(
      archetype::build_robust(t.mhat, t.handles, 0.04, PNorm::lp(1), 2.0, 1.0,
                              2, 2, rng, 0.05),
      archetype::PreconditionFailed);
}

TEST_CASE("run_auction is deterministic per report profile") {
  Toy t = make_toy();
  archetype::Rng rng(303);
  auto rm = archetype::build_robust(t.mhat, t.handles, 0.04, PNorm::lp(1),
                                    t.val.spec.lipschitz, t.val.a_inf, 2, 2,
                                    rng);
  const std::vector<Vec> reports{pt2(0.93, 0.07), pt2(0.07, 0.91)};
  const auto a = archetype::run_auction(rm, reports);
  const auto b = archetype::run_auction(rm, reports);
  REQUIRE(a.alloc.size() == 2);
  CHECK(a.alloc == b.alloc);
  CHECK((a.pay - b.pay).lpNorm<Eigen::Infinity>() == 0.0);
  for (int i = 0; i < 2; ++i) CHECK(a.pay[i] >= 0.0);

  // reports near the support stay included; a central report is excluded
  const auto far = archetype::run_auction(rm, {pt2(0.5, 0.5), pt2(0.93, 0.93)});
  CHECK(far.alloc[0].empty());
  CHECK(far.pay[0] == 0.0);
}

TEST_CASE("composed mechanism never touches the true distribution") {
  Toy t = make_toy();
  // a separate "true" distribution handle, held by the harness only
  PriorHandle fz_handle(corner_dist({0.3, 0.3, 0.2, 0.2}));

  archetype::Rng rng(404);
  auto rm = archetype::build_robust(t.mhat, t.handles, 0.04, PNorm::lp(1),
                                    t.val.spec.lipschitz, t.val.a_inf, 2, 2,
                                    rng);
  (void)archetype::run_auction(rm, {pt2(0.9, 0.1), pt2(0.1, 0.9)});
  (void)rm.mech().expect({pt2(0.05, 0.05), pt2(0.95, 0.95)});

  for (const auto& h : t.handles) CHECK(h.touches() > 0);
  CHECK(fz_handle.touches() == 0);
}

TEST_CASE("full pipeline toy meets its predicted bounds") {
  Toy t = make_toy();
  archetype::Rng rng(505);
  auto rm = archetype::build_robust(t.mhat, t.handles, 0.04, PNorm::lp(1),
                                    t.val.spec.lipschitz, t.val.a_inf, 2, 2,
                                    rng);

  CHECK(archetype::audit_ir(rm.mech(), t.dhat, t.val) == 0.0);

  const auto bic =
      archetype::audit_bic(rm.mech(), t.dhat, t.val, rm.predicted_eta);
  CHECK(bic.eta <= rm.predicted_eta);
  CHECK(bic.mu <= rm.predicted_mu);

  const double rev_hat = archetype::revenue_exact(*t.mhat, t.dhat);
  const double rev = archetype::revenue_exact(rm.mech(), t.dhat);
  const double rho = archetype::rho_ell_exact(t.dhat, t.dhat, rm.rp);
  const double deficit = archetype::revenue_deficit_bound(
      0.04, rm.delta, 2, PNorm::lp(1), 2, t.val.spec.lipschitz, t.val.a_inf,
      rho);
  CHECK(rev >= rev_hat - deficit - 1e-12);
}

TEST_CASE("random repaired tables audit clean") {
  std::vector<DiscreteDist> dists = {corner_dist({0.4, 0.3, 0.2, 0.1}),
                                     corner_dist({0.25, 0.25, 0.25, 0.25})};
  auto val = toy_valuation();
  archetype::Rng rng(909);
  const auto M = archetype::random_bic_table(dists, val, 2, rng);
  CHECK(M.audited_ir);
  CHECK(M.ir_slack == 0.0);
  CHECK(M.audited_bic);
  CHECK(M.bic_eta <= 1e-9);
  CHECK(archetype::revenue_exact(M, dists) >= 0.0);
}
