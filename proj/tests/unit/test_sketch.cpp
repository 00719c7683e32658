#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "archetype/rng.hpp"
#include "archetype/sketch.hpp"

using archetype::Mat;
using archetype::PNorm;
using archetype::Vec;

namespace {

Vec uniform_q(int n) { return Vec::Constant(n, 1.0 / n); }

}  // namespace

TEST_CASE("sample plans are deterministic in their inputs") {
  Vec q(4);
  q << 0.1, 0.2, 0.3, 0.4;
  const auto a = archetype::build_sample_plan(4, 100, PNorm::lp(1), q, 99);
  const auto b = archetype::build_sample_plan(4, 100, PNorm::lp(1), q, 99);
  CHECK(a.indices == b.indices);
  CHECK((a.rescale - b.rescale).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.q_hash == b.q_hash);

  const auto c = archetype::build_sample_plan(4, 100, PNorm::lp(1), q, 100);
  CHECK(a.indices != c.indices);
}

TEST_CASE("sample plan rescale factors follow (s q)^(-1/p)") {
  Vec q(3);
  q << 0.2, 0.5, 0.3;
  const auto plan = archetype::build_sample_plan(3, 50, PNorm::lp(3), q, 7);
  for (int t = 0; t < plan.s; ++t) {
    const int j = plan.indices[static_cast<size_t>(t)];
    CHECK(plan.rescale[t] ==
          Catch::Approx(std::pow(50.0 * q[j], -1.0 / 3.0)).margin(1e-15));
  }
  const auto inf_plan = archetype::build_sample_plan(3, 50, PNorm::linf(), q, 7);
  for (int t = 0; t < inf_plan.s; ++t) CHECK(inf_plan.rescale[t] == 1.0);
}

TEST_CASE("sample plan draws match the target marginals") {
  Vec q(5);
  q << 0.05, 0.1, 0.15, 0.3, 0.4;
  const int s = 200000;
  const auto plan = archetype::build_sample_plan(5, s, PNorm::lp(2), q, 1234);
  Vec freq = Vec::Zero(5);
  for (int idx : plan.indices) freq[idx] += 1.0 / s;
  for (int j = 0; j < 5; ++j) {
    const double sigma = std::sqrt(q[j] * (1 - q[j]) / s);
    CHECK(std::abs(freq[j] - q[j]) < 5.0 * sigma);
  }
}

TEST_CASE("sketched l1 norm is unbiased") {
  archetype::Rng rng(77);
  const int n = 20;
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  Vec q(n);
  for (int i = 0; i < n; ++i) q[i] = std::abs(v[i]) + 0.05;
  q /= q.sum();

  const double exact = v.lpNorm<1>();
  const int trials = 400, s = 200;
  double mean = 0.0, m2 = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto plan = archetype::build_sample_plan(
        n, s, PNorm::lp(1), q, 1000 + static_cast<std::uint64_t>(t));
    const double est = archetype::apply_plan(plan, v).lpNorm<1>();
    const double delta = est - mean;
    mean += delta / (t + 1);
    m2 += delta * (est - mean);
  }
  const double se = std::sqrt(m2 / (trials - 1) / trials);
  CHECK(std::abs(mean - exact) < 4.0 * se + 1e-9);
}

TEST_CASE("apply_plan commutes with matrix-vector products") {
  archetype::Rng rng(31);
  Mat A(12, 3);
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 3; ++j) A(i, j) = rng.normal();
  }
  Vec x(3);
  x << 1.0, -2.0, 0.5;
  const auto plan =
      archetype::build_sample_plan(12, 30, PNorm::lp(2), uniform_q(12), 8);
  const Vec lhs = archetype::apply_plan(plan, A) * x;
  const Vec rhs = archetype::apply_plan(plan, Vec(A * x));
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sample plan input validation") {
  Vec q(3);
  q << 0.5, 0.25, 0.25;
  CHECK_THROWS_AS(archetype::build_sample_plan(4, 10, PNorm::lp(1), q, 0),
                  archetype::ShapeMismatch);
  CHECK_THROWS_AS(archetype::build_sample_plan(3, 0, PNorm::lp(1), q, 0),
                  archetype::ShapeMismatch);
  Vec zeroed = q;
  zeroed[1] = 0.0;
  CHECK_THROWS_AS(archetype::build_sample_plan(3, 10, PNorm::lp(1), zeroed, 0),
                  archetype::BadProbabilities);
  Vec off = q;
  off[0] = 0.4;
  CHECK_THROWS_AS(archetype::build_sample_plan(3, 10, PNorm::lp(1), off, 0),
                  archetype::BadProbabilities);

  const auto plan = archetype::build_sample_plan(3, 10, PNorm::lp(1), q, 0);
  const Mat wrong = Mat::Zero(4, 2);
  CHECK_THROWS_AS(archetype::apply_plan(plan, wrong), archetype::ShapeMismatch);
}
