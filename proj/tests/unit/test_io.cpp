#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <string>

#include "archetype/io.hpp"
#include "archetype/rng.hpp"

using archetype::DiscreteDist;
using archetype::Json;
using archetype::Mat;
using archetype::Vec;

namespace {

Mat random_matrix(int d, int k, std::uint64_t seed) {
  archetype::Rng rng(seed);
  Mat A(d, k);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < k; ++j) A(i, j) = rng.normal() * std::pow(10.0, (i + j) % 7 - 3);
  return A;
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("matrix csv round-trip is bit exact") {
  const Mat A = random_matrix(17, 4, 99);
  const std::string text = archetype::matrix_to_csv(A);
  const Mat B = archetype::matrix_from_csv(text);
  REQUIRE(B.rows() == A.rows());
  REQUIRE(B.cols() == A.cols());
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) CHECK(B(i, j) == A(i, j));

  // header carries the dimensions
  CHECK(text.substr(0, text.find('\n')) == "17,4");
  // rendering is deterministic
  CHECK(archetype::matrix_to_csv(A) == text);
}

TEST_CASE("matrix csv rejects malformed input") {
  CHECK_THROWS_AS(archetype::matrix_from_csv(""), archetype::ParseError);
  CHECK_THROWS_AS(archetype::matrix_from_csv("2\n1\n2\n"), archetype::ParseError);
  CHECK_THROWS_AS(archetype::matrix_from_csv("2,2\n1,2\n3\n"),
                  archetype::ParseError);
  CHECK_THROWS_AS(archetype::matrix_from_csv("1,2\n1,x\n"),
                  archetype::ParseError);
  CHECK_THROWS_AS(archetype::matrix_from_csv("1,1\n"), archetype::ParseError);
}

TEST_CASE("matrix json round-trip is bit exact") {
  const Mat A = random_matrix(6, 5, 7);
  const Json j = archetype::matrix_to_json(A);
  CHECK(j.at("rows") == 6);
  CHECK(j.at("cols") == 5);
  const Mat B = archetype::matrix_from_json(j);
  for (int i = 0; i < A.rows(); ++i)
    for (int c = 0; c < A.cols(); ++c) CHECK(B(i, c) == A(i, c));
  CHECK(j.dump() == archetype::matrix_to_json(A).dump());
}

TEST_CASE("matrix file io picks the format from the extension") {
  const Mat A = random_matrix(5, 3, 31);
  TempFile csv("io_test_matrix.csv");
  TempFile json("io_test_matrix.json");
  archetype::save_matrix(csv.path, A);
  archetype::save_matrix(json.path, A);
  const Mat B = archetype::load_matrix(csv.path);
  const Mat C = archetype::load_matrix(json.path);
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) {
      CHECK(B(i, j) == A(i, j));
      CHECK(C(i, j) == A(i, j));
    }
}

TEST_CASE("distribution json round-trip") {
  DiscreteDist F;
  Vec a(2), b(2);
  a << 0.25, 0.75;
  b << 0.5, 0.125;
  F.support = {a, b};
  F.probs = {0.375, 0.625};
  const Json j = archetype::dist_to_json(F);
  CHECK(j.at("k") == 2);
  const DiscreteDist G = archetype::dist_from_json(j);
  REQUIRE(G.support.size() == 2);
  CHECK(G.support[0][0] == 0.25);
  CHECK(G.support[1][1] == 0.125);
  CHECK(G.probs == F.probs);

  Json bad = j;
  bad["probs"] = {0.5, 0.1};
  CHECK_THROWS_AS(archetype::dist_from_json(bad), archetype::BadProbabilities);
}

TEST_CASE("sample plan json carries the reproducibility fields") {
  archetype::Vec q = archetype::Vec::Constant(10, 0.1);
  const auto plan = archetype::build_sample_plan(10, 6, archetype::PNorm::lp(2),
                                                 q, 4242);
  const Json j = archetype::plan_to_json(plan);
  CHECK(j.at("p") == "2");
  CHECK(j.at("n") == 10);
  CHECK(j.at("s") == 6);
  CHECK(j.at("seed") == 4242);
  CHECK(j.at("q_hash").get<std::uint64_t>() == plan.q_hash);
  CHECK(j.at("indices").size() == 6);
  CHECK(j.at("rescale").size() == 6);
}

TEST_CASE("mechanism table json round-trip preserves behavior") {
  Vec lo(2), hi(2);
  lo << 0.2, 0.3;
  hi << 0.9, 0.8;
  std::vector<std::vector<Vec>> supports = {{lo, hi}, {lo, hi}};
  Vec w(2);
  w << 0.6, 0.4;
  const auto val = archetype::make_latent_valuation(
      Mat::Identity(2, 2), archetype::additive_valuation(w));
  const auto M = archetype::second_price_table(supports, val, 0.25);

  const Json j = archetype::mechanism_to_json(M);
  CHECK(j.at("bidders") == 2);
  CHECK(j.at("profiles").size() == 4);
  const auto M2 = archetype::mechanism_from_json(j);

  const std::vector<Vec> bids{hi, lo};
  const auto a = M.expect(bids);
  const auto b = M2.expect(bids);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size() == b[i].size());
    for (size_t t = 0; t < a[i].size(); ++t) {
      CHECK(a[i][t].bundle == b[i][t].bundle);
      CHECK(a[i][t].pay == b[i][t].pay);
      CHECK(a[i][t].prob == b[i][t].prob);
    }
  }
  CHECK(archetype::mechanism_to_json(M2).dump() == j.dump());
}

TEST_CASE("audit report json shape") {
  archetype::AuditReport r;
  r.ir_violation = 0.0;
  r.eta = 0.5;
  r.mu = 0.25;
  r.revenue = 1.5;
  r.bound_eta = 2.0;
  r.bound_mu = 0.44;
  r.bound_revenue_deficit = 3.0;
  const Json j = archetype::audit_to_json(r);
  CHECK(j.at("ir_violation") == 0.0);
  CHECK(j.at("eta") == 0.5);
  CHECK(j.at("mu") == 0.25);
  CHECK(j.at("revenue") == 1.5);
  CHECK(j.at("bounds").at("eta") == 2.0);
  CHECK(j.at("bounds").at("mu") == 0.44);
  CHECK(j.at("bounds").at("revenue_deficit") == 3.0);
}
