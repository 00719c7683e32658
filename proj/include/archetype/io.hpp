#pragma once

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "archetype/distribution.hpp"
#include "archetype/errors.hpp"
#include "archetype/matrix.hpp"
#include "archetype/mechanism.hpp"
#include "archetype/sketch.hpp"

namespace archetype {

using Json = nlohmann::ordered_json;

namespace detail {

// Shortest round-trip decimal rendering, used wherever bytes must be stable.
inline std::string fmt_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw ParseError("double rendering failed");
  return std::string(buf, ptr);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write " + path);
  out << content;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])))
      ++pos;
    if (pos != s.size()) throw ParseError("trailing characters in '" + s + "'");
    return v;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception&) {
    throw ParseError("not a number: '" + s + "'");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix files
// ---------------------------------------------------------------------------
// CSV: first line "d,k" (the two dimensions), then d lines of k
// comma-separated values. JSON: {"rows": d, "cols": k, "data": [row-major]}.

inline std::string matrix_to_csv(const Mat& A) {
  std::string out = std::to_string(A.rows()) + "," + std::to_string(A.cols()) + "\n";
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      if (j) out += ",";
      out += detail::fmt_double(A(i, j));
    }
    out += "\n";
  }
  return out;
}

inline Mat matrix_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("matrix csv: empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() != 2) throw ParseError("matrix csv: header must be d,k");
  const long rows = std::lround(detail::parse_double(header[0]));
  const long cols = std::lround(detail::parse_double(header[1]));
  if (rows < 1 || cols < 1) throw ParseError("matrix csv: bad dimensions");
  Mat A(rows, cols);
  for (long i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) throw ParseError("matrix csv: missing row");
    const auto cells = detail::split_csv_line(line);
    if (static_cast<long>(cells.size()) != cols) {
      throw ParseError("matrix csv: row width mismatch");
    }
    for (long j = 0; j < cols; ++j) A(i, j) = detail::parse_double(cells[j]);
  }
  return A;
}

inline Json matrix_to_json(const Mat& A) {
  Json j;
  j["rows"] = A.rows();
  j["cols"] = A.cols();
  Json data = Json::array();
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index c = 0; c < A.cols(); ++c) data.push_back(A(i, c));
  }
  j["data"] = std::move(data);
  return j;
}

inline Mat matrix_from_json(const Json& j) {
  const long rows = j.at("rows").get<long>();
  const long cols = j.at("cols").get<long>();
  const auto& data = j.at("data");
  if (rows < 1 || cols < 1 || static_cast<long>(data.size()) != rows * cols) {
    throw ParseError("matrix json: dimension mismatch");
  }
  Mat A(rows, cols);
  long idx = 0;
  for (long i = 0; i < rows; ++i) {
    for (long c = 0; c < cols; ++c) A(i, c) = data[idx++].get<double>();
  }
  return A;
}

// Loads either format, chosen by extension (.csv vs .json).
inline Mat load_matrix(const std::string& path) {
  const auto text = detail::read_file(path);
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
    return matrix_from_json(Json::parse(text));
  }
  return matrix_from_csv(text);
}

inline void save_matrix(const std::string& path, const Mat& A) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
    detail::write_file(path, matrix_to_json(A).dump(2) + "\n");
  } else {
    detail::write_file(path, matrix_to_csv(A));
  }
}

// ---------------------------------------------------------------------------
// Distribution files: {"k": ..., "support": [[...], ...], "probs": [...]}
// ---------------------------------------------------------------------------

inline Json dist_to_json(const DiscreteDist& F) {
  Json j;
  j["k"] = F.support.empty() ? 0 : F.support.front().size();
  Json sup = Json::array();
  for (const auto& x : F.support) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < x.size(); ++c) row.push_back(x[c]);
    sup.push_back(std::move(row));
  }
  j["support"] = std::move(sup);
  j["probs"] = F.probs;
  return j;
}

inline DiscreteDist dist_from_json(const Json& j) {
  DiscreteDist F;
  const long k = j.at("k").get<long>();
  for (const auto& row : j.at("support")) {
    if (static_cast<long>(row.size()) != k) {
      throw ParseError("distribution json: support row width mismatch");
    }
    Vec x(k);
    for (long c = 0; c < k; ++c) x[c] = row[c].get<double>();
    F.support.push_back(std::move(x));
  }
  F.probs = j.at("probs").get<std::vector<double>>();
  validate_dist(F);
  return F;
}

inline DiscreteDist load_dist(const std::string& path) {
  return dist_from_json(Json::parse(detail::read_file(path)));
}

inline void save_dist(const std::string& path, const DiscreteDist& F) {
  detail::write_file(path, dist_to_json(F).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Sample plans (reproducibility record)
// ---------------------------------------------------------------------------

inline Json plan_to_json(const SamplePlan& plan) {
  Json j;
  j["p"] = plan.p.str();
  j["n"] = plan.n;
  j["s"] = plan.s;
  j["seed"] = plan.seed;
  j["q_hash"] = plan.q_hash;
  j["indices"] = plan.indices;
  Json rescale = Json::array();
  for (Eigen::Index i = 0; i < plan.rescale.size(); ++i) {
    rescale.push_back(plan.rescale[i]);
  }
  j["rescale"] = std::move(rescale);
  return j;
}

inline void save_plan(const std::string& path, const SamplePlan& plan) {
  detail::write_file(path, plan_to_json(plan).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Mechanism tables: profiles keyed by per-bidder support indices
// ---------------------------------------------------------------------------

inline Json mechanism_to_json(const MechanismTable& M) {
  Json j;
  j["bidders"] = M.bidders();
  Json sup = Json::array();
  for (const auto& types : M.support) {
    Json rows = Json::array();
    for (const auto& t : types) {
      Json row = Json::array();
      for (Eigen::Index c = 0; c < t.size(); ++c) row.push_back(t[c]);
      rows.push_back(std::move(row));
    }
    sup.push_back(std::move(rows));
  }
  j["support"] = std::move(sup);

  const int n = M.bidders();
  std::vector<int> idx(n, 0);
  Json profiles = Json::array();
  for (long long pi = 0; pi < M.profile_count(); ++pi) {
    Json prof;
    prof["types"] = idx;
    Json alloc = Json::array();
    for (int i = 0; i < n; ++i) {
      Json atoms = Json::array();
      for (const auto& atom : M.alloc[pi][i]) {
        Json a;
        a["bundle"] = atom.bundle;
        a["prob"] = atom.prob;
        atoms.push_back(std::move(a));
      }
      alloc.push_back(std::move(atoms));
    }
    prof["alloc"] = std::move(alloc);
    Json pay = Json::array();
    for (int i = 0; i < n; ++i) pay.push_back(M.pay[pi][i]);
    prof["pay"] = std::move(pay);
    profiles.push_back(std::move(prof));
    int b = n - 1;
    while (b >= 0 && ++idx[b] == static_cast<int>(M.support[b].size())) {
      idx[b] = 0;
      --b;
    }
  }
  j["profiles"] = std::move(profiles);
  j["audited_ir"] = M.audited_ir;
  j["ir_slack"] = M.ir_slack;
  j["audited_bic"] = M.audited_bic;
  j["bic_eta"] = M.bic_eta;
  j["bic_mu"] = M.bic_mu;
  return j;
}

inline MechanismTable mechanism_from_json(const Json& j) {
  MechanismTable M;
  for (const auto& types : j.at("support")) {
    std::vector<Vec> rows;
    for (const auto& t : types) {
      Vec x(t.size());
      for (size_t c = 0; c < t.size(); ++c) x[c] = t[c].get<double>();
      rows.push_back(std::move(x));
    }
    M.support.push_back(std::move(rows));
  }
  const int n = M.bidders();
  const long long count = M.profile_count();
  M.alloc.assign(count, std::vector<std::vector<BundleAtom>>(n));
  M.pay.assign(count, Vec());
  if (static_cast<long long>(j.at("profiles").size()) != count) {
    throw ParseError("mechanism json: profile count mismatch");
  }
  for (const auto& prof : j.at("profiles")) {
    const auto types = prof.at("types").get<std::vector<int>>();
    if (static_cast<int>(types.size()) != n) {
      throw ParseError("mechanism json: types arity mismatch");
    }
    long long pi = 0;
    for (int i = 0; i < n; ++i) {
      if (types[i] < 0 || types[i] >= static_cast<int>(M.support[i].size())) {
        throw ParseError("mechanism json: type index out of range");
      }
      pi = pi * static_cast<long long>(M.support[i].size()) + types[i];
    }
    auto& alloc = M.alloc[pi];
    alloc.resize(n);
    const auto& palloc = prof.at("alloc");
    if (static_cast<int>(palloc.size()) != n) {
      throw ParseError("mechanism json: alloc arity mismatch");
    }
    for (int i = 0; i < n; ++i) {
      for (const auto& a : palloc[i]) {
        alloc[i].push_back(
            {a.at("bundle").get<Bundle>(), a.at("prob").get<double>()});
      }
    }
    const auto pay = prof.at("pay").get<std::vector<double>>();
    if (static_cast<int>(pay.size()) != n) {
      throw ParseError("mechanism json: pay arity mismatch");
    }
    M.pay[pi] = Vec(n);
    for (int i = 0; i < n; ++i) M.pay[pi][i] = pay[i];
  }
  if (j.contains("audited_ir")) M.audited_ir = j.at("audited_ir").get<bool>();
  if (j.contains("ir_slack")) M.ir_slack = j.at("ir_slack").get<double>();
  if (j.contains("audited_bic")) M.audited_bic = j.at("audited_bic").get<bool>();
  if (j.contains("bic_eta")) M.bic_eta = j.at("bic_eta").get<double>();
  if (j.contains("bic_mu")) M.bic_mu = j.at("bic_mu").get<double>();
  M.validate();
  return M;
}

inline MechanismTable load_mechanism(const std::string& path) {
  return mechanism_from_json(Json::parse(detail::read_file(path)));
}

inline void save_mechanism(const std::string& path, const MechanismTable& M) {
  detail::write_file(path, mechanism_to_json(M).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Audit reports
// ---------------------------------------------------------------------------

struct AuditReport {
  double ir_violation = 0.0;
  double eta = 0.0;
  double mu = 0.0;
  double revenue = 0.0;
  double bound_eta = 0.0;
  double bound_mu = 0.0;
  double bound_revenue_deficit = 0.0;
};

inline Json audit_to_json(const AuditReport& r) {
  Json j;
  j["ir_violation"] = r.ir_violation;
  j["eta"] = r.eta;
  j["mu"] = r.mu;
  j["revenue"] = r.revenue;
  Json b;
  b["eta"] = r.bound_eta;
  b["mu"] = r.bound_mu;
  b["revenue_deficit"] = r.bound_revenue_deficit;
  j["bounds"] = std::move(b);
  return j;
}

}  // namespace archetype
