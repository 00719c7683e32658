#pragma once

#include <map>
#include <vector>

#include "archetype/errors.hpp"
#include "archetype/matrix.hpp"
#include "archetype/rng.hpp"

namespace archetype {

// Finitely supported distribution on [0,1]^k.
struct DiscreteDist {
  std::vector<Vec> support;
  std::vector<double> probs;

  int k() const {
    return support.empty() ? 0 : static_cast<int>(support.front().size());
  }
  size_t size() const { return support.size(); }
};

inline void validate_dist(const DiscreteDist& F) {
  if (F.support.empty() || F.support.size() != F.probs.size()) {
    throw ShapeMismatch("distribution: support/probs size mismatch");
  }
  const Eigen::Index k = F.support.front().size();
  double total = 0.0;
  for (size_t i = 0; i < F.support.size(); ++i) {
    if (F.support[i].size() != k) {
      throw ShapeMismatch("distribution: ragged support");
    }
    for (Eigen::Index j = 0; j < k; ++j) {
      const double c = F.support[i][j];
      if (!(c >= 0.0 && c <= 1.0)) {
        throw PreconditionFailed("distribution: support outside [0,1]^k");
      }
    }
    if (!(F.probs[i] > 0.0)) {
      throw BadProbabilities("distribution: probabilities must be positive");
    }
    total += F.probs[i];
    for (size_t j = 0; j < i; ++j) {
      if ((F.support[i] - F.support[j]).lpNorm<Eigen::Infinity>() == 0.0) {
        throw PreconditionFailed("distribution: duplicate support point");
      }
    }
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw BadProbabilities("distribution: probabilities must sum to 1");
  }
}

// Offset grid used by the rounding operator.
struct RoundingParams {
  Vec ell;
  double delta = 0.0;
};

inline void validate_rounding(const RoundingParams& rp) {
  if (!(rp.delta > 0.0)) throw PreconditionFailed("rounding: delta > 0");
  for (Eigen::Index j = 0; j < rp.ell.size(); ++j) {
    if (!(rp.ell[j] >= 0.0 && rp.ell[j] <= rp.delta)) {
      throw PreconditionFailed("rounding: need 0 <= ell_j <= delta");
    }
  }
}

namespace detail {

// Integer grid index of one coordinate: floor((x - ell)/delta), snapped up
// when floating-point division lands a hair below an integer so that points
// generated as m*delta + ell land back on index m. The canonical index for a
// clamped-to-zero coordinate is -1, whatever its raw index, so that all
// representations of the value 0 merge.
inline long long grid_index(double x, double ell, double delta) {
  const double y = (x - ell) / delta;
  double m = std::floor(y);
  if (m + 1.0 - y <= 1e-9 * std::max(1.0, std::abs(y))) m += 1.0;
  const long long mi = static_cast<long long>(m);
  const double value = m * delta + ell;
  return value > 0.0 ? mi : -1;
}

inline double grid_value(long long index, double ell, double delta) {
  if (index < 0) return 0.0;
  return std::min(static_cast<double>(index) * delta + ell, 1.0);
}

}  // namespace detail

// r^(ell,delta)(x): snap each coordinate down to its offset grid cell base,
// clamped at zero.
inline Vec round_point(const Vec& x, const RoundingParams& rp) {
  validate_rounding(rp);
  if (x.size() != rp.ell.size()) throw ShapeMismatch("round_point: k mismatch");
  Vec r(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    if (x[j] < 0.0) throw PreconditionFailed("round_point: x >= 0 required");
    r[j] = detail::grid_value(detail::grid_index(x[j], rp.ell[j], rp.delta),
                              rp.ell[j], rp.delta);
  }
  return r;
}

// Pushforward of F under round_point. Collisions are detected through exact
// integer grid indices, never through floating-point equality of the rounded
// coordinates, and the output support is ordered by those indices.
inline DiscreteDist round_dist(const DiscreteDist& F, const RoundingParams& rp) {
  validate_dist(F);
  validate_rounding(rp);
  if (F.support.front().size() != rp.ell.size()) {
    throw ShapeMismatch("round_dist: k mismatch");
  }
  std::map<std::vector<long long>, double> cells;
  for (size_t i = 0; i < F.support.size(); ++i) {
    std::vector<long long> key(static_cast<size_t>(rp.ell.size()));
    for (Eigen::Index j = 0; j < rp.ell.size(); ++j) {
      key[static_cast<size_t>(j)] =
          detail::grid_index(F.support[i][j], rp.ell[j], rp.delta);
    }
    cells[key] += F.probs[i];
  }
  DiscreteDist out;
  out.support.reserve(cells.size());
  out.probs.reserve(cells.size());
  for (const auto& [key, mass] : cells) {
    Vec point(rp.ell.size());
    for (Eigen::Index j = 0; j < rp.ell.size(); ++j) {
      point[j] = detail::grid_value(key[static_cast<size_t>(j)], rp.ell[j],
                                    rp.delta);
    }
    out.support.push_back(std::move(point));
    out.probs.push_back(mass);
  }
  return out;
}

// Sample from F conditioned on the half-open cube x_j <= t_j < x_j + w_j.
inline Vec conditional_sample(const DiscreteDist& F, const Vec& corner,
                              const Vec& widths, Rng& rng) {
  validate_dist(F);
  if (corner.size() != F.support.front().size() ||
      widths.size() != corner.size()) {
    throw ShapeMismatch("conditional_sample: k mismatch");
  }
  std::vector<size_t> in;
  double total = 0.0;
  for (size_t i = 0; i < F.support.size(); ++i) {
    bool inside = true;
    for (Eigen::Index j = 0; j < corner.size() && inside; ++j) {
      inside = F.support[i][j] >= corner[j] &&
               F.support[i][j] < corner[j] + widths[j];
    }
    if (inside) {
      in.push_back(i);
      total += F.probs[i];
    }
  }
  if (in.empty()) throw EmptyCube("conditional_sample: cube misses support");
  double u = rng.uniform01() * total;
  for (size_t idx : in) {
    u -= F.probs[idx];
    if (u <= 0.0) return F.support[idx];
  }
  return F.support[in.back()];
}

namespace detail {

inline size_t closest_index(const DiscreteDist& F, const Vec& x, PNorm p) {
  size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < F.support.size(); ++i) {
    const double d = lp_norm(F.support[i] - x, p);
    if (d < best_d) {
      best_d = d;
      best = i;  // strict improvement only: ties keep the lowest index
    }
  }
  return best;
}

}  // namespace detail

inline Vec closest_support_point(const DiscreteDist& F, const Vec& x, PNorm p) {
  validate_dist(F);
  if (x.size() != F.support.front().size()) {
    throw ShapeMismatch("closest_support_point: k mismatch");
  }
  return F.support[detail::closest_index(F, x, p)];
}

// Half l1 distance between the probability vectors on the union of supports.
// Points are matched by exact coordinates.
inline double tv_distance(const DiscreteDist& F, const DiscreteDist& G) {
  validate_dist(F);
  validate_dist(G);
  std::map<std::vector<double>, double> diff;
  for (size_t i = 0; i < F.support.size(); ++i) {
    std::vector<double> key(F.support[i].data(),
                            F.support[i].data() + F.support[i].size());
    diff[key] += F.probs[i];
  }
  for (size_t i = 0; i < G.support.size(); ++i) {
    std::vector<double> key(G.support[i].data(),
                            G.support[i].data() + G.support[i].size());
    diff[key] -= G.probs[i];
  }
  double total = 0.0;
  for (const auto& [key, d] : diff) total += std::abs(d);
  return 0.5 * total;
}

namespace detail {

// Max-flow feasibility core of the Strassen characterization: the largest
// coupled mass restricted to pairs with ||x - y||_p <= eps, via Edmonds-Karp
// on the bipartite transport network.
inline double max_admissible_mass(const std::vector<double>& pf,
                                  const std::vector<double>& qg,
                                  const std::vector<std::vector<double>>& dist,
                                  double eps) {
  const size_t nf = pf.size(), ng = qg.size();
  const size_t V = nf + ng + 2;
  const size_t s = nf + ng, t = nf + ng + 1;
  // capacity matrix; admissible pair arcs get effectively infinite capacity
  std::vector<std::vector<double>> cap(V, std::vector<double>(V, 0.0));
  for (size_t i = 0; i < nf; ++i) cap[s][i] = pf[i];
  for (size_t j = 0; j < ng; ++j) cap[nf + j][t] = qg[j];
  for (size_t i = 0; i < nf; ++i) {
    for (size_t j = 0; j < ng; ++j) {
      if (dist[i][j] <= eps) cap[i][nf + j] = 2.0;
    }
  }
  double flow = 0.0;
  while (true) {
    std::vector<int> prev(V, -1);
    prev[s] = static_cast<int>(s);
    std::vector<size_t> queue{s};
    for (size_t qi = 0; qi < queue.size() && prev[t] < 0; ++qi) {
      const size_t u = queue[qi];
      for (size_t v = 0; v < V; ++v) {
        if (prev[v] < 0 && cap[u][v] > 1e-15) {
          prev[v] = static_cast<int>(u);
          queue.push_back(v);
        }
      }
    }
    if (prev[t] < 0) break;
    double push = std::numeric_limits<double>::infinity();
    for (size_t v = t; v != s; v = static_cast<size_t>(prev[v])) {
      push = std::min(push, cap[static_cast<size_t>(prev[v])][v]);
    }
    for (size_t v = t; v != s; v = static_cast<size_t>(prev[v])) {
      const size_t u = static_cast<size_t>(prev[v]);
      cap[u][v] -= push;
      cap[v][u] += push;
    }
    flow += push;
  }
  return flow;
}

inline bool dist_less(const DiscreteDist& F, const DiscreteDist& G) {
  if (F.support.size() != G.support.size()) {
    return F.support.size() < G.support.size();
  }
  for (size_t i = 0; i < F.support.size(); ++i) {
    for (Eigen::Index j = 0; j < F.support[i].size(); ++j) {
      if (F.support[i][j] != G.support[i][j]) {
        return F.support[i][j] < G.support[i][j];
      }
    }
    if (F.probs[i] != G.probs[i]) return F.probs[i] < G.probs[i];
  }
  return false;
}

}  // namespace detail

// Smallest eps (within tol) admitting a coupling gamma with
// gamma{ ||x-y||_p > eps } <= eps. Feasibility at fixed eps is a transport
// max-flow: eps works iff the admissible coupled mass reaches 1 - eps.
// Arguments are ordered canonically first, so the result is exactly symmetric.
inline double prokhorov_distance(const DiscreteDist& F, const DiscreteDist& G,
                                 PNorm p, double tol = 1e-4) {
  validate_dist(F);
  validate_dist(G);
  if (F.support.front().size() != G.support.front().size()) {
    throw ShapeMismatch("prokhorov_distance: k mismatch");
  }
  if (F.support.size() * G.support.size() > 10000) {
    throw TooLarge("prokhorov_distance: support product exceeds 10^4");
  }
  const DiscreteDist& a = detail::dist_less(G, F) ? G : F;
  const DiscreteDist& b = detail::dist_less(G, F) ? F : G;

  std::vector<std::vector<double>> dist(a.support.size(),
                                        std::vector<double>(b.support.size()));
  for (size_t i = 0; i < a.support.size(); ++i) {
    for (size_t j = 0; j < b.support.size(); ++j) {
      dist[i][j] = lp_norm(a.support[i] - b.support[j], p);
    }
  }
  auto feasible = [&](double eps) {
    return detail::max_admissible_mass(a.probs, b.probs, dist, eps) >=
           1.0 - eps - 1e-12;
  };
  if (feasible(0.0)) return 0.0;
  double lo = 0.0, hi = 1.0;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    (feasible(mid) ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace archetype
