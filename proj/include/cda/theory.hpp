#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cda/common.hpp"

namespace cda {

// Score clamp shared with the discrepancy estimator.
constexpr double kScoreEps = 1e-7;

// Finite probability vector. The numerical counterpart of the feature
// densities that appear in the divergence analysis.
struct DiscreteDist {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
};

inline DiscreteDist make_dist(std::vector<double> probs) {
  double sum = 0.0;
  for (double p : probs) {
    require(p >= 0.0, "DiscreteDist: negative mass");
    sum += p;
  }
  require(std::abs(sum - 1.0) <= 1e-12, "DiscreteDist: mass must sum to 1");
  return DiscreteDist{std::move(probs)};
}

namespace detail {
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }
}

// Jensen-Shannon divergence in nats; symmetric, in [0, log 2].
inline double js_divergence(const DiscreteDist& p, const DiscreteDist& q) {
  require(p.size() == q.size(), "js_divergence: support mismatch");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double m = 0.5 * (p.probs[i] + q.probs[i]);
    js += 0.5 * detail::xlogx(p.probs[i]) + 0.5 * detail::xlogx(q.probs[i]) - detail::xlogx(m);
  }
  return js;
}

// The per-bin score at which the inner cross-entropy objective is extremal:
// J*_b = P_b / (P_b + Q_b).
inline std::vector<double> optimal_aux(const DiscreteDist& p, const DiscreteDist& q) {
  require(p.size() == q.size(), "optimal_aux: support mismatch");
  std::vector<double> j(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    double denom = p.probs[i] + q.probs[i];
    require(denom > 0.0, "optimal_aux: bin with zero mass on both sides");
    j[i] = p.probs[i] / denom;
  }
  return j;
}

struct BruteforceResult {
  std::vector<double> j_grid;  // per-bin extremizer found by exhaustive search
  double value = 0.0;          // total objective at the extremizers
};

// Independent verification of the claimed extremum: the objective
//   sum_b [ -P_b log J_b - Q_b log(1 - J_b) ]
// separates over bins, so a per-bin grid scan over J in [eps, 1-eps] is
// exhaustive up to grid spacing.
inline BruteforceResult bruteforce_sup(const DiscreteDist& p, const DiscreteDist& q,
                                       int grid_resolution) {
  require(p.size() == q.size(), "bruteforce_sup: support mismatch");
  require(grid_resolution >= 100, "bruteforce_sup: grid_resolution must be >= 100");
  const int n = grid_resolution;
  std::vector<double> grid(static_cast<std::size_t>(n));
  std::vector<double> log_j(static_cast<std::size_t>(n));
  std::vector<double> log_1mj(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    double j = kScoreEps + (1.0 - 2.0 * kScoreEps) * static_cast<double>(k) / static_cast<double>(n - 1);
    grid[static_cast<std::size_t>(k)] = j;
    log_j[static_cast<std::size_t>(k)] = std::log(j);
    log_1mj[static_cast<std::size_t>(k)] = std::log(1.0 - j);
  }
  BruteforceResult out;
  out.j_grid.resize(p.size());
  for (std::size_t b = 0; b < p.size(); ++b) {
    double pb = p.probs[b];
    double qb = q.probs[b];
    if (pb == 0.0 && qb == 0.0) {
      out.j_grid[b] = 0.5;  // objective is flat; any score is extremal
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    double best_j = 0.5;
    for (int k = 0; k < n; ++k) {
      double v = -pb * log_j[static_cast<std::size_t>(k)] - qb * log_1mj[static_cast<std::size_t>(k)];
      if (v < best) {
        best = v;
        best_j = grid[static_cast<std::size_t>(k)];
      }
    }
    out.j_grid[b] = best_j;
    out.value += best;
  }
  return out;
}

struct IdentityReport {
  bool pass = false;
  double residual = 0.0;
  double lhs = 0.0;  // 2 log 2 - objective at the optimal score
  double rhs = 0.0;  // 2 JS(P || Q)
};

// Checks, by independent summation of each side, that at J* = P/(P+Q)
//   2 log 2 - [ -sum P log J* - sum Q log(1-J*) ]  ==  2 JS(P || Q).
inline IdentityReport verify_js_identity(const DiscreteDist& p, const DiscreteDist& q, double tol) {
  require(tol > 0.0, "verify_js_identity: tol must be positive");
  std::vector<double> j = optimal_aux(p, q);
  double objective = 0.0;
  for (std::size_t b = 0; b < p.size(); ++b) {
    if (p.probs[b] > 0.0) objective -= p.probs[b] * std::log(j[b]);
    if (q.probs[b] > 0.0) objective -= q.probs[b] * std::log(1.0 - j[b]);
  }
  IdentityReport r;
  r.lhs = 2.0 * std::log(2.0) - objective;
  r.rhs = 2.0 * js_divergence(p, q);
  r.residual = std::abs(r.lhs - r.rhs);
  r.pass = r.residual <= tol;
  return r;
}

}  // namespace cda
