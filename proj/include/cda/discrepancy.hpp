#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cda/model.hpp"
#include "cda/nn.hpp"
#include "cda/theory.hpp"

namespace cda {

// ---------------------------------------------------------------------------
// Paired-classifier discrepancy. The inner objective over per-sample scores
// J in (0,1) is
//     O(P, Q) = -mean_P log J - mean_Q log(1 - J),
// which the auxiliary classifier minimizes; its extremum is J = P/(P+Q).
// The reported divergence is D = 2 log 2 - O, equal to 2 JS(P||Q) at the
// inner optimum, hence nonnegative and zero iff the feature distributions
// coincide. The encoder reduces D (equivalently, raises O).
// ---------------------------------------------------------------------------

enum class Convention { cross_entropy, js_normalized };

struct DiscrepancyEstimate {
  double value = 0.0;
  Convention convention = Convention::js_normalized;
  int adapter_index = 0;
};

struct ContinuityConfig {
  double target_norm = 1.0;  // clamp level for the per-sample gradient norm
  double weight = 1.0;       // multiplier applied to the penalty in the loss
};

inline void validate(const ContinuityConfig& c) {
  require(c.target_norm > 0.0, "ContinuityConfig: target_norm must be positive");
  require(c.weight >= 0.0, "ContinuityConfig: weight must be nonnegative");
}

inline double clamp_score(double j) { return std::clamp(j, kScoreEps, 1.0 - kScoreEps); }

// The inner objective on precomputed scores.
inline double discrepancy_objective(std::span<const double> j_p, std::span<const double> j_q) {
  require(!j_p.empty() && !j_q.empty(), "discrepancy_objective: empty score list");
  for (double j : j_p)
    if (!(j > 0.0 && j < 1.0)) throw std::domain_error("discrepancy_objective: score outside (0,1)");
  for (double j : j_q)
    if (!(j > 0.0 && j < 1.0)) throw std::domain_error("discrepancy_objective: score outside (0,1)");
  double sp = 0.0, sq = 0.0;
  for (double j : j_p) sp += std::log(clamp_score(j));
  for (double j : j_q) sq += std::log(1.0 - clamp_score(j));
  return -sp / static_cast<double>(j_p.size()) - sq / static_cast<double>(j_q.size());
}

namespace detail {

// Per-row d(objective)/d(aux logits). p = softmax(aux logits), c = content
// class, J = p[c] clamped. The P-side integrand is -log J, the Q-side one is
// -log(1-J); scale carries the 1/n batch weight and the loss sign.
inline void obj_logit_grad_row(std::span<const double> p, int c, bool p_side, double scale,
                               std::span<double> out) {
  double j = clamp_score(p[static_cast<std::size_t>(c)]);
  if (p_side) {
    // d(-log J)/dz_k = p_k - [k == c]
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = scale * (p[k] - (static_cast<int>(k) == c ? 1.0 : 0.0));
  } else {
    // d(-log(1-J))/dz_k = (J/(1-J)) ([k == c] - p_k)
    double f = j / (1.0 - j);
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = scale * f * ((static_cast<int>(k) == c ? 1.0 : 0.0) - p[k]);
  }
}

}  // namespace detail

// Batch scores for an adapter: forwards both classifiers, composes the
// agreement score.
inline std::vector<double> adapter_scores(const AdapterPair& a, const Matrix& feats) {
  Matrix content_logits = mlp_forward(a.content, feats);
  Matrix aux_logits = mlp_forward(a.aux, feats);
  return agreement_score(content_logits, aux_logits);
}

inline DiscrepancyEstimate estimate_discrepancy(const AdapterPair& a, const Matrix& feats_p,
                                                const Matrix& feats_q,
                                                Convention conv = Convention::js_normalized) {
  std::vector<double> jp = adapter_scores(a, feats_p);
  std::vector<double> jq = adapter_scores(a, feats_q);
  double obj = discrepancy_objective(jp, jq);
  DiscrepancyEstimate e;
  e.convention = conv;
  e.adapter_index = a.index;
  e.value = conv == Convention::cross_entropy ? obj : 2.0 * std::log(2.0) - obj;
  return e;
}

struct ObjectiveGrads {
  double objective = 0.0;
  MlpGrads aux;        // valid when requested
  Matrix d_feats_p;    // d(objective)/d(features of P), valid when requested
  Matrix d_feats_q;
};

// Computes the inner objective and any requested gradients. Content
// classifier enters only through the argmax class, so it receives no
// gradient; classes may be supplied directly (fixed-class heads) or are
// derived from the content classifier.
inline ObjectiveGrads objective_with_grads(const Mlp& aux, const std::vector<int>& cls_p,
                                           const Matrix& feats_p, const std::vector<int>& cls_q,
                                           const Matrix& feats_q, bool want_aux,
                                           bool want_dp, bool want_dq) {
  require(feats_p.rows > 0 && feats_q.rows > 0, "objective_with_grads: empty batch");
  ObjectiveGrads out;
  if (want_aux) out.aux = grads_like(aux);
  const double np = feats_p.rows, nq = feats_q.rows;
  std::vector<double> probs(static_cast<std::size_t>(aux.output_dim()));
  auto run_side = [&](const Matrix& feats, const std::vector<int>& cls, bool p_side, Matrix* dfeats) {
    MlpCache cache;
    Matrix logits = mlp_forward(aux, feats, &cache);
    Matrix dlogits(logits.rows, logits.cols);
    double obj = 0.0;
    for (int i = 0; i < logits.rows; ++i) {
      softmax_row(logits.row(i), probs);
      int c = cls[static_cast<std::size_t>(i)];
      double j = clamp_score(probs[static_cast<std::size_t>(c)]);
      double n = p_side ? np : nq;
      obj += (p_side ? -std::log(j) : -std::log(1.0 - j)) / n;
      detail::obj_logit_grad_row(probs, c, p_side, 1.0 / n, dlogits.row(i));
    }
    bool need_back = want_aux || dfeats;
    if (need_back) mlp_backward(aux, cache, dlogits, want_aux ? &out.aux : nullptr, dfeats);
    return obj;
  };
  out.objective += run_side(feats_p, cls_p, true, want_dp ? &out.d_feats_p : nullptr);
  out.objective += run_side(feats_q, cls_q, false, want_dq ? &out.d_feats_q : nullptr);
  return out;
}

inline std::vector<int> content_classes(const AdapterPair& a, const Matrix& feats) {
  return predicted_class(mlp_forward(a.content, feats));
}

// One plain gradient step on the auxiliary classifier, descending the inner
// objective. The content classifier and any feature producers are untouched.
inline void aux_adversarial_step(AdapterPair& adapter, const FeatureBatch& feats_p,
                                 const FeatureBatch& feats_q, double step_size) {
  require(feats_p.features.rows > 0 && feats_q.features.rows > 0, "aux_adversarial_step: empty batch");
  ObjectiveGrads g = objective_with_grads(adapter.aux, content_classes(adapter, feats_p.features),
                                          feats_p.features, content_classes(adapter, feats_q.features),
                                          feats_q.features, true, false, false);
  for_each_param(adapter.aux, g.aux, [&](double& p, double& gr) { p -= step_size * gr; });
}

// Adam-driven flavor used inside the trainer.
inline double aux_adversarial_step(AdapterPair& adapter, Adam& opt, double lr,
                                   const FeatureBatch& feats_p, const FeatureBatch& feats_q) {
  require(feats_p.features.rows > 0 && feats_q.features.rows > 0, "aux_adversarial_step: empty batch");
  ObjectiveGrads g = objective_with_grads(adapter.aux, content_classes(adapter, feats_p.features),
                                          feats_p.features, content_classes(adapter, feats_q.features),
                                          feats_q.features, true, false, false);
  opt.step(adapter.aux, g.aux, lr);
  return g.objective;
}

// ---------------------------------------------------------------------------
// Continuity penalty. Per target feature row e, with the auxiliary classifier
// frozen, g(e) is the gradient of the target-side integrand -log(1 - J(e));
// the penalty is mean_rows (||g|| - target_norm)^2. Differentiating it with
// respect to the features needs Hessian-vector products H g, computed
// forward-over-reverse with dual numbers through the hand-written backward
// pass below.
// ---------------------------------------------------------------------------

struct Dual {
  double v = 0.0;
  double d = 0.0;
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator*(double a, Dual b) { return {a * b.v, a * b.d}; }
inline Dual operator+(Dual a, double b) { return {a.v + b, a.d}; }
inline Dual operator-(Dual a, double b) { return {a.v - b, a.d}; }
inline Dual operator-(double a, Dual b) { return {a - b.v, -b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }

inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.v; }
inline double smooth_exp(double x) { return std::exp(x); }
inline Dual smooth_exp(Dual x) {
  double e = std::exp(x.v);
  return {e, e * x.d};
}
inline double smooth_tanh(double x) { return std::tanh(x); }
inline Dual smooth_tanh(Dual x) {
  double t = std::tanh(x.v);
  return {t, (1.0 - t * t) * x.d};
}
inline double smooth_log(double x) { return std::log(x); }
inline Dual smooth_log(Dual x) { return {std::log(x.v), x.d / x.v}; }

namespace detail {

// Gradient of the target-side integrand with respect to the input row,
// generic over the scalar so a dual pass yields Hessian-vector products.
// Returns the integrand value.
template <class S>
S integrand_input_grad(const Mlp& aux, int cls, std::span<const S> e, std::span<S> g_out) {
  const std::size_t depth = aux.layers.size();
  std::vector<std::vector<S>> acts(depth + 1);
  acts[0].assign(e.begin(), e.end());
  // forward
  for (std::size_t li = 0; li < depth; ++li) {
    const Linear& l = aux.layers[li];
    auto& out = acts[li + 1];
    out.assign(static_cast<std::size_t>(l.w.rows), S{});
    for (int o = 0; o < l.w.rows; ++o) {
      S acc = S{} + l.b[static_cast<std::size_t>(o)];
      auto wr = l.w.row(o);
      for (int k = 0; k < l.w.cols; ++k) acc = acc + wr[static_cast<std::size_t>(k)] * acts[li][static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(o)] = acc;
    }
    if (li + 1 < depth)
      for (S& v : out) v = smooth_tanh(v);
  }
  // softmax over logits; the max shift is treated as a constant, which is
  // exact except on measure-zero argmax ties
  auto& z = acts[depth];
  double zmax = value_of(z[0]);
  for (const S& v : z) zmax = std::max(zmax, value_of(v));
  std::vector<S> p(z.size());
  S sum{};
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = smooth_exp(z[k] - zmax);
    sum = sum + p[k];
  }
  for (S& v : p) v = v / sum;
  S j = p[static_cast<std::size_t>(cls)];
  S one_m_j = 1.0 - j;
  if (value_of(one_m_j) < kScoreEps) {
    // clamped region: integrand constant, gradient identically zero
    for (S& v : g_out) v = S{};
    return S{} + (-std::log(kScoreEps));
  }
  // backward through the same chain in S
  // d(ell)/dz_k = (J/(1-J)) ([k==cls] - p_k)
  std::vector<S> delta(z.size());
  S f = j / one_m_j;
  for (std::size_t k = 0; k < z.size(); ++k) {
    S ind = S{} + (static_cast<int>(k) == cls ? 1.0 : 0.0);
    delta[k] = f * (ind - p[k]);
  }
  for (int li = static_cast<int>(depth) - 1; li >= 0; --li) {
    const Linear& l = aux.layers[static_cast<std::size_t>(li)];
    if (li + 1 < static_cast<int>(depth)) {
      // delta is w.r.t. post-tanh output of layer li
      auto& a = acts[static_cast<std::size_t>(li) + 1];
      for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = delta[k] * (1.0 - a[k] * a[k]);
    }
    std::vector<S> prev(static_cast<std::size_t>(l.w.cols), S{});
    for (int o = 0; o < l.w.rows; ++o) {
      auto wr = l.w.row(o);
      for (int k = 0; k < l.w.cols; ++k)
        prev[static_cast<std::size_t>(k)] = prev[static_cast<std::size_t>(k)] + wr[static_cast<std::size_t>(k)] * delta[static_cast<std::size_t>(o)];
    }
    delta = std::move(prev);
  }
  for (std::size_t k = 0; k < g_out.size(); ++k) g_out[k] = delta[k];
  return S{} - smooth_log(one_m_j);
}

}  // namespace detail

// Per-row gradients of the target-side integrand, holding all classifier
// parameters fixed. Rows of the result are g(e_k).
inline Matrix target_feature_grads(const Mlp& aux, const std::vector<int>& cls, const Matrix& feats) {
  Matrix g(feats.rows, feats.cols);
  for (int i = 0; i < feats.rows; ++i)
    detail::integrand_input_grad<double>(aux, cls[static_cast<std::size_t>(i)], feats.row(i), g.row(i));
  return g;
}

inline double smoothed_norm(std::span<const double> v) {
  double s = 1e-12;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// The penalty given precomputed per-row gradients.
inline double penalty_from_grads(const Matrix& grads, double target_norm) {
  require(grads.rows > 0, "penalty_from_grads: no rows");
  double acc = 0.0;
  for (int i = 0; i < grads.rows; ++i) {
    double d = smoothed_norm(grads.row(i)) - target_norm;
    acc += d * d;
  }
  return acc / static_cast<double>(grads.rows);
}

// Contract-level penalty: mean_k (||g_k|| - target_norm)^2 over target rows.
// Target features must be live (the trainer differentiates the penalty
// through them into the encoder).
inline double gradient_penalty(const AdapterPair& adapter, const FeatureBatch& source_feats,
                               const FeatureBatch& target_feats, const ContinuityConfig& config) {
  validate(config);
  require_contract(!target_feats.detached, "gradient_penalty: target features must not be detached");
  require(source_feats.features.cols == target_feats.features.cols,
          "gradient_penalty: feature dimension mismatch");
  std::vector<int> cls = content_classes(adapter, target_feats.features);
  Matrix g = target_feature_grads(adapter.aux, cls, target_feats.features);
  return penalty_from_grads(g, config.target_norm);
}

struct PenaltyWithCotangents {
  double value = 0.0;  // unweighted mean penalty
  Matrix d_feats;      // d(value)/d(target features), row per target row
};

// Penalty plus its gradient with respect to the target features. For each row
//   d/de (||g(e)|| - t)^2 = 2 (||g|| - t) / ||g|| * H g,
// with H g obtained from one dual pass seeded with tangent g.
inline PenaltyWithCotangents gradient_penalty_with_cotangents(const AdapterPair& adapter,
                                                              const Matrix& target_feats,
                                                              const std::vector<int>& cls,
                                                              const ContinuityConfig& config) {
  validate(config);
  const int n = target_feats.rows, d = target_feats.cols;
  PenaltyWithCotangents out;
  out.d_feats = Matrix(n, d);
  std::vector<double> g(static_cast<std::size_t>(d));
  std::vector<Dual> e_dual(static_cast<std::size_t>(d));
  std::vector<Dual> g_dual(static_cast<std::size_t>(d));
  for (int i = 0; i < n; ++i) {
    auto row = target_feats.row(i);
    detail::integrand_input_grad<double>(adapter.aux, cls[static_cast<std::size_t>(i)], row,
                                         std::span<double>(g));
    double norm = smoothed_norm(g);
    double diff = norm - config.target_norm;
    out.value += diff * diff;
    // dual pass with tangent g gives (H g)
    for (int k = 0; k < d; ++k) e_dual[static_cast<std::size_t>(k)] = {row[static_cast<std::size_t>(k)], g[static_cast<std::size_t>(k)]};
    detail::integrand_input_grad<Dual>(adapter.aux, cls[static_cast<std::size_t>(i)],
                                       std::span<const Dual>(e_dual), std::span<Dual>(g_dual));
    double scale = 2.0 * diff / norm / static_cast<double>(n);
    auto cot = out.d_feats.row(i);
    for (int k = 0; k < d; ++k) cot[static_cast<std::size_t>(k)] = scale * g_dual[static_cast<std::size_t>(k)].d;
  }
  out.value /= static_cast<double>(n);
  return out;
}

}  // namespace cda
