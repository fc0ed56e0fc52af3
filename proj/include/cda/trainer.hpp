#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cda/discrepancy.hpp"
#include "cda/domain.hpp"
#include "cda/evalkit.hpp"
#include "cda/model.hpp"
#include "cda/queues.hpp"

namespace cda {

// ---------------------------------------------------------------------------
// Variants. OURS is the full method; SO is the source-only baseline; V1-V7
// are the ablations (discriminator discrepancy, merged steps with different
// freezing, no shrinkage, no queues, no continuity penalty).
// ---------------------------------------------------------------------------

enum class Variant { OURS, SO, V1, V2, V3, V4, V5, V6, V7 };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::OURS: return "OURS";
    case Variant::SO: return "SO";
    case Variant::V1: return "V1";
    case Variant::V2: return "V2";
    case Variant::V3: return "V3";
    case Variant::V4: return "V4";
    case Variant::V5: return "V5";
    case Variant::V6: return "V6";
    case Variant::V7: return "V7";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::OURS, Variant::SO, Variant::V1, Variant::V2, Variant::V3, Variant::V4,
                    Variant::V5, Variant::V6, Variant::V7})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown variant: " + s);
}

struct ModelConfig {
  std::vector<int> encoder_hidden{64, 64};
  int feature_dim = 16;
  int classifier_hidden = 64;
  int conv_width = 32;  // channel width of the raster encoder
};

struct TrainConfig {
  Variant variant = Variant::OURS;
  long steps = 2000;
  int batch_size = 64;
  double learning_rate = 1e-4;
  int inner_aux_steps = 1;
  int queue_capacity = 512;
  ContinuityConfig continuity{1.0, 1.0};
  int pull_steps = 1;    // alternation ratio: pull_steps pulls then
  int shrink_steps = 1;  // shrink_steps shrinkages per cycle
  std::uint64_t seed = 0;
  int max_probe_domains_per_step = 4;
  ModelConfig model;
};

inline void validate(const TrainConfig& c) {
  require(c.steps >= 1, "TrainConfig: steps must be >= 1");
  require(c.batch_size >= 2, "TrainConfig: batch_size must be >= 2");
  require(c.learning_rate > 0.0, "TrainConfig: learning_rate must be positive");
  require(c.inner_aux_steps >= 1, "TrainConfig: inner_aux_steps must be >= 1");
  require(c.queue_capacity >= 1, "TrainConfig: queue_capacity must be >= 1");
  require(c.pull_steps >= 1 && c.shrink_steps >= 1, "TrainConfig: alternation ratio parts must be >= 1");
  require(c.max_probe_domains_per_step >= 1, "TrainConfig: max_probe_domains_per_step must be >= 1");
  validate(c.continuity);
}

enum class StepKind { pull, shrink, merged };

inline const char* to_string(StepKind k) {
  switch (k) {
    case StepKind::pull: return "pull";
    case StepKind::shrink: return "shrink";
    case StepKind::merged: return "merged";
  }
  return "?";
}

// The four scalar losses of one training step.
struct LossBundle {
  double l_p = 0.0;
  double l_gp = 0.0;
  double l_s = 0.0;
  double l_ce = 0.0;
  StepKind step_kind = StepKind::pull;
};

struct TrainLogRecord {
  long step = 0;
  LossBundle losses;
  double clf_l2 = 0.0;        // mean L2 distance of the two content softmax outputs
  int queue_occupancy = 0;    // total rows held across both queues
  double wall_seconds = 0.0;  // cumulative; diagnostic only, never serialized to losses.csv
};

struct TrainLog {
  std::vector<TrainLogRecord> records;
};

// ---------------------------------------------------------------------------
// Supervised loss
// ---------------------------------------------------------------------------

// Mean negative log-likelihood under softmax.
inline double cross_entropy_loss(const Matrix& logits, const std::vector<int>& labels) {
  require(logits.rows == static_cast<int>(labels.size()) && logits.rows > 0,
          "cross_entropy_loss: label count mismatch");
  std::vector<double> p(static_cast<std::size_t>(logits.cols));
  double loss = 0.0;
  for (int i = 0; i < logits.rows; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < logits.cols, "cross_entropy_loss: label out of range");
    softmax_row(logits.row(i), p);
    loss -= std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
  }
  return loss / static_cast<double>(logits.rows);
}

struct CeGrads {
  double loss = 0.0;
  MlpGrads classifier;
  Matrix d_feats;
};

inline CeGrads cross_entropy_with_grads(const Mlp& classifier, const Matrix& feats,
                                        const std::vector<int>& labels, bool want_classifier,
                                        bool want_dfeats) {
  CeGrads out;
  MlpCache cache;
  Matrix logits = mlp_forward(classifier, feats, &cache);
  out.loss = cross_entropy_loss(logits, labels);
  Matrix dlogits(logits.rows, logits.cols);
  std::vector<double> p(static_cast<std::size_t>(logits.cols));
  double n = logits.rows;
  for (int i = 0; i < logits.rows; ++i) {
    softmax_row(logits.row(i), p);
    auto dr = dlogits.row(i);
    int y = labels[static_cast<std::size_t>(i)];
    for (int k = 0; k < logits.cols; ++k)
      dr[static_cast<std::size_t>(k)] = (p[static_cast<std::size_t>(k)] - (k == y ? 1.0 : 0.0)) / n;
  }
  if (want_classifier) out.classifier = grads_like(classifier);
  mlp_backward(classifier, cache, dlogits, want_classifier ? &out.classifier : nullptr,
               want_dfeats ? &out.d_feats : nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer state
// ---------------------------------------------------------------------------

struct TrainerState {
  TrainConfig cfg;
  Model model;
  std::vector<Mlp> discriminators;  // V1: {d12, d1t, d2t}
  FeatureQueue q1, q2;

  Adam opt_encoder, opt_f1, opt_f2, opt_aux1, opt_aux2;
  std::vector<Adam> opt_disc;
  Rng data_rng{0};
  Rng diag_rng{0};
  long step = 0;
};

inline TrainerState make_trainer_state(const TrainConfig& cfg, int input_dim, int num_classes) {
  validate(cfg);
  TrainerState st;
  st.cfg = cfg;
  Rng init_rng(derive_seed(cfg.seed, "init"));
  const ModelConfig& mc = cfg.model;
  if (input_dim == 2) {
    st.model.encoder = make_mlp_encoder(2, mc.encoder_hidden, mc.feature_dim, init_rng);
  } else {
    int res = static_cast<int>(std::lround(std::sqrt(static_cast<double>(input_dim))));
    require(res * res == input_dim, "make_trainer_state: raster input must be square");
    st.model.encoder = make_conv_encoder(res, mc.conv_width, mc.feature_dim, init_rng);
  }
  st.model.adapter1 = make_adapter(mc.feature_dim, mc.classifier_hidden, num_classes, 1, init_rng);
  st.model.adapter2 = make_adapter(mc.feature_dim, mc.classifier_hidden, num_classes, 2, init_rng);
  if (cfg.variant == Variant::V1) {
    for (int k = 0; k < 3; ++k)
      st.discriminators.push_back(make_mlp({mc.feature_dim, mc.classifier_hidden, 2}, init_rng));
    st.opt_disc.resize(3);
  }
  st.q1 = FeatureQueue(cfg.queue_capacity, 1);
  st.q2 = FeatureQueue(cfg.queue_capacity, 2);
  st.data_rng = Rng(derive_seed(cfg.seed, "data"));
  st.diag_rng = Rng(derive_seed(cfg.seed, "diag"));
  return st;
}

namespace detail {

inline std::vector<int> zero_classes(int n) { return std::vector<int>(static_cast<std::size_t>(n), 0); }

// Accumulates feature cotangents into encoder gradients and applies one Adam
// update to the encoder.
struct EncoderUpdate {
  const Encoder* enc = nullptr;
  EncoderGrads grads;

  explicit EncoderUpdate(const Encoder& e) : enc(&e), grads(grads_like(e)) {}
  void add(const EncoderCache& cache, const Matrix& cotangent) {
    encoder_backward(*enc, cache, cotangent, grads);
  }
};

inline void add_into(Matrix& acc, const Matrix& inc, double scale = 1.0) {
  if (acc.empty()) {
    acc = inc;
    if (scale != 1.0)
      for (double& v : acc.data) v *= scale;
    return;
  }
  require(acc.rows == inc.rows && acc.cols == inc.cols, "add_into: shape mismatch");
  for (std::size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += scale * inc.data[k];
}

}  // namespace detail

// Sampled mini-batch with optional labels.
struct Batch {
  Matrix x;
  std::vector<int> y;
};

inline Batch sample_batch(const DomainDataset& d, int n, Rng& rng, bool with_labels) {
  require(d.size() > 0, "sample_batch: empty dataset");
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = rng.below(d.size());
  Batch b;
  b.x = take_rows(d.x, idx);
  if (with_labels) {
    require_contract(d.labeled(), "sample_batch: labels requested from unlabeled dataset");
    b.y.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) b.y[static_cast<std::size_t>(i)] = d.y[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
  }
  return b;
}

// ---------------------------------------------------------------------------
// Pull step: inner adversarial refresh of the auxiliary classifiers, then one
// encoder update on the summed source-target discrepancies plus the
// continuity penalty. Content classifiers stay frozen; source features are
// detached views (queue snapshots, or fresh fallbacks before the queues
// warm up / under the no-queue variant).
// ---------------------------------------------------------------------------

inline LossBundle pull_step(TrainerState& st, FeatureQueue& q1, FeatureQueue& q2,
                            const std::vector<Matrix>& probe_batches,
                            const FeatureBatch* fresh_s1 = nullptr,
                            const FeatureBatch* fresh_s2 = nullptr) {
  require_config(!probe_batches.empty(), "pull_step: no probe batches");
  const TrainConfig& cfg = st.cfg;
  const bool use_disc = cfg.variant == Variant::V1;
  const bool use_gp = cfg.variant != Variant::V7;
  const bool use_queues = cfg.variant != Variant::V6;

  auto source_view = [&](FeatureQueue& q, const FeatureBatch* fresh, int sid) -> FeatureBatch {
    if (use_queues && !q.empty()) return snapshot(q);
    require_config(fresh != nullptr, "pull_step: queue empty and no fresh source features supplied");
    require_contract(fresh->origin == origin_of_source(sid), "pull_step: fresh source origin mismatch");
    return detach(*fresh);
  };
  FeatureBatch s1 = source_view(q1, fresh_s1, 1);
  FeatureBatch s2 = source_view(q2, fresh_s2, 2);

  // encode targets once; features stay fixed through the inner steps
  std::vector<EncoderCache> caches(probe_batches.size());
  std::vector<FeatureBatch> targets;
  targets.reserve(probe_batches.size());
  for (std::size_t i = 0; i < probe_batches.size(); ++i)
    targets.push_back(encode(st.model.encoder, probe_batches[i], Origin::probe_target, &caches[i]));

  // inner adversarial steps
  for (int it = 0; it < cfg.inner_aux_steps; ++it) {
    for (const FeatureBatch& t : targets) {
      if (use_disc) {
        auto disc_step = [&](Mlp& d, Adam& opt, const FeatureBatch& p, const FeatureBatch& q) {
          ObjectiveGrads g = objective_with_grads(d, detail::zero_classes(p.features.rows), p.features,
                                                  detail::zero_classes(q.features.rows), q.features,
                                                  true, false, false);
          opt.step(d, g.aux, cfg.learning_rate);
        };
        disc_step(st.discriminators[1], st.opt_disc[1], s1, t);
        disc_step(st.discriminators[2], st.opt_disc[2], s2, t);
      } else {
        aux_adversarial_step(st.model.adapter1, st.opt_aux1, cfg.learning_rate, s1, t);
        aux_adversarial_step(st.model.adapter2, st.opt_aux2, cfg.learning_rate, s2, t);
      }
    }
  }

  // outer losses and encoder cotangents
  LossBundle out;
  out.step_kind = StepKind::pull;
  const double two_log2 = 2.0 * std::log(2.0);
  detail::EncoderUpdate upd(st.model.encoder);
  const double nt = static_cast<double>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Matrix& tf = targets[i].features;
    Matrix cot(tf.rows, tf.cols);
    auto add_adapter = [&](const Mlp& aux, const std::vector<int>& cls_p, const Matrix& sf,
                           const std::vector<int>& cls_t) {
      ObjectiveGrads g = objective_with_grads(aux, cls_p, sf, cls_t, tf, false, false, true);
      out.l_p += two_log2 - g.objective;
      detail::add_into(cot, g.d_feats_q, -1.0);
      return cls_t;
    };
    if (use_disc) {
      auto zc_s1 = detail::zero_classes(s1.features.rows);
      auto zc_s2 = detail::zero_classes(s2.features.rows);
      auto zc_t = detail::zero_classes(tf.rows);
      add_adapter(st.discriminators[1], zc_s1, s1.features, zc_t);
      add_adapter(st.discriminators[2], zc_s2, s2.features, zc_t);
      if (use_gp) {
        for (const Mlp* d : {&st.discriminators[1], &st.discriminators[2]}) {
          PenaltyWithCotangents pen = gradient_penalty_with_cotangents(
              AdapterPair{Mlp{}, *d, 0}, tf, zc_t, cfg.continuity);
          out.l_gp += cfg.continuity.weight * pen.value / nt;
          detail::add_into(cot, pen.d_feats, cfg.continuity.weight / nt);
        }
      }
    } else {
      auto cls_t1 = content_classes(st.model.adapter1, tf);
      auto cls_t2 = content_classes(st.model.adapter2, tf);
      add_adapter(st.model.adapter1.aux, content_classes(st.model.adapter1, s1.features), s1.features, cls_t1);
      add_adapter(st.model.adapter2.aux, content_classes(st.model.adapter2, s2.features), s2.features, cls_t2);
      if (use_gp) {
        PenaltyWithCotangents p1 = gradient_penalty_with_cotangents(st.model.adapter1, tf, cls_t1, cfg.continuity);
        PenaltyWithCotangents p2 = gradient_penalty_with_cotangents(st.model.adapter2, tf, cls_t2, cfg.continuity);
        out.l_gp += cfg.continuity.weight * (p1.value + p2.value) / nt;
        detail::add_into(cot, p1.d_feats, cfg.continuity.weight / nt);
        detail::add_into(cot, p2.d_feats, cfg.continuity.weight / nt);
      }
    }
    upd.add(caches[i], cot);
  }
  st.opt_encoder.step(st.model.encoder, upd.grads, cfg.learning_rate);
  return out;
}

// ---------------------------------------------------------------------------
// Shrinkage step: encode both source batches, feed the queues, refresh the
// auxiliary classifiers on the source pair, then one update of the encoder
// and both content classifiers on the source-source discrepancy plus
// cross-entropy. Under the CE-only flavors (SO, V5) the discrepancy terms
// are skipped.
// ---------------------------------------------------------------------------

inline LossBundle shrinkage_step(TrainerState& st, const Batch& s1_batch, const Batch& s2_batch) {
  require_contract(!s1_batch.y.empty() && !s2_batch.y.empty(),
                   "shrinkage_step: source batches must be labeled");
  const TrainConfig& cfg = st.cfg;
  const bool use_disc = cfg.variant == Variant::V1;
  const bool with_discrepancy = cfg.variant != Variant::SO && cfg.variant != Variant::V5;
  const bool use_queues = cfg.variant != Variant::SO && cfg.variant != Variant::V6;

  EncoderCache c1, c2;
  FeatureBatch f1 = encode(st.model.encoder, s1_batch.x, Origin::source_1, &c1);
  FeatureBatch f2 = encode(st.model.encoder, s2_batch.x, Origin::source_2, &c2);
  if (use_queues) {
    enqueue(st.q1, detach(f1));
    enqueue(st.q2, detach(f2));
  }

  LossBundle out;
  out.step_kind = StepKind::shrink;
  const double two_log2 = 2.0 * std::log(2.0);
  Matrix cot1(f1.features.rows, f1.features.cols);
  Matrix cot2(f2.features.rows, f2.features.cols);

  if (with_discrepancy) {
    FeatureBatch d1 = detach(f1), d2 = detach(f2);
    for (int it = 0; it < cfg.inner_aux_steps; ++it) {
      if (use_disc) {
        ObjectiveGrads g = objective_with_grads(st.discriminators[0],
                                                detail::zero_classes(d1.features.rows), d1.features,
                                                detail::zero_classes(d2.features.rows), d2.features,
                                                true, false, false);
        st.opt_disc[0].step(st.discriminators[0], g.aux, cfg.learning_rate);
      } else {
        aux_adversarial_step(st.model.adapter1, st.opt_aux1, cfg.learning_rate, d1, d2);
        aux_adversarial_step(st.model.adapter2, st.opt_aux2, cfg.learning_rate, d2, d1);
      }
    }
    if (use_disc) {
      ObjectiveGrads g = objective_with_grads(st.discriminators[0],
                                              detail::zero_classes(f1.features.rows), f1.features,
                                              detail::zero_classes(f2.features.rows), f2.features,
                                              false, true, true);
      out.l_s += two_log2 - g.objective;
      detail::add_into(cot1, g.d_feats_p, -1.0);
      detail::add_into(cot2, g.d_feats_q, -1.0);
    } else {
      ObjectiveGrads g1 = objective_with_grads(st.model.adapter1.aux,
                                               content_classes(st.model.adapter1, f1.features), f1.features,
                                               content_classes(st.model.adapter1, f2.features), f2.features,
                                               false, true, true);
      ObjectiveGrads g2 = objective_with_grads(st.model.adapter2.aux,
                                               content_classes(st.model.adapter2, f2.features), f2.features,
                                               content_classes(st.model.adapter2, f1.features), f1.features,
                                               false, true, true);
      out.l_s += (two_log2 - g1.objective) + (two_log2 - g2.objective);
      detail::add_into(cot1, g1.d_feats_p, -1.0);
      detail::add_into(cot2, g1.d_feats_q, -1.0);
      detail::add_into(cot2, g2.d_feats_p, -1.0);
      detail::add_into(cot1, g2.d_feats_q, -1.0);
    }
  }

  CeGrads ce1 = cross_entropy_with_grads(st.model.adapter1.content, f1.features, s1_batch.y, true, true);
  CeGrads ce2 = cross_entropy_with_grads(st.model.adapter2.content, f2.features, s2_batch.y, true, true);
  out.l_ce = ce1.loss + ce2.loss;
  detail::add_into(cot1, ce1.d_feats);
  detail::add_into(cot2, ce2.d_feats);

  detail::EncoderUpdate upd(st.model.encoder);
  upd.add(c1, cot1);
  upd.add(c2, cot2);
  st.opt_encoder.step(st.model.encoder, upd.grads, cfg.learning_rate);
  st.opt_f1.step(st.model.adapter1.content, ce1.classifier, cfg.learning_rate);
  st.opt_f2.step(st.model.adapter2.content, ce2.classifier, cfg.learning_rate);
  return out;
}

// ---------------------------------------------------------------------------
// Merged step (V2-V4): pull and shrinkage objectives optimized jointly in one
// update of the encoder and both content classifiers. "Unfixed" sources
// contribute live features to the pull discrepancies; fixed ones are seen
// through detached queue snapshots as usual.
// ---------------------------------------------------------------------------

inline LossBundle merged_step(TrainerState& st, const Batch& s1_batch, const Batch& s2_batch,
                              const std::vector<Matrix>& probe_batches) {
  const TrainConfig& cfg = st.cfg;
  require_config(!probe_batches.empty(), "merged_step: no probe batches");
  const bool unfix_s1 = cfg.variant == Variant::V2 || cfg.variant == Variant::V3;
  const bool unfix_s2 = cfg.variant == Variant::V2 || cfg.variant == Variant::V4;

  EncoderCache c1, c2;
  FeatureBatch f1 = encode(st.model.encoder, s1_batch.x, Origin::source_1, &c1);
  FeatureBatch f2 = encode(st.model.encoder, s2_batch.x, Origin::source_2, &c2);
  enqueue(st.q1, detach(f1));
  enqueue(st.q2, detach(f2));

  std::vector<EncoderCache> caches(probe_batches.size());
  std::vector<FeatureBatch> targets;
  for (std::size_t i = 0; i < probe_batches.size(); ++i)
    targets.push_back(encode(st.model.encoder, probe_batches[i], Origin::probe_target, &caches[i]));

  // pull-side source views: live features when unfixed, snapshots otherwise
  FeatureBatch pv1 = unfix_s1 ? f1 : snapshot(st.q1);
  FeatureBatch pv2 = unfix_s2 ? f2 : snapshot(st.q2);

  // inner adversarial refresh (against detached views)
  FeatureBatch d1 = detach(f1), d2 = detach(f2);
  for (int it = 0; it < cfg.inner_aux_steps; ++it) {
    for (const FeatureBatch& t : targets) {
      aux_adversarial_step(st.model.adapter1, st.opt_aux1, cfg.learning_rate, detach(pv1), t);
      aux_adversarial_step(st.model.adapter2, st.opt_aux2, cfg.learning_rate, detach(pv2), t);
    }
    aux_adversarial_step(st.model.adapter1, st.opt_aux1, cfg.learning_rate, d1, d2);
    aux_adversarial_step(st.model.adapter2, st.opt_aux2, cfg.learning_rate, d2, d1);
  }

  LossBundle out;
  out.step_kind = StepKind::merged;
  const double two_log2 = 2.0 * std::log(2.0);
  Matrix cot_s1(f1.features.rows, f1.features.cols);
  Matrix cot_s2(f2.features.rows, f2.features.cols);
  detail::EncoderUpdate upd(st.model.encoder);
  const double nt = static_cast<double>(targets.size());

  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Matrix& tf = targets[i].features;
    Matrix cot_t(tf.rows, tf.cols);
    auto cls_t1 = content_classes(st.model.adapter1, tf);
    auto cls_t2 = content_classes(st.model.adapter2, tf);
    ObjectiveGrads g1 = objective_with_grads(st.model.adapter1.aux,
                                             content_classes(st.model.adapter1, pv1.features), pv1.features,
                                             cls_t1, tf, false, unfix_s1, true);
    ObjectiveGrads g2 = objective_with_grads(st.model.adapter2.aux,
                                             content_classes(st.model.adapter2, pv2.features), pv2.features,
                                             cls_t2, tf, false, unfix_s2, true);
    out.l_p += (two_log2 - g1.objective) + (two_log2 - g2.objective);
    detail::add_into(cot_t, g1.d_feats_q, -1.0);
    detail::add_into(cot_t, g2.d_feats_q, -1.0);
    if (unfix_s1) detail::add_into(cot_s1, g1.d_feats_p, -1.0);
    if (unfix_s2) detail::add_into(cot_s2, g2.d_feats_p, -1.0);
    PenaltyWithCotangents p1 = gradient_penalty_with_cotangents(st.model.adapter1, tf, cls_t1, cfg.continuity);
    PenaltyWithCotangents p2 = gradient_penalty_with_cotangents(st.model.adapter2, tf, cls_t2, cfg.continuity);
    out.l_gp += cfg.continuity.weight * (p1.value + p2.value) / nt;
    detail::add_into(cot_t, p1.d_feats, cfg.continuity.weight / nt);
    detail::add_into(cot_t, p2.d_feats, cfg.continuity.weight / nt);
    upd.add(caches[i], cot_t);
  }

  ObjectiveGrads gs1 = objective_with_grads(st.model.adapter1.aux,
                                            content_classes(st.model.adapter1, f1.features), f1.features,
                                            content_classes(st.model.adapter1, f2.features), f2.features,
                                            false, true, true);
  ObjectiveGrads gs2 = objective_with_grads(st.model.adapter2.aux,
                                            content_classes(st.model.adapter2, f2.features), f2.features,
                                            content_classes(st.model.adapter2, f1.features), f1.features,
                                            false, true, true);
  out.l_s = (two_log2 - gs1.objective) + (two_log2 - gs2.objective);
  detail::add_into(cot_s1, gs1.d_feats_p, -1.0);
  detail::add_into(cot_s2, gs1.d_feats_q, -1.0);
  detail::add_into(cot_s2, gs2.d_feats_p, -1.0);
  detail::add_into(cot_s1, gs2.d_feats_q, -1.0);

  CeGrads ce1 = cross_entropy_with_grads(st.model.adapter1.content, f1.features, s1_batch.y, true, true);
  CeGrads ce2 = cross_entropy_with_grads(st.model.adapter2.content, f2.features, s2_batch.y, true, true);
  out.l_ce = ce1.loss + ce2.loss;
  detail::add_into(cot_s1, ce1.d_feats);
  detail::add_into(cot_s2, ce2.d_feats);

  upd.add(c1, cot_s1);
  upd.add(c2, cot_s2);
  st.opt_encoder.step(st.model.encoder, upd.grads, cfg.learning_rate);
  st.opt_f1.step(st.model.adapter1.content, ce1.classifier, cfg.learning_rate);
  st.opt_f2.step(st.model.adapter2.content, ce2.classifier, cfg.learning_rate);
  return out;
}

// ---------------------------------------------------------------------------
// Full loop
// ---------------------------------------------------------------------------

struct TrainResult {
  Model model;
  TrainLog log;
};

namespace detail {

inline double classifier_l2_stat(const Model& m, const Matrix& x) {
  FeatureBatch f = encode(m.encoder, x);
  Matrix p1 = softmax(mlp_forward(m.adapter1.content, f.features));
  Matrix p2 = softmax(mlp_forward(m.adapter2.content, f.features));
  double acc = 0.0;
  for (int i = 0; i < p1.rows; ++i)
    acc += std::sqrt(squared_distance(p1.row(i), p2.row(i)));
  return acc / static_cast<double>(p1.rows);
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const SplitManifest& manifest,
                         const std::vector<DomainDataset>& datasets) {
  validate(cfg);
  validate(manifest);
  require(static_cast<int>(datasets.size()) == manifest.grid_size(),
          "train: dataset count does not match manifest grid");
  const DomainDataset& src1 = datasets[static_cast<std::size_t>(manifest.source_indices[0])];
  const DomainDataset& src2 = datasets[static_cast<std::size_t>(manifest.source_indices[1])];
  require_contract(src1.labeled() && src2.labeled(), "train: source domains must be labeled");
  int num_classes = 0;
  for (int y : src1.y) num_classes = std::max(num_classes, y + 1);
  for (int y : src2.y) num_classes = std::max(num_classes, y + 1);
  require(num_classes >= 2, "train: need at least 2 classes");

  const bool needs_probes = cfg.variant != Variant::SO;
  if (needs_probes)
    require_config(!manifest.probe_indices.empty(), "train: variant requires probe domains in the manifest");

  // trainer-visible views: labels stripped from every non-source domain
  std::vector<DomainDataset> probes;
  for (int i : manifest.probe_indices)
    probes.push_back(trainer_view(datasets[static_cast<std::size_t>(i)]));

  TrainerState st = make_trainer_state(cfg, src1.x.cols, num_classes);
  TrainResult result;
  auto t0 = std::chrono::steady_clock::now();

  const int cycle = cfg.pull_steps + cfg.shrink_steps;
  for (long step = 0; step < cfg.steps; ++step) {
    st.step = step;
    LossBundle losses;
    const bool merged = cfg.variant == Variant::V2 || cfg.variant == Variant::V3 || cfg.variant == Variant::V4;
    const bool pull_kind = !merged && cfg.variant != Variant::SO &&
                           (static_cast<int>(step % cycle) < cfg.pull_steps);

    auto sample_probe_batches = [&]() {
      std::vector<Matrix> batches;
      int n_t = static_cast<int>(probes.size());
      std::vector<int> chosen;
      if (n_t <= cfg.max_probe_domains_per_step) {
        for (int i = 0; i < n_t; ++i) chosen.push_back(i);
      } else {
        chosen = st.data_rng.sample_without_replacement(n_t, cfg.max_probe_domains_per_step);
      }
      for (int i : chosen)
        batches.push_back(sample_batch(probes[static_cast<std::size_t>(i)], cfg.batch_size, st.data_rng, false).x);
      return batches;
    };

    if (merged) {
      Batch b1 = sample_batch(src1, cfg.batch_size, st.data_rng, true);
      Batch b2 = sample_batch(src2, cfg.batch_size, st.data_rng, true);
      losses = merged_step(st, b1, b2, sample_probe_batches());
    } else if (pull_kind) {
      std::vector<Matrix> batches = sample_probe_batches();
      const bool use_queues = cfg.variant != Variant::V6;
      std::optional<FeatureBatch> fb1, fb2;
      if (!use_queues || st.q1.empty())
        fb1 = detach(encode(st.model.encoder, sample_batch(src1, cfg.batch_size, st.data_rng, false).x, Origin::source_1));
      if (!use_queues || st.q2.empty())
        fb2 = detach(encode(st.model.encoder, sample_batch(src2, cfg.batch_size, st.data_rng, false).x, Origin::source_2));
      losses = pull_step(st, st.q1, st.q2, batches, fb1 ? &*fb1 : nullptr, fb2 ? &*fb2 : nullptr);
    } else {
      Batch b1 = sample_batch(src1, cfg.batch_size, st.data_rng, true);
      Batch b2 = sample_batch(src2, cfg.batch_size, st.data_rng, true);
      losses = shrinkage_step(st, b1, b2);
    }

    TrainLogRecord rec;
    rec.step = step;
    rec.losses = losses;
    rec.queue_occupancy = st.q1.size() + st.q2.size();
    if (!probes.empty()) {
      const DomainDataset& d = probes[static_cast<std::size_t>(step % static_cast<long>(probes.size()))];
      Batch diag = sample_batch(d, std::min(cfg.batch_size, d.size()), st.diag_rng, false);
      rec.clf_l2 = detail::classifier_l2_stat(st.model, diag.x);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.records.push_back(rec);
  }
  result.model = st.model;
  return result;
}

}  // namespace cda
