#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <variant>
#include <vector>

#include "cda/matrix.hpp"
#include "cda/nn.hpp"
#include "cda/theory.hpp"

namespace cda {

enum class Origin { source_1, source_2, probe_target };

inline const char* to_string(Origin o) {
  switch (o) {
    case Origin::source_1: return "source_1";
    case Origin::source_2: return "source_2";
    case Origin::probe_target: return "probe_target";
  }
  return "?";
}

// A batch of encoded features. `detached` marks batches whose producers must
// receive no gradient (queue snapshots, frozen source views).
struct FeatureBatch {
  Matrix features;
  Origin origin = Origin::probe_target;
  bool detached = false;
};

inline FeatureBatch detach(const FeatureBatch& b) {
  return FeatureBatch{b.features, b.origin, true};
}

// ---------------------------------------------------------------------------
// Encoder: shared feature extractor. MLP for point clouds, a small
// stride-2 convolution stack for rasters.
// ---------------------------------------------------------------------------

struct Encoder {
  int input_dim = 0;
  int feature_dim = 0;
  std::variant<Mlp, ConvNet> net;

  bool is_conv() const { return std::holds_alternative<ConvNet>(net); }
};

struct EncoderCache {
  std::variant<MlpCache, ConvCache> cache;
};

struct EncoderGrads {
  std::variant<MlpGrads, ConvGrads> g;
};

inline Encoder make_mlp_encoder(int input_dim, const std::vector<int>& hidden, int feature_dim, Rng& rng) {
  std::vector<int> dims;
  dims.push_back(input_dim);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(feature_dim);
  Encoder e;
  e.input_dim = input_dim;
  e.feature_dim = feature_dim;
  e.net = make_mlp(dims, rng);
  return e;
}

// Three stride-2 3x3 convolutions halve the resolution, then a final
// resolution-sized kernel collapses to 1x1. Requires resolution % 8 == 0.
inline Encoder make_conv_encoder(int resolution, int width, int feature_dim, Rng& rng) {
  require(resolution >= 8 && resolution % 8 == 0, "make_conv_encoder: resolution must be a positive multiple of 8");
  ConvNet net;
  net.input_res = resolution;
  net.layers.push_back(make_conv(1, width, 3, 2, 1, rng));
  net.layers.push_back(make_conv(width, width, 3, 2, 1, rng));
  net.layers.push_back(make_conv(width, width, 3, 2, 1, rng));
  net.layers.push_back(make_conv(width, feature_dim, resolution / 8, 1, 0, rng));
  Encoder e;
  e.input_dim = resolution * resolution;
  e.feature_dim = feature_dim;
  e.net = net;
  return e;
}

inline FeatureBatch encode(const Encoder& enc, const Matrix& x, Origin origin = Origin::probe_target,
                           EncoderCache* cache = nullptr) {
  require(x.cols == enc.input_dim, "encode: input dimension mismatch");
  Matrix feats;
  if (enc.is_conv()) {
    ConvCache c;
    feats = conv_forward(std::get<ConvNet>(enc.net), x, cache ? &c : nullptr);
    if (cache) cache->cache = std::move(c);
  } else {
    MlpCache c;
    feats = mlp_forward(std::get<Mlp>(enc.net), x, cache ? &c : nullptr);
    if (cache) cache->cache = std::move(c);
  }
  return FeatureBatch{std::move(feats), origin, false};
}

inline EncoderGrads grads_like(const Encoder& e) {
  EncoderGrads g;
  if (e.is_conv())
    g.g = grads_like(std::get<ConvNet>(e.net));
  else
    g.g = grads_like(std::get<Mlp>(e.net));
  return g;
}

inline void zero(EncoderGrads& g) {
  std::visit([](auto& gg) { zero(gg); }, g.g);
}

inline void encoder_backward(const Encoder& enc, const EncoderCache& cache, const Matrix& dfeat,
                             EncoderGrads& grads) {
  if (enc.is_conv())
    conv_backward(std::get<ConvNet>(enc.net), std::get<ConvCache>(cache.cache), dfeat,
                  &std::get<ConvGrads>(grads.g));
  else
    mlp_backward(std::get<Mlp>(enc.net), std::get<MlpCache>(cache.cache), dfeat,
                 &std::get<MlpGrads>(grads.g));
}

template <class F>
inline void for_each_param(Encoder& e, EncoderGrads& g, F&& f) {
  if (e.is_conv())
    for_each_param(std::get<ConvNet>(e.net), std::get<ConvGrads>(g.g), f);
  else
    for_each_param(std::get<Mlp>(e.net), std::get<MlpGrads>(g.g), f);
}

inline std::size_t param_count(const Encoder& e) {
  return e.is_conv() ? param_count(std::get<ConvNet>(e.net)) : param_count(std::get<Mlp>(e.net));
}

// ---------------------------------------------------------------------------
// Adapter: a content classifier paired with an auxiliary classifier of the
// same architecture. The auxiliary one is the adversarial half of the
// discrepancy estimate.
// ---------------------------------------------------------------------------

struct AdapterPair {
  Mlp content;
  Mlp aux;
  int index = 1;  // 1 or 2

  int num_classes() const { return content.output_dim(); }
  int feature_dim() const { return content.input_dim(); }
};

inline AdapterPair make_adapter(int feature_dim, int hidden, int num_classes, int index, Rng& rng) {
  AdapterPair a;
  a.content = make_mlp({feature_dim, hidden, num_classes}, rng);
  a.aux = make_mlp({feature_dim, hidden, num_classes}, rng);
  a.index = index;
  return a;
}

// Row-wise argmax; ties resolve to the lowest class index.
inline std::vector<int> predicted_class(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows));
  for (int i = 0; i < logits.rows; ++i) {
    auto r = logits.row(i);
    int best = 0;
    for (int j = 1; j < logits.cols; ++j)
      if (r[static_cast<std::size_t>(j)] > r[static_cast<std::size_t>(best)]) best = j;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

inline void softmax_row(std::span<const double> logits, std::span<double> out) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] /= sum;
}

inline Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows, logits.cols);
  for (int i = 0; i < logits.rows; ++i) softmax_row(logits.row(i), p.row(i));
  return p;
}

// Per-sample probability that the auxiliary classifier assigns to the class
// the content classifier predicts: J(e) = softmax(aux)[argmax(content)].
// Clamped away from {0, 1} so downstream logs stay finite.
inline std::vector<double> agreement_score(const Matrix& content_logits, const Matrix& aux_logits) {
  require(content_logits.rows == aux_logits.rows && content_logits.cols == aux_logits.cols,
          "agreement_score: logit shape mismatch");
  std::vector<int> cls = predicted_class(content_logits);
  std::vector<double> j(static_cast<std::size_t>(aux_logits.rows));
  std::vector<double> p(static_cast<std::size_t>(aux_logits.cols));
  for (int i = 0; i < aux_logits.rows; ++i) {
    softmax_row(aux_logits.row(i), p);
    double v = p[static_cast<std::size_t>(cls[static_cast<std::size_t>(i)])];
    j[static_cast<std::size_t>(i)] = std::clamp(v, kScoreEps, 1.0 - kScoreEps);
  }
  return j;
}

struct Model {
  Encoder encoder;
  AdapterPair adapter1;
  AdapterPair adapter2;
};

}  // namespace cda
