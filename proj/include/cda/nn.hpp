#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cda/common.hpp"
#include "cda/matrix.hpp"
#include "cda/rng.hpp"

namespace cda {

// ---------------------------------------------------------------------------
// Fully connected stack with tanh between layers and a linear output layer.
// tanh is used throughout because the continuity penalty differentiates a
// gradient: activations must be twice differentiable.
// ---------------------------------------------------------------------------

struct Linear {
  Matrix w;               // out x in
  std::vector<double> b;  // out
};

inline Linear make_linear(int in, int out, Rng& rng) {
  Linear l;
  l.w = Matrix(out, in);
  l.b.assign(static_cast<std::size_t>(out), 0.0);
  double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (double& v : l.w.data) v = rng.uniform(-limit, limit);
  return l;
}

struct Mlp {
  std::vector<Linear> layers;

  int input_dim() const { return layers.front().w.cols; }
  int output_dim() const { return layers.back().w.rows; }
};

// dims = {in, h1, ..., out}
inline Mlp make_mlp(const std::vector<int>& dims, Rng& rng) {
  require(dims.size() >= 2, "make_mlp: need at least input and output dims");
  Mlp m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    m.layers.push_back(make_linear(dims[i], dims[i + 1], rng));
  return m;
}

struct MlpGrads {
  std::vector<Matrix> w;
  std::vector<std::vector<double>> b;
};

inline MlpGrads grads_like(const Mlp& m) {
  MlpGrads g;
  for (const Linear& l : m.layers) {
    g.w.emplace_back(l.w.rows, l.w.cols);
    g.b.emplace_back(l.b.size(), 0.0);
  }
  return g;
}

inline void zero(MlpGrads& g) {
  for (Matrix& m : g.w) std::fill(m.data.begin(), m.data.end(), 0.0);
  for (auto& b : g.b) std::fill(b.begin(), b.end(), 0.0);
}

// acts[0] is the input batch; acts[i] for hidden layers holds the
// post-tanh output of layer i-1; the last entry holds raw logits.
struct MlpCache {
  std::vector<Matrix> acts;
};

inline Matrix mlp_forward(const Mlp& m, const Matrix& x, MlpCache* cache = nullptr) {
  require(x.cols == m.input_dim(), "mlp_forward: input dimension mismatch");
  if (cache) {
    cache->acts.clear();
    cache->acts.push_back(x);
  }
  Matrix cur = x;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const Linear& l = m.layers[li];
    Matrix next(cur.rows, l.w.rows);
    for (int i = 0; i < cur.rows; ++i) {
      auto in = cur.row(i);
      auto out = next.row(i);
      for (int o = 0; o < l.w.rows; ++o) {
        double acc = l.b[static_cast<std::size_t>(o)];
        auto wr = l.w.row(o);
        for (int k = 0; k < l.w.cols; ++k) acc += wr[static_cast<std::size_t>(k)] * in[static_cast<std::size_t>(k)];
        out[static_cast<std::size_t>(o)] = acc;
      }
    }
    bool last = (li + 1 == m.layers.size());
    if (!last)
      for (double& v : next.data) v = std::tanh(v);
    if (cache) cache->acts.push_back(next);
    cur = std::move(next);
  }
  return cur;
}

// Accumulates parameter gradients into `grads` (if non-null) and writes the
// gradient with respect to the input batch into `dx` (if non-null).
inline void mlp_backward(const Mlp& m, const MlpCache& cache, const Matrix& dy,
                         MlpGrads* grads, Matrix* dx = nullptr) {
  require(cache.acts.size() == m.layers.size() + 1, "mlp_backward: stale cache");
  Matrix delta = dy;
  for (int li = static_cast<int>(m.layers.size()) - 1; li >= 0; --li) {
    const Linear& l = m.layers[static_cast<std::size_t>(li)];
    const Matrix& in = cache.acts[static_cast<std::size_t>(li)];
    bool last = (li + 1 == static_cast<int>(m.layers.size()));
    if (!last) {
      // delta arrives w.r.t. post-tanh output of this layer
      const Matrix& act = cache.acts[static_cast<std::size_t>(li) + 1];
      for (std::size_t k = 0; k < delta.data.size(); ++k)
        delta.data[k] *= 1.0 - act.data[k] * act.data[k];
    }
    if (grads) {
      Matrix& gw = grads->w[static_cast<std::size_t>(li)];
      auto& gb = grads->b[static_cast<std::size_t>(li)];
      for (int i = 0; i < delta.rows; ++i) {
        auto dr = delta.row(i);
        auto ir = in.row(i);
        for (int o = 0; o < l.w.rows; ++o) {
          double d = dr[static_cast<std::size_t>(o)];
          gb[static_cast<std::size_t>(o)] += d;
          auto gwr = gw.row(o);
          for (int k = 0; k < l.w.cols; ++k) gwr[static_cast<std::size_t>(k)] += d * ir[static_cast<std::size_t>(k)];
        }
      }
    }
    bool need_dx = (li > 0) || (dx != nullptr);
    if (!need_dx) break;
    Matrix prev(delta.rows, l.w.cols);
    for (int i = 0; i < delta.rows; ++i) {
      auto dr = delta.row(i);
      auto pr = prev.row(i);
      for (int o = 0; o < l.w.rows; ++o) {
        double d = dr[static_cast<std::size_t>(o)];
        if (d == 0.0) continue;
        auto wr = l.w.row(o);
        for (int k = 0; k < l.w.cols; ++k) pr[static_cast<std::size_t>(k)] += d * wr[static_cast<std::size_t>(k)];
      }
    }
    delta = std::move(prev);
  }
  if (dx) *dx = std::move(delta);
}

template <class F>
inline void for_each_param(Mlp& m, MlpGrads& g, F&& f) {
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    Linear& l = m.layers[li];
    for (std::size_t k = 0; k < l.w.data.size(); ++k) f(l.w.data[k], g.w[li].data[k]);
    for (std::size_t k = 0; k < l.b.size(); ++k) f(l.b[k], g.b[li][k]);
  }
}

inline std::size_t param_count(const Mlp& m) {
  std::size_t n = 0;
  for (const Linear& l : m.layers) n += l.w.data.size() + l.b.size();
  return n;
}

// ---------------------------------------------------------------------------
// Small convolutional stack for raster inputs. Square images, single input
// channel, tanh after every layer except the last. The final layer must
// collapse the spatial extent to 1x1 so the flattened output is the feature.
// ---------------------------------------------------------------------------

struct ConvLayer {
  int in_ch = 0, out_ch = 0, ksize = 0, stride = 1, pad = 0;
  Matrix w;               // out_ch x (in_ch * k * k)
  std::vector<double> b;  // out_ch
};

inline ConvLayer make_conv(int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng) {
  ConvLayer c;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.ksize = ksize;
  c.stride = stride;
  c.pad = pad;
  int fan_in = in_ch * ksize * ksize;
  int fan_out = out_ch * ksize * ksize;
  c.w = Matrix(out_ch, fan_in);
  c.b.assign(static_cast<std::size_t>(out_ch), 0.0);
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : c.w.data) v = rng.uniform(-limit, limit);
  return c;
}

inline int conv_out_res(const ConvLayer& c, int res) {
  return (res + 2 * c.pad - c.ksize) / c.stride + 1;
}

struct ConvNet {
  int input_res = 0;
  std::vector<ConvLayer> layers;

  int input_dim() const { return input_res * input_res; }
  int output_dim() const { return layers.back().out_ch; }
};

struct ConvGrads {
  std::vector<Matrix> w;
  std::vector<std::vector<double>> b;
};

inline ConvGrads grads_like(const ConvNet& n) {
  ConvGrads g;
  for (const ConvLayer& c : n.layers) {
    g.w.emplace_back(c.w.rows, c.w.cols);
    g.b.emplace_back(c.b.size(), 0.0);
  }
  return g;
}

inline void zero(ConvGrads& g) {
  for (Matrix& m : g.w) std::fill(m.data.begin(), m.data.end(), 0.0);
  for (auto& b : g.b) std::fill(b.begin(), b.end(), 0.0);
}

struct ConvCache {
  std::vector<Matrix> acts;  // batch x (ch*res*res) per stage
  std::vector<int> res;      // spatial resolution per stage
};

namespace detail {

inline double& chw(Matrix& m, int row, int ch, int r, int c, int res) {
  return m(row, (ch * res + r) * res + c);
}
inline double chw(const Matrix& m, int row, int ch, int r, int c, int res) {
  return m(row, (ch * res + r) * res + c);
}

}  // namespace detail

inline Matrix conv_forward(const ConvNet& net, const Matrix& x, ConvCache* cache = nullptr) {
  require(x.cols == net.input_dim(), "conv_forward: input dimension mismatch");
  if (cache) {
    cache->acts.clear();
    cache->res.clear();
    cache->acts.push_back(x);
    cache->res.push_back(net.input_res);
  }
  Matrix cur = x;
  int res = net.input_res;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const ConvLayer& l = net.layers[li];
    int ro = conv_out_res(l, res);
    require(ro >= 1, "conv_forward: layer collapses below 1x1");
    Matrix next(cur.rows, l.out_ch * ro * ro);
    for (int n = 0; n < cur.rows; ++n) {
      for (int oc = 0; oc < l.out_ch; ++oc) {
        auto wr = l.w.row(oc);
        for (int orr = 0; orr < ro; ++orr) {
          for (int occ = 0; occ < ro; ++occ) {
            double acc = l.b[static_cast<std::size_t>(oc)];
            int base_r = orr * l.stride - l.pad;
            int base_c = occ * l.stride - l.pad;
            int wi = 0;
            for (int ic = 0; ic < l.in_ch; ++ic) {
              for (int kr = 0; kr < l.ksize; ++kr) {
                int rr = base_r + kr;
                for (int kc = 0; kc < l.ksize; ++kc, ++wi) {
                  int cc = base_c + kc;
                  if (rr < 0 || rr >= res || cc < 0 || cc >= res) continue;
                  acc += wr[static_cast<std::size_t>(wi)] * detail::chw(cur, n, ic, rr, cc, res);
                }
              }
            }
            detail::chw(next, n, oc, orr, occ, ro) = acc;
          }
        }
      }
    }
    bool last = (li + 1 == net.layers.size());
    if (!last)
      for (double& v : next.data) v = std::tanh(v);
    if (cache) {
      cache->acts.push_back(next);
      cache->res.push_back(ro);
    }
    cur = std::move(next);
    res = ro;
  }
  require(res == 1, "conv_forward: network must end at 1x1 spatial extent");
  return cur;
}

inline void conv_backward(const ConvNet& net, const ConvCache& cache, const Matrix& dy,
                          ConvGrads* grads, Matrix* dx = nullptr) {
  require(cache.acts.size() == net.layers.size() + 1, "conv_backward: stale cache");
  Matrix delta = dy;
  for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
    const ConvLayer& l = net.layers[static_cast<std::size_t>(li)];
    const Matrix& in = cache.acts[static_cast<std::size_t>(li)];
    int res = cache.res[static_cast<std::size_t>(li)];
    int ro = cache.res[static_cast<std::size_t>(li) + 1];
    bool last = (li + 1 == static_cast<int>(net.layers.size()));
    if (!last) {
      const Matrix& act = cache.acts[static_cast<std::size_t>(li) + 1];
      for (std::size_t k = 0; k < delta.data.size(); ++k)
        delta.data[k] *= 1.0 - act.data[k] * act.data[k];
    }
    bool need_dx = (li > 0) || (dx != nullptr);
    Matrix prev;
    if (need_dx) prev = Matrix(delta.rows, l.in_ch * res * res);
    for (int n = 0; n < delta.rows; ++n) {
      for (int oc = 0; oc < l.out_ch; ++oc) {
        auto wr = l.w.row(oc);
        std::span<double> gwr;
        if (grads) gwr = grads->w[static_cast<std::size_t>(li)].row(oc);
        for (int orr = 0; orr < ro; ++orr) {
          for (int occ = 0; occ < ro; ++occ) {
            double d = detail::chw(delta, n, oc, orr, occ, ro);
            if (d == 0.0) continue;
            if (grads) grads->b[static_cast<std::size_t>(li)][static_cast<std::size_t>(oc)] += d;
            int base_r = orr * l.stride - l.pad;
            int base_c = occ * l.stride - l.pad;
            int wi = 0;
            for (int ic = 0; ic < l.in_ch; ++ic) {
              for (int kr = 0; kr < l.ksize; ++kr) {
                int rr = base_r + kr;
                for (int kc = 0; kc < l.ksize; ++kc, ++wi) {
                  int cc = base_c + kc;
                  if (rr < 0 || rr >= res || cc < 0 || cc >= res) continue;
                  if (grads) gwr[static_cast<std::size_t>(wi)] += d * detail::chw(in, n, ic, rr, cc, res);
                  if (need_dx)
                    detail::chw(prev, n, ic, rr, cc, res) += d * wr[static_cast<std::size_t>(wi)];
                }
              }
            }
          }
        }
      }
    }
    delta = std::move(prev);
  }
  if (dx) *dx = std::move(delta);
}

template <class F>
inline void for_each_param(ConvNet& m, ConvGrads& g, F&& f) {
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    ConvLayer& l = m.layers[li];
    for (std::size_t k = 0; k < l.w.data.size(); ++k) f(l.w.data[k], g.w[li].data[k]);
    for (std::size_t k = 0; k < l.b.size(); ++k) f(l.b[k], g.b[li][k]);
  }
}

inline std::size_t param_count(const ConvNet& m) {
  std::size_t n = 0;
  for (const ConvLayer& l : m.layers) n += l.w.data.size() + l.b.size();
  return n;
}

// ---------------------------------------------------------------------------
// Adam. One state object per parameter group; the group is walked in a fixed
// order via for_each_param, so updates are deterministic.
// ---------------------------------------------------------------------------

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  std::int64_t t = 0;

  template <class Component, class Grads>
  void step(Component& c, Grads& g, double lr) {
    std::size_t n = param_count(c);
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
      t = 0;
    }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    std::size_t i = 0;
    for_each_param(c, g, [&](double& p, double& gr) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * gr;
      v[i] = beta2 * v[i] + (1.0 - beta2) * gr * gr;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p -= lr * mhat / (std::sqrt(vhat) + eps);
      ++i;
    });
  }
};

}  // namespace cda
