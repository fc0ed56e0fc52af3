#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "cda/domain.hpp"
#include "cda/model.hpp"

namespace cda {

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

// Average ranks (1-based); ties get the mean of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation with average ranks; 0 when either side has no
// rank variance.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, "spearman: need matched samples");
  std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(ra.size());
  mb /= static_cast<double>(rb.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    double da = ra[i] - ma, db = rb[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy (biased V-statistic), RBF kernel
// k(x,y) = exp(-||x-y||^2 / (2 sigma^2)) summed over a bandwidth list.
// ---------------------------------------------------------------------------

inline double mmd_rbf(const Matrix& x, const Matrix& y, const std::vector<double>& bandwidths) {
  require(x.cols == y.cols, "mmd_rbf: feature dimension mismatch");
  require(x.rows >= 2 && y.rows >= 2, "mmd_rbf: need at least 2 samples per side");
  require(!bandwidths.empty(), "mmd_rbf: empty bandwidth list");
  for (double s : bandwidths) require(s > 0.0, "mmd_rbf: bandwidths must be positive");
  double total = 0.0;
  for (double sigma : bandwidths) {
    double inv = 1.0 / (2.0 * sigma * sigma);
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < x.rows; ++j) kxx += std::exp(-squared_distance(x.row(i), x.row(j)) * inv);
    for (int i = 0; i < y.rows; ++i)
      for (int j = 0; j < y.rows; ++j) kyy += std::exp(-squared_distance(y.row(i), y.row(j)) * inv);
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < y.rows; ++j) kxy += std::exp(-squared_distance(x.row(i), y.row(j)) * inv);
    total += kxx / (static_cast<double>(x.rows) * x.rows) + kyy / (static_cast<double>(y.rows) * y.rows) -
             2.0 * kxy / (static_cast<double>(x.rows) * y.rows);
  }
  return total;
}

inline double median_pairwise_distance(const Matrix& x, const Matrix& y) {
  std::vector<double> d;
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < y.rows; ++j) d.push_back(std::sqrt(squared_distance(x.row(i), y.row(j))));
  require(!d.empty(), "median_pairwise_distance: no pairs");
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

inline std::vector<double> median_heuristic_bandwidths(const Matrix& x, const Matrix& y) {
  double med = std::max(median_pairwise_distance(x, y), 1e-9);
  return {0.5 * med, med, 2.0 * med, 4.0 * med};
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

enum class EvalRule { mean_softmax, adapter1_only };

struct SubgroupMeans {
  double s1 = 0.0, s2 = 0.0, probe = 0.0, unseen = 0.0;
};

struct MetricsReport {
  std::vector<double> attributes;          // one entry per evaluated domain
  std::vector<Role> roles;
  std::vector<double> per_domain_accuracy;
  SubgroupMeans subgroup_means;
  double overall_target_mean = 0.0;        // mean over probe + unseen domains
  std::optional<Matrix> mmd_matrix;
  double degradation_correlation = 0.0;
};

// Class predictions under the evaluation rule: argmax of the mean of the two
// content classifiers' softmax outputs (or of adapter 1 alone).
inline std::vector<int> eval_predictions(const Model& model, const Matrix& x,
                                         EvalRule rule = EvalRule::mean_softmax) {
  FeatureBatch fb = encode(model.encoder, x);
  Matrix p1 = softmax(mlp_forward(model.adapter1.content, fb.features));
  if (rule == EvalRule::adapter1_only) return predicted_class(p1);
  Matrix p2 = softmax(mlp_forward(model.adapter2.content, fb.features));
  for (std::size_t k = 0; k < p1.data.size(); ++k) p1.data[k] = 0.5 * (p1.data[k] + p2.data[k]);
  return predicted_class(p1);
}

inline double dataset_accuracy(const Model& model, const DomainDataset& d, EvalRule rule) {
  require_contract(d.labeled(), "dataset_accuracy: evaluation dataset must carry labels");
  require(d.size() > 0, "dataset_accuracy: empty dataset");
  std::vector<int> pred = eval_predictions(model, d.x, rule);
  int hit = 0;
  for (int i = 0; i < d.size(); ++i)
    if (pred[static_cast<std::size_t>(i)] == d.y[static_cast<std::size_t>(i)]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

// Accuracy per domain plus subgroup means. Datasets carry their roles; the
// two source datasets are identified by order of appearance.
inline MetricsReport per_domain_accuracy(const Model& model, const std::vector<DomainDataset>& datasets,
                                         EvalRule rule = EvalRule::mean_softmax) {
  require(!datasets.empty(), "per_domain_accuracy: no datasets");
  MetricsReport rep;
  double s_acc[2] = {0.0, 0.0};
  int s_seen = 0;
  double probe_sum = 0.0, unseen_sum = 0.0, target_sum = 0.0;
  int probe_n = 0, unseen_n = 0;
  for (const DomainDataset& d : datasets) {
    double acc = dataset_accuracy(model, d, rule);
    rep.attributes.push_back(d.attribute.value);
    rep.roles.push_back(d.role);
    rep.per_domain_accuracy.push_back(acc);
    switch (d.role) {
      case Role::source:
        if (s_seen < 2) s_acc[s_seen] = acc;
        ++s_seen;
        break;
      case Role::probe_target:
        probe_sum += acc;
        ++probe_n;
        target_sum += acc;
        break;
      case Role::unseen_target:
        unseen_sum += acc;
        ++unseen_n;
        target_sum += acc;
        break;
    }
  }
  rep.subgroup_means.s1 = s_acc[0];
  rep.subgroup_means.s2 = s_acc[1];
  rep.subgroup_means.probe = probe_n ? probe_sum / probe_n : 0.0;
  rep.subgroup_means.unseen = unseen_n ? unseen_sum / unseen_n : 0.0;
  rep.overall_target_mean = (probe_n + unseen_n) ? target_sum / (probe_n + unseen_n) : 0.0;
  return rep;
}

// Spearman correlation between attribute distance from the source and
// per-domain accuracy, over target domains. Strongly negative values mean
// accuracy degrades with attribute distance.
inline double degradation_profile(const MetricsReport& rep, AttributeValue source_attribute) {
  std::vector<double> dist, acc;
  for (std::size_t i = 0; i < rep.roles.size(); ++i) {
    if (rep.roles[i] == Role::source) continue;
    dist.push_back(std::abs(rep.attributes[i] - source_attribute.value));
    acc.push_back(rep.per_domain_accuracy[i]);
  }
  require(dist.size() >= 4, "degradation_profile: need at least 4 target domains");
  return spearman(dist, acc);
}

// Pairwise MMD between encoded domains, for shift profiling.
inline Matrix mmd_matrix(const Encoder& encoder, const std::vector<DomainDataset>& datasets) {
  const int n = static_cast<int>(datasets.size());
  std::vector<Matrix> feats;
  feats.reserve(static_cast<std::size_t>(n));
  for (const DomainDataset& d : datasets) feats.push_back(encode(encoder, d.x).features);
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double v = mmd_rbf(feats[static_cast<std::size_t>(i)], feats[static_cast<std::size_t>(j)],
                         median_heuristic_bandwidths(feats[static_cast<std::size_t>(i)], feats[static_cast<std::size_t>(j)]));
      m(i, j) = v;
      m(j, i) = v;
    }
  }
  return m;
}

// Rank correlation between pairwise MMD and pairwise attribute distance.
inline double mmd_attribute_correlation(const Matrix& mmd, const std::vector<double>& attributes) {
  require(mmd.rows == static_cast<int>(attributes.size()), "mmd_attribute_correlation: size mismatch");
  std::vector<double> dist, val;
  for (int i = 0; i < mmd.rows; ++i) {
    for (int j = i + 1; j < mmd.cols; ++j) {
      dist.push_back(std::abs(attributes[static_cast<std::size_t>(i)] - attributes[static_cast<std::size_t>(j)]));
      val.push_back(mmd(i, j));
    }
  }
  return spearman(val, dist);
}

}  // namespace cda
