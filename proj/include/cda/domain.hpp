#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cda/matrix.hpp"
#include "cda/rng.hpp"

namespace cda {

// The continuous quantity indexing the domain family (degrees here).
struct AttributeValue {
  double value = 0.0;
};

enum class Role { source, probe_target, unseen_target };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::source: return "source";
    case Role::probe_target: return "probe_target";
    case Role::unseen_target: return "unseen_target";
  }
  return "?";
}

inline Role role_from_string(const std::string& s) {
  if (s == "source") return Role::source;
  if (s == "probe_target") return Role::probe_target;
  if (s == "unseen_target") return Role::unseen_target;
  throw std::invalid_argument("unknown role: " + s);
}

// One sampled domain. Labels are stored when generated for evaluation;
// trainer_view strips them for every non-source role.
struct DomainDataset {
  Matrix x;
  std::vector<int> y;  // empty when unlabeled
  AttributeValue attribute;
  Role role = Role::unseen_target;

  int size() const { return x.rows; }
  bool labeled() const { return !y.empty() && static_cast<int>(y.size()) == x.rows; }
};

// The trainer may see labels only for source domains.
inline DomainDataset trainer_view(const DomainDataset& d) {
  DomainDataset v = d;
  if (v.role != Role::source) v.y.clear();
  return v;
}

// Counterclockwise rotation about the origin, angle in degrees.
inline std::array<double, 2> rotate_point(std::array<double, 2> p, AttributeValue angle) {
  double rad = angle.value * kPi / 180.0;
  double c = std::cos(rad), s = std::sin(rad);
  return {c * p[0] - s * p[1], s * p[0] + c * p[1]};
}

// ---------------------------------------------------------------------------
// Gaussian constellation benchmark: a set of labeled 2-D class clusters whose
// domain family is generated by rotating the whole constellation.
// ---------------------------------------------------------------------------

struct ConstellationSpec {
  int num_classes = 0;
  std::vector<std::array<double, 2>> class_means;
  std::vector<std::array<double, 4>> class_covariances;  // row-major 2x2, symmetric PD
  std::uint64_t base_seed = 0;
};

inline void validate(const ConstellationSpec& s) {
  require(s.num_classes >= 2, "ConstellationSpec: need at least 2 classes");
  require(static_cast<int>(s.class_means.size()) == s.num_classes &&
              static_cast<int>(s.class_covariances.size()) == s.num_classes,
          "ConstellationSpec: means/covariances count mismatch");
  for (const auto& c : s.class_covariances) {
    require(std::abs(c[1] - c[2]) <= 1e-12, "ConstellationSpec: covariance not symmetric");
    // 2x2 symmetric PD iff trace and determinant positive
    require(c[0] > 0.0 && c[0] * c[3] - c[1] * c[2] > 0.0, "ConstellationSpec: covariance not positive definite");
  }
}

// Deterministic constellation with class means kept at pairwise distance
// >= 2x the largest covariance standard deviation, so every rotated domain
// stays separable.
inline ConstellationSpec make_constellation(int num_classes, std::uint64_t seed) {
  require(num_classes >= 2, "make_constellation: num_classes must be >= 2");
  Rng rng(derive_seed(seed, "constellation"));
  ConstellationSpec spec;
  spec.num_classes = num_classes;
  spec.base_seed = seed;
  double max_var = 0.0;
  for (int k = 0; k < num_classes; ++k) {
    double phi = rng.uniform(0.0, kPi);
    double l1 = rng.uniform(0.010, 0.045);
    double l2 = rng.uniform(0.010, 0.045);
    double c = std::cos(phi), s = std::sin(phi);
    // rotate diag(l1,l2) by phi
    std::array<double, 4> cov{c * c * l1 + s * s * l2, c * s * (l1 - l2),
                              c * s * (l1 - l2), s * s * l1 + c * c * l2};
    spec.class_covariances.push_back(cov);
    max_var = std::max(max_var, std::max(l1, l2));
  }
  double min_dist = 2.0 * std::sqrt(max_var);
  double lo = 0.7, hi = 1.6;
  int attempts = 0;
  while (static_cast<int>(spec.class_means.size()) < num_classes) {
    double r = rng.uniform(lo, hi);
    double phi = rng.uniform(0.0, 2.0 * kPi);
    std::array<double, 2> cand{r * std::cos(phi), r * std::sin(phi)};
    bool ok = true;
    for (const auto& m : spec.class_means) {
      double dx = cand[0] - m[0], dy = cand[1] - m[1];
      if (std::sqrt(dx * dx + dy * dy) < 1.2 * min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) spec.class_means.push_back(cand);
    if (++attempts % 1000 == 0) hi *= 1.3;  // widen the annulus if crowded
  }
  validate(spec);
  return spec;
}

namespace detail {

// Lower Cholesky factor of a 2x2 SPD matrix.
inline std::array<double, 3> cholesky2(const std::array<double, 4>& c) {
  double l11 = std::sqrt(c[0]);
  double l21 = c[2] / l11;
  double l22 = std::sqrt(c[3] - l21 * l21);
  return {l11, l21, l22};
}

}  // namespace detail

// Draws n labeled points (labels uniform over classes, point from its class
// Gaussian) and rotates each by `attribute`. Deterministic in all arguments.
inline DomainDataset sample_domain(const ConstellationSpec& spec, AttributeValue attribute, int n,
                                   std::uint64_t seed, bool labeled) {
  validate(spec);
  require(n >= 1, "sample_domain: n must be >= 1");
  Rng rng(splitmix64(derive_seed(spec.base_seed, "domain") ^ splitmix64(seed)));
  DomainDataset d;
  d.attribute = attribute;
  d.x = Matrix(n, 2);
  std::vector<int> ys(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int y = rng.below(spec.num_classes);
    ys[static_cast<std::size_t>(i)] = y;
    auto chol = detail::cholesky2(spec.class_covariances[static_cast<std::size_t>(y)]);
    double z1 = rng.normal(), z2 = rng.normal();
    std::array<double, 2> p{spec.class_means[static_cast<std::size_t>(y)][0] + chol[0] * z1,
                            spec.class_means[static_cast<std::size_t>(y)][1] + chol[1] * z1 + chol[2] * z2};
    p = rotate_point(p, attribute);
    d.x(i, 0) = p[0];
    d.x(i, 1) = p[1];
  }
  if (labeled) d.y = std::move(ys);
  return d;
}

// ---------------------------------------------------------------------------
// Glyph benchmark: procedural shapes rasterized per class, rotated by the
// attribute with nearest-neighbor resampling, plus seeded pixel noise.
// ---------------------------------------------------------------------------

struct GlyphSpec {
  int num_classes = 0;
  double noise_amplitude = 0.05;
  std::uint64_t base_seed = 0;
};

constexpr int kMaxGlyphClasses = 6;

// Canonical raster of one class at the given resolution, values in [0,1].
inline std::vector<double> canonical_glyph(int cls, int resolution) {
  require(resolution >= 8, "canonical_glyph: resolution must be >= 8");
  require(cls >= 0 && cls < kMaxGlyphClasses, "canonical_glyph: class out of range");
  std::vector<double> img(static_cast<std::size_t>(resolution) * static_cast<std::size_t>(resolution), 0.0);
  double ctr = (resolution - 1) / 2.0;
  double unit = resolution / 2.0;
  auto at = [&](int r, int c) -> double& { return img[static_cast<std::size_t>(r) * static_cast<std::size_t>(resolution) + static_cast<std::size_t>(c)]; };
  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      double yy = (r - ctr) / unit;  // [-1, 1]
      double xx = (c - ctr) / unit;
      double rad = std::sqrt(xx * xx + yy * yy);
      bool on = false;
      switch (cls) {
        case 0: on = rad <= 0.55; break;                                        // disk
        case 1: on = rad >= 0.45 && rad <= 0.75; break;                         // ring
        case 2: on = std::abs(xx) <= 0.18 || std::abs(yy) <= 0.18; break;       // cross
        case 3: on = std::abs(xx - yy) <= 0.25 && rad <= 0.95; break;           // diagonal bar
        case 4: on = yy >= -0.6 && yy <= 0.6 && std::abs(xx) <= 0.6 * (0.6 - yy) / 1.2 + 0.05; break;  // triangle
        case 5: on = std::max(std::abs(xx), std::abs(yy)) >= 0.5 &&
                     std::max(std::abs(xx), std::abs(yy)) <= 0.8; break;        // square outline
      }
      if (on) at(r, c) = 1.0;
    }
  }
  return img;
}

// Nearest-neighbor rotation about the raster center. At 180 degrees the
// source coordinates are exactly integral, so applying it twice restores the
// input bit for bit.
inline std::vector<double> rotate_raster(const std::vector<double>& img, int resolution,
                                         AttributeValue angle) {
  std::vector<double> out(img.size(), 0.0);
  double ctr = (resolution - 1) / 2.0;
  double rad = angle.value * kPi / 180.0;
  double c = std::cos(rad), s = std::sin(rad);
  for (int r = 0; r < resolution; ++r) {
    for (int cc = 0; cc < resolution; ++cc) {
      // inverse-rotate the output pixel into the source image
      double dy = r - ctr, dx = cc - ctr;
      double sx = c * dx + s * dy + ctr;
      double sy = -s * dx + c * dy + ctr;
      int si = static_cast<int>(std::lround(sy));
      int sj = static_cast<int>(std::lround(sx));
      if (si < 0 || si >= resolution || sj < 0 || sj >= resolution) continue;
      out[static_cast<std::size_t>(r) * static_cast<std::size_t>(resolution) + static_cast<std::size_t>(cc)] =
          img[static_cast<std::size_t>(si) * static_cast<std::size_t>(resolution) + static_cast<std::size_t>(sj)];
    }
  }
  return out;
}

inline DomainDataset render_glyph_domain(const GlyphSpec& spec, AttributeValue attribute, int n,
                                         int resolution, std::uint64_t seed, bool labeled = true) {
  require(resolution >= 8, "render_glyph_domain: resolution must be >= 8");
  require(n >= 1, "render_glyph_domain: n must be >= 1");
  require(spec.num_classes >= 2 && spec.num_classes <= kMaxGlyphClasses,
          "render_glyph_domain: num_classes out of range");
  Rng rng(splitmix64(derive_seed(spec.base_seed, "glyph") ^ splitmix64(seed)));
  std::vector<std::vector<double>> canon;
  for (int k = 0; k < spec.num_classes; ++k)
    canon.push_back(rotate_raster(canonical_glyph(k, resolution), resolution, attribute));
  DomainDataset d;
  d.attribute = attribute;
  d.x = Matrix(n, resolution * resolution);
  std::vector<int> ys(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int y = rng.below(spec.num_classes);
    ys[static_cast<std::size_t>(i)] = y;
    auto row = d.x.row(i);
    const auto& base = canon[static_cast<std::size_t>(y)];
    for (std::size_t k = 0; k < base.size(); ++k) {
      double v = base[k];
      if (spec.noise_amplitude > 0.0) v += rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
      row[k] = std::clamp(v, 0.0, 1.0);
    }
  }
  if (labeled) d.y = std::move(ys);
  return d;
}

// ---------------------------------------------------------------------------
// Split construction. Sources sit either at the grid extremes (P1) or at
// interior positions (P2-P4) that cut the grid into three segments; probe
// domains are sampled from the segments the segment kind permits:
//   S1 = all three, S2 = outer-left + middle, S3 = middle, S4 = outer-left.
// Everything else becomes an unseen test domain.
// ---------------------------------------------------------------------------

enum class PositionKind { P1, P2, P3, P4 };
enum class SegmentKind { S1, S2, S3, S4 };

inline const char* to_string(PositionKind p) {
  switch (p) {
    case PositionKind::P1: return "P1";
    case PositionKind::P2: return "P2";
    case PositionKind::P3: return "P3";
    case PositionKind::P4: return "P4";
  }
  return "?";
}
inline const char* to_string(SegmentKind s) {
  switch (s) {
    case SegmentKind::S1: return "S1";
    case SegmentKind::S2: return "S2";
    case SegmentKind::S3: return "S3";
    case SegmentKind::S4: return "S4";
  }
  return "?";
}

inline PositionKind position_from_string(const std::string& s) {
  if (s == "P1") return PositionKind::P1;
  if (s == "P2") return PositionKind::P2;
  if (s == "P3") return PositionKind::P3;
  if (s == "P4") return PositionKind::P4;
  throw std::invalid_argument("unknown position kind: " + s);
}
inline SegmentKind segment_from_string(const std::string& s) {
  if (s == "S1") return SegmentKind::S1;
  if (s == "S2") return SegmentKind::S2;
  if (s == "S3") return SegmentKind::S3;
  if (s == "S4") return SegmentKind::S4;
  throw std::invalid_argument("unknown segment kind: " + s);
}

struct SplitManifest {
  std::vector<AttributeValue> attribute_grid;
  std::array<int, 2> source_indices{};
  std::vector<int> probe_indices;
  std::vector<int> unseen_indices;
  PositionKind position_kind = PositionKind::P1;
  std::optional<SegmentKind> segment_kind;
  std::uint64_t seed = 0;

  int grid_size() const { return static_cast<int>(attribute_grid.size()); }
};

inline void validate(const SplitManifest& m) {
  int n = m.grid_size();
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  auto mark = [&](int i) {
    require(i >= 0 && i < n, "SplitManifest: index out of range");
    require(seen[static_cast<std::size_t>(i)] == 0, "SplitManifest: index sets not disjoint");
    seen[static_cast<std::size_t>(i)] = 1;
  };
  mark(m.source_indices[0]);
  mark(m.source_indices[1]);
  for (int i : m.probe_indices) mark(i);
  for (int i : m.unseen_indices) mark(i);
  for (int v : seen) require(v == 1, "SplitManifest: index sets do not cover the grid");
}

inline Role role_of(const SplitManifest& m, int index) {
  if (index == m.source_indices[0] || index == m.source_indices[1]) return Role::source;
  for (int i : m.probe_indices)
    if (i == index) return Role::probe_target;
  return Role::unseen_target;
}

// Default interior source positions, following the grid layouts used by the
// 9-domain and 10-domain benchmarks.
inline std::array<int, 2> default_source_positions(PositionKind p, int grid_size) {
  if (p == PositionKind::P1) return {0, grid_size - 1};
  if (grid_size == 9) {
    switch (p) {
      case PositionKind::P2: return {2, 6};
      case PositionKind::P3: return {3, 6};
      case PositionKind::P4: return {4, 6};
      default: break;
    }
  }
  if (grid_size == 10) {
    switch (p) {
      case PositionKind::P2: return {1, 7};
      case PositionKind::P3: return {2, 6};
      case PositionKind::P4: return {3, 6};
      default: break;
    }
  }
  throw ConfigError("no default source positions for this grid size; pass them explicitly");
}

struct SplitOptions {
  double probe_fraction = 0.5;
  std::optional<std::array<int, 2>> source_positions;  // overrides the defaults for P2-P4
  std::optional<int> probe_count;                      // overrides the fraction-derived count
};

inline SplitManifest build_split(PositionKind position_kind, std::optional<SegmentKind> segment_kind,
                                 const std::vector<AttributeValue>& attribute_grid,
                                 std::uint64_t seed, const SplitOptions& opts = {}) {
  const int n = static_cast<int>(attribute_grid.size());
  require(n >= 5, "build_split: grid must have at least 5 attributes");
  require(opts.probe_fraction > 0.0 && opts.probe_fraction <= 1.0,
          "build_split: probe_fraction must be in (0,1]");
  if (position_kind == PositionKind::P1)
    require(!segment_kind.has_value(), "build_split: P1 takes no segment kind");
  else
    require(segment_kind.has_value(), "build_split: P2-P4 require a segment kind");

  SplitManifest m;
  m.attribute_grid = attribute_grid;
  m.position_kind = position_kind;
  m.segment_kind = segment_kind;
  m.seed = seed;
  std::array<int, 2> src = opts.source_positions.has_value()
                               ? *opts.source_positions
                               : default_source_positions(position_kind, n);
  require(src[0] >= 0 && src[1] < n && src[0] < src[1], "build_split: bad source positions");
  if (position_kind != PositionKind::P1)
    require(src[0] > 0 || src[1] < n - 1, "build_split: P2-P4 sources must be interior");
  m.source_indices = src;

  // candidate pool for probe sampling
  std::vector<int> pool;
  if (position_kind == PositionKind::P1) {
    for (int i = src[0] + 1; i < src[1]; ++i) pool.push_back(i);
  } else {
    std::vector<int> left, middle, right;
    for (int i = 0; i < src[0]; ++i) left.push_back(i);
    for (int i = src[0] + 1; i < src[1]; ++i) middle.push_back(i);
    for (int i = src[1] + 1; i < n; ++i) right.push_back(i);
    switch (*segment_kind) {
      case SegmentKind::S1:
        pool = left;
        pool.insert(pool.end(), middle.begin(), middle.end());
        pool.insert(pool.end(), right.begin(), right.end());
        break;
      case SegmentKind::S2:
        pool = left;
        pool.insert(pool.end(), middle.begin(), middle.end());
        break;
      case SegmentKind::S3: pool = middle; break;
      case SegmentKind::S4: pool = left; break;
    }
    require_config(!pool.empty(), "build_split: requested segment is empty for these source positions");
  }

  int count;
  if (opts.probe_count.has_value()) {
    count = *opts.probe_count;
    require(count >= 0 && count <= static_cast<int>(pool.size()), "build_split: probe_count out of range");
  } else {
    // round half up on the candidate count
    count = static_cast<int>(std::floor(opts.probe_fraction * static_cast<double>(pool.size()) + 0.5));
  }

  Rng rng(derive_seed(seed, "split"));
  std::vector<int> picked = pool;
  rng.shuffle(picked);
  picked.resize(static_cast<std::size_t>(count));
  std::sort(picked.begin(), picked.end());
  m.probe_indices = picked;

  for (int i = 0; i < n; ++i) {
    if (i == src[0] || i == src[1]) continue;
    bool probed = std::find(picked.begin(), picked.end(), i) != picked.end();
    if (!probed) m.unseen_indices.push_back(i);
  }
  validate(m);
  return m;
}

// Evenly spaced attribute grid over a closed range.
inline std::vector<AttributeValue> make_attribute_grid(double lo, double hi, int count) {
  require(count >= 2, "make_attribute_grid: need at least 2 points");
  std::vector<AttributeValue> g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    g[static_cast<std::size_t>(i)] = AttributeValue{lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1)};
  return g;
}

}  // namespace cda
