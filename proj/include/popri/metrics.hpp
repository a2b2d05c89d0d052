#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "popri/corpus.hpp"
#include "popri/errors.hpp"
#include "popri/scores.hpp"

namespace popri {

namespace linalg {

// Small dense symmetric eigensolver (cyclic Jacobi). Dimensions here are
// V - 1, i.e. tiny; no external linear algebra needed.
struct SymmetricEigen {
  std::vector<double> values;   // descending
  std::vector<double> vectors;  // column j = eigenvector of values[j], row-major n x n
};

inline SymmetricEigen jacobi_eigh(std::vector<double> a, int n) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) s += a[static_cast<std::size_t>(p) * n + q] *
                                           a[static_cast<std::size_t>(p) * n + q];
    return std::sqrt(2.0 * s);
  };
  double scale = 0.0;
  for (double x : a) scale = std::max(scale, std::abs(x));
  const double tol = std::max(1e-300, 1e-14 * std::max(scale, 1.0));

  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[static_cast<std::size_t>(p) * n + q];
        if (std::abs(apq) <= 1e-300) continue;
        const double app = a[static_cast<std::size_t>(p) * n + p];
        const double aqq = a[static_cast<std::size_t>(q) * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[static_cast<std::size_t>(k) * n + p];
          const double akq = a[static_cast<std::size_t>(k) * n + q];
          a[static_cast<std::size_t>(k) * n + p] = c * akp - s * akq;
          a[static_cast<std::size_t>(k) * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[static_cast<std::size_t>(p) * n + k];
          const double aqk = a[static_cast<std::size_t>(q) * n + k];
          a[static_cast<std::size_t>(p) * n + k] = c * apk - s * aqk;
          a[static_cast<std::size_t>(q) * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v[static_cast<std::size_t>(k) * n + p];
          const double vkq = v[static_cast<std::size_t>(k) * n + q];
          v[static_cast<std::size_t>(k) * n + p] = c * vkp - s * vkq;
          v[static_cast<std::size_t>(k) * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  SymmetricEigen out;
  out.values.resize(static_cast<std::size_t>(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.values[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i) * n + i];
    order[static_cast<std::size_t>(i)] = i;
  }
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return a[static_cast<std::size_t>(x) * n + x] > a[static_cast<std::size_t>(y) * n + y];
  });
  SymmetricEigen sorted;
  sorted.values.resize(static_cast<std::size_t>(n));
  sorted.vectors.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int j = 0; j < n; ++j) {
    sorted.values[static_cast<std::size_t>(j)] = out.values[static_cast<std::size_t>(order[j])];
    for (int i = 0; i < n; ++i)
      sorted.vectors[static_cast<std::size_t>(i) * n + j] =
          v[static_cast<std::size_t>(i) * n + order[j]];
  }
  return sorted;
}

}  // namespace linalg

// Gaussian fit of an embedding set: mean and unbiased sample covariance.
struct GaussianSummary {
  std::vector<double> mean;
  std::vector<double> covariance;  // row-major dim x dim, symmetric
  int dim = 0;
};

inline GaussianSummary summarize_embeddings(const std::vector<EmbeddingVector>& set) {
  if (set.size() < 2) throw ConfigError("need at least two embeddings for a Gaussian summary");
  const int d = set[0].dim();
  GaussianSummary g;
  g.dim = d;
  g.mean.assign(static_cast<std::size_t>(d), 0.0);
  g.covariance.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (const auto& e : set) {
    if (e.dim() != d) throw DimensionMismatchError("ragged embedding set");
    for (int i = 0; i < d; ++i) g.mean[static_cast<std::size_t>(i)] += e.coords[static_cast<std::size_t>(i)];
  }
  for (double& m : g.mean) m /= static_cast<double>(set.size());
  for (const auto& e : set)
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j)
        g.covariance[static_cast<std::size_t>(i) * d + j] +=
            (e.coords[static_cast<std::size_t>(i)] - g.mean[static_cast<std::size_t>(i)]) *
            (e.coords[static_cast<std::size_t>(j)] - g.mean[static_cast<std::size_t>(j)]);
  const double inv = 1.0 / static_cast<double>(set.size() - 1);
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) {
      g.covariance[static_cast<std::size_t>(i) * d + j] *= inv;
      g.covariance[static_cast<std::size_t>(j) * d + i] =
          g.covariance[static_cast<std::size_t>(i) * d + j];
    }
  return g;
}

namespace detail {

// trace of (S_a^{1/2} S_b S_a^{1/2})^{1/2} via symmetric eigendecompositions;
// eigenvalues below zero (roundoff) are clamped.
inline double trace_sqrt_product(const std::vector<double>& sa, const std::vector<double>& sb,
                                 int d) {
  auto ea = linalg::jacobi_eigh(sa, d);
  std::vector<double> root_a(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k)
        s += ea.vectors[static_cast<std::size_t>(i) * d + k] *
             std::sqrt(std::max(0.0, ea.values[static_cast<std::size_t>(k)])) *
             ea.vectors[static_cast<std::size_t>(j) * d + k];
      root_a[static_cast<std::size_t>(i) * d + j] = s;
    }
  // m = root_a * sb * root_a, symmetrized
  std::vector<double> tmp(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k)
        s += root_a[static_cast<std::size_t>(i) * d + k] * sb[static_cast<std::size_t>(k) * d + j];
      tmp[static_cast<std::size_t>(i) * d + j] = s;
    }
  std::vector<double> m(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k)
        s += tmp[static_cast<std::size_t>(i) * d + k] * root_a[static_cast<std::size_t>(k) * d + j];
      m[static_cast<std::size_t>(i) * d + j] = s;
    }
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const double avg = 0.5 * (m[static_cast<std::size_t>(i) * d + j] +
                                m[static_cast<std::size_t>(j) * d + i]);
      m[static_cast<std::size_t>(i) * d + j] = avg;
      m[static_cast<std::size_t>(j) * d + i] = avg;
    }
  auto em = linalg::jacobi_eigh(m, d);
  double trace = 0.0;
  for (double lam : em.values) trace += std::sqrt(std::max(0.0, lam));
  return trace;
}

}  // namespace detail

inline constexpr double kFidCovarianceRegularizer = 1e-8;

// Frechet distance between the Gaussian fits of two embedding sets:
//   ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
inline double fid(const std::vector<EmbeddingVector>& a, const std::vector<EmbeddingVector>& b) {
  const GaussianSummary ga = summarize_embeddings(a);
  const GaussianSummary gb = summarize_embeddings(b);
  if (ga.dim != gb.dim) throw DimensionMismatchError("embedding sets of different dimension");
  const int d = ga.dim;

  double mean_sq = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = ga.mean[static_cast<std::size_t>(i)] - gb.mean[static_cast<std::size_t>(i)];
    mean_sq += diff * diff;
  }

  std::vector<double> sa = ga.covariance, sb = gb.covariance;
  for (int i = 0; i < d; ++i) {
    sa[static_cast<std::size_t>(i) * d + i] += kFidCovarianceRegularizer;
    sb[static_cast<std::size_t>(i) * d + i] += kFidCovarianceRegularizer;
  }
  double trace_a = 0.0, trace_b = 0.0;
  for (int i = 0; i < d; ++i) {
    trace_a += sa[static_cast<std::size_t>(i) * d + i];
    trace_b += sb[static_cast<std::size_t>(i) * d + i];
  }
  const double value = mean_sq + trace_a + trace_b - 2.0 * detail::trace_sqrt_product(sa, sb, d);
  return std::max(0.0, value);
}

// ---------------------------------------------------------------------------
// Downstream next-token model: add-one-smoothed bigram over content tokens.
// EOS plays no role here; accuracy is measured on transitions between
// consecutive content tokens, argmax prediction, ties to the lowest id.
// ---------------------------------------------------------------------------

struct DownstreamModel {
  int num_tokens = 0;          // V - 1
  std::vector<double> logits;  // num_tokens x num_tokens, row = previous token

  int argmax_next(int prev) const {
    const double* row = logits.data() + static_cast<std::size_t>(prev) * num_tokens;
    int best = 0;
    for (int t = 1; t < num_tokens; ++t)
      if (row[t] > row[best]) best = t;
    return best;
  }
};

inline DownstreamModel fit_downstream(const std::vector<TokenSequence>& corpus,
                                      const Vocabulary& vocab) {
  if (corpus.empty()) throw ConfigError("empty training corpus for downstream model");
  const int n = vocab.content_tokens();
  std::vector<double> counts(static_cast<std::size_t>(n) * n, 0.0);
  for (const auto& s : corpus) {
    for (int i = 1; i < s.length(); ++i) {
      const int prev = s.tokens[i - 1], next = s.tokens[i];
      if (prev >= n || next >= n) continue;  // EOS never predicted nor conditioned on
      counts[static_cast<std::size_t>(prev) * n + next] += 1.0;
    }
  }
  DownstreamModel m;
  m.num_tokens = n;
  m.logits.resize(counts.size());
  for (int p = 0; p < n; ++p) {
    double row_total = 0.0;
    for (int t = 0; t < n; ++t) row_total += counts[static_cast<std::size_t>(p) * n + t];
    for (int t = 0; t < n; ++t)
      m.logits[static_cast<std::size_t>(p) * n + t] =
          std::log((counts[static_cast<std::size_t>(p) * n + t] + 1.0) / (row_total + n));
  }
  return m;
}

inline DownstreamModel fit_downstream(const Corpus& corpus) {
  std::vector<TokenSequence> flat;
  for (const auto& c : corpus.clients)
    flat.insert(flat.end(), c.samples.begin(), c.samples.end());
  return fit_downstream(flat, corpus.vocab);
}

inline double next_token_accuracy(const DownstreamModel& model,
                                  const std::vector<TokenSequence>& test) {
  if (test.empty()) throw ConfigError("empty test corpus");
  long positions = 0, hits = 0;
  for (const auto& s : test) {
    for (int i = 1; i < s.length(); ++i) {
      const int prev = s.tokens[i - 1], next = s.tokens[i];
      if (prev >= model.num_tokens || next >= model.num_tokens) continue;
      ++positions;
      if (model.argmax_next(prev) == next) ++hits;
    }
  }
  if (positions == 0) throw ConfigError("test corpus has no token transitions");
  return static_cast<double>(hits) / static_cast<double>(positions);
}

inline double next_token_accuracy(const DownstreamModel& model, const Corpus& corpus) {
  std::vector<TokenSequence> flat;
  for (const auto& c : corpus.clients)
    flat.insert(flat.end(), c.samples.begin(), c.samples.end());
  return next_token_accuracy(model, flat);
}

// Fraction of constructed pairs whose true (non-noised, non-clipped) chosen
// score strictly exceeds the rejected score.
inline double recovery_rate(const ScoreMatrix& true_scores,
                            const std::vector<PairSelection>& selection) {
  if (selection.empty()) throw ConfigError("recovery rate over zero pairs");
  long recovered = 0;
  for (const auto& sel : selection) {
    if (sel.prompt < 0 || sel.prompt >= true_scores.prompts || sel.chosen < 0 ||
        sel.chosen >= true_scores.responses || sel.rejected < 0 ||
        sel.rejected >= true_scores.responses)
      throw ConfigError("pair indices outside the true score matrix");
    if (true_scores.at(sel.prompt, sel.chosen) > true_scores.at(sel.prompt, sel.rejected))
      ++recovered;
  }
  return static_cast<double>(recovered) / static_cast<double>(selection.size());
}

// Medoid: element minimizing summed Euclidean distance (ties -> lowest
// index); returns the median of all distances to it.
inline double median_medoid_distance(const std::vector<EmbeddingVector>& set) {
  if (set.size() < 2) throw ConfigError("medoid distance needs at least two points");
  const std::size_t n = set.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < set[i].dim(); ++k) {
        const double d = set[i].coords[static_cast<std::size_t>(k)] -
                         set[j].coords[static_cast<std::size_t>(k)];
        s += d * d;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(s);
    }
  std::size_t medoid = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += dist[i * n + j];
    if (total < best) {
      best = total;
      medoid = i;
    }
  }
  std::vector<double> to_medoid(n);
  for (std::size_t j = 0; j < n; ++j) to_medoid[j] = dist[medoid * n + j];
  std::sort(to_medoid.begin(), to_medoid.end());
  return n % 2 == 1 ? to_medoid[n / 2] : 0.5 * (to_medoid[n / 2 - 1] + to_medoid[n / 2]);
}

// 2-component PCA by power iteration with deflation.
struct Pca2Result {
  std::vector<std::array<double, 2>> points;
  std::array<double, 2> eigenvalues{0.0, 0.0};
  std::vector<double> components;  // 2 rows of dim entries
};

inline Pca2Result pca2(const std::vector<EmbeddingVector>& set) {
  if (set.size() < 2) throw ConfigError("pca2 needs at least two points");
  const GaussianSummary g = summarize_embeddings(set);
  const int d = g.dim;
  std::vector<double> cov = g.covariance;

  auto power_iterate = [&](std::vector<double>& vec) -> double {
    // deterministic start: basis vector at the largest diagonal entry
    int start = 0;
    for (int i = 1; i < d; ++i)
      if (cov[static_cast<std::size_t>(i) * d + i] > cov[static_cast<std::size_t>(start) * d + start])
        start = i;
    vec.assign(static_cast<std::size_t>(d), 0.0);
    vec[static_cast<std::size_t>(start)] = 1.0;
    std::vector<double> next(static_cast<std::size_t>(d));
    double lambda = 0.0;
    for (int iter = 0; iter < 200000; ++iter) {
      for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j)
          s += cov[static_cast<std::size_t>(i) * d + j] * vec[static_cast<std::size_t>(j)];
        next[static_cast<std::size_t>(i)] = s;
      }
      double norm = 0.0;
      for (double x : next) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) return 0.0;  // degenerate direction: eigenvalue 0
      double delta = 0.0;
      for (int i = 0; i < d; ++i) {
        next[static_cast<std::size_t>(i)] /= norm;
        delta = std::max(delta, std::abs(next[static_cast<std::size_t>(i)] -
                                         vec[static_cast<std::size_t>(i)]));
      }
      vec = next;
      lambda = norm;
      if (delta < 1e-10) break;
    }
    return lambda;
  };

  auto fix_sign = [&](std::vector<double>& vec) {
    int big = 0;
    for (int i = 1; i < d; ++i)
      if (std::abs(vec[static_cast<std::size_t>(i)]) > std::abs(vec[static_cast<std::size_t>(big)]))
        big = i;
    if (vec[static_cast<std::size_t>(big)] < 0.0)
      for (double& x : vec) x = -x;
  };

  Pca2Result out;
  std::vector<double> v1(static_cast<std::size_t>(d));
  out.eigenvalues[0] = power_iterate(v1);
  fix_sign(v1);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      cov[static_cast<std::size_t>(i) * d + j] -=
          out.eigenvalues[0] * v1[static_cast<std::size_t>(i)] * v1[static_cast<std::size_t>(j)];
  std::vector<double> v2(static_cast<std::size_t>(d));
  out.eigenvalues[1] = power_iterate(v2);
  fix_sign(v2);

  out.components.reserve(static_cast<std::size_t>(2) * d);
  out.components.insert(out.components.end(), v1.begin(), v1.end());
  out.components.insert(out.components.end(), v2.begin(), v2.end());
  out.points.reserve(set.size());
  for (const auto& e : set) {
    double x = 0.0, y = 0.0;
    for (int i = 0; i < d; ++i) {
      const double centered =
          e.coords[static_cast<std::size_t>(i)] - g.mean[static_cast<std::size_t>(i)];
      x += centered * v1[static_cast<std::size_t>(i)];
      y += centered * v2[static_cast<std::size_t>(i)];
    }
    out.points.push_back({x, y});
  }
  return out;
}

}  // namespace popri
