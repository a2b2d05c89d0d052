#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "popri/corpus.hpp"
#include "popri/errors.hpp"

namespace popri {

// K x J score matrix in prompt-major order: entry (k, j) is the score of the
// j-th generated response of prompt k, stable across a whole round.
struct ScoreMatrix {
  int prompts = 0;    // K
  int responses = 0;  // J
  std::vector<double> values;

  ScoreMatrix() = default;
  ScoreMatrix(int k, int j) : prompts(k), responses(j) {
    if (k < 1 || j < 1) throw ConfigError("score matrix needs K, J >= 1");
    values.assign(static_cast<std::size_t>(k) * j, 0.0);
  }
  static ScoreMatrix from_flat(int k, int j, std::vector<double> flat) {
    ScoreMatrix m(k, j);
    if (flat.size() != m.values.size())
      throw DimensionMismatchError("flat score vector of size " + std::to_string(flat.size()) +
                                   " for " + std::to_string(k) + "x" + std::to_string(j));
    m.values = std::move(flat);
    return m;
  }

  double at(int k, int j) const { return values[static_cast<std::size_t>(k) * responses + j]; }
  double& at(int k, int j) { return values[static_cast<std::size_t>(k) * responses + j]; }

  void check_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) throw NumericError("non-finite score");
  }
};

// Indices of one constructed preference pair within its round's candidates.
struct PairSelection {
  int prompt;
  int chosen;
  int rejected;
};

// Which per-client statistic feeds the DP release.
enum class ScoreMode {
  kCosine,       // mean cosine similarity per candidate
  kNnHistogram,  // nearest-candidate count histogram (the PE statistic)
};

// Scores[j] = mean over `private_embs` of cosine(e_pri, candidate_j). This is
// both the per-client statistic (private_embs = one client's samples) and the
// central statistic (private_embs = the whole dataset).
inline std::vector<double> mean_cosine_scores(const std::vector<EmbeddingVector>& private_embs,
                                              const std::vector<EmbeddingVector>& candidates) {
  if (private_embs.empty()) throw ConfigError("no private embeddings to score with");
  if (candidates.empty()) throw ConfigError("no candidate embeddings to score");
  std::vector<double> scores(candidates.size(), 0.0);
  for (const auto& e : private_embs)
    for (std::size_t j = 0; j < candidates.size(); ++j) scores[j] += cosine(e, candidates[j]);
  for (double& s : scores) s /= static_cast<double>(private_embs.size());
  return scores;
}

// Histogram[j] = number of private embeddings whose cosine-nearest candidate
// is j (ties go to the lowest candidate index). Integer-valued per client.
inline std::vector<double> nn_histogram_counts(const std::vector<EmbeddingVector>& private_embs,
                                               const std::vector<EmbeddingVector>& candidates) {
  if (private_embs.empty()) throw ConfigError("no private embeddings to score with");
  if (candidates.empty()) throw ConfigError("no candidate embeddings to score");
  std::vector<double> hist(candidates.size(), 0.0);
  for (const auto& e : private_embs) {
    std::size_t best = 0;
    double best_cos = cosine(e, candidates[0]);
    for (std::size_t j = 1; j < candidates.size(); ++j) {
      const double c = cosine(e, candidates[j]);
      if (c > best_cos) {
        best_cos = c;
        best = j;
      }
    }
    hist[best] += 1.0;
  }
  return hist;
}

inline std::vector<double> raw_client_scores(ScoreMode mode,
                                             const std::vector<EmbeddingVector>& private_embs,
                                             const std::vector<EmbeddingVector>& candidates) {
  return mode == ScoreMode::kCosine ? mean_cosine_scores(private_embs, candidates)
                                    : nn_histogram_counts(private_embs, candidates);
}

inline double zero_fraction(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  std::size_t zeros = 0;
  for (double x : v)
    if (x == 0.0) ++zeros;
  return static_cast<double>(zeros) / static_cast<double>(v.size());
}

}  // namespace popri
