#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "popri/corpus.hpp"
#include "popri/errors.hpp"
#include "popri/rng.hpp"

namespace popri {

// Conditioning for one generation: an optional class id (conditional mode)
// and an optional seed token standing in for a random prompt. The seed token
// acts as the preceding context, so the first response token is drawn from
// its transition row.
struct PromptContext {
  std::optional<int> class_label;
  std::optional<int> seed_token;

  bool operator==(const PromptContext& o) const = default;
};

namespace detail {

inline void softmax_inplace(std::span<double> logits, double temperature = 1.0) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double& v : logits) {
    v = std::exp((v - m) / temperature);
    z += v;
  }
  for (double& v : logits) v /= z;
}

inline double log_sum_exp(std::span<const double> logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return m + std::log(z);
}

inline int argmax_lowest(std::span<const double> v, int limit) {
  int best = 0;
  for (int i = 1; i < limit; ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

}  // namespace detail

// First-order autoregressive generator over the vocabulary: a start-logit
// row, a V x V transition matrix, and optional per-class start-bias rows for
// conditional generation. Generation ends when the EOS token is drawn or the
// length cap is hit. Small enough that log-probabilities are exact and
// enumerable, which is what the oracle tests lean on.
class BigramPolicy {
 public:
  BigramPolicy() = default;
  BigramPolicy(Vocabulary vocab, int num_classes = 0)
      : vocab_(vocab),
        num_classes_(num_classes),
        start_(static_cast<std::size_t>(vocab.size), 0.0),
        trans_(static_cast<std::size_t>(vocab.size) * vocab.size, 0.0),
        class_bias_(static_cast<std::size_t>(num_classes) * vocab.size, 0.0) {
    if (num_classes < 0) throw ConfigError("negative class count");
  }

  const Vocabulary& vocab() const { return vocab_; }
  int num_classes() const { return num_classes_; }

  std::span<double> start_logits() { return start_; }
  std::span<const double> start_logits() const { return start_; }
  std::span<double> trans_row(int token) { return {trans_.data() + index(token), vsize()}; }
  std::span<const double> trans_row(int token) const {
    return {trans_.data() + index(token), vsize()};
  }
  std::span<double> class_bias_row(int b) { return {class_bias_.data() + bindex(b), vsize()}; }
  std::span<const double> class_bias_row(int b) const {
    return {class_bias_.data() + bindex(b), vsize()};
  }

  // Logits governing the first response token: the seed token's transition
  // row when a seed is present (start row otherwise), plus the class bias.
  std::vector<double> first_step_logits(const PromptContext& prompt) const {
    std::vector<double> row;
    if (prompt.seed_token) {
      if (*prompt.seed_token < 0 || *prompt.seed_token >= vocab_.eos())
        throw InvalidTokenError("seed token " + std::to_string(*prompt.seed_token));
      auto r = trans_row(*prompt.seed_token);
      row.assign(r.begin(), r.end());
    } else {
      row.assign(start_.begin(), start_.end());
    }
    if (prompt.class_label) {
      if (*prompt.class_label < 0 || *prompt.class_label >= num_classes_)
        throw ConfigError("class label " + std::to_string(*prompt.class_label) +
                          " outside [0, " + std::to_string(num_classes_) + ")");
      auto b = class_bias_row(*prompt.class_label);
      for (std::size_t i = 0; i < row.size(); ++i) row[i] += b[i];
    }
    return row;
  }

  void check_finite() const {
    for (double v : start_)
      if (!std::isfinite(v)) throw NumericError("non-finite start logit");
    for (double v : trans_)
      if (!std::isfinite(v)) throw NumericError("non-finite transition logit");
    for (double v : class_bias_)
      if (!std::isfinite(v)) throw NumericError("non-finite class bias");
  }

  bool operator==(const BigramPolicy& o) const {
    return vocab_.size == o.vocab_.size && num_classes_ == o.num_classes_ &&
           start_ == o.start_ && trans_ == o.trans_ && class_bias_ == o.class_bias_;
  }

  // Flat parameter access used by the optimizer and DP-FedAvg deltas.
  std::size_t parameter_count() const { return start_.size() + trans_.size() + class_bias_.size(); }
  double parameter(std::size_t i) const {
    if (i < start_.size()) return start_[i];
    i -= start_.size();
    if (i < trans_.size()) return trans_[i];
    return class_bias_[i - trans_.size()];
  }
  double& parameter(std::size_t i) {
    if (i < start_.size()) return start_[i];
    i -= start_.size();
    if (i < trans_.size()) return trans_[i];
    return class_bias_[i - trans_.size()];
  }

 private:
  std::size_t vsize() const { return static_cast<std::size_t>(vocab_.size); }
  std::size_t index(int token) const {
    if (token < 0 || token >= vocab_.size) throw InvalidTokenError(std::to_string(token));
    return static_cast<std::size_t>(token) * vsize();
  }
  std::size_t bindex(int b) const {
    if (b < 0 || b >= num_classes_) throw ConfigError("class index " + std::to_string(b));
    return static_cast<std::size_t>(b) * vsize();
  }

  Vocabulary vocab_;
  int num_classes_ = 0;
  std::vector<double> start_;
  std::vector<double> trans_;
  std::vector<double> class_bias_;
};

// Frozen snapshot of a policy; immutable after capture.
class ReferencePolicy {
 public:
  explicit ReferencePolicy(BigramPolicy policy) : policy_(std::move(policy)) {}
  const BigramPolicy& get() const { return policy_; }
  bool operator==(const ReferencePolicy& o) const { return policy_ == o.policy_; }

 private:
  BigramPolicy policy_;
};

inline ReferencePolicy snapshot_reference(const BigramPolicy& policy) {
  return ReferencePolicy(policy);
}

// Autoregressive sampling at the given temperature. The first draw is
// rejected while it lands on EOS (an empty sample is not a sequence); the
// retry cap falls back to the best content token so termination never
// depends on the draw sequence.
inline TokenSequence sample(const BigramPolicy& policy, const PromptContext& prompt,
                            double temperature, Rng& rng, int max_len = kDefaultMaxLen) {
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  const int eos = policy.vocab().eos();

  std::vector<double> probs = policy.first_step_logits(prompt);
  detail::softmax_inplace(probs, temperature);
  int first = static_cast<int>(rng.categorical(probs));
  for (int attempt = 0; first == eos && attempt < 256; ++attempt)
    first = static_cast<int>(rng.categorical(probs));
  if (first == eos) {
    const auto logits = policy.first_step_logits(prompt);
    first = detail::argmax_lowest(logits, policy.vocab().content_tokens());
  }

  std::vector<int> toks{first};
  while (static_cast<int>(toks.size()) < max_len) {
    auto row = policy.trans_row(toks.back());
    probs.assign(row.begin(), row.end());
    detail::softmax_inplace(probs, temperature);
    const int t = static_cast<int>(rng.categorical(probs));
    if (t == eos) break;
    toks.push_back(t);
  }
  return TokenSequence(std::move(toks));
}

// Exact log-probability of generating `seq` given `prompt`, including the
// stop event: sequences shorter than max_len pay the EOS log-probability
// from their last state; length-max_len sequences end by the cap and pay no
// stop term. Summed over all sequences up to max_len this distribution is
// exactly normalized (the immediate-EOS outcome carries the remaining mass).
inline double log_prob(const BigramPolicy& policy, const PromptContext& prompt,
                       const TokenSequence& seq, int max_len = kDefaultMaxLen) {
  const int eos = policy.vocab().eos();
  if (seq.length() > max_len)
    throw ConfigError("sequence length " + std::to_string(seq.length()) + " exceeds cap " +
                      std::to_string(max_len));
  for (int t : seq.tokens)
    if (t < 0 || t >= eos) throw InvalidTokenError("response token " + std::to_string(t));

  const auto first = policy.first_step_logits(prompt);
  double lp = first[static_cast<std::size_t>(seq.tokens[0])] - detail::log_sum_exp(first);
  for (int i = 1; i < seq.length(); ++i) {
    auto row = policy.trans_row(seq.tokens[i - 1]);
    lp += row[static_cast<std::size_t>(seq.tokens[i])] - detail::log_sum_exp(row);
  }
  if (seq.length() < max_len) {
    auto row = policy.trans_row(seq.tokens.back());
    lp += row[static_cast<std::size_t>(eos)] - detail::log_sum_exp(row);
  }
  return lp;
}

inline double log_prob(const ReferencePolicy& ref, const PromptContext& prompt,
                       const TokenSequence& seq, int max_len = kDefaultMaxLen) {
  return log_prob(ref.get(), prompt, seq, max_len);
}

// ---------------------------------------------------------------------------
// Ground-truth corpora and policy construction helpers
// ---------------------------------------------------------------------------

// Deterministic synthetic federation: client i holds m_i ~ U[m_min, m_max]
// samples drawn from the truth policy. Stands in for a tokenized text corpus.
inline Corpus sample_ground_truth_corpus(const BigramPolicy& truth, int n_clients, int m_min,
                                         int m_max, std::uint64_t seed,
                                         int max_len = kDefaultMaxLen) {
  if (n_clients < 1) throw ConfigError("need at least one client");
  if (m_min < 1 || m_max > 64 || m_min > m_max)
    throw ConfigError("sample count range [" + std::to_string(m_min) + ", " +
                      std::to_string(m_max) + "] outside [1, 64]");
  Corpus corpus;
  corpus.vocab = truth.vocab();
  Rng root(seed);
  for (int i = 0; i < n_clients; ++i) {
    Rng client_rng = root.derive({stream::kCorpus, static_cast<std::uint64_t>(i)});
    ClientDataset c;
    c.client_id = i;
    const int m = m_min + static_cast<int>(client_rng.uniform_int(
                              static_cast<std::uint64_t>(m_max - m_min + 1)));
    for (int j = 0; j < m; ++j)
      c.samples.push_back(sample(truth, PromptContext{}, 1.0, client_rng, max_len));
    corpus.clients.push_back(std::move(c));
  }
  return corpus;
}

// Structured truth policy: a shared skewed token profile (the dominant,
// learnable unigram signal) plus a milder per-state preferred successor so
// next-token prediction has a real ceiling above the unigram level. EOS gets
// a fixed mild rate so lengths vary.
inline BigramPolicy make_truth_policy(const Vocabulary& vocab, std::uint64_t seed,
                                      double global_sharpness = 2.5,
                                      double row_sharpness = 1.2) {
  BigramPolicy p(vocab, 0);
  Rng rng = Rng(seed).derive({stream::kTruth});
  const int content = vocab.content_tokens();
  std::vector<double> profile(static_cast<std::size_t>(content));
  for (double& w : profile) w = rng.gaussian();
  for (int row = -1; row < vocab.size; ++row) {
    auto logits = row < 0 ? p.start_logits() : p.trans_row(row);
    for (int t = 0; t < content; ++t)
      logits[static_cast<std::size_t>(t)] =
          global_sharpness * 0.5 * profile[static_cast<std::size_t>(t)] + rng.gaussian() * 0.2;
    const int preferred = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content)));
    logits[static_cast<std::size_t>(preferred)] += row_sharpness;
    logits[static_cast<std::size_t>(vocab.eos())] = -0.2;  // ~5-10% stop rate per step
  }
  return p;
}

// Per-class truth policies over (mostly) disjoint token ranges; class b
// concentrates on its slice of the content tokens.
inline std::vector<BigramPolicy> make_conditional_truths(const Vocabulary& vocab, int num_classes,
                                                         std::uint64_t seed,
                                                         double sharpness = 3.0) {
  if (num_classes < 1) throw ConfigError("need at least one class");
  std::vector<BigramPolicy> out;
  const int content = vocab.content_tokens();
  for (int b = 0; b < num_classes; ++b) {
    BigramPolicy p = make_truth_policy(vocab, seed + static_cast<std::uint64_t>(b) * 7919u,
                                       sharpness);
    const int lo = b * content / num_classes;
    const int hi = (b + 1) * content / num_classes;
    for (int row = -1; row < vocab.size; ++row) {
      auto logits = row < 0 ? p.start_logits() : p.trans_row(row);
      for (int t = 0; t < content; ++t)
        if (t < lo || t >= hi) logits[static_cast<std::size_t>(t)] -= 2.0 * sharpness;
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Small random perturbation around uniform; the usual starting point for the
// generator being trained.
inline BigramPolicy make_initial_policy(const Vocabulary& vocab, int num_classes,
                                        std::uint64_t seed, double scale = 0.1) {
  BigramPolicy p(vocab, num_classes);
  Rng rng = Rng(seed).derive({stream::kInit});
  for (std::size_t i = 0; i < p.parameter_count(); ++i) p.parameter(i) = rng.gaussian() * scale;
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   popri-policy v1
//   vocab <V>
//   classes <B>
//   start: one line of V logits
//   trans: V lines of V logits
//   bias:  B lines of V logits
//
// Floats are written with 17 significant digits so reload is bit-exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_row(std::ostream& out, std::span<const double> row) {
  char buf[32];
  for (std::size_t i = 0; i < row.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", row[i]);
    if (i) out << ' ';
    out << buf;
  }
  out << "\n";
}

inline void read_row(std::istream& in, std::span<double> row, const char* what) {
  for (double& v : row)
    if (!(in >> v)) throw ParseError(std::string("truncated checkpoint while reading ") + what);
}

}  // namespace detail

inline void save_policy(const BigramPolicy& policy, std::ostream& out) {
  out << "popri-policy v1\n";
  out << "vocab " << policy.vocab().size << "\n";
  out << "classes " << policy.num_classes() << "\n";
  detail::write_row(out, policy.start_logits());
  for (int t = 0; t < policy.vocab().size; ++t) detail::write_row(out, policy.trans_row(t));
  for (int b = 0; b < policy.num_classes(); ++b) detail::write_row(out, policy.class_bias_row(b));
}

inline void save_policy(const BigramPolicy& policy, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  save_policy(policy, out);
}

inline BigramPolicy load_policy(std::istream& in) {
  std::string magic, version, key;
  in >> magic >> version;
  if (magic != "popri-policy" || version != "v1")
    throw ParseError("not a popri-policy v1 checkpoint");
  int vsize = 0, classes = 0;
  in >> key >> vsize;
  if (key != "vocab") throw ParseError("expected 'vocab' in checkpoint");
  in >> key >> classes;
  if (key != "classes") throw ParseError("expected 'classes' in checkpoint");
  BigramPolicy p(Vocabulary(vsize), classes);
  detail::read_row(in, p.start_logits(), "start logits");
  for (int t = 0; t < vsize; ++t) detail::read_row(in, p.trans_row(t), "transition logits");
  for (int b = 0; b < classes; ++b) detail::read_row(in, p.class_bias_row(b), "class bias");
  return p;
}

inline BigramPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  return load_policy(in);
}

}  // namespace popri
