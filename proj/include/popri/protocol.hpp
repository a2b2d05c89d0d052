#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "popri/corpus.hpp"
#include "popri/dpo.hpp"
#include "popri/errors.hpp"
#include "popri/metrics.hpp"
#include "popri/policy.hpp"
#include "popri/privacy.hpp"
#include "popri/rng.hpp"
#include "popri/scores.hpp"

namespace popri {

struct RoundConfig {
  int prompts = 40;            // K
  int responses = 10;          // J
  int rejected_rank = 5;       // ell: rejected = ell-th ranked response
  int clients_per_round = 500; // L
  int rounds = 10;             // T
  double temperature = 1.0;
  int final_samples = 400;     // N_syn
  int max_len = kDefaultMaxLen;
  double eval_fraction = 0.2;  // held-out split for FID / downstream accuracy
  ScoreMode scoring = ScoreMode::kCosine;

  void validate() const {
    if (prompts < 1 || responses < 1) throw ConfigError("K and J must be >= 1");
    if (rejected_rank < 2 || rejected_rank > responses)
      throw ConfigError("rejected rank must lie in [2, J]; got " +
                        std::to_string(rejected_rank) + " with J=" + std::to_string(responses));
    if (clients_per_round < 1) throw ConfigError("clients per round must be >= 1");
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (final_samples < 2) throw ConfigError("final sample count must be >= 2");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (eval_fraction <= 0.0 || eval_fraction >= 1.0)
      throw ConfigError("eval fraction must lie in (0, 1)");
  }
};

// Per-round record; materializes the time series the reports are built from.
struct RoundReport {
  int round = 0;  // 0 is the pre-training baseline row
  double fid = std::numeric_limits<double>::quiet_NaN();
  double mean_chosen_true_score = std::numeric_limits<double>::quiet_NaN();
  double mean_rejected_true_score = std::numeric_limits<double>::quiet_NaN();
  double recovery_rate = std::numeric_limits<double>::quiet_NaN();
  int dropped_pairs = 0;
  double epsilon = 0.0;  // accountant value after this round
  double medoid_median_distance = std::numeric_limits<double>::quiet_NaN();
  double downstream_accuracy = std::numeric_limits<double>::quiet_NaN();
  double train_loss = std::numeric_limits<double>::quiet_NaN();
};

struct CandidateSet {
  std::vector<PromptContext> prompts;       // K
  std::vector<TokenSequence> sequences;     // K*J, prompt-major
  std::vector<EmbeddingVector> embeddings;  // parallel to sequences
};

// K prompts (random seed tokens, optional class), J independent responses
// per prompt, deterministic for a given rng stream.
inline CandidateSet generate_candidates(const BigramPolicy& policy, int num_prompts,
                                        int num_responses, double temperature, Rng& rng,
                                        int max_len = kDefaultMaxLen,
                                        std::optional<int> class_label = std::nullopt) {
  if (num_prompts < 1 || num_responses < 1) throw ConfigError("K and J must be >= 1");
  CandidateSet set;
  set.prompts.reserve(static_cast<std::size_t>(num_prompts));
  set.sequences.reserve(static_cast<std::size_t>(num_prompts) * num_responses);
  const int content = policy.vocab().content_tokens();
  for (int k = 0; k < num_prompts; ++k) {
    PromptContext prompt;
    prompt.class_label = class_label;
    prompt.seed_token = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content)));
    for (int j = 0; j < num_responses; ++j)
      set.sequences.push_back(sample(policy, prompt, temperature, rng, max_len));
    set.prompts.push_back(prompt);
  }
  set.embeddings.reserve(set.sequences.size());
  for (const auto& s : set.sequences) set.embeddings.push_back(embed(s, policy.vocab()));
  return set;
}

// One client's upload before noise: scores against all candidates, clipped
// to unit norm.
inline std::vector<double> client_similarity(const std::vector<EmbeddingVector>& client_embs,
                                             const std::vector<EmbeddingVector>& candidates) {
  return clip_to_unit(mean_cosine_scores(client_embs, candidates));
}

inline std::vector<double> client_similarity(const ClientDataset& client, const Vocabulary& vocab,
                                             const std::vector<EmbeddingVector>& candidates) {
  std::vector<EmbeddingVector> embs;
  embs.reserve(client.samples.size());
  for (const auto& s : client.samples) embs.push_back(embed(s, vocab));
  return client_similarity(embs, candidates);
}

// Central scoring: mean cosine against every private embedding, unclipped.
inline std::vector<double> central_score(const std::vector<EmbeddingVector>& candidates,
                                         const std::vector<EmbeddingVector>& private_embs) {
  return mean_cosine_scores(private_embs, candidates);
}

struct ClientView {
  int client_id = 0;
  const std::vector<EmbeddingVector>* embeddings = nullptr;
};

struct AggregateStats {
  double max_upload_norm = 0.0;     // pre-noise clipped norms; must stay <= 1
  double mean_zero_fraction = 0.0;  // sparsity of the raw per-client scores
};

// The client -> server release: each sampled client clips its score vector,
// adds N(0, sigma^2 I / L), and submits to secure aggregation; the server
// sees only the mean. Per-client noise streams are derived from the client
// id, so evaluation order cannot change the outcome.
inline ScoreMatrix aggregate_scores(std::span<const ClientView> clients,
                                    const std::vector<EmbeddingVector>& candidates, int num_prompts,
                                    int num_responses, double sigma, ScoreMode mode,
                                    const Rng& round_noise_rng, AggregateStats* stats = nullptr) {
  if (clients.empty()) throw ConfigError("no clients sampled for aggregation");
  const int L = static_cast<int>(clients.size());
  SecureAggregator aggregator(candidates.size());
  double max_norm = 0.0, zero_frac = 0.0;
  for (const auto& client : clients) {
    const auto raw = raw_client_scores(mode, *client.embeddings, candidates);
    zero_frac += zero_fraction(raw);
    const auto clipped = clip_to_unit(raw);
    double norm_sq = 0.0;
    for (double x : clipped) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    if (norm > 1.0 + 1e-9)
      throw NumericError("client upload norm " + std::to_string(norm) + " exceeds 1");
    max_norm = std::max(max_norm, norm);
    Rng noise_rng =
        round_noise_rng.derive({static_cast<std::uint64_t>(client.client_id)});
    aggregator.submit(add_client_noise(clipped, sigma, L, noise_rng));
  }
  if (stats) {
    stats->max_upload_norm = max_norm;
    stats->mean_zero_fraction = zero_frac / L;
  }
  return ScoreMatrix::from_flat(num_prompts, num_responses, aggregator.aggregate());
}

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;
  std::vector<PairSelection> selection;  // indices parallel to pairs
  int dropped = 0;
};

// Rank each prompt's J responses by score (descending, ties to the lower
// response index), pair rank 1 against rank ell; identical sequences are
// dropped, not trained on.
inline PreferenceDataset build_preference_dataset(const ScoreMatrix& scores,
                                                  const std::vector<TokenSequence>& sequences,
                                                  const std::vector<PromptContext>& prompts,
                                                  int rejected_rank) {
  if (rejected_rank < 2 || rejected_rank > scores.responses)
    throw ConfigError("rejected rank outside [2, J]");
  if (sequences.size() != static_cast<std::size_t>(scores.prompts) * scores.responses ||
      prompts.size() != static_cast<std::size_t>(scores.prompts))
    throw DimensionMismatchError("candidates do not match the score matrix");
  scores.check_finite();

  PreferenceDataset out;
  std::vector<int> order(static_cast<std::size_t>(scores.responses));
  for (int k = 0; k < scores.prompts; ++k) {
    for (int j = 0; j < scores.responses; ++j) order[static_cast<std::size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores.at(k, a) > scores.at(k, b); });
    const int chosen = order[0];
    const int rejected = order[static_cast<std::size_t>(rejected_rank - 1)];
    const auto& chosen_seq = sequences[static_cast<std::size_t>(k) * scores.responses + chosen];
    const auto& rejected_seq =
        sequences[static_cast<std::size_t>(k) * scores.responses + rejected];
    if (chosen_seq == rejected_seq) {
      ++out.dropped;
      continue;
    }
    out.pairs.emplace_back(prompts[static_cast<std::size_t>(k)], chosen_seq, rejected_seq);
    out.selection.push_back({k, chosen, rejected});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Federated POPri (Alg. POPri): per round, sample L clients, generate K x J
// candidates, collect DP-noised similarity scores through secure
// aggregation, build preference pairs, DPO-train against the frozen initial
// reference. Tracks per-round FID against a held-out client split and keeps
// the best-FID checkpoint for downstream use.
// ---------------------------------------------------------------------------

struct ProtocolResult {
  BigramPolicy final_policy;
  BigramPolicy best_policy;
  int best_round = 0;
  std::vector<RoundReport> reports;
  Corpus synthetic;  // generated from the best-FID policy
  double final_fid = std::numeric_limits<double>::quiet_NaN();
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  double final_epsilon = 0.0;
  double max_upload_norm = 0.0;
  double mean_zero_fraction = 0.0;  // averaged over rounds
};

namespace detail {

struct EvalSplit {
  std::vector<int> train_clients;  // indices into corpus.clients
  std::vector<int> eval_clients;
};

inline EvalSplit split_clients(int n_clients, double eval_fraction, Rng rng) {
  EvalSplit split;
  std::vector<int> order(static_cast<std::size_t>(n_clients));
  for (int i = 0; i < n_clients; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = n_clients - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  int n_eval = static_cast<int>(std::floor(eval_fraction * n_clients));
  n_eval = std::clamp(n_eval, 1, n_clients - 1);
  split.eval_clients.assign(order.begin(), order.begin() + n_eval);
  split.train_clients.assign(order.begin() + n_eval, order.end());
  std::sort(split.eval_clients.begin(), split.eval_clients.end());
  std::sort(split.train_clients.begin(), split.train_clients.end());
  return split;
}

inline std::vector<TokenSequence> synthesize(const BigramPolicy& policy, int count,
                                             double temperature, int max_len, Rng& rng,
                                             int num_classes = 0) {
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  const int content = policy.vocab().content_tokens();
  for (int i = 0; i < count; ++i) {
    PromptContext prompt;
    if (num_classes > 0) prompt.class_label = i % num_classes;
    prompt.seed_token = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content)));
    out.push_back(sample(policy, prompt, temperature, rng, max_len));
  }
  return out;
}

inline Corpus as_corpus(const Vocabulary& vocab, std::vector<TokenSequence> samples) {
  Corpus c;
  c.vocab = vocab;
  ClientDataset d;
  d.client_id = 0;
  d.samples = std::move(samples);
  c.clients.push_back(std::move(d));
  return c;
}

inline std::vector<EmbeddingVector> embed_all(const std::vector<TokenSequence>& samples,
                                              const Vocabulary& vocab) {
  std::vector<EmbeddingVector> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(embed(s, vocab));
  return out;
}

// FID / medoid / downstream accuracy of a fresh synthetic draw at the
// current parameters; shared by every method's round report.
struct EvalContext {
  std::vector<EmbeddingVector> eval_embeddings;
  std::vector<TokenSequence> eval_samples;
  Vocabulary vocab;
};

inline void fill_eval_metrics(RoundReport& report, const std::vector<TokenSequence>& synthetic,
                              const EvalContext& ctx) {
  const auto syn_embs = embed_all(synthetic, ctx.vocab);
  report.fid = fid(syn_embs, ctx.eval_embeddings);
  report.medoid_median_distance = median_medoid_distance(syn_embs);
  report.downstream_accuracy =
      next_token_accuracy(fit_downstream(synthetic, ctx.vocab), ctx.eval_samples);
}

}  // namespace detail

inline ProtocolResult run_popri(const Corpus& corpus, const BigramPolicy& initial_policy,
                                const RoundConfig& round_cfg, const PrivacySpec& privacy,
                                const DpoConfig& dpo_cfg, std::uint64_t seed) {
  round_cfg.validate();
  dpo_cfg.validate();
  if (privacy.sigma < 0.0) throw ConfigError("sigma must be non-negative");
  if (corpus.vocab.size != initial_policy.vocab().size)
    throw ConfigError("corpus and policy vocabularies differ");
  const int n_clients = static_cast<int>(corpus.clients.size());
  if (n_clients < 2) throw ConfigError("need at least two clients for an eval split");

  Rng root(seed);
  const auto split = detail::split_clients(n_clients, round_cfg.eval_fraction,
                                           root.derive({stream::kSplit}));
  const int n_train = static_cast<int>(split.train_clients.size());
  if (round_cfg.clients_per_round > n_train)
    throw ConfigError("clients_per_round " + std::to_string(round_cfg.clients_per_round) +
                      " exceeds training clients " + std::to_string(n_train));
  const double q = static_cast<double>(round_cfg.clients_per_round) / n_train;

  // Clients embed their private samples once (Alg. POPri line 4).
  std::vector<std::vector<EmbeddingVector>> client_embeddings(
      static_cast<std::size_t>(n_clients));
  for (int i : split.train_clients) {
    const auto& c = corpus.clients[static_cast<std::size_t>(i)];
    client_embeddings[static_cast<std::size_t>(i)].reserve(c.samples.size());
    for (const auto& s : c.samples)
      client_embeddings[static_cast<std::size_t>(i)].push_back(embed(s, corpus.vocab));
  }

  detail::EvalContext eval_ctx;
  eval_ctx.vocab = corpus.vocab;
  for (int i : split.eval_clients) {
    const auto& c = corpus.clients[static_cast<std::size_t>(i)];
    eval_ctx.eval_samples.insert(eval_ctx.eval_samples.end(), c.samples.begin(), c.samples.end());
  }
  eval_ctx.eval_embeddings = detail::embed_all(eval_ctx.eval_samples, corpus.vocab);

  ProtocolResult result{initial_policy, initial_policy, 0, {}, {}, 0.0};
  const ReferencePolicy reference = snapshot_reference(initial_policy);

  // Round 0: the untouched policy, no privacy spent.
  {
    Rng synth_rng = root.derive({stream::kSynthesis, 0});
    const auto synthetic = detail::synthesize(result.final_policy, round_cfg.final_samples,
                                              round_cfg.temperature, round_cfg.max_len, synth_rng);
    RoundReport report;
    report.round = 0;
    report.epsilon = 0.0;
    detail::fill_eval_metrics(report, synthetic, eval_ctx);
    result.reports.push_back(report);
  }
  double best_fid = result.reports[0].fid;
  double zero_frac_total = 0.0;

  for (int t = 1; t <= round_cfg.rounds; ++t) {
    const std::uint64_t rt = static_cast<std::uint64_t>(t);

    Rng sample_rng = root.derive({stream::kClientSample, rt});
    const auto picks = sample_rng.sample_without_replacement(n_train,
                                                             round_cfg.clients_per_round);
    std::vector<ClientView> sampled;
    sampled.reserve(picks.size());
    for (int p : picks) {
      const int client_index = split.train_clients[static_cast<std::size_t>(p)];
      sampled.push_back({corpus.clients[static_cast<std::size_t>(client_index)].client_id,
                         &client_embeddings[static_cast<std::size_t>(client_index)]});
    }

    Rng gen_rng = root.derive({stream::kGenerate, rt, 0});
    const auto candidates =
        generate_candidates(result.final_policy, round_cfg.prompts, round_cfg.responses,
                            round_cfg.temperature, gen_rng, round_cfg.max_len);

    AggregateStats stats;
    const Rng noise_rng = root.derive({stream::kNoise, rt});
    const ScoreMatrix noisy =
        aggregate_scores(sampled, candidates.embeddings, round_cfg.prompts, round_cfg.responses,
                         privacy.sigma, round_cfg.scoring, noise_rng, &stats);
    result.max_upload_norm = std::max(result.max_upload_norm, stats.max_upload_norm);
    zero_frac_total += stats.mean_zero_fraction;

    // True (non-noised, non-clipped) scores of the same sampled clients, for
    // the recovery-rate diagnostic.
    ScoreMatrix true_scores(round_cfg.prompts, round_cfg.responses);
    for (const auto& client : sampled) {
      const auto raw = raw_client_scores(round_cfg.scoring, *client.embeddings,
                                         candidates.embeddings);
      for (std::size_t i = 0; i < raw.size(); ++i) true_scores.values[i] += raw[i];
    }
    for (double& v : true_scores.values) v /= static_cast<double>(sampled.size());

    auto dataset = build_preference_dataset(noisy, candidates.sequences, candidates.prompts,
                                            round_cfg.rejected_rank);

    RoundReport report;
    report.round = t;
    report.dropped_pairs = dataset.dropped;
    report.epsilon = account_epsilon(privacy.sigma, privacy.delta, q, t,
                                     privacy.sensitivity).epsilon;
    if (!dataset.selection.empty()) {
      report.recovery_rate = recovery_rate(true_scores, dataset.selection);
      double chosen_sum = 0.0, rejected_sum = 0.0;
      for (const auto& sel : dataset.selection) {
        chosen_sum += true_scores.at(sel.prompt, sel.chosen);
        rejected_sum += true_scores.at(sel.prompt, sel.rejected);
      }
      report.mean_chosen_true_score = chosen_sum / static_cast<double>(dataset.selection.size());
      report.mean_rejected_true_score =
          rejected_sum / static_cast<double>(dataset.selection.size());

      auto trained = train(std::move(result.final_policy), reference, dataset.pairs, dpo_cfg);
      result.final_policy = std::move(trained.policy);
      report.train_loss = trained.trace.back().loss;
    }

    Rng synth_rng = root.derive({stream::kSynthesis, rt});
    const auto synthetic = detail::synthesize(result.final_policy, round_cfg.final_samples,
                                              round_cfg.temperature, round_cfg.max_len, synth_rng);
    detail::fill_eval_metrics(report, synthetic, eval_ctx);
    result.reports.push_back(report);

    if (report.fid < best_fid) {
      best_fid = report.fid;
      result.best_policy = result.final_policy;
      result.best_round = t;
    }
  }
  result.mean_zero_fraction =
      round_cfg.rounds > 0 ? zero_frac_total / round_cfg.rounds : 0.0;

  // Final synthesis from the best-FID checkpoint (downstream default).
  Rng synth_rng = root.derive({stream::kSynthesis, static_cast<std::uint64_t>(round_cfg.rounds) + 1});
  auto final_samples = detail::synthesize(result.best_policy, round_cfg.final_samples,
                                          round_cfg.temperature, round_cfg.max_len, synth_rng);
  const auto final_embs = detail::embed_all(final_samples, corpus.vocab);
  result.final_fid = fid(final_embs, eval_ctx.eval_embeddings);
  result.final_accuracy = next_token_accuracy(fit_downstream(final_samples, corpus.vocab),
                                              eval_ctx.eval_samples);
  result.final_epsilon = result.reports.back().epsilon;
  result.synthetic = detail::as_corpus(corpus.vocab, std::move(final_samples));
  return result;
}

// ---------------------------------------------------------------------------
// Central DP variants (Alg. POPri-central / POPri-conditional): all samples
// on the server, no client sampling; per class, CENTRALSCORE + N(0, sigma^2 I)
// once per round, unclipped. The unconditional central run is exactly the
// conditional run with a single class holding everything.
// ---------------------------------------------------------------------------

struct LabeledSamples {
  Vocabulary vocab;
  std::vector<TokenSequence> samples;
  std::vector<int> labels;
};

inline LabeledSamples flatten_labeled(const Corpus& corpus, int num_classes) {
  LabeledSamples out;
  out.vocab = corpus.vocab;
  for (const auto& c : corpus.clients) {
    const int label = num_classes == 1 ? 0 : c.label.value_or(-1);
    for (const auto& s : c.samples) {
      out.samples.push_back(s);
      out.labels.push_back(label);
    }
  }
  return out;
}

inline ProtocolResult run_popri_conditional(const LabeledSamples& data, int num_classes,
                                            const BigramPolicy& initial_policy,
                                            const RoundConfig& round_cfg,
                                            const PrivacySpec& privacy, const DpoConfig& dpo_cfg,
                                            std::uint64_t seed) {
  round_cfg.validate();
  dpo_cfg.validate();
  if (num_classes < 1) throw ConfigError("need at least one class");
  if (initial_policy.num_classes() < num_classes)
    throw ConfigError("policy carries " + std::to_string(initial_policy.num_classes()) +
                      " class rows; need " + std::to_string(num_classes));
  if (data.samples.size() != data.labels.size())
    throw DimensionMismatchError("labels do not match samples");
  if (data.samples.size() < 4) throw ConfigError("need at least four samples");
  std::vector<long> class_count(static_cast<std::size_t>(num_classes), 0);
  for (int label : data.labels) {
    if (label < 0 || label >= num_classes)
      throw ConfigError("sample label " + std::to_string(label) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    ++class_count[static_cast<std::size_t>(label)];
  }
  for (int b = 0; b < num_classes; ++b)
    if (class_count[static_cast<std::size_t>(b)] == 0)
      throw ConfigError("class " + std::to_string(b) + " has no private samples");

  Rng root(seed);

  // Stratified 80/20 sample split: per class, a deterministic shuffle.
  std::vector<std::vector<int>> train_by_class(static_cast<std::size_t>(num_classes));
  std::vector<int> eval_indices;
  for (int b = 0; b < num_classes; ++b) {
    std::vector<int> members;
    for (std::size_t i = 0; i < data.labels.size(); ++i)
      if (data.labels[i] == b) members.push_back(static_cast<int>(i));
    Rng split_rng = root.derive({stream::kSplit, static_cast<std::uint64_t>(b)});
    for (int i = static_cast<int>(members.size()) - 1; i > 0; --i) {
      const int j = static_cast<int>(split_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      std::swap(members[static_cast<std::size_t>(i)], members[static_cast<std::size_t>(j)]);
    }
    int n_eval = static_cast<int>(std::floor(round_cfg.eval_fraction * members.size()));
    n_eval = std::clamp(n_eval, members.size() > 1 ? 1 : 0,
                        static_cast<int>(members.size()) - 1);
    eval_indices.insert(eval_indices.end(), members.begin(), members.begin() + n_eval);
    train_by_class[static_cast<std::size_t>(b)].assign(members.begin() + n_eval, members.end());
    std::sort(train_by_class[static_cast<std::size_t>(b)].begin(),
              train_by_class[static_cast<std::size_t>(b)].end());
  }
  std::sort(eval_indices.begin(), eval_indices.end());

  std::vector<std::vector<EmbeddingVector>> class_embeddings(
      static_cast<std::size_t>(num_classes));
  for (int b = 0; b < num_classes; ++b)
    for (int i : train_by_class[static_cast<std::size_t>(b)])
      class_embeddings[static_cast<std::size_t>(b)].push_back(
          embed(data.samples[static_cast<std::size_t>(i)], data.vocab));

  detail::EvalContext eval_ctx;
  eval_ctx.vocab = data.vocab;
  for (int i : eval_indices) eval_ctx.eval_samples.push_back(data.samples[static_cast<std::size_t>(i)]);
  eval_ctx.eval_embeddings = detail::embed_all(eval_ctx.eval_samples, data.vocab);

  ProtocolResult result{initial_policy, initial_policy, 0, {}, {}, 0.0};
  const ReferencePolicy reference = snapshot_reference(initial_policy);

  {
    Rng synth_rng = root.derive({stream::kSynthesis, 0});
    const auto synthetic =
        detail::synthesize(result.final_policy, round_cfg.final_samples, round_cfg.temperature,
                           round_cfg.max_len, synth_rng, num_classes);
    RoundReport report;
    report.round = 0;
    report.epsilon = 0.0;
    detail::fill_eval_metrics(report, synthetic, eval_ctx);
    result.reports.push_back(report);
  }
  double best_fid = result.reports[0].fid;

  for (int t = 1; t <= round_cfg.rounds; ++t) {
    const std::uint64_t rt = static_cast<std::uint64_t>(t);
    RoundReport report;
    report.round = t;

    std::vector<PreferencePair> union_pairs;
    std::vector<double> chosen_true, rejected_true;
    long recovered = 0, pair_count = 0;

    for (int b = 0; b < num_classes; ++b) {
      Rng gen_rng = root.derive({stream::kGenerate, rt, static_cast<std::uint64_t>(b)});
      const auto candidates =
          generate_candidates(result.final_policy, round_cfg.prompts, round_cfg.responses,
                              round_cfg.temperature, gen_rng, round_cfg.max_len, b);

      const auto true_flat =
          central_score(candidates.embeddings, class_embeddings[static_cast<std::size_t>(b)]);
      const ScoreMatrix true_scores =
          ScoreMatrix::from_flat(round_cfg.prompts, round_cfg.responses, true_flat);

      Rng noise_rng = root.derive({stream::kNoise, rt, static_cast<std::uint64_t>(b)});
      std::vector<double> noisy_flat = true_flat;
      if (privacy.sigma > 0.0)
        for (double& v : noisy_flat) v += privacy.sigma * noise_rng.gaussian();
      const ScoreMatrix noisy =
          ScoreMatrix::from_flat(round_cfg.prompts, round_cfg.responses, std::move(noisy_flat));

      auto dataset = build_preference_dataset(noisy, candidates.sequences, candidates.prompts,
                                              round_cfg.rejected_rank);
      report.dropped_pairs += dataset.dropped;
      for (const auto& sel : dataset.selection) {
        chosen_true.push_back(true_scores.at(sel.prompt, sel.chosen));
        rejected_true.push_back(true_scores.at(sel.prompt, sel.rejected));
        if (true_scores.at(sel.prompt, sel.chosen) > true_scores.at(sel.prompt, sel.rejected))
          ++recovered;
        ++pair_count;
      }
      for (auto& pair : dataset.pairs) union_pairs.push_back(std::move(pair));
    }

    if (pair_count > 0) {
      report.recovery_rate = static_cast<double>(recovered) / static_cast<double>(pair_count);
      double cs = 0.0, rs = 0.0;
      for (double v : chosen_true) cs += v;
      for (double v : rejected_true) rs += v;
      report.mean_chosen_true_score = cs / static_cast<double>(pair_count);
      report.mean_rejected_true_score = rs / static_cast<double>(pair_count);
    }
    // One Gaussian release per round: samples only influence their own class
    // block, so the concatenated vector composes as a single mechanism.
    report.epsilon =
        account_epsilon(privacy.sigma, privacy.delta, 1.0, t, privacy.sensitivity).epsilon;

    if (!union_pairs.empty()) {
      auto trained = train(std::move(result.final_policy), reference, union_pairs, dpo_cfg);
      result.final_policy = std::move(trained.policy);
      report.train_loss = trained.trace.back().loss;
    }

    Rng synth_rng = root.derive({stream::kSynthesis, rt});
    const auto synthetic =
        detail::synthesize(result.final_policy, round_cfg.final_samples, round_cfg.temperature,
                           round_cfg.max_len, synth_rng, num_classes);
    detail::fill_eval_metrics(report, synthetic, eval_ctx);
    result.reports.push_back(report);
    if (report.fid < best_fid) {
      best_fid = report.fid;
      result.best_policy = result.final_policy;
      result.best_round = t;
    }
  }

  Rng synth_rng =
      root.derive({stream::kSynthesis, static_cast<std::uint64_t>(round_cfg.rounds) + 1});
  auto final_samples =
      detail::synthesize(result.best_policy, round_cfg.final_samples, round_cfg.temperature,
                         round_cfg.max_len, synth_rng, num_classes);
  const auto final_embs = detail::embed_all(final_samples, data.vocab);
  result.final_fid = fid(final_embs, eval_ctx.eval_embeddings);
  result.final_accuracy =
      next_token_accuracy(fit_downstream(final_samples, data.vocab), eval_ctx.eval_samples);
  result.final_epsilon = result.reports.back().epsilon;
  result.synthetic = detail::as_corpus(data.vocab, std::move(final_samples));
  return result;
}

// Unconditional central DP run: one class holding every sample, same code
// path as the conditional variant so the two agree bit for bit at B = 1.
inline ProtocolResult run_popri_central(const Corpus& corpus, const BigramPolicy& initial_policy,
                                        const RoundConfig& round_cfg, const PrivacySpec& privacy,
                                        const DpoConfig& dpo_cfg, std::uint64_t seed) {
  LabeledSamples data = flatten_labeled(corpus, 1);
  return run_popri_conditional(data, 1, initial_policy, round_cfg, privacy, dpo_cfg, seed);
}

}  // namespace popri
