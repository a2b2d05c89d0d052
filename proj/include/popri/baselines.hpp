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
#include "popri/protocol.hpp"
#include "popri/rng.hpp"
#include "popri/scores.hpp"

namespace popri {

// Private Evolution at desk scale: DP nearest-neighbor histogram scoring,
// top-fraction survivor selection, token-level mutation instead of LLM
// paraphrasing.
struct PeConfig {
  int population = 400;            // N_syn
  double survivor_fraction = 0.5;  // top fraction kept each round
  std::optional<double> threshold; // absolute-score mode (PrE-Text's H), optional
  double mutation_rate = 0.2;      // per-token resample probability
  int rounds = 10;
  int clients_per_round = 500;
  int max_len = kDefaultMaxLen;
  double eval_fraction = 0.2;

  void validate() const {
    if (population < 2) throw ConfigError("PE population must be >= 2");
    if (survivor_fraction <= 0.0 || survivor_fraction > 1.0)
      throw ConfigError("survivor fraction must lie in (0, 1]");
    if (mutation_rate < 0.0 || mutation_rate > 1.0)
      throw ConfigError("mutation rate must lie in [0, 1]");
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (clients_per_round < 1) throw ConfigError("clients per round must be >= 1");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (eval_fraction <= 0.0 || eval_fraction >= 1.0)
      throw ConfigError("eval fraction must lie in (0, 1)");
  }
};

// The PE release: per client, count nearest candidates, clip the count
// vector to unit norm, add N(0, sigma^2 I / L), average across clients.
inline std::vector<double> dp_nn_histogram(std::span<const ClientView> clients,
                                           const std::vector<EmbeddingVector>& candidates,
                                           double sigma, const Rng& round_noise_rng,
                                           AggregateStats* stats = nullptr) {
  if (clients.empty()) throw ConfigError("no clients sampled for histogram");
  const int L = static_cast<int>(clients.size());
  SecureAggregator aggregator(candidates.size());
  double max_norm = 0.0, zero_frac = 0.0;
  for (const auto& client : clients) {
    const auto counts = nn_histogram_counts(*client.embeddings, candidates);
    zero_frac += zero_fraction(counts);
    const auto clipped = clip_to_unit(counts);
    double norm_sq = 0.0;
    for (double x : clipped) norm_sq += x * x;
    max_norm = std::max(max_norm, std::sqrt(norm_sq));
    Rng noise_rng = round_noise_rng.derive({static_cast<std::uint64_t>(client.client_id)});
    aggregator.submit(add_client_noise(clipped, sigma, L, noise_rng));
  }
  if (stats) {
    stats->max_upload_norm = max_norm;
    stats->mean_zero_fraction = zero_frac / L;
  }
  return aggregator.aggregate();
}

// Token-level variation: each position is independently resampled with the
// given probability. With a policy, replacements come from its conditional
// next-token distribution (content tokens only, renormalized); otherwise
// uniform over the content tokens. Stands in for PE's LLM paraphrasing.
inline TokenSequence variation(const TokenSequence& seq, double mutation_rate,
                               const Vocabulary& vocab, const BigramPolicy* policy, Rng& rng) {
  if (mutation_rate < 0.0 || mutation_rate > 1.0)
    throw ConfigError("mutation rate must lie in [0, 1]");
  std::vector<int> toks = seq.tokens;
  const int content = vocab.content_tokens();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (rng.uniform() >= mutation_rate) continue;
    if (policy) {
      std::vector<double> probs;
      if (i == 0) {
        auto row = policy->start_logits();
        probs.assign(row.begin(), row.end());
      } else {
        auto row = policy->trans_row(toks[i - 1]);
        probs.assign(row.begin(), row.end());
      }
      probs.resize(static_cast<std::size_t>(content));  // mask EOS, renormalize
      detail::softmax_inplace(probs);
      toks[i] = static_cast<int>(rng.categorical(probs));
    } else {
      toks[i] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content)));
    }
  }
  return TokenSequence(std::move(toks));
}

struct PeResult {
  Corpus synthetic;  // final population
  std::vector<RoundReport> reports;
  double final_fid = std::numeric_limits<double>::quiet_NaN();
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  double final_epsilon = 0.0;
  double max_upload_norm = 0.0;
  double mean_zero_fraction = 0.0;
};

// Private Evolution: per round, score the population with the DP histogram,
// keep the top survivors (by noisy score, ties to the lower index), refill
// the population with mutations of random survivors.
inline PeResult run_pe(const Corpus& corpus, const std::vector<TokenSequence>& initial_candidates,
                       const PeConfig& pe_cfg, const PrivacySpec& privacy,
                       const BigramPolicy* variation_policy, std::uint64_t seed) {
  pe_cfg.validate();
  if (static_cast<int>(initial_candidates.size()) != pe_cfg.population)
    throw ConfigError("initial candidate count " + std::to_string(initial_candidates.size()) +
                      " must equal the population size " + std::to_string(pe_cfg.population));
  const int n_clients = static_cast<int>(corpus.clients.size());
  if (n_clients < 2) throw ConfigError("need at least two clients for an eval split");

  Rng root(seed);
  const auto split =
      detail::split_clients(n_clients, pe_cfg.eval_fraction, root.derive({stream::kSplit}));
  const int n_train = static_cast<int>(split.train_clients.size());
  if (pe_cfg.clients_per_round > n_train)
    throw ConfigError("clients_per_round exceeds training clients");
  const double q = static_cast<double>(pe_cfg.clients_per_round) / n_train;

  std::vector<std::vector<EmbeddingVector>> client_embeddings(
      static_cast<std::size_t>(n_clients));
  for (int i : split.train_clients)
    for (const auto& s : corpus.clients[static_cast<std::size_t>(i)].samples)
      client_embeddings[static_cast<std::size_t>(i)].push_back(embed(s, corpus.vocab));

  detail::EvalContext eval_ctx;
  eval_ctx.vocab = corpus.vocab;
  for (int i : split.eval_clients) {
    const auto& c = corpus.clients[static_cast<std::size_t>(i)];
    eval_ctx.eval_samples.insert(eval_ctx.eval_samples.end(), c.samples.begin(), c.samples.end());
  }
  eval_ctx.eval_embeddings = detail::embed_all(eval_ctx.eval_samples, corpus.vocab);

  PeResult result;
  std::vector<TokenSequence> population = initial_candidates;

  {
    RoundReport report;
    report.round = 0;
    report.epsilon = 0.0;
    detail::fill_eval_metrics(report, population, eval_ctx);
    result.reports.push_back(report);
  }

  double zero_frac_total = 0.0;
  for (int t = 1; t <= pe_cfg.rounds; ++t) {
    const std::uint64_t rt = static_cast<std::uint64_t>(t);

    Rng sample_rng = root.derive({stream::kClientSample, rt});
    const auto picks = sample_rng.sample_without_replacement(n_train, pe_cfg.clients_per_round);
    std::vector<ClientView> sampled;
    for (int p : picks) {
      const int ci = split.train_clients[static_cast<std::size_t>(p)];
      sampled.push_back({corpus.clients[static_cast<std::size_t>(ci)].client_id,
                         &client_embeddings[static_cast<std::size_t>(ci)]});
    }

    const auto population_embs = detail::embed_all(population, corpus.vocab);
    AggregateStats stats;
    const Rng noise_rng = root.derive({stream::kNoise, rt});
    const auto scores =
        dp_nn_histogram(sampled, population_embs, privacy.sigma, noise_rng, &stats);
    result.max_upload_norm = std::max(result.max_upload_norm, stats.max_upload_norm);
    zero_frac_total += stats.mean_zero_fraction;
    for (double s : scores)
      if (!std::isfinite(s)) throw NumericError("non-finite PE score");

    // Survivors: absolute threshold when configured, else the top fraction.
    std::vector<int> order(population.size());
    for (std::size_t i = 0; i < population.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    int n_survivors;
    if (pe_cfg.threshold) {
      n_survivors = 0;
      for (std::size_t i = 0; i < order.size(); ++i)
        if (scores[static_cast<std::size_t>(order[i])] >= *pe_cfg.threshold)
          n_survivors = static_cast<int>(i) + 1;
    } else {
      n_survivors = static_cast<int>(std::ceil(pe_cfg.survivor_fraction * pe_cfg.population));
    }
    n_survivors = std::clamp(n_survivors, 1, pe_cfg.population);

    // Survivors seed the next generation round-robin but are not carried
    // over verbatim; every member of the new population is a variation.
    std::vector<TokenSequence> next;
    next.reserve(population.size());
    Rng var_rng = root.derive({stream::kVariation, rt});
    for (int i = 0; i < pe_cfg.population; ++i) {
      const auto& parent =
          population[static_cast<std::size_t>(order[static_cast<std::size_t>(i % n_survivors)])];
      next.push_back(
          variation(parent, pe_cfg.mutation_rate, corpus.vocab, variation_policy, var_rng));
    }
    population = std::move(next);

    RoundReport report;
    report.round = t;
    report.epsilon =
        account_epsilon(privacy.sigma, privacy.delta, q, t, privacy.sensitivity).epsilon;
    detail::fill_eval_metrics(report, population, eval_ctx);
    result.reports.push_back(report);
  }
  result.mean_zero_fraction = pe_cfg.rounds > 0 ? zero_frac_total / pe_cfg.rounds : 0.0;

  result.final_fid = result.reports.back().fid;
  result.final_accuracy = result.reports.back().downstream_accuracy;
  result.final_epsilon = result.reports.back().epsilon;
  result.synthetic = detail::as_corpus(corpus.vocab, std::move(population));
  return result;
}

// PE + SFT: POPri's generation and scoring path, but each round fine-tunes
// on the top-ranked response per prompt with the NLL loss instead of DPO.
inline ProtocolResult run_pe_sft(const Corpus& corpus, const BigramPolicy& initial_policy,
                                 const RoundConfig& round_cfg, const PrivacySpec& privacy,
                                 const DpoConfig& sft_cfg, std::uint64_t seed) {
  round_cfg.validate();
  sft_cfg.validate();
  const int n_clients = static_cast<int>(corpus.clients.size());
  if (n_clients < 2) throw ConfigError("need at least two clients for an eval split");

  Rng root(seed);
  const auto split =
      detail::split_clients(n_clients, round_cfg.eval_fraction, root.derive({stream::kSplit}));
  const int n_train = static_cast<int>(split.train_clients.size());
  if (round_cfg.clients_per_round > n_train)
    throw ConfigError("clients_per_round exceeds training clients");
  const double q = static_cast<double>(round_cfg.clients_per_round) / n_train;

  std::vector<std::vector<EmbeddingVector>> client_embeddings(
      static_cast<std::size_t>(n_clients));
  for (int i : split.train_clients)
    for (const auto& s : corpus.clients[static_cast<std::size_t>(i)].samples)
      client_embeddings[static_cast<std::size_t>(i)].push_back(embed(s, corpus.vocab));

  detail::EvalContext eval_ctx;
  eval_ctx.vocab = corpus.vocab;
  for (int i : split.eval_clients) {
    const auto& c = corpus.clients[static_cast<std::size_t>(i)];
    eval_ctx.eval_samples.insert(eval_ctx.eval_samples.end(), c.samples.begin(), c.samples.end());
  }
  eval_ctx.eval_embeddings = detail::embed_all(eval_ctx.eval_samples, corpus.vocab);

  ProtocolResult result{initial_policy, initial_policy, 0, {}, {}, 0.0};
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

  for (int t = 1; t <= round_cfg.rounds; ++t) {
    const std::uint64_t rt = static_cast<std::uint64_t>(t);

    Rng sample_rng = root.derive({stream::kClientSample, rt});
    const auto picks = sample_rng.sample_without_replacement(n_train,
                                                             round_cfg.clients_per_round);
    std::vector<ClientView> sampled;
    for (int p : picks) {
      const int ci = split.train_clients[static_cast<std::size_t>(p)];
      sampled.push_back({corpus.clients[static_cast<std::size_t>(ci)].client_id,
                         &client_embeddings[static_cast<std::size_t>(ci)]});
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

    // Top-ranked response per prompt; ties to the lower response index.
    std::vector<TokenSequence> selected;
    selected.reserve(static_cast<std::size_t>(round_cfg.prompts));
    for (int k = 0; k < round_cfg.prompts; ++k) {
      int best = 0;
      for (int j = 1; j < round_cfg.responses; ++j)
        if (noisy.at(k, j) > noisy.at(k, best)) best = j;
      selected.push_back(
          candidates.sequences[static_cast<std::size_t>(k) * round_cfg.responses + best]);
    }

    auto trained = train_sft(std::move(result.final_policy), selected, sft_cfg);
    result.final_policy = std::move(trained.policy);

    RoundReport report;
    report.round = t;
    report.train_loss = trained.trace.back().loss;
    report.epsilon =
        account_epsilon(privacy.sigma, privacy.delta, q, t, privacy.sensitivity).epsilon;
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

  Rng synth_rng =
      root.derive({stream::kSynthesis, static_cast<std::uint64_t>(round_cfg.rounds) + 1});
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
// DP-FedAvg on the downstream bigram model: sampled clients take local NLL
// steps over their own transitions, deltas are clipped, noised, securely
// averaged, and applied to the global model.
// ---------------------------------------------------------------------------

struct FedAvgConfig {
  double clip_threshold = 1.0;
  int rounds = 10;
  int local_epochs = 1;
  double learning_rate = 0.1;
  int clients_per_round = 500;
  double eval_fraction = 0.2;

  void validate() const {
    if (clip_threshold <= 0.0) throw ConfigError("clip threshold must be positive");
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (local_epochs < 1) throw ConfigError("local epochs must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
    if (clients_per_round < 1) throw ConfigError("clients per round must be >= 1");
    if (eval_fraction <= 0.0 || eval_fraction >= 1.0)
      throw ConfigError("eval fraction must lie in (0, 1)");
  }
};

struct FedAvgResult {
  DownstreamModel model;
  std::vector<RoundReport> reports;
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  double final_epsilon = 0.0;
  double max_delta_norm = 0.0;  // post-clip; must stay <= clip_threshold
};

namespace detail {

// Mean NLL gradient over a client's content-token transitions; `logits` has
// num_tokens x num_tokens rows.
inline std::vector<double> downstream_nll_grad(const std::vector<double>& logits, int num_tokens,
                                               const std::vector<const TokenSequence*>& samples) {
  std::vector<double> grad(logits.size(), 0.0);
  long transitions = 0;
  for (const auto* s : samples)
    for (int i = 1; i < s->length(); ++i)
      if (s->tokens[i - 1] < num_tokens && s->tokens[i] < num_tokens) ++transitions;
  if (transitions == 0) return grad;
  const double scale = 1.0 / static_cast<double>(transitions);
  std::vector<double> probs(static_cast<std::size_t>(num_tokens));
  for (const auto* s : samples) {
    for (int i = 1; i < s->length(); ++i) {
      const int prev = s->tokens[i - 1], next = s->tokens[i];
      if (prev >= num_tokens || next >= num_tokens) continue;
      const double* row = logits.data() + static_cast<std::size_t>(prev) * num_tokens;
      probs.assign(row, row + num_tokens);
      softmax_inplace(probs);
      double* g = grad.data() + static_cast<std::size_t>(prev) * num_tokens;
      for (int t = 0; t < num_tokens; ++t) g[t] += scale * probs[static_cast<std::size_t>(t)];
      g[next] -= scale;
    }
  }
  return grad;
}

inline double downstream_nll(const std::vector<double>& logits, int num_tokens,
                             const std::vector<const TokenSequence*>& samples) {
  double total = 0.0;
  long transitions = 0;
  std::vector<double> row(static_cast<std::size_t>(num_tokens));
  for (const auto* s : samples) {
    for (int i = 1; i < s->length(); ++i) {
      const int prev = s->tokens[i - 1], next = s->tokens[i];
      if (prev >= num_tokens || next >= num_tokens) continue;
      const double* r = logits.data() + static_cast<std::size_t>(prev) * num_tokens;
      row.assign(r, r + num_tokens);
      total -= r[next] - log_sum_exp(row);
      ++transitions;
    }
  }
  if (transitions == 0) return 0.0;
  return total / static_cast<double>(transitions);
}

}  // namespace detail

inline FedAvgResult run_dp_fedavg(const Corpus& corpus, const FedAvgConfig& fed_cfg,
                                  const PrivacySpec& privacy, std::uint64_t seed) {
  fed_cfg.validate();
  const int n_clients = static_cast<int>(corpus.clients.size());
  if (n_clients < 2) throw ConfigError("need at least two clients for an eval split");

  Rng root(seed);
  const auto split =
      detail::split_clients(n_clients, fed_cfg.eval_fraction, root.derive({stream::kSplit}));
  const int n_train = static_cast<int>(split.train_clients.size());
  if (fed_cfg.clients_per_round > n_train)
    throw ConfigError("clients_per_round exceeds training clients");
  const double q = static_cast<double>(fed_cfg.clients_per_round) / n_train;

  std::vector<TokenSequence> eval_samples;
  for (int i : split.eval_clients) {
    const auto& c = corpus.clients[static_cast<std::size_t>(i)];
    eval_samples.insert(eval_samples.end(), c.samples.begin(), c.samples.end());
  }

  const int num_tokens = corpus.vocab.content_tokens();
  FedAvgResult result;
  result.model.num_tokens = num_tokens;
  result.model.logits.assign(static_cast<std::size_t>(num_tokens) * num_tokens, 0.0);

  {
    RoundReport report;
    report.round = 0;
    report.epsilon = 0.0;
    report.downstream_accuracy = next_token_accuracy(result.model, eval_samples);
    result.reports.push_back(report);
  }

  for (int t = 1; t <= fed_cfg.rounds; ++t) {
    const std::uint64_t rt = static_cast<std::uint64_t>(t);
    Rng sample_rng = root.derive({stream::kClientSample, rt});
    const auto picks = sample_rng.sample_without_replacement(n_train, fed_cfg.clients_per_round);
    const int L = fed_cfg.clients_per_round;

    const Rng noise_rng = root.derive({stream::kNoise, rt});
    SecureAggregator aggregator(result.model.logits.size());
    for (int p : picks) {
      const int ci = split.train_clients[static_cast<std::size_t>(p)];
      const auto& client = corpus.clients[static_cast<std::size_t>(ci)];
      std::vector<const TokenSequence*> samples;
      samples.reserve(client.samples.size());
      for (const auto& s : client.samples) samples.push_back(&s);

      std::vector<double> local = result.model.logits;
      for (int e = 0; e < fed_cfg.local_epochs; ++e) {
        const auto grad = detail::downstream_nll_grad(local, num_tokens, samples);
        for (std::size_t i = 0; i < local.size(); ++i)
          local[i] -= fed_cfg.learning_rate * grad[i];
      }
      std::vector<double> delta(local.size());
      for (std::size_t i = 0; i < local.size(); ++i) delta[i] = local[i] - result.model.logits[i];

      // clip to the threshold, then scale back up: delta * min(1, c/||delta||)
      double norm_sq = 0.0;
      for (double x : delta) {
        if (!std::isfinite(x)) throw NumericError("non-finite DP-FedAvg update");
        norm_sq += x * x;
      }
      const double norm = std::sqrt(norm_sq);
      if (norm > fed_cfg.clip_threshold)
        for (double& x : delta) x *= fed_cfg.clip_threshold / norm;
      double clipped_norm = std::min(norm, fed_cfg.clip_threshold);
      result.max_delta_norm = std::max(result.max_delta_norm, clipped_norm);

      Rng client_noise =
          noise_rng.derive({static_cast<std::uint64_t>(client.client_id)});
      aggregator.submit(
          add_client_noise(delta, privacy.sigma * fed_cfg.clip_threshold, L, client_noise));
    }
    const auto mean_delta = aggregator.aggregate();
    for (std::size_t i = 0; i < result.model.logits.size(); ++i) {
      result.model.logits[i] += mean_delta[i];
      if (!std::isfinite(result.model.logits[i]))
        throw NumericError("non-finite DP-FedAvg model after round " + std::to_string(t));
    }

    RoundReport report;
    report.round = t;
    // noise multiplier relative to the clip threshold is sigma by construction
    report.epsilon = account_epsilon(privacy.sigma, privacy.delta, q, t, 1.0).epsilon;
    report.downstream_accuracy = next_token_accuracy(result.model, eval_samples);
    result.reports.push_back(report);
  }

  result.final_accuracy = result.reports.back().downstream_accuracy;
  result.final_epsilon = result.reports.back().epsilon;
  return result;
}

}  // namespace popri
