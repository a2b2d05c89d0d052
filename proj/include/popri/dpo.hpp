#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "popri/errors.hpp"
#include "popri/policy.hpp"

namespace popri {

// One DPO training unit: prompt, higher-scoring response, lower-scoring
// response. Pairs whose two responses are the same sequence carry no signal
// and are rejected here; dataset construction drops them before this point.
struct PreferencePair {
  PromptContext prompt;
  TokenSequence chosen;
  TokenSequence rejected;

  PreferencePair(PromptContext p, TokenSequence c, TokenSequence r)
      : prompt(std::move(p)), chosen(std::move(c)), rejected(std::move(r)) {
    if (chosen == rejected) throw ConfigError("preference pair with identical sequences");
  }
};

struct DpoConfig {
  double tau = 0.5;          // deviation control in the preference loss
  double learning_rate = 0.05;
  int epochs = 1;
  int batch_size = 8;
  double momentum = 0.0;     // 0 = plain SGD
  int max_len = kDefaultMaxLen;

  void validate() const {
    if (tau < 0.0) throw ConfigError("tau must be non-negative");
    if (learning_rate < 0.0) throw ConfigError("learning rate must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
  }
};

// Gradient with the same shape as the policy parameters.
class PolicyGrad {
 public:
  explicit PolicyGrad(const BigramPolicy& policy)
      : vsize_(policy.vocab().size),
        num_classes_(policy.num_classes()),
        start_(static_cast<std::size_t>(vsize_), 0.0),
        trans_(static_cast<std::size_t>(vsize_) * vsize_, 0.0),
        class_bias_(static_cast<std::size_t>(num_classes_) * vsize_, 0.0) {}

  std::span<double> start() { return start_; }
  std::span<double> trans_row(int t) {
    return {trans_.data() + static_cast<std::size_t>(t) * vsize_, static_cast<std::size_t>(vsize_)};
  }
  std::span<double> class_bias_row(int b) {
    return {class_bias_.data() + static_cast<std::size_t>(b) * vsize_,
            static_cast<std::size_t>(vsize_)};
  }
  std::span<const double> start() const { return start_; }
  std::span<const double> trans_row(int t) const {
    return {trans_.data() + static_cast<std::size_t>(t) * vsize_, static_cast<std::size_t>(vsize_)};
  }
  std::span<const double> class_bias_row(int b) const {
    return {class_bias_.data() + static_cast<std::size_t>(b) * vsize_,
            static_cast<std::size_t>(vsize_)};
  }

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

  void scale(double s) {
    for (std::size_t i = 0; i < parameter_count(); ++i) parameter(i) *= s;
  }
  void add(const PolicyGrad& o, double s = 1.0) {
    for (std::size_t i = 0; i < parameter_count(); ++i) parameter(i) += s * o.parameter(i);
  }
  double max_abs() const {
    double m = 0.0;
    for (std::size_t i = 0; i < parameter_count(); ++i) m = std::max(m, std::abs(parameter(i)));
    return m;
  }

 private:
  int vsize_;
  int num_classes_;
  std::vector<double> start_;
  std::vector<double> trans_;
  std::vector<double> class_bias_;
};

namespace detail {

// Adds scale * d(log-softmax(logits)[target])/d(logits) into each parameter
// row that contributed to this step's logits.
inline void accumulate_softmax_step(std::span<const double> logits, int target, double scale,
                                    std::initializer_list<std::span<double>> rows) {
  const std::size_t n = logits.size();
  std::vector<double> p(logits.begin(), logits.end());
  softmax_inplace(p);
  for (auto row : rows) {
    for (std::size_t k = 0; k < n; ++k) row[k] -= scale * p[k];
    row[static_cast<std::size_t>(target)] += scale;
  }
}

}  // namespace detail

// Accumulates scale * d log p(seq | prompt) / d(theta) into grad. Mirrors
// log_prob step for step, including the stop event.
inline void accumulate_log_prob_grad(const BigramPolicy& policy, const PromptContext& prompt,
                                     const TokenSequence& seq, double scale, PolicyGrad& grad,
                                     int max_len = kDefaultMaxLen) {
  const int eos = policy.vocab().eos();
  for (int t : seq.tokens)
    if (t < 0 || t >= eos) throw InvalidTokenError("response token " + std::to_string(t));

  // First step: seed transition row (or start row) plus optional class bias.
  {
    const auto logits = policy.first_step_logits(prompt);
    std::vector<std::span<double>> rows;
    rows.push_back(prompt.seed_token ? grad.trans_row(*prompt.seed_token) : grad.start());
    if (prompt.class_label) rows.push_back(grad.class_bias_row(*prompt.class_label));
    if (rows.size() == 1)
      detail::accumulate_softmax_step(logits, seq.tokens[0], scale, {rows[0]});
    else
      detail::accumulate_softmax_step(logits, seq.tokens[0], scale, {rows[0], rows[1]});
  }
  for (int i = 1; i < seq.length(); ++i)
    detail::accumulate_softmax_step(policy.trans_row(seq.tokens[i - 1]), seq.tokens[i], scale,
                                    {grad.trans_row(seq.tokens[i - 1])});
  if (seq.length() < max_len)
    detail::accumulate_softmax_step(policy.trans_row(seq.tokens.back()), eos, scale,
                                    {grad.trans_row(seq.tokens.back())});
}

namespace detail {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double dpo_margin(const BigramPolicy& policy, const ReferencePolicy& ref,
                         const PreferencePair& pair, double tau, int max_len) {
  const double lw = log_prob(policy, pair.prompt, pair.chosen, max_len);
  const double lr = log_prob(policy, pair.prompt, pair.rejected, max_len);
  const double rw = log_prob(ref, pair.prompt, pair.chosen, max_len);
  const double rr = log_prob(ref, pair.prompt, pair.rejected, max_len);
  return tau * ((lw - lr) - (rw - rr));
}

}  // namespace detail

// DPO preference loss: mean over pairs of
//   -log sigmoid( tau * [log-ratio margin vs the frozen reference] ).
inline double dpo_loss(const BigramPolicy& policy, const ReferencePolicy& ref,
                       const std::vector<PreferencePair>& pairs, double tau,
                       int max_len = kDefaultMaxLen) {
  if (pairs.empty()) throw ConfigError("empty preference dataset");
  double total = 0.0;
  for (const auto& pair : pairs)
    total += detail::softplus(-detail::dpo_margin(policy, ref, pair, tau, max_len));
  return total / static_cast<double>(pairs.size());
}

// Exact gradient of dpo_loss with respect to all policy parameters:
//   -(1/N) sum sigmoid(-m) * tau * (grad logp(chosen) - grad logp(rejected)).
inline PolicyGrad dpo_grad(const BigramPolicy& policy, const ReferencePolicy& ref,
                           const std::vector<PreferencePair>& pairs, double tau,
                           int max_len = kDefaultMaxLen) {
  if (pairs.empty()) throw ConfigError("empty preference dataset");
  PolicyGrad grad(policy);
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (const auto& pair : pairs) {
    const double m = detail::dpo_margin(policy, ref, pair, tau, max_len);
    const double coeff = -detail::sigmoid(-m) * tau * inv_n;
    accumulate_log_prob_grad(policy, pair.prompt, pair.chosen, coeff, grad, max_len);
    accumulate_log_prob_grad(policy, pair.prompt, pair.rejected, -coeff, grad, max_len);
  }
  return grad;
}

// Mean negative log-likelihood of the samples (unconditional prompts),
// including the stop event. The SFT baseline trains on this.
inline double sft_loss(const BigramPolicy& policy, const std::vector<TokenSequence>& samples,
                       int max_len = kDefaultMaxLen) {
  if (samples.empty()) throw ConfigError("empty sample set");
  double total = 0.0;
  for (const auto& s : samples) total -= log_prob(policy, PromptContext{}, s, max_len);
  return total / static_cast<double>(samples.size());
}

inline PolicyGrad sft_grad(const BigramPolicy& policy, const std::vector<TokenSequence>& samples,
                           int max_len = kDefaultMaxLen) {
  if (samples.empty()) throw ConfigError("empty sample set");
  PolicyGrad grad(policy);
  const double scale = -1.0 / static_cast<double>(samples.size());
  for (const auto& s : samples) accumulate_log_prob_grad(policy, PromptContext{}, s, scale, grad, max_len);
  return grad;
}

struct EpochStat {
  int epoch;
  double loss;
  double mean_margin;  // mean over pairs of logp(chosen) - logp(rejected)
};

struct TrainResult {
  BigramPolicy policy;
  std::vector<EpochStat> trace;
};

namespace detail {

inline void sgd_step(BigramPolicy& policy, PolicyGrad& velocity, const PolicyGrad& grad,
                     double learning_rate, double momentum) {
  for (std::size_t i = 0; i < policy.parameter_count(); ++i) {
    velocity.parameter(i) = momentum * velocity.parameter(i) + grad.parameter(i);
    policy.parameter(i) -= learning_rate * velocity.parameter(i);
  }
}

}  // namespace detail

// Minibatch SGD on the SFT (NLL) loss; shares the gradient path with
// sft_grad so the PE+SFT baseline trains through exactly that code.
inline TrainResult train_sft(BigramPolicy policy, const std::vector<TokenSequence>& samples,
                             const DpoConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("empty sample set");

  PolicyGrad velocity(policy);
  TrainResult result{std::move(policy), {}};
  const std::size_t n = samples.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TokenSequence> batch(samples.begin() + static_cast<std::ptrdiff_t>(begin),
                                       samples.begin() + static_cast<std::ptrdiff_t>(end));
      PolicyGrad grad = sft_grad(result.policy, batch, cfg.max_len);
      detail::sgd_step(result.policy, velocity, grad, cfg.learning_rate, cfg.momentum);
    }
    const double loss = sft_loss(result.policy, samples, cfg.max_len);
    if (!std::isfinite(loss))
      throw NumericError("SFT loss diverged at epoch " + std::to_string(epoch));
    result.trace.push_back({epoch, loss, std::numeric_limits<double>::quiet_NaN()});
  }
  return result;
}

// Full-batch-deterministic minibatch SGD on the DPO loss. Pairs are visited
// in their given order, so a rerun with the same inputs reproduces the exact
// parameter trajectory.
inline TrainResult train(BigramPolicy policy, const ReferencePolicy& ref,
                         const std::vector<PreferencePair>& pairs, const DpoConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError("empty preference dataset");

  PolicyGrad velocity(policy);
  TrainResult result{std::move(policy), {}};
  const std::size_t n = pairs.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PreferencePair> batch(pairs.begin() + static_cast<std::ptrdiff_t>(begin),
                                        pairs.begin() + static_cast<std::ptrdiff_t>(end));
      PolicyGrad grad = dpo_grad(result.policy, ref, batch, cfg.tau, cfg.max_len);
      detail::sgd_step(result.policy, velocity, grad, cfg.learning_rate, cfg.momentum);
    }

    double loss = dpo_loss(result.policy, ref, pairs, cfg.tau, cfg.max_len);
    double margin = 0.0;
    for (const auto& pair : pairs)
      margin += log_prob(result.policy, pair.prompt, pair.chosen, cfg.max_len) -
                log_prob(result.policy, pair.prompt, pair.rejected, cfg.max_len);
    margin /= static_cast<double>(n);
    if (!std::isfinite(loss))
      throw NumericError("DPO loss diverged at epoch " + std::to_string(epoch) +
                         " (lr=" + std::to_string(cfg.learning_rate) + ")");
    result.trace.push_back({epoch, loss, margin});
  }
  return result;
}

}  // namespace popri
