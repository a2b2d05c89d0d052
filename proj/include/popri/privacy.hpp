#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "popri/errors.hpp"
#include "popri/rng.hpp"

namespace popri {

// Mechanism parameters for one experiment. `sigma` is the noise multiplier:
// the aggregated sum of client vectors carries N(0, sigma^2 * I) while each
// clipped client vector has L2 norm at most `sensitivity`.
struct PrivacySpec {
  double sigma = 0.0;  // 0 only for non-private diagnostic runs
  double delta = 3e-6;
  double q = 1.0;      // client sampling rate per round
  int rounds = 1;
  double sensitivity = 1.0;

  void validate() const {
    if (sigma < 0.0) throw ConfigError("sigma must be non-negative");
    if (delta <= 0.0 || delta >= 1.0) throw ConfigError("delta must lie in (0, 1)");
    if (q <= 0.0 || q > 1.0) throw ConfigError("sampling rate q must lie in (0, 1]");
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    if (sensitivity <= 0.0) throw ConfigError("sensitivity must be positive");
  }

  double noise_multiplier() const { return sigma / sensitivity; }
};

// v / max(1, ||v||_2): caps every client contribution at unit norm.
inline std::vector<double> clip_to_unit(std::span<const double> v) {
  double norm_sq = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite entry in clip_to_unit");
    norm_sq += x * x;
  }
  const double scale = 1.0 / std::max(1.0, std::sqrt(norm_sq));
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x *= scale;
  return out;
}

// Adds i.i.d. N(0, sigma^2 / L) per coordinate: when L participating clients
// each add this, their aggregated sum carries N(0, sigma^2 I).
inline std::vector<double> add_client_noise(std::span<const double> v, double sigma, int L,
                                            Rng& rng) {
  if (L < 1) throw ConfigError("client count must be >= 1");
  std::vector<double> out(v.begin(), v.end());
  if (sigma == 0.0) return out;
  const double stddev = sigma / std::sqrt(static_cast<double>(L));
  for (double& x : out) x += stddev * rng.gaussian();
  return out;
}

// Simulated secure aggregation. Only the running sum is ever stored;
// individual submissions are folded in and forgotten, so nothing downstream
// of this object can reach a per-client vector. aggregate() releases the
// mean and resets the accumulator.
class SecureAggregator {
 public:
  explicit SecureAggregator(std::size_t dim) : sum_(dim, 0.0) {}

  void submit(std::span<const double> v) {
    if (v.size() != sum_.size())
      throw DimensionMismatchError("submission dim " + std::to_string(v.size()) +
                                   " vs aggregator dim " + std::to_string(sum_.size()));
    for (std::size_t i = 0; i < v.size(); ++i) sum_[i] += v[i];
    ++count_;
  }

  int contributions() const { return count_; }

  std::vector<double> aggregate() {
    if (count_ == 0) throw ConfigError("secure aggregation over zero contributions");
    std::vector<double> mean(sum_.size());
    for (std::size_t i = 0; i < sum_.size(); ++i) mean[i] = sum_[i] / count_;
    std::fill(sum_.begin(), sum_.end(), 0.0);
    count_ = 0;
    return mean;
  }

 private:
  std::vector<double> sum_;
  int count_ = 0;
};

// ---------------------------------------------------------------------------
// RDP accounting for the (Poisson-)subsampled Gaussian mechanism.
//
// Per-round Renyi divergence eps(alpha) of the sampled Gaussian mechanism,
// following the standard log-space evaluation: exact binomial expansion at
// integer orders, the split-integral series at fractional orders. q = 1
// reduces to the plain Gaussian mechanism, alpha / (2 sigma^2), exactly.
// ---------------------------------------------------------------------------

namespace rdp_detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

inline double log_sub(double a, double b) {
  if (b == -kInf) return a;
  if (b > a) throw NumericError("log_sub of negative difference in RDP series");
  if (a == b) return -kInf;
  return a + std::log1p(-std::exp(b - a));
}

inline double log_binom(double n, double k) {  // integer arguments
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline double log_erfc(double x) {
  if (x > 25.0) {
    // Laurent tail; erfc underflows past ~26.6.
    const double x2 = x * x;
    return -0.5 * std::log(M_PI) - std::log(x) - x2 - 0.5 / x2 + 0.625 / (x2 * x2) -
           37.0 / 24.0 / (x2 * x2 * x2) + 107.0 / 60.0 / (x2 * x2 * x2 * x2);
  }
  return std::log(std::erfc(x));
}

inline double log_a_int(double q, double sigma, int alpha) {
  double log_a = -kInf;
  for (int k = 0; k <= alpha; ++k) {
    const double term = log_binom(alpha, k) + k * std::log(q) +
                        (alpha - k) * std::log1p(-q) +
                        (static_cast<double>(k) * (k - 1)) / (2.0 * sigma * sigma);
    log_a = log_add(log_a, term);
  }
  return log_a;
}

inline double log_a_frac(double q, double sigma, double alpha) {
  // The two halves of the defining integral, split at z0, accumulated in log
  // space with explicit signs for the generalized binomial coefficients.
  const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
  double log_a0 = -kInf, log_a1 = -kInf;
  double log_coef_abs = 0.0;  // |binom(alpha, 0)| = 1
  double sign = 1.0;

  for (int i = 0; i <= 10000; ++i) {
    if (i > 0) {
      const double factor = (alpha - i + 1.0) / i;
      if (factor == 0.0) break;  // integer alpha: series terminates
      log_coef_abs += std::log(std::abs(factor));
      if (factor < 0.0) sign = -sign;
    }
    const double j = alpha - i;
    const double log_t0 = log_coef_abs + i * std::log(q) + j * std::log1p(-q);
    const double log_t1 = log_coef_abs + j * std::log(q) + i * std::log1p(-q);
    const double log_e0 = std::log(0.5) + log_erfc((i - z0) / (std::sqrt(2.0) * sigma));
    const double log_e1 = std::log(0.5) + log_erfc((z0 - j) / (std::sqrt(2.0) * sigma));
    const double log_s0 = log_t0 + (i * static_cast<double>(i) - i) / (2.0 * sigma * sigma) + log_e0;
    const double log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
    if (sign > 0.0) {
      log_a0 = log_add(log_a0, log_s0);
      log_a1 = log_add(log_a1, log_s1);
    } else {
      log_a0 = log_sub(log_a0, log_s0);
      log_a1 = log_sub(log_a1, log_s1);
    }
    if (static_cast<double>(i) > alpha && std::max(log_s0, log_s1) < -60.0) break;
  }
  return log_add(log_a0, log_a1);
}

}  // namespace rdp_detail

inline std::vector<double> default_rdp_orders() {
  std::vector<double> orders{1.25, 1.5, 1.75};
  for (double a = 2.0; a < 64.0 + 1e-9; a += 0.25) orders.push_back(a);
  orders.push_back(128.0);
  orders.push_back(256.0);
  return orders;
}

// Per-round eps(alpha) of one subsampled Gaussian release with the given
// noise multiplier. sigma = 0 yields the infinite-eps sentinel.
inline std::vector<double> rdp_subsampled_gaussian(double sigma, double q,
                                                   const std::vector<double>& orders) {
  if (q <= 0.0 || q > 1.0) throw ConfigError("sampling rate q must lie in (0, 1]");
  std::vector<double> eps(orders.size());
  if (sigma == 0.0) {
    std::fill(eps.begin(), eps.end(), rdp_detail::kInf);
    return eps;
  }
  if (sigma < 0.0) throw ConfigError("sigma must be non-negative");
  for (std::size_t i = 0; i < orders.size(); ++i) {
    const double alpha = orders[i];
    if (alpha <= 1.0) throw ConfigError("RDP orders must exceed 1");
    if (q == 1.0) {
      eps[i] = alpha / (2.0 * sigma * sigma);
      continue;
    }
    const double nearest = std::round(alpha);
    const double log_a = (std::abs(alpha - nearest) < 1e-12 && nearest >= 1.0)
                             ? rdp_detail::log_a_int(q, sigma, static_cast<int>(nearest))
                             : rdp_detail::log_a_frac(q, sigma, alpha);
    eps[i] = std::max(0.0, log_a / (alpha - 1.0));
  }
  return eps;
}

// Accumulated RDP curve across composed releases.
struct AccountantState {
  std::vector<double> orders;
  std::vector<double> eps_rdp;

  static AccountantState fresh(const std::vector<double>& orders) {
    return {orders, std::vector<double>(orders.size(), 0.0)};
  }
};

inline AccountantState compose(AccountantState state, const std::vector<double>& per_round_rdp,
                               int rounds) {
  if (rounds < 1) throw ConfigError("compose over fewer than one round");
  if (per_round_rdp.size() != state.orders.size())
    throw DimensionMismatchError("per-round RDP grid does not match accountant orders");
  for (std::size_t i = 0; i < state.eps_rdp.size(); ++i)
    state.eps_rdp[i] += rounds * per_round_rdp[i];
  return state;
}

struct EpsilonResult {
  double epsilon;
  double order;  // argmin order of the conversion
};

// Classic RDP -> (eps, delta) conversion: min over orders of
// eps_rdp(alpha) + log(1/delta) / (alpha - 1).
inline EpsilonResult rdp_to_eps(const AccountantState& state, double delta) {
  if (delta <= 0.0 || delta >= 1.0) throw ConfigError("delta must lie in (0, 1)");
  const double log_inv_delta = std::log(1.0 / delta);
  EpsilonResult best{rdp_detail::kInf, 0.0};
  for (std::size_t i = 0; i < state.orders.size(); ++i) {
    const double eps = state.eps_rdp[i] + log_inv_delta / (state.orders[i] - 1.0);
    if (eps < best.epsilon) best = {eps, state.orders[i]};
  }
  return best;
}

// End-to-end accountant value for T rounds of the mechanism described by a
// PrivacySpec (noise multiplier sigma / sensitivity, sampling rate q).
inline EpsilonResult account_epsilon(double sigma, double delta, double q, int rounds,
                                     double sensitivity = 1.0) {
  if (sigma == 0.0) return {rdp_detail::kInf, 0.0};
  const auto orders = default_rdp_orders();
  const auto per_round = rdp_subsampled_gaussian(sigma / sensitivity, q, orders);
  const auto state = compose(AccountantState::fresh(orders), per_round, rounds);
  return rdp_to_eps(state, delta);
}

inline EpsilonResult account_epsilon(const PrivacySpec& spec) {
  spec.validate();
  return account_epsilon(spec.sigma, spec.delta, spec.q, spec.rounds, spec.sensitivity);
}

// Bisection inverse of the accountant: smallest sigma in [0.1, 1000] whose
// epsilon matches the target to 0.1% relative.
inline double calibrate_sigma(double target_eps, double delta, double q, int rounds,
                              double sensitivity = 1.0) {
  if (target_eps <= 0.0) throw ConfigError("target epsilon must be positive");
  double lo = 0.1, hi = 1000.0;
  const double eps_lo = account_epsilon(lo, delta, q, rounds, sensitivity).epsilon;
  const double eps_hi = account_epsilon(hi, delta, q, rounds, sensitivity).epsilon;
  if (target_eps > eps_lo || target_eps < eps_hi)
    throw CalibrationError("target eps " + std::to_string(target_eps) + " outside [" +
                           std::to_string(eps_hi) + ", " + std::to_string(eps_lo) +
                           "] reachable for sigma in [0.1, 1000]");
  double sigma = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    sigma = 0.5 * (lo + hi);
    const double eps = account_epsilon(sigma, delta, q, rounds, sensitivity).epsilon;
    if (std::abs(eps - target_eps) < 1e-3 * target_eps) return sigma;
    if (eps > target_eps)
      lo = sigma;  // too little noise
    else
      hi = sigma;
  }
  throw CalibrationError("bisection did not converge for target eps " +
                         std::to_string(target_eps));
}

}  // namespace popri
