#include "sftts/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sftts/common.hpp"

namespace sftts {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

void check_feasible(const Tensor& log_probs) {
  if (log_probs.ndim() != 2) throw ShapeError("alignment: expected [N x T] matrix");
  if (log_probs.cols() < log_probs.rows())
    throw InfeasibleAlignment("alignment: fewer frames than phonemes");
}
}  // namespace

std::vector<int> viterbi_hard_alignment(const Tensor& log_probs) {
  check_feasible(log_probs);
  const int n_n = log_probs.rows(), t_n = log_probs.cols();
  Tensor delta({t_n, n_n});
  for (std::int64_t i = 0; i < delta.numel(); ++i) delta[i] = kNegInf;
  delta.at(0, 0) = log_probs.at(0, 0);
  for (int t = 1; t < t_n; ++t) {
    const int lo = std::max(0, n_n - (t_n - t));
    const int hi = std::min(t, n_n - 1);
    for (int n = lo; n <= hi; ++n) {
      const double stay = delta.at(t - 1, n);
      const double adv = n > 0 ? delta.at(t - 1, n - 1) : kNegInf;
      delta.at(t, n) = std::max(stay, adv) + log_probs.at(n, t);
    }
  }
  // Backtrack. On ties prefer the diagonal predecessor, which places every
  // transition as late as possible and yields durations (T-N+1, 1, ..., 1)
  // for a uniform matrix.
  std::vector<int> durations(static_cast<std::size_t>(n_n), 0);
  int n = n_n - 1;
  for (int t = t_n - 1; t >= 0; --t) {
    durations[static_cast<std::size_t>(n)] += 1;
    if (t == 0) break;
    const double stay = delta.at(t - 1, n);
    const double adv = n > 0 ? delta.at(t - 1, n - 1) : kNegInf;
    if (adv >= stay) n -= 1;
  }
  return durations;
}

double forward_sum_nll(const Tensor& log_probs) {
  check_feasible(log_probs);
  const int n_n = log_probs.rows(), t_n = log_probs.cols();
  std::vector<double> prev(static_cast<std::size_t>(n_n), kNegInf);
  std::vector<double> cur(static_cast<std::size_t>(n_n), kNegInf);
  prev[0] = log_probs.at(0, 0);
  for (int t = 1; t < t_n; ++t) {
    std::fill(cur.begin(), cur.end(), kNegInf);
    const int lo = std::max(0, n_n - (t_n - t));
    const int hi = std::min(t, n_n - 1);
    for (int n = lo; n <= hi; ++n) {
      const double stay = prev[static_cast<std::size_t>(n)];
      const double adv = n > 0 ? prev[static_cast<std::size_t>(n - 1)] : kNegInf;
      cur[static_cast<std::size_t>(n)] = log_add(stay, adv) + log_probs.at(n, t);
    }
    std::swap(prev, cur);
  }
  return -prev[static_cast<std::size_t>(n_n - 1)];
}

Tensor beta_binomial_prior(int n_phonemes, int n_frames, double scaling) {
  if (n_phonemes < 1 || n_frames < 1) throw ShapeError("beta_binomial_prior: empty axis");
  Tensor prior({n_frames, n_phonemes});
  auto lbeta = [](double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  };
  const int k_max = n_phonemes - 1;
  for (int t = 0; t < n_frames; ++t) {
    const double alpha = scaling * (t + 1);
    const double beta = scaling * (n_frames - t);
    for (int n = 0; n <= k_max; ++n) {
      const double log_choose =
          std::lgamma(k_max + 1.0) - std::lgamma(n + 1.0) - std::lgamma(k_max - n + 1.0);
      prior.at(t, n) =
          log_choose + lbeta(n + alpha, k_max - n + beta) - lbeta(alpha, beta);
    }
  }
  return prior;
}

int round_duration(double frames) {
  return std::max(1, static_cast<int>(std::floor(frames + 0.5)));
}

}  // namespace sftts
