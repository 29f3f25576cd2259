#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "sftts/alignment.hpp"
#include "sftts/graph.hpp"
#include "testutil.hpp"

using namespace sftts;

namespace {

// Enumerate every monotone complete segmentation (durations >= 1 summing to
// T) of N phonemes; the exhaustive oracle for both DP routines.
void enumerate_paths(int n, int t, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
  if (static_cast<int>(cur.size()) == n - 1) {
    int used = 0;
    for (int d : cur) used += d;
    if (t - used >= 1) {
      auto full = cur;
      full.push_back(t - used);
      out.push_back(full);
    }
    return;
  }
  int used = 0;
  for (int d : cur) used += d;
  for (int d = 1; used + d + (n - 1 - static_cast<int>(cur.size())) <= t; ++d) {
    cur.push_back(d);
    enumerate_paths(n, t, cur, out);
    cur.pop_back();
  }
}

std::vector<std::vector<int>> all_paths(int n, int t) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  enumerate_paths(n, t, cur, out);
  return out;
}

double path_score(const Tensor& lp, const std::vector<int>& durations) {
  double s = 0;
  int t = 0;
  for (int n = 0; n < static_cast<int>(durations.size()); ++n)
    for (int d = 0; d < durations[static_cast<std::size_t>(n)]; ++d, ++t) s += lp.at(n, t);
  return s;
}

// Best path; among ties the lexicographically smallest frame-to-phoneme map,
// i.e. transitions as late as possible.
std::vector<int> brute_best(const Tensor& lp) {
  auto paths = all_paths(lp.rows(), lp.cols());
  std::vector<int> best;
  double best_score = 0;
  for (const auto& p : paths) {
    const double s = path_score(lp, p);
    if (best.empty() || s > best_score) {
      best = p;
      best_score = s;
    } else if (s == best_score) {
      // Larger early durations = later transitions = lexicographically
      // smaller phoneme-per-frame sequence.
      if (p > best) best = p;
    }
  }
  return best;
}

double brute_nll(const Tensor& lp) {
  auto paths = all_paths(lp.rows(), lp.cols());
  double mx = -1e300;
  for (const auto& p : paths) mx = std::max(mx, path_score(lp, p));
  double sum = 0;
  for (const auto& p : paths) sum += std::exp(path_score(lp, p) - mx);
  return -(mx + std::log(sum));
}

}  // namespace

TEST_CASE("viterbi: concentrated probabilities pick the obvious split") {
  Tensor lp({2, 4});
  for (int t = 0; t < 4; ++t) {
    lp.at(0, t) = t < 2 ? -0.1 : -5.0;
    lp.at(1, t) = t < 2 ? -5.0 : -0.1;
  }
  CHECK(viterbi_hard_alignment(lp) == std::vector<int>{2, 2});
}

TEST_CASE("viterbi: N equals T forces all-ones") {
  Tensor lp({3, 3});
  Rng rng(2);
  for (std::int64_t i = 0; i < lp.numel(); ++i) lp[i] = -rng.uniform();
  CHECK(viterbi_hard_alignment(lp) == std::vector<int>{1, 1, 1});
}

TEST_CASE("viterbi: uniform matrix resolves ties toward late transitions") {
  Tensor lp = Tensor::full({3, 7}, -1.0);
  CHECK(viterbi_hard_alignment(lp) == std::vector<int>{5, 1, 1});
}

TEST_CASE("viterbi: infeasible when T < N") {
  Tensor lp({4, 3});
  CHECK_THROWS_AS(viterbi_hard_alignment(lp), InfeasibleAlignment);
  CHECK_THROWS_AS(forward_sum_nll(lp), InfeasibleAlignment);
}

TEST_CASE("viterbi and forward sum match exhaustive enumeration") {
  Rng rng(11);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 1 + static_cast<int>(rng.below(4));
    const int t = n + static_cast<int>(rng.below(static_cast<std::uint64_t>(9 - n)));
    Tensor lp({n, t});
    for (std::int64_t i = 0; i < lp.numel(); ++i) lp[i] = -3.0 * rng.uniform();
    INFO("instance n=", n, " t=", t, " rep=", rep);
    CHECK(viterbi_hard_alignment(lp) == brute_best(lp));
    CHECK(forward_sum_nll(lp) == doctest::Approx(brute_nll(lp)).epsilon(1e-9));
  }
}

TEST_CASE("forward sum: single-phoneme and tiny closed forms") {
  Tensor lp1({1, 5});
  Rng rng(13);
  double sum = 0;
  for (int t = 0; t < 5; ++t) {
    lp1.at(0, t) = -rng.uniform();
    sum += lp1.at(0, t);
  }
  CHECK(forward_sum_nll(lp1) == doctest::Approx(-sum));

  // N=2, T=2, all probabilities 0.5: one path, NLL = log 4.
  Tensor lp2 = Tensor::full({2, 2}, std::log(0.5));
  CHECK(forward_sum_nll(lp2) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("forward sum dominates the best path") {
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 2 + static_cast<int>(rng.below(3));
    const int t = n + 1 + static_cast<int>(rng.below(4));
    Tensor lp({n, t});
    for (std::int64_t i = 0; i < lp.numel(); ++i) lp[i] = -2.0 * rng.uniform();
    const double nll = forward_sum_nll(lp);
    const double best = -path_score(lp, viterbi_hard_alignment(lp));
    CHECK(nll <= best + 1e-12);
  }
}

TEST_CASE("graph forward_sum agrees with the standalone routine") {
  Rng rng(19);
  Tensor lp({6, 3});  // [T, N] for the graph op
  for (std::int64_t i = 0; i < lp.numel(); ++i) lp[i] = -2.0 * rng.uniform();
  Graph g;
  const double via_graph = g.val(g.forward_sum_nll(g.input(lp)))[0];
  CHECK(via_graph == doctest::Approx(forward_sum_nll(sftts::transpose(lp))).epsilon(1e-12));
}

TEST_CASE("beta binomial prior is a diagonal band") {
  Tensor prior = beta_binomial_prior(5, 40);
  // Early frames favour early phonemes, late frames favour late ones.
  int arg_first = 0, arg_last = 0;
  for (int n = 0; n < 5; ++n) {
    if (prior.at(1, n) > prior.at(1, arg_first)) arg_first = n;
    if (prior.at(38, n) > prior.at(38, arg_last)) arg_last = n;
  }
  CHECK(arg_first <= 1);
  CHECK(arg_last >= 3);
  // Rows are normalized distributions over phonemes.
  for (int t = 0; t < 40; ++t) {
    double s = 0;
    for (int n = 0; n < 5; ++n) s += std::exp(prior.at(t, n));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("duration rounding: round half up, clamp at one") {
  CHECK(round_duration(0.2) == 1);
  CHECK(round_duration(-3.0) == 1);
  CHECK(round_duration(1.5) == 2);
  CHECK(round_duration(2.49) == 2);
  CHECK(round_duration(2.5) == 3);
}
