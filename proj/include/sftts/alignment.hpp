#pragma once

#include <vector>

#include "sftts/tensor.hpp"

namespace sftts {

// Best monotone complete segmentation of T frames into N phonemes, maximizing
// the summed per-frame log probability. log_probs is [N x T]. Ties break
// toward the earlier transition. Returned durations are >= 1 and sum to T.
std::vector<int> viterbi_hard_alignment(const Tensor& log_probs);

// Negative log of the summed probability over all monotone complete paths.
// log_probs is [N x T].
double forward_sum_nll(const Tensor& log_probs);

// Log beta-binomial alignment prior, [T x N]: frame t favours phonemes near
// the diagonal n ~ (t/T) * N.
Tensor beta_binomial_prior(int n_phonemes, int n_frames, double scaling = 1.0);

// Inference-time duration rounding: round half up, clamp to >= 1.
int round_duration(double frames);

}  // namespace sftts
