#pragma once

#include <vector>

#include "sftts/diffusion.hpp"
#include "sftts/graph.hpp"

namespace sftts {

struct LossBreakdown {
  double duration = 0, pitch = 0, energy = 0, align = 0, prior = 0, diffusion = 0, total = 0;
};

struct LossWeights {
  double duration = 1, pitch = 1, energy = 1, align = 1, prior = 1, diffusion = 1;
};

// Mean over entries of the squared difference.
Var mse_loss(Graph& g, Var pred, Var target);

// MSE between predicted log durations [N, 1] and log of the teacher
// durations from the aligner.
Var duration_loss(Graph& g, Var log_dur_pred, const std::vector<int>& hard_durations);

// Forward-sum NLL plus cross-entropy of the hard (one-hot per frame)
// alignment under the soft distribution, averaged over frames.
// log_soft is [T, N]; hard_durations sum to T.
Var align_loss(Graph& g, Var log_soft, const std::vector<int>& hard_durations);

// Mean squared error between mu and (x - x_f).
Var prior_loss(Graph& g, Var mu, Var x, Var x_f);

// lambda_t-weighted score-matching error against the target -eps/sqrt(lambda),
// realized as mean over elements of || sqrt(lambda) score + eps ||^2.
Var diffusion_loss(Graph& g, Var score_out, Var eps, double lambda_t);

// Everything a single training item contributes to the loss.
struct LossInputs {
  Var log_dur_pred, pitch_pred, energy_pred;  // [N, 1]; energy unused if no_energy
  Tensor pitch_target, energy_target;         // [N, 1], normalized
  std::vector<int> hard_durations;
  Var log_soft;                   // [T, N]
  Var mu, x_f;                    // [T, 80], full length
  const Tensor* x = nullptr;      // [T, 80] ground-truth mel
  Var score_out;                  // [Tc, 80] on the diffusion crop
  Tensor eps;                     // [Tc, 80]
  double t = 0.5;
  NoiseSchedule sched;
  bool no_energy = false;
};

// Assembles the six training terms; returns the scalar total node and fills
// the component values. Throws TrainingDivergence on non-finite terms.
Var compute_losses(Graph& g, const LossInputs& in, const LossWeights& w, LossBreakdown* out);

}  // namespace sftts
