#include "sftts/losses.hpp"

#include <cmath>

namespace sftts {

Var mse_loss(Graph& g, Var pred, Var target) {
  return g.mean_all(g.square(g.sub(pred, target)));
}

Var duration_loss(Graph& g, Var log_dur_pred, const std::vector<int>& hard_durations) {
  Tensor target({static_cast<int>(hard_durations.size()), 1});
  for (std::size_t i = 0; i < hard_durations.size(); ++i)
    target[static_cast<std::int64_t>(i)] = std::log(static_cast<double>(hard_durations[i]));
  return mse_loss(g, log_dur_pred, g.input(std::move(target)));
}

Var align_loss(Graph& g, Var log_soft, const std::vector<int>& hard_durations) {
  const int t_n = g.val(log_soft).rows();
  std::vector<int> frame_phoneme;
  frame_phoneme.reserve(static_cast<std::size_t>(t_n));
  for (std::size_t n = 0; n < hard_durations.size(); ++n)
    for (int d = 0; d < hard_durations[n]; ++d) frame_phoneme.push_back(static_cast<int>(n));
  if (static_cast<int>(frame_phoneme.size()) != t_n)
    throw ShapeError("align_loss: durations do not sum to frame count");
  Var fsum = g.forward_sum_nll(log_soft);
  Var ce = g.scale(g.mean_all(g.pick_per_row(log_soft, frame_phoneme)), -1.0);
  return g.add(fsum, ce);
}

Var prior_loss(Graph& g, Var mu, Var x, Var x_f) {
  return g.mean_all(g.square(g.sub(mu, g.sub(x, x_f))));
}

Var diffusion_loss(Graph& g, Var score_out, Var eps, double lambda_t) {
  Var resid = g.add_scaled(g.scale(score_out, std::sqrt(lambda_t)), 1.0, eps, 1.0);
  return g.mean_all(g.square(resid));
}

Var compute_losses(Graph& g, const LossInputs& in, const LossWeights& w, LossBreakdown* out) {
  if (!in.x) throw InvalidInput("compute_losses: missing ground-truth mel");
  Var x_const = g.input_ref(in.x);

  Var l_dur = duration_loss(g, in.log_dur_pred, in.hard_durations);
  Var l_pitch = mse_loss(g, in.pitch_pred, g.input(in.pitch_target));
  Var l_align = align_loss(g, in.log_soft, in.hard_durations);
  Var l_prior = prior_loss(g, in.mu, x_const, in.x_f);
  Var l_diff = diffusion_loss(g, in.score_out, g.input(in.eps), in.sched.lambda(in.t));

  Var total = g.add_scaled(g.scale(l_dur, w.duration), 1.0, g.scale(l_pitch, w.pitch), 1.0);
  total = g.add(total, g.scale(l_align, w.align));
  total = g.add(total, g.scale(l_prior, w.prior));
  total = g.add(total, g.scale(l_diff, w.diffusion));

  LossBreakdown parts;
  parts.duration = g.val(l_dur)[0];
  parts.pitch = g.val(l_pitch)[0];
  parts.align = g.val(l_align)[0];
  parts.prior = g.val(l_prior)[0];
  parts.diffusion = g.val(l_diff)[0];
  if (!in.no_energy) {
    Var l_energy = mse_loss(g, in.energy_pred, g.input(in.energy_target));
    total = g.add(total, g.scale(l_energy, w.energy));
    parts.energy = g.val(l_energy)[0];
  }
  parts.total = w.duration * parts.duration + w.pitch * parts.pitch + w.energy * parts.energy +
                w.align * parts.align + w.prior * parts.prior + w.diffusion * parts.diffusion;

  const double checks[7] = {parts.duration, parts.pitch, parts.energy, parts.align,
                            parts.prior,    parts.diffusion, parts.total};
  for (double c : checks)
    if (!std::isfinite(c)) throw TrainingDivergence("compute_losses: non-finite loss term");
  // Nonnegative by construction; the forward-sum NLL of a near-degenerate
  // alignment can round to -1e-15, so allow that much.
  for (double c : checks)
    if (c < -1e-9) throw TrainingDivergence("compute_losses: negative loss term");

  if (out) *out = parts;
  return total;
}

}  // namespace sftts
