#include "sftts/diffusion.hpp"

#include <cmath>

namespace sftts {

namespace {
void check_match(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": shape mismatch");
}
}  // namespace

Tensor forward_sample(const Tensor& x0, const Tensor& mu, double t, const Tensor& eps,
                      const NoiseSchedule& sched) {
  if (t < 0.0 || t > 1.0) throw DomainError("forward_sample: t outside [0, 1]");
  check_match(x0, mu, "forward_sample");
  check_match(x0, eps, "forward_sample");
  const double a = sched.meancoef(t);
  const double sd = std::sqrt(sched.lambda(t));
  Tensor x(x0.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = a * x0[i] + (1.0 - a) * mu[i] + sd * eps[i];
  return x;
}

Tensor analytic_gaussian_score(const Tensor& x, double t, const Tensor& m0, double gamma2,
                               const Tensor& mu, const NoiseSchedule& sched) {
  if (gamma2 < 0.0) throw DomainError("analytic_gaussian_score: negative variance");
  check_match(x, m0, "analytic_gaussian_score");
  check_match(x, mu, "analytic_gaussian_score");
  const double a = sched.meancoef(t);
  const double var_t = a * a * gamma2 + sched.lambda(t);
  if (var_t <= 0.0)
    throw DegenerateDensity("analytic_gaussian_score: zero marginal variance");
  Tensor score(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    score[i] = -(x[i] - (a * m0[i] + (1.0 - a) * mu[i])) / var_t;
  return score;
}

DiffusionState reverse_step(const DiffusionState& state, const Tensor& mu, const Tensor& score,
                            double h, const NoiseSchedule& sched, SolverMode mode,
                            const Tensor* noise) {
  if (h <= 0.0) throw DomainError("reverse_step: step size must be positive");
  if (state.t - h < -1e-12) throw DomainError("reverse_step: step past t = 0");
  check_match(state.x, score, "reverse_step");
  check_match(state.x, mu, "reverse_step");
  const double b = sched.beta(state.t);
  DiffusionState out;
  out.t = state.t - h;
  out.x = Tensor(state.x.shape());
  if (mode == SolverMode::kOde) {
    const double c = 0.5 * b * h;
    for (std::int64_t i = 0; i < out.x.numel(); ++i)
      out.x[i] = state.x[i] - c * ((mu[i] - state.x[i]) - score[i]);
  } else {
    if (!noise) throw DomainError("reverse_step: sde mode requires a noise draw");
    check_match(state.x, *noise, "reverse_step");
    const double c = b * h;
    const double sd = std::sqrt(b * h);
    for (std::int64_t i = 0; i < out.x.numel(); ++i)
      out.x[i] = state.x[i] - c * (0.5 * (mu[i] - state.x[i]) - score[i]) + sd * (*noise)[i];
  }
  return out;
}

Tensor sample_reverse(const Tensor& mu, int n_steps, double tau, SolverMode mode,
                      const NoiseSchedule& sched, const ScoreFn& score_fn, std::uint64_t seed) {
  if (n_steps < 1) throw DomainError("sample_reverse: need at least one step");
  if (tau <= 0.0) throw DomainError("sample_reverse: temperature must be positive");
  Rng rng(seed);
  DiffusionState state;
  state.t = 1.0;
  state.x = Tensor(mu.shape());
  const double init_sd = 1.0 / std::sqrt(tau);
  for (std::int64_t i = 0; i < state.x.numel(); ++i)
    state.x[i] = mu[i] + init_sd * rng.normal();
  const double h = 1.0 / n_steps;
  for (int k = 0; k < n_steps; ++k) {
    const Tensor score = score_fn(state.x, state.t);
    if (mode == SolverMode::kSde) {
      Tensor noise(mu.shape());
      for (std::int64_t i = 0; i < noise.numel(); ++i) noise[i] = rng.normal();
      state = reverse_step(state, mu, score, h, sched, mode, &noise);
    } else {
      state = reverse_step(state, mu, score, h, sched, mode);
    }
  }
  return state.x;
}

Tensor compose_output(const Tensor& x_e_refined, const Tensor& x_f) {
  check_match(x_e_refined, x_f, "compose_output");
  Tensor out(x_e_refined.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x_e_refined[i] + x_f[i];
  return out;
}

}  // namespace sftts
