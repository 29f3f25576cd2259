#pragma once

#include <cstdint>
#include <functional>

#include "sftts/common.hpp"
#include "sftts/tensor.hpp"

namespace sftts {

// Linear noise schedule with closed-form derived quantities:
//   beta(t)    = beta0 + (beta1 - beta0) t
//   cum(t)     = integral of beta over [0, t]
//   lambda(t)  = 1 - exp(-cum(t))      (marginal noise variance)
//   meancoef(t)= exp(-cum(t) / 2)      (data coefficient of the marginal mean)
struct NoiseSchedule {
  double beta0 = 0.05;
  double beta1 = 20.0;

  NoiseSchedule() = default;
  NoiseSchedule(double b0, double b1) : beta0(b0), beta1(b1) {
    if (!(0.0 < b0 && b0 <= b1)) throw DomainError("noise schedule: need 0 < beta0 <= beta1");
  }

  double beta(double t) const { return beta0 + (beta1 - beta0) * t; }
  double cum(double t) const { return beta0 * t + 0.5 * (beta1 - beta0) * t * t; }
  double lambda(double t) const { return -std::expm1(-cum(t)); }
  double meancoef(double t) const { return std::exp(-0.5 * cum(t)); }
};

// Closed-form marginal draw x_t = a x0 + (1 - a) mu + sqrt(lambda) eps with
// a = meancoef(t); eps is a standard normal draw of the same shape.
Tensor forward_sample(const Tensor& x0, const Tensor& mu, double t, const Tensor& eps,
                      const NoiseSchedule& sched);

// Score of the marginal density when the data is N(m0, gamma2 I):
// -(x - mean_t) / var_t with mean_t = a m0 + (1-a) mu, var_t = a^2 gamma2 + lambda.
Tensor analytic_gaussian_score(const Tensor& x, double t, const Tensor& m0, double gamma2,
                               const Tensor& mu, const NoiseSchedule& sched);

enum class SolverMode { kOde, kSde };

inline const char* solver_name(SolverMode m) { return m == SolverMode::kOde ? "pf" : "ml"; }

struct DiffusionState {
  Tensor x;
  double t = 1.0;
};

// One explicit reverse step from t to t - h, evaluating beta and the score at
// the current point:
//   ode: x <- x - (beta h / 2) ((mu - x) - score)
//   sde: x <- x - beta h ((mu - x)/2 - score) + sqrt(beta h) noise
// SDE mode requires a standard normal draw.
DiffusionState reverse_step(const DiffusionState& state, const Tensor& mu, const Tensor& score,
                            double h, const NoiseSchedule& sched, SolverMode mode,
                            const Tensor* noise = nullptr);

using ScoreFn = std::function<Tensor(const Tensor& x, double t)>;

// Full reverse pass: x initialized to mu + eps / sqrt(tau), then n_steps
// uniform reverse steps from t = 1 to t = 0. The rng stream is consumed in a
// fixed order: the initial draw first, then one draw per SDE step.
Tensor sample_reverse(const Tensor& mu, int n_steps, double tau, SolverMode mode,
                      const NoiseSchedule& sched, const ScoreFn& score_fn, std::uint64_t seed);

// Final composition: element-wise sum of the refined excitation and the
// formant representation.
Tensor compose_output(const Tensor& x_e_refined, const Tensor& x_f);

}  // namespace sftts
