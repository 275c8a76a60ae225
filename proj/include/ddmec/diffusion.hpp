#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "ddmec/denoiser.hpp"
#include "ddmec/numkit.hpp"

namespace ddmec {

// Precomputed beta/alpha/alpha-bar sequences, 1-indexed by timestep
// (beta(t) for t in 1..T; alpha_bar(0) == 1).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(int T, double beta_min = 1e-4, double beta_max = 0.02);

    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const;  // t in 0..T
    void validate() const;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one timestep per row.
Tensor forward_sample(const Tensor& x0_rows, const std::vector<int>& ts, const Tensor& eps_rows,
                      const NoiseSchedule& sched);
Tensor forward_sample(const Tensor& x0_rows, int t, const Tensor& eps_rows,
                      const NoiseSchedule& sched);

// eps_uncond + w * (eps_cond - eps_uncond); w = 0 and w = 1 return the
// corresponding input exactly.
Tensor cfg_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// One ancestral reverse step: mean (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t),
// variance beta_t. Caller passes noise = 0 at t = 1.
Tensor ddpm_reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& noise,
                         const NoiseSchedule& sched);

// DDIM update from t to t_prev (< t). sigma = eta * sqrt((1-abar_prev)/(1-abar_t))
//   * sqrt(1 - abar_t/abar_prev); eta = 0 is deterministic.
Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat, double eta,
                 const Tensor& noise, const NoiseSchedule& sched);
// Mean part only (the stochastic term excluded), plus the shared variance.
Tensor ddim_mean(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat, double eta,
                 const NoiseSchedule& sched);
double ddim_sigma2(int t, int t_prev, double eta, const NoiseSchedule& sched);

// Strictly decreasing DDIM timestep subsequence of 1..T (first entry T); the
// final reverse step goes to t_prev = 0.
std::vector<int> ddim_timesteps(int T, int n_steps);

// ---------------------------------------------------------------------------
// Losses and likelihood estimation.
//
// RNG draw order is part of the contract so tests can mirror the stream:
//   denoising_loss: per row, in order: t ~ U{1..T}, then data_dim normals;
//     after all rows, for conditional nets with drop_prob > 0, one dropout
//     uniform per row.
//   estimate_nll: per MC draw k: one t per row, then a full batch of normals.
// ---------------------------------------------------------------------------

// Monte-Carlo estimate of -log p(x0) up to an additive constant shared by all
// models with the same schedule and data dimension.
//   Uniform:    (T/2K) sum_k ||eps_k - eps_hat||^2            (training-loss weights)
//   Likelihood: (T/K)  sum_k w_t ||eps_k - eps_hat||^2 with
//               w_t = beta_t / (2 alpha_t (1 - abar_t)),      (calibrated nats)
enum class NllWeighting { Uniform, Likelihood };

double nll_step_weight(int t, const NoiseSchedule& sched, NllWeighting w);

std::vector<double> estimate_nll_batch(Denoiser& net, const NoiseSchedule& sched,
                                       const Tensor& x0_rows, const Tensor* cond_rows, int k_draws,
                                       Rng& rng, NllWeighting weighting = NllWeighting::Uniform,
                                       bool stratified = false);
double estimate_nll(Denoiser& net, const NoiseSchedule& sched, const Tensor& x0_row,
                    const Tensor* cond_row, int k_draws, Rng& rng,
                    NllWeighting weighting = NllWeighting::Uniform, bool stratified = false);

// Mean over the batch of ||eps - eps_hat(x_t, [cond,] t)||^2 with per-row
// (t, eps) draws and per-row condition dropout. Returns the loss value.
double denoising_loss(Denoiser& net, const NoiseSchedule& sched, const Tensor& x0_rows,
                      const Tensor* cond_rows, double drop_prob, Rng& rng);

// Same draws, recorded on a tape for training. Returns the scalar loss node.
Tape::Id denoising_loss_node(Tape& tape, Denoiser& net, const NoiseSchedule& sched,
                             const Tensor& x0_rows, const Tensor* cond_rows, double drop_prob,
                             Rng& rng);

// ---------------------------------------------------------------------------
// Sampling with optional trajectory recording.
// ---------------------------------------------------------------------------

struct SampleConfig {
    int n_steps = 50;
    double guidance = 7.0;
    double eta = 1.0;
    bool record_trajectory = false;
    std::uint64_t seed = 0;        // used by callers that derive their own Rng
    std::size_t n_samples = 1;     // batch size when no cond rows are given
};

struct TrajectoryStep {
    int t = 0;
    int t_prev = 0;
    Tensor x_t;    // state entering the step (batch rows)
    Tensor mean;   // posterior mean of x_{t_prev}
    double var = 0.0;
};

// Reverse-process record, ordered from the T side down to 0; x_{t_prev} of
// step i is steps[i+1].x_t (or x0 for the last step).
struct TrajectoryBatch {
    std::optional<Tensor> cond;
    std::vector<TrajectoryStep> steps;
    Tensor x0;
    double guidance = 0.0;
    double eta = 0.0;
    int schedule_T = 0;

    std::size_t batch() const { return x0.rows(); }
    const Tensor& next_state(std::size_t step) const;
};

struct SampleResult {
    Tensor x0;
    std::optional<TrajectoryBatch> trajectory;
};

// Draw order: one batch of normals for x_T, then per DDIM step one batch of
// normals when the step variance is positive. Conditional nets evaluate the
// conditional and null branches and combine with cfg_noise.
SampleResult sample(Denoiser& net, const NoiseSchedule& sched, const Tensor* cond_rows,
                    const SampleConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Model bundle: denoiser + schedule + optional EMA shadow of the parameters.
// ---------------------------------------------------------------------------

struct DiffusionModel {
    Denoiser net;
    NoiseSchedule schedule;
    std::optional<std::vector<Tensor>> ema;
    double ema_decay = 0.999;
    std::uint64_t steps_trained = 0;

    bool conditional() const { return net.config().conditional(); }
    void ema_init();
    void ema_update();
    Denoiser net_with_ema() const;  // copy with EMA values when present
};

struct PretrainConfig {
    int steps = 5000;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    double ema_decay = 0.999;
    double grad_clip = 0.0;  // 0 disables
    bool use_ema = true;
};

struct LossPoint {
    int step;
    double loss;
};

// Unconditional denoising pretraining on data rows; batches are drawn with
// replacement from rng. Appends one LossPoint per step when log is non-null.
void train_unconditional(DiffusionModel& model, const Tensor& data, const PretrainConfig& cfg,
                         Rng& rng, std::vector<LossPoint>* log = nullptr);

}  // namespace ddmec
