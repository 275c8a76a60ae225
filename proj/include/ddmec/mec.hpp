#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ddmec/diffusion.hpp"
#include "ddmec/numkit.hpp"

namespace ddmec {

// Fine-tuning configuration (Reinforcement Learning table defaults).
struct RLConfig {
    double lambda_x = 1e-3;        // KL-anchor weight for the X|Y model
    double lambda_y = 1e-3;        // and for the Y|X model
    int k_reward = 3;              // reward Monte Carlo draws
    int policy_updates = 4;        // gradient steps per phase
    double ratio_clip = 1e-4;      // importance-ratio clip half-width
    int grad_accum = 12;           // micro-batches per policy step
    double grad_clip = 1.0;        // global-norm bound
    double guidance_train = 7.0;   // CFG scale for training-time sampling
    std::size_t buffer_capacity = 0;  // 0 -> 50 * batch_size
    int total_steps = 2000;        // training-loop iterations
    std::size_t batch_size = 16;
    double lr = 1e-4;
    int joint_updates = 4;         // line-4 denoising updates per phase
    std::size_t kl_batch = 16;     // (x_t, y, t) triples per KL-anchor term
    int sample_steps = 50;         // DDIM steps for training-time sampling
    double eta_train = 1.0;        // stochasticity of training-time sampling
    bool use_baseline = true;      // running-mean advantage baseline
    double baseline_momentum = 0.9;
    NllWeighting reward_weighting = NllWeighting::Uniform;
    bool reward_stratified = false;

    void validate() const;
    std::size_t effective_buffer_capacity() const {
        return buffer_capacity ? buffer_capacity : 50 * batch_size;
    }
};

// The two conditional models and their frozen unconditional anchors.
// theta models X given Y; phi models Y given X. Anchors are never mutated.
struct CouplingPair {
    DiffusionModel theta;
    DiffusionModel phi;
    Denoiser theta_anchor;
    Denoiser phi_anchor;
};

// Builds the pair from two pretrained unconditional models: conditionals are
// initialized from the anchors with zero injections (identical function at
// step 0).
CouplingPair make_coupling_pair(const DiffusionModel& uncond_x, const DiffusionModel& uncond_y,
                                double cond_drop_prob = 0.1);

// FIFO replay of generated (x, y) pairs.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);

    void push(const Tensor& x_row, const Tensor& y_row);
    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }

    // Uniform draws (with replacement); rows of the two outputs stay paired.
    std::pair<Tensor, Tensor> sample(std::size_t n, Rng& rng) const;
    std::pair<Tensor, Tensor> row(std::size_t i) const;
    std::pair<Tensor, Tensor> recent_row(std::size_t k) const;  // k = 0 is newest

private:
    std::size_t capacity_;
    std::size_t size_ = 0;
    std::size_t next_ = 0;  // FIFO slot
    Tensor xs_, ys_;        // allocated on first push
};

// Raw rewards (nats up to a shared constant; higher = worse likelihood),
// the baseline they were centered with, and the advantages.
struct RewardRecord {
    std::vector<double> raw;
    double baseline = 0.0;
    std::vector<double> advantage;
    double mean() const;
    double std_error() const;
};

// Exponential running mean of phase-level mean rewards.
struct RewardBaseline {
    double value = 0.0;
    bool initialized = false;
    double momentum = 0.9;

    RewardRecord make_record(const std::vector<double>& raw, bool use_baseline);
};

// r(observed, generated): NLL of the observed sample under the specular
// conditional model given the generated sample as condition.
std::vector<double> reward_batch(DiffusionModel& other_model, const Tensor& observed_rows,
                                 const Tensor& generated_rows, int k, Rng& rng,
                                 NllWeighting weighting = NllWeighting::Uniform,
                                 bool stratified = false);
double reward(DiffusionModel& other_model, const Tensor& observed_row, const Tensor& generated_row,
              int k, Rng& rng, NllWeighting weighting = NllWeighting::Uniform,
              bool stratified = false);

// Per-trajectory sum over stochastic steps of the diagonal-Gaussian log
// density of the recorded next state under the mean recomputed from `net`
// (CFG combined at the recorded guidance) and the recorded variance.
// Deterministic steps contribute zero.
std::vector<double> trajectory_log_prob(const TrajectoryBatch& traj, Denoiser& net,
                                        const NoiseSchedule& sched);

// Tape node for the batch-summed log probability over stochastic steps,
// differentiable w.r.t. the net's parameters. Gaussian normalization
// constants are omitted (parameter-independent).
Tape::Id trajectory_log_prob_sum_node(Tape& tape, const TrajectoryBatch& traj, Denoiser& net,
                                      const NoiseSchedule& sched);

double clip_ratio(double ratio, double half_width);

struct PolicyUpdateStats {
    double surrogate = 0.0;       // last update's surrogate value
    double kl_term = 0.0;         // last update's anchor penalty value
    double grad_norm = 0.0;       // last update's pre-clip global grad norm
    double max_ratio_dev = 0.0;   // max |clipped ratio - 1| seen (<= clip width)
};

// cfg.policy_updates descent steps on the clipped-importance surrogate plus
// the KL-anchor penalty; grads accumulate over cfg.grad_accum micro-batches,
// are globally clipped, and applied with `opt`. Throws NumericError on a
// non-finite surrogate.
PolicyUpdateStats policy_gradient_update(DiffusionModel& model, Denoiser& anchor,
                                         const TrajectoryBatch& traj, const RewardRecord& rewards,
                                         double lambda, const RLConfig& cfg, Adam& opt, Rng& rng);

// Value (and tape node) of the anchor penalty lambda * mean ||eps_model(x_t, y, t)
// - eps_anchor(x_t, t)||^2 over the given trajectory states.
double kl_anchor_value(DiffusionModel& model, Denoiser& anchor, const Tensor& x_t_rows,
                       const Tensor& cond_rows, const std::vector<int>& ts, double lambda);

// One denoising-loss Adam step on `other_model` treating the rows as paired
// training data (condition dropout active). Returns the loss value.
double joint_consistency_step(DiffusionModel& other_model, const Tensor& target_rows,
                              const Tensor& cond_rows, Adam& opt, Rng& rng);

// cfg.joint_updates steps; each batch takes half of the freshly generated
// pairs and half uniform replay from the buffer. `other_is_theta` selects
// which side of the stored (x, y) pairs is the model's target.
double joint_consistency_update(DiffusionModel& other_model, bool other_is_theta,
                                const ReplayBuffer& buffer, std::size_t fresh_count,
                                const RLConfig& cfg, Adam& opt, Rng& rng);

// Per-step diagnostics (one per phase).
struct StepDiag {
    int step = 0;
    int phase = 0;  // 0 = theta update phase, 1 = phi update phase
    double reward_mean = 0.0;
    double kl_term = 0.0;
    double line4_loss = 0.0;
    double grad_norm = 0.0;
};

// Algorithm-2 step: sample x ~ model(.|cond) with trajectory recording,
// reward with the specular model, policy-gradient + KL-anchor update, push
// pairs, then joint-consistency updates on the specular model.
StepDiag mec_training_step(const Tensor& cond_batch, DiffusionModel& model, Denoiser& anchor,
                           DiffusionModel& other_model, bool model_is_theta, ReplayBuffer& buffer,
                           double lambda, const RLConfig& cfg, Adam& opt_model, Adam& opt_other,
                           RewardBaseline& baseline, Rng& rng);

// Algorithm-1 loop: alternates the theta phase (y ~ p_Y) and the phi phase
// (x ~ p_X) for cfg.total_steps iterations. Returns one StepDiag per phase,
// strictly interleaved.
std::vector<StepDiag> mec_training_loop(CouplingPair& pair, const Tensor& data_x,
                                        const Tensor& data_y, const RLConfig& cfg, Rng& rng,
                                        const std::function<void(const StepDiag&)>& on_step = {});

// ---------------------------------------------------------------------------
// Discrete gradient-swap fixture.
//
// Finite-support check that swapping the roles of the conditional models
// leaves the exact policy gradient unchanged when the joint and marginal
// preconditions hold: p_theta(x|y) is a softmax table, p_phi(y|x) its exact
// induced reverse conditional, and the induced X-marginal is made uniform so
// the marginal-match precondition holds identically in theta. Returns the
// max absolute elementwise discrepancy between the two closed-form
// gradients, computed by exact summation.
// ---------------------------------------------------------------------------
enum class SwapFixture {
    Randomized,          // random table, induced X-marginal scaled to uniform
    IndependentUniform,  // p(x|y) = 1/m for all y, uniform marginals
    Violated             // random table left unadjusted: precondition broken
};

double verify_gradient_swap(int m, int n, Rng& rng,
                            SwapFixture kind = SwapFixture::Randomized);

}  // namespace ddmec
