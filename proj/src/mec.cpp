#include "ddmec/mec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ddmec {

void RLConfig::validate() const {
    if (lambda_x < 0.0 || lambda_y < 0.0) throw DataError("rl: lambda weights must be >= 0");
    if (k_reward < 1) throw DataError("rl: k_reward must be >= 1");
    if (policy_updates < 1) throw DataError("rl: policy_updates must be >= 1");
    if (!(ratio_clip > 0.0)) throw DataError("rl: ratio_clip must be > 0");
    if (grad_accum < 1) throw DataError("rl: grad_accum must be >= 1");
    if (!(grad_clip > 0.0)) throw DataError("rl: grad_clip must be > 0");
    if (guidance_train < 0.0) throw DataError("rl: guidance must be >= 0");
    if (total_steps < 0) throw DataError("rl: total_steps must be >= 0");
    if (batch_size == 0) throw DataError("rl: batch_size must be positive");
    if (!(lr > 0.0)) throw DataError("rl: lr must be > 0");
    if (joint_updates < 0) throw DataError("rl: joint_updates must be >= 0");
    if (sample_steps < 1) throw DataError("rl: sample_steps must be >= 1");
    if (eta_train < 0.0 || eta_train > 1.0) throw DataError("rl: eta must lie in [0,1]");
    if (baseline_momentum < 0.0 || baseline_momentum >= 1.0) {
        throw DataError("rl: baseline_momentum must lie in [0,1)");
    }
}

CouplingPair make_coupling_pair(const DiffusionModel& uncond_x, const DiffusionModel& uncond_y,
                                double cond_drop_prob) {
    CouplingPair pair;
    pair.theta.net = Denoiser::init_conditional_from_unconditional(
        uncond_x.net, uncond_y.net.config().data_dim, cond_drop_prob);
    pair.phi.net = Denoiser::init_conditional_from_unconditional(
        uncond_y.net, uncond_x.net.config().data_dim, cond_drop_prob);
    pair.theta.schedule = uncond_x.schedule;
    pair.phi.schedule = uncond_y.schedule;
    pair.theta.ema_decay = uncond_x.ema_decay;
    pair.phi.ema_decay = uncond_y.ema_decay;
    pair.theta.ema_init();
    pair.phi.ema_init();
    pair.theta_anchor = uncond_x.net_with_ema();
    pair.phi_anchor = uncond_y.net_with_ema();
    return pair;
}

// ---------------------------------------------------------------------------
// ReplayBuffer
// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw DataError("replay buffer: capacity must be positive");
}

void ReplayBuffer::push(const Tensor& x_row, const Tensor& y_row) {
    if (size_ == 0 && xs_.numel() == 0) {
        xs_ = Tensor::zeros({capacity_, x_row.cols()});
        ys_ = Tensor::zeros({capacity_, y_row.cols()});
    }
    if (x_row.cols() != xs_.cols() || y_row.cols() != ys_.cols()) {
        throw DataError("replay buffer: pair dims changed");
    }
    std::memcpy(xs_.data.data() + next_ * xs_.cols(), x_row.data.data(),
                xs_.cols() * sizeof(double));
    std::memcpy(ys_.data.data() + next_ * ys_.cols(), y_row.data.data(),
                ys_.cols() * sizeof(double));
    next_ = (next_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
}

std::pair<Tensor, Tensor> ReplayBuffer::row(std::size_t i) const {
    if (i >= size_) throw DataError("replay buffer: index out of range");
    return {xs_.row_slice(i), ys_.row_slice(i)};
}

std::pair<Tensor, Tensor> ReplayBuffer::recent_row(std::size_t k) const {
    if (k >= size_) throw DataError("replay buffer: recency index out of range");
    std::size_t slot = (next_ + capacity_ - 1 - k) % capacity_;
    return {xs_.row_slice(slot), ys_.row_slice(slot)};
}

std::pair<Tensor, Tensor> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
    if (size_ == 0) throw DataError("replay buffer: empty");
    Tensor x = Tensor::zeros({n, xs_.cols()});
    Tensor y = Tensor::zeros({n, ys_.cols()});
    for (std::size_t i = 0; i < n; ++i) {
        auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size_) - 1));
        std::memcpy(x.data.data() + i * x.cols(), xs_.data.data() + j * xs_.cols(),
                    x.cols() * sizeof(double));
        std::memcpy(y.data.data() + i * y.cols(), ys_.data.data() + j * ys_.cols(),
                    y.cols() * sizeof(double));
    }
    return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Rewards / baseline
// ---------------------------------------------------------------------------

double RewardRecord::mean() const {
    double s = 0.0;
    for (double r : raw) s += r;
    return raw.empty() ? 0.0 : s / static_cast<double>(raw.size());
}

double RewardRecord::std_error() const {
    if (raw.size() < 2) return 0.0;
    double m = mean(), sq = 0.0;
    for (double r : raw) sq += (r - m) * (r - m);
    return std::sqrt(sq / static_cast<double>(raw.size() - 1) /
                     static_cast<double>(raw.size()));
}

RewardRecord RewardBaseline::make_record(const std::vector<double>& raw, bool use_baseline) {
    RewardRecord rec;
    rec.raw = raw;
    double m = 0.0;
    for (double r : raw) m += r;
    m /= raw.empty() ? 1.0 : static_cast<double>(raw.size());
    if (!initialized) {
        value = m;
        initialized = true;
    }
    rec.baseline = use_baseline ? value : 0.0;
    rec.advantage.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) rec.advantage[i] = raw[i] - rec.baseline;
    value = momentum * value + (1.0 - momentum) * m;
    return rec;
}

std::vector<double> reward_batch(DiffusionModel& other_model, const Tensor& observed_rows,
                                 const Tensor& generated_rows, int k, Rng& rng,
                                 NllWeighting weighting, bool stratified) {
    if (observed_rows.rows() != generated_rows.rows()) {
        throw DataError("reward: observed/generated row counts differ");
    }
    if (!other_model.conditional()) throw DataError("reward: specular model must be conditional");
    return estimate_nll_batch(other_model.net, other_model.schedule, observed_rows,
                              &generated_rows, k, rng, weighting, stratified);
}

double reward(DiffusionModel& other_model, const Tensor& observed_row, const Tensor& generated_row,
              int k, Rng& rng, NllWeighting weighting, bool stratified) {
    Tensor obs = observed_row;
    if (obs.shape.size() == 1) obs.shape = {1, obs.shape[0]};
    Tensor gen = generated_row;
    if (gen.shape.size() == 1) gen.shape = {1, gen.shape[0]};
    return reward_batch(other_model, obs, gen, k, rng, weighting, stratified)[0];
}

// ---------------------------------------------------------------------------
// Trajectory log-probabilities and the policy surrogate
// ---------------------------------------------------------------------------

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Rebuilds the CFG-combined noise prediction for one recorded step on the
// tape; rows may be a subset of the trajectory batch.
Tape::Id predict_cfg_node(Tape& tape, Denoiser& net, const Tensor& x_rows, const Tensor& temb,
                          const Tensor& cond_rows, double guidance) {
    Tape::Id x = tape.input(x_rows);
    Tape::Id e = tape.input(temb);
    Denoiser::CondSpec cs;
    cs.rows = &cond_rows;
    Tape::Id eps_c = net.predict(tape, x, e, cs);
    Tape::Id eps_u = net.predict(tape, x, e, Denoiser::CondSpec{});
    if (guidance == 0.0) return eps_u;
    if (guidance == 1.0) return eps_c;
    return tape.add(eps_u, tape.scale(tape.sub(eps_c, eps_u), guidance));
}

// DDIM posterior mean of the recorded step, differentiable through eps_hat.
// The op order replicates ddim_mean() exactly so the same inputs produce
// bitwise-identical means (importance ratio exactly 1 at unchanged params).
Tape::Id ddim_mean_node(Tape& tape, Tape::Id x_rows, Tape::Id eps_hat, int t, int t_prev,
                        double eta, const NoiseSchedule& sched) {
    double ab_t = sched.alpha_bar(t);
    double ab_p = sched.alpha_bar(t_prev);
    double sig2 = ddim_sigma2(t, t_prev, eta, sched);
    double inv_sa = 1.0 / std::sqrt(ab_t);
    double sb = std::sqrt(1.0 - ab_t);
    double sap = std::sqrt(ab_p);
    double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sig2));
    Tape::Id x0_hat = tape.scale(tape.sub(x_rows, tape.scale(eps_hat, sb)), inv_sa);
    return tape.add(tape.scale(x0_hat, sap), tape.scale(eps_hat, dir));
}

Tensor subset_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
    Tensor out = Tensor::zeros({idx.size(), t.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(out.data.data() + i * t.cols(), t.data.data() + idx[i] * t.cols(),
                    t.cols() * sizeof(double));
    }
    return out;
}

}  // namespace

double clip_ratio(double ratio, double half_width) {
    return std::clamp(ratio, 1.0 - half_width, 1.0 + half_width);
}

Tape::Id trajectory_log_prob_sum_node(Tape& tape, const TrajectoryBatch& traj, Denoiser& net,
                                      const NoiseSchedule& sched) {
    std::size_t n = traj.batch();
    Tape::Id total = -1;
    for (std::size_t s = 0; s < traj.steps.size(); ++s) {
        const TrajectoryStep& st = traj.steps[s];
        if (!(st.var > 0.0)) continue;
        Tensor temb = time_embedding_rows(std::vector<int>(n, st.t), net.config().time_embed_dim,
                                          sched.T);
        Tape::Id eps_hat;
        if (net.config().conditional()) {
            if (!traj.cond) throw DataError("trajectory_log_prob: trajectory lacks cond rows");
            eps_hat = predict_cfg_node(tape, net, st.x_t, temb, *traj.cond, traj.guidance);
        } else {
            eps_hat = net.predict(tape, tape.input(st.x_t), tape.input(temb));
        }
        Tape::Id mu = ddim_mean_node(tape, tape.input(st.x_t), eps_hat, st.t, st.t_prev, traj.eta,
                                     sched);
        Tape::Id diff = tape.sub(tape.input(traj.next_state(s)), mu);
        Tape::Id term = tape.scale(tape.sq_norm(diff), -0.5 / st.var);
        total = (total < 0) ? term : tape.add(total, term);
    }
    if (total < 0) throw DataError("trajectory_log_prob: no stochastic steps recorded");
    return total;
}

std::vector<double> trajectory_log_prob(const TrajectoryBatch& traj, Denoiser& net,
                                        const NoiseSchedule& sched) {
    std::size_t n = traj.batch();
    std::size_t d = traj.x0.cols();
    std::vector<double> lp(n, 0.0);
    Tape tape;
    for (std::size_t s = 0; s < traj.steps.size(); ++s) {
        const TrajectoryStep& st = traj.steps[s];
        if (!(st.var > 0.0)) continue;
        tape.clear();
        Tensor temb = time_embedding_rows(std::vector<int>(n, st.t), net.config().time_embed_dim,
                                          sched.T);
        Tape::Id eps_hat;
        if (net.config().conditional()) {
            if (!traj.cond) throw DataError("trajectory_log_prob: trajectory lacks cond rows");
            eps_hat = predict_cfg_node(tape, net, st.x_t, temb, *traj.cond, traj.guidance);
        } else {
            Tape::Id x = tape.input(st.x_t);
            Tape::Id e = tape.input(temb);
            eps_hat = net.predict(tape, x, e, Denoiser::CondSpec{});
        }
        Tape::Id mu = ddim_mean_node(tape, tape.input(st.x_t), eps_hat, st.t, st.t_prev, traj.eta,
                                     sched);
        const double* m = tape.value_ptr(mu);
        const Tensor& next = traj.next_state(s);
        for (std::size_t i = 0; i < n; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double diff = next.data[i * d + j] - m[i * d + j];
                sq += diff * diff;
            }
            lp[i] += -0.5 * (sq / st.var +
                             static_cast<double>(d) * (kLog2Pi + std::log(st.var)));
        }
    }
    return lp;
}

double kl_anchor_value(DiffusionModel& model, Denoiser& anchor, const Tensor& x_t_rows,
                       const Tensor& cond_rows, const std::vector<int>& ts, double lambda) {
    if (lambda == 0.0) return 0.0;
    std::size_t n = x_t_rows.rows();
    Tensor temb = time_embedding_rows(ts, model.net.config().time_embed_dim, model.schedule.T);
    Tensor anchor_pred = Tensor::zeros(x_t_rows.shape);
    {
        thread_local Tape atape;
        atape.clear();
        Tape::Id x = atape.input(x_t_rows);
        Tape::Id e = atape.input(temb);
        anchor_pred = atape.value(anchor.predict(atape, x, e, Denoiser::CondSpec{}));
    }
    thread_local Tape tape;
    tape.clear();
    Tape::Id x = tape.input(x_t_rows);
    Tape::Id e = tape.input(temb);
    Denoiser::CondSpec cs;
    cs.rows = &cond_rows;
    Tape::Id pred = model.net.predict(tape, x, e, cs);
    Tape::Id diff = tape.sub(pred, tape.input(anchor_pred));
    return lambda * tape.scalar(tape.sq_norm(diff)) / static_cast<double>(n);
}

PolicyUpdateStats policy_gradient_update(DiffusionModel& model, Denoiser& anchor,
                                         const TrajectoryBatch& traj, const RewardRecord& rewards,
                                         double lambda, const RLConfig& cfg, Adam& opt, Rng& rng) {
    std::size_t n = traj.batch();
    std::size_t d = traj.x0.cols();
    if (rewards.advantage.size() != n) throw DataError("policy update: advantage count mismatch");
    if (!model.conditional() || !traj.cond) {
        throw DataError("policy update: conditional model and recorded cond required");
    }

    std::vector<std::size_t> stochastic_steps;
    for (std::size_t s = 0; s < traj.steps.size(); ++s) {
        if (traj.steps[s].var > 0.0) stochastic_steps.push_back(s);
    }
    if (stochastic_steps.empty()) {
        throw DataError("policy update: trajectory has no stochastic steps (eta = 0?)");
    }

    // Old log-densities from the recorded sampling-time means (constants
    // dropped; they cancel in the ratios).
    std::vector<std::vector<double>> lp_old(stochastic_steps.size(), std::vector<double>(n));
    for (std::size_t k = 0; k < stochastic_steps.size(); ++k) {
        const TrajectoryStep& st = traj.steps[stochastic_steps[k]];
        const Tensor& next = traj.next_state(stochastic_steps[k]);
        double coef = -0.5 / st.var;  // same op order as the tape path: ratio
                                      // is exactly 1 at unchanged params
        for (std::size_t i = 0; i < n; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double diff = next.data[i * d + j] - st.mean.data[i * d + j];
                sq += diff * diff;
            }
            lp_old[k][i] = sq * coef;
        }
    }

    // micro-batch split of the trajectory indices
    std::size_t n_micro = std::min<std::size_t>(static_cast<std::size_t>(cfg.grad_accum), n);
    std::vector<std::vector<std::size_t>> micro(n_micro);
    for (std::size_t i = 0; i < n; ++i) micro[i % n_micro].push_back(i);

    auto params = model.net.parameters();
    PolicyUpdateStats stats;
    double norm_scale = 1.0 / (static_cast<double>(n) * static_cast<double>(stochastic_steps.size()));

    Tape tape;
    for (int u = 0; u < cfg.policy_updates; ++u) {
        zero_grads(params);
        double surrogate = 0.0;
        for (const auto& rows : micro) {
            if (rows.empty()) continue;
            tape.clear();
            Tensor cond_mb = subset_rows(*traj.cond, rows);
            Tape::Id total = -1;
            for (std::size_t k = 0; k < stochastic_steps.size(); ++k) {
                std::size_t s = stochastic_steps[k];
                const TrajectoryStep& st = traj.steps[s];
                Tensor x_mb = subset_rows(st.x_t, rows);
                Tensor next_mb = subset_rows(traj.next_state(s), rows);
                Tensor temb = time_embedding_rows(std::vector<int>(rows.size(), st.t),
                                                  model.net.config().time_embed_dim,
                                                  model.schedule.T);
                Tape::Id eps_hat = predict_cfg_node(tape, model.net, x_mb, temb, cond_mb,
                                                    traj.guidance);
                Tape::Id mu = ddim_mean_node(tape, tape.input(x_mb), eps_hat, st.t, st.t_prev,
                                             traj.eta, model.schedule);
                Tape::Id diff = tape.sub(tape.input(next_mb), mu);
                // per-row -||x_prev - mu||^2 / (2 var): the theta-dependent
                // part of log p; Gaussian constants cancel in the ratio
                Tape::Id lp_rows = tape.scale(tape.row_sum(tape.mul(diff, diff)),
                                              -0.5 / st.var);
                const double* lp_new = tape.value_ptr(lp_rows);
                std::vector<double> coeff(rows.size());
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    double ratio = std::exp(lp_new[r] - lp_old[k][rows[r]]);
                    double clipped = clip_ratio(ratio, cfg.ratio_clip);
                    stats.max_ratio_dev = std::max(stats.max_ratio_dev, std::abs(clipped - 1.0));
                    coeff[r] = clipped * rewards.advantage[rows[r]] * norm_scale;
                }
                Tape::Id term = tape.sum(tape.scale_rows(lp_rows, coeff));
                total = (total < 0) ? term : tape.add(total, term);
            }
            double val = tape.scalar(total);
            if (!std::isfinite(val)) {
                throw NumericError("policy update: non-finite surrogate (update " +
                                   std::to_string(u) + ")");
            }
            surrogate += val;
            tape.backward(total);
        }

        // KL anchor toward the frozen unconditional model on recent states
        double kl_value = 0.0;
        if (lambda > 0.0 && cfg.kl_batch > 0) {
            std::size_t kb = cfg.kl_batch;
            Tensor x_kl = Tensor::zeros({kb, d});
            Tensor cond_kl = Tensor::zeros({kb, traj.cond->cols()});
            std::vector<int> ts(kb);
            for (std::size_t i = 0; i < kb; ++i) {
                auto ti = static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(n) - 1));
                auto si = stochastic_steps[static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(stochastic_steps.size()) - 1))];
                const TrajectoryStep& st = traj.steps[si];
                std::memcpy(x_kl.data.data() + i * d, st.x_t.data.data() + ti * d,
                            d * sizeof(double));
                std::memcpy(cond_kl.data.data() + i * cond_kl.cols(),
                            traj.cond->data.data() + ti * traj.cond->cols(),
                            cond_kl.cols() * sizeof(double));
                ts[i] = st.t;
            }
            Tensor temb = time_embedding_rows(ts, model.net.config().time_embed_dim,
                                              model.schedule.T);
            Tensor anchor_pred;
            {
                tape.clear();
                Tape::Id x = tape.input(x_kl);
                Tape::Id e = tape.input(temb);
                anchor_pred = tape.value(anchor.predict(tape, x, e, Denoiser::CondSpec{}));
            }
            tape.clear();
            Tape::Id x = tape.input(x_kl);
            Tape::Id e = tape.input(temb);
            Denoiser::CondSpec cs;
            cs.rows = &cond_kl;
            Tape::Id pred = model.net.predict(tape, x, e, cs);
            Tape::Id diff = tape.sub(pred, tape.input(anchor_pred));
            Tape::Id kl = tape.scale(tape.sq_norm(diff), lambda / static_cast<double>(kb));
            kl_value = tape.scalar(kl);
            if (!std::isfinite(kl_value)) {
                throw NumericError("policy update: non-finite KL-anchor term");
            }
            tape.backward(kl);
        }

        stats.surrogate = surrogate;
        stats.kl_term = kl_value;
        stats.grad_norm = clip_global_norm(params, cfg.grad_clip);
        opt.step();
        model.ema_update();
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Joint-consistency (line 4) updates
// ---------------------------------------------------------------------------

double joint_consistency_step(DiffusionModel& other_model, const Tensor& target_rows,
                              const Tensor& cond_rows, Adam& opt, Rng& rng) {
    auto params = other_model.net.parameters();
    thread_local Tape tape;
    tape.clear();
    Tape::Id loss = denoising_loss_node(tape, other_model.net, other_model.schedule, target_rows,
                                        &cond_rows, other_model.net.config().cond_drop_prob, rng);
    double lv = tape.scalar(loss);
    if (!std::isfinite(lv)) throw NumericError("joint-consistency update: non-finite loss");
    zero_grads(params);
    tape.backward(loss);
    opt.step();
    other_model.ema_update();
    return lv;
}

double joint_consistency_update(DiffusionModel& other_model, bool other_is_theta,
                                const ReplayBuffer& buffer, std::size_t fresh_count,
                                const RLConfig& cfg, Adam& opt, Rng& rng) {
    if (buffer.size() == 0) throw DataError("joint-consistency update: empty buffer");
    if (fresh_count > buffer.size()) fresh_count = buffer.size();
    double loss = 0.0;
    std::size_t B = cfg.batch_size;
    for (int u = 0; u < cfg.joint_updates; ++u) {
        // half of the batch comes from the freshly generated pairs, the rest
        // is uniform replay over the whole buffer
        std::size_t n_fresh = std::min(B - B / 2, fresh_count);
        std::size_t xdim = buffer.row(0).first.cols();
        std::size_t ydim = buffer.row(0).second.cols();
        Tensor xs = Tensor::zeros({B, xdim});
        Tensor ys = Tensor::zeros({B, ydim});
        for (std::size_t i = 0; i < n_fresh; ++i) {
            auto off = static_cast<std::size_t>(rng.uniform_int(
                0, static_cast<std::int64_t>(fresh_count) - 1));
            auto [xr, yr] = buffer.recent_row(off);
            xs.set_row(i, xr);
            ys.set_row(i, yr);
        }
        for (std::size_t i = n_fresh; i < B; ++i) {
            auto j = static_cast<std::size_t>(rng.uniform_int(
                0, static_cast<std::int64_t>(buffer.size()) - 1));
            auto [xr, yr] = buffer.row(j);
            xs.set_row(i, xr);
            ys.set_row(i, yr);
        }
        if (other_is_theta) {
            loss = joint_consistency_step(other_model, xs, ys, opt, rng);  // theta: x given y
        } else {
            loss = joint_consistency_step(other_model, ys, xs, opt, rng);  // phi: y given x
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Algorithm 2 / Algorithm 1
// ---------------------------------------------------------------------------

StepDiag mec_training_step(const Tensor& cond_batch, DiffusionModel& model, Denoiser& anchor,
                           DiffusionModel& other_model, bool model_is_theta, ReplayBuffer& buffer,
                           double lambda, const RLConfig& cfg, Adam& opt_model, Adam& opt_other,
                           RewardBaseline& baseline, Rng& rng) {
    SampleConfig scfg;
    scfg.n_steps = cfg.sample_steps;
    scfg.guidance = cfg.guidance_train;
    scfg.eta = cfg.eta_train;
    scfg.record_trajectory = true;
    SampleResult res = sample(model.net, model.schedule, &cond_batch, scfg, rng);

    std::vector<double> raw = reward_batch(other_model, cond_batch, res.x0, cfg.k_reward, rng,
                                           cfg.reward_weighting, cfg.reward_stratified);
    RewardRecord rec = baseline.make_record(raw, cfg.use_baseline);

    PolicyUpdateStats pstats = policy_gradient_update(model, anchor, *res.trajectory, rec, lambda,
                                                      cfg, opt_model, rng);

    for (std::size_t i = 0; i < res.x0.rows(); ++i) {
        Tensor gen = res.x0.row_slice(i);
        Tensor cond = cond_batch.row_slice(i);
        if (model_is_theta) {
            buffer.push(gen, cond);  // theta generates x, conditions on y
        } else {
            buffer.push(cond, gen);  // phi generates y, conditions on x
        }
    }

    double line4 = 0.0;
    if (cfg.joint_updates > 0) {
        line4 = joint_consistency_update(other_model, !model_is_theta, buffer, res.x0.rows(), cfg,
                                         opt_other, rng);
    }

    StepDiag diag;
    diag.phase = model_is_theta ? 0 : 1;
    diag.reward_mean = rec.mean();
    diag.kl_term = pstats.kl_term;
    diag.line4_loss = line4;
    diag.grad_norm = pstats.grad_norm;
    return diag;
}

std::vector<StepDiag> mec_training_loop(CouplingPair& pair, const Tensor& data_x,
                                        const Tensor& data_y, const RLConfig& cfg, Rng& rng,
                                        const std::function<void(const StepDiag&)>& on_step) {
    cfg.validate();
    if (data_x.rows() == 0 || data_y.rows() == 0) throw DataError("mec loop: empty dataset");
    ReplayBuffer buffer(cfg.effective_buffer_capacity());
    Adam opt_theta(pair.theta.net.parameters(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    Adam opt_phi(pair.phi.net.parameters(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    RewardBaseline base_theta{0.0, false, cfg.baseline_momentum};
    RewardBaseline base_phi{0.0, false, cfg.baseline_momentum};

    std::vector<StepDiag> log;
    log.reserve(static_cast<std::size_t>(cfg.total_steps) * 2);
    auto draw_batch = [&](const Tensor& data) {
        Tensor b = Tensor::zeros({cfg.batch_size, data.cols()});
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            auto r = static_cast<std::size_t>(rng.uniform_int(
                0, static_cast<std::int64_t>(data.rows()) - 1));
            std::memcpy(b.data.data() + i * data.cols(), data.data.data() + r * data.cols(),
                        data.cols() * sizeof(double));
        }
        return b;
    };

    for (int step = 0; step < cfg.total_steps; ++step) {
        {
            Tensor yb = draw_batch(data_y);
            StepDiag d = mec_training_step(yb, pair.theta, pair.theta_anchor, pair.phi, true,
                                           buffer, cfg.lambda_x, cfg, opt_theta, opt_phi,
                                           base_theta, rng);
            d.step = step;
            log.push_back(d);
            if (on_step) on_step(d);
        }
        {
            Tensor xb = draw_batch(data_x);
            StepDiag d = mec_training_step(xb, pair.phi, pair.phi_anchor, pair.theta, false,
                                           buffer, cfg.lambda_y, cfg, opt_phi, opt_theta,
                                           base_phi, rng);
            d.step = step;
            log.push_back(d);
            if (on_step) on_step(d);
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// Gradient-swap fixture (Appendix-style exact check on finite supports)
// ---------------------------------------------------------------------------

namespace {

// Sinkhorn-scales a positive matrix to row sums rx and column sums cy.
void sinkhorn(Tensor& mat, const std::vector<double>& rx, const std::vector<double>& cy,
              int iters) {
    std::size_t m = mat.rows(), n = mat.cols();
    for (int it = 0; it < iters; ++it) {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += mat.at(i, j);
            double f = rx[i] / s;
            for (std::size_t j = 0; j < n; ++j) mat.at(i, j) *= f;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += mat.at(i, j);
            double f = cy[j] / s;
            for (std::size_t i = 0; i < m; ++i) mat.at(i, j) *= f;
        }
    }
}

}  // namespace

double verify_gradient_swap(int m, int n, Rng& rng, SwapFixture kind) {
    if (m < 1 || n < 1 || m * n > 25) throw DataError("gradient swap fixture: need m*n <= 25");
    std::vector<double> p_y(n);
    if (kind == SwapFixture::IndependentUniform) {
        std::fill(p_y.begin(), p_y.end(), 1.0 / n);
    } else {
        double s = 0.0;
        for (double& v : p_y) {
            v = 0.2 + rng.uniform();
            s += v;
        }
        for (double& v : p_y) v /= s;
    }

    // conditional table C(i|j), columns sum to 1
    Tensor C = Tensor::zeros({static_cast<std::size_t>(m), static_cast<std::size_t>(n)});
    if (kind == SwapFixture::IndependentUniform) {
        std::fill(C.data.begin(), C.data.end(), 1.0 / m);
    } else {
        for (double& v : C.data) v = 0.2 + rng.uniform();
    }
    if (kind == SwapFixture::Randomized) {
        // joint M(i,j) = C(i|j) p_y(j) scaled to a uniform X-marginal, which
        // makes the marginal precondition hold identically in theta
        std::vector<double> rx(m, 1.0 / m);
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < m; ++i) C.at(i, j) *= p_y[j];
        }
        sinkhorn(C, rx, p_y, 2000);
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < m; ++i) C.at(i, j) /= p_y[j];
        }
    } else if (kind == SwapFixture::Violated) {
        for (int j = 0; j < n; ++j) {
            double cs = 0.0;
            for (int i = 0; i < m; ++i) cs += C.at(i, j);
            for (int i = 0; i < m; ++i) C.at(i, j) /= cs;
        }
    }

    // induced X marginal and exact reverse conditional phi(j|i)
    std::vector<double> px_ind(m, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) px_ind[i] += C.at(i, j) * p_y[j];
    }
    Tensor phi = Tensor::zeros({static_cast<std::size_t>(m), static_cast<std::size_t>(n)});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) phi.at(i, j) = C.at(i, j) * p_y[j] / px_ind[i];
    }

    // closed-form gradients w.r.t. the softmax logits L(k,l):
    // dC(i|l)/dL(k,l) = C(i|l) (delta_ik - C(k|l))
    double max_disc = 0.0;
    for (int l = 0; l < n; ++l) {
        double s_theta = 0.0, s_phi = 0.0;  // sum_i C(i|l) * (-log target_i)
        for (int i = 0; i < m; ++i) {
            s_theta += C.at(i, l) * (-std::log(C.at(i, l)));
            s_phi += C.at(i, l) * (-std::log(phi.at(i, l)));
        }
        for (int k = 0; k < m; ++k) {
            double g_lhs = p_y[l] * C.at(k, l) * ((-std::log(C.at(k, l))) - s_theta);
            double g_rhs = p_y[l] * C.at(k, l) * ((-std::log(phi.at(k, l))) - s_phi);
            max_disc = std::max(max_disc, std::abs(g_lhs - g_rhs));
        }
    }
    return max_disc;
}

}  // namespace ddmec
