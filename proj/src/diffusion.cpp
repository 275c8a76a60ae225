#include "ddmec/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ddmec {

// ---------------------------------------------------------------------------
// NoiseSchedule
// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int T, double beta_min, double beta_max) {
    if (T < 1) throw DataError("schedule: T must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
        throw DataError("schedule: need 0 < beta_min <= beta_max < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double abar = 1.0;
    for (int t = 1; t <= T; ++t) {
        double b = (T == 1) ? beta_min
                            : beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) /
                                             static_cast<double>(T - 1);
        s.betas[t - 1] = b;
        s.alphas[t - 1] = 1.0 - b;
        abar *= s.alphas[t - 1];
        s.alpha_bars[t - 1] = abar;
    }
    return s;
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > T) throw DataError("schedule: t out of range 1..T");
    return betas[t - 1];
}

double NoiseSchedule::alpha(int t) const {
    if (t < 1 || t > T) throw DataError("schedule: t out of range 1..T");
    return alphas[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > T) throw DataError("schedule: t out of range 0..T");
    return alpha_bars[t - 1];
}

void NoiseSchedule::validate() const {
    if (T < 1 || static_cast<int>(betas.size()) != T) throw DataError("schedule: bad length");
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        if (!(alpha_bars[t - 1] < prev)) throw DataError("schedule: alpha_bar not decreasing");
        prev = alpha_bars[t - 1];
    }
}

// ---------------------------------------------------------------------------
// Forward process / reverse kernels
// ---------------------------------------------------------------------------

Tensor forward_sample(const Tensor& x0_rows, const std::vector<int>& ts, const Tensor& eps_rows,
                      const NoiseSchedule& sched) {
    if (!x0_rows.same_shape(eps_rows)) throw DataError("forward_sample: shape mismatch");
    if (ts.size() != x0_rows.rows()) throw DataError("forward_sample: one timestep per row");
    Tensor out = Tensor::zeros(x0_rows.shape);
    std::size_t d = x0_rows.cols();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        double abar = sched.alpha_bar(ts[i]);
        double sa = std::sqrt(abar);
        double sb = std::sqrt(1.0 - abar);
        for (std::size_t j = 0; j < d; ++j) {
            out.data[i * d + j] = sa * x0_rows.data[i * d + j] + sb * eps_rows.data[i * d + j];
        }
    }
    return out;
}

Tensor forward_sample(const Tensor& x0_rows, int t, const Tensor& eps_rows,
                      const NoiseSchedule& sched) {
    return forward_sample(x0_rows, std::vector<int>(x0_rows.rows(), t), eps_rows, sched);
}

Tensor cfg_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    if (!eps_cond.same_shape(eps_uncond)) throw DataError("cfg_noise: shape mismatch");
    if (w == 0.0) return eps_uncond;
    if (w == 1.0) return eps_cond;
    Tensor out = Tensor::zeros(eps_cond.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] = eps_uncond.data[i] + w * (eps_cond.data[i] - eps_uncond.data[i]);
    }
    return out;
}

Tensor ddpm_reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& noise,
                         const NoiseSchedule& sched) {
    if (t < 1) throw DataError("ddpm_reverse_step: t must be >= 1");
    if (!x_t.same_shape(eps_hat) || !x_t.same_shape(noise)) {
        throw DataError("ddpm_reverse_step: shape mismatch");
    }
    double beta = sched.beta(t);
    double inv_sa = 1.0 / std::sqrt(sched.alpha(t));
    double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
    double sn = std::sqrt(beta);
    Tensor out = Tensor::zeros(x_t.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] = inv_sa * (x_t.data[i] - coef * eps_hat.data[i]) + sn * noise.data[i];
    }
    return out;
}

double ddim_sigma2(int t, int t_prev, double eta, const NoiseSchedule& sched) {
    if (eta == 0.0) return 0.0;
    double ab_t = sched.alpha_bar(t);
    double ab_p = sched.alpha_bar(t_prev);
    double s = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    return s * s;
}

Tensor ddim_mean(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat, double eta,
                 const NoiseSchedule& sched) {
    if (!(t_prev < t)) throw DataError("ddim_step: t_prev must be < t");
    if (eta < 0.0 || eta > 1.0) throw DataError("ddim_step: eta must lie in [0,1]");
    double ab_t = sched.alpha_bar(t);
    double ab_p = sched.alpha_bar(t_prev);
    if (!(ab_p >= ab_t)) throw DataError("ddim_step: alpha_bar ordering violated");
    if (!x_t.same_shape(eps_hat)) throw DataError("ddim_step: shape mismatch");
    double sig2 = ddim_sigma2(t, t_prev, eta, sched);
    double inv_sa = 1.0 / std::sqrt(ab_t);
    double sb = std::sqrt(1.0 - ab_t);
    double sap = std::sqrt(ab_p);
    double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sig2));
    // the op sequence mirrors the tape-side recomputation exactly so that
    // importance ratios at unchanged params are exactly 1
    Tensor out = Tensor::zeros(x_t.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double x0_hat = (x_t.data[i] - sb * eps_hat.data[i]) * inv_sa;
        out.data[i] = sap * x0_hat + dir * eps_hat.data[i];
    }
    return out;
}

Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat, double eta,
                 const Tensor& noise, const NoiseSchedule& sched) {
    Tensor out = ddim_mean(x_t, t, t_prev, eps_hat, eta, sched);
    double sig = std::sqrt(ddim_sigma2(t, t_prev, eta, sched));
    if (sig > 0.0) {
        if (!out.same_shape(noise)) throw DataError("ddim_step: noise shape mismatch");
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += sig * noise.data[i];
    }
    return out;
}

std::vector<int> ddim_timesteps(int T, int n_steps) {
    if (n_steps < 1 || n_steps > T) throw DataError("ddim_timesteps: need 1 <= n_steps <= T");
    std::vector<int> ts;
    ts.reserve(n_steps);
    for (int i = n_steps; i >= 1; --i) {
        int t = static_cast<int>(std::llround(static_cast<double>(i) * T /
                                              static_cast<double>(n_steps)));
        t = std::max(1, std::min(T, t));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }
    return ts;  // strictly decreasing, starts at T
}

// ---------------------------------------------------------------------------
// NLL estimation
// ---------------------------------------------------------------------------

double nll_step_weight(int t, const NoiseSchedule& sched, NllWeighting w) {
    if (w == NllWeighting::Uniform) return 0.5;
    double ab = sched.alpha_bar(t);
    return sched.beta(t) / (2.0 * sched.alpha(t) * (1.0 - ab));
}

std::vector<double> estimate_nll_batch(Denoiser& net, const NoiseSchedule& sched,
                                       const Tensor& x0_rows, const Tensor* cond_rows, int k_draws,
                                       Rng& rng, NllWeighting weighting, bool stratified) {
    if (k_draws < 1) throw DataError("estimate_nll: K must be >= 1");
    std::size_t n = x0_rows.rows();
    std::size_t d = x0_rows.cols();
    if (d != net.config().data_dim) throw DataError("estimate_nll: data dim mismatch");
    if (cond_rows && (!net.config().conditional() || cond_rows->rows() != n ||
                      cond_rows->cols() != *net.config().cond_dim)) {
        throw DataError("estimate_nll: conditioning mismatch");
    }
    std::vector<double> acc(n, 0.0);
    std::vector<int> ts(n);
    Tensor eps = Tensor::zeros({n, d});
    for (int k = 0; k < k_draws; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            if (stratified) {
                // draw k covers stratum [lo, hi] of 1..T
                std::int64_t lo = 1 + static_cast<std::int64_t>(k) * sched.T / k_draws;
                std::int64_t hi = static_cast<std::int64_t>(k + 1) * sched.T / k_draws;
                hi = std::max<std::int64_t>(lo, hi);
                ts[i] = static_cast<int>(rng.uniform_int(lo, std::min<std::int64_t>(hi, sched.T)));
            } else {
                ts[i] = static_cast<int>(rng.uniform_int(1, sched.T));
            }
        }
        rng.fill_normal(eps);
        Tensor x_t = forward_sample(x0_rows, ts, eps, sched);

        thread_local Tape tape;
        tape.clear();
        Tape::Id x = tape.input(x_t);
        Tape::Id e = tape.input(time_embedding_rows(ts, net.config().time_embed_dim, sched.T));
        Denoiser::CondSpec cs;
        cs.rows = cond_rows;
        Tape::Id pred = net.predict(tape, x, e,
                                    net.config().conditional() ? cs : Denoiser::CondSpec{});
        const double* p = tape.value_ptr(pred);
        for (std::size_t i = 0; i < n; ++i) {
            double err = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double diff = eps.data[i * d + j] - p[i * d + j];
                err += diff * diff;
            }
            acc[i] += nll_step_weight(ts[i], sched, weighting) * err;
        }
    }
    double scale = static_cast<double>(sched.T) / static_cast<double>(k_draws);
    for (double& a : acc) a *= scale;
    return acc;
}

double estimate_nll(Denoiser& net, const NoiseSchedule& sched, const Tensor& x0_row,
                    const Tensor* cond_row, int k_draws, Rng& rng, NllWeighting weighting,
                    bool stratified) {
    Tensor x0 = x0_row;
    if (x0.shape.size() == 1) x0.shape = {1, x0.shape[0]};
    return estimate_nll_batch(net, sched, x0, cond_row, k_draws, rng, weighting, stratified)[0];
}

// ---------------------------------------------------------------------------
// Denoising loss
// ---------------------------------------------------------------------------

namespace {

struct LossDraws {
    std::vector<int> ts;
    Tensor eps;
    std::vector<bool> drop;
};

LossDraws draw_loss_batch(const Denoiser& net, const NoiseSchedule& sched, std::size_t n,
                          std::size_t d, bool have_cond, double drop_prob, Rng& rng) {
    LossDraws out;
    out.ts.resize(n);
    out.eps = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        out.ts[i] = static_cast<int>(rng.uniform_int(1, sched.T));
        for (std::size_t j = 0; j < d; ++j) out.eps.data[i * d + j] = rng.normal();
    }
    if (have_cond && drop_prob > 0.0) {
        out.drop.resize(n);
        for (std::size_t i = 0; i < n; ++i) out.drop[i] = rng.uniform() < drop_prob;
    }
    (void)net;
    return out;
}

}  // namespace

Tape::Id denoising_loss_node(Tape& tape, Denoiser& net, const NoiseSchedule& sched,
                             const Tensor& x0_rows, const Tensor* cond_rows, double drop_prob,
                             Rng& rng) {
    std::size_t n = x0_rows.rows();
    std::size_t d = x0_rows.cols();
    if (n == 0) throw DataError("denoising_loss: empty batch");
    if (d != net.config().data_dim) throw DataError("denoising_loss: data dim mismatch");
    if (cond_rows && !net.config().conditional()) {
        throw DataError("denoising_loss: conditional batch on unconditional model");
    }
    if (net.config().conditional() && !cond_rows) {
        throw DataError("denoising_loss: conditional model requires a cond batch (may be dropped)");
    }
    LossDraws dr = draw_loss_batch(net, sched, n, d, cond_rows != nullptr, drop_prob, rng);
    Tensor x_t = forward_sample(x0_rows, dr.ts, dr.eps, sched);

    Tape::Id x = tape.input(x_t);
    Tape::Id e = tape.input(time_embedding_rows(dr.ts, net.config().time_embed_dim, sched.T));
    Denoiser::CondSpec cs;
    cs.rows = cond_rows;
    cs.drop = dr.drop.empty() ? nullptr : &dr.drop;
    Tape::Id pred = net.predict(tape, x, e,
                                net.config().conditional() ? cs : Denoiser::CondSpec{});
    Tape::Id diff = tape.sub(tape.input(dr.eps), pred);
    return tape.scale(tape.sq_norm(diff), 1.0 / static_cast<double>(n));
}

double denoising_loss(Denoiser& net, const NoiseSchedule& sched, const Tensor& x0_rows,
                      const Tensor* cond_rows, double drop_prob, Rng& rng) {
    thread_local Tape tape;
    tape.clear();
    return tape.scalar(denoising_loss_node(tape, net, sched, x0_rows, cond_rows, drop_prob, rng));
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

const Tensor& TrajectoryBatch::next_state(std::size_t step) const {
    if (step + 1 < steps.size()) return steps[step + 1].x_t;
    if (step + 1 == steps.size()) return x0;
    throw DataError("trajectory: step index out of range");
}

SampleResult sample(Denoiser& net, const NoiseSchedule& sched, const Tensor* cond_rows,
                    const SampleConfig& cfg, Rng& rng) {
    bool conditional = net.config().conditional();
    if (cond_rows && !conditional) throw DataError("sample: cond rows on unconditional model");
    if (!cond_rows && conditional && cfg.guidance != 0.0) {
        // guidance pulls on a conditioning signal; sampling through the null
        // token alone is still well-defined, so only require cond when w != 0
        throw DataError("sample: conditional model with w != 0 requires cond rows");
    }
    std::size_t n = cond_rows ? cond_rows->rows() : cfg.n_samples;
    if (n == 0) throw DataError("sample: empty batch");
    std::size_t d = net.config().data_dim;
    if (cond_rows && conditional && cond_rows->cols() != *net.config().cond_dim) {
        throw DataError("sample: cond dim mismatch");
    }

    std::vector<int> taus = ddim_timesteps(sched.T, cfg.n_steps);
    Tensor x = rng.normal_tensor({n, d});

    TrajectoryBatch traj;
    if (cfg.record_trajectory) {
        if (cond_rows) traj.cond = *cond_rows;
        traj.guidance = cfg.guidance;
        traj.eta = cfg.eta;
        traj.schedule_T = sched.T;
        traj.steps.reserve(taus.size());
    }

    Tensor noise = Tensor::zeros({n, d});
    for (std::size_t s = 0; s < taus.size(); ++s) {
        int t = taus[s];
        int t_prev = (s + 1 < taus.size()) ? taus[s + 1] : 0;

        Tensor eps_hat;
        if (conditional) {
            Tensor eps_c = net.predict_value(x, t, sched.T, cond_rows);
            Tensor eps_u = net.predict_value(x, t, sched.T, nullptr);
            eps_hat = cfg_noise(eps_c, eps_u, cfg.guidance);
        } else {
            eps_hat = net.predict_value(x, t, sched.T, nullptr);
        }

        Tensor mean = ddim_mean(x, t, t_prev, eps_hat, cfg.eta, sched);
        double var = ddim_sigma2(t, t_prev, cfg.eta, sched);
        if (cfg.record_trajectory) {
            TrajectoryStep st;
            st.t = t;
            st.t_prev = t_prev;
            st.x_t = x;
            st.mean = mean;
            st.var = var;
            traj.steps.push_back(std::move(st));
        }
        if (var > 0.0) {
            rng.fill_normal(noise);
            double sig = std::sqrt(var);
            for (std::size_t i = 0; i < mean.numel(); ++i) {
                mean.data[i] += sig * noise.data[i];
            }
        }
        x = std::move(mean);
    }

    SampleResult res;
    res.x0 = std::move(x);
    if (cfg.record_trajectory) {
        traj.x0 = res.x0;
        res.trajectory = std::move(traj);
    }
    return res;
}

// ---------------------------------------------------------------------------
// DiffusionModel / pretraining
// ---------------------------------------------------------------------------

void DiffusionModel::ema_init() {
    ema = net.snapshot();
}

void DiffusionModel::ema_update() {
    if (!ema) return;
    auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* e = (*ema)[i].data.data();
        const double* w = params[i]->value.data.data();
        for (std::size_t k = 0; k < (*ema)[i].numel(); ++k) {
            e[k] = ema_decay * e[k] + (1.0 - ema_decay) * w[k];
        }
    }
}

Denoiser DiffusionModel::net_with_ema() const {
    Denoiser copy = net;
    if (ema) copy.restore(*ema);
    return copy;
}

void train_unconditional(DiffusionModel& model, const Tensor& data, const PretrainConfig& cfg,
                         Rng& rng, std::vector<LossPoint>* log) {
    if (model.conditional()) throw DataError("train_unconditional: model is conditional");
    if (data.rows() == 0) throw DataError("train_unconditional: empty dataset");
    if (data.cols() != model.net.config().data_dim) {
        throw DataError("train_unconditional: data dim mismatch");
    }
    model.ema_decay = cfg.ema_decay;
    if (cfg.use_ema && !model.ema) model.ema_init();

    auto params = model.net.parameters();
    Adam adam(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    std::size_t n = data.rows(), d = data.cols();
    Tensor batch = Tensor::zeros({cfg.batch_size, d});
    Tape tape;
    for (int step = 0; step < cfg.steps; ++step) {
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            auto row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
            std::memcpy(batch.data.data() + i * d, data.data.data() + row * d, d * sizeof(double));
        }
        tape.clear();
        Tape::Id loss = denoising_loss_node(tape, model.net, model.schedule, batch, nullptr, 0.0, rng);
        double lv = tape.scalar(loss);
        if (!std::isfinite(lv)) {
            throw NumericError("pretraining: non-finite loss at step " + std::to_string(step));
        }
        zero_grads(params);
        tape.backward(loss);
        if (cfg.grad_clip > 0.0) clip_global_norm(params, cfg.grad_clip);
        adam.step();
        model.ema_update();
        ++model.steps_trained;
        if (log) log->push_back({step, lv});
    }
}

}  // namespace ddmec
