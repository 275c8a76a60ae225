#pragma once

#include <string>
#include <vector>

#include "ddmec/denoiser.hpp"
#include "ddmec/mec.hpp"

namespace ddmec {

// Flat dotted-key configuration shared by all CLI commands. File format is
// "key = value" per line, '#' starts a comment; unknown keys are rejected.
// CLI flags override file values.
struct RunConfig {
    // schedule.*
    int schedule_T = 1000;
    double schedule_beta_min = 1e-4;
    double schedule_beta_max = 0.02;

    // denoiser.*
    std::vector<std::size_t> denoiser_hidden_dims{64, 64};
    std::size_t denoiser_time_embed_dim = 32;
    double denoiser_cond_drop_prob = 0.1;

    // sample.*
    int sample_n_steps = 50;
    double sample_guidance = 7.0;
    double sample_eta = 1.0;

    // pretrain.*
    int pretrain_steps = 5000;
    std::size_t pretrain_batch_size = 128;
    double pretrain_lr = 1e-3;
    double pretrain_ema_decay = 0.999;
    double pretrain_grad_clip = 0.0;

    // rl.*
    RLConfig rl;

    // data.*
    bool data_normalize = true;
    double data_clip_sigmas = 5.0;

    // eval.*
    int eval_k_mc = 16;
    std::size_t eval_n_samples = 256;

    // Applies one key; throws DataError on unknown keys or bad values.
    void set(const std::string& key, const std::string& value);

    // Parses a config file on top of *this.
    void load_file(const std::string& path);

    // Full key = value listing (also the --help defaults documentation).
    std::string dump() const;

    NoiseSchedule make_schedule() const {
        return NoiseSchedule::linear(schedule_T, schedule_beta_min, schedule_beta_max);
    }
    DenoiserConfig make_denoiser_config(std::size_t data_dim) const {
        DenoiserConfig cfg;
        cfg.data_dim = data_dim;
        cfg.hidden_dims = denoiser_hidden_dims;
        cfg.time_embed_dim = denoiser_time_embed_dim;
        cfg.cond_drop_prob = denoiser_cond_drop_prob;
        return cfg;
    }
};

}  // namespace ddmec
