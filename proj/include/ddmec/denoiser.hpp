#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ddmec/numkit.hpp"

namespace ddmec {

// Architecture of the noise-prediction MLP. cond_dim absent means an
// unconditional network. cond_drop_prob is the classifier-free-guidance
// condition dropout rate used by the denoising loss.
struct DenoiserConfig {
    std::size_t data_dim = 2;
    std::optional<std::size_t> cond_dim;
    std::vector<std::size_t> hidden_dims{64, 64};
    std::size_t time_embed_dim = 32;
    double cond_drop_prob = 0.1;

    bool conditional() const { return cond_dim.has_value(); }
    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

// Sinusoidal embedding of an integer timestep: first half sin(t/w_k), second
// half cos(t/w_k), w_k geometric from 1 to 10000. dim must be even.
std::vector<double> time_embedding(int t, std::size_t dim, int T);

// One embedding row per timestep in ts (n x dim).
Tensor time_embedding_rows(const std::vector<int>& ts, std::size_t dim, int T);

// Noise-prediction network eps(x_t, t) with an optional conditioning branch
// eps(x_t, y, t): residual MLP trunk with per-block sinusoidal-time
// injection, a conditioning encoder (a trunk-shaped stack without time
// inputs), zero-initialized per-block injections from encoder to trunk, and
// a learned null-condition token.
class Denoiser {
public:
    // How the conditioning input of a conditional network is supplied.
    struct CondSpec {
        const Tensor* rows = nullptr;          // n x cond_dim, or null
        const std::vector<bool>* drop = nullptr;  // per-row: use null token
        static CondSpec null_token() { return CondSpec{}; }
    };

    Denoiser() = default;
    Denoiser(DenoiserConfig cfg, Rng& rng);        // fresh random init

    // Conditional network whose trunk equals `uncond` and whose injections
    // are zero, so it computes the identical function at step 0.
    static Denoiser init_conditional_from_unconditional(const Denoiser& uncond,
                                                        std::size_t cond_dim,
                                                        double cond_drop_prob = 0.1);

    const DenoiserConfig& config() const { return cfg_; }
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::size_t parameter_count() const;

    // Records the forward pass on `tape`; temb holds one embedding row per
    // input row (mixed timesteps allowed). For conditional networks, cond
    // rows may be omitted or per-row dropped to route through the null token.
    Tape::Id predict(Tape& tape, Tape::Id x_rows, Tape::Id temb_rows, const CondSpec& cond);
    Tape::Id predict(Tape& tape, Tape::Id x_rows, Tape::Id temb_rows);

    // Value-only forward for a whole batch at one timestep.
    Tensor predict_value(const Tensor& x_rows, int t, int T,
                         const Tensor* cond_rows = nullptr);

    std::vector<Tensor> snapshot() const;          // parameter values, in order
    void restore(const std::vector<Tensor>& values);

private:
    void build_params(Rng* rng);

    DenoiserConfig cfg_;
    std::vector<Parameter> params_;

    // index bookkeeping into params_
    struct Block {
        int w = -1, b = -1, time_w = -1, skip_w = -1;
    };
    std::vector<Block> trunk_;     // trunk_[0] is the input block from x
    int out_w_ = -1, out_b_ = -1;
    std::vector<Block> enc_;       // encoder mirrors trunk widths; no time
    int null_token_ = -1;
    std::vector<int> inj_;         // per trunk block
};

}  // namespace ddmec
