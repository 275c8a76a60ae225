#include "ddmec/denoiser.hpp"

#include <cmath>
#include <cstring>

namespace ddmec {

void DenoiserConfig::validate() const {
    if (data_dim == 0) throw DataError("denoiser: data_dim must be positive");
    if (cond_dim && *cond_dim == 0) throw DataError("denoiser: cond_dim must be positive");
    if (hidden_dims.empty()) throw DataError("denoiser: hidden_dims must be nonempty");
    for (std::size_t h : hidden_dims) {
        if (h == 0) throw DataError("denoiser: hidden dims must be positive");
    }
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0) {
        throw DataError("denoiser: time_embed_dim must be positive and even");
    }
    if (cond_drop_prob < 0.0 || cond_drop_prob > 1.0) {
        throw DataError("denoiser: cond_drop_prob must lie in [0,1]");
    }
}

std::vector<double> time_embedding(int t, std::size_t dim, int T) {
    if (dim == 0 || dim % 2 != 0) throw DataError("time_embedding: dim must be positive and even");
    if (t < 0 || t > T) throw DataError("time_embedding: t out of range [0,T]");
    std::size_t half = dim / 2;
    std::vector<double> e(dim);
    for (std::size_t k = 0; k < half; ++k) {
        double omega = (half == 1) ? 1.0
                                   : std::pow(10000.0, static_cast<double>(k) /
                                                           static_cast<double>(half - 1));
        double arg = static_cast<double>(t) / omega;
        e[k] = std::sin(arg);
        e[half + k] = std::cos(arg);
    }
    return e;
}

Tensor time_embedding_rows(const std::vector<int>& ts, std::size_t dim, int T) {
    Tensor out = Tensor::zeros({ts.size(), dim});
    for (std::size_t i = 0; i < ts.size(); ++i) {
        std::vector<double> e = time_embedding(ts[i], dim, T);
        std::memcpy(out.data.data() + i * dim, e.data(), dim * sizeof(double));
    }
    return out;
}

namespace {

Tensor he_init(std::size_t fan_in, std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor w = Tensor::zeros({rows, cols});
    double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.data) v = s * rng.normal();
    return w;
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params(&rng);
}

void Denoiser::build_params(Rng* rng) {
    params_.clear();
    trunk_.clear();
    enc_.clear();
    inj_.clear();

    auto add = [&](const std::string& name, Tensor init) {
        params_.emplace_back(name, std::move(init));
        return static_cast<int>(params_.size() - 1);
    };
    auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
        return add(name, rng ? he_init(in, in, out, *rng) : Tensor::zeros({in, out}));
    };
    auto bias = [&](const std::string& name, std::size_t n) {
        return add(name, Tensor::zeros({1, n}));
    };

    std::size_t E = cfg_.time_embed_dim;
    std::size_t prev = cfg_.data_dim;
    for (std::size_t k = 0; k < cfg_.hidden_dims.size(); ++k) {
        std::size_t h = cfg_.hidden_dims[k];
        std::string base = "trunk.b" + std::to_string(k);
        Block blk;
        blk.w = weight(base + ".W", prev, h);
        blk.b = bias(base + ".b", h);
        blk.time_w = weight(base + ".time.W", E, h);
        if (k > 0 && prev != h) blk.skip_w = weight(base + ".skip.W", prev, h);
        trunk_.push_back(blk);
        prev = h;
    }
    out_w_ = weight("out.W", prev, cfg_.data_dim);
    out_b_ = bias("out.b", cfg_.data_dim);

    if (cfg_.conditional()) {
        std::size_t cprev = *cfg_.cond_dim;
        for (std::size_t k = 0; k < cfg_.hidden_dims.size(); ++k) {
            std::size_t h = cfg_.hidden_dims[k];
            std::string base = "enc.b" + std::to_string(k);
            Block blk;
            blk.w = weight(base + ".W", cprev, h);
            blk.b = bias(base + ".b", h);
            if (k > 0 && cprev != h) blk.skip_w = weight(base + ".skip.W", cprev, h);
            enc_.push_back(blk);
            cprev = h;
        }
        null_token_ = add("null.token", Tensor::zeros({1, *cfg_.cond_dim}));
        // fresh conditional nets get scaled-random injections; nets built by
        // init_conditional_from_unconditional keep them exactly zero
        for (std::size_t k = 0; k < cfg_.hidden_dims.size(); ++k) {
            std::size_t h = cfg_.hidden_dims[k];
            inj_.push_back(weight("inj.b" + std::to_string(k) + ".W", h, h));
        }
    }
}

Denoiser Denoiser::init_conditional_from_unconditional(const Denoiser& uncond,
                                                       std::size_t cond_dim,
                                                       double cond_drop_prob) {
    if (uncond.cfg_.conditional()) {
        throw DataError("init_conditional_from_unconditional: source must be unconditional");
    }
    if (cond_dim != uncond.cfg_.data_dim) {
        throw DataError("init_conditional_from_unconditional: cond_dim " +
                        std::to_string(cond_dim) + " incompatible with encoder input dim " +
                        std::to_string(uncond.cfg_.data_dim));
    }
    Denoiser d;
    d.cfg_ = uncond.cfg_;
    d.cfg_.cond_dim = cond_dim;
    d.cfg_.cond_drop_prob = cond_drop_prob;
    d.build_params(nullptr);  // zero init; trunk and encoder overwritten below

    auto copy_value = [&](int dst, int src_uncond) {
        d.params_[dst].value = uncond.params_[src_uncond].value;
    };
    for (std::size_t k = 0; k < d.trunk_.size(); ++k) {
        copy_value(d.trunk_[k].w, uncond.trunk_[k].w);
        copy_value(d.trunk_[k].b, uncond.trunk_[k].b);
        copy_value(d.trunk_[k].time_w, uncond.trunk_[k].time_w);
        if (d.trunk_[k].skip_w >= 0) copy_value(d.trunk_[k].skip_w, uncond.trunk_[k].skip_w);
        // encoder clones the trunk's input stack (weights and biases, no time)
        copy_value(d.enc_[k].w, uncond.trunk_[k].w);
        copy_value(d.enc_[k].b, uncond.trunk_[k].b);
        if (d.enc_[k].skip_w >= 0) copy_value(d.enc_[k].skip_w, uncond.trunk_[k].skip_w);
    }
    copy_value(d.out_w_, uncond.out_w_);
    copy_value(d.out_b_, uncond.out_b_);
    // injections and null token stay exactly zero
    return d;
}

std::vector<Parameter*> Denoiser::parameters() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> Denoiser::parameters() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

std::size_t Denoiser::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

Tape::Id Denoiser::predict(Tape& tape, Tape::Id x_rows, Tape::Id temb_rows) {
    return predict(tape, x_rows, temb_rows, CondSpec{});
}

Tape::Id Denoiser::predict(Tape& tape, Tape::Id x_rows, Tape::Id temb_rows,
                           const CondSpec& cond) {
    std::size_t n = tape.node_rows(x_rows);
    if (tape.node_cols(x_rows) != cfg_.data_dim) {
        throw DataError("denoise: input dim " + std::to_string(tape.node_cols(x_rows)) +
                        " != data_dim " + std::to_string(cfg_.data_dim));
    }
    if (tape.node_cols(temb_rows) != cfg_.time_embed_dim || tape.node_rows(temb_rows) != n) {
        throw DataError("denoise: time embedding shape mismatch");
    }
    if (!cfg_.conditional() && (cond.rows || cond.drop)) {
        throw DataError("denoise: conditioning passed to unconditional network");
    }

    // Conditioning encoder features, one stack level per trunk block.
    std::vector<Tape::Id> enc_feat;
    if (cfg_.conditional()) {
        Tape::Id crows;
        Tape::Id ones = tape.input(Tensor::full({n, 1}, 1.0));
        Tape::Id token_rows = tape.matmul(ones, tape.param(params_[null_token_]));
        if (cond.rows) {
            if (cond.rows->rows() != n || cond.rows->cols() != *cfg_.cond_dim) {
                throw DataError("denoise: cond rows shape " + shape_str(cond.rows->shape) +
                                " != (" + std::to_string(n) + "," +
                                std::to_string(*cfg_.cond_dim) + ")");
            }
            Tape::Id given = tape.input(*cond.rows);
            if (cond.drop) {
                if (cond.drop->size() != n) throw DataError("denoise: drop mask length mismatch");
                std::vector<double> keep(n), dropw(n);
                for (std::size_t i = 0; i < n; ++i) {
                    keep[i] = (*cond.drop)[i] ? 0.0 : 1.0;
                    dropw[i] = 1.0 - keep[i];
                }
                crows = tape.add(tape.scale_rows(given, keep), tape.scale_rows(token_rows, dropw));
            } else {
                crows = given;
            }
        } else {
            crows = token_rows;
        }
        Tape::Id h = crows;
        for (std::size_t k = 0; k < enc_.size(); ++k) {
            const Block& blk = enc_[k];
            Tape::Id pre = tape.add_row(tape.matmul(h, tape.param(params_[blk.w])),
                                        tape.param(params_[blk.b]));
            Tape::Id act = tape.silu(pre);
            if (k > 0) {
                Tape::Id skip = (blk.skip_w >= 0)
                                    ? tape.matmul(h, tape.param(params_[blk.skip_w]))
                                    : h;
                act = tape.add(act, skip);
            }
            enc_feat.push_back(act);
            h = act;
        }
    }

    Tape::Id h = x_rows;
    for (std::size_t k = 0; k < trunk_.size(); ++k) {
        const Block& blk = trunk_[k];
        Tape::Id pre = tape.add_row(tape.matmul(h, tape.param(params_[blk.w])),
                                    tape.param(params_[blk.b]));
        pre = tape.add(pre, tape.matmul(temb_rows, tape.param(params_[blk.time_w])));
        if (cfg_.conditional()) {
            pre = tape.add(pre, tape.matmul(enc_feat[k], tape.param(params_[inj_[k]])));
        }
        Tape::Id act = tape.silu(pre);
        if (k > 0) {
            Tape::Id skip = (blk.skip_w >= 0) ? tape.matmul(h, tape.param(params_[blk.skip_w]))
                                              : h;
            act = tape.add(act, skip);
        }
        h = act;
    }
    return tape.add_row(tape.matmul(h, tape.param(params_[out_w_])), tape.param(params_[out_b_]));
}

Tensor Denoiser::predict_value(const Tensor& x_rows, int t, int T, const Tensor* cond_rows) {
    thread_local Tape tape;
    tape.clear();
    std::vector<int> ts(x_rows.rows(), t);
    Tape::Id x = tape.input(x_rows);
    Tape::Id e = tape.input(time_embedding_rows(ts, cfg_.time_embed_dim, T));
    CondSpec cs;
    cs.rows = cond_rows;
    Tape::Id out = predict(tape, x, e, cfg_.conditional() ? cs : CondSpec{});
    return tape.value(out);
}

std::vector<Tensor> Denoiser::snapshot() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value);
    return out;
}

void Denoiser::restore(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw DataError("denoiser restore: block count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (values[i].shape != params_[i].value.shape) {
            throw DataError("denoiser restore: shape mismatch at " + params_[i].name);
        }
        params_[i].value = values[i];
    }
}

}  // namespace ddmec
