#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ddmec/errors.hpp"

namespace ddmec {

// Dense row-major 64-bit float tensor. Rank 1 (length-n vector, stored as
// shape {n}) and rank 2 (shape {rows, cols}) are the only ranks the library
// uses; rank-1 tensors behave as 1xN rows where a matrix is expected.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor row(std::vector<double> v);     // shape {1, n}
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> d);

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor row_slice(std::size_t i) const;        // shape {1, cols}
    void set_row(std::size_t i, const Tensor& r);
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Named trainable tensor with a same-shape gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v);
    void zero_grad();
};

// Deterministic RNG with a documented draw discipline so tests can mirror
// streams. normal() is Box-Muller with a cached spare; uniform doubles use
// the top 53 bits of the underlying mt19937_64 output.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    double uniform();                              // [0, 1)
    double normal();                               // N(0, 1)
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
    void fill_normal(Tensor& t);
    Tensor normal_tensor(std::vector<std::size_t> shape);
    Rng child(std::uint64_t stream) const;         // independent derived stream

private:
    std::uint64_t next_u64();
    std::uint64_t seed_;
    std::uint64_t s_[4];           // xoshiro256++ state, fully specified here
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Reverse-mode autodiff tape.
//
// Ops execute eagerly and are recorded; backward() walks the record in
// reverse and accumulates d(output)/d(param) into each Parameter's grad.
// The op set is fixed to the closure the denoiser and the policy surrogate
// need; anything else throws rather than silently falling back.
// ---------------------------------------------------------------------------
class Tape {
public:
    using Id = int;

    Tape() = default;

    // Leaves.
    Id input(const Tensor& t);                     // constant, no grad
    Id input(Tensor&& t);
    Id param(Parameter& p);                        // grad sink, deduped per tape

    // Elementwise / linear algebra.
    Id add(Id a, Id b);                            // same shape
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);                            // Hadamard
    Id scale(Id a, double c);
    Id matmul(Id a, Id b);                         // (n,k)x(k,m)
    Id add_row(Id a, Id b);                        // (n,m) + broadcast (1,m)
    Id silu(Id a);                                 // x * sigmoid(x)
    Id concat_cols(Id a, Id b);                    // (n,p)|(n,q) -> (n,p+q)

    // Reductions.
    Id row_sum(Id a);                              // (n,m) -> (n,1)
    Id sum(Id a);                                  // scalar
    Id mean(Id a);                                 // scalar
    Id sq_norm(Id a);                              // scalar sum of squares
    Id scale_rows(Id a, const std::vector<double>& w);  // row i *= w[i], w constant

    std::size_t node_rows(Id id) const { return nodes_[check(id)].rows; }
    std::size_t node_cols(Id id) const { return nodes_[check(id)].cols; }
    const double* value_ptr(Id id) const;
    Tensor value(Id id) const;
    double scalar(Id id) const;

    // Fills grads of every Parameter reachable from output (accumulating);
    // output must be scalar.
    void backward(Id output);

    void clear();                                  // keeps buffer capacity
    std::size_t size() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        Input, Param, Add, Sub, Mul, Scale, Matmul, AddRow, Silu,
        ConcatCols, RowSum, Sum, Mean, SqNorm, ScaleRows
    };

    struct Node {
        Op op;
        Id a = -1;
        Id b = -1;
        std::size_t rows = 0, cols = 0;
        std::size_t off = 0;       // value offset into val_ (unused for Param)
        std::size_t goff = 0;      // grad offset into grad_
        double c = 0.0;            // Scale constant
        std::size_t aux = 0;       // ScaleRows weight offset into aux_
        Parameter* par = nullptr;  // Param leaf
    };

    Id push(Node n, std::size_t numel);
    Id check(Id id) const;
    const double* vp(const Node& n) const;
    double* gp(const Node& n);
    Id binary_same_shape(Op op, Id a, Id b, const char* name);

    std::vector<Node> nodes_;
    std::vector<double> val_;
    std::vector<double> grad_;
    std::vector<double> aux_;
    std::vector<std::pair<Parameter*, Id>> param_ids_;
};

// ---------------------------------------------------------------------------
// Adam with bias correction, plus global-norm clipping.
// ---------------------------------------------------------------------------
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter first/second moment state; step counts completed updates.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig cfg);

    // Applies one in-place update from the params' accumulated grads.
    // Throws NumericError naming the parameter on non-finite gradients.
    void step();
    void set_lr(double lr) { cfg_.lr = lr; }

    std::uint64_t steps_done() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    const Tensor& m(std::size_t i) const { return m_[i]; }
    const Tensor& v(std::size_t i) const { return v_[i]; }
    Tensor& m(std::size_t i) { return m_[i]; }
    Tensor& v(std::size_t i) { return v_[i]; }
    void set_steps_done(std::uint64_t s) { step_ = s; }

private:
    std::vector<Parameter*> params_;
    AdamConfig cfg_;
    std::uint64_t step_ = 0;
    std::vector<Tensor> m_, v_;
};

// Scales grads so their joint L2 norm is at most max_norm; returns the norm
// before clipping. Empty parameter sets return 0.
double clip_global_norm(const std::vector<Parameter*>& params, double max_norm);

void zero_grads(const std::vector<Parameter*>& params);

}  // namespace ddmec
