#include "ddmec/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace ddmec {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
        throw DataError("tensor shape " + shape_str(shape) + " does not match data length " +
                        std::to_string(data.size()));
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    std::vector<double> d(shape_numel(shape), v);
    return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> d) {
    return Tensor({rows, cols}, std::move(d));
}

std::size_t Tensor::rows() const {
    if (shape.size() == 2) return shape[0];
    if (shape.size() == 1) return 1;
    throw DataError("rows() on rank-" + std::to_string(shape.size()) + " tensor");
}

std::size_t Tensor::cols() const {
    if (shape.size() == 2) return shape[1];
    if (shape.size() == 1) return shape[0];
    throw DataError("cols() on rank-" + std::to_string(shape.size()) + " tensor");
}

double& Tensor::at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

Tensor Tensor::row_slice(std::size_t i) const {
    std::size_t c = cols();
    Tensor out = Tensor::zeros({1, c});
    std::memcpy(out.data.data(), data.data() + i * c, c * sizeof(double));
    return out;
}

void Tensor::set_row(std::size_t i, const Tensor& r) {
    std::size_t c = cols();
    if (r.numel() != c) throw DataError("set_row length mismatch");
    std::memcpy(data.data() + i * c, r.data.data(), c * sizeof(double));
}

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

void Parameter::zero_grad() {
    std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Rng — xoshiro256++ core (fully specified, platform-independent), splitmix64
// seeding, Box-Muller normals with cached spare.
// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
    std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw DataError("uniform_int: hi < lo");
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    // rejection sampling keeps the draw exactly uniform
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return lo + static_cast<std::int64_t>(x % span);
}

void Rng::fill_normal(Tensor& t) {
    for (double& v : t.data) v = normal();
}

Tensor Rng::normal_tensor(std::vector<std::size_t> shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    fill_normal(t);
    return t;
}

Rng Rng::child(std::uint64_t stream) const {
    std::uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ULL + stream * 0xd1b54a32d192ed03ULL);
    return Rng(splitmix64(x));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Id Tape::check(Id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw DataError("tape: invalid node id " + std::to_string(id));
    }
    return id;
}

const double* Tape::vp(const Node& n) const {
    return n.par ? n.par->value.data.data() : val_.data() + n.off;
}

double* Tape::gp(const Node& n) {
    return grad_.data() + n.goff;
}

Tape::Id Tape::push(Node n, std::size_t numel) {
    n.goff = grad_.size();
    grad_.resize(grad_.size() + numel);
    if (!n.par) {
        n.off = val_.size();
        val_.resize(val_.size() + numel);
    }
    nodes_.push_back(n);
    return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(const Tensor& t) {
    Node n;
    n.op = Op::Input;
    n.rows = t.rows();
    n.cols = t.cols();
    Id id = push(n, t.numel());
    std::memcpy(val_.data() + nodes_[id].off, t.data.data(), t.numel() * sizeof(double));
    return id;
}

Tape::Id Tape::input(Tensor&& t) { return input(static_cast<const Tensor&>(t)); }

Tape::Id Tape::param(Parameter& p) {
    for (const auto& [ptr, id] : param_ids_) {
        if (ptr == &p) return id;
    }
    Node n;
    n.op = Op::Param;
    n.rows = p.value.rows();
    n.cols = p.value.cols();
    n.par = &p;
    Id id = push(n, p.value.numel());
    param_ids_.emplace_back(&p, id);
    return id;
}

Tape::Id Tape::binary_same_shape(Op op, Id a, Id b, const char* name) {
    const Node& na = nodes_[check(a)];
    const Node& nb = nodes_[check(b)];
    if (na.rows != nb.rows || na.cols != nb.cols) {
        throw DataError(std::string(name) + ": shape mismatch (" + std::to_string(na.rows) + "," +
                        std::to_string(na.cols) + ") vs (" + std::to_string(nb.rows) + "," +
                        std::to_string(nb.cols) + ")");
    }
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = na.cols;
    Id id = push(n, na.rows * na.cols);
    const double* pa = vp(nodes_[a]);
    const double* pb = vp(nodes_[b]);
    double* out = val_.data() + nodes_[id].off;
    std::size_t m = na.rows * na.cols;
    switch (op) {
        case Op::Add:
            for (std::size_t i = 0; i < m; ++i) out[i] = pa[i] + pb[i];
            break;
        case Op::Sub:
            for (std::size_t i = 0; i < m; ++i) out[i] = pa[i] - pb[i];
            break;
        case Op::Mul:
            for (std::size_t i = 0; i < m; ++i) out[i] = pa[i] * pb[i];
            break;
        default:
            throw DataError("tape: bad binary op");
    }
    return id;
}

Tape::Id Tape::add(Id a, Id b) { return binary_same_shape(Op::Add, a, b, "add"); }
Tape::Id Tape::sub(Id a, Id b) { return binary_same_shape(Op::Sub, a, b, "sub"); }
Tape::Id Tape::mul(Id a, Id b) { return binary_same_shape(Op::Mul, a, b, "mul"); }

Tape::Id Tape::scale(Id a, double c) {
    const Node& na = nodes_[check(a)];
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.rows = na.rows;
    n.cols = na.cols;
    n.c = c;
    Id id = push(n, na.rows * na.cols);
    const double* pa = vp(nodes_[a]);
    double* out = val_.data() + nodes_[id].off;
    for (std::size_t i = 0; i < na.rows * na.cols; ++i) out[i] = pa[i] * c;
    return id;
}

Tape::Id Tape::matmul(Id a, Id b) {
    const Node& na = nodes_[check(a)];
    const Node& nb = nodes_[check(b)];
    if (na.cols != nb.rows) {
        throw DataError("matmul: inner dims " + std::to_string(na.cols) + " vs " +
                        std::to_string(nb.rows));
    }
    Node n;
    n.op = Op::Matmul;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = nb.cols;
    Id id = push(n, na.rows * nb.cols);
    const double* pa = vp(nodes_[a]);
    const double* pb = vp(nodes_[b]);
    double* out = val_.data() + nodes_[id].off;
    std::size_t R = na.rows, K = na.cols, C = nb.cols;
    std::fill(out, out + R * C, 0.0);
    for (std::size_t i = 0; i < R; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            double av = pa[i * K + k];
            const double* brow = pb + k * C;
            double* orow = out + i * C;
            for (std::size_t j = 0; j < C; ++j) orow[j] += av * brow[j];
        }
    }
    return id;
}

Tape::Id Tape::add_row(Id a, Id b) {
    const Node& na = nodes_[check(a)];
    const Node& nb = nodes_[check(b)];
    if (nb.rows != 1 || nb.cols != na.cols) {
        throw DataError("add_row: broadcast shape (" + std::to_string(nb.rows) + "," +
                        std::to_string(nb.cols) + ") incompatible with (" +
                        std::to_string(na.rows) + "," + std::to_string(na.cols) + ")");
    }
    Node n;
    n.op = Op::AddRow;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = na.cols;
    Id id = push(n, na.rows * na.cols);
    const double* pa = vp(nodes_[a]);
    const double* pb = vp(nodes_[b]);
    double* out = val_.data() + nodes_[id].off;
    for (std::size_t i = 0; i < na.rows; ++i) {
        for (std::size_t j = 0; j < na.cols; ++j) out[i * na.cols + j] = pa[i * na.cols + j] + pb[j];
    }
    return id;
}

Tape::Id Tape::silu(Id a) {
    const Node& na = nodes_[check(a)];
    Node n;
    n.op = Op::Silu;
    n.a = a;
    n.rows = na.rows;
    n.cols = na.cols;
    Id id = push(n, na.rows * na.cols);
    const double* pa = vp(nodes_[a]);
    double* out = val_.data() + nodes_[id].off;
    for (std::size_t i = 0; i < na.rows * na.cols; ++i) {
        double x = pa[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    return id;
}

Tape::Id Tape::concat_cols(Id a, Id b) {
    const Node& na = nodes_[check(a)];
    const Node& nb = nodes_[check(b)];
    if (na.rows != nb.rows) throw DataError("concat_cols: row count mismatch");
    Node n;
    n.op = Op::ConcatCols;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = na.cols + nb.cols;
    n.c = static_cast<double>(na.cols);  // split point
    Id id = push(n, n.rows * n.cols);
    const double* pa = vp(nodes_[a]);
    const double* pb = vp(nodes_[b]);
    double* out = val_.data() + nodes_[id].off;
    for (std::size_t i = 0; i < na.rows; ++i) {
        std::memcpy(out + i * n.cols, pa + i * na.cols, na.cols * sizeof(double));
        std::memcpy(out + i * n.cols + na.cols, pb + i * nb.cols, nb.cols * sizeof(double));
    }
    return id;
}

Tape::Id Tape::row_sum(Id a) {
    const Node& na = nodes_[check(a)];
    Node n;
    n.op = Op::RowSum;
    n.a = a;
    n.rows = na.rows;
    n.cols = 1;
    Id id = push(n, na.rows);
    const double* pa = vp(nodes_[a]);
    double* out = val_.data() + nodes_[id].off;
    for (std::size_t i = 0; i < na.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < na.cols; ++j) s += pa[i * na.cols + j];
        out[i] = s;
    }
    return id;
}

Tape::Id Tape::sum(Id a) {
    const Node& na = nodes_[check(a)];
    Node n;
    n.op = Op::Sum;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    Id id = push(n, 1);
    const double* pa = vp(nodes_[a]);
    double s = 0.0;
    for (std::size_t i = 0; i < na.rows * na.cols; ++i) s += pa[i];
    val_[nodes_[id].off] = s;
    return id;
}

Tape::Id Tape::mean(Id a) {
    const Node& na = nodes_[check(a)];
    std::size_t m = na.rows * na.cols;
    if (m == 0) throw DataError("mean of empty tensor");
    Node n;
    n.op = Op::Mean;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    n.c = 1.0 / static_cast<double>(m);
    Id id = push(n, 1);
    const double* pa = vp(nodes_[a]);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += pa[i];
    val_[nodes_[id].off] = s * n.c;
    return id;
}

Tape::Id Tape::sq_norm(Id a) {
    const Node& na = nodes_[check(a)];
    Node n;
    n.op = Op::SqNorm;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    Id id = push(n, 1);
    const double* pa = vp(nodes_[a]);
    double s = 0.0;
    for (std::size_t i = 0; i < na.rows * na.cols; ++i) s += pa[i] * pa[i];
    val_[nodes_[id].off] = s;
    return id;
}

Tape::Id Tape::scale_rows(Id a, const std::vector<double>& w) {
    const Node& na = nodes_[check(a)];
    if (w.size() != na.rows) throw DataError("scale_rows: weight count mismatch");
    Node n;
    n.op = Op::ScaleRows;
    n.a = a;
    n.rows = na.rows;
    n.cols = na.cols;
    n.aux = aux_.size();
    aux_.insert(aux_.end(), w.begin(), w.end());
    Id id = push(n, na.rows * na.cols);
    const double* pa = vp(nodes_[a]);
    double* out = val_.data() + nodes_[id].off;
    const double* ww = aux_.data() + nodes_[id].aux;
    for (std::size_t i = 0; i < na.rows; ++i) {
        for (std::size_t j = 0; j < na.cols; ++j) out[i * na.cols + j] = pa[i * na.cols + j] * ww[i];
    }
    return id;
}

const double* Tape::value_ptr(Id id) const { return vp(nodes_[check(id)]); }

Tensor Tape::value(Id id) const {
    const Node& n = nodes_[check(id)];
    const double* p = vp(n);
    return Tensor({n.rows, n.cols}, std::vector<double>(p, p + n.rows * n.cols));
}

double Tape::scalar(Id id) const {
    const Node& n = nodes_[check(id)];
    if (n.rows * n.cols != 1) throw DataError("scalar() on non-scalar node");
    return *vp(n);
}

void Tape::backward(Id output) {
    const Node& on = nodes_[check(output)];
    if (on.rows * on.cols != 1) {
        throw DataError("backward: output must be scalar, got (" + std::to_string(on.rows) + "," +
                        std::to_string(on.cols) + ")");
    }
    std::fill(grad_.begin(), grad_.end(), 0.0);
    grad_[on.goff] = 1.0;

    for (Id i = static_cast<Id>(nodes_.size()) - 1; i >= 0; --i) {
        const Node& n = nodes_[i];
        if (i > output) continue;  // cannot influence the output
        const double* g = gp(n);
        switch (n.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Add: {
                double* ga = gp(nodes_[n.a]);
                double* gb = gp(nodes_[n.b]);
                for (std::size_t k = 0; k < n.rows * n.cols; ++k) {
                    ga[k] += g[k];
                    gb[k] += g[k];
                }
                break;
            }
            case Op::Sub: {
                double* ga = gp(nodes_[n.a]);
                double* gb = gp(nodes_[n.b]);
                for (std::size_t k = 0; k < n.rows * n.cols; ++k) {
                    ga[k] += g[k];
                    gb[k] -= g[k];
                }
                break;
            }
            case Op::Mul: {
                const double* pa = vp(nodes_[n.a]);
                const double* pb = vp(nodes_[n.b]);
                double* ga = gp(nodes_[n.a]);
                double* gb = gp(nodes_[n.b]);
                for (std::size_t k = 0; k < n.rows * n.cols; ++k) {
                    ga[k] += g[k] * pb[k];
                    gb[k] += g[k] * pa[k];
                }
                break;
            }
            case Op::Scale: {
                double* ga = gp(nodes_[n.a]);
                for (std::size_t k = 0; k < n.rows * n.cols; ++k) ga[k] += g[k] * n.c;
                break;
            }
            case Op::Matmul: {
                const Node& na = nodes_[n.a];
                const Node& nb = nodes_[n.b];
                const double* pa = vp(na);
                const double* pb = vp(nb);
                double* ga = gp(na);
                double* gb = gp(nb);
                std::size_t R = na.rows, K = na.cols, C = nb.cols;
                // dA += dC * B^T
                for (std::size_t i2 = 0; i2 < R; ++i2) {
                    for (std::size_t k = 0; k < K; ++k) {
                        double s = 0.0;
                        const double* grow = g + i2 * C;
                        const double* brow = pb + k * C;
                        for (std::size_t j = 0; j < C; ++j) s += grow[j] * brow[j];
                        ga[i2 * K + k] += s;
                    }
                }
                // dB += A^T * dC
                for (std::size_t k = 0; k < K; ++k) {
                    for (std::size_t i2 = 0; i2 < R; ++i2) {
                        double av = pa[i2 * K + k];
                        const double* grow = g + i2 * C;
                        double* gbrow = gb + k * C;
                        for (std::size_t j = 0; j < C; ++j) gbrow[j] += av * grow[j];
                    }
                }
                break;
            }
            case Op::AddRow: {
                double* ga = gp(nodes_[n.a]);
                double* gb = gp(nodes_[n.b]);
                for (std::size_t i2 = 0; i2 < n.rows; ++i2) {
                    for (std::size_t j = 0; j < n.cols; ++j) {
                        ga[i2 * n.cols + j] += g[i2 * n.cols + j];
                        gb[j] += g[i2 * n.cols + j];
                    }
                }
                break;
            }
            case Op::Silu: {
                const double* pa = vp(nodes_[n.a]);
                double* ga = gp(nodes_[n.a]);
                for (std::size_t k = 0; k < n.rows * n.cols; ++k) {
                    double x = pa[k];
                    double s = 1.0 / (1.0 + std::exp(-x));
                    ga[k] += g[k] * s * (1.0 + x * (1.0 - s));
                }
                break;
            }
            case Op::ConcatCols: {
                const Node& na = nodes_[n.a];
                const Node& nb = nodes_[n.b];
                double* ga = gp(na);
                double* gb = gp(nb);
                std::size_t split = static_cast<std::size_t>(n.c);
                for (std::size_t i2 = 0; i2 < n.rows; ++i2) {
                    for (std::size_t j = 0; j < split; ++j) ga[i2 * na.cols + j] += g[i2 * n.cols + j];
                    for (std::size_t j = 0; j < nb.cols; ++j)
                        gb[i2 * nb.cols + j] += g[i2 * n.cols + split + j];
                }
                break;
            }
            case Op::RowSum: {
                const Node& na = nodes_[n.a];
                double* ga = gp(na);
                for (std::size_t i2 = 0; i2 < na.rows; ++i2) {
                    for (std::size_t j = 0; j < na.cols; ++j) ga[i2 * na.cols + j] += g[i2];
                }
                break;
            }
            case Op::Sum: {
                const Node& na = nodes_[n.a];
                double* ga = gp(na);
                for (std::size_t k = 0; k < na.rows * na.cols; ++k) ga[k] += g[0];
                break;
            }
            case Op::Mean: {
                const Node& na = nodes_[n.a];
                double* ga = gp(na);
                double gv = g[0] * n.c;
                for (std::size_t k = 0; k < na.rows * na.cols; ++k) ga[k] += gv;
                break;
            }
            case Op::SqNorm: {
                const Node& na = nodes_[n.a];
                const double* pa = vp(na);
                double* ga = gp(na);
                double gv = 2.0 * g[0];
                for (std::size_t k = 0; k < na.rows * na.cols; ++k) ga[k] += gv * pa[k];
                break;
            }
            case Op::ScaleRows: {
                const Node& na = nodes_[n.a];
                double* ga = gp(na);
                const double* ww = aux_.data() + n.aux;
                for (std::size_t i2 = 0; i2 < n.rows; ++i2) {
                    for (std::size_t j = 0; j < n.cols; ++j)
                        ga[i2 * n.cols + j] += g[i2 * n.cols + j] * ww[i2];
                }
                break;
            }
        }
    }

    for (const auto& [par, id] : param_ids_) {
        const Node& n = nodes_[id];
        const double* g = gp(n);
        double* pg = par->grad.data.data();
        for (std::size_t k = 0; k < n.rows * n.cols; ++k) pg[k] += g[k];
    }
}

void Tape::clear() {
    nodes_.clear();
    val_.clear();
    grad_.clear();
    aux_.clear();
    param_ids_.clear();
}

// ---------------------------------------------------------------------------
// Adam / clipping
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0) ||
        !(cfg_.eps > 0.0) || !(cfg_.lr > 0.0)) {
        throw DataError("adam: hyperparameters out of range");
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
        m_.push_back(Tensor::zeros(p->value.shape));
        v_.push_back(Tensor::zeros(p->value.shape));
    }
}

void Adam::step() {
    double t = static_cast<double>(step_ + 1);
    double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        if (p.grad.numel() != p.value.numel()) {
            throw DataError("adam: grad shape mismatch for " + p.name);
        }
        double* m = m_[i].data.data();
        double* v = v_[i].data.data();
        double* w = p.value.data.data();
        const double* g = p.grad.data.data();
        for (std::size_t k = 0; k < p.value.numel(); ++k) {
            if (!std::isfinite(g[k])) {
                throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
            }
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            double mhat = m[k] / bc1;
            double vhat = v[k] / bc2;
            w[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    ++step_;
}

double clip_global_norm(const std::vector<Parameter*>& params, double max_norm) {
    if (!(max_norm > 0.0)) throw DataError("clip_global_norm: max_norm must be > 0");
    double sq = 0.0;
    for (const Parameter* p : params) {
        for (double g : p->grad.data) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double s = max_norm / norm;
        for (Parameter* p : params) {
            for (double& g : p->grad.data) g *= s;
        }
    }
    return norm;
}

void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

}  // namespace ddmec
