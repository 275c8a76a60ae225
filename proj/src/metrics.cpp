#include "ddmec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

namespace ddmec {

namespace {

double sq_dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    std::size_t d = a.cols();
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        double diff = a.data[i * d + k] - b.data[j * d + k];
        s += diff * diff;
    }
    return s;
}

// indices of the k nearest rows of `ref` to row i of `query`; ties resolve
// toward the smaller index
std::vector<std::size_t> knn_indices(const Tensor& query, std::size_t i, const Tensor& ref,
                                     std::size_t k) {
    std::size_t n = ref.rows();
    std::vector<std::pair<double, std::size_t>> d(n);
    for (std::size_t j = 0; j < n; ++j) d[j] = {sq_dist(query, i, ref, j), j};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    std::vector<std::size_t> out(k);
    for (std::size_t j = 0; j < k; ++j) out[j] = d[j].second;
    return out;
}

int majority_label(const std::vector<std::size_t>& idx, const std::vector<int>& labels) {
    std::map<int, int> counts;
    for (std::size_t j : idx) ++counts[labels[j]];
    int best_label = 0, best = -1;
    for (const auto& [label, c] : counts) {
        if (c > best) {  // map iterates in label order, so ties keep the smallest id
            best = c;
            best_label = label;
        }
    }
    return best_label;
}

}  // namespace

double foscttm(const PairedEval& eval) {
    std::size_t n = eval.source.rows();
    if (n < 2) throw DataError("foscttm: need at least 2 points");
    if (eval.target.rows() != n) throw DataError("foscttm: point-set sizes differ");
    if (eval.source.cols() != eval.target.cols()) throw DataError("foscttm: dims differ");
    if (eval.correspondence.size() != n) throw DataError("foscttm: correspondence length mismatch");
    std::vector<std::size_t> inv(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = eval.correspondence[i];
        if (j >= n || inv[j] != n) throw DataError("foscttm: correspondence is not a bijection");
        inv[j] = i;
    }

    auto one_direction = [&](const Tensor& src, const Tensor& tgt,
                             const std::vector<std::size_t>& match) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d_true = sq_dist(src, i, tgt, match[i]);
            std::size_t closer = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != match[i] && sq_dist(src, i, tgt, j) < d_true) ++closer;
            }
            total += static_cast<double>(closer) / static_cast<double>(n - 1);
        }
        return total / static_cast<double>(n);
    };
    double fwd = one_direction(eval.source, eval.target, eval.correspondence);
    double bwd = one_direction(eval.target, eval.source, inv);
    return 0.5 * (fwd + bwd);
}

double label_transfer_accuracy(const LabeledEmbedding& source, const LabeledEmbedding& target,
                               int k) {
    if (!source.labels || !target.labels) throw DataError("label_transfer: both sides need labels");
    if (k < 1) throw DataError("label_transfer: k must be >= 1");
    if (static_cast<std::size_t>(k) >= source.size()) {
        throw DataError("label_transfer: k must be < source size");
    }
    if (source.dim() != target.dim()) throw DataError("label_transfer: dims differ");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        auto idx = knn_indices(target.points, i, source.points, static_cast<std::size_t>(k));
        if (majority_label(idx, *source.labels) == (*target.labels)[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(target.size());
}

double neighborhood_type_accuracy(const Tensor& generated, const LabeledEmbedding& reference,
                                  const std::vector<int>& true_labels, int k) {
    if (!reference.labels) throw DataError("neighborhood accuracy: reference needs labels");
    if (true_labels.size() != generated.rows()) {
        throw DataError("neighborhood accuracy: one true label per generated point");
    }
    if (k < 1 || static_cast<std::size_t>(k) >= reference.size() + 1) {
        throw DataError("neighborhood accuracy: k out of range");
    }
    if (generated.cols() != reference.dim()) throw DataError("neighborhood accuracy: dims differ");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < generated.rows(); ++i) {
        auto idx = knn_indices(generated, i, reference.points, static_cast<std::size_t>(k));
        if (majority_label(idx, *reference.labels) == true_labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(generated.rows());
}

Tensor nn_project(const Tensor& generated, const Tensor& dataset) {
    if (dataset.rows() == 0) throw DataError("nn_project: empty dataset");
    if (generated.cols() != dataset.cols()) throw DataError("nn_project: dims differ");
    Tensor out = Tensor::zeros(generated.shape);
    std::size_t d = generated.cols();
    for (std::size_t i = 0; i < generated.rows(); ++i) {
        double best = sq_dist(generated, i, dataset, 0);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < dataset.rows(); ++j) {
            double dist = sq_dist(generated, i, dataset, j);
            if (dist < best) {
                best = dist;
                arg = j;
            }
        }
        std::memcpy(out.data.data() + i * d, dataset.data.data() + arg * d, d * sizeof(double));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Coupling entropy / MI
// ---------------------------------------------------------------------------

namespace {

std::pair<double, double> mean_and_se(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0.0};
    double sq = 0.0;
    for (double x : v) sq += (x - m) * (x - m);
    double se = std::sqrt(sq / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    return {m, se};
}

}  // namespace

CouplingEntropy estimate_coupling_entropy(CouplingPair& pair, const Tensor& cond_data, int k_mc,
                                          const SampleConfig& sample_cfg, Rng& rng) {
    if (cond_data.rows() == 0) throw DataError("coupling entropy: empty conditioning data");
    Denoiser theta_eval = pair.theta.net_with_ema();
    SampleConfig scfg = sample_cfg;
    scfg.record_trajectory = false;
    SampleResult gen = sample(theta_eval, pair.theta.schedule, &cond_data, scfg, rng);

    std::vector<double> cond_nll = estimate_nll_batch(theta_eval, pair.theta.schedule, gen.x0,
                                                      &cond_data, k_mc, rng,
                                                      NllWeighting::Likelihood);
    std::vector<double> hy = estimate_nll_batch(pair.phi_anchor, pair.phi.schedule, cond_data,
                                                nullptr, k_mc, rng, NllWeighting::Likelihood);
    std::vector<double> hx = estimate_nll_batch(pair.theta_anchor, pair.theta.schedule, gen.x0,
                                                nullptr, k_mc, rng, NllWeighting::Likelihood);

    auto [mc, se_c] = mean_and_se(cond_nll);
    auto [my, se_y] = mean_and_se(hy);
    auto [mx, se_x] = mean_and_se(hx);

    CouplingEntropy out;
    out.conditional_entropy = mc;
    out.conditional_stderr = se_c;
    out.joint_entropy = mc + my;
    out.joint_stderr = std::sqrt(se_c * se_c + se_y * se_y);
    out.mutual_information = mx - mc;
    out.mi_stderr = std::sqrt(se_x * se_x + se_c * se_c);
    out.note = "absolute entropies carry a schedule-dependent additive constant; "
               "differences (including MI) are constant-free";
    return out;
}

// ---------------------------------------------------------------------------
// Discrete MEC oracle
// ---------------------------------------------------------------------------

void DiscreteMarginals::validate() const {
    if (p_x.empty() || p_y.empty()) throw DataError("marginals: empty support");
    for (const auto* p : {&p_x, &p_y}) {
        double s = 0.0;
        for (double v : *p) {
            if (v < 0.0) throw DataError("marginals: negative entry");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-12) throw DataError("marginals: must sum to 1 within 1e-12");
    }
}

double shannon_entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

namespace {

double coupling_entropy_nats(const Tensor& c) {
    double h = 0.0;
    for (double v : c.data) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

double marginal_error(const Tensor& c, const std::vector<double>& px,
                      const std::vector<double>& py) {
    std::size_t m = c.rows(), n = c.cols();
    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += c.at(i, j);
        err = std::max(err, std::abs(s - px[i]));
    }
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += c.at(i, j);
        err = std::max(err, std::abs(s - py[j]));
    }
    return err;
}

struct BestCoupling {
    Tensor coupling;
    double entropy = std::numeric_limits<double>::infinity();

    void offer(const Tensor& c, double tol, const std::vector<double>& px,
               const std::vector<double>& py) {
        if (marginal_error(c, px, py) > tol) return;
        double h = coupling_entropy_nats(c);
        if (h < entropy) {
            entropy = h;
            coupling = c;
        }
    }
};

// Exhaustive enumeration of the transport polytope's vertices: every vertex
// is the basic solution of a spanning tree of the complete bipartite support
// graph. Trees are enumerated as parent assignments toward row 0 (unique per
// tree), solved by leaf elimination, and kept when nonnegative.
void enumerate_vertices(const std::vector<double>& px, const std::vector<double>& py, double tol,
                        BestCoupling& best) {
    int m = static_cast<int>(px.size());
    int n = static_cast<int>(py.size());
    int nodes = m + n;  // rows 0..m-1, cols m..m+n-1
    std::vector<int> parent(nodes, -1);
    std::vector<int> par_c(n, 0);   // parent row of each column
    std::vector<int> par_r(m, 0);   // parent column index of each row (rows 1..m-1)
    std::vector<int> state(nodes);  // cycle-check scratch: 0 unseen, 1 on path, 2 ok
    std::vector<int> degree(nodes);
    std::vector<double> remain(nodes);
    std::vector<int> leaf_stack(nodes);
    Tensor cand = Tensor::zeros({static_cast<std::size_t>(m), static_cast<std::size_t>(n)});

    auto try_candidate = [&]() {
        parent[0] = 0;  // root marker
        for (int j = 0; j < n; ++j) parent[m + j] = par_c[j];
        for (int i = 1; i < m; ++i) parent[i] = m + par_r[i];

        std::fill(state.begin(), state.end(), 0);
        state[0] = 2;
        for (int v = 1; v < nodes; ++v) {
            if (state[v] == 2) continue;
            int u = v, len = 0;
            while (state[u] == 0) {
                state[u] = 1;
                u = parent[u];
                if (++len > nodes) return;  // unreachable, defensive
            }
            if (state[u] == 1) {  // hit the current path: cycle
                // unwind markers before rejecting
                int w = v;
                while (state[w] == 1) {
                    state[w] = 2;
                    w = parent[w];
                }
                return;
            }
            int w = v;
            while (state[w] == 1) {
                state[w] = 2;
                w = parent[w];
            }
        }

        // leaf elimination on the tree
        std::fill(degree.begin(), degree.end(), 0);
        for (int v = 1; v < nodes; ++v) {
            ++degree[v];
            ++degree[parent[v]];
        }
        for (int i = 0; i < m; ++i) remain[i] = px[static_cast<std::size_t>(i)];
        for (int j = 0; j < n; ++j) remain[m + j] = py[static_cast<std::size_t>(j)];
        int top = 0;
        for (int v = 1; v < nodes; ++v) {
            if (degree[v] == 1) leaf_stack[top++] = v;
        }
        std::fill(cand.data.begin(), cand.data.end(), 0.0);
        int processed = 0;
        while (top > 0) {
            int v = leaf_stack[--top];
            if (v == 0) continue;  // root is eliminated implicitly last
            int u = parent[v];
            double flow = remain[v];
            if (flow < -1e-12) return;  // infeasible tree
            if (flow < 0.0) flow = 0.0;
            int row = (v < m) ? v : u;
            int col = (v < m) ? parent[v] - m : v - m;
            cand.at(static_cast<std::size_t>(row), static_cast<std::size_t>(col)) = flow;
            remain[u] -= remain[v];
            remain[v] = 0.0;
            if (--degree[u] == 1 && u != 0) leaf_stack[top++] = u;
            ++processed;
        }
        if (processed != nodes - 1) return;
        best.offer(cand, tol, px, py);
    };

    // odometer over all parent assignments
    std::fill(par_c.begin(), par_c.end(), 0);
    std::fill(par_r.begin(), par_r.end(), 0);
    while (true) {
        try_candidate();
        int k = 0;
        for (; k < n; ++k) {
            if (++par_c[k] < m) break;
            par_c[k] = 0;
        }
        if (k < n) continue;
        int i = 1;
        for (; i < m; ++i) {
            if (++par_r[i] < n) break;
            par_r[i] = 0;
        }
        if (i >= m) break;
    }
}

Tensor northwest_corner(const std::vector<double>& px, const std::vector<double>& py) {
    std::size_t m = px.size(), n = py.size();
    Tensor c = Tensor::zeros({m, n});
    std::vector<double> r = px, co = py;
    std::size_t i = 0, j = 0;
    while (i < m && j < n) {
        double v = std::min(r[i], co[j]);
        c.at(i, j) = v;
        r[i] -= v;
        co[j] -= v;
        if (r[i] <= co[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return c;
}

Tensor greedy_max_match(const std::vector<double>& px, const std::vector<double>& py) {
    std::size_t m = px.size(), n = py.size();
    Tensor c = Tensor::zeros({m, n});
    std::vector<double> r = px, co = py;
    for (std::size_t step = 0; step < m * n + m + n; ++step) {
        std::size_t bi = 0, bj = 0;
        double rv = -1.0, cv = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (r[i] > rv) {
                rv = r[i];
                bi = i;
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (co[j] > cv) {
                cv = co[j];
                bj = j;
            }
        }
        double v = std::min(rv, cv);
        if (v <= 1e-15) break;
        c.at(bi, bj) += v;
        r[bi] -= v;
        co[bj] -= v;
    }
    return c;
}

void sinkhorn_to(Tensor& mat, const std::vector<double>& px, const std::vector<double>& py,
                 int iters) {
    std::size_t m = mat.rows(), n = mat.cols();
    for (int it = 0; it < iters; ++it) {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += mat.at(i, j);
            if (s <= 0.0) continue;
            double f = px[i] / s;
            for (std::size_t j = 0; j < n; ++j) mat.at(i, j) *= f;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += mat.at(i, j);
            if (s <= 0.0) continue;
            double f = py[j] / s;
            for (std::size_t i = 0; i < m; ++i) mat.at(i, j) *= f;
        }
    }
}

}  // namespace

MecOracleResult discrete_mec_oracle(const DiscreteMarginals& marginals, double tol, int n_starts,
                                    std::uint64_t seed) {
    marginals.validate();
    std::size_t m = marginals.p_x.size(), n = marginals.p_y.size();
    if (m * n > 25) throw DataError("mec oracle: support too large (m*n <= 25)");

    BestCoupling best;
    enumerate_vertices(marginals.p_x, marginals.p_y, tol, best);
    best.offer(northwest_corner(marginals.p_x, marginals.p_y), tol, marginals.p_x, marginals.p_y);
    best.offer(greedy_max_match(marginals.p_x, marginals.p_y), tol, marginals.p_x, marginals.p_y);

    // multi-start sharpened projected descent; entropy decreases under
    // element-wise powering, the projection restores the marginals
    Rng rng(seed);
    for (int s = 0; s < n_starts; ++s) {
        Tensor c = Tensor::zeros({m, n});
        for (double& v : c.data) v = 0.05 + rng.uniform();
        sinkhorn_to(c, marginals.p_x, marginals.p_y, 100);
        for (int it = 0; it < 60; ++it) {
            for (double& v : c.data) v = std::pow(v, 1.12);
            sinkhorn_to(c, marginals.p_x, marginals.p_y, 40);
        }
        sinkhorn_to(c, marginals.p_x, marginals.p_y, 400);
        best.offer(c, tol, marginals.p_x, marginals.p_y);
    }

    if (!std::isfinite(best.entropy)) {
        throw NumericError("mec oracle: no feasible coupling found (unreachable for valid input)");
    }
    return {best.coupling, best.entropy};
}

// ---------------------------------------------------------------------------
// Quantization helpers
// ---------------------------------------------------------------------------

std::vector<int> quantize_median_grid(const Tensor& points, int cells) {
    if (cells < 2 || (cells & (cells - 1)) != 0) {
        throw DataError("quantize: cells must be a power of two >= 2");
    }
    int bits = 0;
    for (int c = cells; c > 1; c >>= 1) ++bits;
    if (static_cast<std::size_t>(bits) > points.cols()) {
        throw DataError("quantize: need at least log2(cells) coordinates");
    }
    std::size_t n = points.rows();
    std::vector<int> cell(n, 0);
    std::vector<double> col(n);
    for (int b = 0; b < bits; ++b) {
        for (std::size_t i = 0; i < n; ++i) col[i] = points.at(i, static_cast<std::size_t>(b));
        std::vector<double> sorted = col;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n / 2),
                         sorted.end());
        double median = sorted[n / 2];
        for (std::size_t i = 0; i < n; ++i) {
            if (col[i] >= median) cell[i] |= (1 << b);
        }
    }
    return cell;
}

QuantizedCoupling empirical_quantized_coupling(const Tensor& x_points, const Tensor& y_points,
                                               int cells) {
    if (x_points.rows() != y_points.rows()) throw DataError("quantized coupling: row mismatch");
    std::size_t n = x_points.rows();
    if (n == 0) throw DataError("quantized coupling: empty input");
    std::vector<int> cx = quantize_median_grid(x_points, cells);
    std::vector<int> cy = quantize_median_grid(y_points, cells);
    QuantizedCoupling out;
    auto c = static_cast<std::size_t>(cells);
    out.joint = Tensor::zeros({c, c});
    out.p_x.assign(c, 0.0);
    out.p_y.assign(c, 0.0);
    double w = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.joint.at(static_cast<std::size_t>(cx[i]), static_cast<std::size_t>(cy[i])) += w;
        out.p_x[static_cast<std::size_t>(cx[i])] += w;
        out.p_y[static_cast<std::size_t>(cy[i])] += w;
    }
    out.joint_entropy = coupling_entropy_nats(out.joint);
    return out;
}

}  // namespace ddmec
