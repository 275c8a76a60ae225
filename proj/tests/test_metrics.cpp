#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ddmec/metrics.hpp"

using namespace ddmec;

namespace {

Tensor points_1d(std::vector<double> xs) {
    std::size_t n = xs.size();
    return Tensor({n, 1}, std::move(xs));
}

}  // namespace

TEST_CASE("foscttm: perfect alignment scores 0") {
    Rng rng(3);
    Tensor pts = rng.normal_tensor({30, 4});
    PairedEval pe{pts, pts, {}};
    pe.correspondence.resize(30);
    for (std::size_t i = 0; i < 30; ++i) pe.correspondence[i] = i;
    CHECK(foscttm(pe) == 0.0);
}

TEST_CASE("foscttm: hand-enumerated 3-point line fixture") {
    // sources (0,1,2), targets (0,1,2), correspondence 0<->2, 1<->1:
    // exhaustive enumeration gives 2/3 in each direction
    PairedEval pe{points_1d({0, 1, 2}), points_1d({0, 1, 2}), {2, 1, 0}};
    CHECK(foscttm(pe) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("foscttm: random correspondence on iid points averages near 0.5") {
    Rng rng(8);
    double total = 0.0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        const std::size_t n = 40;
        Tensor a = rng.normal_tensor({n, 3});
        Tensor b = rng.normal_tensor({n, 3});
        std::vector<std::size_t> corr(n);
        for (std::size_t i = 0; i < n; ++i) corr[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(corr[i - 1], corr[j]);
        }
        total += foscttm({a, b, corr});
    }
    CHECK(std::abs(total / trials - 0.5) < 0.05);
}

TEST_CASE("foscttm: symmetry under swapping sides with the inverted correspondence") {
    Rng rng(12);
    const std::size_t n = 25;
    Tensor a = rng.normal_tensor({n, 2});
    Tensor b = rng.normal_tensor({n, 2});
    std::vector<std::size_t> corr(n), inv(n);
    for (std::size_t i = 0; i < n; ++i) corr[i] = (i * 7 + 3) % n;
    for (std::size_t i = 0; i < n; ++i) inv[corr[i]] = i;
    CHECK(std::abs(foscttm({a, b, corr}) - foscttm({b, a, inv})) < 1e-12);
}

TEST_CASE("foscttm input validation") {
    Tensor one = points_1d({0.0});
    CHECK_THROWS_AS(foscttm({one, one, {0}}), DataError);
    Tensor two = points_1d({0.0, 1.0});
    CHECK_THROWS_AS(foscttm({two, two, {0, 0}}), DataError);  // not a bijection
}

TEST_CASE("label transfer accuracy") {
    LabeledEmbedding src;
    src.points = points_1d({0.0, 0.1, 5.0, 5.1});
    src.labels = std::vector<int>{0, 0, 1, 1};
    LabeledEmbedding tgt;
    tgt.points = points_1d({0.05, 5.05});
    tgt.labels = std::vector<int>{0, 1};
    CHECK(label_transfer_accuracy(src, tgt, 1) == 1.0);
    CHECK(label_transfer_accuracy(src, tgt, 2) == 1.0);

    // identical embeddings with unique positions: perfect at k = 1
    LabeledEmbedding self;
    Rng rng(4);
    self.points = rng.normal_tensor({20, 2});
    self.labels = std::vector<int>(20);
    for (int i = 0; i < 20; ++i) (*self.labels)[i] = i % 3;
    CHECK(label_transfer_accuracy(self, self, 1) == 1.0);

    CHECK_THROWS_AS(label_transfer_accuracy(src, tgt, 4), DataError);   // k >= n_source
    LabeledEmbedding unlabeled;
    unlabeled.points = points_1d({0.0, 1.0});
    CHECK_THROWS_AS(label_transfer_accuracy(unlabeled, tgt, 1), DataError);
}

TEST_CASE("label transfer on shuffled labels matches chance") {
    Rng rng(99);
    const int C = 4;
    double total = 0.0;
    const int trials = 100;
    const std::size_t n = 80;
    for (int t = 0; t < trials; ++t) {
        LabeledEmbedding src, tgt;
        src.points = rng.normal_tensor({n, 2});
        tgt.points = rng.normal_tensor({n, 2});
        src.labels = std::vector<int>(n);
        tgt.labels = std::vector<int>(n);
        for (std::size_t i = 0; i < n; ++i) {
            (*src.labels)[i] = static_cast<int>(rng.uniform_int(0, C - 1));
            (*tgt.labels)[i] = static_cast<int>(rng.uniform_int(0, C - 1));
        }
        total += label_transfer_accuracy(src, tgt, 1);
    }
    double mean = total / trials;
    // binomial standard error over trials*n independent-ish predictions
    double se = std::sqrt(0.25 / (trials * n));
    CHECK(std::abs(mean - 1.0 / C) < 5 * se + 0.01);
}

TEST_CASE("neighborhood type accuracy") {
    LabeledEmbedding ref;
    ref.points = Tensor({4, 2}, {0, 0, 0.1, 0, 5, 5, 5.1, 5});
    ref.labels = std::vector<int>{0, 0, 1, 1};

    Tensor gen = Tensor({2, 2}, {0.05, 0, 5.05, 5});
    CHECK(neighborhood_type_accuracy(gen, ref, {0, 1}, 2) == 1.0);
    CHECK(neighborhood_type_accuracy(gen, ref, {1, 0}, 2) == 0.0);
    CHECK(neighborhood_type_accuracy(gen, ref, {0, 0}, 2) == 0.5);
}

TEST_CASE("nn_project membership, idempotence, tie-break") {
    Rng rng(7);
    Tensor dataset = rng.normal_tensor({15, 2});
    Tensor gen = rng.normal_tensor({6, 2});
    Tensor proj = nn_project(gen, dataset);
    // membership
    for (std::size_t i = 0; i < proj.rows(); ++i) {
        bool found = false;
        for (std::size_t j = 0; j < dataset.rows(); ++j) {
            if (proj.at(i, 0) == dataset.at(j, 0) && proj.at(i, 1) == dataset.at(j, 1)) {
                found = true;
            }
        }
        CHECK(found);
    }
    // idempotence (bitwise)
    Tensor proj2 = nn_project(proj, dataset);
    CHECK(proj2.data == proj.data);

    // a dataset member projects to itself
    Tensor member = dataset.row_slice(3);
    CHECK(nn_project(member, dataset).data == member.data);

    // equidistant tie goes to the lower index
    Tensor two = Tensor({2, 1}, {-1.0, 1.0});
    Tensor mid = points_1d({0.0});
    CHECK(nn_project(mid, two).data[0] == -1.0);
}

TEST_CASE("discrete MEC oracle: uniform binary marginals reach ln 2 on the diagonal") {
    DiscreteMarginals m{{0.5, 0.5}, {0.5, 0.5}};
    MecOracleResult res = discrete_mec_oracle(m);
    CHECK(std::abs(res.entropy - std::log(2.0)) < 1e-6);
    // diagonal (or anti-diagonal) coupling
    double offdiag = std::min(res.coupling.at(0, 1) + res.coupling.at(1, 0),
                              res.coupling.at(0, 0) + res.coupling.at(1, 1));
    CHECK(offdiag < 1e-9);
}

TEST_CASE("discrete MEC oracle: degenerate X forces H(Y)") {
    DiscreteMarginals m{{1.0, 0.0}, {0.3, 0.2, 0.5}};
    MecOracleResult res = discrete_mec_oracle(m);
    CHECK(res.entropy == doctest::Approx(shannon_entropy(m.p_y)).epsilon(1e-9));
}

TEST_CASE("discrete MEC oracle: identical marginals take the diagonal") {
    std::vector<double> p{0.5, 0.3, 0.2};
    MecOracleResult res = discrete_mec_oracle({p, p});
    CHECK(res.entropy == doctest::Approx(shannon_entropy(p)).epsilon(1e-9));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(res.coupling.at(i, i) == doctest::Approx(p[i]).epsilon(1e-9));
    }
}

TEST_CASE("discrete MEC oracle: entropy lower bound and marginal feasibility on random pairs") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t m = 2 + static_cast<std::size_t>(rng.uniform_int(0, 3));
        std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 3));
        DiscreteMarginals dm;
        dm.p_x.resize(m);
        dm.p_y.resize(n);
        double sx = 0, sy = 0;
        for (double& v : dm.p_x) {
            v = 0.05 + rng.uniform();
            sx += v;
        }
        for (double& v : dm.p_y) {
            v = 0.05 + rng.uniform();
            sy += v;
        }
        for (double& v : dm.p_x) v /= sx;
        for (double& v : dm.p_y) v /= sy;
        // renormalize exactly
        double cx = 0;
        for (std::size_t i = 0; i + 1 < m; ++i) cx += dm.p_x[i];
        dm.p_x[m - 1] = 1.0 - cx;
        double cy = 0;
        for (std::size_t j = 0; j + 1 < n; ++j) cy += dm.p_y[j];
        dm.p_y[n - 1] = 1.0 - cy;

        MecOracleResult res = discrete_mec_oracle(dm, 1e-9, 8, trial);
        double lb = std::max(shannon_entropy(dm.p_x), shannon_entropy(dm.p_y));
        CHECK(res.entropy >= lb - 1e-9);
        // upper bound: independent coupling
        CHECK(res.entropy <= shannon_entropy(dm.p_x) + shannon_entropy(dm.p_y) + 1e-9);
    }
}

TEST_CASE("oracle validates its inputs") {
    CHECK_THROWS_AS(discrete_mec_oracle({{0.5, 0.6}, {1.0}}), DataError);
    CHECK_THROWS_AS(discrete_mec_oracle({{-0.1, 1.1}, {1.0}}), DataError);
    std::vector<double> six(6, 1.0 / 6.0);
    CHECK_THROWS_AS(discrete_mec_oracle({six, six}), DataError);  // 36 cells > 25
}

TEST_CASE("median-grid quantization and the empirical quantized coupling") {
    Tensor pts = Tensor({4, 2}, {-1, -1, -1, 1, 1, -1, 1, 1});
    auto cells = quantize_median_grid(pts, 4);
    CHECK(cells.size() == 4);
    // all four quadrants distinct
    std::vector<int> sorted = cells;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3});

    // identical x/y pairing gives a diagonal joint with marginal entropy
    QuantizedCoupling qc = empirical_quantized_coupling(pts, pts, 4);
    CHECK(qc.joint_entropy == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(qc.p_x == qc.p_y);

    CHECK_THROWS_AS(quantize_median_grid(pts, 3), DataError);
    CHECK_THROWS_AS(quantize_median_grid(points_1d({1, 2}), 4), DataError);
}

TEST_CASE("coupling entropy: independence at init gives MI near zero") {
    Rng rng(55);
    DenoiserConfig cfg;
    cfg.data_dim = 2;
    cfg.hidden_dims = {16};
    cfg.time_embed_dim = 8;
    DiffusionModel ux, uy;
    Rng r1 = rng.child(1), r2 = rng.child(2);
    ux.net = Denoiser(cfg, r1);
    uy.net = Denoiser(cfg, r2);
    ux.schedule = NoiseSchedule::linear(100);
    uy.schedule = NoiseSchedule::linear(100);
    CouplingPair pair = make_coupling_pair(ux, uy);

    Tensor y = rng.normal_tensor({48, 2});
    SampleConfig sc;
    sc.n_steps = 10;
    sc.guidance = 3.0;  // irrelevant at init: conditioning is inert
    sc.eta = 1.0;
    Rng er(77);
    CouplingEntropy ce = estimate_coupling_entropy(pair, y, 24, sc, er);
    CHECK(std::isfinite(ce.conditional_entropy));
    CHECK(std::abs(ce.mutual_information) <= 3.0 * ce.mi_stderr + 0.05);
    CHECK(ce.joint_entropy ==
          doctest::Approx(ce.conditional_entropy + (ce.joint_entropy - ce.conditional_entropy)));
    CHECK(!ce.note.empty());
}
