// Python bindings for the ddmec core: schedules, models, the coupling loop,
// metrics and the discrete oracle, with numpy arrays at the boundary.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "ddmec/data.hpp"
#include "ddmec/diffusion.hpp"
#include "ddmec/mec.hpp"
#include "ddmec/metrics.hpp"

namespace py = pybind11;
using namespace ddmec;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
    if (a.ndim() == 1) {
        std::vector<double> d(a.data(), a.data() + a.shape(0));
        return Tensor({1, static_cast<std::size_t>(a.shape(0))}, std::move(d));
    }
    if (a.ndim() == 2) {
        std::vector<double> d(a.data(), a.data() + a.shape(0) * a.shape(1));
        return Tensor({static_cast<std::size_t>(a.shape(0)),
                       static_cast<std::size_t>(a.shape(1))},
                      std::move(d));
    }
    throw DataError("expected a 1D or 2D float array");
}

py::array_t<double> to_array(const Tensor& t) {
    py::array_t<double> out({t.rows(), t.cols()});
    std::memcpy(out.mutable_data(), t.data.data(), t.numel() * sizeof(double));
    return out;
}

NllWeighting parse_weighting(const std::string& w) {
    if (w == "uniform") return NllWeighting::Uniform;
    if (w == "likelihood") return NllWeighting::Likelihood;
    throw DataError("weighting must be 'uniform' or 'likelihood'");
}

struct PyModel {
    DiffusionModel model;

    static PyModel pretrain(DoubleArray data, std::vector<std::size_t> hidden,
                            std::size_t time_embed, int T, double beta_min, double beta_max,
                            int steps, std::size_t batch_size, double lr, double ema_decay,
                            std::uint64_t seed) {
        Tensor d = to_tensor(data);
        PyModel out;
        DenoiserConfig cfg;
        cfg.data_dim = d.cols();
        cfg.hidden_dims = std::move(hidden);
        cfg.time_embed_dim = time_embed;
        Rng init = Rng(seed).child(1);
        out.model.net = Denoiser(cfg, init);
        out.model.schedule = NoiseSchedule::linear(T, beta_min, beta_max);
        PretrainConfig pc;
        pc.steps = steps;
        pc.batch_size = batch_size;
        pc.lr = lr;
        pc.ema_decay = ema_decay;
        Rng tr = Rng(seed).child(2);
        train_unconditional(out.model, d, pc, tr, nullptr);
        return out;
    }

    py::array_t<double> sample_py(std::size_t n, py::object cond, int n_steps, double guidance,
                                  double eta, std::uint64_t seed, bool use_ema) {
        SampleConfig sc;
        sc.n_steps = n_steps;
        sc.guidance = guidance;
        sc.eta = eta;
        sc.n_samples = n;
        Rng rng(seed);
        Denoiser net = use_ema ? model.net_with_ema() : model.net;
        if (cond.is_none()) {
            return to_array(sample(net, model.schedule, nullptr, sc, rng).x0);
        }
        Tensor c = to_tensor(cond.cast<DoubleArray>());
        return to_array(sample(net, model.schedule, &c, sc, rng).x0);
    }

    py::array_t<double> estimate_nll_py(DoubleArray x0, py::object cond, int k,
                                        std::uint64_t seed, const std::string& weighting,
                                        bool stratified) {
        Tensor x = to_tensor(x0);
        Rng rng(seed);
        std::optional<Tensor> c;
        if (!cond.is_none()) c = to_tensor(cond.cast<DoubleArray>());
        auto vals = estimate_nll_batch(model.net, model.schedule, x, c ? &*c : nullptr, k, rng,
                                       parse_weighting(weighting), stratified);
        py::array_t<double> out(vals.size());
        std::memcpy(out.mutable_data(), vals.data(), vals.size() * sizeof(double));
        return out;
    }

    double denoising_loss_py(DoubleArray x0, py::object cond, double drop_prob,
                             std::uint64_t seed) {
        Tensor x = to_tensor(x0);
        Rng rng(seed);
        if (cond.is_none()) return denoising_loss(model.net, model.schedule, x, nullptr, 0.0, rng);
        Tensor c = to_tensor(cond.cast<DoubleArray>());
        return denoising_loss(model.net, model.schedule, x, &c, drop_prob, rng);
    }

    void save(const std::string& path, const std::string& data_role,
              const std::string& cond_role) {
        double bmin = model.schedule.beta(1);
        double bmax = model.schedule.beta(model.schedule.T);
        save_checkpoint(path, checkpoint_from_model(model, bmin, bmax, data_role, cond_role,
                                                    std::nullopt, std::nullopt));
    }

    static PyModel load(const std::string& path) {
        PyModel out;
        out.model = model_from_checkpoint(load_checkpoint(path));
        return out;
    }

    bool conditional() const { return model.conditional(); }
    std::size_t data_dim() const { return model.net.config().data_dim; }
    std::size_t parameter_count() const { return model.net.parameter_count(); }
};

RLConfig rl_from_kwargs(const py::dict& kw) {
    RLConfig rl;
    for (auto item : kw) {
        std::string key = py::cast<std::string>(item.first);
        if (key == "lambda_x") rl.lambda_x = py::cast<double>(item.second);
        else if (key == "lambda_y") rl.lambda_y = py::cast<double>(item.second);
        else if (key == "k_reward") rl.k_reward = py::cast<int>(item.second);
        else if (key == "policy_updates") rl.policy_updates = py::cast<int>(item.second);
        else if (key == "ratio_clip") rl.ratio_clip = py::cast<double>(item.second);
        else if (key == "grad_accum") rl.grad_accum = py::cast<int>(item.second);
        else if (key == "grad_clip") rl.grad_clip = py::cast<double>(item.second);
        else if (key == "guidance_train") rl.guidance_train = py::cast<double>(item.second);
        else if (key == "buffer_capacity") rl.buffer_capacity = py::cast<std::size_t>(item.second);
        else if (key == "total_steps") rl.total_steps = py::cast<int>(item.second);
        else if (key == "batch_size") rl.batch_size = py::cast<std::size_t>(item.second);
        else if (key == "lr") rl.lr = py::cast<double>(item.second);
        else if (key == "joint_updates") rl.joint_updates = py::cast<int>(item.second);
        else if (key == "kl_batch") rl.kl_batch = py::cast<std::size_t>(item.second);
        else if (key == "sample_steps") rl.sample_steps = py::cast<int>(item.second);
        else if (key == "eta_train") rl.eta_train = py::cast<double>(item.second);
        else if (key == "use_baseline") rl.use_baseline = py::cast<bool>(item.second);
        else if (key == "baseline_momentum") rl.baseline_momentum = py::cast<double>(item.second);
        else if (key == "reward_weighting")
            rl.reward_weighting = parse_weighting(py::cast<std::string>(item.second));
        else if (key == "reward_stratified") rl.reward_stratified = py::cast<bool>(item.second);
        else throw DataError("unknown rl option '" + key + "'");
    }
    return rl;
}

struct PyCouplingPair {
    CouplingPair pair;

    static PyCouplingPair create(const PyModel& uncond_x, const PyModel& uncond_y,
                                 double cond_drop_prob) {
        PyCouplingPair out;
        out.pair = make_coupling_pair(uncond_x.model, uncond_y.model, cond_drop_prob);
        return out;
    }

    py::list train(DoubleArray data_x, DoubleArray data_y, const py::dict& rl_kwargs,
                   std::uint64_t seed) {
        Tensor dx = to_tensor(data_x);
        Tensor dy = to_tensor(data_y);
        RLConfig rl = rl_from_kwargs(rl_kwargs);
        Rng rng(seed);
        auto diag = mec_training_loop(pair, dx, dy, rl, rng);
        py::list out;
        for (const StepDiag& d : diag) {
            py::dict row;
            row["step"] = d.step;
            row["phase"] = d.phase;
            row["reward_mean"] = d.reward_mean;
            row["kl_term"] = d.kl_term;
            row["line4_loss"] = d.line4_loss;
            row["grad_norm"] = d.grad_norm;
            out.append(row);
        }
        return out;
    }

    py::array_t<double> translate(DoubleArray cond, const std::string& direction, int n_steps,
                                  double guidance, double eta, std::uint64_t seed) {
        Tensor c = to_tensor(cond);
        SampleConfig sc;
        sc.n_steps = n_steps;
        sc.guidance = guidance;
        sc.eta = eta;
        Rng rng(seed);
        if (direction == "y2x") {
            Denoiser net = pair.theta.net_with_ema();
            return to_array(sample(net, pair.theta.schedule, &c, sc, rng).x0);
        }
        if (direction == "x2y") {
            Denoiser net = pair.phi.net_with_ema();
            return to_array(sample(net, pair.phi.schedule, &c, sc, rng).x0);
        }
        throw DataError("direction must be 'x2y' or 'y2x'");
    }

    py::dict entropy(DoubleArray cond_data, int k_mc, int n_steps, double guidance, double eta,
                     std::uint64_t seed) {
        Tensor c = to_tensor(cond_data);
        SampleConfig sc;
        sc.n_steps = n_steps;
        sc.guidance = guidance;
        sc.eta = eta;
        Rng rng(seed);
        CouplingEntropy ce = estimate_coupling_entropy(pair, c, k_mc, sc, rng);
        py::dict out;
        out["conditional_entropy"] = ce.conditional_entropy;
        out["conditional_stderr"] = ce.conditional_stderr;
        out["joint_entropy"] = ce.joint_entropy;
        out["joint_stderr"] = ce.joint_stderr;
        out["mutual_information"] = ce.mutual_information;
        out["mi_stderr"] = ce.mi_stderr;
        out["note"] = ce.note;
        return out;
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Continuous minimum entropy coupling with cooperative diffusion models";

    py::register_exception<DataError>(m, "DataError");
    py::register_exception<NumericError>(m, "NumericError");

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_static("linear", &NoiseSchedule::linear, py::arg("T"), py::arg("beta_min") = 1e-4,
                    py::arg("beta_max") = 0.02)
        .def_readonly("T", &NoiseSchedule::T)
        .def("beta", &NoiseSchedule::beta)
        .def("alpha", &NoiseSchedule::alpha)
        .def("alpha_bar", &NoiseSchedule::alpha_bar);

    m.def("time_embedding", &time_embedding, py::arg("t"), py::arg("dim"), py::arg("T"));

    m.def(
        "forward_sample",
        [](DoubleArray x0, int t, DoubleArray eps, const NoiseSchedule& sched) {
            return to_array(forward_sample(to_tensor(x0), t, to_tensor(eps), sched));
        },
        py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

    m.def(
        "cfg_noise",
        [](DoubleArray c, DoubleArray u, double w) {
            return to_array(cfg_noise(to_tensor(c), to_tensor(u), w));
        },
        py::arg("eps_cond"), py::arg("eps_uncond"), py::arg("w"));

    m.def(
        "ddpm_reverse_step",
        [](DoubleArray x, int t, DoubleArray eps_hat, DoubleArray noise,
           const NoiseSchedule& sched) {
            return to_array(ddpm_reverse_step(to_tensor(x), t, to_tensor(eps_hat),
                                              to_tensor(noise), sched));
        },
        py::arg("x_t"), py::arg("t"), py::arg("eps_hat"), py::arg("noise"), py::arg("schedule"));

    m.def(
        "ddim_step",
        [](DoubleArray x, int t, int t_prev, DoubleArray eps_hat, double eta, DoubleArray noise,
           const NoiseSchedule& sched) {
            return to_array(ddim_step(to_tensor(x), t, t_prev, to_tensor(eps_hat), eta,
                                      to_tensor(noise), sched));
        },
        py::arg("x_t"), py::arg("t"), py::arg("t_prev"), py::arg("eps_hat"), py::arg("eta"),
        py::arg("noise"), py::arg("schedule"));

    py::class_<PyModel>(m, "Model")
        .def_static("pretrain", &PyModel::pretrain, py::arg("data"),
                    py::arg("hidden") = std::vector<std::size_t>{64, 64},
                    py::arg("time_embed") = 32, py::arg("T") = 1000, py::arg("beta_min") = 1e-4,
                    py::arg("beta_max") = 0.02, py::arg("steps") = 5000,
                    py::arg("batch_size") = 128, py::arg("lr") = 1e-3,
                    py::arg("ema_decay") = 0.999, py::arg("seed") = 0)
        .def_static("load", &PyModel::load, py::arg("path"))
        .def("save", &PyModel::save, py::arg("path"), py::arg("data_role") = "",
             py::arg("cond_role") = "")
        .def("sample", &PyModel::sample_py, py::arg("n") = 1, py::arg("cond") = py::none(),
             py::arg("n_steps") = 50, py::arg("guidance") = 0.0, py::arg("eta") = 1.0,
             py::arg("seed") = 0, py::arg("use_ema") = true)
        .def("estimate_nll", &PyModel::estimate_nll_py, py::arg("x0"),
             py::arg("cond") = py::none(), py::arg("k") = 3, py::arg("seed") = 0,
             py::arg("weighting") = "uniform", py::arg("stratified") = false)
        .def("denoising_loss", &PyModel::denoising_loss_py, py::arg("x0"),
             py::arg("cond") = py::none(), py::arg("drop_prob") = 0.1, py::arg("seed") = 0)
        .def_property_readonly("conditional", &PyModel::conditional)
        .def_property_readonly("data_dim", &PyModel::data_dim)
        .def_property_readonly("parameter_count", &PyModel::parameter_count);

    py::class_<PyCouplingPair>(m, "CouplingPair")
        .def_static("create", &PyCouplingPair::create, py::arg("uncond_x"), py::arg("uncond_y"),
                    py::arg("cond_drop_prob") = 0.1)
        .def("train", &PyCouplingPair::train, py::arg("data_x"), py::arg("data_y"),
             py::arg("rl") = py::dict(), py::arg("seed") = 0)
        .def("translate", &PyCouplingPair::translate, py::arg("cond"), py::arg("direction"),
             py::arg("n_steps") = 50, py::arg("guidance") = 7.0, py::arg("eta") = 1.0,
             py::arg("seed") = 0)
        .def("entropy", &PyCouplingPair::entropy, py::arg("cond_data"), py::arg("k_mc") = 16,
             py::arg("n_steps") = 50, py::arg("guidance") = 7.0, py::arg("eta") = 1.0,
             py::arg("seed") = 0);

    m.def(
        "foscttm",
        [](DoubleArray src, DoubleArray tgt, py::object corr) {
            PairedEval pe;
            pe.source = to_tensor(src);
            pe.target = to_tensor(tgt);
            if (corr.is_none()) {
                pe.correspondence.resize(pe.source.rows());
                for (std::size_t i = 0; i < pe.source.rows(); ++i) pe.correspondence[i] = i;
            } else {
                pe.correspondence = corr.cast<std::vector<std::size_t>>();
            }
            return foscttm(pe);
        },
        py::arg("source"), py::arg("target"), py::arg("correspondence") = py::none());

    m.def(
        "label_transfer_accuracy",
        [](DoubleArray src, std::vector<int> src_labels, DoubleArray tgt,
           std::vector<int> tgt_labels, int k) {
            LabeledEmbedding s, t;
            s.points = to_tensor(src);
            s.labels = std::move(src_labels);
            t.points = to_tensor(tgt);
            t.labels = std::move(tgt_labels);
            return label_transfer_accuracy(s, t, k);
        },
        py::arg("source"), py::arg("source_labels"), py::arg("target"), py::arg("target_labels"),
        py::arg("k") = 5);

    m.def(
        "neighborhood_type_accuracy",
        [](DoubleArray gen, DoubleArray ref, std::vector<int> ref_labels,
           std::vector<int> true_labels, int k) {
            LabeledEmbedding r;
            r.points = to_tensor(ref);
            r.labels = std::move(ref_labels);
            return neighborhood_type_accuracy(to_tensor(gen), r, true_labels, k);
        },
        py::arg("generated"), py::arg("reference"), py::arg("reference_labels"),
        py::arg("true_labels"), py::arg("k") = 5);

    m.def(
        "nn_project",
        [](DoubleArray gen, DoubleArray dataset) {
            return to_array(nn_project(to_tensor(gen), to_tensor(dataset)));
        },
        py::arg("generated"), py::arg("dataset"));

    m.def(
        "discrete_mec_oracle",
        [](std::vector<double> p_x, std::vector<double> p_y, double tol, int n_starts,
           std::uint64_t seed) {
            MecOracleResult res = discrete_mec_oracle({std::move(p_x), std::move(p_y)}, tol,
                                                      n_starts, seed);
            return py::make_tuple(to_array(res.coupling), res.entropy);
        },
        py::arg("p_x"), py::arg("p_y"), py::arg("tol") = 1e-9, py::arg("n_starts") = 64,
        py::arg("seed") = 0);

    m.def("shannon_entropy", &shannon_entropy, py::arg("p"));

    m.def(
        "quantize_median_grid",
        [](DoubleArray points, int cells) { return quantize_median_grid(to_tensor(points), cells); },
        py::arg("points"), py::arg("cells") = 4);

    m.def(
        "verify_gradient_swap",
        [](int m_, int n_, std::uint64_t seed, const std::string& kind) {
            Rng rng(seed);
            SwapFixture fixture = SwapFixture::Randomized;
            if (kind == "independent_uniform") fixture = SwapFixture::IndependentUniform;
            else if (kind == "violated") fixture = SwapFixture::Violated;
            else if (kind != "randomized") throw DataError("unknown fixture kind '" + kind + "'");
            return verify_gradient_swap(m_, n_, rng, fixture);
        },
        py::arg("m"), py::arg("n"), py::arg("seed") = 0, py::arg("kind") = "randomized");

    m.def(
        "synth_coupled",
        [](const std::string& generator, std::size_t dims, int components, double noise,
           double angle_deg, std::size_t n, std::uint64_t seed) {
            SyntheticSpec spec;
            spec.generator = generator;
            spec.dims = dims;
            spec.components = components;
            spec.noise = noise;
            spec.angle_deg = angle_deg;
            spec.n = n;
            spec.seed = seed;
            SynthResult res = synth_coupled(spec);
            py::dict out;
            out["x"] = to_array(res.x.points);
            out["y"] = to_array(res.y.points);
            out["x_labels"] = *res.x.labels;
            out["y_labels"] = *res.y.labels;
            out["correspondence"] = res.correspondence;
            return out;
        },
        py::arg("generator") = "gmm_rotate", py::arg("dims") = 2, py::arg("components") = 2,
        py::arg("noise") = 0.1, py::arg("angle_deg") = 90.0, py::arg("n") = 5000,
        py::arg("seed") = 0);

    py::class_<Normalizer>(m, "Normalizer")
        .def_static(
            "fit",
            [](DoubleArray data, double clip_sigmas) {
                return Normalizer::fit(to_tensor(data), clip_sigmas);
            },
            py::arg("data"), py::arg("clip_sigmas") = 5.0)
        .def("apply", [](const Normalizer& n, DoubleArray x) { return to_array(n.apply(to_tensor(x))); })
        .def("invert",
             [](const Normalizer& n, DoubleArray x) { return to_array(n.invert(to_tensor(x))); });
}
