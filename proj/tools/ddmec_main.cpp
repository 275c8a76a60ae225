// ddmec command-line driver: synth / pretrain / couple / translate / evaluate.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ddmec/config.hpp"
#include "ddmec/data.hpp"
#include "ddmec/diffusion.hpp"
#include "ddmec/mec.hpp"
#include "ddmec/metrics.hpp"

namespace fs = std::filesystem;
using namespace ddmec;

namespace {

struct MetricRow {
    std::string metric;
    double value;
    double stderr_v;
    std::size_t n;
};

void emit_metrics(const std::vector<MetricRow>& rows, const std::string& out_path,
                  const std::string& note = "") {
    std::ostringstream os;
    os << "metric,value,stderr,n\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g", r.value, r.stderr_v);
        os << r.metric << "," << buf << "," << r.n << "\n";
    }
    std::cout << os.str();
    if (!note.empty()) std::cout << "# note: " << note << "\n";
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) throw DataError("cannot write metrics file: " + out_path);
        f << os.str();
    }
}

Normalizer fit_or_identity(const Tensor& points, bool normalize, double clip_sigmas) {
    if (normalize && points.rows() >= 2) return Normalizer::fit(points, clip_sigmas);
    return Normalizer::identity(points.cols());
}

Checkpoint load_conditional(const std::string& path, const std::string& direction) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.kind != "conditional") {
        throw DataError("checkpoint " + path + " is not a conditional model");
    }
    std::string want_data = (direction == "x2y") ? "y" : "x";
    std::string want_cond = (direction == "x2y") ? "x" : "y";
    if (ckpt.data_role != want_data || ckpt.cond_role != want_cond) {
        throw DataError("checkpoint direction mismatch: " + path + " models " + ckpt.data_role +
                        " given " + ckpt.cond_role + ", requested " + direction);
    }
    return ckpt;
}

void write_loss_csv(const std::string& path, const std::vector<LossPoint>& log) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write loss csv: " + path);
    f << "step,loss\n";
    char buf[32];
    for (const auto& p : log) {
        std::snprintf(buf, sizeof(buf), "%.17g", p.loss);
        f << p.step << "," << buf << "\n";
    }
}

// ---------------------------------------------------------------------------

int cmd_synth(const SyntheticSpec& spec, const std::string& out_x, const std::string& out_y,
              const std::string& out_corr) {
    SynthResult res = synth_coupled(spec);
    save_csv(out_x, res.x);
    save_csv(out_y, res.y);
    if (!out_corr.empty()) {
        std::ofstream f(out_corr);
        if (!f) throw DataError("cannot write correspondence csv: " + out_corr);
        f << "match\n";
        for (std::size_t m : res.correspondence) f << m << "\n";
    }
    std::cout << "synth: wrote " << res.x.size() << " samples per side\n";
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& data_path, const std::string& out_path,
                 const std::string& loss_path, std::uint64_t seed) {
    TabularDataset ds = load_csv(data_path);
    if (cfg.pretrain_steps > 0 && ds.size() == 0) {
        throw DataError("pretraining requires a nonempty dataset: " + data_path);
    }
    Normalizer norm = fit_or_identity(ds.points, cfg.data_normalize, cfg.data_clip_sigmas);
    Tensor train_data = ds.size() ? norm.apply(ds.points) : ds.points;

    Rng root(seed);
    Rng init_rng = root.child(1);
    Rng train_rng = root.child(2);
    DiffusionModel model;
    model.net = Denoiser(cfg.make_denoiser_config(ds.dim()), init_rng);
    model.schedule = cfg.make_schedule();
    model.ema_decay = cfg.pretrain_ema_decay;

    PretrainConfig pc;
    pc.steps = cfg.pretrain_steps;
    pc.batch_size = cfg.pretrain_batch_size;
    pc.lr = cfg.pretrain_lr;
    pc.ema_decay = cfg.pretrain_ema_decay;
    pc.grad_clip = cfg.pretrain_grad_clip;
    std::vector<LossPoint> log;
    if (pc.steps > 0) {
        train_unconditional(model, train_data, pc, train_rng, &log);
    } else {
        model.ema_init();
    }

    Checkpoint ckpt = checkpoint_from_model(model, cfg.schedule_beta_min, cfg.schedule_beta_max,
                                            "", "", norm, std::nullopt);
    save_checkpoint(out_path, ckpt);
    write_loss_csv(loss_path.empty() ? out_path + ".loss.csv" : loss_path, log);
    std::cout << "pretrain: " << pc.steps << " steps";
    if (!log.empty()) std::cout << ", final loss " << log.back().loss;
    std::cout << ", checkpoint " << out_path << "\n";
    return 0;
}

int cmd_couple(const RunConfig& cfg, const std::string& x_path, const std::string& y_path,
               const std::string& x_anchor_path, const std::string& y_anchor_path,
               const std::string& out_dir, std::uint64_t seed) {
    TabularDataset xs = load_csv(x_path);
    TabularDataset ys = load_csv(y_path);
    Checkpoint ax = load_checkpoint(x_anchor_path);
    Checkpoint ay = load_checkpoint(y_anchor_path);
    if (ax.kind != "unconditional" || ay.kind != "unconditional") {
        throw DataError("couple: anchors must be unconditional checkpoints");
    }
    if (ax.config.data_dim != xs.dim()) {
        throw DataError("couple: x anchor dim " + std::to_string(ax.config.data_dim) +
                        " != x data dim " + std::to_string(xs.dim()));
    }
    if (ay.config.data_dim != ys.dim()) {
        throw DataError("couple: y anchor dim " + std::to_string(ay.config.data_dim) +
                        " != y data dim " + std::to_string(ys.dim()));
    }
    Normalizer xn = ax.data_norm ? *ax.data_norm : Normalizer::identity(xs.dim());
    Normalizer yn = ay.data_norm ? *ay.data_norm : Normalizer::identity(ys.dim());
    Tensor xd = xn.apply(xs.points);
    Tensor yd = yn.apply(ys.points);

    DiffusionModel mx = model_from_checkpoint(ax);
    DiffusionModel my = model_from_checkpoint(ay);
    CouplingPair pair = make_coupling_pair(mx, my, cfg.denoiser_cond_drop_prob);

    fs::create_directories(out_dir);
    std::ofstream diag(fs::path(out_dir) / "diagnostics.csv");
    if (!diag) throw DataError("cannot write diagnostics csv in " + out_dir);
    diag << "step,phase,reward_mean,kl_term,line4_loss,grad_norm\n";
    char buf[160];
    Rng rng = Rng(seed).child(3);
    mec_training_loop(pair, xd, yd, cfg.rl, rng, [&](const StepDiag& d) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g\n", d.step, d.phase,
                      d.reward_mean, d.kl_term, d.line4_loss, d.grad_norm);
        diag << buf;
    });

    Checkpoint tc = checkpoint_from_model(pair.theta, ax.beta_min, ax.beta_max, "x", "y", xn, yn);
    Checkpoint pc = checkpoint_from_model(pair.phi, ay.beta_min, ay.beta_max, "y", "x", yn, xn);
    save_checkpoint((fs::path(out_dir) / "theta.ckpt").string(), tc);
    save_checkpoint((fs::path(out_dir) / "phi.ckpt").string(), pc);
    std::cout << "couple: " << cfg.rl.total_steps << " loop steps, checkpoints in " << out_dir
              << "\n";
    return 0;
}

int cmd_translate(const RunConfig& cfg, const std::string& ckpt_path, const std::string& input_path,
                  const std::string& direction, double guidance, int ddim_steps, double eta,
                  const std::string& project_path, std::uint64_t seed, const std::string& out_path) {
    Checkpoint ckpt = load_conditional(ckpt_path, direction);
    TabularDataset input = load_csv(input_path);
    if (!ckpt.config.cond_dim || input.dim() != *ckpt.config.cond_dim) {
        throw DataError("translate: input dim " + std::to_string(input.dim()) +
                        " != model cond dim");
    }
    if (input.size() == 0) throw DataError("translate: empty input");
    Normalizer cn = ckpt.cond_norm ? *ckpt.cond_norm : Normalizer::identity(input.dim());
    Normalizer dn = ckpt.data_norm ? *ckpt.data_norm : Normalizer::identity(ckpt.config.data_dim);
    Tensor cond = cn.apply(input.points);

    DiffusionModel model = model_from_checkpoint(ckpt);
    Denoiser net = model.net_with_ema();
    SampleConfig sc;
    sc.n_steps = ddim_steps > 0 ? ddim_steps : cfg.sample_n_steps;
    sc.guidance = guidance >= 0 ? guidance : cfg.sample_guidance;
    sc.eta = eta >= 0 ? eta : cfg.sample_eta;
    sc.seed = seed;
    Rng rng = Rng(seed).child(4);
    SampleResult res = sample(net, model.schedule, &cond, sc, rng);
    Tensor out = dn.invert(res.x0);

    if (!project_path.empty()) {
        TabularDataset proj = load_csv(project_path);
        if (proj.size() == 0) throw DataError("translate: projection dataset is empty");
        out = nn_project(out, proj.points);
    }
    TabularDataset out_ds;
    out_ds.points = std::move(out);
    save_csv(out_path, out_ds);
    std::cout << "translate: " << input.size() << " rows -> " << out_path << "\n";
    return 0;
}

std::vector<std::size_t> load_correspondence(const std::string& path, std::size_t n) {
    if (path.empty()) {
        std::vector<std::size_t> id(n);
        for (std::size_t i = 0; i < n; ++i) id[i] = i;
        return id;
    }
    TabularDataset ds = load_csv(path);
    if (ds.dim() != 1 || ds.size() != n) {
        throw DataError("correspondence csv must have one column and " + std::to_string(n) +
                        " rows");
    }
    std::vector<std::size_t> corr(n);
    for (std::size_t i = 0; i < n; ++i) {
        corr[i] = static_cast<std::size_t>(ds.points.at(i, 0));
    }
    return corr;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& metric, const std::string& source,
                 const std::string& target, const std::string& corr_path,
                 const std::string& generated, const std::string& reference, int k,
                 const std::string& theta_path, const std::string& phi_path,
                 const std::string& theta_anchor_path, const std::string& phi_anchor_path,
                 const std::string& cond_path, int grid, double guidance, int ddim_steps,
                 double eta, std::uint64_t seed, const std::string& out_path) {
    std::vector<MetricRow> rows;
    std::string note;
    if (metric == "foscttm") {
        TabularDataset s = load_csv(source), t = load_csv(target);
        PairedEval pe{s.points, t.points, load_correspondence(corr_path, s.size())};
        rows.push_back({"foscttm", foscttm(pe), 0.0, s.size()});
    } else if (metric == "label_transfer") {
        TabularDataset s = load_csv(source), t = load_csv(target);
        rows.push_back({"label_transfer", label_transfer_accuracy(s, t, k), 0.0, t.size()});
    } else if (metric == "celltype") {
        TabularDataset g = load_csv(generated), r = load_csv(reference);
        if (!g.labels) throw DataError("celltype: generated csv needs a label column");
        rows.push_back(
            {"celltype", neighborhood_type_accuracy(g.points, r, *g.labels, k), 0.0, g.size()});
    } else if (metric == "entropy") {
        Checkpoint tc = load_checkpoint(theta_path);
        Checkpoint pc = load_checkpoint(phi_path);
        Checkpoint ta = load_checkpoint(theta_anchor_path);
        Checkpoint pa = load_checkpoint(phi_anchor_path);
        CouplingPair pair;
        pair.theta = model_from_checkpoint(tc);
        pair.phi = model_from_checkpoint(pc);
        pair.theta_anchor = model_from_checkpoint(ta).net_with_ema();
        pair.phi_anchor = model_from_checkpoint(pa).net_with_ema();
        TabularDataset cond = load_csv(cond_path);
        Normalizer cn = tc.cond_norm ? *tc.cond_norm : Normalizer::identity(cond.dim());
        std::size_t n = std::min<std::size_t>(cfg.eval_n_samples, cond.size());
        Tensor cond_rows = Tensor::zeros({n, cond.dim()});
        for (std::size_t i = 0; i < n; ++i) cond_rows.set_row(i, cond.points.row_slice(i));
        cond_rows = cn.apply(cond_rows);
        SampleConfig sc;
        sc.n_steps = ddim_steps > 0 ? ddim_steps : cfg.sample_n_steps;
        sc.guidance = guidance >= 0 ? guidance : cfg.sample_guidance;
        sc.eta = eta >= 0 ? eta : cfg.sample_eta;
        Rng rng = Rng(seed).child(5);
        CouplingEntropy ce = estimate_coupling_entropy(pair, cond_rows, cfg.eval_k_mc, sc, rng);
        rows.push_back({"conditional_entropy", ce.conditional_entropy, ce.conditional_stderr, n});
        rows.push_back({"joint_entropy", ce.joint_entropy, ce.joint_stderr, n});
        rows.push_back({"mutual_information", ce.mutual_information, ce.mi_stderr, n});
        note = ce.note;
    } else if (metric == "oracle_gap") {
        Checkpoint tc = load_checkpoint(theta_path);
        if (tc.kind != "conditional") throw DataError("oracle_gap: --theta must be conditional");
        DiffusionModel theta = model_from_checkpoint(tc);
        Denoiser net = theta.net_with_ema();
        TabularDataset cond = load_csv(cond_path);
        Normalizer cn = tc.cond_norm ? *tc.cond_norm : Normalizer::identity(cond.dim());
        std::size_t n = std::min<std::size_t>(cfg.eval_n_samples, cond.size());
        Tensor cond_rows = Tensor::zeros({n, cond.dim()});
        for (std::size_t i = 0; i < n; ++i) cond_rows.set_row(i, cond.points.row_slice(i));
        cond_rows = cn.apply(cond_rows);
        SampleConfig sc;
        sc.n_steps = ddim_steps > 0 ? ddim_steps : cfg.sample_n_steps;
        sc.guidance = guidance >= 0 ? guidance : cfg.sample_guidance;
        sc.eta = eta >= 0 ? eta : cfg.sample_eta;
        Rng rng = Rng(seed).child(6);
        SampleResult gen = sample(net, theta.schedule, &cond_rows, sc, rng);
        QuantizedCoupling qc = empirical_quantized_coupling(gen.x0, cond_rows, grid);
        MecOracleResult oracle = discrete_mec_oracle({qc.p_x, qc.p_y});
        rows.push_back({"joint_entropy_quantized", qc.joint_entropy, 0.0, n});
        rows.push_back({"oracle_min_entropy", oracle.entropy, 0.0, n});
        rows.push_back({"oracle_gap", qc.joint_entropy - oracle.entropy, 0.0, n});
    } else {
        throw CLI::ValidationError("--metric",
                                   "unknown metric '" + metric +
                                       "' (foscttm|label_transfer|celltype|entropy|oracle_gap)");
    }
    emit_metrics(rows, out_path, note);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ddmec: continuous minimum entropy coupling with cooperative diffusion models"};
    app.require_subcommand(0, 1);

    bool print_defaults = false;
    app.add_flag("--print-config-defaults", print_defaults,
                 "Print every config key with its default value and exit");

    RunConfig cfg;
    std::string config_path;
    std::uint64_t seed = 0;

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic coupled dataset pair");
    SyntheticSpec spec;
    std::string out_x, out_y, out_corr;
    synth->add_option("--generator", spec.generator, "gmm_rotate | linear_map | checkerboard")
        ->capture_default_str();
    synth->add_option("--dims", spec.dims, "Data dimension")->capture_default_str();
    synth->add_option("--components", spec.components, "GMM component count")
        ->capture_default_str();
    synth->add_option("--noise", spec.noise, "Additive noise scale on Y")->capture_default_str();
    synth->add_option("--angle", spec.angle_deg, "Rotation / map angle in degrees")
        ->capture_default_str();
    synth->add_option("--n", spec.n, "Samples per side")->capture_default_str();
    synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
    synth->add_option("--out-x", out_x, "Output CSV for X")->required();
    synth->add_option("--out-y", out_y, "Output CSV for Y")->required();
    synth->add_option("--out-corr", out_corr, "Optional ground-truth correspondence CSV");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Train an unconditional model on one modality");
    std::string data_path, out_path, loss_path;
    int steps_override = -1;
    pre->add_option("--data", data_path, "Training CSV")->required();
    pre->add_option("--out", out_path, "Output checkpoint path")->required();
    pre->add_option("--steps", steps_override, "Training steps (default pretrain.steps)");
    pre->add_option("--config", config_path, "Config file (key = value lines)");
    pre->add_option("--seed", seed, "RNG seed")->capture_default_str();
    pre->add_option("--loss-csv", loss_path, "Loss curve CSV (default <out>.loss.csv)");

    // couple
    auto* cpl = app.add_subcommand("couple", "Fine-tune the cooperative conditional pair");
    std::string x_data, y_data, x_anchor, y_anchor, out_dir;
    int total_override = -1;
    cpl->add_option("--x-data", x_data, "X modality CSV")->required();
    cpl->add_option("--y-data", y_data, "Y modality CSV")->required();
    cpl->add_option("--x-anchor", x_anchor, "Pretrained unconditional X checkpoint")->required();
    cpl->add_option("--y-anchor", y_anchor, "Pretrained unconditional Y checkpoint")->required();
    cpl->add_option("--out-dir", out_dir, "Output directory")->required();
    cpl->add_option("--steps", total_override, "Loop steps (default rl.total_steps)");
    cpl->add_option("--config", config_path, "Config file");
    cpl->add_option("--seed", seed, "RNG seed")->capture_default_str();

    // translate
    auto* tr = app.add_subcommand("translate", "Sample the target modality conditioned on inputs");
    std::string ckpt_path, input_path, direction, project_path, tr_out;
    double guidance = -1.0, eta = -1.0;
    int ddim_steps = -1;
    tr->add_option("--ckpt", ckpt_path, "Conditional checkpoint")->required();
    tr->add_option("--input", input_path, "Input CSV (source modality)")->required();
    tr->add_option("--direction", direction, "x2y | y2x")
        ->required()
        ->check(CLI::IsMember({"x2y", "y2x"}));
    tr->add_option("--guidance", guidance, "Guidance scale (default sample.guidance)");
    tr->add_option("--ddim-steps", ddim_steps, "DDIM steps (default sample.n_steps)");
    tr->add_option("--eta", eta, "DDIM eta (default sample.eta)");
    tr->add_option("--project", project_path, "Project outputs onto this dataset CSV");
    tr->add_option("--seed", seed, "RNG seed")->capture_default_str();
    tr->add_option("--out", tr_out, "Output CSV")->required();
    tr->add_option("--config", config_path, "Config file");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Compute alignment / information metrics");
    std::string metric, source, target, corr_path, generated, reference;
    std::string theta_path, phi_path, theta_anchor_path, phi_anchor_path, cond_path, ev_out;
    int k = 5, grid = 4;
    ev->add_option("--metric", metric, "foscttm | label_transfer | celltype | entropy | oracle_gap")
        ->required();
    ev->add_option("--source", source, "Source points CSV (foscttm, label_transfer)");
    ev->add_option("--target", target, "Target points CSV (foscttm, label_transfer)");
    ev->add_option("--correspondence", corr_path, "True-match CSV (foscttm; default identity)");
    ev->add_option("--generated", generated, "Generated points CSV with labels (celltype)");
    ev->add_option("--reference", reference, "Reference labeled CSV (celltype)");
    ev->add_option("--k", k, "Neighbor count")->capture_default_str();
    ev->add_option("--theta", theta_path, "Conditional X|Y checkpoint (entropy, oracle_gap)");
    ev->add_option("--phi", phi_path, "Conditional Y|X checkpoint (entropy)");
    ev->add_option("--theta-anchor", theta_anchor_path, "Unconditional X checkpoint (entropy)");
    ev->add_option("--phi-anchor", phi_anchor_path, "Unconditional Y checkpoint (entropy)");
    ev->add_option("--cond-data", cond_path, "Conditioning CSV (entropy, oracle_gap)");
    ev->add_option("--grid", grid, "Quantization cells per modality (oracle_gap)")
        ->capture_default_str();
    ev->add_option("--guidance", guidance, "Guidance scale (default sample.guidance)");
    ev->add_option("--ddim-steps", ddim_steps, "DDIM steps (default sample.n_steps)");
    ev->add_option("--eta", eta, "DDIM eta (default sample.eta)");
    ev->add_option("--seed", seed, "RNG seed")->capture_default_str();
    ev->add_option("--out", ev_out, "Also write the metric CSV here");
    ev->add_option("--config", config_path, "Config file");

    app.footer("Config keys and defaults: ddmec --print-config-defaults");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;  // usage errors exit 1, --help exits 0
    }

    if (print_defaults) {
        std::cout << RunConfig{}.dump();
        return 0;
    }
    if (app.get_subcommands().empty()) {
        std::cout << app.help();
        return 0;
    }

    try {
        if (!config_path.empty()) cfg.load_file(config_path);
        if (steps_override >= 0) cfg.pretrain_steps = steps_override;
        if (total_override >= 0) cfg.rl.total_steps = total_override;

        if (synth->parsed()) return cmd_synth(spec, out_x, out_y, out_corr);
        if (pre->parsed()) return cmd_pretrain(cfg, data_path, out_path, loss_path, seed);
        if (cpl->parsed()) {
            return cmd_couple(cfg, x_data, y_data, x_anchor, y_anchor, out_dir, seed);
        }
        if (tr->parsed()) {
            return cmd_translate(cfg, ckpt_path, input_path, direction, guidance, ddim_steps, eta,
                                 project_path, seed, tr_out);
        }
        if (ev->parsed()) {
            return cmd_evaluate(cfg, metric, source, target, corr_path, generated, reference, k,
                                theta_path, phi_path, theta_anchor_path, phi_anchor_path,
                                cond_path, grid, guidance, ddim_steps, eta, seed, ev_out);
        }
    } catch (const CLI::Error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
