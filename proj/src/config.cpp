#include "ddmec/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ddmec {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw DataError("config: key '" + key + "' needs a number, got '" + v + "'");
    }
    return out;
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw DataError("config: key '" + key + "' needs an integer, got '" + v + "'");
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw DataError("config: key '" + key + "' needs a boolean, got '" + v + "'");
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::string cur;
    for (char c : v + ",") {
        if (c == ',') {
            std::string t = trim(cur);
            if (!t.empty()) out.push_back(static_cast<std::size_t>(to_int(key, t)));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (out.empty()) throw DataError("config: key '" + key + "' needs a nonempty list");
    return out;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
    std::string v = trim(raw);
    if (key == "schedule.T") schedule_T = static_cast<int>(to_int(key, v));
    else if (key == "schedule.beta_min") schedule_beta_min = to_double(key, v);
    else if (key == "schedule.beta_max") schedule_beta_max = to_double(key, v);
    else if (key == "denoiser.hidden_dims") denoiser_hidden_dims = to_size_list(key, v);
    else if (key == "denoiser.time_embed_dim")
        denoiser_time_embed_dim = static_cast<std::size_t>(to_int(key, v));
    else if (key == "denoiser.cond_drop_prob") denoiser_cond_drop_prob = to_double(key, v);
    else if (key == "sample.n_steps") sample_n_steps = static_cast<int>(to_int(key, v));
    else if (key == "sample.guidance") sample_guidance = to_double(key, v);
    else if (key == "sample.eta") sample_eta = to_double(key, v);
    else if (key == "pretrain.steps") pretrain_steps = static_cast<int>(to_int(key, v));
    else if (key == "pretrain.batch_size")
        pretrain_batch_size = static_cast<std::size_t>(to_int(key, v));
    else if (key == "pretrain.lr") pretrain_lr = to_double(key, v);
    else if (key == "pretrain.ema_decay") pretrain_ema_decay = to_double(key, v);
    else if (key == "pretrain.grad_clip") pretrain_grad_clip = to_double(key, v);
    else if (key == "rl.lambda_x") rl.lambda_x = to_double(key, v);
    else if (key == "rl.lambda_y") rl.lambda_y = to_double(key, v);
    else if (key == "rl.k_reward") rl.k_reward = static_cast<int>(to_int(key, v));
    else if (key == "rl.policy_updates") rl.policy_updates = static_cast<int>(to_int(key, v));
    else if (key == "rl.ratio_clip") rl.ratio_clip = to_double(key, v);
    else if (key == "rl.grad_accum") rl.grad_accum = static_cast<int>(to_int(key, v));
    else if (key == "rl.grad_clip") rl.grad_clip = to_double(key, v);
    else if (key == "rl.guidance_train") rl.guidance_train = to_double(key, v);
    else if (key == "rl.buffer_capacity")
        rl.buffer_capacity = static_cast<std::size_t>(to_int(key, v));
    else if (key == "rl.total_steps") rl.total_steps = static_cast<int>(to_int(key, v));
    else if (key == "rl.batch_size") rl.batch_size = static_cast<std::size_t>(to_int(key, v));
    else if (key == "rl.lr") rl.lr = to_double(key, v);
    else if (key == "rl.joint_updates") rl.joint_updates = static_cast<int>(to_int(key, v));
    else if (key == "rl.kl_batch") rl.kl_batch = static_cast<std::size_t>(to_int(key, v));
    else if (key == "rl.sample_steps") rl.sample_steps = static_cast<int>(to_int(key, v));
    else if (key == "rl.eta_train") rl.eta_train = to_double(key, v);
    else if (key == "rl.use_baseline") rl.use_baseline = to_bool(key, v);
    else if (key == "rl.baseline_momentum") rl.baseline_momentum = to_double(key, v);
    else if (key == "rl.reward_weighting") {
        if (v == "uniform") rl.reward_weighting = NllWeighting::Uniform;
        else if (v == "likelihood") rl.reward_weighting = NllWeighting::Likelihood;
        else throw DataError("config: rl.reward_weighting must be 'uniform' or 'likelihood'");
    } else if (key == "rl.reward_stratified") rl.reward_stratified = to_bool(key, v);
    else if (key == "data.normalize") data_normalize = to_bool(key, v);
    else if (key == "data.clip_sigmas") data_clip_sigmas = to_double(key, v);
    else if (key == "eval.k_mc") eval_k_mc = static_cast<int>(to_int(key, v));
    else if (key == "eval.n_samples") eval_n_samples = static_cast<std::size_t>(to_int(key, v));
    else throw DataError("config: unknown key '" + key + "'");
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw DataError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

std::string RunConfig::dump() const {
    std::ostringstream os;
    os.precision(17);
    os << "schedule.T = " << schedule_T << "\n";
    os << "schedule.beta_min = " << schedule_beta_min << "\n";
    os << "schedule.beta_max = " << schedule_beta_max << "\n";
    os << "denoiser.hidden_dims = ";
    for (std::size_t i = 0; i < denoiser_hidden_dims.size(); ++i) {
        if (i) os << ",";
        os << denoiser_hidden_dims[i];
    }
    os << "\n";
    os << "denoiser.time_embed_dim = " << denoiser_time_embed_dim << "\n";
    os << "denoiser.cond_drop_prob = " << denoiser_cond_drop_prob << "\n";
    os << "sample.n_steps = " << sample_n_steps << "\n";
    os << "sample.guidance = " << sample_guidance << "\n";
    os << "sample.eta = " << sample_eta << "\n";
    os << "pretrain.steps = " << pretrain_steps << "\n";
    os << "pretrain.batch_size = " << pretrain_batch_size << "\n";
    os << "pretrain.lr = " << pretrain_lr << "\n";
    os << "pretrain.ema_decay = " << pretrain_ema_decay << "\n";
    os << "pretrain.grad_clip = " << pretrain_grad_clip << "\n";
    os << "rl.lambda_x = " << rl.lambda_x << "\n";
    os << "rl.lambda_y = " << rl.lambda_y << "\n";
    os << "rl.k_reward = " << rl.k_reward << "\n";
    os << "rl.policy_updates = " << rl.policy_updates << "\n";
    os << "rl.ratio_clip = " << rl.ratio_clip << "\n";
    os << "rl.grad_accum = " << rl.grad_accum << "\n";
    os << "rl.grad_clip = " << rl.grad_clip << "\n";
    os << "rl.guidance_train = " << rl.guidance_train << "\n";
    os << "rl.buffer_capacity = " << rl.buffer_capacity << "\n";
    os << "rl.total_steps = " << rl.total_steps << "\n";
    os << "rl.batch_size = " << rl.batch_size << "\n";
    os << "rl.lr = " << rl.lr << "\n";
    os << "rl.joint_updates = " << rl.joint_updates << "\n";
    os << "rl.kl_batch = " << rl.kl_batch << "\n";
    os << "rl.sample_steps = " << rl.sample_steps << "\n";
    os << "rl.eta_train = " << rl.eta_train << "\n";
    os << "rl.use_baseline = " << (rl.use_baseline ? "true" : "false") << "\n";
    os << "rl.baseline_momentum = " << rl.baseline_momentum << "\n";
    os << "rl.reward_weighting = "
       << (rl.reward_weighting == NllWeighting::Uniform ? "uniform" : "likelihood") << "\n";
    os << "rl.reward_stratified = " << (rl.reward_stratified ? "true" : "false") << "\n";
    os << "data.normalize = " << (data_normalize ? "true" : "false") << "\n";
    os << "data.clip_sigmas = " << data_clip_sigmas << "\n";
    os << "eval.k_mc = " << eval_k_mc << "\n";
    os << "eval.n_samples = " << eval_n_samples << "\n";
    return os.str();
}

}  // namespace ddmec
