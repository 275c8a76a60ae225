#include "ddmec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ddmec {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& s, std::size_t row, const std::string& col) {
    std::string t = trim(s);
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || p != t.data() + t.size()) {
        throw DataError("csv row " + std::to_string(row) + ": non-numeric value '" + s +
                        "' in column " + col);
    }
    return v;
}

}  // namespace

TabularDataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open csv file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("csv file is empty (no header): " + path);
    std::vector<std::string> header = split_csv_line(line);
    for (auto& h : header) h = trim(h);

    int label_col = -1, sublabel_col = -1;
    std::vector<std::size_t> feature_cols;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == "label") {
            label_col = static_cast<int>(c);
        } else if (header[c] == "sublabel") {
            sublabel_col = static_cast<int>(c);
        } else {
            feature_cols.push_back(c);
        }
    }

    std::vector<double> values;
    std::vector<int> labels, sublabels;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw DataError("csv row " + std::to_string(row) + ": expected " +
                            std::to_string(header.size()) + " columns, got " +
                            std::to_string(cells.size()));
        }
        for (std::size_t c : feature_cols) {
            double v = parse_double(cells[c], row, header[c]);
            if (!std::isfinite(v)) {
                throw DataError("csv row " + std::to_string(row) + ": non-finite value in column " +
                                header[c]);
            }
            values.push_back(v);
        }
        auto parse_label = [&](int c) {
            double v = parse_double(cells[static_cast<std::size_t>(c)], row,
                                    header[static_cast<std::size_t>(c)]);
            double r = std::round(v);
            if (!std::isfinite(v) || std::abs(v - r) > 1e-9) {
                throw DataError("csv row " + std::to_string(row) + ": label must be an integer");
            }
            return static_cast<int>(r);
        };
        if (label_col >= 0) labels.push_back(parse_label(label_col));
        if (sublabel_col >= 0) sublabels.push_back(parse_label(sublabel_col));
    }

    TabularDataset ds;
    ds.name = path;
    ds.points = Tensor({row, feature_cols.size()}, std::move(values));
    if (label_col >= 0) ds.labels = std::move(labels);
    if (sublabel_col >= 0) ds.sublabels = std::move(sublabels);
    return ds;
}

void save_csv(const std::string& path, const TabularDataset& data) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write csv file: " + path);
    std::size_t d = data.dim();
    for (std::size_t j = 0; j < d; ++j) {
        if (j) out << ",";
        out << "f" << j;
    }
    if (data.labels) out << (d ? "," : "") << "label";
    if (data.sublabels) out << ",sublabel";
    out << "\n";
    char buf[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (j) out << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", data.points.at(i, j));
            out << buf;
        }
        if (data.labels) out << (d ? "," : "") << (*data.labels)[i];
        if (data.sublabels) out << "," << (*data.sublabels)[i];
        out << "\n";
    }
    if (!out) throw DataError("error while writing csv file: " + path);
}

// ---------------------------------------------------------------------------
// Normalizer
// ---------------------------------------------------------------------------

Normalizer Normalizer::fit(const Tensor& data, double clip_sigmas) {
    if (!(clip_sigmas > 0.0)) throw DataError("normalizer: clip_sigmas must be > 0");
    std::size_t n = data.rows(), d = data.cols();
    if (n < 2) throw DataError("normalizer: need at least 2 rows");
    Normalizer norm;
    norm.clip_sigmas = clip_sigmas;
    norm.mean = Tensor::zeros({1, d});
    norm.std = Tensor::zeros({1, d});
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += data.at(i, j);
        double mu = s / static_cast<double>(n);
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double c = data.at(i, j) - mu;
            sq += c * c;
        }
        double sd = std::sqrt(sq / static_cast<double>(n));
        if (!(sd > 0.0)) {
            throw DataError("normalizer: feature " + std::to_string(j) + " is constant");
        }
        norm.mean.data[j] = mu;
        norm.std.data[j] = sd;
    }
    return norm;
}

Normalizer Normalizer::identity(std::size_t dim) {
    Normalizer norm;
    norm.mean = Tensor::zeros({1, dim});
    norm.std = Tensor::full({1, dim}, 1.0);
    norm.clip_sigmas = std::numeric_limits<double>::infinity();
    return norm;
}

Tensor Normalizer::apply(const Tensor& rows) const {
    if (rows.cols() != dim()) throw DataError("normalizer: dim mismatch");
    Tensor out = rows;
    std::size_t d = dim();
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double z = (rows.at(i, j) - mean.data[j]) / std.data[j];
            out.data[i * d + j] = std::clamp(z, -clip_sigmas, clip_sigmas);
        }
    }
    return out;
}

Tensor Normalizer::invert(const Tensor& rows) const {
    if (rows.cols() != dim()) throw DataError("normalizer: dim mismatch");
    Tensor out = rows;
    std::size_t d = dim();
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            out.data[i * d + j] = rows.at(i, j) * std.data[j] + mean.data[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

namespace {

Tensor rotation2(double angle_deg) {
    double a = angle_deg * 3.14159265358979323846 / 180.0;
    return Tensor::matrix(2, 2, {std::cos(a), std::sin(a), -std::sin(a), std::cos(a)});
    // row-vector convention: y = x * R
}

Tensor apply_map(const Tensor& x, const Tensor& w) {
    std::size_t n = x.rows(), d = x.cols(), m = w.cols();
    Tensor y = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            double xv = x.at(i, k);
            for (std::size_t j = 0; j < m; ++j) y.data[i * m + j] += xv * w.at(k, j);
        }
    }
    return y;
}

std::vector<std::size_t> shuffled_identity(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace

Tensor linear_map_matrix(std::size_t dims, double angle_deg) {
    Tensor w = Tensor::zeros({dims, dims});
    for (std::size_t j = 0; j < dims; ++j) w.at(j, j) = 1.0;
    for (std::size_t b = 0; 2 * b + 1 < dims; ++b) {
        double a = (angle_deg + 17.0 * static_cast<double>(b)) * 3.14159265358979323846 / 180.0;
        std::size_t i = 2 * b, k = 2 * b + 1;
        w.at(i, i) = std::cos(a);
        w.at(i, k) = std::sin(a);
        w.at(k, i) = -std::sin(a);
        w.at(k, k) = std::cos(a);
    }
    return w;
}

SynthResult synth_coupled(const SyntheticSpec& spec) {
    Rng rng(spec.seed);
    std::size_t n = spec.n;
    if (n == 0) throw DataError("synth: n must be positive");

    Tensor x, y_paired;
    std::vector<int> labels(n);

    if (spec.generator == "gmm_rotate" || spec.generator == "checkerboard") {
        if (spec.dims != 2) throw DataError("synth: " + spec.generator + " requires dims = 2");
        x = Tensor::zeros({n, 2});
        if (spec.generator == "gmm_rotate") {
            int C = spec.components;
            if (C < 1) throw DataError("synth: components must be >= 1");
            double radius = 3.0;
            double chord = (C == 1) ? 6.0 : 2.0 * radius * std::sin(3.14159265358979323846 / C);
            double sigma = std::min(0.5, chord / 6.0);
            for (std::size_t i = 0; i < n; ++i) {
                int c = static_cast<int>(rng.uniform_int(0, C - 1));
                double th = 2.0 * 3.14159265358979323846 * c / C;
                x.at(i, 0) = radius * std::cos(th) + sigma * rng.normal();
                x.at(i, 1) = radius * std::sin(th) + sigma * rng.normal();
                labels[i] = c;
            }
        } else {
            // black cells of a 4x4 board over [-2,2]^2
            std::vector<std::pair<int, int>> cells;
            for (int a = 0; a < 4; ++a) {
                for (int b = 0; b < 4; ++b) {
                    if ((a + b) % 2 == 0) cells.emplace_back(a, b);
                }
            }
            for (std::size_t i = 0; i < n; ++i) {
                auto c = static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(cells.size()) - 1));
                x.at(i, 0) = -2.0 + cells[c].first + rng.uniform();
                x.at(i, 1) = -2.0 + cells[c].second + rng.uniform();
                labels[i] = static_cast<int>(c);
            }
        }
        y_paired = apply_map(x, rotation2(spec.angle_deg));
    } else if (spec.generator == "linear_map") {
        std::size_t d = spec.dims;
        if (d < 1) throw DataError("synth: dims must be positive");
        x = Tensor::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                // per-coordinate asymmetric mixture; parameters vary with j
                double u = static_cast<double>(j + 1) / static_cast<double>(d + 1);
                double p = 0.55 + 0.3 * u;
                double lo = -(0.5 + 0.8 * u), hi = 1.0 + 1.2 * u;
                double s_lo = 0.35 + 0.15 * u, s_hi = 0.5 - 0.2 * u;
                bool low = rng.uniform() < p;
                x.at(i, j) = low ? lo + s_lo * rng.normal() : hi + s_hi * rng.normal();
            }
            labels[i] = (x.at(i, 0) > 0 ? 1 : 0) + (d > 1 && x.at(i, 1) > 0 ? 2 : 0);
        }
        y_paired = apply_map(x, linear_map_matrix(d, spec.angle_deg));
    } else {
        throw DataError("synth: unknown generator '" + spec.generator + "'");
    }

    if (spec.noise > 0.0) {
        for (double& v : y_paired.data) v += spec.noise * rng.normal();
    }

    std::vector<int> y_labels_paired = labels;
    if (spec.generator == "linear_map") {
        std::size_t d = spec.dims;
        for (std::size_t i = 0; i < n; ++i) {
            y_labels_paired[i] = (y_paired.at(i, 0) > 0 ? 1 : 0) +
                                 (d > 1 && y_paired.at(i, 1) > 0 ? 2 : 0);
        }
    }

    std::vector<std::size_t> perm = shuffled_identity(n, rng);
    SynthResult res;
    res.x.points = std::move(x);
    res.x.labels = labels;
    res.x.name = spec.generator + "_x";
    res.y.points = Tensor::zeros(y_paired.shape);
    res.y.labels = std::vector<int>(n);
    res.y.name = spec.generator + "_y";
    res.correspondence = perm;
    std::size_t dy = y_paired.cols();
    for (std::size_t i = 0; i < n; ++i) {
        std::memcpy(res.y.points.data.data() + perm[i] * dy, y_paired.data.data() + i * dy,
                    dy * sizeof(double));
        (*res.y.labels)[perm[i]] = y_labels_paired[i];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'D', 'M', 'E', 'C', '1'};
constexpr std::uint8_t kVersion = 1;

using json = nlohmann::json;

json normalizer_to_json(const Normalizer& n) {
    // JSON has no infinity; clip_sigmas <= 0 encodes "no clipping"
    double clip = std::isfinite(n.clip_sigmas) ? n.clip_sigmas : -1.0;
    return json{{"mean", n.mean.data}, {"std", n.std.data}, {"clip_sigmas", clip}};
}

Normalizer normalizer_from_json(const json& j) {
    Normalizer n;
    std::vector<double> mean = j.at("mean").get<std::vector<double>>();
    std::vector<double> sd = j.at("std").get<std::vector<double>>();
    n.mean = Tensor::row(mean);
    n.std = Tensor::row(sd);
    double clip = j.at("clip_sigmas").get<double>();
    n.clip_sigmas = clip > 0.0 ? clip : std::numeric_limits<double>::infinity();
    return n;
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_block(std::ofstream& out, const Tensor& t) {
    // raw little-endian float64; this code assumes a little-endian host
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_block(std::ifstream& in, const std::vector<std::size_t>& shape,
                  const std::string& what) {
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != t.numel() * sizeof(double)) {
        throw DataError("checkpoint: truncated file while reading " + what);
    }
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json meta;
    meta["kind"] = ckpt.kind;
    meta["data_role"] = ckpt.data_role;
    meta["cond_role"] = ckpt.cond_role;
    meta["steps_trained"] = ckpt.steps_trained;
    meta["schedule"] = {{"T", ckpt.T}, {"beta_min", ckpt.beta_min}, {"beta_max", ckpt.beta_max}};
    meta["ema_decay"] = ckpt.ema_decay;
    json dcfg;
    dcfg["data_dim"] = ckpt.config.data_dim;
    if (ckpt.config.cond_dim) dcfg["cond_dim"] = *ckpt.config.cond_dim;
    dcfg["hidden_dims"] = ckpt.config.hidden_dims;
    dcfg["time_embed_dim"] = ckpt.config.time_embed_dim;
    dcfg["cond_drop_prob"] = ckpt.config.cond_drop_prob;
    meta["denoiser"] = dcfg;
    if (ckpt.data_norm) meta["data_norm"] = normalizer_to_json(*ckpt.data_norm);
    if (ckpt.cond_norm) meta["cond_norm"] = normalizer_to_json(*ckpt.cond_norm);
    json plist = json::array();
    for (const auto& [name, t] : ckpt.params) {
        plist.push_back(json{{"name", name}, {"shape", t.shape}});
    }
    meta["params"] = plist;
    meta["has_ema"] = ckpt.ema.has_value();
    if (ckpt.adam) meta["adam"] = json{{"step", ckpt.adam->step}};

    std::string ms = meta.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kMagic, 5);
    out.put(static_cast<char>(kVersion));
    write_u32(out, static_cast<std::uint32_t>(ms.size()));
    out.write(ms.data(), static_cast<std::streamsize>(ms.size()));
    for (const auto& [name, t] : ckpt.params) write_block(out, t);
    if (ckpt.ema) {
        for (const Tensor& t : *ckpt.ema) write_block(out, t);
    }
    if (ckpt.adam) {
        for (const Tensor& t : ckpt.adam->m) write_block(out, t);
        for (const Tensor& t : ckpt.adam->v) write_block(out, t);
    }
    if (!out) throw DataError("error while writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[5];
    in.read(magic, 5);
    if (in.gcount() != 5) throw DataError("checkpoint: truncated file (magic): " + path);
    if (std::memcmp(magic, kMagic, 5) != 0) {
        throw DataError("checkpoint: magic mismatch (not a DMEC1 file): " + path);
    }
    int ver = in.get();
    if (ver == EOF) throw DataError("checkpoint: truncated file (version): " + path);
    if (ver != kVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(ver));
    }
    unsigned char lb[4];
    in.read(reinterpret_cast<char*>(lb), 4);
    if (in.gcount() != 4) throw DataError("checkpoint: truncated file (metadata length)");
    std::uint32_t mlen = static_cast<std::uint32_t>(lb[0]) | (static_cast<std::uint32_t>(lb[1]) << 8) |
                         (static_cast<std::uint32_t>(lb[2]) << 16) |
                         (static_cast<std::uint32_t>(lb[3]) << 24);
    std::string ms(mlen, '\0');
    in.read(ms.data(), mlen);
    if (static_cast<std::uint32_t>(in.gcount()) != mlen) {
        throw DataError("checkpoint: truncated file (metadata)");
    }
    json meta;
    try {
        meta = json::parse(ms);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: corrupt metadata: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.kind = meta.at("kind").get<std::string>();
        ckpt.data_role = meta.at("data_role").get<std::string>();
        ckpt.cond_role = meta.at("cond_role").get<std::string>();
        ckpt.steps_trained = meta.at("steps_trained").get<std::uint64_t>();
        ckpt.T = meta.at("schedule").at("T").get<int>();
        ckpt.beta_min = meta.at("schedule").at("beta_min").get<double>();
        ckpt.beta_max = meta.at("schedule").at("beta_max").get<double>();
        ckpt.ema_decay = meta.value("ema_decay", 0.999);
        const json& dcfg = meta.at("denoiser");
        ckpt.config.data_dim = dcfg.at("data_dim").get<std::size_t>();
        if (dcfg.contains("cond_dim")) ckpt.config.cond_dim = dcfg.at("cond_dim").get<std::size_t>();
        ckpt.config.hidden_dims = dcfg.at("hidden_dims").get<std::vector<std::size_t>>();
        ckpt.config.time_embed_dim = dcfg.at("time_embed_dim").get<std::size_t>();
        ckpt.config.cond_drop_prob = dcfg.at("cond_drop_prob").get<double>();
        if (meta.contains("data_norm")) ckpt.data_norm = normalizer_from_json(meta["data_norm"]);
        if (meta.contains("cond_norm")) ckpt.cond_norm = normalizer_from_json(meta["cond_norm"]);
        for (const json& p : meta.at("params")) {
            ckpt.params.emplace_back(p.at("name").get<std::string>(),
                                     Tensor::zeros(p.at("shape").get<std::vector<std::size_t>>()));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: metadata missing fields: ") + e.what());
    }

    for (auto& [name, t] : ckpt.params) t = read_block(in, t.shape, "param " + name);
    if (meta.at("has_ema").get<bool>()) {
        std::vector<Tensor> ema;
        for (const auto& [name, t] : ckpt.params) ema.push_back(read_block(in, t.shape, "ema " + name));
        ckpt.ema = std::move(ema);
    }
    if (meta.contains("adam")) {
        CheckpointAdamState st;
        st.step = meta["adam"].at("step").get<std::uint64_t>();
        for (const auto& [name, t] : ckpt.params) st.m.push_back(read_block(in, t.shape, "adam.m"));
        for (const auto& [name, t] : ckpt.params) st.v.push_back(read_block(in, t.shape, "adam.v"));
        ckpt.adam = std::move(st);
    }
    char extra;
    if (in.read(&extra, 1)) throw DataError("checkpoint: trailing bytes after declared blocks");
    return ckpt;
}

Checkpoint checkpoint_from_model(const DiffusionModel& model, double beta_min, double beta_max,
                                 const std::string& data_role, const std::string& cond_role,
                                 const std::optional<Normalizer>& data_norm,
                                 const std::optional<Normalizer>& cond_norm) {
    Checkpoint ckpt;
    ckpt.kind = model.conditional() ? "conditional" : "unconditional";
    ckpt.data_role = data_role;
    ckpt.cond_role = cond_role;
    ckpt.config = model.net.config();
    ckpt.T = model.schedule.T;
    ckpt.beta_min = beta_min;
    ckpt.beta_max = beta_max;
    ckpt.ema_decay = model.ema_decay;
    ckpt.steps_trained = model.steps_trained;
    ckpt.data_norm = data_norm;
    ckpt.cond_norm = cond_norm;
    for (const Parameter* p : model.net.parameters()) {
        ckpt.params.emplace_back(p->name, p->value);
    }
    ckpt.ema = model.ema;
    return ckpt;
}

DiffusionModel model_from_checkpoint(const Checkpoint& ckpt) {
    DiffusionModel model;
    Rng dummy(0);
    model.net = Denoiser(ckpt.config, dummy);
    auto params = model.net.parameters();
    if (params.size() != ckpt.params.size()) {
        throw DataError("checkpoint: parameter block count does not match architecture");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->name != ckpt.params[i].first ||
            params[i]->value.shape != ckpt.params[i].second.shape) {
            throw DataError("checkpoint: parameter mismatch at block '" + ckpt.params[i].first + "'");
        }
        params[i]->value = ckpt.params[i].second;
    }
    model.schedule = NoiseSchedule::linear(ckpt.T, ckpt.beta_min, ckpt.beta_max);
    model.ema_decay = ckpt.ema_decay;
    model.steps_trained = ckpt.steps_trained;
    if (ckpt.ema) {
        if (ckpt.ema->size() != params.size()) throw DataError("checkpoint: ema block count mismatch");
        model.ema = *ckpt.ema;
    }
    return model;
}

}  // namespace ddmec
