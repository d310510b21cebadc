#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "af/guidance.hpp"
#include "af/mixture.hpp"
#include "af/trainer.hpp"

namespace af {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fully resolved experiment description.
struct RunConfig {
    std::string experiment;
    std::string method;  // af | gan | fm
    std::uint64_t seed = 1;
    std::string out_dir = "runs";

    std::size_t eval_every = 200;
    std::size_t eval_samples = 8192;
    std::size_t eval_final_samples = 50000;
    double grid_lo = -3.0;
    double grid_hi = 3.0;
    std::size_t grid_points = 601;

    ProblemSpec problem;
    TrainConfig train;

    ClassifierTrainConfig classifier;
    std::size_t guidance_fm_steps = 3000;
    std::size_t fm_nfe = 64;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// raw key/value lines with consumption tracking; leftover keys are errors
struct Reader {
    std::map<std::string, std::string> kv;
    std::map<std::string, bool> used;

    static Reader parse_text(const std::string& text) {
        Reader r;
        std::stringstream ss(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            if (r.kv.count(key)) throw ConfigError("config: duplicate key " + key);
            r.kv[key] = value;
            r.used[key] = false;
        }
        return r;
    }

    bool has(const std::string& key) const { return kv.count(key) != 0; }

    std::string take(const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw ConfigError("config: missing required key " + key);
        used[key] = true;
        return it->second;
    }

    std::string take_or(const std::string& key, const std::string& dflt) {
        auto it = kv.find(key);
        if (it == kv.end()) return dflt;
        used[key] = true;
        return it->second;
    }

    double take_double(const std::string& key) { return to_double(key, take(key)); }
    double take_double_or(const std::string& key, double dflt) {
        return has(key) ? take_double(key) : dflt;
    }
    std::size_t take_size(const std::string& key) { return to_size(key, take(key)); }
    std::size_t take_size_or(const std::string& key, std::size_t dflt) {
        return has(key) ? take_size(key) : dflt;
    }
    bool take_bool_or(const std::string& key, bool dflt) {
        if (!has(key)) return dflt;
        const std::string v = take(key);
        if (v == "true") return true;
        if (v == "false") return false;
        throw ConfigError("config: key " + key + " expects true/false, got '" + v + "'");
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return d;
        } catch (...) {
            throw ConfigError("config: key " + key + " expects a number, got '" + v + "'");
        }
    }
    std::size_t to_size(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const unsigned long long u = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return static_cast<std::size_t>(u);
        } catch (...) {
            throw ConfigError("config: key " + key + " expects a nonnegative integer, got '" + v + "'");
        }
    }

    void reject_unused() const {
        for (const auto& [k, u] : used)
            if (!u) throw ConfigError("config: unknown key " + k);
    }

    void forbid(const std::string& key, const std::string& why) {
        if (has(key)) throw ConfigError("config: key " + key + " " + why);
    }
};

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(item, &pos));
            if (pos != item.size()) throw std::invalid_argument("");
        } catch (...) {
            throw ConfigError("config: key " + key + " has a bad number '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("config: key " + key + " is empty");
    return out;
}

inline MixtureSpec read_mixture(Reader& r, const std::string& prefix) {
    MixtureSpec m;
    m.dim = r.take_size_or(prefix + ".dim", 1);
    const std::size_t k = r.take_size(prefix + ".components");
    if (k == 0) throw ConfigError("config: " + prefix + ".components must be positive");
    for (std::size_t i = 0; i < k; ++i) {
        const std::string cp = prefix + ".comp" + std::to_string(i);
        MixtureComponent c;
        c.weight = k == 1 ? r.take_double_or(cp + ".weight", 1.0) : r.take_double(cp + ".weight");
        c.mean = parse_double_list(cp + ".mean", r.take(cp + ".mean"));
        c.std = parse_double_list(cp + ".std", r.take(cp + ".std"));
        if (c.mean.size() != m.dim || c.std.size() != m.dim)
            throw ConfigError("config: " + cp + " mean/std length must equal " + prefix + ".dim");
        m.components.push_back(std::move(c));
    }
    try {
        m.validate();
    } catch (const std::exception& e) {
        throw ConfigError("config: " + prefix + ": " + e.what());
    }
    return m;
}

inline void write_mixture(std::ostream& os, const std::string& prefix, const MixtureSpec& m) {
    os << prefix << ".dim = " << m.dim << "\n";
    os << prefix << ".components = " << m.components.size() << "\n";
    for (std::size_t i = 0; i < m.components.size(); ++i) {
        const std::string cp = prefix + ".comp" + std::to_string(i);
        const auto& c = m.components[i];
        os << cp << ".weight = " << fmt_double(c.weight) << "\n";
        os << cp << ".mean = ";
        for (std::size_t d = 0; d < c.mean.size(); ++d) os << (d ? "," : "") << fmt_double(c.mean[d]);
        os << "\n" << cp << ".std = ";
        for (std::size_t d = 0; d < c.std.size(); ++d) os << (d ? "," : "") << fmt_double(c.std[d]);
        os << "\n";
    }
}

inline std::vector<std::pair<double, double>> parse_pairs(const std::string& key, const std::string& v) {
    std::vector<std::pair<double, double>> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        const auto colon = item.find(':');
        if (colon == std::string::npos)
            throw ConfigError("config: key " + key + " expects s:t pairs, got '" + item + "'");
        try {
            out.emplace_back(std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
        } catch (...) {
            throw ConfigError("config: key " + key + " has a bad pair '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("config: key " + key + " is empty");
    return out;
}

}  // namespace config_detail

inline RunConfig parse_config(const std::string& text) {
    using namespace config_detail;
    Reader r = Reader::parse_text(text);

    RunConfig cfg;
    cfg.experiment = r.take("experiment");
    cfg.method = r.take("method");
    if (cfg.method != "af" && cfg.method != "gan" && cfg.method != "fm")
        throw ConfigError("config: method must be af, gan or fm");
    cfg.seed = r.take_size_or("seed", 1);
    cfg.out_dir = r.take_or("out_dir", "runs");

    cfg.eval_every = r.take_size_or("eval.every", 200);
    cfg.eval_samples = r.take_size_or("eval.samples", 8192);
    cfg.eval_final_samples = r.take_size_or("eval.final_samples", 50000);
    cfg.grid_lo = r.take_double_or("eval.grid_lo", -3.0);
    cfg.grid_hi = r.take_double_or("eval.grid_hi", 3.0);
    cfg.grid_points = r.take_size_or("eval.grid_points", 601);

    // distributions
    const std::size_t num_classes = r.take_size_or("classes.count", 0);
    if (num_classes == 1) throw ConfigError("config: classes.count must be 0 or >= 2");
    if (num_classes >= 2) {
        r.forbid("data.components", "must be absent for conditional runs (marginal is derived)");
        ConditionalDataset ds;
        for (std::size_t c = 0; c < num_classes; ++c) {
            const std::string cp = "class" + std::to_string(c);
            ds.class_weights.push_back(r.take_double(cp + ".weight"));
            ds.class_mixtures.push_back(read_mixture(r, cp));
        }
        try {
            ds.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: classes: ") + e.what());
        }
        cfg.problem.classes = ds;
        cfg.problem.data = ds.marginal();
    } else {
        cfg.problem.data = read_mixture(r, "data");
    }
    cfg.problem.prior = read_mixture(r, "prior");
    if (cfg.problem.prior.dim != cfg.problem.data.dim)
        throw ConfigError("config: prior.dim must equal the data dimension");

    // method-specific key validation (fail-closed on contradictions)
    if (cfg.method == "fm") {
        for (const std::string k :
             {"train.lambda_gp", "train.lambda_cp", "train.eps_fd", "train.gp_batch_ratio",
              "train.lambda_ot.initial", "train.lambda_ot.final", "train.lambda_ot.shape",
              "train.lambda_ot.duration", "train.grad_norm", "train.grad_norm_target", "train.param",
              "train.repeat", "train.ema_reload", "train.d_reload", "train.augment", "guidance.mode",
              "guidance.lambda"})
            r.forbid(k, "is not allowed with method = fm");
    }
    if (cfg.method == "gan")
        for (const std::string k : {"train.lambda_ot.initial", "train.lambda_ot.final", "train.lambda_ot.shape",
                                    "train.lambda_ot.duration"})
            r.forbid(k, "is not allowed with method = gan (the transport term is identically zero)");

    TrainConfig& t = cfg.train;
    t.steps = r.take_size_or("train.steps", 3000);
    t.batch = r.take_size_or("train.batch", 128);
    if (t.batch == 0 || t.steps == 0) throw ConfigError("config: train.steps and train.batch must be positive");
    t.lr_g = r.take_double_or("train.lr_g", 1e-3);
    t.lr_d = r.take_double_or("train.lr_d", 1e-3);
    t.beta1 = r.take_double_or("train.beta1", 0.0);
    t.beta2 = r.take_double_or("train.beta2", 0.9);
    t.weight_decay = r.take_double_or("train.weight_decay", 0.01);
    t.weights.lambda_gp = r.take_double_or("train.lambda_gp", 0.25);
    t.weights.lambda_cp = r.take_double_or("train.lambda_cp", 0.01);
    t.weights.eps_fd = r.take_double_or("train.eps_fd", 0.01);
    t.weights.delta = r.take_double_or("train.delta", 0.001);
    t.weights.gp_batch_ratio = r.take_double_or("train.gp_batch_ratio", 0.25);
    t.ot.initial = r.take_double_or("train.lambda_ot.initial", cfg.method == "gan" ? 0.0 : 0.2);
    t.ot.final_value = r.take_double_or("train.lambda_ot.final", cfg.method == "gan" ? 0.0 : 0.01);
    const std::string shape = r.take_or("train.lambda_ot.shape", cfg.method == "gan" ? "constant" : "cosine");
    if (shape != "cosine" && shape != "constant")
        throw ConfigError("config: train.lambda_ot.shape must be cosine or constant");
    t.ot.cosine = shape == "cosine";
    t.ot.duration = r.take_size_or("train.lambda_ot.duration", t.steps);
    t.regime = regime_from_name(r.take_or("train.regime", "single"));
    if (r.has("train.pairs")) t.pairs = config_detail::parse_pairs("train.pairs", r.take("train.pairs"));
    if (t.regime != Regime::discrete && !t.pairs.empty())
        throw ConfigError("config: train.pairs requires train.regime = discrete");
    t.param_kind = param_kind_from_name(r.take_or("train.param", "residual"));
    t.repeat_count = r.take_size_or("train.repeat", 1);
    if (t.repeat_count == 0) throw ConfigError("config: train.repeat must be at least 1");
    if (t.repeat_count > 1 && t.regime != Regime::single_step)
        throw ConfigError("config: train.repeat > 1 is a single-step construction");
    t.seed = cfg.seed;
    t.ema_decay = r.take_double_or("train.ema", 0.9999);
    t.ema_reload = r.take_bool_or("train.ema_reload", false);
    t.ema_reload_patience = r.take_size_or("train.ema_reload_patience", 10);
    t.d_reload = r.take_bool_or("train.d_reload", false);
    t.d_snapshot_every = r.take_size_or("train.d_snapshot_every", 250);
    t.d_snapshot_ring = r.take_size_or("train.d_snapshot_ring", 8);
    t.d_stall_gap = r.take_double_or("train.d_stall_gap", 4.0);
    t.d_stall_steps = r.take_size_or("train.d_stall_steps", 200);
    t.grad_norm = r.take_bool_or("train.grad_norm", true);
    t.grad_norm_target = r.take_double_or("train.grad_norm_target", 1.0);
    const std::string aug = r.take_or("train.augment", "none");
    if (aug == "none")
        t.augment = AugmentKind::none;
    else if (aug == "jitter")
        t.augment = AugmentKind::jitter;
    else
        throw ConfigError("config: train.augment must be none or jitter");
    t.augment_jitter_std = r.take_double_or("train.augment_jitter_std", 0.05);
    t.hidden = r.take_size_or("net.hidden", 64);
    t.hidden_layers = r.take_size_or("net.layers", 3);
    t.time_feats = r.take_size_or("net.time_feats", 8);

    GuidanceConfig& g = t.guidance;
    g.mode = cg_mode_from_name(r.take_or("guidance.mode", "off"));
    g.lambda_cg = r.take_double_or("guidance.lambda", 0.0);
    g.t_lo = r.take_double_or("guidance.t_lo", 0.0);
    g.t_hi = r.take_double_or("guidance.t_hi", 0.1);
    if (g.t_lo > g.t_hi || g.t_lo < 0.0 || g.t_hi > 1.0)
        throw ConfigError("config: guidance timestep range must satisfy 0 <= t_lo <= t_hi <= 1");
    if (r.has("guidance.t_set"))
        g.t_set = config_detail::parse_double_list("guidance.t_set", r.take("guidance.t_set"));
    if (g.mode != CgMode::off && cfg.problem.num_classes() < 2)
        throw ConfigError("config: guidance requires a conditional dataset (classes.count >= 2)");
    if (g.lambda_cg < 0.0) throw ConfigError("config: guidance.lambda must be nonnegative");

    cfg.classifier.steps = r.take_size_or("guidance.classifier_steps", 1500);
    cfg.classifier.batch = r.take_size_or("guidance.classifier_batch", 128);
    cfg.classifier.lr = r.take_double_or("guidance.classifier_lr", 1e-3);
    cfg.classifier.hidden = t.hidden;
    cfg.classifier.hidden_layers = t.hidden_layers;
    cfg.classifier.time_feats = t.time_feats;
    cfg.guidance_fm_steps = r.take_size_or("guidance.fm_steps", 3000);
    cfg.fm_nfe = r.take_size_or("fm.nfe", 64);
    if (cfg.fm_nfe == 0) throw ConfigError("config: fm.nfe must be positive");

    if (cfg.method == "gan") t = make_gan_config(t);
    try {
        t.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    r.reject_unused();
    return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
    using namespace config_detail;
    std::ostringstream os;
    os << "experiment = " << cfg.experiment << "\n";
    os << "method = " << cfg.method << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    os << "eval.every = " << cfg.eval_every << "\n";
    os << "eval.samples = " << cfg.eval_samples << "\n";
    os << "eval.final_samples = " << cfg.eval_final_samples << "\n";
    os << "eval.grid_lo = " << fmt_double(cfg.grid_lo) << "\n";
    os << "eval.grid_hi = " << fmt_double(cfg.grid_hi) << "\n";
    os << "eval.grid_points = " << cfg.grid_points << "\n";

    if (cfg.problem.classes) {
        const auto& ds = *cfg.problem.classes;
        os << "classes.count = " << ds.num_classes() << "\n";
        for (std::size_t c = 0; c < ds.num_classes(); ++c) {
            const std::string cp = "class" + std::to_string(c);
            os << cp << ".weight = " << fmt_double(ds.class_weights[c]) << "\n";
            write_mixture(os, cp, ds.class_mixtures[c]);
        }
    } else {
        write_mixture(os, "data", cfg.problem.data);
    }
    write_mixture(os, "prior", cfg.problem.prior);

    const TrainConfig& t = cfg.train;
    os << "train.steps = " << t.steps << "\n";
    os << "train.batch = " << t.batch << "\n";
    os << "train.lr_g = " << fmt_double(t.lr_g) << "\n";
    os << "train.lr_d = " << fmt_double(t.lr_d) << "\n";
    os << "train.beta1 = " << fmt_double(t.beta1) << "\n";
    os << "train.beta2 = " << fmt_double(t.beta2) << "\n";
    os << "train.weight_decay = " << fmt_double(t.weight_decay) << "\n";
    if (cfg.method != "fm") {
        os << "train.lambda_gp = " << fmt_double(t.weights.lambda_gp) << "\n";
        os << "train.lambda_cp = " << fmt_double(t.weights.lambda_cp) << "\n";
        os << "train.eps_fd = " << fmt_double(t.weights.eps_fd) << "\n";
        os << "train.gp_batch_ratio = " << fmt_double(t.weights.gp_batch_ratio) << "\n";
        if (cfg.method != "gan") {
            os << "train.lambda_ot.initial = " << fmt_double(t.ot.initial) << "\n";
            os << "train.lambda_ot.final = " << fmt_double(t.ot.final_value) << "\n";
            os << "train.lambda_ot.shape = " << (t.ot.cosine ? "cosine" : "constant") << "\n";
            os << "train.lambda_ot.duration = " << t.ot.duration << "\n";
        }
        os << "train.grad_norm = " << (t.grad_norm ? "true" : "false") << "\n";
        os << "train.grad_norm_target = " << fmt_double(t.grad_norm_target) << "\n";
        os << "train.param = " << param_kind_name(t.param_kind) << "\n";
        os << "train.repeat = " << t.repeat_count << "\n";
        os << "train.ema_reload = " << (t.ema_reload ? "true" : "false") << "\n";
        os << "train.ema_reload_patience = " << t.ema_reload_patience << "\n";
        os << "train.d_reload = " << (t.d_reload ? "true" : "false") << "\n";
        os << "train.d_snapshot_every = " << t.d_snapshot_every << "\n";
        os << "train.d_snapshot_ring = " << t.d_snapshot_ring << "\n";
        os << "train.d_stall_gap = " << fmt_double(t.d_stall_gap) << "\n";
        os << "train.d_stall_steps = " << t.d_stall_steps << "\n";
        os << "train.augment = " << (t.augment == AugmentKind::none ? "none" : "jitter") << "\n";
        os << "train.augment_jitter_std = " << fmt_double(t.augment_jitter_std) << "\n";
    }
    os << "train.delta = " << fmt_double(t.weights.delta) << "\n";
    os << "train.regime = " << regime_name(t.regime) << "\n";
    if (!t.pairs.empty()) {
        os << "train.pairs = ";
        for (std::size_t i = 0; i < t.pairs.size(); ++i)
            os << (i ? "," : "") << fmt_double(t.pairs[i].first) << ":" << fmt_double(t.pairs[i].second);
        os << "\n";
    }
    os << "train.ema = " << fmt_double(t.ema_decay) << "\n";
    os << "net.hidden = " << t.hidden << "\n";
    os << "net.layers = " << t.hidden_layers << "\n";
    os << "net.time_feats = " << t.time_feats << "\n";

    if (cfg.method != "fm") {
        os << "guidance.mode = " << cg_mode_name(t.guidance.mode) << "\n";
        os << "guidance.lambda = " << fmt_double(t.guidance.lambda_cg) << "\n";
        os << "guidance.t_lo = " << fmt_double(t.guidance.t_lo) << "\n";
        os << "guidance.t_hi = " << fmt_double(t.guidance.t_hi) << "\n";
        if (!t.guidance.t_set.empty()) {
            os << "guidance.t_set = ";
            for (std::size_t i = 0; i < t.guidance.t_set.size(); ++i)
                os << (i ? "," : "") << fmt_double(t.guidance.t_set[i]);
            os << "\n";
        }
        os << "guidance.classifier_steps = " << cfg.classifier.steps << "\n";
        os << "guidance.classifier_batch = " << cfg.classifier.batch << "\n";
        os << "guidance.classifier_lr = " << fmt_double(cfg.classifier.lr) << "\n";
        os << "guidance.fm_steps = " << cfg.guidance_fm_steps << "\n";
    }
    os << "fm.nfe = " << cfg.fm_nfe << "\n";
    return os.str();
}

}  // namespace af
