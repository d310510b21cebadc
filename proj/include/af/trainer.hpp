#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "af/grad_norm.hpp"
#include "af/guidance.hpp"
#include "af/losses.hpp"
#include "af/metrics.hpp"
#include "af/mixture.hpp"
#include "af/net.hpp"
#include "af/optim.hpp"

namespace af {

enum class Regime { single_step, discrete, any_step };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::single_step: return "single";
        case Regime::discrete: return "discrete";
        case Regime::any_step: return "anystep";
    }
    return "?";
}

inline Regime regime_from_name(const std::string& s) {
    if (s == "single") return Regime::single_step;
    if (s == "discrete") return Regime::discrete;
    if (s == "anystep") return Regime::any_step;
    throw std::invalid_argument("unknown timestep regime: " + s);
}

struct OtSchedule {
    double initial = 0.2;
    double final_value = 0.01;
    bool cosine = true;  // false = constant at initial
    std::size_t duration = 0;
};

inline double ot_schedule_value(const OtSchedule& s, std::size_t step) {
    if (!s.cosine || s.duration == 0) return s.initial;
    const double frac = std::min(static_cast<double>(step) / static_cast<double>(s.duration), 1.0);
    return s.final_value + (s.initial - s.final_value) * 0.5 * (1.0 + std::cos(M_PI * frac));
}

struct LossWeights {
    double lambda_gp = 0.25;
    double lambda_cp = 0.01;
    double eps_fd = 0.01;
    double delta = 0.001;
    double gp_batch_ratio = 0.25;
};

struct GuidanceConfig {
    CgMode mode = CgMode::off;
    double lambda_cg = 0.0;
    double t_lo = 0.0;
    double t_hi = 0.1;
    std::vector<double> t_set;  // multi-step: target timesteps that receive guidance
};

enum class AugmentKind { none, jitter };

struct TrainConfig {
    LossWeights weights;
    OtSchedule ot;
    double lr_g = 1e-3;
    double lr_d = 1e-3;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double weight_decay = 0.01;
    std::size_t batch = 128;
    std::size_t steps = 3000;
    Regime regime = Regime::single_step;
    std::vector<std::pair<double, double>> pairs;  // discrete (s, t), t < s
    ParamKind param_kind = ParamKind::residual;
    std::size_t repeat_count = 1;
    GuidanceConfig guidance;
    std::uint64_t seed = 1;
    double ema_decay = 0.9999;
    bool ema_reload = false;
    std::size_t ema_reload_patience = 10;
    bool d_reload = false;
    std::size_t d_snapshot_every = 250;
    std::size_t d_snapshot_ring = 8;
    double d_stall_gap = 4.0;
    std::size_t d_stall_steps = 200;
    bool grad_norm = true;
    double grad_norm_target = 1.0;
    AugmentKind augment = AugmentKind::none;
    double augment_jitter_std = 0.05;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 3;
    std::size_t time_feats = 8;

    void validate() const {
        if (ot.initial < ot.final_value || ot.final_value < 0.0)
            throw std::invalid_argument("config: lambda_ot schedule must satisfy initial >= final >= 0");
        if (weights.lambda_gp < 0 || weights.lambda_cp < 0)
            throw std::invalid_argument("config: loss weights must be nonnegative");
        if (weights.eps_fd <= 0) throw std::invalid_argument("config: fd eps must be positive");
        if (weights.delta <= 0) throw std::invalid_argument("config: delta must be positive");
        if (weights.gp_batch_ratio <= 0 || weights.gp_batch_ratio > 1)
            throw std::invalid_argument("config: gp batch ratio must be in (0,1]");
        if (regime == Regime::discrete) {
            if (pairs.empty()) throw std::invalid_argument("config: discrete regime needs timestep pairs");
            for (const auto& [s, t] : pairs)
                if (!(t < s) || s > 1.0 || t < 0.0)
                    throw std::invalid_argument("config: discrete pairs must satisfy 0 <= t < s <= 1");
        }
    }
};

// What a run trains on.
struct ProblemSpec {
    MixtureSpec data;  // marginal data distribution (evaluation target)
    MixtureSpec prior;
    std::optional<ConditionalDataset> classes;

    std::size_t num_classes() const { return classes ? classes->num_classes() : 0; }
    std::size_t dim() const { return data.dim; }
};

// --- timestep sampling -------------------------------------------------

inline void sample_timesteps(Regime regime, const std::vector<std::pair<double, double>>& pairs,
                             std::size_t count, Rng& rng, std::vector<double>& s, std::vector<double>& t) {
    s.resize(count);
    t.resize(count);
    switch (regime) {
        case Regime::single_step:
            std::fill(s.begin(), s.end(), 1.0);
            std::fill(t.begin(), t.end(), 0.0);
            break;
        case Regime::discrete: {
            if (pairs.empty()) throw std::invalid_argument("sample_timesteps: empty pair set");
            for (std::size_t i = 0; i < count; ++i) {
                const auto& p = pairs[rng.below(pairs.size())];
                s[i] = p.first;
                t[i] = p.second;
            }
            break;
        }
        case Regime::any_step:
            for (std::size_t i = 0; i < count; ++i) {
                s[i] = rng.uniform();
                t[i] = rng.uniform() * s[i];
            }
            break;
    }
}

// --- batches -------------------------------------------------------------

struct Batch {
    Tensor x;
    Tensor z_src, z_tgt;
    Tensor noise_r1, noise_r2;
    std::vector<int> cls;  // empty when unconditional
    std::vector<double> s, t;
    Tensor z_cg;                // fresh noise for flow-based guidance, optional
    std::vector<double> t_cg;   // guidance timesteps, optional

    void validate() const {
        const std::size_t rows = x.rows();
        if (z_src.rows() != rows || z_tgt.rows() != rows || noise_r1.rows() != rows || noise_r2.rows() != rows)
            throw std::invalid_argument("batch: row counts differ");
        if (s.size() != rows || t.size() != rows) throw std::invalid_argument("batch: timestep rows missing");
        if (!cls.empty() && cls.size() != rows) throw std::invalid_argument("batch: class ids incomplete");
        for (std::size_t i = 0; i < rows; ++i)
            if (!(0.0 <= t[i] && t[i] <= s[i] && s[i] <= 1.0))
                throw std::invalid_argument("batch: rows must satisfy 0 <= t <= s <= 1");
    }
};

inline Batch make_batch(const ProblemSpec& problem, const TrainConfig& cfg, std::size_t count, Rng& rng) {
    Batch b;
    if (problem.classes) {
        auto [x, cls] = problem.classes->sample_labeled(count, rng);
        b.x = std::move(x);
        b.cls = std::move(cls);
    } else {
        b.x = sample(problem.data, count, rng);
    }
    b.z_src = sample(problem.prior, count, rng);
    b.z_tgt = sample(problem.prior, count, rng);
    b.noise_r1 = rng.normal_matrix(count, problem.dim());
    b.noise_r2 = rng.normal_matrix(count, problem.dim());
    sample_timesteps(cfg.regime, cfg.pairs, count, rng, b.s, b.t);
    if (cfg.guidance.mode == CgMode::flow || cfg.guidance.mode == CgMode::implicit) {
        b.z_cg = sample(problem.prior, count, rng);
        b.t_cg.resize(count);
        for (double& t : b.t_cg) t = rng.uniform(cfg.guidance.t_lo, cfg.guidance.t_hi);
    }
    b.validate();
    return b;
}

// --- networks -------------------------------------------------------------

inline Network make_generator_net(const TrainConfig& cfg, std::size_t dim, std::size_t num_classes, Rng& rng) {
    MlpSpec spec;
    spec.data_dim = dim;
    spec.out_dim = dim;
    spec.hidden = cfg.hidden;
    spec.hidden_layers = cfg.hidden_layers;
    spec.num_classes = num_classes;
    spec.time_inputs = cfg.regime == Regime::single_step ? 0 : 2;
    spec.time_feats = cfg.time_feats;
    spec.repeat_count = cfg.repeat_count;
    spec.act = Act::gelu;
    Network net = make_mlp(spec);
    init_uniform_fanin(net, rng);
    zero_final_layer(net);  // residual parameterization starts at the identity map
    return net;
}

inline Network make_discriminator_net(const TrainConfig& cfg, std::size_t dim, std::size_t num_classes,
                                      Rng& rng) {
    MlpSpec spec;
    spec.data_dim = dim;
    spec.out_dim = 1;
    spec.hidden = cfg.hidden;
    spec.hidden_layers = cfg.hidden_layers;
    spec.num_classes = num_classes;
    spec.time_inputs = cfg.regime == Regime::single_step ? 0 : 1;
    spec.time_feats = cfg.time_feats;
    spec.act = Act::gelu;
    Network net = make_mlp(spec);
    init_uniform_fanin(net, rng);
    return net;
}

// --- run state -------------------------------------------------------------

struct DSnapshot {
    std::vector<Tensor> params;
    AdamW opt;
    long taken_at_step = 0;
};

struct RunState {
    Network g, d;
    AdamW opt_g, opt_d;
    EmaWeights ema;
    GradNormState grad_norm;
    long step = 0;
    std::deque<DSnapshot> d_snapshots;

    static RunState init(const ProblemSpec& problem, const TrainConfig& cfg) {
        RunState st;
        Rng rng_g = Rng::stream(cfg.seed, 101);
        Rng rng_d = Rng::stream(cfg.seed, 102);
        st.g = make_generator_net(cfg, problem.dim(), problem.num_classes(), rng_g);
        st.d = make_discriminator_net(cfg, problem.dim(), problem.num_classes(), rng_d);
        st.opt_g.lr = cfg.lr_g;
        st.opt_g.beta1 = cfg.beta1;
        st.opt_g.beta2 = cfg.beta2;
        st.opt_g.weight_decay = cfg.weight_decay;
        st.opt_g.attach(st.g);
        st.opt_d = st.opt_g;
        st.opt_d.lr = cfg.lr_d;
        st.opt_d.attach(st.d);
        st.ema.decay = cfg.ema_decay;
        st.ema.attach(st.g);
        st.grad_norm.ema_decay = cfg.beta2;
        st.grad_norm.target_scale = cfg.grad_norm_target;
        return st;
    }
};

inline void take_d_snapshot(RunState& st, std::size_t ring_capacity) {
    DSnapshot snap;
    st.d.for_each_param([&](const Tensor& p) { snap.params.push_back(p); });
    snap.opt = st.opt_d;
    snap.taken_at_step = st.step;
    st.d_snapshots.push_back(std::move(snap));
    while (st.d_snapshots.size() > ring_capacity) st.d_snapshots.pop_front();
}

// online G <- EMA shadow; optimizer moments reset
inline void ema_reload(RunState& st) {
    st.ema.copy_to(st.g);
    st.opt_g.reset_moments();
}

inline void d_reload(RunState& st, std::size_t snapshot_index) {
    if (snapshot_index >= st.d_snapshots.size()) throw std::invalid_argument("d_reload: missing snapshot");
    const DSnapshot& snap = st.d_snapshots[snapshot_index];
    std::size_t i = 0;
    st.d.for_each_param([&](Tensor& p) { p.data = snap.params[i++].data; });
    st.opt_d = snap.opt;
}

// --- augmentation hook ------------------------------------------------------

// Applies the same random transform to the real/fake pair. The provided
// jitter transform adds shared per-row Gaussian noise; its gradient w.r.t.
// the fake sample is the identity.
inline void apply_augment(AugmentKind kind, double jitter_std, Tensor& real, Tensor& fake, Rng& rng) {
    if (kind == AugmentKind::none) return;
    for (std::size_t i = 0; i < real.size(); ++i) {
        const double eta = rng.normal() * jitter_std;
        real.data[i] += eta;
        fake.data[i] += eta;
    }
}

// --- training step ------------------------------------------------------------

struct StepLosses {
    double adv = 0.0;
    double r1 = 0.0;
    double r2 = 0.0;
    double cp = 0.0;
    double ot = 0.0;  // unweighted transport term
    double cg = 0.0;  // unweighted guidance term
    double total = 0.0;
    double lambda_ot = 0.0;
    double logit_gap = 0.0;  // mean(D_real - D_fake), dis mode only
};

struct NonFiniteLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class StepMode { dis, gen };

namespace detail_trainer {

struct Prepared {
    Tensor x_s, x_t;
    Tensor g_out, pred;
    Tensor real_aug, pred_aug;
    std::vector<double> w;
    Trace g_trace;
    bool traced = false;
};

inline std::optional<Tensor> generator_times(const Network& g, const Batch& b) {
    if (g.time_inputs == 0 || g.repeat_count > 1) return std::nullopt;
    Tensor t = Tensor::matrix(b.x.rows(), 2);
    for (std::size_t i = 0; i < b.x.rows(); ++i) {
        t.at(i, 0) = b.s[i];
        t.at(i, 1) = b.t[i];
    }
    return t;
}

inline std::optional<Tensor> discriminator_times(const Network& d, const Batch& b) {
    if (d.time_inputs == 0) return std::nullopt;
    Tensor t = Tensor::matrix(b.x.rows(), 1);
    for (std::size_t i = 0; i < b.x.rows(); ++i) t.at(i, 0) = b.t[i];
    return t;
}

inline Prepared prepare(const RunState& st, const Batch& b, const TrainConfig& cfg, Rng& rng, bool trace_g) {
    Prepared p;
    p.x_s = interp(b.x, b.z_src, b.s);
    p.x_t = interp(b.x, b.z_tgt, b.t);
    const auto times = generator_times(st.g, b);
    const std::vector<int>* cls = b.cls.empty() ? nullptr : &b.cls;
    if (trace_g) {
        auto [out, tr] = st.g.forward_traced(p.x_s, cls, times ? &*times : nullptr);
        p.g_out = std::move(out);
        p.g_trace = std::move(tr);
        p.traced = true;
    } else {
        p.g_out = st.g.forward_value(p.x_s, cls, times ? &*times : nullptr);
    }
    p.pred = generator_parameterize(p.g_out, p.x_s, b.s, b.t, cfg.param_kind);
    p.real_aug = p.x_t;
    p.pred_aug = p.pred;
    apply_augment(cfg.augment, cfg.augment_jitter_std, p.real_aug, p.pred_aug, rng);
    p.w.resize(b.x.rows());
    for (std::size_t i = 0; i < b.x.rows(); ++i) p.w[i] = timestep_weight(b.s[i], b.t[i], cfg.weights.delta);
    return p;
}

inline std::vector<double> logits_of(const Tensor& t) { return column(t, 0); }

inline Tensor head_rows(const Tensor& t, std::size_t m) {
    Tensor out = Tensor::matrix(m, t.cols());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < t.cols(); ++c) out.at(i, c) = t.at(i, c);
    return out;
}

}  // namespace detail_trainer

// Discriminator update: relativistic loss + finite-difference R1/R2 on the
// leading ceil(ratio*batch) rows + logit centering. Returns D parameter
// gradients without touching G.
struct DisStepOut {
    StepLosses losses;
    Grads d_grads;
};

inline DisStepOut dis_step(const RunState& st, const Batch& b, const TrainConfig& cfg, Rng& rng) {
    using namespace detail_trainer;
    b.validate();
    Prepared p = prepare(st, b, cfg, rng, /*trace_g=*/false);
    const std::size_t rows = b.x.rows();
    const std::size_t m = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(cfg.weights.gp_batch_ratio * static_cast<double>(rows))));
    const double eps = cfg.weights.eps_fd;

    Tensor real_gp = head_rows(p.real_aug, m);
    Tensor pred_gp = head_rows(p.pred_aug, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < real_gp.cols(); ++c) {
            real_gp.at(i, c) += eps * b.noise_r1.at(i, c);
            pred_gp.at(i, c) += eps * b.noise_r2.at(i, c);
        }

    const std::vector<int>* cls = b.cls.empty() ? nullptr : &b.cls;
    std::vector<int> cls_m;
    if (cls) cls_m.assign(b.cls.begin(), b.cls.begin() + static_cast<long>(m));
    const auto dt = discriminator_times(st.d, b);
    std::optional<Tensor> dt_m;
    if (dt) dt_m = head_rows(*dt, m);

    auto [lr_t, tr_r] = st.d.forward_traced(p.real_aug, cls, dt ? &*dt : nullptr);
    auto [lp_t, tr_p] = st.d.forward_traced(p.pred_aug, cls, dt ? &*dt : nullptr);
    auto [lrg_t, tr_rg] = st.d.forward_traced(real_gp, cls ? &cls_m : nullptr, dt_m ? &*dt_m : nullptr);
    auto [lpg_t, tr_pg] = st.d.forward_traced(pred_gp, cls ? &cls_m : nullptr, dt_m ? &*dt_m : nullptr);
    const auto r = logits_of(lr_t);
    const auto pf = logits_of(lp_t);
    const auto rg = logits_of(lrg_t);
    const auto pg = logits_of(lpg_t);

    DisStepOut out;
    const double bsz = static_cast<double>(rows);
    const double md = static_cast<double>(m);
    const double lambda_gp = cfg.weights.lambda_gp;
    const double lambda_cp = cfg.weights.lambda_cp;

    Tensor up_r = Tensor::matrix(rows, 1);
    Tensor up_p = Tensor::matrix(rows, 1);
    Tensor up_rg = Tensor::matrix(m, 1);
    Tensor up_pg = Tensor::matrix(m, 1);

    for (std::size_t i = 0; i < rows; ++i) {
        const double u = r[i] - pf[i];
        out.losses.adv += f_relativistic(u);
        out.losses.logit_gap += u;
        const double cpv = r[i] + pf[i];
        out.losses.cp += lambda_cp * cpv * cpv;
        const double sg = sigmoid(-u);
        up_r.at(i, 0) = -sg / bsz + 2.0 * lambda_cp * cpv / bsz;
        up_p.at(i, 0) = sg / bsz + 2.0 * lambda_cp * cpv / bsz;
    }
    for (std::size_t i = 0; i < m; ++i) {
        const double scale = lambda_gp * p.w[i] / (eps * eps);
        const double d1 = rg[i] - r[i];
        const double d2 = pg[i] - pf[i];
        out.losses.r1 += scale * d1 * d1;
        out.losses.r2 += scale * d2 * d2;
        up_rg.at(i, 0) = 2.0 * scale * d1 / md;
        up_pg.at(i, 0) = 2.0 * scale * d2 / md;
        up_r.at(i, 0) += -2.0 * scale * d1 / md;
        up_p.at(i, 0) += -2.0 * scale * d2 / md;
    }
    out.losses.adv /= bsz;
    out.losses.cp /= bsz;
    out.losses.r1 /= md;
    out.losses.r2 /= md;
    out.losses.logit_gap /= bsz;
    out.losses.total = out.losses.adv + out.losses.r1 + out.losses.r2 + out.losses.cp;

    out.d_grads = st.d.zero_grads();
    auto accumulate = [&](const Trace& tr, const Tensor& up) {
        auto [grads, input_grad] = st.d.backward_traced(tr, up);
        for (std::size_t i = 0; i < grads.w.size(); ++i) {
            for (std::size_t k = 0; k < grads.w[i].size(); ++k) out.d_grads.w[i].data[k] += grads.w[i].data[k];
            for (std::size_t k = 0; k < grads.b[i].size(); ++k) out.d_grads.b[i].data[k] += grads.b[i].data[k];
        }
    };
    accumulate(tr_r, up_r);
    accumulate(tr_p, up_p);
    accumulate(tr_rg, up_rg);
    accumulate(tr_pg, up_pg);
    return out;
}

// Guidance context handed to the generator step.
struct GuidanceContext {
    const Classifier* classifier = nullptr;
    const VelocityModel* velocity = nullptr;
};

struct GenStepOut {
    StepLosses losses;
    Grads g_grads;
};

// Generator update: relativistic loss through the gradient-normalization
// hook, plus the scheduled transport term and optional guidance.
inline GenStepOut gen_step(RunState& st, const Batch& b, const TrainConfig& cfg, const GuidanceContext& gctx,
                           Rng& rng) {
    using namespace detail_trainer;
    b.validate();
    Prepared p = prepare(st, b, cfg, rng, /*trace_g=*/true);
    const std::size_t rows = b.x.rows();
    const double bsz = static_cast<double>(rows);
    const double n = static_cast<double>(b.x.cols());
    const std::vector<int>* cls = b.cls.empty() ? nullptr : &b.cls;
    const auto dt = discriminator_times(st.d, b);

    // adversarial term; only the fake branch feeds gradient back into G
    auto [lp_t, tr_p] = st.d.forward_traced(p.pred_aug, cls, dt ? &*dt : nullptr);
    Tensor lr_t = st.d.forward_value(p.real_aug, cls, dt ? &*dt : nullptr);
    const auto pf = logits_of(lp_t);
    const auto r = logits_of(lr_t);

    GenStepOut out;
    Tensor up_fake = Tensor::matrix(rows, 1);
    for (std::size_t i = 0; i < rows; ++i) {
        const double u = pf[i] - r[i];
        out.losses.adv += f_relativistic(u);
        up_fake.at(i, 0) = -sigmoid(-u) / bsz;
    }
    out.losses.adv /= bsz;

    auto [d_unused, adv_grad] = st.d.backward_traced(tr_p, up_fake, /*want_param_grads=*/false);
    if (cfg.grad_norm) adv_grad = st.grad_norm.backward(adv_grad);
    // augmentation is additive, so its backward is the identity

    // transport term
    const double lambda_ot = ot_schedule_value(cfg.ot, static_cast<std::size_t>(st.step));
    out.losses.lambda_ot = lambda_ot;
    out.losses.ot = ot_loss(p.pred, p.x_s, b.s, b.t,
                            cfg.weights.delta,
                            cfg.regime == Regime::single_step ? OtMode::single_step : OtMode::multi_step);

    Tensor grad_pred = adv_grad;
    for (std::size_t i = 0; i < rows; ++i) {
        const double wr = cfg.regime == Regime::single_step ? 1.0 : p.w[i];
        double* g = grad_pred.row(i);
        const double* pr = p.pred.row(i);
        const double* xs = p.x_s.row(i);
        for (std::size_t c = 0; c < b.x.cols(); ++c)
            g[c] += lambda_ot * 2.0 * (pr[c] - xs[c]) / (n * wr * bsz);
    }

    // guidance term
    if (gctx.classifier || gctx.velocity) {
        const GuidanceConfig& gc = cfg.guidance;
        if (gc.mode != CgMode::off && gc.lambda_cg != 0.0) {
            GuidanceLoss gl;
            if (cfg.regime != Regime::single_step) {
                if (!gctx.classifier) throw std::invalid_argument("gen_step: multi-step guidance needs a classifier");
                gl = multistep_cg_loss(*gctx.classifier, p.pred, b.cls, b.t, gc.t_set);
            } else if (gc.mode == CgMode::implicit) {
                if (!gctx.velocity) throw std::invalid_argument("gen_step: implicit guidance needs a velocity model");
                if (!b.z_cg.rank2() || b.z_cg.rows() != rows || b.t_cg.size() != rows)
                    throw std::invalid_argument("gen_step: batch lacks guidance noise");
                gl = implicit_cfg_loss(*gctx.velocity, p.pred, b.cls, b.z_cg, b.t_cg);
            } else {
                if (!gctx.classifier) throw std::invalid_argument("gen_step: guidance needs a classifier");
                if (gc.mode == CgMode::simple) {
                    gl = cg_loss_simple(*gctx.classifier, p.pred, b.cls);
                } else {
                    if (!b.z_cg.rank2() || b.z_cg.rows() != rows || b.t_cg.size() != rows)
                        throw std::invalid_argument("gen_step: batch lacks guidance noise");
                    gl = cg_loss(*gctx.classifier, p.pred, b.cls, b.z_cg, b.t_cg);
                }
            }
            out.losses.cg = gl.loss;
            for (std::size_t i = 0; i < grad_pred.size(); ++i)
                grad_pred.data[i] += gc.lambda_cg * gl.grad_gx.data[i];
        }
    }

    out.losses.total = out.losses.adv + lambda_ot * out.losses.ot + cfg.guidance.lambda_cg * out.losses.cg;

    // through the generator parameterization into g
    Tensor g_out_grad = grad_pred;
    if (cfg.param_kind == ParamKind::residual) {
        for (std::size_t i = 0; i < rows; ++i) {
            const double step = -(b.s[i] - b.t[i]);
            double* g = g_out_grad.row(i);
            for (std::size_t c = 0; c < b.x.cols(); ++c) g[c] *= step;
        }
    }
    auto [grads, input_grad] = st.g.backward_traced(p.g_trace, g_out_grad);
    out.g_grads = std::move(grads);
    return out;
}

// One alternation half-step. dis mode updates only D, gen mode updates only
// G (then its EMA). Non-finite losses abort with a diagnostic.
inline StepLosses train_step(RunState& st, const Batch& b, const TrainConfig& cfg, StepMode mode,
                             const GuidanceContext& gctx, Rng& rng) {
    if (mode == StepMode::dis) {
        DisStepOut out = dis_step(st, b, cfg, rng);
        if (!std::isfinite(out.losses.total))
            throw NonFiniteLossError("non-finite discriminator loss at step " + std::to_string(st.step));
        st.opt_d.step(st.d, out.d_grads);
        return out.losses;
    }
    GenStepOut out = gen_step(st, b, cfg, gctx, rng);
    if (!std::isfinite(out.losses.total))
        throw NonFiniteLossError("non-finite generator loss at step " + std::to_string(st.step));
    st.opt_g.step(st.g, out.g_grads);
    st.ema.update(st.g);
    return out.losses;
}

// --- sampling -------------------------------------------------------------

// Validates a sampling schedule against the regime a model was trained for.
inline void validate_schedule(const std::vector<double>& schedule, Regime regime,
                              const std::vector<std::pair<double, double>>& pairs) {
    if (schedule.size() < 2 || schedule.front() != 1.0 || schedule.back() != 0.0)
        throw std::invalid_argument("schedule: must run from 1 to 0");
    for (std::size_t i = 0; i + 1 < schedule.size(); ++i)
        if (!(schedule[i] > schedule[i + 1])) throw std::invalid_argument("schedule: must be strictly decreasing");
    if (regime == Regime::single_step && schedule.size() != 2)
        throw std::invalid_argument("schedule: model was trained single-step; only the (1,0) schedule is valid");
    if (regime == Regime::discrete) {
        for (std::size_t i = 0; i + 1 < schedule.size(); ++i) {
            bool seen = false;
            for (const auto& [ps, pt] : pairs)
                if (std::abs(ps - schedule[i]) < 1e-9 && std::abs(pt - schedule[i + 1]) < 1e-9) seen = true;
            if (!seen)
                throw std::invalid_argument("schedule: pair (" + std::to_string(schedule[i]) + "," +
                                            std::to_string(schedule[i + 1]) + ") was not trained");
        }
    }
}

inline std::vector<double> uniform_schedule(std::size_t nfe) {
    std::vector<double> s(nfe + 1);
    for (std::size_t i = 0; i <= nfe; ++i)
        s[i] = 1.0 - static_cast<double>(i) / static_cast<double>(nfe);
    s.back() = 0.0;
    return s;
}

inline Tensor sample_generator(const Network& g, ParamKind kind, Regime regime,
                               const std::vector<std::pair<double, double>>& pairs, const Tensor& start,
                               const std::vector<double>& schedule, const std::vector<int>* cls = nullptr) {
    validate_schedule(schedule, regime, pairs);
    Tensor x = start;
    const std::size_t rows = x.rows();
    for (std::size_t i = 0; i + 1 < schedule.size(); ++i) {
        std::vector<double> s(rows, schedule[i]), t(rows, schedule[i + 1]);
        std::optional<Tensor> times;
        if (g.time_inputs > 0 && g.repeat_count == 1) {
            times = Tensor::matrix(rows, 2);
            for (std::size_t k = 0; k < rows; ++k) {
                times->at(k, 0) = s[k];
                times->at(k, 1) = t[k];
            }
        }
        Tensor g_out = g.forward_value(x, cls, times ? &*times : nullptr);
        x = generator_parameterize(g_out, x, s, t, kind);
    }
    return x;
}

// --- flow-matching baseline ---------------------------------------------------

struct FmTrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 128;
    double lr = 1e-3;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 3;
    std::size_t time_feats = 8;
    double label_dropout = 0.1;  // only used when conditional
    std::uint64_t seed = 1;
};

inline VelocityModel train_baseline_fm(const ProblemSpec& problem, const FmTrainConfig& cfg) {
    Rng rng_init = Rng::stream(cfg.seed, 111);
    Rng rng_data = Rng::stream(cfg.seed, 112);

    const std::size_t num_classes = problem.num_classes();
    VelocityModel vm;
    MlpSpec spec;
    spec.data_dim = problem.dim();
    spec.out_dim = problem.dim();
    spec.hidden = cfg.hidden;
    spec.hidden_layers = cfg.hidden_layers;
    spec.time_inputs = 1;
    spec.time_feats = cfg.time_feats;
    spec.num_classes = num_classes > 0 ? num_classes + 1 : 0;  // last index = null label
    vm.net = make_mlp(spec);
    vm.has_null_class = num_classes > 0;
    init_uniform_fanin(vm.net, rng_init);

    AdamW opt;
    opt.lr = cfg.lr;
    opt.attach(vm.net);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tensor x;
        std::vector<int> cls;
        if (problem.classes) {
            auto [xs, cs] = problem.classes->sample_labeled(cfg.batch, rng_data);
            x = std::move(xs);
            cls = std::move(cs);
            for (int& c : cls)
                if (rng_data.uniform() < cfg.label_dropout) c = static_cast<int>(vm.null_class());
        } else {
            x = sample(problem.data, cfg.batch, rng_data);
        }
        Tensor z = sample(problem.prior, cfg.batch, rng_data);
        std::vector<double> t(cfg.batch);
        for (double& v : t) v = rng_data.uniform();
        Tensor xt = interp(x, z, t);

        Tensor tcol = Tensor::matrix(cfg.batch, 1);
        for (std::size_t i = 0; i < cfg.batch; ++i) tcol.at(i, 0) = t[i];
        const std::vector<int>* cp = cls.empty() ? nullptr : &cls;
        auto [v_out, trace] = vm.net.forward_traced(xt, cp, &tcol);

        Tensor up = v_out;
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            double* u = up.row(i);
            const double* vo = v_out.row(i);
            const double* xr = x.row(i);
            const double* zr = z.row(i);
            for (std::size_t c = 0; c < x.cols(); ++c)
                u[c] = 2.0 * (vo[c] - (zr[c] - xr[c])) / static_cast<double>(cfg.batch);
        }
        auto [grads, ignored] = vm.net.backward_traced(trace, up);
        opt.step(vm.net, grads);
    }
    return vm;
}

// Euler integration of dx/dt = v from t = 1 down to t = 0.
inline Tensor euler_sample(const VelocityModel& vm, const Tensor& z, std::size_t nfe,
                           const std::vector<int>* cls = nullptr) {
    if (nfe == 0) throw std::invalid_argument("euler_sample: nfe must be positive");
    Tensor x = z;
    const double dt = 1.0 / static_cast<double>(nfe);
    for (std::size_t i = 0; i < nfe; ++i) {
        const double t = 1.0 - static_cast<double>(i) * dt;
        Tensor v = vm.velocity(x, std::vector<double>(x.rows(), t), cls);
        for (std::size_t k = 0; k < x.size(); ++k) x.data[k] -= dt * v.data[k];
    }
    return x;
}

// The GAN baseline is the same trainer with the transport term disabled.
inline TrainConfig make_gan_config(TrainConfig cfg) {
    cfg.ot.initial = 0.0;
    cfg.ot.final_value = 0.0;
    cfg.ot.cosine = false;
    return cfg;
}

}  // namespace af
