#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "af/metrics.hpp"
#include "af/mixture.hpp"
#include "af/net.hpp"
#include "af/optim.hpp"
#include "af/tensor.hpp"

namespace af {

inline Tensor log_softmax_rows(const Tensor& logits) {
    Tensor out = logits;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* l = logits.row(i);
        double* o = out.row(i);
        double mx = l[0];
        for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, l[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) sum += std::exp(l[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < logits.cols(); ++j) o[j] = l[j] - lse;
    }
    return out;
}

// Time-conditioned classifier with a log-softmax head: log p(c | x_t, t').
struct Classifier {
    Network net;  // out width = number of classes, time_inputs = 1

    std::size_t num_classes() const { return net.out_width(); }

    Tensor times_column(const std::vector<double>& tprime) const {
        Tensor t = Tensor::matrix(tprime.size(), 1);
        for (std::size_t i = 0; i < tprime.size(); ++i) t.at(i, 0) = tprime[i];
        return t;
    }

    Tensor log_probs(const Tensor& x, const std::vector<double>& tprime) const {
        const Tensor t = times_column(tprime);
        return log_softmax_rows(net.forward_value(x, nullptr, &t));
    }

    double accuracy(const Tensor& x, const std::vector<int>& cls, double tprime) const {
        const Tensor lp = log_probs(x, std::vector<double>(x.rows(), tprime));
        std::size_t hit = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < lp.cols(); ++j)
                if (lp.at(i, j) > lp.at(i, best)) best = j;
            if (static_cast<int>(best) == cls[i]) ++hit;
        }
        return static_cast<double>(hit) / static_cast<double>(x.rows());
    }
};

struct ClassifierTrainConfig {
    std::size_t steps = 1500;
    std::size_t batch = 128;
    double lr = 1e-3;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 3;
    std::size_t time_feats = 8;
};

// Trains log p(c | interp(x, z, t'), t') with cross entropy, t' ~ U(0,1).
inline Classifier train_classifier(const ConditionalDataset& dataset, const MixtureSpec& prior,
                                   const ClassifierTrainConfig& cfg, Rng& rng) {
    dataset.validate();
    if (dataset.num_classes() < 2) throw std::invalid_argument("train_classifier: need at least 2 classes");
    const std::size_t n = dataset.class_mixtures[0].dim;
    const std::size_t num_classes = dataset.num_classes();

    Classifier clf;
    MlpSpec spec;
    spec.data_dim = n;
    spec.out_dim = num_classes;
    spec.hidden = cfg.hidden;
    spec.hidden_layers = cfg.hidden_layers;
    spec.time_inputs = 1;
    spec.time_feats = cfg.time_feats;
    clf.net = make_mlp(spec);
    init_uniform_fanin(clf.net, rng);

    AdamW opt;
    opt.lr = cfg.lr;
    opt.attach(clf.net);

    const double bsz = static_cast<double>(cfg.batch);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto [x, cls] = dataset.sample_labeled(cfg.batch, rng);
        Tensor z = sample(prior, cfg.batch, rng);
        std::vector<double> tprime(cfg.batch);
        for (double& t : tprime) t = rng.uniform();
        Tensor xt = interp(x, z, tprime);
        Tensor tcol = clf.times_column(tprime);

        auto [logits, trace] = clf.net.forward_traced(xt, nullptr, &tcol);
        // d(mean CE)/dlogits = (softmax - onehot) / B
        Tensor up = log_softmax_rows(logits);
        for (std::size_t i = 0; i < up.rows(); ++i)
            for (std::size_t j = 0; j < up.cols(); ++j)
                up.at(i, j) = (std::exp(up.at(i, j)) - (static_cast<int>(j) == cls[i] ? 1.0 : 0.0)) / bsz;
        auto [grads, ignored] = clf.net.backward_traced(trace, up);
        opt.step(clf.net, grads);
    }
    return clf;
}

enum class CgMode { off, simple, flow, implicit };

inline const char* cg_mode_name(CgMode m) {
    switch (m) {
        case CgMode::off: return "off";
        case CgMode::simple: return "simple";
        case CgMode::flow: return "flow";
        case CgMode::implicit: return "implicit";
    }
    return "?";
}

inline CgMode cg_mode_from_name(const std::string& s) {
    if (s == "off") return CgMode::off;
    if (s == "simple") return CgMode::simple;
    if (s == "flow") return CgMode::flow;
    if (s == "implicit") return CgMode::implicit;
    throw std::invalid_argument("unknown guidance mode: " + s);
}

struct GuidanceLoss {
    double loss = 0.0;
    Tensor grad_gx;  // d loss / d generated samples
};

// Flow-based classifier guidance: mean -log p(c | interp(gx, z', t'), t').
// Simple guidance is the t' == 0 special case and is routed through the same
// path so the equivalence is structural.
inline GuidanceLoss cg_loss(const Classifier& clf, const Tensor& gx, const std::vector<int>& cls,
                            const Tensor& zprime, const std::vector<double>& tprime) {
    if (cls.size() != gx.rows()) throw std::invalid_argument("cg_loss: class id per row required");
    for (int c : cls)
        if (c < 0 || static_cast<std::size_t>(c) >= clf.num_classes())
            throw std::invalid_argument("cg_loss: class id out of range");
    const std::size_t rows = gx.rows();
    const double bsz = static_cast<double>(rows);

    Tensor x_cg = interp(gx, zprime, tprime);
    Tensor tcol = clf.times_column(tprime);
    auto [logits, trace] = clf.net.forward_traced(x_cg, nullptr, &tcol);
    Tensor lp = log_softmax_rows(logits);

    GuidanceLoss out;
    for (std::size_t i = 0; i < rows; ++i) out.loss -= lp.at(i, static_cast<std::size_t>(cls[i]));
    out.loss /= bsz;

    // d(mean -logp_c)/dlogits = (softmax - onehot)/B, then through the net
    Tensor up = lp;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < up.cols(); ++j)
            up.at(i, j) = (std::exp(lp.at(i, j)) - (static_cast<int>(j) == cls[i] ? 1.0 : 0.0)) / bsz;
    auto [grads, input_grad] = clf.net.backward_traced(trace, up, /*want_param_grads=*/false);

    // d x_cg / d gx = (1 - t') per row
    out.grad_gx = input_grad;
    for (std::size_t i = 0; i < rows; ++i) {
        double* g = out.grad_gx.row(i);
        for (std::size_t c = 0; c < out.grad_gx.cols(); ++c) g[c] *= 1.0 - tprime[i];
    }
    return out;
}

inline GuidanceLoss cg_loss_simple(const Classifier& clf, const Tensor& gx, const std::vector<int>& cls) {
    return cg_loss(clf, gx, cls, gx, std::vector<double>(gx.rows(), 0.0));
}

// Velocity network trained with flow matching; when class-conditional it
// reserves the last class index as the unconditional (null) label.
struct VelocityModel {
    Network net;  // time_inputs = 1
    bool has_null_class = false;

    std::size_t null_class() const { return net.num_classes - 1; }

    Tensor velocity(const Tensor& xt, const std::vector<double>& t, const std::vector<int>* cls = nullptr) const {
        Tensor tcol = Tensor::matrix(t.size(), 1);
        for (std::size_t i = 0; i < t.size(); ++i) tcol.at(i, 0) = t[i];
        if (net.num_classes == 0) return net.forward_value(xt, nullptr, &tcol);
        std::vector<int> ids;
        if (cls)
            ids = *cls;
        else
            ids.assign(xt.rows(), static_cast<int>(null_class()));
        return net.forward_value(xt, &ids, &tcol);
    }
};

// Guidance from the implicit classifier of a pretrained flow model:
// g_cls = v(x_t', t') - v(x_t', t', c) at x_t' = interp(gx, z', t'), held
// constant; loss = mean -(1/n) sum gx * g_cls, so d loss/d gx = -g_cls/n.
inline GuidanceLoss implicit_cfg_loss(const VelocityModel& v, const Tensor& gx, const std::vector<int>& cls,
                                      const Tensor& zprime, const std::vector<double>& tprime) {
    if (!v.has_null_class || v.net.num_classes < 2)
        throw std::invalid_argument("implicit_cfg_loss: velocity model lacks unconditional mode");
    if (cls.size() != gx.rows()) throw std::invalid_argument("implicit_cfg_loss: class id per row required");
    const std::size_t rows = gx.rows();
    const double n = static_cast<double>(gx.cols());
    const double bsz = static_cast<double>(rows);

    Tensor x_t = interp(gx, zprime, tprime);
    Tensor v_cond = v.velocity(x_t, tprime, &cls);
    Tensor v_uncond = v.velocity(x_t, tprime, nullptr);

    GuidanceLoss out;
    out.grad_gx = Tensor::matrix(rows, gx.cols());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* gu = v_uncond.row(i);
        const double* gc = v_cond.row(i);
        const double* g = gx.row(i);
        double* og = out.grad_gx.row(i);
        for (std::size_t c = 0; c < gx.cols(); ++c) {
            const double g_cls = gu[c] - gc[c];
            out.loss -= g[c] * g_cls / n;
            og[c] = -g_cls / (n * bsz);
        }
    }
    out.loss /= bsz;
    return out;
}

// Multi-step guidance applied only on rows whose target timestep is in the
// configured set: mean over selected rows of -log p(c | G_out, t).
inline GuidanceLoss multistep_cg_loss(const Classifier& clf, const Tensor& g_out, const std::vector<int>& cls,
                                      const std::vector<double>& t, const std::vector<double>& t_set) {
    const std::size_t rows = g_out.rows();
    std::vector<std::size_t> selected;
    for (std::size_t i = 0; i < rows; ++i)
        for (double ts : t_set)
            if (std::abs(t[i] - ts) < 1e-9) {
                selected.push_back(i);
                break;
            }
    GuidanceLoss out;
    out.grad_gx = Tensor::matrix(rows, g_out.cols());
    if (selected.empty()) return out;

    Tensor xs = Tensor::matrix(selected.size(), g_out.cols());
    std::vector<double> ts_rows(selected.size());
    std::vector<int> cs(selected.size());
    for (std::size_t k = 0; k < selected.size(); ++k) {
        const std::size_t i = selected[k];
        for (std::size_t c = 0; c < g_out.cols(); ++c) xs.at(k, c) = g_out.at(i, c);
        ts_rows[k] = t[i];
        cs[k] = cls[i];
    }
    Tensor tcol = clf.times_column(ts_rows);
    auto [logits, trace] = clf.net.forward_traced(xs, nullptr, &tcol);
    Tensor lp = log_softmax_rows(logits);
    const double m = static_cast<double>(selected.size());
    for (std::size_t k = 0; k < selected.size(); ++k) out.loss -= lp.at(k, static_cast<std::size_t>(cs[k]));
    out.loss /= m;

    Tensor up = lp;
    for (std::size_t k = 0; k < up.rows(); ++k)
        for (std::size_t j = 0; j < up.cols(); ++j)
            up.at(k, j) = (std::exp(lp.at(k, j)) - (static_cast<int>(j) == cs[k] ? 1.0 : 0.0)) / m;
    auto [grads, input_grad] = clf.net.backward_traced(trace, up, /*want_param_grads=*/false);
    for (std::size_t k = 0; k < selected.size(); ++k) {
        double* dst = out.grad_gx.row(selected[k]);
        const double* src = input_grad.row(k);
        for (std::size_t c = 0; c < g_out.cols(); ++c) dst[c] = src[c];
    }
    return out;
}

}  // namespace af
