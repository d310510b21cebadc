#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "af/tensor.hpp"

namespace af {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// relativistic objective transform: f(u) = -log(sigmoid(u)) = softplus(-u)
inline double f_relativistic(double u) { return softplus(-u); }

// mean f over paired logit differences; first = discriminator loss, second =
// generator loss
struct AdvLosses {
    double d_loss;
    double g_loss;
};

inline AdvLosses adv_losses(const std::vector<double>& logits_real, const std::vector<double>& logits_fake) {
    if (logits_real.size() != logits_fake.size() || logits_real.empty())
        throw std::invalid_argument("adv_losses: paired logits required");
    double d = 0.0, g = 0.0;
    for (std::size_t i = 0; i < logits_real.size(); ++i) {
        const double u = logits_real[i] - logits_fake[i];
        d += f_relativistic(u);
        g += f_relativistic(-u);
    }
    const double n = static_cast<double>(logits_real.size());
    return {d / n, g / n};
}

// mean (D_real + D_fake)^2
inline double logit_centering(const std::vector<double>& logits_real, const std::vector<double>& logits_fake) {
    if (logits_real.size() != logits_fake.size() || logits_real.empty())
        throw std::invalid_argument("logit_centering: paired logits required");
    double s = 0.0;
    for (std::size_t i = 0; i < logits_real.size(); ++i) {
        const double v = logits_real[i] + logits_fake[i];
        s += v * v;
    }
    return s / static_cast<double>(logits_real.size());
}

// timestep weighting w(s,t) = max(|s-t|, delta)
inline double timestep_weight(double s, double t, double delta) { return std::max(std::abs(s - t), delta); }

// Finite-difference estimate of E||grad D||^2 at the given base points:
// mean over rows of (D(p) - D(p + eps*noise))^2 / eps^2, optionally scaled
// per row by a weighting vector. D is any callable mapping a batch tensor to
// per-row logits.
template <typename DFn>
double fd_gradient_penalty(DFn&& d, const Tensor& base, const Tensor& noise, double eps,
                           const std::vector<double>* row_weights = nullptr) {
    if (eps <= 0.0) throw std::invalid_argument("fd_gradient_penalty: eps must be positive");
    require_same_shape(base, noise, "fd_gradient_penalty");
    Tensor perturbed = base;
    for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed.data[i] += eps * noise.data[i];
    const std::vector<double> l0 = d(base);
    const std::vector<double> l1 = d(perturbed);
    if (l0.size() != base.rows() || l1.size() != base.rows())
        throw std::invalid_argument("fd_gradient_penalty: discriminator must return one logit per row");
    if (row_weights && row_weights->size() != base.rows())
        throw std::invalid_argument("fd_gradient_penalty: row weight count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < base.rows(); ++i) {
        const double diff = l0[i] - l1[i];
        double term = diff * diff / (eps * eps);
        if (row_weights) term *= (*row_weights)[i];
        s += term;
    }
    return s / static_cast<double>(base.rows());
}

enum class OtMode { single_step, multi_step };

// Single-step: mean ||pred - source||^2 / n.
// Multi-step:  mean (1/n) (1/w(s,t)) ||pred - source||^2 with per-row (s,t).
inline double ot_loss(const Tensor& pred, const Tensor& source, const std::vector<double>& s,
                      const std::vector<double>& t, double delta, OtMode mode) {
    require_same_shape(pred, source, "ot_loss");
    const std::size_t rows = pred.rows();
    const double n = static_cast<double>(pred.cols());
    if (mode == OtMode::multi_step && (s.size() != rows || t.size() != rows))
        throw std::invalid_argument("ot_loss: per-row timesteps required in multi-step mode");
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const double* p = pred.row(i);
        const double* q = source.row(i);
        double sq = 0.0;
        for (std::size_t c = 0; c < pred.cols(); ++c) {
            const double dd = p[c] - q[c];
            sq += dd * dd;
        }
        double term = sq / n;
        if (mode == OtMode::multi_step) term /= timestep_weight(s[i], t[i], delta);
        acc += term;
    }
    return acc / static_cast<double>(rows);
}

// mean over rows of || v(x_t, t) - (z - x) ||^2
inline double flow_matching_loss(const Tensor& v_out, const Tensor& x, const Tensor& z) {
    require_same_shape(v_out, x, "flow_matching_loss");
    require_same_shape(v_out, z, "flow_matching_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < v_out.rows(); ++i) {
        const double* v = v_out.row(i);
        const double* xr = x.row(i);
        const double* zr = z.row(i);
        for (std::size_t c = 0; c < v_out.cols(); ++c) {
            const double d = v[c] - (zr[c] - xr[c]);
            acc += d * d;
        }
    }
    return acc / static_cast<double>(v_out.rows());
}

enum class ParamKind { direct, residual };

inline const char* param_kind_name(ParamKind k) { return k == ParamKind::direct ? "direct" : "residual"; }

inline ParamKind param_kind_from_name(const std::string& s) {
    if (s == "direct") return ParamKind::direct;
    if (s == "residual") return ParamKind::residual;
    throw std::invalid_argument("unknown parameterization: " + s);
}

// direct:   G = g_out
// residual: G = x_s - (s - t) * g_out   (single-step: z - g(z))
inline Tensor generator_parameterize(const Tensor& g_out, const Tensor& x_s, const std::vector<double>& s,
                                     const std::vector<double>& t, ParamKind kind) {
    if (kind == ParamKind::direct) return g_out;
    require_same_shape(g_out, x_s, "generator_parameterize");
    if (s.size() != g_out.rows() || t.size() != g_out.rows())
        throw std::invalid_argument("generator_parameterize: per-row timesteps required for residual");
    Tensor out = x_s;
    for (std::size_t i = 0; i < g_out.rows(); ++i) {
        const double step = s[i] - t[i];
        double* o = out.row(i);
        const double* g = g_out.row(i);
        for (std::size_t c = 0; c < g_out.cols(); ++c) o[c] -= step * g[c];
    }
    return out;
}

}  // namespace af
