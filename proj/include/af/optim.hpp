#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "af/net.hpp"
#include "af/tensor.hpp"

namespace af {

// AdamW with decoupled weight decay and bias correction. Defaults follow the
// training setup this library is built around: beta1 = 0, beta2 = 0.9.
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double eps = 1e-8;
    double weight_decay = 0.01;

    std::vector<Tensor> m;  // first moments, one per parameter tensor
    std::vector<Tensor> v;  // second moments
    long step_count = 0;

    void attach(const Network& net) {
        m.clear();
        v.clear();
        net.for_each_param([&](const Tensor& p) {
            m.push_back(Tensor(p.shape));
            v.push_back(Tensor(p.shape));
        });
        step_count = 0;
    }

    void reset_moments() {
        for (auto& t : m) std::fill(t.data.begin(), t.data.end(), 0.0);
        for (auto& t : v) std::fill(t.data.begin(), t.data.end(), 0.0);
        step_count = 0;
    }

    void step(Network& net, const Grads& grads) {
        std::vector<Tensor*> params;
        net.for_each_param([&](Tensor& p) { params.push_back(&p); });
        std::vector<const Tensor*> gs;
        for (std::size_t i = 0; i < grads.w.size(); ++i) {
            gs.push_back(&grads.w[i]);
            gs.push_back(&grads.b[i]);
        }
        if (params.size() != gs.size() || params.size() != m.size())
            throw std::invalid_argument("adamw: parameter/gradient layout mismatch");

        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));

        for (std::size_t t = 0; t < params.size(); ++t) {
            Tensor& p = *params[t];
            const Tensor& g = *gs[t];
            require_same_shape(p, g, "adamw gradients");
            g.require_finite("adamw gradients");
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g.data[i];
                m[t].data[i] = beta1 * m[t].data[i] + (1.0 - beta1) * gi;
                v[t].data[i] = beta2 * v[t].data[i] + (1.0 - beta2) * gi * gi;
                const double mhat = m[t].data[i] / bc1;
                const double vhat = v[t].data[i] / bc2;
                p.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.data[i]);
            }
        }
    }
};

// Shadow copy of all parameters: shadow <- decay*shadow + (1-decay)*online.
struct EmaWeights {
    double decay = 0.9999;
    std::vector<Tensor> shadow;

    void attach(const Network& net) {
        shadow.clear();
        net.for_each_param([&](const Tensor& p) { shadow.push_back(p); });
    }

    void update(const Network& net) {
        std::size_t i = 0;
        net.for_each_param([&](const Tensor& p) {
            if (i >= shadow.size() || !shadow[i].same_shape(p))
                throw std::invalid_argument("ema: shadow/online shape mismatch");
            double* s = shadow[i].data.data();
            const double* o = p.data.data();
            for (std::size_t k = 0; k < p.size(); ++k) s[k] = decay * s[k] + (1.0 - decay) * o[k];
            ++i;
        });
    }

    void copy_to(Network& net) const {
        std::size_t i = 0;
        net.for_each_param([&](Tensor& p) {
            if (i >= shadow.size() || !shadow[i].same_shape(p))
                throw std::invalid_argument("ema: shadow/online shape mismatch");
            p.data = shadow[i].data;
            ++i;
        });
    }
};

}  // namespace af
