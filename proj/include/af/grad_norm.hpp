#pragma once

#include <cmath>

#include "af/tensor.hpp"

namespace af {

// Identity in the forward pass; in the backward pass tracks an EMA of the
// squared gradient norm (times element count) and rescales the gradient to a
// unit per-element scale. Applied only on the adversarial gradient path into
// the generator output.
struct GradNormState {
    double square_avg = 0.0;
    double ema_decay = 0.9;  // same beta2 as the optimizer
    double eps = 1e-8;
    double target_scale = 1.0;

    Tensor forward(const Tensor& x) const { return x; }

    Tensor backward(const Tensor& grad) {
        const double n = static_cast<double>(grad.size());
        const double sq = grad.squared_norm() * n;
        square_avg += (1.0 - ema_decay) * (sq - square_avg);
        const double scale = target_scale / (std::sqrt(square_avg) + eps);
        Tensor out = grad;
        for (double& v : out.data) v *= scale;
        return out;
    }
};

}  // namespace af
