#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

// Gaussian mixture with diagonal covariance, used for data distributions,
// priors and per-class conditionals.
struct MixtureComponent {
    double weight = 1.0;
    std::vector<double> mean;
    std::vector<double> std;
};

struct MixtureSpec {
    std::size_t dim = 1;
    std::vector<MixtureComponent> components;

    static MixtureSpec gaussian(std::vector<double> mean, std::vector<double> std) {
        MixtureSpec s;
        s.dim = mean.size();
        s.components.push_back({1.0, std::move(mean), std::move(std)});
        return s;
    }

    static MixtureSpec standard_normal(std::size_t dim) {
        return gaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0));
    }

    void validate() const {
        if (components.empty()) throw std::invalid_argument("mixture: no components");
        double wsum = 0.0;
        for (const auto& c : components) {
            if (c.weight <= 0.0) throw std::invalid_argument("mixture: weights must be positive");
            if (c.mean.size() != dim || c.std.size() != dim)
                throw std::invalid_argument("mixture: component dimension mismatch");
            for (double s : c.std)
                if (s < 0.0) throw std::invalid_argument("mixture: negative std");
            wsum += c.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-9) throw std::invalid_argument("mixture: weights must sum to 1");
    }

    std::vector<double> weights() const {
        std::vector<double> w;
        for (const auto& c : components) w.push_back(c.weight);
        return w;
    }

    // per-dimension overall mean and std (law of total variance)
    double mean1d(std::size_t d = 0) const {
        double m = 0.0;
        for (const auto& c : components) m += c.weight * c.mean[d];
        return m;
    }
    double std1d(std::size_t d = 0) const {
        const double m = mean1d(d);
        double s2 = 0.0;
        for (const auto& c : components)
            s2 += c.weight * (c.std[d] * c.std[d] + (c.mean[d] - m) * (c.mean[d] - m));
        return std::sqrt(s2);
    }
};

inline Tensor sample(const MixtureSpec& spec, std::size_t count, Rng& rng) {
    if (count == 0) throw std::invalid_argument("sample: count must be positive");
    spec.validate();
    const auto w = spec.weights();
    Tensor out = Tensor::matrix(count, spec.dim);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& c = spec.components[spec.components.size() == 1 ? 0 : rng.categorical(w)];
        double* row = out.row(i);
        for (std::size_t d = 0; d < spec.dim; ++d)
            row[d] = c.std[d] == 0.0 ? c.mean[d] : c.mean[d] + c.std[d] * rng.normal();
    }
    return out;
}

// --- 1D mixture CDF / quantile, and the exact transport oracle --------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

inline double mixture_cdf_1d(const MixtureSpec& spec, double x) {
    double f = 0.0;
    for (const auto& c : spec.components) {
        if (c.std[0] == 0.0) throw std::invalid_argument("mixture cdf: zero std component");
        f += c.weight * normal_cdf((x - c.mean[0]) / c.std[0]);
    }
    return f;
}

struct SupportWindow {
    double lo, hi;
};

inline SupportWindow support_window_1d(const MixtureSpec& spec, double sigmas = 12.0) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& c : spec.components) {
        lo = std::min(lo, c.mean[0] - sigmas * c.std[0]);
        hi = std::max(hi, c.mean[0] + sigmas * c.std[0]);
    }
    return {lo, hi};
}

// inverse CDF by bisection to 1e-10 absolute tolerance
inline double mixture_quantile_1d(const MixtureSpec& spec, double p) {
    auto win = support_window_1d(spec, 14.0);
    double lo = win.lo, hi = win.hi;
    while (hi - lo > 1e-10) {
        const double mid = 0.5 * (lo + hi);
        if (mixture_cdf_1d(spec, mid) < p)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

// The unique monotone (hence squared-W2-optimal) transport map between two
// one-dimensional mixtures: T(z) = F_data^{-1}(F_prior(z)).
inline double ot_map_1d(const MixtureSpec& data, const MixtureSpec& prior, double z) {
    if (data.dim != 1 || prior.dim != 1) throw std::invalid_argument("ot_map_1d: 1D only");
    const auto win = support_window_1d(prior);
    if (z < win.lo || z > win.hi)
        throw std::invalid_argument("ot_map_1d: z outside the 12-sigma support window");
    return mixture_quantile_1d(data, mixture_cdf_1d(prior, z));
}

// Class-conditional dataset: one mixture per class plus class prior weights.
struct ConditionalDataset {
    std::vector<MixtureSpec> class_mixtures;
    std::vector<double> class_weights;

    void validate() const {
        if (class_mixtures.empty()) throw std::invalid_argument("conditional dataset: no classes");
        if (class_weights.size() != class_mixtures.size())
            throw std::invalid_argument("conditional dataset: weight/class count mismatch");
        double s = 0.0;
        for (double w : class_weights) {
            if (w <= 0.0) throw std::invalid_argument("conditional dataset: weights must be positive");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("conditional dataset: weights must sum to 1");
        for (const auto& m : class_mixtures) m.validate();
    }

    std::size_t num_classes() const { return class_mixtures.size(); }

    // draws (x, c) pairs
    std::pair<Tensor, std::vector<int>> sample_labeled(std::size_t count, Rng& rng) const {
        validate();
        std::vector<int> cls(count);
        Tensor x = Tensor::matrix(count, class_mixtures[0].dim);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t c = rng.categorical(class_weights);
            cls[i] = static_cast<int>(c);
            Tensor one = sample(class_mixtures[c], 1, rng);
            for (std::size_t d = 0; d < x.cols(); ++d) x.at(i, d) = one.at(0, d);
        }
        return {std::move(x), std::move(cls)};
    }

    // marginal mixture over classes
    MixtureSpec marginal() const {
        validate();
        MixtureSpec m;
        m.dim = class_mixtures[0].dim;
        for (std::size_t c = 0; c < class_mixtures.size(); ++c)
            for (const auto& comp : class_mixtures[c].components)
                m.components.push_back({class_weights[c] * comp.weight, comp.mean, comp.std});
        return m;
    }
};

}  // namespace af
