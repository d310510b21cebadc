#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "af/mixture.hpp"
#include "af/tensor.hpp"

namespace af {

// x_t = (1-t) x + t z, with t either shared or per-row.
inline Tensor interp(const Tensor& x, const Tensor& z, double t) {
    require_same_shape(x, z, "interp");
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interp: t outside [0,1]");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (1.0 - t) * x.data[i] + t * z.data[i];
    return out;
}

inline Tensor interp(const Tensor& x, const Tensor& z, const std::vector<double>& t_rows) {
    require_same_shape(x, z, "interp");
    if (t_rows.size() != x.rows()) throw std::invalid_argument("interp: per-row t count mismatch");
    Tensor out = x;
    const std::size_t cols = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double t = t_rows[i];
        if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interp: t outside [0,1]");
        double* o = out.row(i);
        const double* xr = x.row(i);
        const double* zr = z.row(i);
        for (std::size_t c = 0; c < cols; ++c) o[c] = (1.0 - t) * xr[c] + t * zr[c];
    }
    return out;
}

// Empirical W1 between equally sized 1D sample sets: mean absolute
// difference of the sorted sequences.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein_1d: empty input");
    if (a.size() != b.size()) throw std::invalid_argument("wasserstein_1d: sample counts differ");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

inline std::vector<double> column(const Tensor& t, std::size_t c = 0) {
    std::vector<double> v(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) v[i] = t.at(i, c);
    return v;
}

inline double wasserstein_1d(const Tensor& a, const Tensor& b) {
    return wasserstein_1d(column(a), column(b));
}

// mean over rows of ||gz - z||^2 / n
inline double transport_cost(const Tensor& z, const Tensor& gz) {
    require_same_shape(z, gz, "transport_cost");
    const double n = static_cast<double>(z.cols());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = gz.data[i] - z.data[i];
        s += d * d;
    }
    return s / (n * static_cast<double>(z.rows()));
}

// Fraction of samples landing within k*sigma (per dimension) of each
// component mean.
inline std::vector<double> mode_coverage(const Tensor& samples, const MixtureSpec& spec, double k) {
    if (k <= 0.0) throw std::invalid_argument("mode_coverage: k must be positive");
    std::vector<double> frac(spec.components.size(), 0.0);
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        const double* row = samples.row(i);
        for (std::size_t c = 0; c < spec.components.size(); ++c) {
            const auto& comp = spec.components[c];
            bool inside = true;
            for (std::size_t d = 0; d < spec.dim && inside; ++d)
                inside = std::abs(row[d] - comp.mean[d]) <= k * comp.std[d];
            if (inside) frac[c] += 1.0;
        }
    }
    for (double& f : frac) f /= static_cast<double>(samples.rows());
    return frac;
}

// Fraction of adjacent pairs on an ascending grid that the map inverts.
inline double monotonicity_violation_rate(const std::vector<double>& z_grid,
                                          const std::function<double(double)>& g) {
    if (z_grid.size() < 2) throw std::invalid_argument("monotonicity_violation_rate: need at least 2 points");
    for (std::size_t i = 0; i + 1 < z_grid.size(); ++i)
        if (z_grid[i] > z_grid[i + 1])
            throw std::invalid_argument("monotonicity_violation_rate: grid not sorted");
    std::size_t bad = 0;
    double prev = g(z_grid[0]);
    for (std::size_t i = 1; i < z_grid.size(); ++i) {
        const double cur = g(z_grid[i]);
        if (cur < prev) ++bad;
        prev = cur;
    }
    return static_cast<double>(bad) / static_cast<double>(z_grid.size() - 1);
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

}  // namespace af
