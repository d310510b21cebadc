#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace af {

// Dense row-major numeric array. Most of the library works with rank-2
// tensors (rows = batch, cols = feature width); rank-1 is used for biases
// and per-row scalars.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    Tensor(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(count_of(shape), fill) {}

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }

    static Tensor vec(std::size_t n, double fill = 0.0) { return Tensor({n}, fill); }

    static std::size_t count_of(const std::vector<std::size_t>& s) {
        std::size_t c = 1;
        for (std::size_t d : s) c *= d;
        return s.empty() ? 0 : c;
    }

    std::size_t size() const { return data.size(); }
    bool rank2() const { return shape.size() == 2; }
    std::size_t rows() const {
        if (!rank2()) throw std::runtime_error("tensor: rank-2 access on rank-" + std::to_string(shape.size()));
        return shape[0];
    }
    std::size_t cols() const {
        if (!rank2()) throw std::runtime_error("tensor: rank-2 access on rank-" + std::to_string(shape.size()));
        return shape[1];
    }

    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    double* row(std::size_t r) { return data.data() + r * shape[1]; }
    const double* row(std::size_t r) const { return data.data() + r * shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) throw std::runtime_error(std::string("non-finite values in ") + what);
    }

    double squared_norm() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return s;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string("shape mismatch in ") + what);
}

}  // namespace af
