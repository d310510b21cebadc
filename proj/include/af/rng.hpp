#pragma once

#include <cstdint>
#include <random>

#include "af/tensor.hpp"

namespace af {

// All randomness in a run flows from one explicit seed. Sub-streams (data
// batches for G and D, init, eval, ...) are derived with a splitmix64 hash
// so their draws are independent of evaluation order elsewhere.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static Rng stream(std::uint64_t run_seed, std::uint64_t stream_id) {
        return Rng(splitmix64(run_seed ^ splitmix64(stream_id)));
    }

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }          // [0,1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t below(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, n - 1);
        return d(gen_);
    }

    // index drawn proportionally to nonnegative weights
    std::size_t categorical(const std::vector<double>& weights) {
        std::discrete_distribution<std::size_t> d(weights.begin(), weights.end());
        return d(gen_);
    }

    Tensor normal_matrix(std::size_t rows, std::size_t cols) {
        Tensor t = Tensor::matrix(rows, cols);
        for (double& v : t.data) v = normal();
        return t;
    }

    std::mt19937_64& engine() { return gen_; }

  private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace af
