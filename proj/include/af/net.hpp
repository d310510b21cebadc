#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

enum class Act { linear, gelu, tanh };

inline const char* act_name(Act a) {
    switch (a) {
        case Act::linear: return "linear";
        case Act::gelu: return "gelu";
        case Act::tanh: return "tanh";
    }
    return "?";
}

inline Act act_from_name(const std::string& s) {
    if (s == "linear") return Act::linear;
    if (s == "gelu") return Act::gelu;
    if (s == "tanh") return Act::tanh;
    throw std::invalid_argument("unknown activation: " + s);
}

inline double act_apply(Act a, double x) {
    switch (a) {
        case Act::linear: return x;
        case Act::gelu: return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
        case Act::tanh: return std::tanh(x);
    }
    return x;
}

inline double act_derivative(Act a, double x) {
    switch (a) {
        case Act::linear: return 1.0;
        case Act::gelu:
            return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) +
                   x * std::exp(-0.5 * x * x) * 0.3989422804014326779;
        case Act::tanh: {
            double t = std::tanh(x);
            return 1.0 - t * t;
        }
    }
    return 1.0;
}

// weight stored [in, out] row-major so the forward inner loop runs over a
// contiguous weight row
struct DenseLayer {
    Tensor w;
    Tensor b;
    Act act = Act::linear;

    DenseLayer() = default;
    DenseLayer(std::size_t in, std::size_t out, Act a) : w(Tensor::matrix(in, out)), b(Tensor::vec(out)), act(a) {}

    std::size_t in_width() const { return w.shape[0]; }
    std::size_t out_width() const { return w.shape[1]; }
};

struct Grads {
    std::vector<Tensor> w;
    std::vector<Tensor> b;
};

// One recorded forward pass; backward consumes it. Value semantics so a
// training step can hold traces of several networks at once.
struct Trace {
    // per layer application, in execution order
    std::vector<int> layer_index;
    std::vector<Tensor> inputs;   // the full (possibly concatenated) layer input
    std::vector<Tensor> preacts;  // z = xW + b, before the activation
    std::vector<int> kept_cols;   // how many leading input columns propagate gradient
    Tensor output;
};

// Dense net with optional class conditioning (one-hot appended to the first
// layer input), optional timestep conditioning (sinusoidal features appended
// to the input of the repeated block), and block repetition. The block is
// every layer between the first and the last; with repeat_count R > 1 it is
// applied R times, each pass tagged with fixed iteration features so the
// passes are distinguishable while the parameter count stays that of R = 1.
struct Network {
    std::vector<DenseLayer> layers;
    std::size_t data_dim = 0;
    std::size_t num_classes = 0;  // 0 = unconditional
    std::size_t time_inputs = 0;  // timestep scalars consumed per row
    std::size_t time_feats = 8;   // sinusoidal features per scalar (raw value always added)
    std::size_t repeat_count = 1;

    std::size_t out_width() const { return layers.back().out_width(); }
    std::size_t hidden_width() const { return layers.front().out_width(); }

    std::size_t time_feature_width() const { return time_inputs * (time_feats + 1); }

    std::size_t param_count() const {
        std::size_t c = 0;
        for (const auto& l : layers) c += l.w.size() + l.b.size();
        return c;
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) {
        for (auto& l : layers) {
            fn(l.w);
            fn(l.b);
        }
    }
    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        for (const auto& l : layers) {
            fn(l.w);
            fn(l.b);
        }
    }

    Grads zero_grads() const {
        Grads g;
        g.w.reserve(layers.size());
        g.b.reserve(layers.size());
        for (const auto& l : layers) {
            g.w.push_back(Tensor(l.w.shape));
            g.b.push_back(Tensor(l.b.shape));
        }
        return g;
    }

    // --- forward -----------------------------------------------------------

    Tensor forward(const Tensor& x, const std::vector<int>* cls = nullptr, const Tensor* times = nullptr) {
        auto [out, tr] = forward_traced(x, cls, times);
        cache_ = std::move(tr);
        return out;
    }

    Tensor forward_value(const Tensor& x, const std::vector<int>* cls = nullptr,
                         const Tensor* times = nullptr) const {
        return run(x, cls, times, nullptr);
    }

    std::pair<Tensor, Trace> forward_traced(const Tensor& x, const std::vector<int>* cls = nullptr,
                                            const Tensor* times = nullptr) const {
        Trace tr;
        Tensor out = run(x, cls, times, &tr);
        tr.output = out;
        return {std::move(out), std::move(tr)};
    }

    // --- backward ----------------------------------------------------------

    std::pair<Grads, Tensor> backward(const Tensor& upstream) {
        if (!cache_) throw std::runtime_error("backward: no cached forward");
        auto res = backward_traced(*cache_, upstream);
        cache_.reset();
        return res;
    }

    std::pair<Grads, Tensor> backward_traced(const Trace& tr, const Tensor& upstream,
                                             bool want_param_grads = true) const {
        require_same_shape(upstream, tr.output, "backward upstream");
        Grads grads = want_param_grads ? zero_grads() : Grads{};
        Tensor g = upstream;  // grad w.r.t. current application's output
        for (std::size_t a = tr.layer_index.size(); a-- > 0;) {
            const DenseLayer& layer = layers[static_cast<std::size_t>(tr.layer_index[a])];
            const Tensor& input = tr.inputs[a];
            const std::size_t rows = input.rows();
            const std::size_t in_w = layer.in_width();
            const std::size_t out_w = layer.out_width();

            Tensor gpre = Tensor::matrix(rows, out_w);
            for (std::size_t i = 0; i < rows; ++i) {
                double* gp = gpre.row(i);
                const double* go = g.row(i);
                if (layer.act == Act::linear) {
                    for (std::size_t j = 0; j < out_w; ++j) gp[j] = go[j];
                } else {
                    const double* z = tr.preacts[a].row(i);
                    for (std::size_t j = 0; j < out_w; ++j) gp[j] = go[j] * act_derivative(layer.act, z[j]);
                }
            }

            if (want_param_grads) {
                Tensor& dw = grads.w[static_cast<std::size_t>(tr.layer_index[a])];
                Tensor& db = grads.b[static_cast<std::size_t>(tr.layer_index[a])];
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* in_row = input.row(i);
                    const double* gp = gpre.row(i);
                    for (std::size_t k = 0; k < in_w; ++k) {
                        const double xv = in_row[k];
                        if (xv == 0.0) continue;
                        double* dwr = dw.row(k);
                        for (std::size_t j = 0; j < out_w; ++j) dwr[j] += xv * gp[j];
                    }
                    for (std::size_t j = 0; j < out_w; ++j) db.data[j] += gp[j];
                }
            }

            const std::size_t kept = static_cast<std::size_t>(tr.kept_cols[a]);
            Tensor gin = Tensor::matrix(rows, kept);
            for (std::size_t i = 0; i < rows; ++i) {
                const double* gp = gpre.row(i);
                double* gi = gin.row(i);
                for (std::size_t k = 0; k < kept; ++k) {
                    const double* wrow = layer.w.row(k);
                    double s = 0.0;
                    for (std::size_t j = 0; j < out_w; ++j) s += wrow[j] * gp[j];
                    gi[k] = s;
                }
            }
            g = std::move(gin);
        }
        return {std::move(grads), std::move(g)};
    }

    // expands one timestep scalar into (raw, sin/cos at doubling frequencies)
    void append_time_features(std::vector<double>& dst, double t) const {
        dst.push_back(t);
        double freq = 1.0;
        for (std::size_t k = 0; k < time_feats; k += 2) {
            dst.push_back(std::sin(M_PI * freq * t));
            if (k + 1 < time_feats) dst.push_back(std::cos(M_PI * freq * t));
            freq *= 2.0;
        }
    }

  private:
    std::optional<Trace> cache_;

    Tensor run(const Tensor& x, const std::vector<int>* cls, const Tensor* times, Trace* tr) const {
        if (layers.empty()) throw std::runtime_error("forward: empty network");
        if (!x.rank2() || x.cols() != data_dim)
            throw std::invalid_argument("forward: input width " + std::to_string(x.rank2() ? x.cols() : 0) +
                                        " != data_dim " + std::to_string(data_dim));
        const std::size_t rows = x.rows();

        if (num_classes > 0) {
            if (!cls || cls->size() != rows) throw std::invalid_argument("forward: class ids required per row");
            for (int c : *cls)
                if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
                    throw std::invalid_argument("forward: class id out of range");
        }
        const bool repeated = repeat_count > 1;
        if (time_inputs > 0 && !repeated) {
            if (!times || !times->rank2() || times->rows() != rows || times->cols() != time_inputs)
                throw std::invalid_argument("forward: times matrix of width " + std::to_string(time_inputs) +
                                            " required");
            for (double t : times->data)
                if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("forward: timestep outside [0,1]");
        }
        if (repeated && layers.size() < 3) throw std::invalid_argument("forward: repetition requires a hidden block");
        if (repeated && time_inputs != 2)
            throw std::invalid_argument("forward: repetition uses the two-scalar time slot");

        // first layer consumes [x | one-hot class]
        const std::size_t stem_in = data_dim + num_classes;
        if (layers.front().in_width() != stem_in)
            throw std::invalid_argument("forward: first layer width mismatch");

        Tensor h;
        {
            Tensor input = Tensor::matrix(rows, stem_in);
            for (std::size_t i = 0; i < rows; ++i) {
                double* dst = input.row(i);
                const double* src = x.row(i);
                for (std::size_t k = 0; k < data_dim; ++k) dst[k] = src[k];
                if (num_classes > 0) dst[data_dim + static_cast<std::size_t>((*cls)[i])] = 1.0;
            }
            h = apply_layer(0, input, static_cast<int>(data_dim), tr);
        }
        if (layers.size() == 1) {
            h.require_finite("network activations");
            return h;
        }

        const std::size_t block_begin = 1;
        const std::size_t block_end = layers.size() - 1;  // exclusive
        const std::size_t tf_width = time_feature_width();

        for (std::size_t pass = 0; pass < repeat_count; ++pass) {
            for (std::size_t li = block_begin; li < block_end; ++li) {
                const bool wants_time = li == block_begin && tf_width > 0;
                if (wants_time) {
                    const std::size_t hw = h.cols();
                    Tensor input = Tensor::matrix(rows, hw + tf_width);
                    std::vector<double> feats;
                    feats.reserve(tf_width);
                    for (std::size_t i = 0; i < rows; ++i) {
                        double* dst = input.row(i);
                        const double* src = h.row(i);
                        for (std::size_t k = 0; k < hw; ++k) dst[k] = src[k];
                        feats.clear();
                        if (repeated) {
                            // fixed per-pass pseudo-timesteps walking 1 -> 0
                            const double R = static_cast<double>(repeat_count);
                            append_time_features(feats, (R - static_cast<double>(pass)) / R);
                            append_time_features(feats, (R - static_cast<double>(pass) - 1.0) / R);
                        } else {
                            for (std::size_t s = 0; s < time_inputs; ++s)
                                append_time_features(feats, times->at(i, s));
                        }
                        for (std::size_t k = 0; k < tf_width; ++k) dst[hw + k] = feats[k];
                    }
                    h = apply_layer(li, input, static_cast<int>(hw), tr);
                } else {
                    h = apply_layer(li, h, static_cast<int>(h.cols()), tr);
                }
            }
        }

        h = apply_layer(layers.size() - 1, h, static_cast<int>(h.cols()), tr);
        h.require_finite("network activations");
        return h;
    }

    Tensor apply_layer(std::size_t li, const Tensor& input, int kept_cols, Trace* tr) const {
        const DenseLayer& layer = layers[li];
        if (input.cols() != layer.in_width())
            throw std::invalid_argument("forward: layer " + std::to_string(li) + " expects width " +
                                        std::to_string(layer.in_width()) + ", got " + std::to_string(input.cols()));
        const std::size_t rows = input.rows();
        const std::size_t in_w = layer.in_width();
        const std::size_t out_w = layer.out_width();
        Tensor out = Tensor::matrix(rows, out_w);
        for (std::size_t i = 0; i < rows; ++i) {
            double* o = out.row(i);
            const double* in_row = input.row(i);
            for (std::size_t j = 0; j < out_w; ++j) o[j] = layer.b.data[j];
            for (std::size_t k = 0; k < in_w; ++k) {
                const double xv = in_row[k];
                if (xv == 0.0) continue;
                const double* wrow = layer.w.row(k);
                for (std::size_t j = 0; j < out_w; ++j) o[j] += xv * wrow[j];
            }
        }
        if (tr) {
            tr->layer_index.push_back(static_cast<int>(li));
            tr->inputs.push_back(input);
            tr->preacts.push_back(layer.act == Act::linear ? Tensor() : out);
            tr->kept_cols.push_back(kept_cols);
        }
        if (layer.act != Act::linear)
            for (double& v : out.data) v = act_apply(layer.act, v);
        return out;
    }
};

// Standard shape used throughout: one stem layer absorbing [x | class], a
// block of hidden layers whose first layer also sees the time features, and
// a linear head.
struct MlpSpec {
    std::size_t data_dim = 1;
    std::size_t out_dim = 1;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 3;  // stem + (hidden_layers - 1) block layers
    std::size_t num_classes = 0;
    std::size_t time_inputs = 0;
    std::size_t time_feats = 8;
    std::size_t repeat_count = 1;
    Act act = Act::gelu;
};

inline Network make_mlp(const MlpSpec& spec) {
    if (spec.hidden_layers < 1) throw std::invalid_argument("make_mlp: need at least one hidden layer");
    if ((spec.time_inputs > 0 || spec.repeat_count > 1) && spec.hidden_layers < 2)
        throw std::invalid_argument("make_mlp: time conditioning needs a hidden block");
    Network net;
    net.data_dim = spec.data_dim;
    net.num_classes = spec.num_classes;
    net.time_inputs = spec.repeat_count > 1 ? 2 : spec.time_inputs;
    net.time_feats = spec.time_feats;
    net.repeat_count = spec.repeat_count;
    const std::size_t tf = net.time_feature_width();
    net.layers.emplace_back(spec.data_dim + spec.num_classes, spec.hidden, spec.act);
    for (std::size_t i = 1; i < spec.hidden_layers; ++i) {
        const std::size_t in = (i == 1 && tf > 0) ? spec.hidden + tf : spec.hidden;
        net.layers.emplace_back(in, spec.hidden, spec.act);
    }
    net.layers.emplace_back(spec.hidden, spec.out_dim, Act::linear);
    return net;
}

inline void init_uniform_fanin(Network& net, Rng& rng) {
    for (auto& l : net.layers) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_width()));
        for (double& v : l.w.data) v = rng.uniform(-bound, bound);
        for (double& v : l.b.data) v = rng.uniform(-bound, bound);
    }
}

inline void zero_final_layer(Network& net) {
    auto& l = net.layers.back();
    std::fill(l.w.data.begin(), l.w.data.end(), 0.0);
    std::fill(l.b.data.begin(), l.b.data.end(), 0.0);
}

}  // namespace af
