#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "af/losses.hpp"
#include "af/mixture.hpp"
#include "af/net.hpp"

namespace af {

// Checkpoint file: a plain-text header describing the network topology and
// training metadata, followed by length-prefixed little-endian float64
// arrays, one per parameter tensor, online section first, then an optional
// EMA section. Round trips are bit exact.
struct Checkpoint {
    std::string kind = "generator";  // generator | discriminator | classifier | velocity
    Network net;                     // topology + online parameters
    std::optional<std::vector<Tensor>> ema;
    long step = 0;
    ParamKind param_kind = ParamKind::residual;
    std::string regime = "none";  // single | discrete | anystep | none
    std::vector<std::pair<double, double>> pairs;
    std::optional<MixtureSpec> prior;
};

namespace detail {

inline void write_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double read_f64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated float data");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated length prefix");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_array(std::ostream& os, const Tensor& t) {
    write_u64_le(os, t.size());
    for (double v : t.data) write_f64_le(os, v);
}

inline void read_array_into(std::istream& is, Tensor& t) {
    const std::uint64_t n = read_u64_le(is);
    if (n != t.size()) throw std::runtime_error("checkpoint: array length does not match topology");
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = read_f64_le(is);
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += fmt_double(v[i]);
    }
    return s;
}

inline std::vector<double> split_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
        os << "aflab-checkpoint v1\n";
        os << "kind " << ck.kind << "\n";
        os << "data_dim " << ck.net.data_dim << "\n";
        os << "num_classes " << ck.net.num_classes << "\n";
        os << "time_inputs " << ck.net.time_inputs << "\n";
        os << "time_feats " << ck.net.time_feats << "\n";
        os << "repeat " << ck.net.repeat_count << "\n";
        os << "step " << ck.step << "\n";
        os << "param " << param_kind_name(ck.param_kind) << "\n";
        os << "regime " << ck.regime << "\n";
        if (!ck.pairs.empty()) {
            os << "pairs ";
            for (std::size_t i = 0; i < ck.pairs.size(); ++i) {
                if (i) os << ",";
                os << detail::fmt_double(ck.pairs[i].first) << ":" << detail::fmt_double(ck.pairs[i].second);
            }
            os << "\n";
        }
        if (ck.prior) {
            os << "prior_dim " << ck.prior->dim << "\n";
            for (const auto& c : ck.prior->components)
                os << "prior_comp " << detail::fmt_double(c.weight) << " " << detail::join_doubles(c.mean) << " "
                   << detail::join_doubles(c.std) << "\n";
        }
        os << "layers " << ck.net.layers.size() << "\n";
        for (const auto& l : ck.net.layers)
            os << "layer " << l.in_width() << " " << l.out_width() << " " << act_name(l.act) << "\n";
        os << "ema " << (ck.ema ? 1 : 0) << "\n";
        os << "binary\n";
        ck.net.for_each_param([&](const Tensor& p) { detail::write_array(os, p); });
        if (ck.ema)
            for (const Tensor& t : *ck.ema) detail::write_array(os, t);
        if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot read " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "aflab-checkpoint v1")
        throw std::runtime_error("checkpoint: bad magic in " + path.string());

    Checkpoint ck;
    bool has_ema = false;
    std::vector<std::array<std::string, 3>> layer_specs;
    while (std::getline(is, line)) {
        if (line == "binary") break;
        std::stringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "kind")
            ss >> ck.kind;
        else if (key == "data_dim")
            ss >> ck.net.data_dim;
        else if (key == "num_classes")
            ss >> ck.net.num_classes;
        else if (key == "time_inputs")
            ss >> ck.net.time_inputs;
        else if (key == "time_feats")
            ss >> ck.net.time_feats;
        else if (key == "repeat")
            ss >> ck.net.repeat_count;
        else if (key == "step")
            ss >> ck.step;
        else if (key == "param") {
            std::string v;
            ss >> v;
            ck.param_kind = param_kind_from_name(v);
        } else if (key == "regime")
            ss >> ck.regime;
        else if (key == "pairs") {
            std::string v;
            ss >> v;
            std::stringstream ps(v);
            std::string item;
            while (std::getline(ps, item, ',')) {
                const auto colon = item.find(':');
                if (colon == std::string::npos) throw std::runtime_error("checkpoint: bad pair " + item);
                ck.pairs.emplace_back(std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
            }
        } else if (key == "prior_dim") {
            MixtureSpec m;
            ss >> m.dim;
            ck.prior = m;
        } else if (key == "prior_comp") {
            if (!ck.prior) throw std::runtime_error("checkpoint: prior_comp before prior_dim");
            std::string w, mean, std_;
            ss >> w >> mean >> std_;
            ck.prior->components.push_back(
                {std::stod(w), detail::split_doubles(mean), detail::split_doubles(std_)});
        } else if (key == "layers") {
            // count line; layer lines follow
        } else if (key == "layer") {
            std::array<std::string, 3> l;
            ss >> l[0] >> l[1] >> l[2];
            layer_specs.push_back(l);
        } else if (key == "ema") {
            int v;
            ss >> v;
            has_ema = v != 0;
        } else {
            throw std::runtime_error("checkpoint: unknown header key " + key);
        }
    }
    if (layer_specs.empty()) throw std::runtime_error("checkpoint: no layers in header");
    for (const auto& l : layer_specs)
        ck.net.layers.emplace_back(std::stoul(l[0]), std::stoul(l[1]), act_from_name(l[2]));

    ck.net.for_each_param([&](Tensor& p) { detail::read_array_into(is, p); });
    if (has_ema) {
        std::vector<Tensor> ema;
        ck.net.for_each_param([&](const Tensor& p) {
            Tensor t(p.shape);
            detail::read_array_into(is, t);
            ema.push_back(std::move(t));
        });
        ck.ema = std::move(ema);
    }
    return ck;
}

}  // namespace af
