// Experiment runner: training, evaluation, sampling and plotting for the
// adversarial-flow laboratory. One experiment per invocation; `sweep` runs a
// family of configs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "af/experiment.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNonFinite = 3;

std::string read_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// shell-style match supporting * and ?
bool glob_match(const std::string& pat, const std::string& str) {
    std::size_t p = 0, s = 0, star = std::string::npos, mark = 0;
    while (s < str.size()) {
        if (p < pat.size() && (pat[p] == '?' || pat[p] == str[s])) {
            ++p;
            ++s;
        } else if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = s;
        } else if (star != std::string::npos) {
            p = star + 1;
            s = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
    const fs::path pat(pattern);
    const fs::path dir = pat.has_parent_path() ? pat.parent_path() : fs::path(".");
    const std::string name_pat = pat.filename().string();
    std::vector<fs::path> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && glob_match(name_pat, e.path().filename().string())) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<double> parse_schedule_arg(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

std::vector<double> default_schedule(const af::Checkpoint& ck, std::size_t nfe) {
    if (ck.regime == "single") return {1.0, 0.0};
    if (ck.regime == "discrete") {
        std::vector<double> s{1.0};
        for (const auto& p : ck.pairs) s.push_back(p.second);
        std::sort(s.begin(), s.end(), std::greater<double>());
        s.erase(std::unique(s.begin(), s.end()), s.end());
        return s;
    }
    return af::uniform_schedule(nfe == 0 ? 1 : nfe);
}

int run_one(const fs::path& config_path, const af::RunOptions& opts) {
    af::RunConfig cfg = af::parse_config(read_file(config_path));
    const af::RunOutcome out = af::run_experiment(cfg, opts);
    if (out.status == af::RunStatus::nonfinite_abort) {
        std::cerr << "aborted: " << out.abort_reason << "\n";
        return kExitNonFinite;
    }
    std::cout << "completed " << cfg.experiment << " seed " << cfg.seed << " -> " << out.run_dir.string()
              << "\n";
    std::cout << "  w1 " << out.final_report.w1 << "  transport_cost " << out.final_report.transport_cost
              << "  monotonicity " << out.final_report.monotonicity << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial flow laboratory"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, csv_path, glob_pattern, schedule_arg;
    std::string out_root;
    std::uint64_t seed = 0;
    bool have_seed = false, force = false, use_online = false;
    std::size_t nfe = 0, count = 4096;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--out", out_root, "output root (overrides AF_OUT_ROOT and the config)");
        cmd->add_flag("--force", force, "redo a completed run");
        cmd->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
            have_seed = true;
        });
    };

    auto* train = app.add_subcommand("train", "run one experiment from a config file");
    train->add_option("config", config_path, "config file")->required();
    add_common(train);

    auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint against a config's benchmark");
    evalc->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
    evalc->add_option("config", config_path, "config file")->required();
    evalc->add_option("--nfe", nfe, "uniform schedule step count");
    evalc->add_option("--schedule", schedule_arg, "explicit schedule, e.g. 1,0.5,0");
    evalc->add_flag("--online", use_online, "evaluate online weights instead of the EMA");
    evalc->add_option("--seed", seed, "evaluation seed")->each([&](const std::string&) { have_seed = true; });

    auto* samp = app.add_subcommand("sample", "draw samples from a checkpoint");
    samp->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
    samp->add_option("--nfe", nfe, "uniform schedule step count (default: the trained schedule)");
    samp->add_option("--count", count, "number of samples");
    samp->add_option("--seed", seed, "sampling seed")->each([&](const std::string&) { have_seed = true; });
    samp->add_flag("--online", use_online, "sample online weights instead of the EMA");
    std::string sample_out;
    samp->add_option("--out-file", sample_out, "write samples to a CSV file instead of stdout");

    auto* sweep = app.add_subcommand("sweep", "run every config matching a glob");
    sweep->add_option("glob", glob_pattern, "config glob, e.g. configs/fig1_*.cfg")->required();
    add_common(sweep);

    auto* plot = app.add_subcommand("plot", "regenerate the SVG plot for a CSV artifact");
    plot->add_option("csv", csv_path, "csv file produced by a run");

    CLI11_PARSE(app, argc, argv);

    try {
        af::RunOptions opts;
        opts.force = force;
        if (!out_root.empty()) opts.out_root = out_root;
        if (have_seed) opts.seed_override = seed;

        if (train->parsed()) return run_one(config_path, opts);

        if (evalc->parsed()) {
            af::RunConfig cfg = af::parse_config(read_file(config_path));
            if (have_seed) cfg.seed = seed;
            const af::Checkpoint ck = af::load_checkpoint(ckpt_path);
            std::vector<double> schedule = !schedule_arg.empty() ? parse_schedule_arg(schedule_arg)
                                           : nfe > 0             ? af::uniform_schedule(nfe)
                                                                 : default_schedule(ck, cfg.fm_nfe);
            std::ostringstream report;
            af::eval_checkpoint(ckpt_path, cfg, schedule, !use_online, report);
            std::cout << report.str();
            std::ofstream(fs::path(ckpt_path).string() + ".eval.txt") << report.str();
            return kExitOk;
        }

        if (samp->parsed()) {
            af::Checkpoint ck = af::load_checkpoint(ckpt_path);
            af::Rng rng(have_seed ? seed : 1);
            const af::MixtureSpec prior =
                ck.prior ? *ck.prior : af::MixtureSpec::standard_normal(ck.net.data_dim);
            af::Tensor z = af::sample(prior, count, rng);
            af::Tensor samples;
            if (ck.kind == "velocity") {
                af::VelocityModel vm;
                vm.net = ck.net;
                vm.has_null_class = vm.net.num_classes > 1;
                samples = af::euler_sample(vm, z, nfe == 0 ? 64 : nfe);
            } else {
                if (!use_online) {
                    if (!ck.ema) throw std::runtime_error("checkpoint has no EMA section (use --online)");
                    std::size_t i = 0;
                    ck.net.for_each_param([&](af::Tensor& p) { p.data = (*ck.ema)[i++].data; });
                }
                const std::vector<double> schedule =
                    nfe > 0 ? af::uniform_schedule(nfe) : default_schedule(ck, 0);
                samples = af::sample_generator(ck.net, ck.param_kind, af::regime_from_name(ck.regime), ck.pairs,
                                               z, schedule);
            }
            std::ostream* os = &std::cout;
            std::ofstream fo;
            if (!sample_out.empty()) {
                fo.open(sample_out);
                if (!fo) throw std::runtime_error("cannot write " + sample_out);
                os = &fo;
            }
            char buf[40];
            for (std::size_t i = 0; i < samples.rows(); ++i) {
                for (std::size_t c = 0; c < samples.cols(); ++c) {
                    std::snprintf(buf, sizeof buf, "%.17g", samples.at(i, c));
                    (*os) << (c ? "," : "") << buf;
                }
                (*os) << "\n";
            }
            return kExitOk;
        }

        if (sweep->parsed()) {
            const auto configs = expand_glob(glob_pattern);
            if (configs.empty()) throw std::runtime_error("sweep: no configs match " + glob_pattern);
            int worst = kExitOk;
            for (const auto& c : configs) {
                std::cout << "== " << c.string() << "\n";
                try {
                    worst = std::max(worst, run_one(c, opts));
                } catch (const std::exception& e) {
                    std::cerr << "error: " << e.what() << "\n";
                    worst = std::max(worst, kExitError);
                }
            }
            return worst;
        }

        if (plot->parsed()) {
            const fs::path svg = af::render_svg_for_csv(csv_path);
            std::cout << "wrote " << svg.string() << "\n";
            return kExitOk;
        }
    } catch (const af::NonFiniteLossError& e) {
        std::cerr << "aborted: " << e.what() << "\n";
        return kExitNonFinite;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
