#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "af/checkpoint.hpp"
#include "af/config.hpp"
#include "af/csv.hpp"
#include "af/metrics.hpp"
#include "af/svg.hpp"
#include "af/trainer.hpp"

namespace af {

struct RefusalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols = {"step",      "loss_d", "loss_g",
                                                  "lambda_ot", "transport_cost", "w1",
                                                  "monotonicity_rate", "mode_coverage", "classifier_accuracy"};
    return cols;
}

struct EvalReport {
    double w1 = NAN;
    double transport_cost = NAN;
    double monotonicity = NAN;
    double mode_coverage_max_dev = NAN;  // max |fraction - weight| over modes at k = 3
    double classifier_accuracy = NAN;
    double map_dev = NAN;            // mean |G(z) - T*(z)| over the eval grid
    double map_dev_std_units = NAN;  // same, divided by the data std
};

// max deviation between landed mode fractions and component weights
inline double mode_coverage_max_dev(const Tensor& samples, const MixtureSpec& spec, double k = 3.0) {
    const auto frac = mode_coverage(samples, spec, k);
    double dev = 0.0;
    for (std::size_t i = 0; i < frac.size(); ++i)
        dev = std::max(dev, std::abs(frac[i] - spec.components[i].weight));
    return dev;
}

inline double monotonicity_from_values(const std::vector<double>& values) {
    std::size_t bad = 0;
    for (std::size_t i = 0; i + 1 < values.size(); ++i)
        if (values[i + 1] < values[i]) ++bad;
    return static_cast<double>(bad) / static_cast<double>(values.size() - 1);
}

// Evaluates a generator's samples and (for unconditional 1D problems) its
// learned map against the exact transport oracle.
inline EvalReport evaluate_generator(const Network& g, ParamKind kind, Regime regime,
                                     const std::vector<std::pair<double, double>>& pairs,
                                     const ProblemSpec& problem, const std::vector<double>& schedule,
                                     std::size_t samples, double grid_lo, double grid_hi,
                                     std::size_t grid_points, Rng& rng, const Classifier* clf = nullptr) {
    EvalReport rep;
    Tensor z = sample(problem.prior, samples, rng);
    std::vector<int> cls;
    const bool conditional = problem.classes.has_value();
    if (conditional) {
        cls.resize(samples);
        for (std::size_t i = 0; i < samples; ++i)
            cls[i] = static_cast<int>(rng.categorical(problem.classes->class_weights));
    }
    Tensor gen = sample_generator(g, kind, regime, pairs, z, schedule, conditional ? &cls : nullptr);
    Tensor data = sample(problem.data, samples, rng);

    rep.transport_cost = transport_cost(z, gen);
    rep.mode_coverage_max_dev = mode_coverage_max_dev(gen, problem.data);
    if (problem.dim() == 1) rep.w1 = wasserstein_1d(gen, data);
    if (clf && conditional) rep.classifier_accuracy = clf->accuracy(gen, cls, 0.0);

    if (problem.dim() == 1 && !conditional) {
        const auto grid = linspace(grid_lo, grid_hi, grid_points);
        Tensor zg = Tensor::matrix(grid.size(), 1);
        for (std::size_t i = 0; i < grid.size(); ++i) zg.at(i, 0) = grid[i];
        Tensor mg = sample_generator(g, kind, regime, pairs, zg, schedule);
        rep.monotonicity = monotonicity_from_values(column(mg));
        double dev = 0.0;
        for (std::size_t i = 0; i < grid.size(); ++i)
            dev += std::abs(mg.at(i, 0) - ot_map_1d(problem.data, problem.prior, grid[i]));
        rep.map_dev = dev / static_cast<double>(grid.size());
        rep.map_dev_std_units = rep.map_dev / problem.data.std1d();
    }
    return rep;
}

struct RunOptions {
    bool force = false;
    std::optional<std::string> out_root;           // overrides env and config
    std::optional<std::uint64_t> seed_override;    // overrides config seed
};

enum class RunStatus { completed, nonfinite_abort };

struct RunOutcome {
    RunStatus status = RunStatus::completed;
    std::filesystem::path run_dir;
    std::filesystem::path checkpoint;
    EvalReport final_report;
    std::string abort_reason;
};

inline std::filesystem::path resolve_out_root(const RunConfig& cfg, const RunOptions& opts) {
    if (opts.out_root) return *opts.out_root;
    if (const char* env = std::getenv("AF_OUT_ROOT"); env && *env) return env;
    return cfg.out_dir;
}

inline std::filesystem::path run_dir_for(const RunConfig& cfg, const RunOptions& opts) {
    return resolve_out_root(cfg, opts) / std::filesystem::path(cfg.experiment + "_seed" + std::to_string(cfg.seed));
}

namespace experiment_detail {

inline void write_map_csv(const std::filesystem::path& path, const std::vector<double>& grid,
                          const std::vector<double>& g_of_z, const std::vector<double>& t_star) {
    CsvWriter w;
    w.open(path, {"z", "g_z", "t_star"});
    for (std::size_t i = 0; i < grid.size(); ++i) w.row({grid[i], g_of_z[i], t_star[i]});
}

inline void write_hist_csv(const std::filesystem::path& path, const std::vector<double>& data,
                           const std::vector<double>& gen, std::size_t bins = 80) {
    double lo = INFINITY, hi = -INFINITY;
    for (double v : data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : gen) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double width = (hi - lo) / static_cast<double>(bins);
    std::vector<double> dfrac(bins, 0.0), gfrac(bins, 0.0);
    auto drop = [&](const std::vector<double>& v, std::vector<double>& frac) {
        for (double q : v) {
            auto b = static_cast<long>((q - lo) / width);
            b = std::clamp<long>(b, 0, static_cast<long>(bins) - 1);
            frac[static_cast<std::size_t>(b)] += 1.0 / static_cast<double>(v.size());
        }
    };
    drop(data, dfrac);
    drop(gen, gfrac);
    CsvWriter w;
    w.open(path, {"bin_center", "data_frac", "gen_frac"});
    for (std::size_t b = 0; b < bins; ++b)
        w.row({lo + (static_cast<double>(b) + 0.5) * width, dfrac[b], gfrac[b]});
}

inline std::vector<double> metric_row(long step, double loss_d, double loss_g, double lambda_ot,
                                      const EvalReport& rep) {
    return {static_cast<double>(step), loss_d, loss_g, lambda_ot, rep.transport_cost, rep.w1,
            rep.monotonicity, rep.mode_coverage_max_dev, rep.classifier_accuracy};
}

}  // namespace experiment_detail

// Runs one experiment to completion (or stall-abort): training, metric CSV,
// plots and checkpoints under <out>/<experiment>_seed<seed>/. Completed runs
// leave a .done marker and are not silently overwritten.
inline RunOutcome run_experiment(RunConfig cfg, const RunOptions& opts = {}) {
    namespace fs = std::filesystem;
    using namespace experiment_detail;

    if (opts.seed_override) {
        cfg.seed = *opts.seed_override;
        cfg.train.seed = *opts.seed_override;
    }
    RunOutcome outcome;
    const fs::path dir = run_dir_for(cfg, opts);
    outcome.run_dir = dir;
    if (fs::exists(dir / ".done") && !opts.force)
        throw RefusalError("run directory " + dir.string() + " holds a completed run (use --force to redo)");
    fs::create_directories(dir);
    fs::remove(dir / ".done");
    fs::remove(dir / ".aborted");

    {
        std::ofstream os(dir / "config.resolved.cfg");
        os << serialize_config(cfg);
    }

    const ProblemSpec& problem = cfg.problem;
    const bool is_fm = cfg.method == "fm";
    std::vector<double> schedule;
    if (is_fm) {
        schedule = uniform_schedule(cfg.fm_nfe);
    } else if (cfg.train.regime == Regime::discrete) {
        schedule.push_back(1.0);
        for (const auto& p : cfg.train.pairs) schedule.push_back(p.second);
        std::sort(schedule.begin(), schedule.end(), std::greater<double>());
        schedule.erase(std::unique(schedule.begin(), schedule.end()), schedule.end());
    } else {
        schedule = {1.0, 0.0};
    }

    CsvWriter metrics;
    metrics.open(dir / "metrics.csv", metric_columns());

    // guidance assets
    std::unique_ptr<Classifier> clf;
    std::unique_ptr<VelocityModel> guide_vm;
    if (!is_fm && cfg.train.guidance.mode != CgMode::off) {
        Rng rng_clf = Rng::stream(cfg.seed, 300);
        clf = std::make_unique<Classifier>(
            train_classifier(*problem.classes, problem.prior, cfg.classifier, rng_clf));
        if (cfg.train.guidance.mode == CgMode::implicit) {
            FmTrainConfig fmc;
            fmc.steps = cfg.guidance_fm_steps;
            fmc.batch = cfg.train.batch;
            fmc.lr = cfg.train.lr_g;
            fmc.hidden = cfg.train.hidden;
            fmc.hidden_layers = cfg.train.hidden_layers;
            fmc.time_feats = cfg.train.time_feats;
            fmc.seed = cfg.seed ^ 0x5eedf10eULL;
            guide_vm = std::make_unique<VelocityModel>(train_baseline_fm(problem, fmc));
        }
    }

    const auto eval_rng = [&](long step) { return Rng::stream(cfg.seed, 70000 + static_cast<std::uint64_t>(step)); };

    if (is_fm) {
        // flow-matching baseline with the same logging cadence
        FmTrainConfig fmc;
        fmc.steps = cfg.train.steps;
        fmc.batch = cfg.train.batch;
        fmc.lr = cfg.train.lr_g;
        fmc.hidden = cfg.train.hidden;
        fmc.hidden_layers = cfg.train.hidden_layers;
        fmc.time_feats = cfg.train.time_feats;
        fmc.seed = cfg.seed;

        Rng rng_init = Rng::stream(fmc.seed, 111);
        Rng rng_data = Rng::stream(fmc.seed, 112);
        VelocityModel vm;
        {
            MlpSpec spec;
            spec.data_dim = problem.dim();
            spec.out_dim = problem.dim();
            spec.hidden = fmc.hidden;
            spec.hidden_layers = fmc.hidden_layers;
            spec.time_inputs = 1;
            spec.time_feats = fmc.time_feats;
            spec.num_classes = 0;
            vm.net = make_mlp(spec);
            init_uniform_fanin(vm.net, rng_init);
        }
        AdamW opt;
        opt.lr = fmc.lr;
        opt.attach(vm.net);

        auto eval_fm = [&](long step, double loss) {
            Rng rng = eval_rng(step);
            Tensor z = sample(problem.prior, cfg.eval_samples, rng);
            Tensor gen = euler_sample(vm, z, cfg.fm_nfe);
            Tensor data = sample(problem.data, cfg.eval_samples, rng);
            EvalReport rep;
            rep.transport_cost = transport_cost(z, gen);
            rep.mode_coverage_max_dev = mode_coverage_max_dev(gen, problem.data);
            if (problem.dim() == 1) rep.w1 = wasserstein_1d(gen, data);
            metrics.row(metric_row(step, NAN, loss, NAN, rep));
            return rep;
        };

        double last_loss = NAN;
        for (std::size_t step = 0; step < fmc.steps; ++step) {
            if (step % cfg.eval_every == 0) eval_fm(static_cast<long>(step), last_loss);
            Tensor x = sample(problem.data, fmc.batch, rng_data);
            Tensor z = sample(problem.prior, fmc.batch, rng_data);
            std::vector<double> t(fmc.batch);
            for (double& v : t) v = rng_data.uniform();
            Tensor xt = interp(x, z, t);
            Tensor tcol = Tensor::matrix(fmc.batch, 1);
            for (std::size_t i = 0; i < fmc.batch; ++i) tcol.at(i, 0) = t[i];
            auto [v_out, trace] = vm.net.forward_traced(xt, nullptr, &tcol);
            last_loss = flow_matching_loss(v_out, x, z);
            Tensor up = v_out;
            for (std::size_t i = 0; i < fmc.batch; ++i)
                for (std::size_t c = 0; c < x.cols(); ++c)
                    up.at(i, c) = 2.0 * (v_out.at(i, c) - (z.at(i, c) - x.at(i, c))) /
                                  static_cast<double>(fmc.batch);
            auto [grads, ignored] = vm.net.backward_traced(trace, up);
            opt.step(vm.net, grads);
        }

        // final artifacts
        const long final_step = static_cast<long>(fmc.steps);
        {
            Rng rng = Rng::stream(cfg.seed, 80000);
            Tensor z = sample(problem.prior, cfg.eval_final_samples, rng);
            Tensor gen = euler_sample(vm, z, cfg.fm_nfe);
            Tensor data = sample(problem.data, cfg.eval_final_samples, rng);
            outcome.final_report.transport_cost = transport_cost(z, gen);
            outcome.final_report.mode_coverage_max_dev = mode_coverage_max_dev(gen, problem.data);
            if (problem.dim() == 1) {
                outcome.final_report.w1 = wasserstein_1d(gen, data);
                write_hist_csv(dir / "hist.csv", column(data), column(gen));
                const auto grid = linspace(cfg.grid_lo, cfg.grid_hi, cfg.grid_points);
                Tensor zg = Tensor::matrix(grid.size(), 1);
                for (std::size_t i = 0; i < grid.size(); ++i) zg.at(i, 0) = grid[i];
                Tensor mg = euler_sample(vm, zg, cfg.fm_nfe);
                outcome.final_report.monotonicity = monotonicity_from_values(column(mg));
                std::vector<double> tstar(grid.size());
                for (std::size_t i = 0; i < grid.size(); ++i)
                    tstar[i] = ot_map_1d(problem.data, problem.prior, grid[i]);
                write_map_csv(dir / "map.csv", grid, column(mg), tstar);
                double dev = 0.0;
                for (std::size_t i = 0; i < grid.size(); ++i) dev += std::abs(mg.at(i, 0) - tstar[i]);
                outcome.final_report.map_dev = dev / static_cast<double>(grid.size());
                outcome.final_report.map_dev_std_units = outcome.final_report.map_dev / problem.data.std1d();
            }
            metrics.row(metric_row(final_step, NAN, last_loss, NAN, outcome.final_report));
        }
        metrics.close();

        char ckpt_name[64];
        std::snprintf(ckpt_name, sizeof ckpt_name, "checkpoint_step%06ld.ckpt", final_step);
        Checkpoint ck;
        ck.kind = "velocity";
        ck.net = vm.net;
        ck.step = final_step;
        ck.param_kind = ParamKind::direct;
        ck.regime = "none";
        ck.prior = problem.prior;
        outcome.checkpoint = dir / ckpt_name;
        save_checkpoint(outcome.checkpoint, ck);

        render_svg_for_csv(dir / "metrics.csv");
        if (fs::exists(dir / "map.csv")) render_svg_for_csv(dir / "map.csv");
        if (fs::exists(dir / "hist.csv")) render_svg_for_csv(dir / "hist.csv");
        std::ofstream(dir / ".done") << "ok\n";
        return outcome;
    }

    // adversarial path (af | gan)
    RunState st = RunState::init(problem, cfg.train);
    Rng rng_d = Rng::stream(cfg.seed, 1);
    Rng rng_g = Rng::stream(cfg.seed, 2);
    GuidanceContext gctx;
    gctx.classifier = clf.get();
    gctx.velocity = guide_vm.get();

    double last_ld = NAN, last_lg = NAN, last_lambda = NAN;
    std::size_t stall_run = 0;
    double best_w1 = INFINITY;
    std::size_t evals_since_best = 0;
    bool reload_phase = false;

    auto eval_now = [&](long step, std::size_t samples, std::uint64_t tag) {
        Rng rng = Rng::stream(cfg.seed, tag + static_cast<std::uint64_t>(step));
        Network g_eval = st.g;
        st.ema.copy_to(g_eval);
        return evaluate_generator(g_eval, cfg.train.param_kind, cfg.train.regime, cfg.train.pairs, problem,
                                  schedule, samples, cfg.grid_lo, cfg.grid_hi, cfg.grid_points, rng, clf.get());
    };

    try {
        for (std::size_t step = 0; step < cfg.train.steps; ++step) {
            if (step % cfg.eval_every == 0) {
                const EvalReport rep = eval_now(static_cast<long>(step), cfg.eval_samples, 70000);
                metrics.row(metric_row(static_cast<long>(step), last_ld, last_lg, last_lambda, rep));
                if (cfg.train.ema_reload && problem.dim() == 1 && std::isfinite(rep.w1)) {
                    if (rep.w1 < best_w1 - 1e-6) {
                        best_w1 = rep.w1;
                        evals_since_best = 0;
                    } else {
                        ++evals_since_best;
                    }
                    if (!reload_phase && evals_since_best >= cfg.train.ema_reload_patience) {
                        reload_phase = true;
                        st.opt_g.lr *= 0.5;  // plateau: continue from the average with a gentler rate
                    }
                    if (reload_phase) ema_reload(st);
                }
            }
            if (cfg.train.d_reload && step % cfg.train.d_snapshot_every == 0)
                take_d_snapshot(st, cfg.train.d_snapshot_ring);

            Batch bd = make_batch(problem, cfg.train, cfg.train.batch, rng_d);
            const StepLosses ld = train_step(st, bd, cfg.train, StepMode::dis, gctx, rng_d);
            Batch bg = make_batch(problem, cfg.train, cfg.train.batch, rng_g);
            const StepLosses lg = train_step(st, bg, cfg.train, StepMode::gen, gctx, rng_g);
            last_ld = ld.total;
            last_lg = lg.total;
            last_lambda = lg.lambda_ot;

            // stall policy: a sustained large real/fake gap means D has
            // outrun G; restore the oldest snapshot to reset the pace
            if (cfg.train.d_reload) {
                stall_run = ld.logit_gap > cfg.train.d_stall_gap ? stall_run + 1 : 0;
                if (stall_run >= cfg.train.d_stall_steps && !st.d_snapshots.empty()) {
                    d_reload(st, 0);
                    stall_run = 0;
                }
            }
            ++st.step;
        }
    } catch (const NonFiniteLossError& e) {
        metrics.close();
        std::ofstream(dir / ".aborted") << e.what() << "\n";
        outcome.status = RunStatus::nonfinite_abort;
        outcome.abort_reason = e.what();
        return outcome;
    }

    // final eval + artifacts
    const long final_step = st.step;
    outcome.final_report = eval_now(final_step, cfg.eval_final_samples, 80000);
    metrics.row(metric_row(final_step, last_ld, last_lg, last_lambda, outcome.final_report));
    metrics.close();

    Network g_eval = st.g;
    st.ema.copy_to(g_eval);
    if (problem.dim() == 1 && !problem.classes) {
        const auto grid = linspace(cfg.grid_lo, cfg.grid_hi, cfg.grid_points);
        Tensor zg = Tensor::matrix(grid.size(), 1);
        for (std::size_t i = 0; i < grid.size(); ++i) zg.at(i, 0) = grid[i];
        Tensor mg = sample_generator(g_eval, cfg.train.param_kind, cfg.train.regime, cfg.train.pairs, zg, schedule);
        std::vector<double> tstar(grid.size());
        for (std::size_t i = 0; i < grid.size(); ++i) tstar[i] = ot_map_1d(problem.data, problem.prior, grid[i]);
        write_map_csv(dir / "map.csv", grid, column(mg), tstar);
    }
    if (problem.dim() == 1) {
        Rng rng = Rng::stream(cfg.seed, 90000);
        Tensor z = sample(problem.prior, cfg.eval_final_samples, rng);
        std::vector<int> cls;
        const std::vector<int>* cp = nullptr;
        if (problem.classes) {
            cls.resize(cfg.eval_final_samples);
            for (auto& c : cls) c = static_cast<int>(rng.categorical(problem.classes->class_weights));
            cp = &cls;
        }
        Tensor gen = sample_generator(g_eval, cfg.train.param_kind, cfg.train.regime, cfg.train.pairs, z,
                                      schedule, cp);
        Tensor data = sample(problem.data, cfg.eval_final_samples, rng);
        write_hist_csv(dir / "hist.csv", column(data), column(gen));
    }

    char ckpt_name[64];
    std::snprintf(ckpt_name, sizeof ckpt_name, "checkpoint_step%06ld.ckpt", final_step);
    Checkpoint ck;
    ck.kind = "generator";
    ck.net = st.g;
    std::vector<Tensor> ema_params = st.ema.shadow;
    ck.ema = std::move(ema_params);
    ck.step = final_step;
    ck.param_kind = cfg.train.param_kind;
    ck.regime = regime_name(cfg.train.regime);
    ck.pairs = cfg.train.pairs;
    ck.prior = problem.prior;
    outcome.checkpoint = dir / ckpt_name;
    save_checkpoint(outcome.checkpoint, ck);

    render_svg_for_csv(dir / "metrics.csv");
    if (fs::exists(dir / "map.csv")) render_svg_for_csv(dir / "map.csv");
    if (fs::exists(dir / "hist.csv")) render_svg_for_csv(dir / "hist.csv");
    std::ofstream(dir / ".done") << "ok\n";
    return outcome;
}

// Loads a checkpoint and reports sample metrics (and, for unconditional 1D
// generators, the deviation from the exact transport map).
inline EvalReport eval_checkpoint(const std::filesystem::path& ckpt_path, const RunConfig& cfg,
                                  const std::vector<double>& schedule, bool use_ema, std::ostream& os) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    EvalReport rep;
    Rng rng = Rng::stream(cfg.seed, 60001);

    if (ck.kind == "velocity") {
        VelocityModel vm;
        vm.net = ck.net;
        vm.has_null_class = vm.net.num_classes > 1;
        const std::size_t nfe = schedule.size() - 1;
        Tensor z = sample(cfg.problem.prior, cfg.eval_final_samples, rng);
        Tensor gen = euler_sample(vm, z, nfe);
        Tensor data = sample(cfg.problem.data, cfg.eval_final_samples, rng);
        rep.transport_cost = transport_cost(z, gen);
        rep.mode_coverage_max_dev = mode_coverage_max_dev(gen, cfg.problem.data);
        if (cfg.problem.dim() == 1) rep.w1 = wasserstein_1d(gen, data);
    } else {
        Network net = ck.net;
        if (use_ema) {
            if (!ck.ema) throw std::runtime_error("eval: checkpoint has no EMA section");
            std::size_t i = 0;
            net.for_each_param([&](Tensor& p) { p.data = (*ck.ema)[i++].data; });
        }
        rep = evaluate_generator(net, ck.param_kind, regime_from_name(ck.regime), ck.pairs, cfg.problem,
                                 schedule, cfg.eval_final_samples, cfg.grid_lo, cfg.grid_hi, cfg.grid_points,
                                 rng);
    }

    os << "checkpoint: " << ckpt_path.string() << (use_ema ? " (ema)" : " (online)") << "\n";
    os << "w1                 " << rep.w1 << "\n";
    os << "transport_cost     " << rep.transport_cost << "\n";
    os << "monotonicity_rate  " << rep.monotonicity << "\n";
    os << "mode_coverage_dev  " << rep.mode_coverage_max_dev << "\n";
    os << "oracle_map_dev     " << rep.map_dev << " (" << rep.map_dev_std_units << " data-std units)\n";
    return rep;
}

}  // namespace af
