// Batch driver for the smooth-prototype-equivalence pipeline: simulate
// benchmark systems, classify sample sets against the normal-form prototype
// bank, localize invariant sets, and run evaluation sweeps that emit
// plot-ready data.

#include <CLI11.hpp>
#include <filesystem>

#include "spe/spe.hpp"

using namespace spe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumerical = 1;
constexpr int kExitConfig = 2;

int default_jobs() {
    if (const char* env = std::getenv("SPE_JOBS")) {
        int j = std::atoi(env);
        if (j > 0) return j;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? int(hc) : 1;
}

/// 2D fits default to a short budget (the equivalence-loss race between
/// prototypes is decided early; long runs mostly memorize velocity noise),
/// higher-dimensional fits to the longer budget their warp needs.
int default_iters(int dim) { return dim > 2 ? 1000 : 400; }

struct SystemFlags {
    std::string system;
    double a = std::nan(""), omega = std::nan(""), b = std::nan(""), c = std::nan(""), mu = std::nan("");
    double alpha = std::nan(""), alpha0 = 0.2, beta = std::nan("");
    double hill = 2.0;
    uint64_t warp_seed = 0;

    SystemSpec build() const {
        auto kind = kind_from_name(system);
        if (!kind) throw std::invalid_argument("unknown system '" + system + "'");
        std::map<std::string, double> ps;
        auto need = [&](const char* name, double v) {
            if (std::isnan(v))
                throw std::invalid_argument("--" + std::string(name) + " is required for " + system);
            ps[name] = v;
        };
        switch (*kind) {
            case SystemKind::SO:
            case SystemKind::AugmentedSO:
                need("a", a);
                need("omega", omega);
                break;
            case SystemKind::LienardPoly:
                need("a", a);
                need("c", c);
                break;
            case SystemKind::LienardSigmoid:
                need("a", a);
                need("b", b);
                break;
            case SystemKind::VanDerPol:
                need("mu", mu);
                break;
            case SystemKind::BZ:
            case SystemKind::Selkov:
                need("a", a);
                need("b", b);
                break;
            case SystemKind::Repressilator:
                need("alpha", alpha);
                need("beta", beta);
                ps["alpha0"] = alpha0;
                ps["n"] = hill;
                break;
        }
        return make_system(*kind, ps, warp_seed);
    }
};

void add_system_flags(CLI::App* cmd, SystemFlags& f) {
    cmd->add_option("--system", f.system,
                    "so, augmented_so, lienard_poly, lienard_sigmoid, vanderpol, bz, selkov, repressilator")
        ->required();
    cmd->add_option("--a", f.a, "parameter a (so/lienard_*/bz/selkov)");
    cmd->add_option("--omega", f.omega, "angular speed (so)");
    cmd->add_option("--b", f.b, "parameter b (lienard_sigmoid/bz/selkov)");
    cmd->add_option("--c", f.c, "parameter c (lienard_poly)");
    cmd->add_option("--mu", f.mu, "parameter mu (vanderpol)");
    cmd->add_option("--alpha", f.alpha, "transcription rate (repressilator)");
    cmd->add_option("--alpha0", f.alpha0, "basal transcription (repressilator)");
    cmd->add_option("--beta", f.beta, "degradation ratio (repressilator)");
    cmd->add_option("--hill", f.hill, "Hill coefficient (repressilator)");
    cmd->add_option("--warp-seed", f.warp_seed, "warp seed (augmented_so)");
}

// ------------------------------------------------------------------ simulate

struct SimulateArgs {
    SystemFlags sys;
    int n = 1000;
    double t_min = std::nan("");
    double t_max = std::nan("");
    double dt = 1e-2;
    double sigma = 0.0;
    uint64_t seed = 0;
    int grid = 0;
    std::string out;
};

int run_simulate(const SimulateArgs& args) {
    SystemSpec spec = args.sys.build();
    SampleSet s;
    if (args.grid > 0) {
        s = sample_grid(spec, args.grid, args.sigma, args.seed);
    } else {
        SamplingConfig cfg;
        cfg.n_samples = args.n;
        bool rep = spec.kind == SystemKind::Repressilator;
        cfg.t_min = std::isnan(args.t_min) ? (rep ? 3.0 : 0.0) : args.t_min;
        cfg.t_max = std::isnan(args.t_max) ? (rep ? 10.0 : 3.0) : args.t_max;
        cfg.dt = args.dt;
        cfg.noise_sigma = args.sigma;
        cfg.seed = args.seed;
        s = sample_sparse(spec, cfg);
    }
    write_samples_csv(args.out, s);
    BehaviorLabel lbl = ground_truth_label(spec);
    std::printf("system=%s n=%d d=%d sigma=%s label=%s out=%s\n", kind_name(spec.kind), s.size(), s.dim(),
                fmt17(args.sigma).c_str(), label_name(lbl), args.out.c_str());
    return kExitOk;
}

// ------------------------------------------------------------------ classify

struct ClassifyArgs {
    std::string samples;
    std::string out;
    std::string localize_path;
    int m = 256;
    uint64_t seed = 0;
    int iters = 0;  // 0 = dimension default
    int jobs = 0;
    bool trace = false;
    double tau = 0.5;
    LossConfig loss;
    OptimConfig optim;
    double holdout = 0.2;
};

int run_classify(const ClassifyArgs& args) {
    SampleSet s = read_samples_csv(args.samples);
    OptimConfig oc = args.optim;
    oc.seed = args.seed;
    oc.iters = args.iters > 0 ? args.iters : default_iters(s.dim());
    int jobs = args.jobs > 0 ? args.jobs : default_jobs();

    ClassifyConfig cc;
    cc.holdout_fraction = args.holdout;
    Classification cl = classify(s, standard_prototypes(s.dim(), args.tau), args.loss, oc, FlowConfig{}, jobs, cc);

    std::printf("label=%s winner=%d\n", cl.cycle_label ? "cycle" : "node", cl.winner);
    for (size_t k = 0; k < cl.losses.size(); ++k) {
        const Prototype& p = cl.fits[k].prototype;
        std::printf("prototype %zu (a=%s omega=%s): loss=%s\n", k, fmt17(p.a).c_str(), fmt17(p.omega).c_str(),
                    fmt17(cl.losses[k]).c_str());
    }

    if (!args.out.empty()) {
        njson j = classification_to_json(cl, true, args.trace);
        j["input"] = args.samples;
        j["holdout_fraction"] = cc.holdout_fraction;
        write_file(args.out, j.dump(2) + "\n");
    }
    if (!args.localize_path.empty()) {
        auto est = localize(cl.fits[cl.winner], args.m);
        write_file(args.localize_path, invariant_to_csv(est));
    }
    bool any_finite = false;
    for (double l : cl.losses)
        if (std::isfinite(l)) any_finite = true;
    return any_finite ? kExitOk : kExitNumerical;
}

// ------------------------------------------------------------------ eval

struct EvalConfig {
    uint64_t seed = 0;
    int jobs = 0;
    std::vector<int> dims;
    struct SystemEntry {
        SystemKind kind = SystemKind::SO;
        int count = 0;
        std::map<std::string, double> params;             // fixed parameters
        std::map<std::string, std::vector<double>> grid;  // cartesian product
    };
    std::vector<SystemEntry> systems;
    SamplingConfig sampling;
    bool sampling_has_tminmax = false;
    LossConfig loss;
    OptimConfig optim;
    int iters = 0;  // 0 = dimension default
    double holdout = 0.2;
    double tau = 0.5;
    std::vector<int> sweep_n;
    std::vector<double> sweep_sigma;
    bool cycle_error_curves = false;
};

void reject_unknown(const njson& j, std::initializer_list<const char*> allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw std::runtime_error("unknown field '" + it.key() + "' in " + where);
    }
}

EvalConfig parse_eval_config(const njson& j) {
    EvalConfig cfg;
    reject_unknown(j, {"seed", "jobs", "dims", "systems", "sampling", "loss", "optim", "iters", "holdout",
                       "tau", "sweep_n", "sweep_sigma", "cycle_error"},
                   "config");
    cfg.seed = j.value("seed", uint64_t(0));
    cfg.jobs = j.value("jobs", 0);
    if (j.contains("dims")) cfg.dims = j.at("dims").get<std::vector<int>>();
    if (!j.contains("systems") || !j.at("systems").is_array() || j.at("systems").empty())
        throw std::runtime_error("config requires a nonempty 'systems' array");
    for (const auto& js : j.at("systems")) {
        reject_unknown(js, {"kind", "count", "params", "param_grid"}, "systems[]");
        EvalConfig::SystemEntry e;
        auto kind = kind_from_name(js.at("kind").get<std::string>());
        if (!kind) throw std::runtime_error("unknown system kind " + js.at("kind").dump());
        e.kind = *kind;
        e.count = js.value("count", 0);
        if (js.contains("params")) e.params = js.at("params").get<std::map<std::string, double>>();
        if (js.contains("param_grid"))
            e.grid = js.at("param_grid").get<std::map<std::string, std::vector<double>>>();
        if (e.count <= 0 && e.grid.empty()) e.count = 1;
        cfg.systems.push_back(std::move(e));
    }
    if (j.contains("sampling")) {
        const auto& sj = j.at("sampling");
        reject_unknown(sj, {"n", "t_min", "t_max", "dt", "sigma"}, "sampling");
        cfg.sampling.n_samples = sj.value("n", 1000);
        if (sj.contains("t_min") || sj.contains("t_max")) cfg.sampling_has_tminmax = true;
        cfg.sampling.t_min = sj.value("t_min", 0.0);
        cfg.sampling.t_max = sj.value("t_max", 3.0);
        cfg.sampling.dt = sj.value("dt", 1e-2);
        cfg.sampling.noise_sigma = sj.value("sigma", 0.0);
    }
    if (j.contains("loss")) {
        const auto& lj = j.at("loss");
        reject_unknown(lj, {"lambda_det", "lambda_cent", "lambda_proj_init", "eps_norm", "raw_det_reg"}, "loss");
        cfg.loss.lambda_det = lj.value("lambda_det", cfg.loss.lambda_det);
        cfg.loss.lambda_cent = lj.value("lambda_cent", cfg.loss.lambda_cent);
        cfg.loss.lambda_proj_init = lj.value("lambda_proj_init", cfg.loss.lambda_proj_init);
        cfg.loss.eps_norm = lj.value("eps_norm", cfg.loss.eps_norm);
        cfg.loss.raw_det_reg = lj.value("raw_det_reg", cfg.loss.raw_det_reg);
    }
    if (j.contains("optim")) {
        const auto& oj = j.at("optim");
        reject_unknown(oj, {"lr", "weight_decay", "coupled_decay", "batch", "curriculum", "trim_fraction"},
                       "optim");
        cfg.optim.lr = oj.value("lr", cfg.optim.lr);
        cfg.optim.weight_decay = oj.value("weight_decay", cfg.optim.weight_decay);
        cfg.optim.coupled_decay = oj.value("coupled_decay", cfg.optim.coupled_decay);
        cfg.optim.batch = oj.value("batch", cfg.optim.batch);
        cfg.optim.curriculum = oj.value("curriculum", cfg.optim.curriculum);
        cfg.optim.trim_fraction = oj.value("trim_fraction", cfg.optim.trim_fraction);
    }
    cfg.iters = j.value("iters", 0);
    cfg.holdout = j.value("holdout", 0.2);
    cfg.tau = j.value("tau", 0.5);
    if (j.contains("sweep_n")) cfg.sweep_n = j.at("sweep_n").get<std::vector<int>>();
    if (j.contains("sweep_sigma")) cfg.sweep_sigma = j.at("sweep_sigma").get<std::vector<double>>();
    cfg.cycle_error_curves = j.value("cycle_error", false);
    return cfg;
}

njson eval_config_to_json(const EvalConfig& cfg, int resolved_jobs, int resolved_iters) {
    njson systems = njson::array();
    for (const auto& e : cfg.systems) {
        njson js{{"kind", kind_name(e.kind)}, {"count", e.count}};
        if (!e.params.empty()) js["params"] = e.params;
        if (!e.grid.empty()) js["param_grid"] = e.grid;
        systems.push_back(std::move(js));
    }
    return njson{{"seed", cfg.seed},
                 {"jobs", resolved_jobs},
                 {"dims", cfg.dims},
                 {"systems", std::move(systems)},
                 {"sampling", njson{{"n", cfg.sampling.n_samples},
                                    {"t_min", cfg.sampling.t_min},
                                    {"t_max", cfg.sampling.t_max},
                                    {"dt", cfg.sampling.dt},
                                    {"sigma", cfg.sampling.noise_sigma}}},
                 {"loss", loss_cfg_to_json(cfg.loss)},
                 {"optim", optim_cfg_to_json(cfg.optim)},
                 {"iters", resolved_iters},
                 {"holdout", cfg.holdout},
                 {"tau", cfg.tau},
                 {"sweep_n", cfg.sweep_n},
                 {"sweep_sigma", cfg.sweep_sigma},
                 {"cycle_error", cfg.cycle_error_curves}};
}

/// Uniform parameter draw over the published ranges.
std::map<std::string, double> draw_params(SystemKind kind, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    switch (kind) {
        case SystemKind::SO:
        case SystemKind::AugmentedSO:
            return {{"a", -0.5 + u(rng)}, {"omega", -1.0 + 2.0 * u(rng)}};
        case SystemKind::LienardPoly:
            return {{"a", u(rng)}, {"c", -1.0 + 2.0 * u(rng)}};
        case SystemKind::LienardSigmoid:
            return {{"a", u(rng)}, {"b", -1.0 + 2.0 * u(rng)}};
        case SystemKind::VanDerPol:
            return {{"mu", -1.0 + 2.0 * u(rng)}};
        case SystemKind::BZ:
            return {{"a", 2.0 + 17.0 * u(rng)}, {"b", 2.0 + 4.0 * u(rng)}};
        case SystemKind::Selkov:
            return {{"a", 0.01 + 0.1 * u(rng)}, {"b", 0.02 + 1.18 * u(rng)}};
        case SystemKind::Repressilator:
            return {{"alpha", 30.0 * u(rng)}, {"beta", 10.0 * u(rng)}, {"alpha0", 0.2}, {"n", 2.0}};
    }
    return {};
}

std::vector<SystemSpec> expand_systems(const EvalConfig& cfg) {
    std::vector<SystemSpec> specs;
    int sys_idx = 0;
    for (const auto& e : cfg.systems) {
        if (!e.grid.empty()) {
            std::vector<std::map<std::string, double>> combos{{}};
            for (const auto& [name, values] : e.grid) {
                std::vector<std::map<std::string, double>> next;
                for (const auto& base : combos)
                    for (double v : values) {
                        auto c = base;
                        c[name] = v;
                        next.push_back(std::move(c));
                    }
                combos = std::move(next);
            }
            for (auto& c : combos) {
                auto ps = e.params;
                for (const auto& [k, v] : c) ps[k] = v;
                specs.push_back(make_system(e.kind, ps));
            }
        } else if (!e.params.empty()) {
            for (int i = 0; i < std::max(1, e.count); ++i) specs.push_back(make_system(e.kind, e.params));
        } else {
            Rng rng = make_rng(derive_seed(cfg.seed, 7000 + sys_idx));
            for (int i = 0; i < e.count; ++i) {
                auto ps = draw_params(e.kind, rng);
                uint64_t warp = e.kind == SystemKind::AugmentedSO ? derive_seed(cfg.seed, 9000 + i) : 0;
                specs.push_back(make_system(e.kind, ps, warp));
            }
        }
        ++sys_idx;
    }
    return specs;
}

std::vector<SweepInstance> build_instances(const EvalConfig& cfg, const std::vector<SystemSpec>& specs, int n,
                                           double sigma) {
    std::vector<SweepInstance> out;
    for (size_t i = 0; i < specs.size(); ++i) {
        SweepInstance inst;
        inst.spec = specs[i];
        inst.sampling = cfg.sampling;
        inst.sampling.n_samples = n;
        inst.sampling.noise_sigma = sigma;
        if (!cfg.sampling_has_tminmax && inst.spec.kind == SystemKind::Repressilator) {
            inst.sampling.t_min = 3.0;
            inst.sampling.t_max = 10.0;
        }
        inst.sampling.seed = derive_seed(cfg.seed, 100000 + i);
        if (!cfg.dims.empty() && int(cfg.dims.size()) < inst.spec.dim()) inst.dims = cfg.dims;
        out.push_back(std::move(inst));
    }
    return out;
}

/// Mean cycle error over cycle-truth instances: the better-oriented cycle
/// prototype is fit and compared against a settled reference trajectory.
njson cycle_error_point(const EvalConfig& cfg, const std::vector<SystemSpec>& specs, int n, double sigma,
                        int jobs, OptimConfig oc) {
    struct Entry {
        std::string system;
        double err = 0.0;
        bool ok = false;
    };
    std::vector<Entry> entries(specs.size());
    detail::parallel_for(int(specs.size()), jobs, [&](int i) {
        const SystemSpec& spec = specs[i];
        entries[i].system = kind_name(spec.kind);
        if (!ground_truth_label(spec).cycle) return;
        try {
            SamplingConfig sc = cfg.sampling;
            sc.n_samples = n;
            sc.noise_sigma = sigma;
            sc.seed = derive_seed(cfg.seed, 200000 + i);
            SampleSet s = sample_sparse(spec, sc);
            Prototype ccw{0.25, 0.5, s.dim(), cfg.tau}, cw{0.25, -0.5, s.dim(), cfg.tau};
            OptimConfig o1 = oc, o2 = oc;
            o1.seed = derive_seed(oc.seed, 300000 + i);
            o2.seed = derive_seed(oc.seed, 400000 + i);
            FitResult f1 = fit(s, ccw, cfg.loss, o1);
            FitResult f2 = fit(s, cw, cfg.loss, o2);
            const FitResult& best =
                (f1.status == FitStatus::Ok &&
                 (f2.status != FitStatus::Ok || f1.final_equiv_loss <= f2.final_equiv_loss))
                    ? f1
                    : f2;
            if (best.status != FitStatus::Ok) return;
            // settled reference trajectory: burn in, then one 50-unit window
            Vec x0(spec.dim());
            for (int j = 0; j < spec.dim(); ++j) x0[j] = 0.5 * (spec.box[j][0] + spec.box[j][1]) + 1e-3;
            x0 = flow_to(spec, std::move(x0), 100.0, cfg.sampling.dt);
            Trajectory tr = integrate(spec, x0, 50.0, cfg.sampling.dt);
            int m = (tr.states.rows + 9) / 10;
            Mat truth(m, spec.dim());
            for (int r = 0, w = 0; r < tr.states.rows; r += 10, ++w)
                for (int j = 0; j < spec.dim(); ++j) truth(w, j) = tr.states(r, j);
            entries[i].err = cycle_error(best, truth);
            entries[i].ok = true;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "warning: cycle-error instance %d failed: %s\n", i, e.what());
        }
    });
    std::map<std::string, std::pair<double, int>> agg;
    for (const auto& e : entries)
        if (e.ok) {
            agg[e.system].first += e.err;
            agg[e.system].second += 1;
        }
    njson out = njson::object();
    for (const auto& [sys, acc] : agg) out[sys] = acc.first / acc.second;
    return out;
}

int run_eval(const std::string& config_path, const std::string& out_dir_flag, int jobs_flag) {
    njson j = njson::parse(read_file(config_path));
    EvalConfig cfg = parse_eval_config(j);
    int jobs = jobs_flag > 0 ? jobs_flag : (cfg.jobs > 0 ? cfg.jobs : default_jobs());

    std::string out_dir = out_dir_flag.empty() ? "." : out_dir_flag;
    std::filesystem::create_directories(out_dir);

    std::vector<SystemSpec> specs = expand_systems(cfg);
    if (specs.empty()) throw std::runtime_error("config expands to zero instances");

    auto protos = standard_prototypes(2, cfg.tau);  // re-dimensioned per instance inside eval_sweep
    OptimConfig oc = cfg.optim;
    oc.seed = cfg.seed;

    ClassifyConfig cc;
    cc.holdout_fraction = cfg.holdout;

    auto instances = build_instances(cfg, specs, cfg.sampling.n_samples, cfg.sampling.noise_sigma);
    int eff_dim = instances.front().dims.empty() ? specs.front().dim() : int(instances.front().dims.size());
    oc.iters = cfg.iters > 0 ? cfg.iters : default_iters(eff_dim);

    SweepReport rep = eval_sweep(instances, protos, cfg.loss, oc, FlowConfig{}, jobs, cc);
    write_file(out_dir + "/instances.csv", sweep_records_to_csv(rep));
    njson resolved = eval_config_to_json(cfg, jobs, oc.iters);
    njson agg = sweep_aggregate_to_json(rep);
    agg["config"] = resolved;
    write_file(out_dir + "/aggregate.json", agg.dump(2) + "\n");
    write_file(out_dir + "/instances.meta.json", resolved.dump(2) + "\n");

    if (!cfg.sweep_n.empty()) {
        std::string csv = "system,n,accuracy\n";
        std::string cecsv = "system,n,cycle_error\n";
        for (int n : cfg.sweep_n) {
            auto insts = build_instances(cfg, specs, n, cfg.sampling.noise_sigma);
            SweepReport r = eval_sweep(insts, protos, cfg.loss, oc, FlowConfig{}, jobs, cc);
            for (const auto& [sys, cv] : r.tally())
                csv += sys + "," + std::to_string(n) + "," + fmt17(double(cv.first) / cv.second) + "\n";
            if (cfg.cycle_error_curves) {
                njson ce = cycle_error_point(cfg, specs, n, cfg.sampling.noise_sigma, jobs, oc);
                for (auto it = ce.begin(); it != ce.end(); ++it)
                    cecsv += it.key() + "," + std::to_string(n) + "," + fmt17(it.value().get<double>()) + "\n";
            }
        }
        write_file(out_dir + "/accuracy_vs_n.csv", csv);
        if (cfg.cycle_error_curves) write_file(out_dir + "/cycle_error_vs_n.csv", cecsv);
    }
    if (!cfg.sweep_sigma.empty()) {
        std::string csv = "system,sigma,accuracy\n";
        std::string cecsv = "system,sigma,cycle_error\n";
        for (double sg : cfg.sweep_sigma) {
            auto insts = build_instances(cfg, specs, cfg.sampling.n_samples, sg);
            SweepReport r = eval_sweep(insts, protos, cfg.loss, oc, FlowConfig{}, jobs, cc);
            for (const auto& [sys, cv] : r.tally())
                csv += sys + "," + fmt17(sg) + "," + fmt17(double(cv.first) / cv.second) + "\n";
            if (cfg.cycle_error_curves) {
                njson ce = cycle_error_point(cfg, specs, cfg.sampling.n_samples, sg, jobs, oc);
                for (auto it = ce.begin(); it != ce.end(); ++it)
                    cecsv += it.key() + "," + fmt17(sg) + "," + fmt17(it.value().get<double>()) + "\n";
            }
        }
        write_file(out_dir + "/accuracy_vs_sigma.csv", csv);
        if (cfg.cycle_error_curves) write_file(out_dir + "/cycle_error_vs_sigma.csv", cecsv);
    }

    std::printf("instances=%zu overall_accuracy=%s out=%s\n", rep.records.size(),
                fmt17(rep.overall_accuracy()).c_str(), out_dir.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"smooth prototype equivalences: fit invertible flows from vector-field samples to "
                 "normal-form prototypes, classify long-term behavior, localize invariant sets"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* csim = app.add_subcommand("simulate", "sample a benchmark vector field to CSV (+ meta sidecar)");
    add_system_flags(csim, sim.sys);
    csim->add_option("--n", sim.n, "number of samples");
    csim->add_option("--tmin", sim.t_min, "minimum flow time (default 0; repressilator 3)");
    csim->add_option("--tmax", sim.t_max, "maximum flow time (default 3; repressilator 10)");
    csim->add_option("--dt", sim.dt, "integrator step size");
    csim->add_option("--sigma", sim.sigma, "velocity noise std");
    csim->add_option("--seed", sim.seed, "RNG seed");
    csim->add_option("--grid", sim.grid, "side length: sample a regular grid instead (2D only)");
    csim->add_option("--out", sim.out, "output CSV path")->required();

    ClassifyArgs cla;
    auto* ccla = app.add_subcommand("classify", "classify a sample CSV against the four normal-form prototypes");
    ccla->add_option("samples", cla.samples, "input samples CSV")->required();
    ccla->add_option("--out", cla.out, "write classification JSON here");
    ccla->add_option("--localize", cla.localize_path, "write the winner's invariant-set CSV here");
    ccla->add_option("--m", cla.m, "cycle polyline points for --localize");
    ccla->add_option("--seed", cla.seed, "fit seed");
    ccla->add_option("--iters", cla.iters, "optimizer iterations (default 400; 1000 when d > 2)");
    ccla->add_option("--jobs", cla.jobs, "parallel prototype fits (default: cores or $SPE_JOBS)");
    ccla->add_option("--tau", cla.tau, "transient decay of high-dimensional prototypes");
    ccla->add_option("--holdout", cla.holdout, "held-out fraction for loss adjudication (0 disables)");
    ccla->add_option("--lr", cla.optim.lr, "learning rate");
    ccla->add_option("--wd", cla.optim.weight_decay, "weight decay");
    ccla->add_flag("--coupled-decay", cla.optim.coupled_decay, "classic L2-in-gradient decay");
    ccla->add_option("--batch", cla.optim.batch, "minibatch size (0 = full batch)");
    ccla->add_flag("--curriculum", cla.optim.curriculum, "freeze couplings for the first half of training");
    ccla->add_option("--trim", cla.optim.trim_fraction, "trimmed-robust fraction of samples kept");
    ccla->add_option("--lambda-det", cla.loss.lambda_det, "log-determinant regularization");
    ccla->add_option("--lambda-cent", cla.loss.lambda_cent, "centering regularization");
    ccla->add_option("--lambda-proj-init", cla.loss.lambda_proj_init, "initial projection log-precision");
    ccla->add_option("--eps-norm", cla.loss.eps_norm, "velocity normalization floor");
    ccla->add_flag("--trace", cla.trace, "embed per-iteration loss traces in the JSON output");

    std::string eval_config, eval_out;
    int eval_jobs = 0;
    auto* ceval = app.add_subcommand("eval", "run an evaluation sweep from a JSON config");
    ceval->add_option("config", eval_config, "sweep config JSON")->required();
    ceval->add_option("--out-dir", eval_out, "output directory (default: current)");
    ceval->add_option("--jobs", eval_jobs, "parallel instances (default: cores or $SPE_JOBS)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (csim->parsed()) return run_simulate(sim);
        if (ccla->parsed()) return run_classify(cla);
        if (ceval->parsed()) return run_eval(eval_config, eval_out, eval_jobs);
    } catch (const ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const BlowupError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    }
    return kExitConfig;
}
