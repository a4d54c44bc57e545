#pragma once

#include <atomic>
#include <functional>
#include <thread>

#include "spe/train.hpp"

namespace spe {

// ===========================================================================
// End-to-end procedures: multi-prototype classification, invariant-set
// localization, cycle-error, and evaluation sweeps.
// ===========================================================================

/// The four 2D normal-form behaviors: node/cycle in both orientations.
/// Listed cycle-first so that prototype index 0 is the counter-clockwise
/// cycle; ties in classification resolve to the lowest index.
inline std::vector<Prototype> standard_prototypes(int dim, double tau = 0.5) {
    return {Prototype{0.25, 0.5, dim, tau}, Prototype{0.25, -0.5, dim, tau}, Prototype{-0.25, 0.5, dim, tau},
            Prototype{-0.25, -0.5, dim, tau}};
}

struct Classification {
    Vec losses;  // adjudication equivalence loss per prototype (+inf on divergence)
    int winner = -1;
    bool cycle_label = false;
    std::vector<FitResult> fits;
};

struct ClassifyConfig {
    /// Fraction of samples held out of fitting and used to adjudicate the
    /// equivalence loss (deterministic interleaved split). Velocity noise is
    /// independent across samples, so a flow that memorizes the training
    /// noise gains nothing on the held-out part and the comparison stays a
    /// topology contest. 0 disables the split.
    double holdout_fraction = 0.2;
};

namespace detail {

/// Deterministic interleaved split: every stride-th sample is held out.
inline std::pair<std::vector<int>, std::vector<int>> holdout_split(int n, double fraction) {
    std::vector<int> train, val;
    if (fraction <= 0.0 || n < 5) {
        for (int i = 0; i < n; ++i) train.push_back(i);
        return {train, val};
    }
    int stride = std::max(2, int(std::lround(1.0 / fraction)));
    for (int i = 0; i < n; ++i)
        (i % stride == stride - 1 ? val : train).push_back(i);
    if (val.empty()) {
        return {std::vector<int>(train), std::vector<int>()};
    }
    return {train, val};
}

inline SampleSet subset(const SampleSet& s, const std::vector<int>& idx) {
    SampleSet out;
    out.positions = Mat(int(idx.size()), s.dim());
    out.velocities = Mat(int(idx.size()), s.dim());
    for (size_t k = 0; k < idx.size(); ++k)
        for (int j = 0; j < s.dim(); ++j) {
            out.positions(int(k), j) = s.positions(idx[k], j);
            out.velocities(int(k), j) = s.velocities(idx[k], j);
        }
    out.meta = s.meta;
    return out;
}

}  // namespace detail

namespace detail {

inline void parallel_for(int n, int jobs, const std::function<void(int)>& body) {
    jobs = std::max(1, jobs);
    if (jobs == 1 || n <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    int workers = std::min(jobs, n);
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= n) return;
                body(i);
            }
        });
    for (auto& t : pool) t.join();
}

}  // namespace detail

/// Fit every prototype independently (parallelizable) and adjudicate by the
/// smallest equivalence loss: on the held-out part of the sample set when a
/// holdout fraction is configured, on the full set otherwise. Prototype k
/// trains with seed derive_seed(opt.seed, k), so the result does not depend
/// on scheduling.
inline Classification classify(const SampleSet& s, const std::vector<Prototype>& protos,
                               const LossConfig& loss_cfg, const OptimConfig& opt_cfg,
                               const FlowConfig& flow_cfg = {}, int jobs = 1, const ClassifyConfig& cc = {}) {
    if (protos.empty()) throw std::invalid_argument("classify: empty prototype set");
    for (const auto& p : protos)
        if (p.dim != s.dim()) throw std::invalid_argument("classify: prototype dim mismatch");
    const int K = int(protos.size());

    auto [train_idx, val_idx] = detail::holdout_split(s.size(), cc.holdout_fraction);
    const bool split = !val_idx.empty();
    SampleSet train = split ? detail::subset(s, train_idx) : s;
    SampleSet val = split ? detail::subset(s, val_idx) : SampleSet{};

    Classification out;
    out.fits.resize(K);
    out.losses.assign(K, 0.0);
    detail::parallel_for(K, jobs, [&](int k) {
        OptimConfig oc = opt_cfg;
        oc.seed = derive_seed(opt_cfg.seed, uint64_t(k));
        out.fits[k] = fit(train, protos[k], loss_cfg, oc, flow_cfg);
        if (out.fits[k].status == FitStatus::Ok) {
            out.losses[k] = split ? equivalence_loss(out.fits[k].flow, protos[k], val)
                                  : out.fits[k].final_equiv_loss;
        } else {
            std::fprintf(stderr, "warning: prototype %d fit diverged; scored +inf\n", k);
            out.losses[k] = std::numeric_limits<double>::infinity();
        }
    });
    out.winner = 0;
    for (int k = 1; k < K; ++k)
        if (out.losses[k] < out.losses[out.winner]) out.winner = k;
    out.cycle_label = protos[out.winner].a > 0.0;
    return out;
}

struct InvariantSetEstimate {
    bool is_cycle = false;
    Mat points;  // m x d cycle polyline (ordered by angle) or 1 x d fixed point
};

/// Map the prototype's invariant set back to data space: m uniform angles on
/// the radius-sqrt(a) circle for cycles, the origin for nodes.
inline InvariantSetEstimate localize(const FitResult& fr, int m = 256) {
    const int d = fr.flow.dim;
    auto pf = prepare(fr.flow);
    InvariantSetEstimate est;
    if (fr.prototype.a > 0.0) {
        if (m < 3) throw std::invalid_argument("localize: cycle polyline needs m >= 3");
        est.is_cycle = true;
        est.points = Mat(m, d);
        const double r = std::sqrt(fr.prototype.a);
        Vec y(d, 0.0), x(d);
        for (int j = 0; j < m; ++j) {
            double th = 2.0 * kPi * double(j) / double(m);
            std::fill(y.begin(), y.end(), 0.0);
            y[0] = r * std::cos(th);
            y[1] = r * std::sin(th);
            inverse(fr.flow, pf, y.data(), x.data());
            std::copy(x.begin(), x.end(), est.points.row(j));
        }
    } else {
        est.is_cycle = false;
        est.points = Mat(1, d);
        Vec y(d, 0.0), x(d);
        inverse(fr.flow, pf, y.data(), x.data());
        std::copy(x.begin(), x.end(), est.points.row(0));
    }
    return est;
}

/// Variance-normalized mean squared distance between a ground-truth
/// trajectory and its radial projection onto the estimated cycle:
/// each point is pushed to prototype space, projected onto the radius
/// sqrt(a) circle (angle kept, transient coordinates zeroed) and pulled
/// back. sigma^2 is the mean over coordinates of the per-coordinate
/// population variance of the trajectory.
inline double cycle_error(const FitResult& fr, const Mat& truth, int* degenerate_count = nullptr) {
    if (!(fr.prototype.a > 0.0)) throw std::invalid_argument("cycle_error: prototype has no cycle");
    if (truth.rows < 1 || truth.cols != fr.flow.dim) throw std::invalid_argument("cycle_error: bad trajectory");
    const int d = fr.flow.dim;
    const int n = truth.rows;
    auto pf = prepare(fr.flow);
    const double r = std::sqrt(fr.prototype.a);
    Vec y(d), proj(d), back(d);
    double acc = 0.0;
    int degen = 0;
    for (int i = 0; i < n; ++i) {
        forward(fr.flow, pf, truth.row(i), y.data());
        double rho = std::hypot(y[0], y[1]);
        std::fill(proj.begin(), proj.end(), 0.0);
        if (rho < 1e-12) {
            ++degen;  // angle undefined at the axis; pinned to angle 0
            proj[0] = r;
        } else {
            proj[0] = r * y[0] / rho;
            proj[1] = r * y[1] / rho;
        }
        inverse(fr.flow, pf, proj.data(), back.data());
        for (int j = 0; j < d; ++j) {
            double t = truth.row(i)[j] - back[j];
            acc += t * t;
        }
    }
    if (degenerate_count) *degenerate_count = degen;
    // mean over coordinates of the per-coordinate population variance
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += truth(i, j);
        m /= n;
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
            double t = truth(i, j) - m;
            v += t * t;
        }
        var += v / n;
    }
    var /= d;
    return acc / (double(n) * var);
}

// ---------------------------------------------------------------------------
// Evaluation sweeps.
// ---------------------------------------------------------------------------

struct SweepInstance {
    SystemSpec spec;
    SamplingConfig sampling;
    std::vector<int> dims;  // optional projection applied before classification
};

struct InstanceRecord {
    int index = 0;
    std::string system;
    std::map<std::string, double> params;
    int n = 0;
    int dim = 0;
    double sigma = 0.0;
    uint64_t seed = 0;
    bool truth_cycle = false;
    bool pred_cycle = false;
    bool correct = false;
    bool sampling_failed = false;
    bool any_divergence = false;
    int winner = -1;
    Vec losses;
};

struct SweepReport {
    std::vector<InstanceRecord> records;

    /// (correct, counted) per system; sampling failures are not counted,
    /// fit divergences are (as misclassifications).
    std::map<std::string, std::pair<int, int>> tally() const {
        std::map<std::string, std::pair<int, int>> t;
        for (const auto& r : records) {
            if (r.sampling_failed) continue;
            auto& e = t[r.system];
            e.second += 1;
            e.first += r.correct ? 1 : 0;
        }
        return t;
    }

    double accuracy(const std::string& system) const {
        auto t = tally();
        auto it = t.find(system);
        if (it == t.end() || it->second.second == 0) return 0.0;
        return double(it->second.first) / double(it->second.second);
    }

    double overall_accuracy() const {
        int c = 0, n = 0;
        for (const auto& [k, v] : tally()) {
            c += v.first;
            n += v.second;
        }
        return n ? double(c) / n : 0.0;
    }
};

/// Classify every instance against the prototype set (re-dimensioned to the
/// instance's observed dim) and compare with the ground-truth label of the
/// full system. Instance i trains with seed derive_seed(opt.seed, i).
inline SweepReport eval_sweep(const std::vector<SweepInstance>& instances, const std::vector<Prototype>& protos,
                              const LossConfig& loss_cfg, const OptimConfig& opt_cfg,
                              const FlowConfig& flow_cfg = {}, int jobs = 1, const ClassifyConfig& cc = {}) {
    SweepReport rep;
    rep.records.resize(instances.size());
    detail::parallel_for(int(instances.size()), jobs, [&](int i) {
        const SweepInstance& inst = instances[i];
        InstanceRecord rec;
        rec.index = i;
        rec.system = kind_name(inst.spec.kind);
        rec.params = inst.spec.params;
        rec.n = inst.sampling.n_samples;
        rec.sigma = inst.sampling.noise_sigma;
        rec.seed = inst.sampling.seed;
        rec.truth_cycle = ground_truth_label(inst.spec).cycle;
        try {
            SampleSet s = sample_sparse(inst.spec, inst.sampling);
            if (!inst.dims.empty()) s = project_dims(s, inst.dims);
            rec.dim = s.dim();
            std::vector<Prototype> ps = protos;
            for (auto& p : ps) p.dim = s.dim();
            OptimConfig oc = opt_cfg;
            oc.seed = derive_seed(opt_cfg.seed, uint64_t(i));
            Classification cl = classify(s, ps, loss_cfg, oc, flow_cfg, 1, cc);
            rec.losses = cl.losses;
            rec.winner = cl.winner;
            rec.pred_cycle = cl.cycle_label;
            for (double l : cl.losses)
                if (!std::isfinite(l)) rec.any_divergence = true;
            bool all_div = true;
            for (double l : cl.losses)
                if (std::isfinite(l)) all_div = false;
            rec.correct = !all_div && rec.pred_cycle == rec.truth_cycle;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "warning: instance %d sampling failed: %s\n", i, e.what());
            rec.sampling_failed = true;
        }
        rep.records[i] = std::move(rec);
    });
    return rep;
}

}  // namespace spe
