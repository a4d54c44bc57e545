#include <catch2/catch_amalgamated.hpp>

#include "spe/pipeline.hpp"

using namespace spe;

namespace {

OptimConfig quick_optim(uint64_t seed, int iters = 600) {
    OptimConfig oc;
    oc.iters = iters;
    oc.seed = seed;
    return oc;
}

SampleSet so_samples(double a, double omega, int n, uint64_t seed, double sigma = 0.0) {
    auto so = make_system(SystemKind::SO, {{"a", a}, {"omega", omega}});
    SamplingConfig cfg;
    cfg.n_samples = n;
    cfg.t_max = 3.0;
    cfg.noise_sigma = sigma;
    cfg.seed = seed;
    return sample_sparse(so, cfg);
}

}  // namespace

TEST_CASE("standard prototype set covers both behaviors and orientations") {
    auto ps = standard_prototypes(2);
    REQUIRE(ps.size() == 4);
    CHECK(ps[0].a == 0.25);
    CHECK(ps[0].omega == 0.5);
    CHECK(ps[1].omega == -0.5);
    CHECK(ps[2].a == -0.25);
    CHECK(ps[3].a == -0.25);
    for (const auto& p : ps) CHECK(p.dim == 2);
}

TEST_CASE("classification recovers the generating prototype in at least 9 of 10 seeds") {
    auto protos = standard_prototypes(2);
    // generated from prototype 1: clockwise cycle
    int hits = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        SampleSet s = so_samples(0.25, -0.5, 400, 100 + seed);
        Classification c = classify(s, protos, LossConfig{}, quick_optim(seed), FlowConfig{}, 2);
        if (c.winner == 1) ++hits;
    }
    CHECK(hits >= 9);
}

TEST_CASE("negating velocities flips the winning orientation") {
    auto protos = standard_prototypes(2);
    SampleSet s = so_samples(0.25, 0.5, 400, 11);
    Classification c1 = classify(s, protos, LossConfig{}, quick_optim(1), FlowConfig{}, 2);
    CHECK(c1.winner == 0);

    SampleSet neg = s;
    for (auto& v : neg.velocities.a) v = -v;
    Classification c2 = classify(neg, protos, LossConfig{}, quick_optim(1), FlowConfig{}, 2);
    CHECK(c2.winner == 1);  // same cycle, opposite orientation
    CHECK(c2.cycle_label);
}

TEST_CASE("classification is deterministic and thread-count independent") {
    auto protos = standard_prototypes(2);
    SampleSet s = so_samples(0.25, 0.5, 300, 12);
    Classification a = classify(s, protos, LossConfig{}, quick_optim(2, 300), FlowConfig{}, 1);
    Classification b = classify(s, protos, LossConfig{}, quick_optim(2, 300), FlowConfig{}, 4);
    CHECK(a.winner == b.winner);
    REQUIRE(a.losses.size() == b.losses.size());
    for (size_t i = 0; i < a.losses.size(); ++i) CHECK(a.losses[i] == b.losses[i]);
    for (int k = 0; k < 4; ++k) {
        Vec pa(param_count(a.fits[k].flow)), pb(param_count(b.fits[k].flow));
        get_params(a.fits[k].flow, pa.data());
        get_params(b.fits[k].flow, pb.data());
        CHECK(pa == pb);
    }
}

TEST_CASE("winner is invariant under power-of-two velocity rescaling") {
    auto protos = standard_prototypes(2);
    SampleSet s = so_samples(0.25, 0.5, 300, 13, 0.05);
    SampleSet s4 = s;
    for (auto& v : s4.velocities.a) v *= 4.0;
    Classification c1 = classify(s, protos, LossConfig{}, quick_optim(3, 300), FlowConfig{}, 2);
    Classification c2 = classify(s4, protos, LossConfig{}, quick_optim(3, 300), FlowConfig{}, 2);
    CHECK(c1.winner == c2.winner);
    for (size_t i = 0; i < c1.losses.size(); ++i) CHECK(c1.losses[i] == c2.losses[i]);
}

TEST_CASE("localize: identity flow maps the prototype set to itself") {
    FitResult fr;
    fr.flow = make_flow(2);
    fr.prototype = Prototype{0.25, 0.5, 2, 0.5};
    auto est = localize(fr, 4);
    REQUIRE(est.is_cycle);
    REQUIRE(est.points.rows == 4);
    CHECK(est.points(0, 0) == Catch::Approx(0.5).margin(1e-12));
    CHECK(est.points(0, 1) == Catch::Approx(0.0).margin(1e-12));
    CHECK(est.points(1, 0) == Catch::Approx(0.0).margin(1e-12));
    CHECK(est.points(1, 1) == Catch::Approx(0.5).margin(1e-12));
    CHECK(est.points(2, 0) == Catch::Approx(-0.5).margin(1e-12));
    CHECK(est.points(3, 1) == Catch::Approx(-0.5).margin(1e-12));

    fr.prototype.a = -0.25;
    auto node = localize(fr);
    CHECK_FALSE(node.is_cycle);
    REQUIRE(node.points.rows == 1);
    CHECK(node.points(0, 0) == 0.0);
    CHECK(node.points(0, 1) == 0.0);
}

TEST_CASE("localized points map forward onto the analytic prototype cycle") {
    SampleSet s = so_samples(0.3, 0.6, 400, 14);
    FitResult fr = fit(s, Prototype{0.25, 0.5, 2, 0.5}, LossConfig{}, quick_optim(4, 800));
    REQUIRE(fr.status == FitStatus::Ok);
    auto est = localize(fr, 64);
    auto pf = prepare(fr.flow);
    Vec y(2);
    for (int i = 0; i < est.points.rows; ++i) {
        forward(fr.flow, pf, est.points.row(i), y.data());
        CHECK(std::fabs(std::hypot(y[0], y[1]) - 0.5) < 1e-6);
    }
}

TEST_CASE("cycle_error: zero on the localized polyline, closed form on circles") {
    FitResult fr;
    fr.flow = make_flow(2);
    fr.prototype = Prototype{0.25, 0.5, 2, 0.5};

    auto est = localize(fr, 100);
    CHECK(cycle_error(fr, est.points) <= 1e-10);

    // truth on a circle of radius 0.6 vs the prototype cycle at 0.5:
    // residual 0.1 everywhere, sigma^2 = 0.18 for uniform circle samples
    const int m = 128;
    Mat truth(m, 2);
    for (int i = 0; i < m; ++i) {
        double th = 2.0 * kPi * i / m;
        truth(i, 0) = 0.6 * std::cos(th);
        truth(i, 1) = 0.6 * std::sin(th);
    }
    double expect = 0.01 / 0.18;
    CHECK(cycle_error(fr, truth) == Catch::Approx(expect).epsilon(1e-10));
}

TEST_CASE("cycle_error is invariant when the flow absorbs a data-space rescaling") {
    SampleSet s = so_samples(0.25, 0.5, 300, 15);
    FitResult fr = fit(s, Prototype{0.25, 0.5, 2, 0.5}, LossConfig{}, quick_optim(5, 400));
    REQUIRE(fr.status == FitStatus::Ok);

    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    Trajectory tr = integrate(so, Vec{0.5, 0.0}, 12.6, 1e-2);
    double base = cycle_error(fr, tr.states);

    // scale data space by 4 and fold the same factor into ActNorm
    FitResult scaled = fr;
    auto& an = std::get<ActNormLayer>(scaled.flow.layers[0]);
    for (double& v : an.mean) v *= 4.0;
    for (double& v : an.std_) v *= 4.0;
    Mat truth4 = tr.states;
    for (auto& v : truth4.a) v *= 4.0;
    CHECK(cycle_error(scaled, truth4) == base);
}

TEST_CASE("cycle_error flags trajectory points that collapse to the cycle axis") {
    FitResult fr;
    fr.flow = make_flow(2);
    fr.prototype = Prototype{0.25, 0.5, 2, 0.5};
    Mat truth(3, 2, 0.0);  // all at the origin: angle undefined
    truth(1, 0) = 0.5;
    int degen = 0;
    cycle_error(fr, truth, &degen);
    CHECK(degen == 2);
}

TEST_CASE("eval_sweep: records, accuracy bookkeeping, determinism") {
    std::vector<SweepInstance> instances;
    SamplingConfig base;
    base.n_samples = 250;
    base.t_max = 3.0;
    base.noise_sigma = 0.1;
    for (int i = 0; i < 4; ++i) {
        SweepInstance inst;
        double a = (i % 2 == 0) ? 0.3 : -0.3;
        inst.spec = make_system(SystemKind::SO, {{"a", a}, {"omega", 0.5}});
        inst.sampling = base;
        inst.sampling.seed = 500 + i;
        instances.push_back(inst);
    }
    auto protos = standard_prototypes(2);
    SweepReport rep = eval_sweep(instances, protos, LossConfig{}, quick_optim(6, 500), FlowConfig{}, 2);
    REQUIRE(rep.records.size() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(rep.records[i].index == i);
        CHECK(rep.records[i].system == "so");
        CHECK_FALSE(rep.records[i].sampling_failed);
        CHECK(rep.records[i].losses.size() == 4);
    }
    CHECK(rep.records[0].truth_cycle);
    CHECK_FALSE(rep.records[1].truth_cycle);
    double acc = rep.accuracy("so");
    CHECK(acc >= 0.75);  // easy instances, far from the boundary

    SweepReport rep2 = eval_sweep(instances, protos, LossConfig{}, quick_optim(6, 500), FlowConfig{}, 1);
    for (size_t i = 0; i < rep.records.size(); ++i) {
        CHECK(rep.records[i].pred_cycle == rep2.records[i].pred_cycle);
        CHECK(rep.records[i].losses == rep2.records[i].losses);
    }
}

TEST_CASE("single-instance sweep produces exactly one record") {
    SweepInstance inst;
    inst.spec = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    inst.sampling.n_samples = 200;
    inst.sampling.t_max = 3.0;
    inst.sampling.seed = 1;
    SweepReport rep = eval_sweep({inst}, standard_prototypes(2), LossConfig{}, quick_optim(7, 300));
    CHECK(rep.records.size() == 1);
}
