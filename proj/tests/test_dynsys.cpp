#include <catch2/catch_amalgamated.hpp>

#include "spe/dynsys.hpp"

using namespace spe;

TEST_CASE("governing equations match a literal re-derivation at random points") {
    Rng rng = make_rng(17);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    auto pt = [&] { return Vec{u(rng), u(rng)}; };

    auto so = make_system(SystemKind::SO, {{"a", 0.3}, {"omega", -0.7}});
    auto lp = make_system(SystemKind::LienardPoly, {{"a", 0.4}, {"c", -0.2}});
    auto ls = make_system(SystemKind::LienardSigmoid, {{"a", 0.8}, {"b", 0.1}});
    auto vdp = make_system(SystemKind::VanDerPol, {{"mu", 0.9}});
    auto bz = make_system(SystemKind::BZ, {{"a", 5.0}, {"b", 3.0}});
    auto sk = make_system(SystemKind::Selkov, {{"a", 0.08}, {"b", 0.6}});

    for (int t = 0; t < 100; ++t) {
        Vec x = pt();
        double x0 = x[0], x1 = x[1];
        {
            Vec f = eval_field(so, x);
            double r2 = x0 * x0 + x1 * x1;
            CHECK(f[0] == x0 * (0.3 - r2) - (-0.7) * x1);
            CHECK(f[1] == x1 * (0.3 - r2) + (-0.7) * x0);
        }
        {
            Vec f = eval_field(lp, x);
            CHECK(f[0] == x1);
            CHECK(f[1] == -(0.4 * x0 + x0 * x0 * x0) - (-0.2 + x0 * x0) * x1);
        }
        {
            Vec f = eval_field(ls, x);
            CHECK(f[0] == x1);
            CHECK(f[1] == -(1.0 / (1.0 + std::exp(-0.8 * x0)) - 0.5) - (0.1 + x0 * x0) * x1);
        }
        {
            Vec f = eval_field(vdp, x);
            CHECK(f[0] == x1);
            CHECK(f[1] == 0.9 * x1 - x0 - x0 * x0 * x1);
        }
        {
            Vec f = eval_field(bz, x);
            double den = 1.0 + x0 * x0;
            CHECK(f[0] == 5.0 - x0 - 4.0 * x0 * x1 / den);
            CHECK(f[1] == 3.0 * x0 * (1.0 - x1 / den));
        }
        {
            Vec f = eval_field(sk, x);
            CHECK(f[0] == -x0 + 0.08 * x1 + x0 * x0 * x1);
            CHECK(f[1] == 0.6 - 0.08 * x1 - x0 * x0 * x1);
        }
    }
}

TEST_CASE("Van der Pol fixes the origin; BZ field at the origin") {
    auto vdp = make_system(SystemKind::VanDerPol, {{"mu", 1.0}});
    Vec f = eval_field(vdp, Vec{0.0, 0.0});
    CHECK(f[0] == 0.0);
    CHECK(f[1] == 0.0);

    auto bz = make_system(SystemKind::BZ, {{"a", 2.0}, {"b", 3.0}});
    Vec g = eval_field(bz, Vec{0.0, 0.0});
    CHECK(g[0] == 2.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("repressilator vanishes at its symmetric fixed point") {
    auto rep = make_system(SystemKind::Repressilator, {{"alpha", 10.0}, {"beta", 2.0}});
    double phat = repressilator_fixed_point(10.0, 0.2, 2.0);
    CHECK(std::fabs(phat - 10.0 / (1.0 + phat * phat) - 0.2) <= 1e-10);
    Vec x(6, phat);
    Vec f = eval_field(rep, x);
    for (double fi : f) CHECK(std::fabs(fi) < 1e-9);
}

TEST_CASE("prototype field: cartesian radial form") {
    Prototype p{0.25, 0.5, 2, 0.5};
    Vec f = prototype_field(p, Vec{0.5, 0.0});
    CHECK(f[0] == Catch::Approx(0.0).margin(1e-15));
    CHECK(f[1] == Catch::Approx(0.25).epsilon(1e-14));

    Vec z = prototype_field(p, Vec{0.0, 0.0});
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);

    Prototype p4{0.25, 0.5, 4, 0.5};
    Vec g = prototype_field(p4, Vec{0.0, 0.0, 1.0, -2.0});
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == -0.5);
    CHECK(g[3] == 1.0);
}

TEST_CASE("integration: zero time returns the initial state only") {
    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    Trajectory tr = integrate(so, Vec{0.3, -0.1}, 0.0, 1e-2);
    REQUIRE(tr.states.rows == 1);
    CHECK(tr.states(0, 0) == 0.3);
    CHECK(tr.states(0, 1) == -0.1);
}

TEST_CASE("on the limit cycle the motion is uniform rotation with period 2*pi/omega") {
    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    double T = 2.0 * kPi / 0.5;
    Vec end = flow_to(so, Vec{0.5, 0.0}, T, 1e-2);
    CHECK(std::fabs(end[0] - 0.5) < 1e-6);
    CHECK(std::fabs(end[1] - 0.0) < 1e-6);
}

TEST_CASE("RK4 order: halving dt cuts the endpoint error by at least 8x") {
    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    // analytic on the cycle: x(t) = sqrt(a) (cos wt, sin wt)
    double T = 20.0;
    auto err = [&](double dt) {
        Vec e = flow_to(so, Vec{0.5, 0.0}, T, dt);
        double cx = 0.5 * std::cos(0.5 * T), cy = 0.5 * std::sin(0.5 * T);
        return std::hypot(e[0] - cx, e[1] - cy);
    };
    double e1 = err(0.02), e2 = err(0.01);
    CHECK(e1 / e2 >= 8.0);
}

TEST_CASE("Van der Pol endpoint lands on the known cycle") {
    auto vdp = make_system(SystemKind::VanDerPol, {{"mu", 1.0}});
    Vec end = flow_to(vdp, Vec{2.0, 0.0}, 100.0, 1e-2);
    // oracle: a much finer integration that has settled on the cycle
    Trajectory fine = integrate(vdp, Vec{2.0, 0.0}, 100.0, 1e-4);
    int last_period = 80000;  // ~8 time units at dt=1e-4 covers > 1 period
    double best = 1e9;
    for (int i = fine.states.rows - last_period; i < fine.states.rows; ++i)
        best = std::min(best, std::hypot(end[0] - fine.states(i, 0), end[1] - fine.states(i, 1)));
    CHECK(best < 0.05);
}

TEST_CASE("sample_sparse: zero flow time keeps positions uniform and velocities exact") {
    auto vdp = make_system(SystemKind::VanDerPol, {{"mu", 0.5}});
    SamplingConfig cfg;
    cfg.n_samples = 200;
    cfg.t_min = cfg.t_max = 0.0;
    cfg.seed = 5;
    SampleSet s = sample_sparse(vdp, cfg);
    REQUIRE(s.size() == 200);
    for (int i = 0; i < s.size(); ++i) {
        CHECK(s.positions(i, 0) >= -3.0);
        CHECK(s.positions(i, 0) <= 3.0);
        Vec f = eval_field(vdp, Vec{s.positions(i, 0), s.positions(i, 1)});
        CHECK(s.velocities(i, 0) == f[0]);
        CHECK(s.velocities(i, 1) == f[1]);
    }
}

TEST_CASE("sample_sparse: long flows concentrate on the cycle radius") {
    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    SamplingConfig cfg;
    cfg.n_samples = 200;
    cfg.t_min = 25.0;  // every flow long enough to settle; with t_min=0 a ~7%
    cfg.t_max = 50.0;  // tail of short flows is still in transit
    cfg.seed = 6;
    SampleSet s = sample_sparse(so, cfg);
    int ok = 0;
    for (int i = 0; i < s.size(); ++i) {
        double r = std::hypot(s.positions(i, 0), s.positions(i, 1));
        if (std::fabs(r - 0.5) < 0.05) ++ok;
    }
    CHECK(ok >= 190);
}

TEST_CASE("sample_sparse: fixed seed reproduces bit-identical samples") {
    auto bz = make_system(SystemKind::BZ, {{"a", 6.0}, {"b", 4.0}});
    SamplingConfig cfg;
    cfg.n_samples = 50;
    cfg.t_max = 2.0;
    cfg.noise_sigma = 0.2;
    cfg.seed = 7;
    SampleSet a = sample_sparse(bz, cfg), b = sample_sparse(bz, cfg);
    CHECK(a.positions == b.positions);
    CHECK(a.velocities == b.velocities);
}

TEST_CASE("sample_sparse noise sigma is matched empirically") {
    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    SamplingConfig cfg;
    cfg.n_samples = 100000;
    cfg.t_min = cfg.t_max = 0.0;  // keeps the run cheap; noise is position-independent
    cfg.noise_sigma = 0.1;
    cfg.seed = 8;
    SampleSet s = sample_sparse(so, cfg);
    double acc = 0.0;
    long cnt = 0;
    for (int i = 0; i < s.size(); ++i) {
        Vec f = eval_field(so, Vec{s.positions(i, 0), s.positions(i, 1)});
        for (int j = 0; j < 2; ++j) {
            double dv = s.velocities(i, j) - f[j];
            acc += dv * dv;
            ++cnt;
        }
    }
    double sd = std::sqrt(acc / cnt);
    CHECK(std::fabs(sd - 0.1) / 0.1 < 0.02);
}

TEST_CASE("sample_grid shapes and determinism") {
    auto vdp = make_system(SystemKind::VanDerPol, {{"mu", 1.0}});
    SampleSet g64 = sample_grid(vdp, 64, 0.1, 9);
    CHECK(g64.size() == 4096);

    SampleSet g2 = sample_grid(vdp, 2, 0.0, 0);
    REQUIRE(g2.size() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(std::fabs(g2.positions(i, 0)) == 3.0);
        CHECK(std::fabs(g2.positions(i, 1)) == 3.0);
        Vec f = eval_field(vdp, Vec{g2.positions(i, 0), g2.positions(i, 1)});
        CHECK(g2.velocities(i, 0) == f[0]);
        CHECK(g2.velocities(i, 1) == f[1]);
    }

    SampleSet a = sample_grid(vdp, 16, 0.3, 11), b = sample_grid(vdp, 16, 0.3, 11);
    CHECK(a.velocities == b.velocities);

    auto rep = make_system(SystemKind::Repressilator, {{"alpha", 10.0}, {"beta", 2.0}});
    CHECK_THROWS_AS(sample_grid(rep, 8, 0.0, 0), std::invalid_argument);
}

TEST_CASE("project_dims: identity, selection, and shape contracts") {
    auto rep = make_system(SystemKind::Repressilator, {{"alpha", 10.0}, {"beta", 2.0}});
    SamplingConfig cfg;
    cfg.n_samples = 20;
    cfg.t_min = 3.0;
    cfg.t_max = 10.0;
    cfg.seed = 12;
    SampleSet s = sample_sparse(rep, cfg);

    SampleSet all = project_dims(s, {0, 1, 2, 3, 4, 5});
    CHECK(all.positions == s.positions);
    CHECK(all.velocities == s.velocities);

    SampleSet mrna = project_dims(s, {0, 2});
    REQUIRE(mrna.dim() == 2);
    for (int i = 0; i < s.size(); ++i) {
        CHECK(mrna.positions(i, 0) == s.positions(i, 0));
        CHECK(mrna.positions(i, 1) == s.positions(i, 2));
    }

    SampleSet one = project_dims(mrna, {1});
    CHECK(one.dim() == 1);
    CHECK(one.size() == s.size());

    // idempotence on full selection
    SampleSet again = project_dims(project_dims(s, {0, 2}), {0, 1});
    CHECK(again.positions == mrna.positions);

    CHECK_THROWS_AS(project_dims(s, {0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(project_dims(s, {7}), std::invalid_argument);
    CHECK_THROWS_AS(project_dims(s, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("closed-form labels: SO and Van der Pol") {
    CHECK(ground_truth_label(make_system(SystemKind::SO, {{"a", 0.3}, {"omega", 0.5}})).cycle);
    CHECK_FALSE(ground_truth_label(make_system(SystemKind::SO, {{"a", -0.1}, {"omega", 0.5}})).cycle);
    auto boundary = ground_truth_label(make_system(SystemKind::SO, {{"a", 0.0}, {"omega", 0.5}}));
    CHECK_FALSE(boundary.cycle);
    CHECK(boundary.on_boundary);
    CHECK_FALSE(ground_truth_label(make_system(SystemKind::VanDerPol, {{"mu", -0.5}})).cycle);
    CHECK(ground_truth_label(make_system(SystemKind::VanDerPol, {{"mu", 0.5}})).cycle);
}

TEST_CASE("numeric oracle agrees with closed forms on easy instances") {
    CHECK(label_oracle(make_system(SystemKind::VanDerPol, {{"mu", 0.8}})).cycle);
    CHECK_FALSE(label_oracle(make_system(SystemKind::VanDerPol, {{"mu", -0.5}})).cycle);
    CHECK(label_oracle(make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}})).cycle);
    CHECK_FALSE(label_oracle(make_system(SystemKind::SO, {{"a", -0.25}, {"omega", 0.5}})).cycle);
}

TEST_CASE("hopf boundary: roots, ordering, residuals, oracle flips") {
    auto hb = hopf_boundary(10.0, 0.2, 2.0);
    REQUIRE(hb.has_value());
    auto [b1, b2] = *hb;
    CHECK(b2 < b1);
    CHECK(b1 > 0.0);
    CHECK(b2 > 0.0);

    // residual of the defining fixed point
    double phat = repressilator_fixed_point(10.0, 0.2, 2.0);
    CHECK(std::fabs(phat - 10.0 / (1.0 + phat * phat) - 0.2) <= 1e-10);

    // tiny alpha: no real roots
    CHECK_FALSE(hopf_boundary(0.5, 0.2, 2.0).has_value());

    // numeric oracle flips across each root
    auto lbl = [&](double beta) {
        return label_oracle(make_system(SystemKind::Repressilator, {{"alpha", 10.0}, {"beta", beta}})).cycle;
    };
    CHECK(lbl(b1 - 0.2));
    CHECK_FALSE(lbl(b1 + 0.2));
    CHECK(lbl(b2 + 0.2));
    CHECK_FALSE(lbl(b2 - 0.2));
}

TEST_CASE("repressilator closed-form label agrees with the oracle away from the boundary") {
    // modest grid; points within 0.1 of the analytic boundary are skipped
    Vec alphas = {4.0, 8.0, 14.0, 22.0, 28.0};
    Vec betas = {0.15, 0.5, 1.5, 3.0, 6.0};
    int checked = 0, agree = 0;
    for (double al : alphas)
        for (double be : betas) {
            auto hb = hopf_boundary(al, 0.2, 2.0);
            if (hb && (std::fabs(be - hb->first) < 0.1 || std::fabs(be - hb->second) < 0.1)) continue;
            auto spec = make_system(SystemKind::Repressilator, {{"alpha", al}, {"beta", be}});
            ++checked;
            if (ground_truth_label(spec).cycle == label_oracle(spec).cycle) ++agree;
        }
    INFO("agree " << agree << "/" << checked);
    CHECK(agree == checked);
}

TEST_CASE("augmented system: identity warp reproduces the base field") {
    auto so = make_system(SystemKind::SO, {{"a", 0.25}, {"omega", 0.5}});
    auto aug = augment_system(so, make_flow(2));
    Rng rng = make_rng(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < 50; ++t) {
        Vec x = {u(rng), u(rng)};
        Vec fb = eval_field(so, x), fa = eval_field(aug, x);
        CHECK(fa[0] == Catch::Approx(fb[0]).margin(1e-12));
        CHECK(fa[1] == Catch::Approx(fb[1]).margin(1e-12));
    }
}

TEST_CASE("augmented system: label preserved, field deterministic in the seed") {
    auto so = make_system(SystemKind::SO, {{"a", -0.25}, {"omega", 0.5}});
    auto aug1 = augment_system(so, 77);
    auto aug2 = augment_system(so, 77);
    CHECK(ground_truth_label(aug1).cycle == ground_truth_label(so).cycle);
    Vec x = {0.4, -0.6};
    Vec f1 = eval_field(aug1, x), f2 = eval_field(aug2, x);
    CHECK(f1[0] == f2[0]);
    CHECK(f1[1] == f2[1]);

    auto aug3 = augment_system(so, 78);
    Vec f3 = eval_field(aug3, x);
    CHECK(f3[0] != f1[0]);  // different warp
}

TEST_CASE("integration blow-up is reported with a time") {
    // wildly out-of-range BZ parameters overflow within a few steps
    auto bad = make_system(SystemKind::BZ, {{"a", 1e150}, {"b", 1e150}});
    bool threw = false;
    try {
        integrate(bad, Vec{1.0, 1.0}, 10.0, 1e-2);
    } catch (const BlowupError& e) {
        threw = true;
        CHECK(e.time > 0.0);
    }
    CHECK(threw);
}
