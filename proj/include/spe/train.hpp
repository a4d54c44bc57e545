#pragma once

#include <limits>

#include "spe/common.hpp"
#include "spe/data.hpp"
#include "spe/dynsys.hpp"
#include "spe/flow.hpp"

namespace spe {

// ===========================================================================
// Equivalence loss, regularizers, exact reverse-mode gradients over the flow
// layer family, and the Adam fitting loop.
// ===========================================================================

struct LossConfig {
    double lambda_det = 1e-3;
    double lambda_cent = 1e-6;
    double lambda_proj_init = -1.0;  // initial log-precision of the projection model (dim > 2)
    double eps_norm = 1e-8;          // below this, velocity pairs enter the loss unnormalized
    bool raw_det_reg = false;        // penalize |mean det| instead of |mean log-det|
};

struct OptimConfig {
    double lr = 1e-3;
    double weight_decay = 1e-3;  // never applied to lambda_proj
    bool coupled_decay = false;  // L2-in-gradient (classic Adam) instead of decoupled
    int iters = 2000;
    int batch = 0;  // 0 = full batch
    bool curriculum = false;
    double trim_fraction = 1.0;  // fraction of samples kept each iteration
    uint64_t seed = 0;
};

inline void validate(const LossConfig& c) {
    if (c.lambda_det < 0.0 || c.lambda_cent < 0.0) throw std::invalid_argument("loss: lambdas must be >= 0");
    if (!(c.eps_norm > 0.0)) throw std::invalid_argument("loss: eps_norm must be > 0");
}

inline void validate(const OptimConfig& c) {
    if (!(c.lr > 0.0)) throw std::invalid_argument("optim: lr must be > 0");
    if (c.iters < 0) throw std::invalid_argument("optim: iters must be >= 0");
    if (!(c.trim_fraction > 0.0 && c.trim_fraction <= 1.0))
        throw std::invalid_argument("optim: trim_fraction must be in (0, 1]");
}

struct LossParts {
    double eq = 0.0, det = 0.0, cent = 0.0, proj = 0.0, total = 0.0;
};

enum class FitStatus { Ok, Diverged };

struct FitResult {
    FlowMap flow;
    Prototype prototype;
    FlowConfig flow_cfg;
    LossConfig loss_cfg;
    OptimConfig opt_cfg;
    uint64_t seed = 0;
    double lambda_proj = 0.0;  // final value; meaningful only when dim > 2
    double final_equiv_loss = 0.0;
    double final_total_loss = 0.0;
    std::vector<LossParts> trace;
    FitStatus status = FitStatus::Ok;
};

// ---------------------------------------------------------------------------
// Plain-path losses (prepare once, loop samples; used by tests, adjudication
// and the CLI; the training loop has its own taped path below).
// ---------------------------------------------------------------------------

namespace detail {

/// Unit-normalized squared difference of pushed-forward and prototype
/// velocities; falls back to the raw difference when either norm is tiny.
inline double eq_term(const double* u, const double* g, int d, double eps) {
    double nu = 0.0, ng = 0.0;
    for (int i = 0; i < d; ++i) {
        nu += u[i] * u[i];
        ng += g[i] * g[i];
    }
    nu = std::sqrt(nu);
    ng = std::sqrt(ng);
    double t = 0.0;
    if (nu < eps || ng < eps) {
        for (int i = 0; i < d; ++i) {
            double diff = u[i] - g[i];
            t += diff * diff;
        }
    } else {
        for (int i = 0; i < d; ++i) {
            double diff = u[i] / nu - g[i] / ng;
            t += diff * diff;
        }
    }
    return t;
}

}  // namespace detail

inline double equivalence_loss(const FlowMap& H, const Prototype& p, const SampleSet& s) {
    if (s.size() < 1) throw std::invalid_argument("equivalence_loss: empty sample set");
    if (s.dim() != H.dim || p.dim != H.dim) throw std::invalid_argument("equivalence_loss: dim mismatch");
    LossConfig def;
    auto pf = prepare(H);
    Vec y(H.dim), u(H.dim), g(H.dim);
    double acc = 0.0;
    for (int i = 0; i < s.size(); ++i) {
        jvp(H, pf, s.positions.row(i), s.velocities.row(i), y.data(), u.data());
        prototype_field(p, y.data(), g.data());
        acc += detail::eq_term(u.data(), g.data(), H.dim, def.eps_norm);
    }
    return acc / s.size();
}

/// P(x; H) = H^{-1}([H(x)]_1, [H(x)]_2, 0, ..., 0)
inline Vec projection(const FlowMap& H, const Vec& x) {
    if (H.dim <= 2) throw std::invalid_argument("projection: requires dim > 2");
    Vec y = forward(H, x);
    for (int j = 2; j < H.dim; ++j) y[j] = 0.0;
    return inverse(H, y);
}

inline double projection_loss(const FlowMap& H, const SampleSet& s, double lambda_proj) {
    if (H.dim <= 2) throw std::invalid_argument("projection_loss: requires dim > 2");
    auto pf = prepare(H);
    Vec y(H.dim), px(H.dim);
    double mse = 0.0;
    for (int i = 0; i < s.size(); ++i) {
        forward(H, pf, s.positions.row(i), y.data());
        for (int j = 2; j < H.dim; ++j) y[j] = 0.0;
        inverse(H, pf, y.data(), px.data());
        double r2 = 0.0;
        for (int j = 0; j < H.dim; ++j) {
            double r = s.positions(i, j) - px[j];
            r2 += r * r;
        }
        mse += r2;
    }
    const int n = s.size();
    return std::exp(lambda_proj) * mse / n - lambda_proj / n;
}

inline LossParts full_loss(const FlowMap& H, const Prototype& p, const SampleSet& s, const LossConfig& cfg,
                           double lambda_proj = 0.0) {
    LossParts parts;
    parts.eq = equivalence_loss(H, p, s);
    auto pf = prepare(H);
    double acc = 0.0;
    for (int i = 0; i < s.size(); ++i) {
        double ld = log_det(H, pf, s.positions.row(i));
        acc += cfg.raw_det_reg ? std::exp(ld) : ld;
    }
    parts.det = cfg.lambda_det * std::fabs(acc / s.size());
    Vec zero(H.dim, 0.0), c(H.dim);
    inverse(H, pf, zero.data(), c.data());
    Vec xbar = position_mean(s);
    double cd = 0.0;
    for (int j = 0; j < H.dim; ++j) cd += (xbar[j] - c[j]) * (xbar[j] - c[j]);
    parts.cent = cfg.lambda_cent * cd;
    parts.proj = H.dim > 2 ? projection_loss(H, s, lambda_proj) : 0.0;
    parts.total = parts.eq + parts.det + parts.cent + parts.proj;
    return parts;
}

// ---------------------------------------------------------------------------
// Reverse-mode gradient machinery. Forward passes record per-sample tapes
// (layer inputs, tangents, trig tables); the backward pass walks the layer
// stack with hand-derived vector-Jacobian products.
// ---------------------------------------------------------------------------

namespace detail {

/// Flat-vector offset of each layer's parameter block.
struct ParamLayout {
    std::vector<size_t> offset;  // per layer; ~0 for ActNorm
    size_t total = 0;
};

inline ParamLayout param_layout(const FlowMap& H) {
    ParamLayout lo;
    lo.offset.assign(H.layers.size(), size_t(-1));
    size_t p = 0;
    for (size_t i = 0; i < H.layers.size(); ++i) {
        if (auto* af = std::get_if<AffineLayer>(&H.layers[i])) {
            lo.offset[i] = p;
            p += af->W.size() + 1 + af->mu.size();
        } else if (auto* fc = std::get_if<FFCouplingLayer>(&H.layers[i])) {
            lo.offset[i] = p;
            p += fc->fs.theta.size() + fc->fs.phase.size() + fc->ft.theta.size() + fc->ft.phase.size();
        }
    }
    lo.total = p;
    return lo;
}

/// Training-time per-layer record: values needed again in the backward pass.
struct CouplingTape {
    FFTrig trig_s, trig_t;
    Vec s_raw, s, es, dcl;  // clamped scale pipeline
    Vec a;                  // Js * v_cond (tangent path)
    Vec t, q;               // translation value / Jt * v_cond (scratch)
};

struct SampleTape {
    Mat z;  // (L+1) x d layer inputs/outputs along the forward chain
    Mat v;  // (L+1) x d tangent chain
    std::vector<CouplingTape> ct;   // per coupling layer, forward chain
    double logdet = 0.0;
    Vec g;                          // prototype field at z[L]
    // projection chain (dim > 2): w[L] = masked H(x), w[0] = P(x)
    Mat w;
    std::vector<CouplingTape> ict;
    double res2 = 0.0;
};

inline void coupling_scales_tape(const FFCouplingLayer& l, const CouplingPrep& pp, const double* xc,
                                 CouplingTape& tc) {
    const int n = l.tr_len();
    ff_trig(l.fs, l.omega(), xc, pp.ps, tc.trig_s);
    ff_trig(l.ft, l.omega(), xc, pp.pt, tc.trig_t);
    tc.s_raw.resize(n);
    tc.s.resize(n);
    tc.es.resize(n);
    tc.dcl.resize(n);
    tc.t.resize(n);
    ff_value(l.fs, tc.trig_s, tc.s_raw.data());
    ff_value(l.ft, tc.trig_t, tc.t.data());
    for (int o = 0; o < n; ++o) {
        tc.s[o] = clamp_val(tc.s_raw[o], l.clamp);
        tc.es[o] = std::exp(tc.s[o]);
        tc.dcl[o] = clamp_deriv(tc.s[o], l.clamp);
    }
}

inline void coupling_jvp_tape(const FFCouplingLayer& l, const CouplingPrep& pp, const double* x, const double* v,
                              double* y, double* w, CouplingTape& tc) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    coupling_scales_tape(l, pp, x + co, tc);
    tc.a.resize(tn);
    tc.q.resize(tn);
    ff_jvp(l.fs, l.omega(), tc.trig_s, v + co, tc.a.data());
    ff_jvp(l.ft, l.omega(), tc.trig_t, v + co, tc.q.data());
    for (int j = 0; j < cn; ++j) {
        y[co + j] = x[co + j];
        w[co + j] = v[co + j];
    }
    for (int o = 0; o < tn; ++o) {
        y[to + o] = tc.es[o] * x[to + o] + tc.t[o];
        w[to + o] = tc.es[o] * (x[to + o] * tc.dcl[o] * tc.a[o] + v[to + o]) + tc.q[o];
    }
}

inline void coupling_inverse_tape(const FFCouplingLayer& l, const CouplingPrep& pp, const double* y, double* x,
                                  CouplingTape& tc) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    coupling_scales_tape(l, pp, y + co, tc);
    for (int j = 0; j < cn; ++j) x[co + j] = y[co + j];
    for (int o = 0; o < tn; ++o) x[to + o] = (y[to + o] - tc.t[o]) / tc.es[o];
}

/// Backward of the cosine feature map. uval flows through the value path
/// F(x), utan through the tangent path (dF/dx) vc. Accumulates parameter
/// gradients and the input/tangent cotangents.
inline void ff_backward(const FeatureMap& fm, double omega, const FFTrig& tr, const double* vc,
                        const double* uval, const double* utan, double* gtheta, double* gphase, double* gxc,
                        double* gvc) {
    const int K = fm.K, in = fm.in, n = fm.out;
    for (int k = 0; k < K; ++k) {
        const double kw = omega * (k + 1);
        const double* ck = tr.c.data() + size_t(k) * in;
        const double* sk = tr.s.data() + size_t(k) * in;
        const double* th = fm.theta.data() + size_t(k) * n * in;
        double* gth = gtheta + size_t(k) * n * in;
        for (int j = 0; j < in; ++j) {
            double S1 = 0.0, S2 = 0.0;
            for (int o = 0; o < n; ++o) {
                double t = th[size_t(o) * in + j];
                if (uval) S1 += t * uval[o];
                if (utan) S2 += t * utan[o];
            }
            double ang = 0.0;
            if (uval) {
                ang -= sk[j] * S1;
                for (int o = 0; o < n; ++o) gth[size_t(o) * in + j] += uval[o] * ck[j];
            }
            if (utan) {
                ang += ck[j] * (-kw * vc[j] * S2);
                gvc[j] += -kw * sk[j] * S2;
                double f = -kw * sk[j] * vc[j];
                for (int o = 0; o < n; ++o) gth[size_t(o) * in + j] += f * utan[o];
            }
            gphase[size_t(k) * in + j] += ang;
            gxc[j] += kw * ang;
        }
    }
}

/// Woodbury solve of M t = b (no shift), reusing the prepared factorization.
inline void solve_M(const AffineLayer& l, const AffinePrep& p, const double* b, double* t, Vec& scratch_q) {
    const int d = l.d, q = l.q;
    scratch_q.resize(q);
    for (int a = 0; a < q; ++a) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += l.W[size_t(i) * q + a] * b[i];
        scratch_q[a] = s;
    }
    chol_solve(p.Lc.a.data(), q, scratch_q.data());
    for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int a = 0; a < q; ++a) s += l.W[size_t(i) * q + a] * scratch_q[a];
        t[i] = (b[i] - s) / p.eps;
    }
}

/// Coupling gradient slices within its flat parameter block.
struct CouplingGradView {
    double *ths, *phs, *tht, *pht;
};

inline CouplingGradView coupling_grad_view(const FFCouplingLayer& l, double* g) {
    CouplingGradView v;
    v.ths = g;
    v.phs = v.ths + l.fs.theta.size();
    v.tht = v.phs + l.fs.phase.size();
    v.pht = v.tht + l.ft.theta.size();
    return v;
}

/// Reused scratch for the per-sample backward kernels.
struct BackScratch {
    Vec gshat, ga, gq, gt, gxc, gvc;
    Vec p1, p2, p3, p4;
};

/// Backward through the joint (value, tangent) coupling pass, including the
/// layer's log-det contribution (ld_mult scales d logdet / d s).
inline void coupling_backward(const FFCouplingLayer& l, CouplingTape& tc, const double* x, const double* v,
                              const double* gy, const double* gw, double ld_mult, double* gx, double* gv,
                              double* gparams, BackScratch& bs) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    const double smax = l.clamp;
    auto gvw = coupling_grad_view(l, gparams);

    // pass-through part
    for (int j = 0; j < cn; ++j) {
        gx[co + j] = gy[co + j];
        gv[co + j] = gw[co + j];
    }
    // transformed part and the scale pipeline
    bs.gshat.resize(tn);
    bs.ga.resize(tn);
    bs.gq.resize(tn);
    bs.gt.resize(tn);
    for (int o = 0; o < tn; ++o) {
        double e = tc.es[o], p = tc.dcl[o], a = tc.a[o], xt = x[to + o], vt = v[to + o];
        gx[to + o] = e * gy[to + o] + e * p * a * gw[to + o];
        gv[to + o] = e * gw[to + o];
        bs.gt[o] = gy[to + o];
        bs.ga[o] = e * p * xt * gw[to + o];
        bs.gq[o] = gw[to + o];
        double gs = e * (xt * gy[to + o] + (xt * p * a + vt) * gw[to + o]) + ld_mult;
        double gp = e * a * xt * gw[to + o];
        double gpp = smax > 0.0 ? -2.0 * tc.s[o] * p / (smax * smax) : 0.0;
        bs.gshat[o] = p * gs + gpp * gp;
    }
    // feature maps: fs takes (value: gshat, tangent: ga), ft takes (gt, gq)
    bs.gxc.assign(cn, 0.0);
    bs.gvc.assign(cn, 0.0);
    ff_backward(l.fs, l.omega(), tc.trig_s, v + co, bs.gshat.data(), bs.ga.data(), gvw.ths, gvw.phs,
                bs.gxc.data(), bs.gvc.data());
    ff_backward(l.ft, l.omega(), tc.trig_t, v + co, bs.gt.data(), bs.gq.data(), gvw.tht, gvw.pht, bs.gxc.data(),
                bs.gvc.data());
    for (int j = 0; j < cn; ++j) {
        gx[co + j] += bs.gxc[j];
        gv[co + j] += bs.gvc[j];
    }
}

/// Backward through the coupling inverse x = (y_tr - t(y_c)) / e^{s(y_c)}.
inline void coupling_inv_backward(const FFCouplingLayer& l, CouplingTape& tc, const double* xout,
                                  const double* gx, double* gy, double* gparams, BackScratch& bs) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    auto gvw = coupling_grad_view(l, gparams);
    bs.gshat.resize(tn);
    bs.gt.resize(tn);
    for (int j = 0; j < cn; ++j) gy[co + j] = gx[co + j];
    for (int o = 0; o < tn; ++o) {
        double inv_e = 1.0 / tc.es[o];
        gy[to + o] = gx[to + o] * inv_e;
        bs.gt[o] = -gx[to + o] * inv_e;
        double gs = -xout[to + o] * gx[to + o];
        bs.gshat[o] = tc.dcl[o] * gs;
    }
    bs.gxc.assign(cn, 0.0);
    bs.gvc.assign(cn, 0.0);
    ff_backward(l.fs, l.omega(), tc.trig_s, nullptr, bs.gshat.data(), nullptr, gvw.ths, gvw.phs, bs.gxc.data(),
                bs.gvc.data());
    ff_backward(l.ft, l.omega(), tc.trig_t, nullptr, bs.gt.data(), nullptr, gvw.tht, gvw.pht, bs.gxc.data(),
                bs.gvc.data());
    for (int j = 0; j < cn; ++j) gy[co + j] += bs.gxc[j];
}

/// Backward through y = M x + mu, w = M v.
inline void affine_backward(const AffineLayer& l, const AffinePrep& p, const double* x, const double* v,
                            const double* gy, const double* gw, double* gx, double* gv, double* gparams,
                            BackScratch& bs) {
    const int d = l.d, q = l.q;
    matvec(p.M.a.data(), d, d, gy, gx);  // M symmetric
    matvec(p.M.a.data(), d, d, gw, gv);
    double* gW = gparams;
    double* gphi = gparams + size_t(d) * q;
    double* gmu = gphi + 1;
    // Gbar_M = gy x^T + gw v^T; gW += (G + G^T) W
    bs.p1.assign(q, 0.0);
    bs.p2.assign(q, 0.0);
    bs.p3.assign(q, 0.0);
    bs.p4.assign(q, 0.0);
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < q; ++a) {
            double w = l.W[size_t(i) * q + a];
            bs.p1[a] += w * x[i];
            bs.p2[a] += w * gy[i];
            bs.p3[a] += w * v[i];
            bs.p4[a] += w * gw[i];
        }
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < q; ++a)
            gW[size_t(i) * q + a] += gy[i] * bs.p1[a] + x[i] * bs.p2[a] + gw[i] * bs.p3[a] + v[i] * bs.p4[a];
    double dphi = 0.0;
    for (int i = 0; i < d; ++i) dphi += gy[i] * x[i] + gw[i] * v[i];
    *gphi += p.eps * dphi;
    for (int i = 0; i < d; ++i) gmu[i] += gy[i];
}

/// d log det M: gW += 2 m M^{-1} W, gphi += m eps tr(M^{-1}).
inline void affine_logdet_backward(const AffineLayer& l, const AffinePrep& p, double m, double* gparams) {
    const int d = l.d, q = l.q;
    double* gW = gparams;
    double* gphi = gparams + size_t(d) * q;
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < q; ++a) gW[size_t(i) * q + a] += 2.0 * m * p.MinvW(i, a);
    *gphi += m * p.eps * p.trMinv;
}

/// Backward through x = M^{-1}(y - mu).
inline void affine_inv_backward(const AffineLayer& l, const AffinePrep& p, const double* xout, const double* gx,
                                double* gy, double* gparams, Vec& scratch_q, BackScratch& bs) {
    const int d = l.d, q = l.q;
    double* gW = gparams;
    double* gphi = gparams + size_t(d) * q;
    double* gmu = gphi + 1;
    solve_M(l, p, gx, gy, scratch_q);  // t = M^{-1} gx
    bs.p1.assign(q, 0.0);
    bs.p2.assign(q, 0.0);
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < q; ++a) {
            double w = l.W[size_t(i) * q + a];
            bs.p1[a] += w * xout[i];
            bs.p2[a] += w * gy[i];
        }
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < q; ++a) gW[size_t(i) * q + a] -= gy[i] * bs.p1[a] + xout[i] * bs.p2[a];
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += gy[i] * xout[i];
    *gphi -= p.eps * s;
    for (int i = 0; i < d; ++i) gmu[i] -= gy[i];
}

struct FitWorkspace {
    std::vector<SampleTape> tapes;
    // centering chain
    Mat cz;
    std::vector<CouplingTape> cct;
    Vec gy, gw, gx, gv, scratch_q;
    Vec ca, cb;  // inverse-chain cotangent ping-pong (must not alias gy/gw)
    BackScratch bs;
    std::vector<int> coupling_slot;  // layer index -> position in tape vectors
    int n_couplings = 0;
};

inline void ensure_shape(Mat& m, int r, int c) {
    if (m.rows != r || m.cols != c) m = Mat(r, c);
}

inline void init_workspace(FitWorkspace& ws, const FlowMap& H) {
    ws.coupling_slot.assign(H.layers.size(), -1);
    ws.n_couplings = 0;
    for (size_t i = 0; i < H.layers.size(); ++i)
        if (std::holds_alternative<FFCouplingLayer>(H.layers[i])) ws.coupling_slot[i] = ws.n_couplings++;
    const int d = H.dim;
    ws.gy.resize(d);
    ws.gw.resize(d);
    ws.gx.resize(d);
    ws.gv.resize(d);
    ws.ca.resize(d);
    ws.cb.resize(d);
}

/// Forward (value + tangent + logdet [+ projection chain]) for one sample.
inline void forward_tape(const FlowMap& H, const PreparedFlow& pf, const FitWorkspace& ws, const double* x,
                         const double* xdot, bool with_proj, SampleTape& tp) {
    const int d = H.dim;
    const int L = int(H.layers.size());
    ensure_shape(tp.z, L + 1, d);
    ensure_shape(tp.v, L + 1, d);
    tp.ct.resize(ws.n_couplings);
    std::copy(x, x + d, tp.z.row(0));
    std::copy(xdot, xdot + d, tp.v.row(0));
    tp.logdet = 0.0;
    for (int l = 0; l < L; ++l) {
        const double* zx = tp.z.row(l);
        const double* zv = tp.v.row(l);
        double* nx = tp.z.row(l + 1);
        double* nv = tp.v.row(l + 1);
        if (auto* an = std::get_if<ActNormLayer>(&H.layers[l])) {
            const auto& p = std::get<ActNormPrep>(pf.layers[l]);
            layer_forward(*an, p, zx, nx);
            for (int i = 0; i < d; ++i) nv[i] = zv[i] * p.inv_std[i];
            tp.logdet += p.logdet;
        } else if (auto* af = std::get_if<AffineLayer>(&H.layers[l])) {
            const auto& p = std::get<AffinePrep>(pf.layers[l]);
            layer_forward(*af, p, zx, nx);
            matvec(p.M.a.data(), d, d, zv, nv);
            tp.logdet += p.logdet;
        } else {
            const auto& lc = std::get<FFCouplingLayer>(H.layers[l]);
            auto& tc = tp.ct[ws.coupling_slot[l]];
            coupling_jvp_tape(lc, std::get<CouplingPrep>(pf.layers[l]), zx, zv, nx, nv, tc);
            for (double sv : tc.s) tp.logdet += sv;
        }
        if (!all_finite(std::span<const double>(nx, d))) throw NonFiniteError(l);
    }
    if (with_proj) {
        ensure_shape(tp.w, L + 1, d);
        tp.ict.resize(ws.n_couplings);
        double* top = tp.w.row(L);
        std::copy(tp.z.row(L), tp.z.row(L) + d, top);
        for (int j = 2; j < d; ++j) top[j] = 0.0;
        for (int l = L; l-- > 0;) {
            const double* cur = tp.w.row(l + 1);
            double* nxt = tp.w.row(l);
            if (auto* an = std::get_if<ActNormLayer>(&H.layers[l]))
                layer_inverse(*an, std::get<ActNormPrep>(pf.layers[l]), cur, nxt);
            else if (auto* af = std::get_if<AffineLayer>(&H.layers[l]))
                layer_inverse(*af, std::get<AffinePrep>(pf.layers[l]), cur, nxt);
            else
                coupling_inverse_tape(std::get<FFCouplingLayer>(H.layers[l]),
                                      std::get<CouplingPrep>(pf.layers[l]), cur, nxt,
                                      tp.ict[ws.coupling_slot[l]]);
        }
        tp.res2 = 0.0;
        for (int j = 0; j < d; ++j) {
            double r = x[j] - tp.w.row(0)[j];
            tp.res2 += r * r;
        }
    }
}

/// Backward over one sample's forward chain given cotangents at the output.
/// ld_mult scales every layer's log-det contribution.
inline void backward_tape(const FlowMap& H, const PreparedFlow& pf, FitWorkspace& ws, SampleTape& tp,
                          double ld_mult, bool affine_logdet_here, const ParamLayout& lo, double* grad) {
    const int d = H.dim;
    const int L = int(H.layers.size());
    for (int l = L; l-- > 0;) {
        const double* zx = tp.z.row(l);
        const double* zv = tp.v.row(l);
        if (auto* an = std::get_if<ActNormLayer>(&H.layers[l])) {
            const auto& p = std::get<ActNormPrep>(pf.layers[l]);
            for (int i = 0; i < d; ++i) {
                ws.gx[i] = ws.gy[i] * p.inv_std[i];
                ws.gv[i] = ws.gw[i] * p.inv_std[i];
            }
        } else if (auto* af = std::get_if<AffineLayer>(&H.layers[l])) {
            const auto& p = std::get<AffinePrep>(pf.layers[l]);
            affine_backward(*af, p, zx, zv, ws.gy.data(), ws.gw.data(), ws.gx.data(), ws.gv.data(),
                            grad + lo.offset[l], ws.bs);
            if (affine_logdet_here && ld_mult != 0.0) affine_logdet_backward(*af, p, ld_mult, grad + lo.offset[l]);
        } else {
            const auto& lc = std::get<FFCouplingLayer>(H.layers[l]);
            coupling_backward(lc, tp.ct[ws.coupling_slot[l]], zx, zv, ws.gy.data(), ws.gw.data(), ld_mult,
                              ws.gx.data(), ws.gv.data(), grad + lo.offset[l], ws.bs);
        }
        ws.gy.swap(ws.gx);
        ws.gw.swap(ws.gv);
    }
}

/// Backward through an inverse chain (centering / projection paths): the
/// chain consumed a top value at layer L and produced values[0]; the
/// cotangent of values[0] comes in through ws.ca and the cotangent of the
/// top value is left in ws.ca. Uses its own ping-pong buffers so the caller
/// can hold the forward-chain cotangents in gy/gw meanwhile.
inline void inverse_chain_backward(const FlowMap& H, const PreparedFlow& pf, FitWorkspace& ws, const Mat& values,
                                   std::vector<CouplingTape>& tapes, const ParamLayout& lo, double* grad) {
    const int d = H.dim;
    const int L = int(H.layers.size());
    for (int l = 0; l < L; ++l) {
        const double* xout = values.row(l);
        if (auto* an = std::get_if<ActNormLayer>(&H.layers[l])) {
            for (int i = 0; i < d; ++i) ws.cb[i] = ws.ca[i] * an->std_[i];
        } else if (auto* af = std::get_if<AffineLayer>(&H.layers[l])) {
            affine_inv_backward(*af, std::get<AffinePrep>(pf.layers[l]), xout, ws.ca.data(), ws.cb.data(),
                                grad + lo.offset[l], ws.scratch_q, ws.bs);
        } else {
            coupling_inv_backward(std::get<FFCouplingLayer>(H.layers[l]), tapes[ws.coupling_slot[l]], xout,
                                  ws.ca.data(), ws.cb.data(), grad + lo.offset[l], ws.bs);
        }
        ws.cb.swap(ws.ca);
    }
}

/// Loss and exact gradient over the selected samples. grad must hold
/// param_count(H) (+1 when dim > 2 for lambda_proj) zeros.
inline LossParts loss_and_grad(const FlowMap& H, const PreparedFlow& pf, const Prototype& proto,
                               const SampleSet& s, const std::vector<int>& idx, const LossConfig& lc,
                               double lambda_proj, const Vec& xbar, double* grad, FitWorkspace& ws) {
    const int d = H.dim;
    const int L = int(H.layers.size());
    const int n = int(idx.size());
    const bool with_proj = d > 2;
    const ParamLayout lo = param_layout(H);
    if (int(ws.tapes.size()) < n) ws.tapes.resize(n);

    double eq_sum = 0.0, ld_sum = 0.0, det_sum = 0.0, mse_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        const int i = idx[k];
        SampleTape& tp = ws.tapes[k];
        forward_tape(H, pf, ws, s.positions.row(i), s.velocities.row(i), with_proj, tp);
        tp.g.resize(d);
        prototype_field(proto, tp.z.row(L), tp.g.data());
        eq_sum += eq_term(tp.v.row(L), tp.g.data(), d, lc.eps_norm);
        ld_sum += tp.logdet;
        if (lc.raw_det_reg) det_sum += std::exp(tp.logdet);
        if (with_proj) mse_sum += tp.res2;
    }

    LossParts parts;
    parts.eq = eq_sum / n;
    const double mean_ld = ld_sum / n;
    const double mean_det = det_sum / n;
    parts.det = lc.lambda_det * std::fabs(lc.raw_det_reg ? mean_det : mean_ld);

    // centering term: c = H^{-1}(0)
    Vec c(d);
    if (lc.lambda_cent > 0.0) {
        ensure_shape(ws.cz, L + 1, d);
        ws.cct.resize(ws.n_couplings);
        std::fill(ws.cz.row(L), ws.cz.row(L) + d, 0.0);
        for (int l = L; l-- > 0;) {
            const double* cur = ws.cz.row(l + 1);
            double* nxt = ws.cz.row(l);
            if (auto* an = std::get_if<ActNormLayer>(&H.layers[l]))
                layer_inverse(*an, std::get<ActNormPrep>(pf.layers[l]), cur, nxt);
            else if (auto* af = std::get_if<AffineLayer>(&H.layers[l]))
                layer_inverse(*af, std::get<AffinePrep>(pf.layers[l]), cur, nxt);
            else
                coupling_inverse_tape(std::get<FFCouplingLayer>(H.layers[l]),
                                      std::get<CouplingPrep>(pf.layers[l]), cur, nxt,
                                      ws.cct[ws.coupling_slot[l]]);
        }
        std::copy(ws.cz.row(0), ws.cz.row(0) + d, c.begin());
        double cd = 0.0;
        for (int j = 0; j < d; ++j) cd += (xbar[j] - c[j]) * (xbar[j] - c[j]);
        parts.cent = lc.lambda_cent * cd;
    }
    if (with_proj) parts.proj = std::exp(lambda_proj) * mse_sum / n - lambda_proj / n;
    parts.total = parts.eq + parts.det + parts.cent + parts.proj;
    if (!std::isfinite(parts.total)) return parts;  // caller treats as divergence

    // ---- backward ----
    const double sgn = lc.raw_det_reg ? (mean_det > 0.0 ? 1.0 : (mean_det < 0.0 ? -1.0 : 0.0))
                                      : (mean_ld > 0.0 ? 1.0 : (mean_ld < 0.0 ? -1.0 : 0.0));

    if (lc.lambda_cent > 0.0) {
        for (int j = 0; j < d; ++j) ws.ca[j] = 2.0 * lc.lambda_cent * (c[j] - xbar[j]);
        inverse_chain_backward(H, pf, ws, ws.cz, ws.cct, lo, grad);
    }

    double ld_mult_sum = 0.0;
    Vec ghat(d), diff(d);
    for (int k = 0; k < n; ++k) {
        const int i = idx[k];
        SampleTape& tp = ws.tapes[k];
        const double* u = tp.v.row(L);
        const double* g = tp.g.data();
        double nu = norm2(std::span<const double>(u, d));
        double ng = norm2(std::span<const double>(g, d));
        std::fill(ws.gy.begin(), ws.gy.end(), 0.0);
        std::fill(ws.gw.begin(), ws.gw.end(), 0.0);
        if (nu < lc.eps_norm || ng < lc.eps_norm) {
            for (int j = 0; j < d; ++j) {
                double dj = (2.0 / n) * (u[j] - g[j]);
                ws.gw[j] = dj;
                ghat[j] = -dj;
            }
        } else {
            double du = 0.0, dg = 0.0;
            for (int j = 0; j < d; ++j) diff[j] = u[j] / nu - g[j] / ng;
            for (int j = 0; j < d; ++j) {
                du += (u[j] / nu) * diff[j];
                dg += (g[j] / ng) * diff[j];
            }
            for (int j = 0; j < d; ++j) {
                ws.gw[j] = (2.0 / n) * (diff[j] - du * (u[j] / nu)) / nu;
                ghat[j] = (2.0 / n) * (-diff[j] + dg * (g[j] / ng)) / ng;
            }
        }
        prototype_vjp_acc(proto, tp.z.row(L), ghat.data(), ws.gy.data());

        if (with_proj) {
            const double scale = 2.0 * std::exp(lambda_proj) / n;
            for (int j = 0; j < d; ++j) ws.ca[j] = scale * (tp.w.row(0)[j] - s.positions(i, j));
            inverse_chain_backward(H, pf, ws, tp.w, tp.ict, lo, grad);
            ws.gy[0] += ws.ca[0];  // only the first two top coordinates survive the mask
            ws.gy[1] += ws.ca[1];
        }

        const double ld_mult =
            lc.raw_det_reg ? lc.lambda_det * sgn * std::exp(tp.logdet) / n : lc.lambda_det * sgn / n;
        ld_mult_sum += ld_mult;
        backward_tape(H, pf, ws, tp, ld_mult, /*affine_logdet_here=*/false, lo, grad);
    }
    // affine log-dets do not depend on the sample, so their backward runs once
    // with the summed multiplier
    if (ld_mult_sum != 0.0)
        for (int l = 0; l < L; ++l)
            if (auto* af = std::get_if<AffineLayer>(&H.layers[l]))
                affine_logdet_backward(*af, std::get<AffinePrep>(pf.layers[l]), ld_mult_sum,
                                       grad + lo.offset[l]);

    if (with_proj) grad[lo.total] += std::exp(lambda_proj) * mse_sum / n - 1.0 / n;
    return parts;
}

}  // namespace detail

/// Exact gradient of full_loss with respect to every learnable parameter
/// (flow parameters in flat order, then lambda_proj when dim > 2).
inline Vec grad(const FlowMap& H, const Prototype& p, const SampleSet& s, const LossConfig& cfg,
                double lambda_proj = 0.0) {
    validate(cfg);
    if (s.size() < 1) throw std::invalid_argument("grad: empty sample set");
    const bool with_proj = H.dim > 2;
    auto pf = prepare(H);
    detail::FitWorkspace ws;
    detail::init_workspace(ws, H);
    std::vector<int> idx(s.size());
    for (int i = 0; i < s.size(); ++i) idx[i] = i;
    Vec g(param_count(H) + (with_proj ? 1 : 0), 0.0);
    Vec xbar = position_mean(s);
    detail::loss_and_grad(H, pf, p, s, idx, cfg, lambda_proj, xbar, g.data(), ws);
    for (size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(g[i]))
            throw std::runtime_error("grad: non-finite gradient at parameter index " + std::to_string(i));
    return g;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.
// ---------------------------------------------------------------------------

namespace detail {

/// Distance to the prototype's invariant set after mapping through H;
/// used by trimmed-robust fitting.
inline double invariant_set_distance(const Prototype& p, const double* y, int d) {
    if (p.a > 0.0) {
        double r = std::hypot(y[0], y[1]);
        double trans = 0.0;
        for (int j = 2; j < d; ++j) trans += y[j] * y[j];
        return std::fabs(r - std::sqrt(p.a)) + std::sqrt(trans);
    }
    double n2 = 0.0;
    for (int j = 0; j < d; ++j) n2 += y[j] * y[j];
    return std::sqrt(n2);
}

/// Keep the `keep` candidates closest to the prototype's invariant set in
/// prototype space; distance ties break toward the lower sample index. The
/// returned indices are in ascending order.
inline std::vector<int> trim_select(const FlowMap& H, const PreparedFlow& pf, const Prototype& p,
                                    const SampleSet& s, const std::vector<int>& candidates, int keep) {
    std::vector<std::pair<double, int>> dist;
    dist.reserve(candidates.size());
    Vec y(H.dim);
    for (int i : candidates) {
        forward(H, pf, s.positions.row(i), y.data());
        dist.emplace_back(invariant_set_distance(p, y.data(), H.dim), i);
    }
    std::sort(dist.begin(), dist.end());
    std::vector<int> out;
    out.reserve(keep);
    for (int k = 0; k < keep && k < int(dist.size()); ++k) out.push_back(dist[k].second);
    std::sort(out.begin(), out.end());
    return out;
}

struct AdamState {
    Vec m, v;
    int step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One Adam step with decoupled weight decay. frozen[j] skips parameter j
/// entirely (no moment update, no decay); decay[j] selects which parameters
/// the decoupled decay touches.
inline void adam_step(AdamState& st, Vec& theta, const Vec& g, double lr, double wd,
                      const std::vector<uint8_t>* frozen, const std::vector<uint8_t>& decay) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, st.step);
    const double bc2 = 1.0 - std::pow(st.beta2, st.step);
    for (size_t j = 0; j < theta.size(); ++j) {
        if (frozen && (*frozen)[j]) continue;
        st.m[j] = st.beta1 * st.m[j] + (1.0 - st.beta1) * g[j];
        st.v[j] = st.beta2 * st.v[j] + (1.0 - st.beta2) * g[j] * g[j];
        double upd = (st.m[j] / bc1) / (std::sqrt(st.v[j] / bc2) + st.eps);
        if (decay[j]) upd += wd * theta[j];
        theta[j] -= lr * upd;
    }
}

}  // namespace detail

inline FitResult fit(const SampleSet& s, const Prototype& p, const LossConfig& loss_cfg,
                     const OptimConfig& opt_cfg, const FlowConfig& flow_cfg = {}) {
    validate(s);
    validate(p);
    validate(loss_cfg);
    validate(opt_cfg);
    if (p.dim != s.dim()) throw std::invalid_argument("fit: prototype/sample dim mismatch");

    const int d = s.dim();
    const int n = s.size();
    const bool with_proj = d > 2;

    FitResult res;
    res.prototype = p;
    res.flow_cfg = flow_cfg;
    res.loss_cfg = loss_cfg;
    res.opt_cfg = opt_cfg;
    res.seed = opt_cfg.seed;
    res.flow = init_flow(d, s, flow_cfg, opt_cfg.seed);

    const size_t np_flow = param_count(res.flow);
    const size_t np = np_flow + (with_proj ? 1 : 0);
    Vec theta(np, 0.0);
    get_params(res.flow, theta.data());
    if (with_proj) theta[np_flow] = loss_cfg.lambda_proj_init;

    // curriculum freezes coupling parameters, never lambda_proj; decoupled
    // decay touches flow parameters only
    std::vector<uint8_t> frozen = coupling_param_mask(res.flow);
    frozen.resize(np, 0);
    std::vector<uint8_t> decay(np, 1);
    if (with_proj) decay[np_flow] = 0;

    Vec g(np, 0.0);
    detail::AdamState adam(np);
    detail::FitWorkspace ws;
    detail::init_workspace(ws, res.flow);
    Vec xbar = position_mean(s);

    Rng rng = make_rng(derive_seed(opt_cfg.seed, 0x5e1ec7));  // batch subsampling stream
    std::vector<int> idx;
    const int keep = int(std::ceil(opt_cfg.trim_fraction * double(n)));
    PreparedFlow pf;
    res.trace.reserve(opt_cfg.iters);

    for (int it = 0; it < opt_cfg.iters; ++it) {
        set_params(res.flow, theta.data());
        pf = prepare(res.flow);
        double lam = with_proj ? theta[np_flow] : 0.0;

        // sample selection: optional minibatch, then optional trimming
        idx.clear();
        if (opt_cfg.batch > 0 && opt_cfg.batch < n) {
            std::vector<int> all(n);
            for (int i = 0; i < n; ++i) all[i] = i;
            for (int i = 0; i < opt_cfg.batch; ++i) {
                int j = i + int(rng() % uint64_t(n - i));
                std::swap(all[i], all[j]);
            }
            idx.assign(all.begin(), all.begin() + opt_cfg.batch);
            std::sort(idx.begin(), idx.end());
        } else {
            idx.resize(n);
            for (int i = 0; i < n; ++i) idx[i] = i;
        }
        if (keep < int(idx.size())) idx = detail::trim_select(res.flow, pf, p, s, idx, keep);

        std::fill(g.begin(), g.end(), 0.0);
        LossParts parts;
        bool blew_up = false;
        try {
            parts = detail::loss_and_grad(res.flow, pf, p, s, idx, loss_cfg, lam, xbar, g.data(), ws);
        } catch (const NonFiniteError&) {
            blew_up = true;
        }
        if (!blew_up) res.trace.push_back(parts);
        if (blew_up || !std::isfinite(parts.total) || parts.total > 1e6 || !all_finite(g)) {
            res.status = FitStatus::Diverged;
            break;
        }

        const bool freeze = opt_cfg.curriculum && it < opt_cfg.iters / 2;
        if (opt_cfg.coupled_decay) {
            for (size_t j = 0; j < np; ++j)
                if (decay[j]) g[j] += opt_cfg.weight_decay * theta[j];
            detail::adam_step(adam, theta, g, opt_cfg.lr, 0.0, freeze ? &frozen : nullptr, decay);
        } else {
            detail::adam_step(adam, theta, g, opt_cfg.lr, opt_cfg.weight_decay, freeze ? &frozen : nullptr,
                              decay);
        }
    }

    set_params(res.flow, theta.data());
    res.lambda_proj = with_proj ? theta[np_flow] : 0.0;
    if (res.status == FitStatus::Ok) {
        res.final_equiv_loss = equivalence_loss(res.flow, p, s);
        res.final_total_loss = full_loss(res.flow, p, s, loss_cfg, res.lambda_proj).total;
    } else {
        res.final_equiv_loss = std::numeric_limits<double>::infinity();
        res.final_total_loss = std::numeric_limits<double>::infinity();
    }
    return res;
}

}  // namespace spe
