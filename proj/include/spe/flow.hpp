#pragma once

#include <cstring>
#include <variant>

#include "spe/common.hpp"
#include "spe/data.hpp"

namespace spe {

// ===========================================================================
// Invertible flow maps H: R^d -> R^d built from three layer kinds:
//   * ActNorm      - frozen per-coordinate standardization
//   * Affine       - y = (W W^T + e^phi I) x + mu, positive-definite by
//                    construction, inverted with a rank-q Woodbury solve
//   * FFCoupling   - affine coupling whose scale/translation nets are sums of
//                    learned cosine features, so Jacobian-vector products and
//                    log-determinants come out in closed form
// ===========================================================================

struct ActNormLayer {
    Vec mean;
    Vec std_;
};

struct AffineLayer {
    int d = 0;
    int q = 0;
    Vec W;            // d x q, row-major
    double varphi = 0.0;
    Vec mu;           // d
};

/// F(x)_o = sum_k sum_j theta[k,o,j] * cos(omega*k*x_j + phase[k,j]), k = 1..K
struct FeatureMap {
    int in = 0, out = 0, K = 0;
    Vec theta;  // K*out*in, index ((k*out)+o)*in + j with k zero-based
    Vec phase;  // K*in, index k*in + j
};

struct FFCouplingLayer {
    int d = 0;
    int d1 = 0;            // size of the first split, ceil(d/2)
    bool reversed = false; // false: second half transformed; true: first half
    double range = 10.0;   // R; features live on [-R/2, R/2]
    double clamp = 5.0;    // scale bound s_max (0 disables)
    FeatureMap fs, ft;

    int cond_off() const { return reversed ? d1 : 0; }
    int cond_len() const { return reversed ? d - d1 : d1; }
    int tr_off() const { return reversed ? 0 : d1; }
    int tr_len() const { return reversed ? d1 : d - d1; }
    double omega() const { return 2.0 * kPi / range; }
};

using Layer = std::variant<ActNormLayer, AffineLayer, FFCouplingLayer>;

struct FlowMap {
    int dim = 0;
    std::vector<Layer> layers;
};

struct FlowConfig {
    int blocks = 4;
    int freqs = 5;          // K
    double range = 10.0;    // R
    int block_rank = 2;     // q of the per-block affine
    double scale_clamp = 5.0;
    double init_w_std = 1e-2;      // W entries ~ N(0, 1e-4)
    double init_theta_std = 1e-3;  // theta entries ~ N(0, 1e-6)
};

// ---------------------------------------------------------------------------
// Scale clamp: s = smax * tanh(s_raw / smax) keeps exp(s) bounded for any
// parameter values while staying the identity to first order.
// ---------------------------------------------------------------------------

inline double clamp_val(double u, double smax) { return smax > 0.0 ? smax * std::tanh(u / smax) : u; }

inline double clamp_deriv(double s_clamped, double smax) {
    if (smax <= 0.0) return 1.0;
    double r = s_clamped / smax;
    return 1.0 - r * r;
}

// ---------------------------------------------------------------------------
// Per-parameter-state caches. Affine factor matrices and phase trig tables
// depend only on parameters, so they are computed once per optimizer step.
// ---------------------------------------------------------------------------

struct AffinePrep {
    Mat M;        // W W^T + eps I
    Mat Lc;       // Cholesky factor of C = eps I_q + W^T W
    double eps = 1.0;
    double logdet = 0.0;
    Mat MinvW;    // d x q, equals W C^{-1}
    double trMinv = 0.0;
};

struct PhasePrep {
    Vec cph, sph;  // cos/sin of phase, K*in each
};

struct CouplingPrep {
    PhasePrep ps, pt;
};

struct ActNormPrep {
    Vec inv_std;
    double logdet = 0.0;
};

struct LayerPrep : std::variant<ActNormPrep, AffinePrep, CouplingPrep> {
    using std::variant<ActNormPrep, AffinePrep, CouplingPrep>::variant;
};

inline ActNormPrep prepare(const ActNormLayer& l) {
    ActNormPrep p;
    p.inv_std.resize(l.std_.size());
    p.logdet = 0.0;
    for (size_t i = 0; i < l.std_.size(); ++i) {
        p.inv_std[i] = 1.0 / l.std_[i];
        p.logdet -= std::log(l.std_[i]);
    }
    return p;
}

inline AffinePrep prepare(const AffineLayer& l) {
    const int d = l.d, q = l.q;
    AffinePrep p;
    p.eps = std::exp(l.varphi);
    p.M = Mat(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int k = 0; k < q; ++k) s += l.W[size_t(i) * q + k] * l.W[size_t(j) * q + k];
            p.M(i, j) = s;
            p.M(j, i) = s;
        }
    for (int i = 0; i < d; ++i) p.M(i, i) += p.eps;

    Mat C(q, q);
    for (int a = 0; a < q; ++a)
        for (int b = 0; b <= a; ++b) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += l.W[size_t(i) * q + a] * l.W[size_t(i) * q + b];
            C(a, b) = s;
            C(b, a) = s;
        }
    for (int a = 0; a < q; ++a) C(a, a) += p.eps;
    p.Lc = C;
    cholesky(p.Lc.a.data(), q);
    // det(eps I_d + W W^T) = eps^(d-q) det(eps I_q + W^T W)
    p.logdet = (d - q) * l.varphi + chol_logdet(p.Lc.a.data(), q);

    // M^{-1} W = W C^{-1}; tr(M^{-1}) = (d - q + eps tr(C^{-1})) / eps
    p.MinvW = Mat(d, q);
    Vec col(q);
    double trCinv = 0.0;
    for (int a = 0; a < q; ++a) {
        std::fill(col.begin(), col.end(), 0.0);
        col[a] = 1.0;
        chol_solve(p.Lc.a.data(), q, col.data());
        trCinv += col[a];
        for (int i = 0; i < d; ++i) {
            double s = 0.0;
            for (int b = 0; b < q; ++b) s += l.W[size_t(i) * q + b] * col[b];
            p.MinvW(i, a) = s;
        }
    }
    p.trMinv = (d - q + p.eps * trCinv) / p.eps;
    return p;
}

inline PhasePrep prepare_phase(const FeatureMap& fm) {
    PhasePrep p;
    size_t n = fm.phase.size();
    p.cph.resize(n);
    p.sph.resize(n);
    for (size_t i = 0; i < n; ++i) {
        p.cph[i] = std::cos(fm.phase[i]);
        p.sph[i] = std::sin(fm.phase[i]);
    }
    return p;
}

inline CouplingPrep prepare(const FFCouplingLayer& l) {
    return CouplingPrep{prepare_phase(l.fs), prepare_phase(l.ft)};
}

struct PreparedFlow {
    std::vector<LayerPrep> layers;
};

inline PreparedFlow prepare(const FlowMap& H) {
    PreparedFlow pf;
    pf.layers.reserve(H.layers.size());
    for (const auto& l : H.layers)
        std::visit([&](const auto& ll) { pf.layers.emplace_back(prepare(ll)); }, l);
    return pf;
}

// ---------------------------------------------------------------------------
// Fourier feature primitives. Trig tables hold cos/sin of the feature angles
// theta_kj = omega*k*x_j + phase_kj; the k-recurrence needs one sincos per
// input coordinate instead of one per (k, j).
// ---------------------------------------------------------------------------

struct FFTrig {
    Vec c, s;  // K*in each
};

inline void ff_trig(const FeatureMap& fm, double omega, const double* x, const PhasePrep& ph, FFTrig& tr) {
    const int K = fm.K, in = fm.in;
    tr.c.resize(size_t(K) * in);
    tr.s.resize(size_t(K) * in);
    for (int j = 0; j < in; ++j) {
        double a = omega * x[j];
        double ca = std::cos(a), sa = std::sin(a);
        double ck = ca, sk = sa;  // cos/sin of k*a, starting at k=1
        for (int k = 0; k < K; ++k) {
            double cp = ph.cph[size_t(k) * in + j], sp = ph.sph[size_t(k) * in + j];
            tr.c[size_t(k) * in + j] = ck * cp - sk * sp;
            tr.s[size_t(k) * in + j] = sk * cp + ck * sp;
            double cn = ck * ca - sk * sa;
            sk = sk * ca + ck * sa;
            ck = cn;
        }
    }
}

inline void ff_value(const FeatureMap& fm, const FFTrig& tr, double* out) {
    const int K = fm.K, in = fm.in, n = fm.out;
    std::fill(out, out + n, 0.0);
    for (int k = 0; k < K; ++k) {
        const double* ck = tr.c.data() + size_t(k) * in;
        const double* th = fm.theta.data() + size_t(k) * n * in;
        for (int o = 0; o < n; ++o) {
            double s = 0.0;
            const double* row = th + size_t(o) * in;
            for (int j = 0; j < in; ++j) s += row[j] * ck[j];
            out[o] += s;
        }
    }
}

/// (dF/dx) v with dF/dx = -omega sum_k k Theta_k diag(sin_k).
inline void ff_jvp(const FeatureMap& fm, double omega, const FFTrig& tr, const double* v, double* out) {
    const int K = fm.K, in = fm.in, n = fm.out;
    std::fill(out, out + n, 0.0);
    for (int k = 0; k < K; ++k) {
        const double* sk = tr.s.data() + size_t(k) * in;
        const double* th = fm.theta.data() + size_t(k) * n * in;
        double w = -omega * (k + 1);
        for (int o = 0; o < n; ++o) {
            double s = 0.0;
            const double* row = th + size_t(o) * in;
            for (int j = 0; j < in; ++j) s += row[j] * sk[j] * v[j];
            out[o] += w * s;
        }
    }
}

/// (dF/dx)^T u accumulated into out (length in).
inline void ff_jvpT_acc(const FeatureMap& fm, double omega, const FFTrig& tr, const double* u, double* out) {
    const int K = fm.K, in = fm.in, n = fm.out;
    for (int k = 0; k < K; ++k) {
        const double* sk = tr.s.data() + size_t(k) * in;
        const double* th = fm.theta.data() + size_t(k) * n * in;
        double w = -omega * (k + 1);
        for (int j = 0; j < in; ++j) {
            double s = 0.0;
            for (int o = 0; o < n; ++o) s += th[size_t(o) * in + j] * u[o];
            out[j] += w * sk[j] * s;
        }
    }
}

// ---------------------------------------------------------------------------
// Per-layer forward / inverse / jvp / logdet. Buffers never alias.
// ---------------------------------------------------------------------------

struct CouplingCache {
    FFTrig trig_s, trig_t;
    Vec s_raw, s, es, dcl;  // tr_len each; dcl = d clamp / d s_raw
};

inline void coupling_scales(const FFCouplingLayer& l, const CouplingPrep& pp, const double* xc, CouplingCache& cc) {
    const int n = l.tr_len();
    ff_trig(l.fs, l.omega(), xc, pp.ps, cc.trig_s);
    ff_trig(l.ft, l.omega(), xc, pp.pt, cc.trig_t);
    cc.s_raw.resize(n);
    cc.s.resize(n);
    cc.es.resize(n);
    cc.dcl.resize(n);
    ff_value(l.fs, cc.trig_s, cc.s_raw.data());
    for (int o = 0; o < n; ++o) {
        cc.s[o] = clamp_val(cc.s_raw[o], l.clamp);
        cc.es[o] = std::exp(cc.s[o]);
        cc.dcl[o] = clamp_deriv(cc.s[o], l.clamp);
    }
}

inline void layer_forward(const ActNormLayer& l, const ActNormPrep& p, const double* x, double* y) {
    for (size_t i = 0; i < l.mean.size(); ++i) y[i] = (x[i] - l.mean[i]) * p.inv_std[i];
}

inline void layer_inverse(const ActNormLayer& l, const ActNormPrep&, const double* y, double* x) {
    for (size_t i = 0; i < l.mean.size(); ++i) x[i] = y[i] * l.std_[i] + l.mean[i];
}

inline void layer_forward(const AffineLayer& l, const AffinePrep& p, const double* x, double* y) {
    matvec(p.M.a.data(), l.d, l.d, x, y);
    for (int i = 0; i < l.d; ++i) y[i] += l.mu[i];
}

/// Woodbury solve of (W W^T + eps I) x = y - mu via the q x q factor:
/// x = (z - W C^{-1} W^T z) / eps with z = y - mu.
inline void layer_inverse(const AffineLayer& l, const AffinePrep& p, const double* y, double* x) {
    const int d = l.d, q = l.q;
    thread_local Vec z, w;
    z.resize(d);
    w.resize(q);
    for (int i = 0; i < d; ++i) z[i] = y[i] - l.mu[i];
    for (int a = 0; a < q; ++a) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += l.W[size_t(i) * q + a] * z[i];
        w[a] = s;
    }
    chol_solve(p.Lc.a.data(), q, w.data());
    for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int a = 0; a < q; ++a) s += l.W[size_t(i) * q + a] * w[a];
        x[i] = (z[i] - s) / p.eps;
    }
}

inline void layer_forward(const FFCouplingLayer& l, const CouplingPrep& pp, const double* x, double* y,
                          CouplingCache& cc) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    coupling_scales(l, pp, x + co, cc);
    thread_local Vec t;
    t.resize(tn);
    ff_value(l.ft, cc.trig_t, t.data());
    for (int j = 0; j < cn; ++j) y[co + j] = x[co + j];
    for (int o = 0; o < tn; ++o) y[to + o] = cc.es[o] * x[to + o] + t[o];
}

inline void layer_inverse(const FFCouplingLayer& l, const CouplingPrep& pp, const double* y, double* x,
                          CouplingCache& cc) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    coupling_scales(l, pp, y + co, cc);   // conditioner input passes through unchanged
    thread_local Vec t;
    t.resize(tn);
    ff_value(l.ft, cc.trig_t, t.data());
    for (int j = 0; j < cn; ++j) x[co + j] = y[co + j];
    for (int o = 0; o < tn; ++o) x[to + o] = (y[to + o] - t[o]) / cc.es[o];
}

/// Forward + tangent in one pass:
///   y_tr = e^s . x_tr + t
///   w_tr = e^s . (x_tr . cl' . Js v_c) + e^s . v_tr + Jt v_c
inline void layer_jvp(const FFCouplingLayer& l, const CouplingPrep& pp, const double* x, const double* v,
                      double* y, double* w, CouplingCache& cc) {
    const int co = l.cond_off(), cn = l.cond_len(), to = l.tr_off(), tn = l.tr_len();
    coupling_scales(l, pp, x + co, cc);
    thread_local Vec t, a, qv;
    t.resize(tn);
    a.resize(tn);
    qv.resize(tn);
    ff_value(l.ft, cc.trig_t, t.data());
    ff_jvp(l.fs, l.omega(), cc.trig_s, v + co, a.data());
    ff_jvp(l.ft, l.omega(), cc.trig_t, v + co, qv.data());
    for (int j = 0; j < cn; ++j) {
        y[co + j] = x[co + j];
        w[co + j] = v[co + j];
    }
    for (int o = 0; o < tn; ++o) {
        y[to + o] = cc.es[o] * x[to + o] + t[o];
        w[to + o] = cc.es[o] * (x[to + o] * cc.dcl[o] * a[o] + v[to + o]) + qv[o];
    }
}

// ---------------------------------------------------------------------------
// FlowMap drivers.
// ---------------------------------------------------------------------------

namespace detail {

inline void flow_apply(const FlowMap& H, const PreparedFlow& pf, const double* x, double* y, bool check_finite) {
    const int d = H.dim;
    thread_local Vec cur, nxt;
    thread_local CouplingCache cc;
    cur.assign(x, x + d);
    nxt.resize(d);
    for (size_t li = 0; li < H.layers.size(); ++li) {
        const auto& l = H.layers[li];
        if (auto* an = std::get_if<ActNormLayer>(&l))
            layer_forward(*an, std::get<ActNormPrep>(pf.layers[li]), cur.data(), nxt.data());
        else if (auto* af = std::get_if<AffineLayer>(&l))
            layer_forward(*af, std::get<AffinePrep>(pf.layers[li]), cur.data(), nxt.data());
        else
            layer_forward(std::get<FFCouplingLayer>(l), std::get<CouplingPrep>(pf.layers[li]), cur.data(),
                          nxt.data(), cc);
        if (check_finite && !all_finite(nxt)) throw NonFiniteError(int(li));
        cur.swap(nxt);
    }
    std::copy(cur.begin(), cur.end(), y);
}

}  // namespace detail

inline void forward(const FlowMap& H, const PreparedFlow& pf, const double* x, double* y) {
    detail::flow_apply(H, pf, x, y, true);
}

inline void inverse(const FlowMap& H, const PreparedFlow& pf, const double* y, double* x) {
    const int d = H.dim;
    thread_local Vec cur, nxt;
    thread_local CouplingCache cc;
    cur.assign(y, y + d);
    nxt.resize(d);
    for (size_t i = H.layers.size(); i-- > 0;) {
        const auto& l = H.layers[i];
        if (auto* an = std::get_if<ActNormLayer>(&l))
            layer_inverse(*an, std::get<ActNormPrep>(pf.layers[i]), cur.data(), nxt.data());
        else if (auto* af = std::get_if<AffineLayer>(&l))
            layer_inverse(*af, std::get<AffinePrep>(pf.layers[i]), cur.data(), nxt.data());
        else
            layer_inverse(std::get<FFCouplingLayer>(l), std::get<CouplingPrep>(pf.layers[i]), cur.data(),
                          nxt.data(), cc);
        cur.swap(nxt);
    }
    std::copy(cur.begin(), cur.end(), x);
}

/// Single pass propagating (value, tangent); returns H(x) in y and dH(x) v in w.
inline void jvp(const FlowMap& H, const PreparedFlow& pf, const double* x, const double* v, double* y, double* w) {
    const int d = H.dim;
    thread_local Vec cx, cv, nx, nv;
    thread_local CouplingCache cc;
    cx.assign(x, x + d);
    cv.assign(v, v + d);
    nx.resize(d);
    nv.resize(d);
    for (size_t li = 0; li < H.layers.size(); ++li) {
        const auto& l = H.layers[li];
        if (auto* an = std::get_if<ActNormLayer>(&l)) {
            const auto& p = std::get<ActNormPrep>(pf.layers[li]);
            layer_forward(*an, p, cx.data(), nx.data());
            for (int i = 0; i < d; ++i) nv[i] = cv[i] * p.inv_std[i];
        } else if (auto* af = std::get_if<AffineLayer>(&l)) {
            const auto& p = std::get<AffinePrep>(pf.layers[li]);
            layer_forward(*af, p, cx.data(), nx.data());
            matvec(p.M.a.data(), d, d, cv.data(), nv.data());
        } else {
            layer_jvp(std::get<FFCouplingLayer>(l), std::get<CouplingPrep>(pf.layers[li]), cx.data(), cv.data(),
                      nx.data(), nv.data(), cc);
        }
        if (!all_finite(nx)) throw NonFiniteError(int(li));
        cx.swap(nx);
        cv.swap(nv);
    }
    std::copy(cx.begin(), cx.end(), y);
    std::copy(cv.begin(), cv.end(), w);
}

inline double log_det(const FlowMap& H, const PreparedFlow& pf, const double* x) {
    const int d = H.dim;
    thread_local Vec cur, nxt;
    thread_local CouplingCache cc;
    cur.assign(x, x + d);
    nxt.resize(d);
    double ld = 0.0;
    for (size_t li = 0; li < H.layers.size(); ++li) {
        const auto& l = H.layers[li];
        if (auto* an = std::get_if<ActNormLayer>(&l)) {
            const auto& p = std::get<ActNormPrep>(pf.layers[li]);
            ld += p.logdet;
            layer_forward(*an, p, cur.data(), nxt.data());
        } else if (auto* af = std::get_if<AffineLayer>(&l)) {
            const auto& p = std::get<AffinePrep>(pf.layers[li]);
            ld += p.logdet;
            layer_forward(*af, p, cur.data(), nxt.data());
        } else {
            const auto& lc = std::get<FFCouplingLayer>(l);
            layer_forward(lc, std::get<CouplingPrep>(pf.layers[li]), cur.data(), nxt.data(), cc);
            for (double s : cc.s) ld += s;
        }
        cur.swap(nxt);
    }
    return ld;
}

// Convenience overloads (prepare on the fly; fine outside hot loops).

inline Vec forward(const FlowMap& H, const Vec& x) {
    Vec y(H.dim);
    auto pf = prepare(H);
    forward(H, pf, x.data(), y.data());
    return y;
}

inline Vec inverse(const FlowMap& H, const Vec& y) {
    Vec x(H.dim);
    auto pf = prepare(H);
    inverse(H, pf, y.data(), x.data());
    return x;
}

inline std::pair<Vec, Vec> jvp(const FlowMap& H, const Vec& x, const Vec& v) {
    Vec y(H.dim), w(H.dim);
    auto pf = prepare(H);
    jvp(H, pf, x.data(), v.data(), y.data(), w.data());
    return {y, w};
}

inline double log_det(const FlowMap& H, const Vec& x) {
    auto pf = prepare(H);
    return log_det(H, pf, x.data());
}

/// Full Jacobian dH(x) assembled column-by-column from unit-tangent JVPs.
inline Mat jacobian(const FlowMap& H, const PreparedFlow& pf, const double* x) {
    const int d = H.dim;
    Mat J(d, d);
    Vec e(d, 0.0), y(d), col(d);
    for (int j = 0; j < d; ++j) {
        std::fill(e.begin(), e.end(), 0.0);
        e[j] = 1.0;
        jvp(H, pf, x, e.data(), y.data(), col.data());
        for (int i = 0; i < d; ++i) J(i, j) = col[i];
    }
    return J;
}

/// max_i |H(H^{-1}(y)) - y|; diagnostic for the bijection contract.
inline double inverse_residual(const FlowMap& H, const PreparedFlow& pf, const double* y) {
    Vec x(H.dim), yy(H.dim);
    inverse(H, pf, y, x.data());
    forward(H, pf, x.data(), yy.data());
    double m = 0.0;
    for (int i = 0; i < H.dim; ++i) m = std::max(m, std::fabs(yy[i] - y[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Construction and initialization.
// ---------------------------------------------------------------------------

inline FeatureMap make_feature_map(int in, int out, int K) {
    FeatureMap fm;
    fm.in = in;
    fm.out = out;
    fm.K = K;
    fm.theta.assign(size_t(K) * out * in, 0.0);
    fm.phase.assign(size_t(K) * in, 0.0);
    return fm;
}

inline FFCouplingLayer make_coupling(int d, bool reversed, const FlowConfig& cfg) {
    FFCouplingLayer l;
    l.d = d;
    l.d1 = (d + 1) / 2;
    l.reversed = reversed;
    l.range = cfg.range;
    l.clamp = cfg.scale_clamp;
    l.fs = make_feature_map(l.cond_len(), l.tr_len(), cfg.freqs);
    l.ft = make_feature_map(l.cond_len(), l.tr_len(), cfg.freqs);
    return l;
}

inline AffineLayer make_affine(int d, int q) {
    AffineLayer l;
    l.d = d;
    l.q = std::min(q, d);
    l.W.assign(size_t(d) * l.q, 0.0);
    l.varphi = 0.0;
    l.mu.assign(d, 0.0);
    return l;
}

/// Layer stack: ActNorm, full-rank Affine, then `blocks` x
/// (Affine(q), FFCoupling, reversed FFCoupling). All parameters zero,
/// ActNorm set to the identity.
inline FlowMap make_flow(int d, const FlowConfig& cfg = {}) {
    if (d < 2) throw std::invalid_argument("flow: dim must be >= 2");
    FlowMap H;
    H.dim = d;
    H.layers.emplace_back(ActNormLayer{Vec(d, 0.0), Vec(d, 1.0)});
    H.layers.emplace_back(make_affine(d, d));
    for (int b = 0; b < cfg.blocks; ++b) {
        H.layers.emplace_back(make_affine(d, cfg.block_rank));
        H.layers.emplace_back(make_coupling(d, false, cfg));
        H.layers.emplace_back(make_coupling(d, true, cfg));
    }
    return H;
}

namespace detail {

inline void randomize_flow(FlowMap& H, Rng& rng, double w_std, double theta_std, double mu_std) {
    std::normal_distribution<double> nw(0.0, w_std), nt(0.0, theta_std), nm(0.0, mu_std);
    std::uniform_real_distribution<double> uphase(0.0, 2.0 * kPi);
    for (auto& l : H.layers) {
        if (auto* af = std::get_if<AffineLayer>(&l)) {
            for (double& w : af->W) w = nw(rng);
            if (mu_std > 0.0)
                for (double& m : af->mu) m = nm(rng);
        } else if (auto* fc = std::get_if<FFCouplingLayer>(&l)) {
            for (double& t : fc->fs.theta) t = nt(rng);
            for (double& p : fc->fs.phase) p = uphase(rng);
            for (double& t : fc->ft.theta) t = nt(rng);
            for (double& p : fc->ft.phase) p = uphase(rng);
        }
    }
}

}  // namespace detail

/// ActNorm frozen to the data statistics, everything else near-identity.
inline FlowMap init_flow(int d, const SampleSet& data, const FlowConfig& cfg, uint64_t seed) {
    if (data.dim() != d) throw std::invalid_argument("init_flow: data dim mismatch");
    FlowMap H = make_flow(d, cfg);
    auto& an = std::get<ActNormLayer>(H.layers[0]);
    const int n = data.size();
    for (int j = 0; j < d; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += data.positions(i, j);
        m /= n;
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
            double t = data.positions(i, j) - m;
            v += t * t;
        }
        v /= n;
        an.mean[j] = m;
        double s = std::sqrt(v);
        if (s < 1e-6) {
            std::fprintf(stderr, "warning: degenerate data, std floor applied on coordinate %d\n", j);
            s = 1e-6;
        }
        an.std_[j] = s;
    }
    Rng rng = make_rng(seed);
    detail::randomize_flow(H, rng, cfg.init_w_std, cfg.init_theta_std, 0.0);
    return H;
}

/// Unit ActNorm, parameters drawn at the given scales; used for warped
/// benchmark fields and randomized correctness sweeps.
inline FlowMap init_random_flow(int d, const FlowConfig& cfg, double w_std, double theta_std, double mu_std,
                                uint64_t seed) {
    FlowMap H = make_flow(d, cfg);
    Rng rng = make_rng(seed);
    detail::randomize_flow(H, rng, w_std, theta_std, mu_std);
    return H;
}

// ---------------------------------------------------------------------------
// Flat parameter vector: every learnable scalar in a fixed layer order.
// ActNorm statistics are frozen and never appear here.
// Per layer: Affine -> W, varphi, mu; FFCoupling -> fs.theta, fs.phase,
// ft.theta, ft.phase.
// ---------------------------------------------------------------------------

inline size_t param_count(const FlowMap& H) {
    size_t n = 0;
    for (const auto& l : H.layers) {
        if (auto* af = std::get_if<AffineLayer>(&l))
            n += af->W.size() + 1 + af->mu.size();
        else if (auto* fc = std::get_if<FFCouplingLayer>(&l))
            n += fc->fs.theta.size() + fc->fs.phase.size() + fc->ft.theta.size() + fc->ft.phase.size();
    }
    return n;
}

inline void get_params(const FlowMap& H, double* out) {
    size_t p = 0;
    for (const auto& l : H.layers) {
        if (auto* af = std::get_if<AffineLayer>(&l)) {
            std::copy(af->W.begin(), af->W.end(), out + p);
            p += af->W.size();
            out[p++] = af->varphi;
            std::copy(af->mu.begin(), af->mu.end(), out + p);
            p += af->mu.size();
        } else if (auto* fc = std::get_if<FFCouplingLayer>(&l)) {
            for (const Vec* v : {&fc->fs.theta, &fc->fs.phase, &fc->ft.theta, &fc->ft.phase}) {
                std::copy(v->begin(), v->end(), out + p);
                p += v->size();
            }
        }
    }
}

inline void set_params(FlowMap& H, const double* in) {
    size_t p = 0;
    for (auto& l : H.layers) {
        if (auto* af = std::get_if<AffineLayer>(&l)) {
            std::copy(in + p, in + p + af->W.size(), af->W.begin());
            p += af->W.size();
            af->varphi = in[p++];
            std::copy(in + p, in + p + af->mu.size(), af->mu.begin());
            p += af->mu.size();
        } else if (auto* fc = std::get_if<FFCouplingLayer>(&l)) {
            for (Vec* v : {&fc->fs.theta, &fc->fs.phase, &fc->ft.theta, &fc->ft.phase}) {
                std::copy(in + p, in + p + v->size(), v->begin());
                p += v->size();
            }
        }
    }
}

/// 1 where the flat parameter belongs to a coupling layer (curriculum mask).
inline std::vector<uint8_t> coupling_param_mask(const FlowMap& H) {
    std::vector<uint8_t> mask;
    mask.reserve(param_count(H));
    for (const auto& l : H.layers) {
        if (auto* af = std::get_if<AffineLayer>(&l))
            mask.insert(mask.end(), af->W.size() + 1 + af->mu.size(), 0);
        else if (auto* fc = std::get_if<FFCouplingLayer>(&l))
            mask.insert(mask.end(),
                        fc->fs.theta.size() + fc->fs.phase.size() + fc->ft.theta.size() + fc->ft.phase.size(), 1);
    }
    return mask;
}

}  // namespace spe
