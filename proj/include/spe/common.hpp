#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spe {

inline constexpr double kPi = 3.14159265358979323846;

using Vec = std::vector<double>;

/// Dense row-major matrix, sized once and indexed with (row, col).
struct Mat {
    int rows = 0;
    int cols = 0;
    Vec a;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(size_t(r) * c, fill) {}

    double& operator()(int i, int j) { return a[size_t(i) * cols + j]; }
    double operator()(int i, int j) const { return a[size_t(i) * cols + j]; }
    double* row(int i) { return a.data() + size_t(i) * cols; }
    const double* row(int i) const { return a.data() + size_t(i) * cols; }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && a == o.a; }
};

struct BlowupError : std::runtime_error {
    double time;
    explicit BlowupError(double t)
        : std::runtime_error("non-finite state at t=" + std::to_string(t)), time(t) {}
};

struct NonFiniteError : std::runtime_error {
    int layer;
    explicit NonFiniteError(int l)
        : std::runtime_error("non-finite value in layer " + std::to_string(l)), layer(l) {}
};

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// RNG plumbing: every stochastic component takes a 64-bit seed; parallel tasks
// get independent streams through derive_seed(base, index).
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t index) {
    return splitmix64(splitmix64(base) ^ (0x9E3779B97F4A7C15ull * (index + 1)));
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(splitmix64(seed)); }

// ---------------------------------------------------------------------------
// Small dense linear algebra. Dimensions here are tiny (d <= 10, q <= d), so
// plain loops beat any library dispatch.
// ---------------------------------------------------------------------------

inline void matvec(const double* A, int r, int c, const double* x, double* y) {
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        const double* row = A + size_t(i) * c;
        for (int j = 0; j < c; ++j) s += row[j] * x[j];
        y[i] = s;
    }
}

/// In-place Cholesky of an SPD matrix (lower triangle). Throws on non-PD input.
inline void cholesky(double* A, int n) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = A[size_t(i) * n + j];
            for (int k = 0; k < j; ++k) s -= A[size_t(i) * n + k] * A[size_t(j) * n + k];
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
                A[size_t(i) * n + i] = std::sqrt(s);
            } else {
                A[size_t(i) * n + j] = s / A[size_t(j) * n + j];
            }
        }
    }
}

/// Solve L L^T x = b given the Cholesky factor L (lower). b is overwritten with x.
inline void chol_solve(const double* L, int n, double* b) {
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int k = 0; k < i; ++k) s -= L[size_t(i) * n + k] * b[k];
        b[i] = s / L[size_t(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int k = i + 1; k < n; ++k) s -= L[size_t(k) * n + i] * b[k];
        b[i] = s / L[size_t(i) * n + i];
    }
}

inline double chol_logdet(const double* L, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::log(L[size_t(i) * n + i]);
    return 2.0 * s;
}

/// Gaussian elimination with partial pivoting; A (n x n) and b are overwritten.
inline void lu_solve(double* A, int n, double* b) {
    std::vector<int> piv(n);
    for (int i = 0; i < n; ++i) piv[i] = i;
    for (int col = 0; col < n; ++col) {
        int best = col;
        double mx = std::fabs(A[size_t(col) * n + col]);
        for (int i = col + 1; i < n; ++i) {
            double v = std::fabs(A[size_t(i) * n + col]);
            if (v > mx) { mx = v; best = i; }
        }
        if (mx == 0.0) throw std::runtime_error("lu_solve: singular matrix");
        if (best != col) {
            for (int j = 0; j < n; ++j) std::swap(A[size_t(col) * n + j], A[size_t(best) * n + j]);
            std::swap(b[col], b[best]);
        }
        for (int i = col + 1; i < n; ++i) {
            double f = A[size_t(i) * n + col] / A[size_t(col) * n + col];
            A[size_t(i) * n + col] = 0.0;
            for (int j = col + 1; j < n; ++j) A[size_t(i) * n + j] -= f * A[size_t(col) * n + j];
            b[i] -= f * b[col];
        }
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int j = i + 1; j < n; ++j) s -= A[size_t(i) * n + j] * b[j];
        b[i] = s / A[size_t(i) * n + i];
    }
}

/// det of a small square matrix via LU (copy, partial pivoting).
inline double dense_det(Mat A) {
    int n = A.rows;
    double det = 1.0;
    for (int col = 0; col < n; ++col) {
        int best = col;
        double mx = std::fabs(A(col, col));
        for (int i = col + 1; i < n; ++i)
            if (std::fabs(A(i, col)) > mx) { mx = std::fabs(A(i, col)); best = i; }
        if (mx == 0.0) return 0.0;
        if (best != col) {
            for (int j = 0; j < n; ++j) std::swap(A(col, j), A(best, j));
            det = -det;
        }
        det *= A(col, col);
        for (int i = col + 1; i < n; ++i) {
            double f = A(i, col) / A(col, col);
            for (int j = col; j < n; ++j) A(i, j) -= f * A(col, j);
        }
    }
    return det;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// ---------------------------------------------------------------------------
// Text formatting: 17 significant digits round-trips any double exactly.
// ---------------------------------------------------------------------------

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Base64 of raw little-endian float64 blobs; used for bit-exact serialization.

inline std::string base64_encode(const unsigned char* data, size_t n) {
    static const char tab[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        uint32_t v = uint32_t(data[i]) << 16;
        if (i + 1 < n) v |= uint32_t(data[i + 1]) << 8;
        if (i + 2 < n) v |= uint32_t(data[i + 2]);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(i + 1 < n ? tab[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? tab[v & 63] : '=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    uint32_t acc = 0;
    int bits = 0;
    for (char c : s) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = val(c);
        if (v < 0) throw std::runtime_error("base64: invalid character");
        acc = (acc << 6) | uint32_t(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back((unsigned char)((acc >> bits) & 0xFF));
        }
    }
    return out;
}

inline std::string encode_doubles(std::span<const double> v) {
    return base64_encode(reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double));
}

inline Vec decode_doubles(const std::string& s) {
    auto bytes = base64_decode(s);
    if (bytes.size() % sizeof(double) != 0) throw std::runtime_error("base64: bad float64 blob length");
    Vec v(bytes.size() / sizeof(double));
    std::copy(bytes.begin(), bytes.end(), reinterpret_cast<unsigned char*>(v.data()));
    return v;
}

}  // namespace spe
