#pragma once

#include <map>
#include <string>

#include "spe/common.hpp"

namespace spe {

/// How a sample set was produced; carried along so every output file can
/// name the exact configuration that generated it.
struct SampleMeta {
    std::string system;                    // e.g. "so", "repressilator"
    std::map<std::string, double> params;  // system parameters
    int n_samples = 0;
    double t_min = 0.0;
    double t_max = 0.0;
    double dt = 0.0;
    double noise_sigma = 0.0;
    uint64_t seed = 0;
    std::string sampling;                  // "sparse" | "grid" | "external"
    std::vector<int> projected_dims;       // nonempty if project_dims was applied
};

/// N observed position/velocity pairs in d dimensions. Immutable by
/// convention once built; safe to share across threads.
struct SampleSet {
    Mat positions;   // N x d
    Mat velocities;  // N x d
    SampleMeta meta;

    int size() const { return positions.rows; }
    int dim() const { return positions.cols; }
};

inline void validate(const SampleSet& s) {
    if (s.positions.rows != s.velocities.rows || s.positions.cols != s.velocities.cols)
        throw std::invalid_argument("SampleSet: positions/velocities shape mismatch");
    if (s.positions.rows < 1) throw std::invalid_argument("SampleSet: empty");
    if (!all_finite(s.positions.a) || !all_finite(s.velocities.a))
        throw std::invalid_argument("SampleSet: non-finite entries");
}

/// Restrict positions and velocities to the listed coordinates (order kept).
inline SampleSet project_dims(const SampleSet& s, const std::vector<int>& dims) {
    if (dims.empty()) throw std::invalid_argument("project_dims: empty index list");
    for (size_t i = 0; i < dims.size(); ++i) {
        if (dims[i] < 0 || dims[i] >= s.dim()) throw std::invalid_argument("project_dims: index out of range");
        for (size_t j = i + 1; j < dims.size(); ++j)
            if (dims[i] == dims[j]) throw std::invalid_argument("project_dims: duplicate index");
    }
    SampleSet out;
    out.positions = Mat(s.size(), int(dims.size()));
    out.velocities = Mat(s.size(), int(dims.size()));
    for (int i = 0; i < s.size(); ++i)
        for (size_t k = 0; k < dims.size(); ++k) {
            out.positions(i, int(k)) = s.positions(i, dims[k]);
            out.velocities(i, int(k)) = s.velocities(i, dims[k]);
        }
    out.meta = s.meta;
    out.meta.projected_dims = dims;
    return out;
}

/// Per-coordinate mean of the positions.
inline Vec position_mean(const SampleSet& s) {
    Vec m(s.dim(), 0.0);
    for (int i = 0; i < s.size(); ++i)
        for (int j = 0; j < s.dim(); ++j) m[j] += s.positions(i, j);
    for (double& v : m) v /= s.size();
    return m;
}

}  // namespace spe
