#pragma once

#include <bit>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "spe/pipeline.hpp"

namespace spe {

static_assert(std::endian::native == std::endian::little,
              "parameter blobs are serialized as little-endian float64");

using njson = nlohmann::ordered_json;

struct ParseError : std::runtime_error {
    int line;
    ParseError(const std::string& msg, int ln) : std::runtime_error(msg + " (line " + std::to_string(ln) + ")"), line(ln) {}
};

// ---------------------------------------------------------------------------
// SampleSet CSV + meta sidecar.
// ---------------------------------------------------------------------------

/// "out.csv" -> "out.meta.json"
inline std::string meta_path(const std::string& csv_path) {
    auto dot = csv_path.rfind('.');
    std::string stem = (dot == std::string::npos) ? csv_path : csv_path.substr(0, dot);
    return stem + ".meta.json";
}

inline njson meta_to_json(const SampleMeta& m) {
    njson j;
    j["system"] = m.system;
    j["params"] = m.params;
    j["n_samples"] = m.n_samples;
    j["t_min"] = m.t_min;
    j["t_max"] = m.t_max;
    j["dt"] = m.dt;
    j["noise_sigma"] = m.noise_sigma;
    j["seed"] = m.seed;
    j["sampling"] = m.sampling;
    j["projected_dims"] = m.projected_dims;
    return j;
}

inline SampleMeta meta_from_json(const njson& j) {
    SampleMeta m;
    m.system = j.value("system", std::string{});
    if (j.contains("params")) m.params = j.at("params").get<std::map<std::string, double>>();
    m.n_samples = j.value("n_samples", 0);
    m.t_min = j.value("t_min", 0.0);
    m.t_max = j.value("t_max", 0.0);
    m.dt = j.value("dt", 0.0);
    m.noise_sigma = j.value("noise_sigma", 0.0);
    m.seed = j.value("seed", uint64_t(0));
    m.sampling = j.value("sampling", std::string{});
    if (j.contains("projected_dims")) m.projected_dims = j.at("projected_dims").get<std::vector<int>>();
    return m;
}

inline std::string samples_to_csv(const SampleSet& s) {
    std::string out;
    const int d = s.dim();
    for (int j = 0; j < d; ++j) out += "x" + std::to_string(j) + ",";
    for (int j = 0; j < d; ++j) {
        out += "v" + std::to_string(j);
        out += (j + 1 < d) ? "," : "\n";
    }
    for (int i = 0; i < s.size(); ++i) {
        for (int j = 0; j < d; ++j) out += fmt17(s.positions(i, j)) + ",";
        for (int j = 0; j < d; ++j) {
            out += fmt17(s.velocities(i, j));
            out += (j + 1 < d) ? "," : "\n";
        }
    }
    return out;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << content;
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_samples_csv(const std::string& path, const SampleSet& s, bool with_meta = true) {
    write_file(path, samples_to_csv(s));
    if (with_meta) write_file(meta_path(path), meta_to_json(s.meta).dump(2) + "\n");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline SampleSet samples_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty sample file", 1);
    auto header = split_csv_line(line);
    if (header.size() < 2 || header.size() % 2 != 0)
        throw ParseError("header must list x0..x{d-1},v0..v{d-1}", 1);
    const int d = int(header.size()) / 2;
    for (int j = 0; j < d; ++j) {
        if (header[j] != "x" + std::to_string(j) || header[d + j] != "v" + std::to_string(j))
            throw ParseError("unexpected header column '" + header[j] + "'", 1);
    }
    std::vector<double> vals;
    int rows = 0, lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (int(cells.size()) != 2 * d)
            throw ParseError("expected " + std::to_string(2 * d) + " columns, found " + std::to_string(cells.size()),
                             lineno);
        for (const auto& c : cells) {
            try {
                size_t pos = 0;
                vals.push_back(std::stod(c, &pos));
                if (pos != c.size()) throw std::invalid_argument(c);
            } catch (const std::exception&) {
                throw ParseError("bad number '" + c + "'", lineno);
            }
        }
        ++rows;
    }
    if (rows == 0) throw ParseError("no sample rows", lineno);
    SampleSet s;
    s.positions = Mat(rows, d);
    s.velocities = Mat(rows, d);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) {
            s.positions(i, j) = vals[size_t(i) * 2 * d + j];
            s.velocities(i, j) = vals[size_t(i) * 2 * d + d + j];
        }
    s.meta.sampling = "external";
    s.meta.n_samples = rows;
    return s;
}

inline SampleSet read_samples_csv(const std::string& path) {
    SampleSet s = samples_from_csv(read_file(path));
    std::ifstream mf(meta_path(path));
    if (mf) {
        njson j = njson::parse(mf);
        s.meta = meta_from_json(j);
    }
    return s;
}

// ---------------------------------------------------------------------------
// FlowMap JSON (bit-exact parameter blobs).
// ---------------------------------------------------------------------------

inline njson flow_to_json(const FlowMap& H) {
    njson layers = njson::array();
    for (const auto& l : H.layers) {
        njson jl;
        if (auto* an = std::get_if<ActNormLayer>(&l)) {
            jl["type"] = "actnorm";
            jl["mean"] = encode_doubles(an->mean);
            jl["std"] = encode_doubles(an->std_);
        } else if (auto* af = std::get_if<AffineLayer>(&l)) {
            jl["type"] = "affine";
            jl["dim"] = af->d;
            jl["rank"] = af->q;
            jl["W"] = encode_doubles(af->W);
            jl["varphi"] = encode_doubles(std::span<const double>(&af->varphi, 1));
            jl["mu"] = encode_doubles(af->mu);
        } else {
            const auto& fc = std::get<FFCouplingLayer>(l);
            jl["type"] = "ffcoupling";
            jl["dim"] = fc.d;
            jl["split"] = fc.d1;
            jl["reversed"] = fc.reversed;
            jl["freqs"] = fc.fs.K;
            jl["range"] = fc.range;
            jl["clamp"] = fc.clamp;
            jl["scale_theta"] = encode_doubles(fc.fs.theta);
            jl["scale_phase"] = encode_doubles(fc.fs.phase);
            jl["transl_theta"] = encode_doubles(fc.ft.theta);
            jl["transl_phase"] = encode_doubles(fc.ft.phase);
        }
        layers.push_back(std::move(jl));
    }
    return njson{{"dim", H.dim}, {"layers", std::move(layers)}};
}

inline FlowMap flow_from_json(const njson& j) {
    FlowMap H;
    H.dim = j.at("dim").get<int>();
    for (const auto& jl : j.at("layers")) {
        std::string type = jl.at("type").get<std::string>();
        if (type == "actnorm") {
            ActNormLayer an;
            an.mean = decode_doubles(jl.at("mean").get<std::string>());
            an.std_ = decode_doubles(jl.at("std").get<std::string>());
            H.layers.emplace_back(std::move(an));
        } else if (type == "affine") {
            AffineLayer af;
            af.d = jl.at("dim").get<int>();
            af.q = jl.at("rank").get<int>();
            af.W = decode_doubles(jl.at("W").get<std::string>());
            af.varphi = decode_doubles(jl.at("varphi").get<std::string>()).at(0);
            af.mu = decode_doubles(jl.at("mu").get<std::string>());
            H.layers.emplace_back(std::move(af));
        } else if (type == "ffcoupling") {
            FFCouplingLayer fc;
            fc.d = jl.at("dim").get<int>();
            fc.d1 = jl.at("split").get<int>();
            fc.reversed = jl.at("reversed").get<bool>();
            fc.range = jl.at("range").get<double>();
            fc.clamp = jl.at("clamp").get<double>();
            int K = jl.at("freqs").get<int>();
            fc.fs = make_feature_map(fc.cond_len(), fc.tr_len(), K);
            fc.ft = make_feature_map(fc.cond_len(), fc.tr_len(), K);
            fc.fs.theta = decode_doubles(jl.at("scale_theta").get<std::string>());
            fc.fs.phase = decode_doubles(jl.at("scale_phase").get<std::string>());
            fc.ft.theta = decode_doubles(jl.at("transl_theta").get<std::string>());
            fc.ft.phase = decode_doubles(jl.at("transl_phase").get<std::string>());
            H.layers.emplace_back(std::move(fc));
        } else {
            throw std::runtime_error("flow_from_json: unknown layer type " + type);
        }
    }
    return H;
}

// ---------------------------------------------------------------------------
// Config and result JSON.
// ---------------------------------------------------------------------------

inline njson loss_cfg_to_json(const LossConfig& c) {
    return njson{{"lambda_det", c.lambda_det},
                 {"lambda_cent", c.lambda_cent},
                 {"lambda_proj_init", c.lambda_proj_init},
                 {"eps_norm", c.eps_norm},
                 {"raw_det_reg", c.raw_det_reg}};
}

inline njson optim_cfg_to_json(const OptimConfig& c) {
    return njson{{"lr", c.lr},           {"weight_decay", c.weight_decay},
                 {"iters", c.iters},     {"batch", c.batch},
                 {"curriculum", c.curriculum}, {"trim_fraction", c.trim_fraction},
                 {"seed", c.seed}};
}

inline njson flow_cfg_to_json(const FlowConfig& c) {
    return njson{{"blocks", c.blocks},     {"freqs", c.freqs},
                 {"range", c.range},       {"block_rank", c.block_rank},
                 {"scale_clamp", c.scale_clamp}, {"init_w_std", c.init_w_std},
                 {"init_theta_std", c.init_theta_std}};
}

inline njson prototype_to_json(const Prototype& p) {
    return njson{{"a", p.a}, {"omega", p.omega}, {"dim", p.dim}, {"tau", p.tau}};
}

inline Prototype prototype_from_json(const njson& j) {
    return Prototype{j.at("a").get<double>(), j.at("omega").get<double>(), j.at("dim").get<int>(),
                     j.at("tau").get<double>()};
}

inline njson fit_to_json(const FitResult& r, bool with_trace = true) {
    njson j;
    j["prototype"] = prototype_to_json(r.prototype);
    j["seed"] = r.seed;
    j["status"] = r.status == FitStatus::Ok ? "ok" : "diverged";
    j["final_equiv_loss"] = r.final_equiv_loss;
    j["final_total_loss"] = r.final_total_loss;
    j["lambda_proj"] = r.lambda_proj;
    j["loss_cfg"] = loss_cfg_to_json(r.loss_cfg);
    j["optim_cfg"] = optim_cfg_to_json(r.opt_cfg);
    j["flow_cfg"] = flow_cfg_to_json(r.flow_cfg);
    j["flow"] = flow_to_json(r.flow);
    if (with_trace) {
        njson tr;
        Vec eq, det, cent, proj, total;
        for (const auto& p : r.trace) {
            eq.push_back(p.eq);
            det.push_back(p.det);
            cent.push_back(p.cent);
            proj.push_back(p.proj);
            total.push_back(p.total);
        }
        tr["eq"] = eq;
        tr["det"] = det;
        tr["cent"] = cent;
        tr["proj"] = proj;
        tr["total"] = total;
        j["trace"] = std::move(tr);
    }
    return j;
}

inline std::string trace_to_csv(const FitResult& r) {
    std::string out = "iter,L_E,L_det,L_cent,L_proj,total\n";
    for (size_t i = 0; i < r.trace.size(); ++i) {
        const auto& p = r.trace[i];
        out += std::to_string(i) + "," + fmt17(p.eq) + "," + fmt17(p.det) + "," + fmt17(p.cent) + "," +
               fmt17(p.proj) + "," + fmt17(p.total) + "\n";
    }
    return out;
}

inline njson classification_to_json(const Classification& c, bool with_fits = true, bool with_trace = false) {
    njson j;
    j["losses"] = c.losses;
    j["winner"] = c.winner;
    j["label"] = c.cycle_label ? "cycle" : "node";
    if (with_fits) {
        njson fits = njson::array();
        for (const auto& f : c.fits) fits.push_back(fit_to_json(f, with_trace));
        j["fits"] = std::move(fits);
    }
    return j;
}

inline std::string invariant_to_csv(const InvariantSetEstimate& est) {
    std::string out = "idx";
    for (int j = 0; j < est.points.cols; ++j) out += ",x" + std::to_string(j);
    out += "\n";
    for (int i = 0; i < est.points.rows; ++i) {
        out += std::to_string(i);
        for (int j = 0; j < est.points.cols; ++j) out += "," + fmt17(est.points(i, j));
        out += "\n";
    }
    return out;
}

inline std::string sweep_records_to_csv(const SweepReport& rep) {
    std::string out =
        "idx,system,dim,n,sigma,seed,truth,pred,correct,sampling_failed,divergence,winner,loss0,loss1,loss2,"
        "loss3,params\n";
    for (const auto& r : rep.records) {
        out += std::to_string(r.index) + "," + r.system + "," + std::to_string(r.dim) + "," + std::to_string(r.n) +
               "," + fmt17(r.sigma) + "," + std::to_string(r.seed) + "," + (r.truth_cycle ? "cycle" : "node") +
               "," + (r.sampling_failed ? "-" : (r.pred_cycle ? "cycle" : "node")) + "," +
               (r.correct ? "1" : "0") + "," + (r.sampling_failed ? "1" : "0") + "," +
               (r.any_divergence ? "1" : "0") + "," + std::to_string(r.winner);
        for (int k = 0; k < 4; ++k)
            out += "," + (k < int(r.losses.size()) ? fmt17(r.losses[k]) : std::string("-"));
        out += ",";
        bool first = true;
        for (const auto& [k, v] : r.params) {
            if (!first) out += ";";
            out += k + "=" + fmt17(v);
            first = false;
        }
        out += "\n";
    }
    return out;
}

inline njson sweep_aggregate_to_json(const SweepReport& rep) {
    njson per;
    for (const auto& [sys, cv] : rep.tally()) {
        per[sys] = njson{{"correct", cv.first},
                         {"counted", cv.second},
                         {"accuracy", cv.second ? double(cv.first) / cv.second : 0.0}};
    }
    int fails = 0;
    for (const auto& r : rep.records)
        if (r.sampling_failed) ++fails;
    return njson{{"per_system", std::move(per)},
                 {"overall_accuracy", rep.overall_accuracy()},
                 {"instances", rep.records.size()},
                 {"sampling_failures", fails}};
}

}  // namespace spe
