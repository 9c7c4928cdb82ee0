// Metrics (PVE, MPJPE), evaluation reports, the noise-robustness sweep and
// the direct-fitting optimization baseline.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mae.hpp"
#include "mesh.hpp"
#include "rng.hpp"
#include "train.hpp"
#include "util.hpp"

namespace meshrecover {

// Mean per-vertex Euclidean distance in millimeters; no alignment applied.
inline double pve_mm(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw std::invalid_argument("pve: vertex counts differ (" + std::to_string(pred.size()) +
                                    " vs " + std::to_string(gt.size()) + ")");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) total += norm(pred[i] - gt[i]);
    return 1000.0 * total / static_cast<double>(pred.size());
}

inline double mpjpe_mm(const std::vector<Vec3>& pred_joints, const std::vector<Vec3>& gt_joints) {
    if (pred_joints.size() != gt_joints.size() || pred_joints.empty())
        throw std::invalid_argument("mpjpe: joint counts differ");
    double total = 0.0;
    for (std::size_t i = 0; i < pred_joints.size(); ++i) total += norm(pred_joints[i] - gt_joints[i]);
    return 1000.0 * total / static_cast<double>(pred_joints.size());
}

struct EvalReport {
    double pve_mm = 0.0;
    double mpjpe_mm = 0.0;
    struct PerSample {
        std::size_t id = 0;
        double pve = 0.0, mpjpe = 0.0;
    };
    std::vector<PerSample> per_sample;
    std::string config_hash, checkpoint_hash;
    bool full_resolution = true;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["pve_mm"] = pve_mm;
        j["mpjpe_mm"] = mpjpe_mm;
        j["full_resolution"] = full_resolution;
        j["config_hash"] = config_hash;
        j["checkpoint_hash"] = checkpoint_hash;
        j["per_sample"] = nlohmann::json::array();
        for (const auto& s : per_sample)
            j["per_sample"].push_back({{"id", s.id}, {"pve", s.pve}, {"mpjpe", s.mpjpe}});
        return j;
    }
};

// Evaluates the model over a sample set. PVE at full resolution runs the
// learned upsampler and needs gt_full in the samples; the coarse flag
// compares coarse predictions against coarse targets instead.
template <class T>
EvalReport evaluate(const MAEModel<T>& model, const TemplateMesh& tmpl,
                    const std::vector<TrainingSample>& samples, bool full_resolution = true) {
    if (samples.empty()) throw DegenerateInputError("evaluate: no samples");
    if (full_resolution)
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].gt_full.empty())
                throw DegenerateInputError("evaluate: sample " + std::to_string(i) +
                                           " has no gt_full; rerun with the coarse flag");
    EvalReport rep;
    rep.full_resolution = full_resolution;
    rep.per_sample.resize(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const TrainingSample& s = samples[i];
        Tape<T> tape;
        const auto vars = bind_model(tape, model, false);
        const auto fwd = mae_forward(model, vars, tape, s.input, full_resolution);
        const CoarseMesh pred = tensor_to_coarse(fwd.coarse.value());
        double pve;
        if (full_resolution) {
            pve = pve_mm(tensor_to_coarse(fwd.full.value()).vertices, s.gt_full);
        } else {
            pve = pve_mm(pred.vertices, s.target_coarse);
        }
        const double mj = mpjpe_mm(regress_joints(tmpl, pred), s.target_joints);
        rep.per_sample[i] = {i, pve, mj};
    });
    for (const auto& s : rep.per_sample) {
        rep.pve_mm += s.pve;
        rep.mpjpe_mm += s.mpjpe;
    }
    rep.pve_mm /= static_cast<double>(rep.per_sample.size());
    rep.mpjpe_mm /= static_cast<double>(rep.per_sample.size());
    return rep;
}

// ---------------------------------------------------------------------------
// Noise-robustness sweep: perturb every visible input vertex with i.i.d.
// Gaussian noise of the given per-axis standard deviation (mm), re-evaluate.

struct NoiseSweepEntry {
    double std_mm = 0.0;
    double pve_mm = 0.0;
};

template <class T>
std::vector<NoiseSweepEntry> noise_sweep(const MAEModel<T>& model, const TemplateMesh& tmpl,
                                         const std::vector<TrainingSample>& samples,
                                         const std::vector<double>& stds_mm,
                                         std::uint64_t seed = 0, bool full_resolution = true) {
    std::vector<NoiseSweepEntry> table;
    for (std::size_t si = 0; si < stds_mm.size(); ++si) {
        const double std_m = stds_mm[si] / 1000.0;
        std::vector<TrainingSample> noisy = samples;
        if (std_m > 0.0) {
            for (std::size_t k = 0; k < noisy.size(); ++k) {
                Rng rng = Rng::stream(seed, si * 1000003ull + k);
                auto& in = noisy[k].input;
                for (std::size_t i = 0; i < in.mask.size(); ++i)
                    if (in.mask[i]) {
                        in.vertices_in[i].x += rng.normal(0.0, std_m);
                        in.vertices_in[i].y += rng.normal(0.0, std_m);
                        in.vertices_in[i].z += rng.normal(0.0, std_m);
                    }
            }
        }
        const EvalReport rep = evaluate(model, tmpl, noisy, full_resolution);
        table.push_back({stds_mm[si], rep.pve_mm});
    }
    return table;
}

// ---------------------------------------------------------------------------
// Optimization baseline: gradient descent directly fitting the partial mesh.
// Free coarse vertex positions minimize L1 to the visible inputs plus a
// uniform-Laplacian smoothness term on the displacement from the rest pose
// (the displacement form makes the all-masked case return the rest pose
// exactly). Adam with cosine-decayed lr; this is the comparison lower bar,
// not a tuned reconstruction method.

struct BaselineFitConfig {
    int iterations = 500;
    double lambda_lap = 0.1;
    double lr = 0.02;
};

inline CoarseMesh baseline_fit(const PartialMesh& partial, const TemplateMesh& tmpl,
                               const BaselineFitConfig& cfg = {}) {
    const std::size_t n = tmpl.coarse_count();
    if (partial.mask.size() != n)
        throw std::invalid_argument("baseline_fit: partial mesh size mismatch");
    const auto adj = vertex_adjacency(n, tmpl.triangles_coarse);

    // L x = x_i - mean(neighbors); transpose applied explicitly.
    auto apply_lap = [&](const std::vector<Vec3>& x) {
        std::vector<Vec3> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            Vec3 acc{};
            for (int j : adj[i]) acc += x[static_cast<std::size_t>(j)];
            out[i] = x[i] - (1.0 / static_cast<double>(adj[i].size())) * acc;
        }
        return out;
    };
    auto apply_lap_t = [&](const std::vector<Vec3>& x) {
        std::vector<Vec3> out = x;
        for (std::size_t j = 0; j < n; ++j) {
            const double w = 1.0 / static_cast<double>(adj[j].size());
            for (int i : adj[j]) out[static_cast<std::size_t>(i)] += (-w) * x[j];
        }
        return out;
    };

    std::vector<Vec3> v = tmpl.vertices_coarse;  // init at rest pose
    std::vector<Vec3> m(n), s(n);                // Adam moments
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int it = 0; it < cfg.iterations; ++it) {
        // Gradient: sign on visible entries + 2*lambda*L^T L (v - rest).
        std::vector<Vec3> disp(n);
        for (std::size_t i = 0; i < n; ++i) disp[i] = v[i] - tmpl.vertices_coarse[i];
        const std::vector<Vec3> reg = apply_lap_t(apply_lap(disp));
        std::vector<Vec3> grad(n);
        for (std::size_t i = 0; i < n; ++i) {
            grad[i] = (2.0 * cfg.lambda_lap) * reg[i];
            if (partial.mask[i]) {
                const Vec3 d = v[i] - partial.vertices_in[i];
                grad[i].x += (d.x > 0) - (d.x < 0);
                grad[i].y += (d.y > 0) - (d.y < 0);
                grad[i].z += (d.z > 0) - (d.z < 0);
            }
        }
        const double x = static_cast<double>(it) / std::max(1, cfg.iterations - 1);
        const double lr = cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
        const double bc1 = 1.0 - std::pow(b1, it + 1), bc2 = 1.0 - std::pow(b2, it + 1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < 3; ++c) {
                m[i][c] = b1 * m[i][c] + (1 - b1) * grad[i][c];
                s[i][c] = b2 * s[i][c] + (1 - b2) * grad[i][c] * grad[i][c];
                v[i][c] -= lr * (m[i][c] / bc1) / (std::sqrt(s[i][c] / bc2) + eps);
            }
    }
    return CoarseMesh{v};
}

}  // namespace meshrecover
