// Procedural toy humanoid used by tests and bundled assets: a deformed,
// seam-cut tube with head/torso/leg profile, a cylindrical UV atlas (unique
// per vertex, no seam interpolation), a midpoint-subdivided full mesh, the
// matching row-stochastic downsample operator and a 12-joint regressor.
// Also generates smooth synthetic poses for the full mesh.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mesh.hpp"
#include "rng.hpp"

namespace meshrecover {

struct ToyBodyConfig {
    int rows = 10;        // samples along height (v direction)
    int cols = 15;        // samples around azimuth (u direction, seam cut)
    double height = 1.7;  // meters, centered on the origin
};

namespace toy_detail {

inline double gauss(double x, double mu, double sigma) {
    const double d = (x - mu) / sigma;
    return std::exp(-d * d);
}

// Cross-section semi-axes at normalized height h in [0,1] (0 = feet). Wide
// enough that, at the default camera, the pixel uv step stays under the
// default match epsilon across most of the visible band.
inline void profile(double h, double& ax, double& bz) {
    ax = 0.068 + 0.195 * gauss(h, 0.55, 0.22)   // torso
       + 0.075 * gauss(h, 0.74, 0.07)           // shoulders
       + 0.063 * gauss(h, 0.93, 0.06)           // head
       + 0.082 * gauss(h, 0.18, 0.22);          // hips and legs
    bz = 0.62 * ax + 0.027;
}

inline Vec3 surface_point(double u, double v, const ToyBodyConfig& cfg) {
    const double theta = 2.0 * 3.14159265358979323846 * u;
    double ax, bz;
    profile(v, ax, bz);
    // Hint of two legs: pinch the lower body at the +-x sides.
    const double leg = std::exp(-(v / 0.28) * (v / 0.28));
    const double mod = 1.0 + 0.16 * leg * std::cos(2.0 * theta);
    const double y = (v - 0.5) * cfg.height;
    return {ax * mod * std::cos(theta), y, bz * mod * std::sin(theta)};
}

}  // namespace toy_detail

// Midpoint subdivision: keeps original vertices, adds one vertex per edge.
// Returns the subdivided mesh and the (full x coarse) interpolation matrix S
// with full = S * coarse.
inline void midpoint_subdivide(const std::vector<Vec3>& verts, const std::vector<Vec2>& uvs,
                               const std::vector<std::array<int, 3>>& tris,
                               std::vector<Vec3>& out_verts, std::vector<Vec2>& out_uvs,
                               std::vector<std::array<int, 3>>& out_tris,
                               Tensor<double>& out_interp) {
    out_verts = verts;
    out_uvs = uvs;
    out_tris.clear();
    std::map<std::pair<int, int>, int> edge_mid;
    auto midpoint = [&](int a, int b) {
        const auto key = std::minmax(a, b);
        auto it = edge_mid.find(key);
        if (it != edge_mid.end()) return it->second;
        const int idx = static_cast<int>(out_verts.size());
        out_verts.push_back(0.5 * (verts[static_cast<std::size_t>(a)] + verts[static_cast<std::size_t>(b)]));
        out_uvs.push_back(0.5 * (uvs[static_cast<std::size_t>(a)] + uvs[static_cast<std::size_t>(b)]));
        edge_mid.emplace(key, idx);
        return idx;
    };
    for (const auto& t : tris) {
        const int mab = midpoint(t[0], t[1]);
        const int mbc = midpoint(t[1], t[2]);
        const int mca = midpoint(t[2], t[0]);
        out_tris.push_back({t[0], mab, mca});
        out_tris.push_back({mab, t[1], mbc});
        out_tris.push_back({mca, mbc, t[2]});
        out_tris.push_back({mab, mbc, mca});
    }
    const std::size_t n = verts.size(), f = out_verts.size();
    out_interp = Tensor<double>({f, n});
    for (std::size_t i = 0; i < n; ++i) out_interp.at(i, i) = 1.0;
    for (const auto& [edge, idx] : edge_mid) {
        out_interp.at(static_cast<std::size_t>(idx), static_cast<std::size_t>(edge.first)) = 0.5;
        out_interp.at(static_cast<std::size_t>(idx), static_cast<std::size_t>(edge.second)) = 0.5;
    }
}

inline TemplateMesh make_toy_template(const ToyBodyConfig& cfg = {}) {
    TemplateMesh t;
    const int rows = cfg.rows, cols = cfg.cols;
    // Coarse grid. Column 0 and column cols-1 coincide in space (seam cut)
    // but carry distinct u values, so every vertex has a unique uv.
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            const double u = static_cast<double>(j) / (cols - 1);
            const double v = static_cast<double>(i) / (rows - 1);
            t.uv_coarse.push_back({u, v});
            t.vertices_coarse.push_back(toy_detail::surface_point(u, v, cfg));
        }
    auto vid = [cols](int i, int j) { return i * cols + j; };
    for (int i = 0; i + 1 < rows; ++i)
        for (int j = 0; j + 1 < cols; ++j) {
            const int v00 = vid(i, j), v01 = vid(i, j + 1);
            const int v10 = vid(i + 1, j), v11 = vid(i + 1, j + 1);
            // Wound so normals point outward.
            t.triangles_coarse.push_back({v00, v11, v01});
            t.triangles_coarse.push_back({v00, v10, v11});
        }

    Tensor<double> interp;  // full = interp * coarse
    midpoint_subdivide(t.vertices_coarse, t.uv_coarse, t.triangles_coarse, t.vertices_full,
                       t.uv_full, t.triangles_full, interp);

    // Downsample map: row-normalized transpose of the subdivision operator.
    // Its row space therefore contains every subdivided field, which makes the
    // pseudoinverse-initialized upsampler exact on the rest pose.
    const std::size_t n = t.coarse_count(), f = t.full_count();
    t.downsample_map = Tensor<double>({n, f});
    for (std::size_t ff = 0; ff < f; ++ff)
        for (std::size_t nn = 0; nn < n; ++nn)
            t.downsample_map.at(nn, ff) = interp.at(ff, nn);
    for (std::size_t nn = 0; nn < n; ++nn) {
        double s = 0.0;
        for (std::size_t ff = 0; ff < f; ++ff) s += t.downsample_map.at(nn, ff);
        for (std::size_t ff = 0; ff < f; ++ff) t.downsample_map.at(nn, ff) /= s;
    }

    // Hand-specified 12-joint regressor over coarse grid rows/columns.
    // Row bands: 0 feet .. rows-1 head top. Left is +x (theta = 0).
    struct JointSpec {
        int row;
        std::vector<int> cols;  // empty = whole ring
    };
    const int cL0 = 0, cL1 = cols - 2, cR0 = cols / 2 - 1, cR1 = cols / 2 + 1;
    const std::vector<JointSpec> joints = {
        {rows - 1, {}},                  // head top
        {rows - 2, {}},                  // neck
        {(rows * 2) / 3, {}},            // chest
        {(rows * 2) / 5, {}},            // pelvis
        {rows - 3, {cL0, cL1}},          // left shoulder
        {rows - 3, {cR0, cR1}},          // right shoulder
        {(rows * 2) / 5, {cL0, cL1}},    // left hip
        {(rows * 2) / 5, {cR0, cR1}},    // right hip
        {rows / 5, {cL0, cL1}},          // left knee
        {rows / 5, {cR0, cR1}},          // right knee
        {0, {cL0, cL1}},                 // left ankle
        {0, {cR0, cR1}},                 // right ankle
    };
    t.joint_regressor = Tensor<double>({joints.size(), n});
    for (std::size_t k = 0; k < joints.size(); ++k) {
        const auto& js = joints[k];
        std::vector<int> vs;
        if (js.cols.empty())
            for (int j = 0; j < cols - 1; ++j) vs.push_back(vid(js.row, j));
        else
            for (int j : js.cols) vs.push_back(vid(js.row, j));
        for (int v : vs)
            t.joint_regressor.at(k, static_cast<std::size_t>(v)) = 1.0 / static_cast<double>(vs.size());
    }

    // Part labels: 1 head, 2 torso, 3 left leg, 4 right leg.
    t.parts.resize(n);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            const double h = static_cast<double>(i) / (rows - 1);
            std::uint8_t p;
            if (h > 0.8) p = 1;
            else if (h > 0.4) p = 2;
            else p = (t.vertices_coarse[static_cast<std::size_t>(vid(i, j))].x >= 0.0) ? 3 : 4;
            t.parts[static_cast<std::size_t>(vid(i, j))] = p;
        }

    t.upsample_params = linalg::pinv_full_row_rank(t.downsample_map);
    return t;
}

// ---------------------------------------------------------------------------
// Synthetic poses: smooth low-dimensional deformations of the full rest mesh.

struct PoseParams {
    double twist = 0.0;    // rad about the vertical axis, ramped along height
    double bend = 0.0;     // rad forward/back, upper body
    double lean = 0.0;     // rad sideways, upper body
    double leg_shift = 0.0;  // m, opposite z-shift of the two legs
    double breathe = 0.0;  // fractional chest inflation
    double yaw = 0.0;      // rad, whole-body rotation
    Vec3 translate{};
};

inline PoseParams random_pose(Rng& rng) {
    PoseParams p;
    p.twist = rng.uniform(-0.5, 0.5);
    p.bend = rng.uniform(-0.5, 0.5);
    p.lean = rng.uniform(-0.4, 0.4);
    p.leg_shift = rng.uniform(-0.12, 0.12);
    p.breathe = rng.uniform(-0.05, 0.05);
    p.yaw = rng.uniform(-0.3, 0.3);
    p.translate = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
    return p;
}

inline std::vector<Vec3> apply_pose(const std::vector<Vec3>& rest, const PoseParams& p,
                                    double height = 1.7) {
    std::vector<Vec3> out(rest.size());
    const double y0 = -0.5 * height;
    for (std::size_t i = 0; i < rest.size(); ++i) {
        Vec3 v = rest[i];
        const double h = (v.y - y0) / height;  // normalized rest height

        // Breathe: radial scale around the chest.
        const double s = 1.0 + p.breathe * toy_detail::gauss(h, 0.6, 0.15);
        v.x *= s;
        v.z *= s;

        // Leg shift: opposite z offsets for the two legs, fading above the hip.
        const double legw = std::max(0.0, (0.42 - h) / 0.42);
        v.z += p.leg_shift * legw * std::tanh(v.x / 0.05);

        // Twist about y, ramped along height.
        {
            const double a = p.twist * (h - 0.4);
            const double c = std::cos(a), sn = std::sin(a);
            const double x = v.x * c + v.z * sn, z = -v.x * sn + v.z * c;
            v.x = x;
            v.z = z;
        }
        // Bend about x, upper body only, pivot at h = 0.45.
        {
            const double w = std::max(0.0, (h - 0.45) / 0.55);
            const double a = p.bend * w;
            const double py = y0 + 0.45 * height;
            const double c = std::cos(a), sn = std::sin(a);
            const double dy = v.y - py;
            const double y = py + dy * c - v.z * sn, z = dy * sn + v.z * c;
            v.y = y;
            v.z = z;
        }
        // Side lean about z, pivot at h = 0.3.
        {
            const double w = std::max(0.0, (h - 0.3) / 0.7);
            const double a = p.lean * w;
            const double py = y0 + 0.3 * height;
            const double c = std::cos(a), sn = std::sin(a);
            const double dy = v.y - py;
            const double x = v.x * c - dy * sn, y = py + v.x * sn + dy * c;
            v.x = x;
            v.y = y;
        }
        // Whole-body yaw and translation.
        {
            const double c = std::cos(p.yaw), sn = std::sin(p.yaw);
            const double x = v.x * c + v.z * sn, z = -v.x * sn + v.z * c;
            v.x = x;
            v.z = z;
        }
        out[i] = v + p.translate;
    }
    return out;
}

// Writes `count` posed copies of the template's full mesh into dir as
// pose_NNNN.obj. Deterministic in (seed, count).
inline std::vector<std::string> write_pose_sequence(const std::string& dir,
                                                    const TemplateMesh& tmpl, int count,
                                                    std::uint64_t seed) {
    std::vector<std::string> files;
    for (int k = 0; k < count; ++k) {
        Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(k));
        const PoseParams p = random_pose(rng);
        const std::vector<Vec3> posed = apply_pose(tmpl.vertices_full, p);
        char name[32];
        std::snprintf(name, sizeof(name), "pose_%04d.obj", k);
        const std::string path = dir + "/" + name;
        write_obj(path, posed, tmpl.triangles_full);
        files.push_back(path);
    }
    return files;
}

}  // namespace meshrecover
