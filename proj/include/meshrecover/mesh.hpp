// Template body mesh: the coarse/full resolution pair, per-vertex UV atlas,
// resolution-change operators and the joint regressor.
//
// On-disk template layout (one directory):
//   mesh.obj         full-resolution mesh, ASCII OBJ with per-vertex vt
//   mesh_coarse.obj  coarse working mesh (its own triangulation and vt)
//   downsample.mat   N x F row-stochastic map, tensor format, f32
//   regressor.mat    J x N joint regressor, tensor format, f32
//   parts.mat        optional N-vector of u8 part ids
//   meta.json        {"coarse_vertices": N, "joint_count": J, "units": "meters"}
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "geometry.hpp"
#include "linalg.hpp"
#include "obj_io.hpp"
#include "tensor_io.hpp"
#include "util.hpp"

namespace meshrecover {

struct CoarseMesh {
    std::vector<Vec3> vertices;
};

struct TemplateMesh {
    // Full resolution.
    std::vector<Vec3> vertices_full;
    std::vector<std::array<int, 3>> triangles_full;
    std::vector<Vec2> uv_full;
    // Coarse working resolution.
    std::vector<Vec3> vertices_coarse;
    std::vector<std::array<int, 3>> triangles_coarse;
    std::vector<Vec2> uv_coarse;
    // Operators.
    Tensor<double> downsample_map;    // N x F, rows sum to 1
    Tensor<double> upsample_params;   // F x N, pseudoinverse of downsample_map at load
    Tensor<double> joint_regressor;   // J x N, rows sum to 1
    std::vector<std::uint8_t> parts;  // optional per-coarse-vertex part id

    std::size_t full_count() const { return vertices_full.size(); }
    std::size_t coarse_count() const { return vertices_coarse.size(); }
    std::size_t joint_count() const { return joint_regressor.rows(); }

    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a64(vertices_full.data(), vertices_full.size() * sizeof(Vec3));
        h = fnv1a64(triangles_full.data(), triangles_full.size() * sizeof(std::array<int, 3>), h);
        h = fnv1a64(vertices_coarse.data(), vertices_coarse.size() * sizeof(Vec3), h);
        h = fnv1a64(uv_coarse.data(), uv_coarse.size() * sizeof(Vec2), h);
        h = fnv1a64(downsample_map.data(), downsample_map.size() * sizeof(double), h);
        h = fnv1a64(joint_regressor.data(), joint_regressor.size() * sizeof(double), h);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Mesh graph helpers.

inline std::vector<std::vector<int>> vertex_adjacency(std::size_t vertex_count,
                                                      const std::vector<std::array<int, 3>>& tris) {
    std::vector<std::vector<int>> adj(vertex_count);
    auto link = [&](int a, int b) {
        auto& la = adj[static_cast<std::size_t>(a)];
        for (int x : la)
            if (x == b) return;
        la.push_back(b);
    };
    for (const auto& t : tris)
        for (int c = 0; c < 3; ++c) {
            link(t[static_cast<std::size_t>(c)], t[static_cast<std::size_t>((c + 1) % 3)]);
            link(t[static_cast<std::size_t>((c + 1) % 3)], t[static_cast<std::size_t>(c)]);
        }
    return adj;
}

inline bool single_connected_component(std::size_t vertex_count,
                                       const std::vector<std::array<int, 3>>& tris) {
    if (vertex_count == 0) return false;
    const auto adj = vertex_adjacency(vertex_count, tris);
    std::vector<char> seen(vertex_count, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    std::size_t visited = 1;
    while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        for (int u : adj[static_cast<std::size_t>(v)])
            if (!seen[static_cast<std::size_t>(u)]) {
                seen[static_cast<std::size_t>(u)] = 1;
                ++visited;
                stack.push_back(u);
            }
    }
    return visited == vertex_count;
}

inline double mean_edge_length(const std::vector<Vec3>& verts,
                               const std::vector<std::array<int, 3>>& tris) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& t : tris)
        for (int c = 0; c < 3; ++c) {
            const Vec3& a = verts[static_cast<std::size_t>(t[static_cast<std::size_t>(c)])];
            const Vec3& b = verts[static_cast<std::size_t>(t[static_cast<std::size_t>((c + 1) % 3)])];
            total += norm(a - b);
            ++count;
        }
    return count ? total / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Resolution-change operators. All are plain linear maps over vertex lists.

inline std::vector<Vec3> apply_linear_map(const Tensor<double>& m, const std::vector<Vec3>& in,
                                          const char* op_name) {
    if (m.rank() != 2 || m.cols() != in.size())
        throw std::invalid_argument(std::string(op_name) + ": operator shape " +
                                    shape_str(m.shape()) + " does not match vertex count " +
                                    std::to_string(in.size()));
    std::vector<Vec3> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        Vec3 acc{};
        const double* row = m.data() + i * m.cols();
        for (std::size_t j = 0; j < m.cols(); ++j) {
            const double w = row[j];
            if (w != 0.0) acc += w * in[j];
        }
        out[i] = acc;
    }
    return out;
}

inline CoarseMesh downsample(const TemplateMesh& tmpl, const std::vector<Vec3>& full_vertices) {
    return CoarseMesh{apply_linear_map(tmpl.downsample_map, full_vertices, "downsample")};
}

inline std::vector<Vec3> upsample(const TemplateMesh& tmpl, const CoarseMesh& coarse) {
    return apply_linear_map(tmpl.upsample_params, coarse.vertices, "upsample");
}

inline std::vector<Vec3> regress_joints(const TemplateMesh& tmpl, const CoarseMesh& coarse) {
    return apply_linear_map(tmpl.joint_regressor, coarse.vertices, "regress_joints");
}

// ---------------------------------------------------------------------------
// Template validation and loading.

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw FormatError(msg);
}

inline void check_rows_sum_to_one(const Tensor<double>& m, const std::string& what) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += m.at(i, j);
        if (std::abs(s - 1.0) > 1e-6)
            throw FormatError(what + ": row " + std::to_string(i) + " sums to " +
                              std::to_string(s) + ", expected 1 within 1e-6");
    }
}

inline void check_uvs(const std::vector<Vec2>& uvs, const std::string& what) {
    for (std::size_t i = 0; i < uvs.size(); ++i)
        if (!(uvs[i].x >= 0.0 && uvs[i].x <= 1.0 && uvs[i].y >= 0.0 && uvs[i].y <= 1.0))
            throw FormatError(what + ": uv out of range at vertex " + std::to_string(i) + " (" +
                              std::to_string(uvs[i].x) + ", " + std::to_string(uvs[i].y) + ")");
}

// OBJ gives uv per vt record; templates require one uv per vertex with faces
// referencing matching indices.
inline std::vector<Vec2> per_vertex_uvs(const ObjMesh& obj, const std::string& what) {
    require(!obj.uvs.empty(), what + ": missing uv channel (no vt records)");
    require(obj.uvs.size() == obj.vertices.size(),
            what + ": expected one vt per vertex, got " + std::to_string(obj.uvs.size()) +
                " vt for " + std::to_string(obj.vertices.size()) + " vertices");
    for (std::size_t t = 0; t < obj.triangles.size(); ++t)
        for (int c = 0; c < 3; ++c) {
            const int vi = obj.triangles[t][static_cast<std::size_t>(c)];
            const int ti = obj.tri_uvs[t][static_cast<std::size_t>(c)];
            require(ti == vi, what + ": face " + std::to_string(t) +
                                  " pairs vertex " + std::to_string(vi) + " with vt " +
                                  std::to_string(ti) + "; per-vertex uv binding requires v==vt");
        }
    return obj.uvs;
}

}  // namespace detail

inline void validate_template(const TemplateMesh& t) {
    using detail::require;
    const std::size_t f = t.full_count(), n = t.coarse_count();
    require(f >= 3, "template: full mesh has fewer than 3 vertices");
    require(n >= 1, "template: coarse mesh is empty");
    for (const auto& tri : t.triangles_full)
        for (int c : tri)
            require(c >= 0 && static_cast<std::size_t>(c) < f,
                    "template full mesh: triangle index " + std::to_string(c) +
                        " out of bounds (vertex count " + std::to_string(f) + ")");
    for (const auto& tri : t.triangles_coarse)
        for (int c : tri)
            require(c >= 0 && static_cast<std::size_t>(c) < n,
                    "template coarse mesh: triangle index " + std::to_string(c) +
                        " out of bounds (vertex count " + std::to_string(n) + ")");
    require(single_connected_component(f, t.triangles_full),
            "template full mesh: not a single connected component");
    require(single_connected_component(n, t.triangles_coarse),
            "template coarse mesh: not a single connected component");
    detail::check_uvs(t.uv_full, "template full mesh");
    detail::check_uvs(t.uv_coarse, "template coarse mesh");
    // Coarse UVs must be unique: they are the match keys.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            require(t.uv_coarse[i].x != t.uv_coarse[j].x || t.uv_coarse[i].y != t.uv_coarse[j].y,
                    "template coarse mesh: duplicate uv for vertices " + std::to_string(i) +
                        " and " + std::to_string(j));
    require(t.downsample_map.rank() == 2 && t.downsample_map.rows() == n &&
                t.downsample_map.cols() == f,
            "template: downsample map shape " + shape_str(t.downsample_map.shape()) +
                " does not match coarse x full = (" + std::to_string(n) + "," + std::to_string(f) + ")");
    detail::check_rows_sum_to_one(t.downsample_map, "template downsample map");
    require(t.joint_regressor.rank() == 2 && t.joint_regressor.cols() == n,
            "template: joint regressor shape " + shape_str(t.joint_regressor.shape()) +
                " does not match coarse vertex count " + std::to_string(n));
    detail::check_rows_sum_to_one(t.joint_regressor, "template joint regressor");
    if (!t.parts.empty())
        require(t.parts.size() == n, "template: parts vector size " + std::to_string(t.parts.size()) +
                                         " does not match coarse vertex count");
    for (const Vec3& v : t.vertices_full)
        require(std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z),
                "template full mesh: non-finite vertex coordinate");
}

inline TemplateMesh load_template(const std::string& dir) {
    TemplateMesh t;
    const ObjMesh full = read_obj(dir + "/mesh.obj");
    t.vertices_full = full.vertices;
    t.triangles_full = full.triangles;
    t.uv_full = detail::per_vertex_uvs(full, dir + "/mesh.obj");

    const ObjMesh coarse = read_obj(dir + "/mesh_coarse.obj");
    t.vertices_coarse = coarse.vertices;
    t.triangles_coarse = coarse.triangles;
    t.uv_coarse = detail::per_vertex_uvs(coarse, dir + "/mesh_coarse.obj");

    t.downsample_map = load_tensor_as<float>(dir + "/downsample.mat").cast<double>();
    t.joint_regressor = load_tensor_as<float>(dir + "/regressor.mat").cast<double>();

    std::ifstream mf(dir + "/meta.json");
    if (!mf) throw FormatError(dir + "/meta.json: cannot open file");
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const std::exception& e) {
        throw FormatError(dir + "/meta.json: parse error: " + e.what());
    }
    const auto n = meta.at("coarse_vertices").get<std::size_t>();
    const auto j = meta.at("joint_count").get<std::size_t>();
    detail::require(n == t.coarse_count(),
                    dir + ": meta.json coarse_vertices=" + std::to_string(n) +
                        " but coarse mesh has " + std::to_string(t.coarse_count()) + " vertices");
    detail::require(j == t.joint_regressor.rows(),
                    dir + ": meta.json joint_count=" + std::to_string(j) + " but regressor has " +
                        std::to_string(t.joint_regressor.rows()) + " rows");

    std::ifstream pf(dir + "/parts.mat", std::ios::binary);
    if (pf.good()) {
        pf.close();
        t.parts = load_tensor_as<std::uint8_t>(dir + "/parts.mat").to_vector();
    }

    validate_template(t);
    t.upsample_params = linalg::pinv_full_row_rank(t.downsample_map);
    return t;
}

inline void save_template(const std::string& dir, const TemplateMesh& t) {
    write_obj(dir + "/mesh.obj", t.vertices_full, t.triangles_full, &t.uv_full);
    write_obj(dir + "/mesh_coarse.obj", t.vertices_coarse, t.triangles_coarse, &t.uv_coarse);
    save_tensor(dir + "/downsample.mat", t.downsample_map.cast<float>());
    save_tensor(dir + "/regressor.mat", t.joint_regressor.cast<float>());
    if (!t.parts.empty())
        save_tensor(dir + "/parts.mat",
                    Tensor<std::uint8_t>::from({t.parts.size()}, t.parts));
    nlohmann::json meta;
    meta["coarse_vertices"] = t.coarse_count();
    meta["joint_count"] = t.joint_count();
    meta["units"] = "meters";
    std::ofstream mf(dir + "/meta.json", std::ios::trunc);
    if (!mf) throw FormatError(dir + "/meta.json: cannot open file for writing");
    mf << meta.dump(2) << "\n";
}

}  // namespace meshrecover
