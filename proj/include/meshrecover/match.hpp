// Depth-frame to partial-mesh conversion: lift body pixels to 3D, then match
// template vertices to lifted points by UV nearest neighbor with an epsilon
// visibility threshold.
//
// The accelerated search (uniform grid over [0,1]^2 with expanding rings) is
// exact: for every query it returns the same (distance, index)-lexicographic
// argmin as a full scan, so ties break toward the lowest pixel index.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "camera.hpp"
#include "errors.hpp"
#include "mesh.hpp"
#include "tensor_io.hpp"

namespace meshrecover {

struct LiftedPointSet {
    std::vector<Vec3> points;          // camera-space positions
    std::vector<Vec2> uvs;             // one uv per point
    std::vector<std::uint8_t> parts;   // optional per-point part id
};

struct PartialMesh {
    std::vector<Vec3> vertices_in;     // undefined where mask == 0
    std::vector<std::uint8_t> mask;

    std::size_t visible_count() const {
        std::size_t n = 0;
        for (auto m : mask) n += m;
        return n;
    }
};

// One lifted point per depth>0 pixel, in row-major pixel order (this order is
// what the documented tie-break refers to).
inline LiftedPointSet lift_all(const DepthUVFrame& frame) {
    LiftedPointSet out;
    const bool with_parts = !frame.part.empty();
    for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x) {
            if (!(frame.depth_at(x, y) > 0.0f)) continue;
            out.points.push_back(lift(frame, x, y));
            out.uvs.push_back(frame.uv_at(x, y));
            if (with_parts)
                out.parts.push_back(frame.part[static_cast<std::size_t>(y) *
                                                   static_cast<std::size_t>(frame.width) +
                                               static_cast<std::size_t>(x)]);
        }
    return out;
}

namespace nn_detail {

struct Best {
    double d2 = std::numeric_limits<double>::infinity();
    std::ptrdiff_t idx = -1;

    void consider(double cand_d2, std::ptrdiff_t cand_idx) {
        if (cand_d2 < d2 || (cand_d2 == d2 && cand_idx < idx)) {
            d2 = cand_d2;
            idx = cand_idx;
        }
    }
};

}  // namespace nn_detail

// Exact nearest neighbor over 2-D points via a uniform grid. Cell size
// defaults to the match epsilon (clamped so the grid stays small); queries
// expand rings until the current best provably beats everything unscanned.
class UvGridIndex {
public:
    UvGridIndex(const std::vector<Vec2>& uvs, double cell_size) : uvs_(uvs) {
        cell_ = std::clamp(cell_size, 1.0 / 512.0, 1.0);
        nx_ = std::max(1, static_cast<int>(std::ceil(1.0 / cell_)));
        ny_ = nx_;
        const std::size_t ncell = static_cast<std::size_t>(nx_) * static_cast<std::size_t>(ny_);
        std::vector<std::uint32_t> counts(ncell + 1, 0);
        cell_of_.resize(uvs.size());
        for (std::size_t i = 0; i < uvs.size(); ++i) {
            cell_of_[i] = cell_index(uvs[i]);
            ++counts[cell_of_[i] + 1];
        }
        for (std::size_t c = 1; c <= ncell; ++c) counts[c] += counts[c - 1];
        offsets_ = counts;
        order_.resize(uvs.size());
        std::vector<std::uint32_t> cursor(offsets_.begin(), offsets_.end() - 1);
        for (std::size_t i = 0; i < uvs.size(); ++i)
            order_[cursor[cell_of_[i]]++] = static_cast<std::uint32_t>(i);
        // Points were inserted in index order, so each cell's list is sorted.
    }

    // Returns (squared distance, index) of the exact lexicographic argmin, or
    // idx == -1 when the set is empty.
    nn_detail::Best nearest(const Vec2& q) const {
        nn_detail::Best best;
        if (uvs_.empty()) return best;
        const int qx = coord_x(q.x), qy = coord_y(q.y);
        const int max_ring = std::max(std::max(qx, nx_ - 1 - qx), std::max(qy, ny_ - 1 - qy));
        for (int r = 0; r <= max_ring; ++r) {
            // Once rings 0..r-1 are scanned, everything unscanned lies in a
            // cell at Chebyshev distance >= r and is strictly farther than
            // (r-1)*cell. Stop when the best strictly beats that bound (the
            // strict compare keeps exact ties impossible among unscanned
            // points, preserving the lowest-index tie-break).
            if (best.idx >= 0 && r >= 1) {
                const double bound = static_cast<double>(r - 1) * cell_;
                if (best.d2 < bound * bound) break;
            }
            scan_ring(q, qx, qy, r, best);
        }
        return best;
    }

private:
    std::size_t cell_index(const Vec2& p) const {
        return static_cast<std::size_t>(coord_y(p.y)) * static_cast<std::size_t>(nx_) +
               static_cast<std::size_t>(coord_x(p.x));
    }
    int coord_x(double x) const {
        return std::clamp(static_cast<int>(std::floor(x / cell_)), 0, nx_ - 1);
    }
    int coord_y(double y) const {
        return std::clamp(static_cast<int>(std::floor(y / cell_)), 0, ny_ - 1);
    }

    void scan_cell(const Vec2& q, int cx, int cy, nn_detail::Best& best) const {
        const std::size_t c = static_cast<std::size_t>(cy) * static_cast<std::size_t>(nx_) +
                              static_cast<std::size_t>(cx);
        for (std::uint32_t k = offsets_[c]; k < offsets_[c + 1]; ++k) {
            const std::uint32_t i = order_[k];
            best.consider(norm2(uvs_[i] - q), static_cast<std::ptrdiff_t>(i));
        }
    }

    void scan_ring(const Vec2& q, int qx, int qy, int r, nn_detail::Best& best) const {
        if (r == 0) {
            scan_cell(q, qx, qy, best);
            return;
        }
        for (int cx = qx - r; cx <= qx + r; ++cx) {
            if (cx < 0 || cx >= nx_) continue;
            for (int cy : {qy - r, qy + r})
                if (cy >= 0 && cy < ny_) scan_cell(q, cx, cy, best);
        }
        for (int cy = qy - r + 1; cy <= qy + r - 1; ++cy) {
            if (cy < 0 || cy >= ny_) continue;
            for (int cx : {qx - r, qx + r})
                if (cx >= 0 && cx < nx_) scan_cell(q, cx, cy, best);
        }
    }

    std::vector<Vec2> uvs_;
    double cell_ = 0.01;
    int nx_ = 1, ny_ = 1;
    std::vector<std::uint32_t> offsets_;
    std::vector<std::uint32_t> order_;
    std::vector<std::size_t> cell_of_;
};

// Core matcher over raw UV lists. For each vertex uv, finds the nearest point
// uv (Euclidean, ties to the lowest point index) and masks it in when the
// distance is strictly below eps.
inline PartialMesh match_uv(const LiftedPointSet& points, const std::vector<Vec2>& vertex_uvs,
                            double eps, const std::vector<std::uint8_t>& vertex_parts = {}) {
    if (!(eps > 0.0)) throw std::invalid_argument("match: eps must be positive");
    PartialMesh out;
    out.vertices_in.assign(vertex_uvs.size(), Vec3{});
    out.mask.assign(vertex_uvs.size(), 0);
    if (points.points.empty()) return out;  // all-zero mask; caller decides

    const bool part_aware = !vertex_parts.empty() && !points.parts.empty();
    const double eps2 = eps * eps;

    if (!part_aware) {
        const UvGridIndex index(points.uvs, eps);
        for (std::size_t i = 0; i < vertex_uvs.size(); ++i) {
            const auto best = index.nearest(vertex_uvs[i]);
            if (best.idx >= 0 && best.d2 < eps2) {
                out.mask[i] = 1;
                out.vertices_in[i] = points.points[static_cast<std::size_t>(best.idx)];
            }
        }
        return out;
    }

    // Part-aware path: one grid per part id, candidates restricted to the
    // vertex's own part.
    std::vector<std::uint8_t> part_ids;
    for (std::uint8_t p : points.parts)
        if (std::find(part_ids.begin(), part_ids.end(), p) == part_ids.end()) part_ids.push_back(p);
    std::vector<std::vector<std::uint32_t>> part_points(part_ids.size());
    std::vector<UvGridIndex> grids;
    for (std::size_t g = 0; g < part_ids.size(); ++g) {
        std::vector<Vec2> uvs;
        for (std::size_t p = 0; p < points.uvs.size(); ++p)
            if (points.parts[p] == part_ids[g]) {
                part_points[g].push_back(static_cast<std::uint32_t>(p));
                uvs.push_back(points.uvs[p]);
            }
        grids.emplace_back(uvs, eps);
    }
    for (std::size_t i = 0; i < vertex_uvs.size(); ++i) {
        const auto it = std::find(part_ids.begin(), part_ids.end(), vertex_parts[i]);
        if (it == part_ids.end()) continue;
        const std::size_t g = static_cast<std::size_t>(it - part_ids.begin());
        const auto best = grids[g].nearest(vertex_uvs[i]);
        if (best.idx >= 0 && best.d2 < eps2) {
            out.mask[i] = 1;
            out.vertices_in[i] = points.points[part_points[g][static_cast<std::size_t>(best.idx)]];
        }
    }
    return out;
}

// Brute-force matcher, kept as the in-tree oracle for selfcheck.
inline PartialMesh match_uv_brute(const LiftedPointSet& points, const std::vector<Vec2>& vertex_uvs,
                                  double eps, const std::vector<std::uint8_t>& vertex_parts = {}) {
    if (!(eps > 0.0)) throw std::invalid_argument("match: eps must be positive");
    PartialMesh out;
    out.vertices_in.assign(vertex_uvs.size(), Vec3{});
    out.mask.assign(vertex_uvs.size(), 0);
    const bool part_aware = !vertex_parts.empty() && !points.parts.empty();
    const double eps2 = eps * eps;
    for (std::size_t i = 0; i < vertex_uvs.size(); ++i) {
        nn_detail::Best best;
        for (std::size_t p = 0; p < points.uvs.size(); ++p) {
            if (part_aware && points.parts[p] != vertex_parts[i]) continue;
            best.consider(norm2(points.uvs[p] - vertex_uvs[i]), static_cast<std::ptrdiff_t>(p));
        }
        if (best.idx >= 0 && best.d2 < eps2) {
            out.mask[i] = 1;
            out.vertices_in[i] = points.points[static_cast<std::size_t>(best.idx)];
        }
    }
    return out;
}

inline PartialMesh match(const LiftedPointSet& points, const TemplateMesh& tmpl, double eps) {
    return match_uv(points, tmpl.uv_coarse, eps,
                    points.parts.empty() ? std::vector<std::uint8_t>{} : tmpl.parts);
}

// ---------------------------------------------------------------------------
// Partial mesh serialization: archive with rank-2 f32 vertices and rank-1 u8
// mask.

inline void save_partial(const std::string& path, const PartialMesh& pm) {
    const std::size_t n = pm.mask.size();
    std::vector<float> verts(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
        verts[i * 3] = static_cast<float>(pm.vertices_in[i].x);
        verts[i * 3 + 1] = static_cast<float>(pm.vertices_in[i].y);
        verts[i * 3 + 2] = static_cast<float>(pm.vertices_in[i].z);
    }
    save_archive(path, {{"vertices", Tensor<float>::from({n, 3}, std::move(verts))},
                        {"mask", Tensor<std::uint8_t>::from({n}, pm.mask)}});
}

inline PartialMesh load_partial(const std::string& path) {
    const auto entries = load_archive(path);
    const auto& verts = archive_get<float>(entries, "vertices", path);
    const auto& mask = archive_get<std::uint8_t>(entries, "mask", path);
    if (verts.rank() != 2 || verts.dim(1) != 3)
        throw FormatError(path + ": vertices must have shape (N,3)");
    if (mask.rank() != 1 || mask.dim(0) != verts.dim(0))
        throw FormatError(path + ": mask must have shape (N) matching vertices");
    PartialMesh pm;
    const std::size_t n = verts.dim(0);
    pm.vertices_in.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        pm.vertices_in[i] = {verts.at(i, 0), verts.at(i, 1), verts.at(i, 2)};
    pm.mask = mask.to_vector();
    for (std::size_t i = 0; i < n; ++i)
        if (pm.mask[i] && !(std::isfinite(pm.vertices_in[i].x) && std::isfinite(pm.vertices_in[i].y) &&
                            std::isfinite(pm.vertices_in[i].z)))
            throw FormatError(path + ": non-finite position at visible vertex " + std::to_string(i));
    return pm;
}

}  // namespace meshrecover
