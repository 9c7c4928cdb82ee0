// Virtual pinhole camera: depth + UV rendering via per-pixel ray casting with
// a z-buffer, per-vertex visibility by analytic ray casting (reference) or
// depth-buffer lookup (fast path), and pixel lifting.
//
// Conventions: world-to-camera transform cam = R * X + t; the camera center
// is -R^T t; rays leave the origin of camera space; pixel (x, y) samples the
// ray direction ((x-cx)/fx, (y-cy)/fy, 1), so a hit's ray parameter equals
// its camera-space depth. Pixels are sampled at integer coordinates.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "geometry.hpp"
#include "tensor_io.hpp"

namespace meshrecover {

struct Intrinsics {
    double fx = 200.0, fy = 200.0;
    double cx = 128.0, cy = 128.0;
    int width = 256, height = 256;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0))
            throw std::invalid_argument("intrinsics: focal lengths must be positive");
        if (width < 1 || height < 1)
            throw std::invalid_argument("intrinsics: image size must be at least 1x1");
    }
};

struct CameraPose {
    Mat3 rotation;    // world-to-camera
    Vec3 translation;

    void validate() const {
        const Mat3 rtr = transpose(rotation) * rotation;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                const double want = i == j ? 1.0 : 0.0;
                if (std::abs(rtr(i, j) - want) > 1e-6)
                    throw std::invalid_argument("camera pose: rotation is not orthonormal");
            }
        if (std::abs(det(rotation) - 1.0) > 1e-6)
            throw std::invalid_argument("camera pose: rotation determinant is not +1");
    }

    Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
    Vec3 center() const { return -(transpose(rotation) * translation); }

    // Camera on a horizontal circle of the given radius around the origin,
    // looking at the origin. Azimuth 0 places it at (0, 0, -distance).
    static CameraPose frontal(double distance, double azimuth_rad = 0.0) {
        CameraPose p;
        p.rotation = Mat3::rot_y(azimuth_rad);
        p.translation = {0.0, 0.0, distance};
        return p;
    }
};

struct DepthUVFrame {
    int width = 0, height = 0;
    Intrinsics intrinsics;
    std::vector<float> depth;          // height*width, 0 = no body
    std::vector<float> uv;             // height*width*2, valid where depth > 0
    std::vector<std::uint8_t> part;    // optional height*width part ids

    float depth_at(int x, int y) const {
        return depth[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                     static_cast<std::size_t>(x)];
    }
    Vec2 uv_at(int x, int y) const {
        const std::size_t i =
            (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
             static_cast<std::size_t>(x)) * 2;
        return {uv[i], uv[i + 1]};
    }
    bool has_body() const {
        for (float d : depth)
            if (d > 0.0f) return true;
        return false;
    }
};

inline Vec2 project(const Intrinsics& intr, const Vec3& cam_point) {
    return {intr.fx * cam_point.x / cam_point.z + intr.cx,
            intr.fy * cam_point.y / cam_point.z + intr.cy};
}

// Lifts pixel (x, y) with its stored depth to camera coordinates:
// X = D * K^-1 * [x, y, 1]^T.
inline Vec3 lift(const DepthUVFrame& frame, int x, int y) {
    if (x < 0 || x >= frame.width || y < 0 || y >= frame.height)
        throw std::invalid_argument("lift: pixel (" + std::to_string(x) + "," + std::to_string(y) +
                                    ") outside " + std::to_string(frame.width) + "x" +
                                    std::to_string(frame.height) + " frame");
    const double d = frame.depth_at(x, y);
    if (!(d > 0.0))
        throw DegenerateInputError("lift: no body at pixel (" + std::to_string(x) + "," +
                                   std::to_string(y) + ")");
    const Intrinsics& k = frame.intrinsics;
    return {d * (x - k.cx) / k.fx, d * (y - k.cy) / k.fy, d};
}

// ---------------------------------------------------------------------------
// Ray-triangle intersection (Moller-Trumbore). The ray parameter t is in
// units of |dir|; for pixel rays dir.z == 1, so t equals camera-space depth.

struct RayHit {
    double t = 0.0, u = 0.0, v = 0.0;
};

inline bool ray_triangle(const Vec3& orig, const Vec3& dir, const Vec3& a, const Vec3& b,
                         const Vec3& c, RayHit& hit) {
    const Vec3 e1 = b - a, e2 = c - a;
    const Vec3 p = cross(dir, e2);
    const double det = dot(e1, p);
    if (std::abs(det) < 1e-12) return false;  // parallel ray or degenerate triangle
    const double inv = 1.0 / det;
    const Vec3 s = orig - a;
    const double u = dot(s, p) * inv;
    if (u < 0.0 || u > 1.0) return false;
    const Vec3 q = cross(s, e1);
    const double v = dot(dir, q) * inv;
    if (v < 0.0 || u + v > 1.0) return false;
    const double t = dot(e2, q) * inv;
    if (t <= 0.0) return false;
    hit = {t, u, v};
    return true;
}

// ---------------------------------------------------------------------------
// Rendering.

inline std::vector<Vec3> to_camera_space(const std::vector<Vec3>& verts, const CameraPose& pose) {
    std::vector<Vec3> cam(verts.size());
    for (std::size_t i = 0; i < verts.size(); ++i) cam[i] = pose.to_camera(verts[i]);
    return cam;
}

// Z-buffer rasterization by ray casting every pixel in each triangle's screen
// bounding box. Nearer surface wins; exact depth ties keep the earlier
// triangle. If `uvs` is null the uv channel stays zero. A mesh entirely
// behind the camera yields an all-zero frame (check has_body()).
inline DepthUVFrame render_depth_uv(const std::vector<Vec3>& verts,
                                    const std::vector<std::array<int, 3>>& tris,
                                    const std::vector<Vec2>* uvs, const CameraPose& pose,
                                    const Intrinsics& intr) {
    intr.validate();
    if (uvs && uvs->size() != verts.size())
        throw std::invalid_argument("render_depth_uv: uv count " + std::to_string(uvs->size()) +
                                    " does not match vertex count " + std::to_string(verts.size()));
    DepthUVFrame frame;
    frame.width = intr.width;
    frame.height = intr.height;
    frame.intrinsics = intr;
    const std::size_t npix = static_cast<std::size_t>(intr.width) * static_cast<std::size_t>(intr.height);
    frame.depth.assign(npix, 0.0f);
    frame.uv.assign(npix * 2, 0.0f);

    const std::vector<Vec3> cam = to_camera_space(verts, pose);
    std::vector<double> zbuf(npix, std::numeric_limits<double>::infinity());

    for (const auto& tri : tris) {
        const Vec3& a = cam[static_cast<std::size_t>(tri[0])];
        const Vec3& b = cam[static_cast<std::size_t>(tri[1])];
        const Vec3& c = cam[static_cast<std::size_t>(tri[2])];
        if (a.z <= 0.0 && b.z <= 0.0 && c.z <= 0.0) continue;

        int x0 = 0, x1 = intr.width - 1, y0 = 0, y1 = intr.height - 1;
        if (a.z > 0.0 && b.z > 0.0 && c.z > 0.0) {
            // Fully in front: scan only the projected bounding box.
            const Vec2 pa = project(intr, a), pb = project(intr, b), pc = project(intr, c);
            x0 = std::max(x0, static_cast<int>(std::ceil(std::min({pa.x, pb.x, pc.x}))));
            x1 = std::min(x1, static_cast<int>(std::floor(std::max({pa.x, pb.x, pc.x}))));
            y0 = std::max(y0, static_cast<int>(std::ceil(std::min({pa.y, pb.y, pc.y}))));
            y1 = std::min(y1, static_cast<int>(std::floor(std::max({pa.y, pb.y, pc.y}))));
        }
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const Vec3 dir{(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0};
                RayHit hit;
                if (!ray_triangle({0, 0, 0}, dir, a, b, c, hit)) continue;
                const std::size_t idx = static_cast<std::size_t>(y) * static_cast<std::size_t>(intr.width) +
                                        static_cast<std::size_t>(x);
                if (hit.t < zbuf[idx]) {
                    zbuf[idx] = hit.t;
                    frame.depth[idx] = static_cast<float>(hit.t);
                    if (uvs) {
                        const Vec2 uva = (*uvs)[static_cast<std::size_t>(tri[0])];
                        const Vec2 uvb = (*uvs)[static_cast<std::size_t>(tri[1])];
                        const Vec2 uvc = (*uvs)[static_cast<std::size_t>(tri[2])];
                        const double w0 = 1.0 - hit.u - hit.v;
                        frame.uv[idx * 2] = static_cast<float>(w0 * uva.x + hit.u * uvb.x + hit.v * uvc.x);
                        frame.uv[idx * 2 + 1] = static_cast<float>(w0 * uva.y + hit.u * uvb.y + hit.v * uvc.y);
                    }
                }
            }
        }
    }
    return frame;
}

// ---------------------------------------------------------------------------
// Per-vertex visibility.

namespace detail {

inline std::vector<std::vector<int>> incident_triangles(std::size_t vertex_count,
                                                        const std::vector<std::array<int, 3>>& tris) {
    std::vector<std::vector<int>> inc(vertex_count);
    for (std::size_t t = 0; t < tris.size(); ++t)
        for (int c : tris[t]) inc[static_cast<std::size_t>(c)].push_back(static_cast<int>(t));
    return inc;
}

// True when at least one incident triangle faces the camera (outward CCW
// winding assumed; the camera sits at the origin of camera space).
inline bool front_facing(const std::vector<Vec3>& cam, const std::vector<std::array<int, 3>>& tris,
                         const std::vector<int>& incident) {
    for (int ti : incident) {
        const auto& t = tris[static_cast<std::size_t>(ti)];
        const Vec3& a = cam[static_cast<std::size_t>(t[0])];
        const Vec3& b = cam[static_cast<std::size_t>(t[1])];
        const Vec3& c = cam[static_cast<std::size_t>(t[2])];
        const Vec3 n = cross(b - a, c - a);
        if (dot(n, a + b + c) < 0.0) return true;
    }
    return false;
}

inline bool in_frustum(const Intrinsics& intr, const Vec3& cam_v, Vec2& px) {
    if (!(cam_v.z > 0.0)) return false;
    px = project(intr, cam_v);
    return px.x >= 0.0 && px.x <= intr.width - 1.0 && px.y >= 0.0 && px.y <= intr.height - 1.0;
}

}  // namespace detail

// Reference visibility: vertex i is visible iff it is in the frustum, has at
// least one camera-facing incident triangle, and the ray from the camera
// center toward it meets no triangle strictly closer than (1 - rel_tol) of
// its own distance. rel_tol is the visibility tolerance relative to the
// vertex's depth.
inline std::vector<std::uint8_t> visible_vertices(const std::vector<Vec3>& verts,
                                                  const std::vector<std::array<int, 3>>& tris,
                                                  const CameraPose& pose, const Intrinsics& intr,
                                                  double rel_tol = 1e-4) {
    intr.validate();
    const std::vector<Vec3> cam = to_camera_space(verts, pose);
    const auto incident = detail::incident_triangles(verts.size(), tris);
    std::vector<std::uint8_t> mask(verts.size(), 0);
    for (std::size_t i = 0; i < verts.size(); ++i) {
        Vec2 px;
        if (!detail::in_frustum(intr, cam[i], px)) continue;
        if (!detail::front_facing(cam, tris, incident[i])) continue;
        // Ray parameterized so the vertex itself sits at t = 1.
        bool occluded = false;
        RayHit hit;
        for (const auto& t : tris) {
            if (ray_triangle({0, 0, 0}, cam[i], cam[static_cast<std::size_t>(t[0])],
                             cam[static_cast<std::size_t>(t[1])], cam[static_cast<std::size_t>(t[2])],
                             hit) &&
                hit.t < 1.0 - rel_tol) {
                occluded = true;
                break;
            }
        }
        if (!occluded) mask[i] = 1;
    }
    return mask;
}

// Fast visibility via depth-buffer lookup. Vertices whose rounded pixel is
// uncovered (silhouette grazers) fall back to the single-vertex ray test.
// rel_z absorbs the intra-pixel surface slope; the 3x3 max makes steep
// regions compare against their own surface rather than a nearer neighbor.
inline std::vector<std::uint8_t> visible_vertices_zbuffer(
    const std::vector<Vec3>& verts, const std::vector<std::array<int, 3>>& tris,
    const CameraPose& pose, const Intrinsics& intr, double rel_z = 2e-3, double rel_tol = 1e-4) {
    intr.validate();
    const DepthUVFrame frame = render_depth_uv(verts, tris, nullptr, pose, intr);
    const std::vector<Vec3> cam = to_camera_space(verts, pose);
    const auto incident = detail::incident_triangles(verts.size(), tris);
    std::vector<std::uint8_t> mask(verts.size(), 0);
    for (std::size_t i = 0; i < verts.size(); ++i) {
        Vec2 px;
        if (!detail::in_frustum(intr, cam[i], px)) continue;
        if (!detail::front_facing(cam, tris, incident[i])) continue;
        const int xr = static_cast<int>(std::lround(px.x));
        const int yr = static_cast<int>(std::lround(px.y));
        double dmax = 0.0;
        bool rim = false;  // neighborhood touches background or the frame edge
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int x = xr + dx, y = yr + dy;
                if (x < 0 || x >= intr.width || y < 0 || y >= intr.height) {
                    rim = true;
                    continue;
                }
                const float d = frame.depth_at(x, y);
                if (d == 0.0f) rim = true;
                dmax = std::max(dmax, static_cast<double>(d));
            }
        if (rim) {
            // Silhouette grazers: the buffer only sees nearer surface, so
            // resolve these few vertices with the exact ray test.
            bool occluded = false;
            RayHit hit;
            for (const auto& t : tris)
                if (ray_triangle({0, 0, 0}, cam[i], cam[static_cast<std::size_t>(t[0])],
                                 cam[static_cast<std::size_t>(t[1])],
                                 cam[static_cast<std::size_t>(t[2])], hit) &&
                    hit.t < 1.0 - rel_tol) {
                    occluded = true;
                    break;
                }
            if (!occluded) mask[i] = 1;
            continue;
        }
        if (cam[i].z - dmax <= rel_z * cam[i].z) mask[i] = 1;
    }
    return mask;
}

// Face-level occlusion variant: a vertex counts as visible when any incident
// camera-facing triangle has an unoccluded centroid.
inline std::vector<std::uint8_t> visible_vertices_face_level(
    const std::vector<Vec3>& verts, const std::vector<std::array<int, 3>>& tris,
    const CameraPose& pose, const Intrinsics& intr, double rel_tol = 1e-4) {
    intr.validate();
    const std::vector<Vec3> cam = to_camera_space(verts, pose);
    std::vector<std::uint8_t> tri_visible(tris.size(), 0);
    for (std::size_t ti = 0; ti < tris.size(); ++ti) {
        const auto& t = tris[ti];
        const Vec3& a = cam[static_cast<std::size_t>(t[0])];
        const Vec3& b = cam[static_cast<std::size_t>(t[1])];
        const Vec3& c = cam[static_cast<std::size_t>(t[2])];
        const Vec3 n = cross(b - a, c - a);
        if (!(dot(n, a + b + c) < 0.0)) continue;  // back-facing
        const Vec3 centroid = (1.0 / 3.0) * (a + b + c);
        Vec2 px;
        if (!detail::in_frustum(intr, centroid, px)) continue;
        bool occluded = false;
        RayHit hit;
        for (std::size_t tj = 0; tj < tris.size(); ++tj) {
            if (tj == ti) continue;
            const auto& o = tris[tj];
            if (ray_triangle({0, 0, 0}, centroid, cam[static_cast<std::size_t>(o[0])],
                             cam[static_cast<std::size_t>(o[1])], cam[static_cast<std::size_t>(o[2])],
                             hit) &&
                hit.t < 1.0 - rel_tol) {
                occluded = true;
                break;
            }
        }
        if (!occluded) tri_visible[ti] = 1;
    }
    std::vector<std::uint8_t> mask(verts.size(), 0);
    for (std::size_t ti = 0; ti < tris.size(); ++ti)
        if (tri_visible[ti])
            for (int c : tris[ti]) mask[static_cast<std::size_t>(c)] = 1;
    return mask;
}

// ---------------------------------------------------------------------------
// Frame serialization: <stem>.tens archive (depth, uv, optional part) plus a
// <stem>.json sidecar with intrinsics and pose. This pair is also the
// ingestion path for real sensor depth with externally estimated UV maps.

inline void save_frame(const std::string& stem, const DepthUVFrame& frame,
                       const CameraPose& pose) {
    const std::size_t h = static_cast<std::size_t>(frame.height);
    const std::size_t w = static_cast<std::size_t>(frame.width);
    std::vector<NamedTensor> entries;
    entries.push_back({"depth", Tensor<float>::from({h, w}, frame.depth)});
    entries.push_back({"uv", Tensor<float>::from({h, w, 2}, frame.uv)});
    if (!frame.part.empty())
        entries.push_back({"part", Tensor<std::uint8_t>::from({h, w}, frame.part)});
    save_archive(stem + ".tens", entries);

    nlohmann::json j;
    j["intrinsics"] = {{"fx", frame.intrinsics.fx}, {"fy", frame.intrinsics.fy},
                       {"cx", frame.intrinsics.cx}, {"cy", frame.intrinsics.cy},
                       {"width", frame.intrinsics.width}, {"height", frame.intrinsics.height}};
    j["pose"] = {{"rotation", pose.rotation.m}, {"translation", {pose.translation.x, pose.translation.y, pose.translation.z}}};
    std::ofstream f(stem + ".json", std::ios::trunc);
    if (!f) throw FormatError(stem + ".json: cannot open file for writing");
    f << j.dump(2) << "\n";
}

inline DepthUVFrame load_frame(const std::string& stem, CameraPose* pose_out = nullptr) {
    const auto entries = load_archive(stem + ".tens");
    const auto& depth = archive_get<float>(entries, "depth", stem + ".tens");
    const auto& uv = archive_get<float>(entries, "uv", stem + ".tens");
    if (depth.rank() != 2) throw FormatError(stem + ".tens: depth must be rank-2");
    if (uv.rank() != 3 || uv.dim(2) != 2)
        throw FormatError(stem + ".tens: uv must be rank-3 with last dimension 2");
    if (uv.dim(0) != depth.dim(0) || uv.dim(1) != depth.dim(1))
        throw FormatError(stem + ".tens: uv spatial dims do not match depth");

    DepthUVFrame frame;
    frame.height = static_cast<int>(depth.dim(0));
    frame.width = static_cast<int>(depth.dim(1));
    frame.depth = depth.to_vector();
    frame.uv = uv.to_vector();
    if (const AnyTensor* part = archive_find(entries, "part")) {
        const auto* p = std::get_if<Tensor<std::uint8_t>>(part);
        if (!p || p->rank() != 2 || p->dim(0) != depth.dim(0) || p->dim(1) != depth.dim(1))
            throw FormatError(stem + ".tens: part channel must be u8 with depth's shape");
        frame.part = p->to_vector();
    }
    for (float d : frame.depth)
        if (!(d >= 0.0f) || !std::isfinite(d))
            throw FormatError(stem + ".tens: depth must be finite and non-negative");

    std::ifstream f(stem + ".json");
    if (!f) throw FormatError(stem + ".json: cannot open file");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw FormatError(stem + ".json: parse error: " + e.what());
    }
    const auto& ji = j.at("intrinsics");
    frame.intrinsics.fx = ji.at("fx").get<double>();
    frame.intrinsics.fy = ji.at("fy").get<double>();
    frame.intrinsics.cx = ji.at("cx").get<double>();
    frame.intrinsics.cy = ji.at("cy").get<double>();
    frame.intrinsics.width = ji.at("width").get<int>();
    frame.intrinsics.height = ji.at("height").get<int>();
    frame.intrinsics.validate();
    if (frame.intrinsics.width != frame.width || frame.intrinsics.height != frame.height)
        throw FormatError(stem + ": sidecar image size does not match tensors");
    if (pose_out) {
        const auto& jp = j.at("pose");
        const auto rot = jp.at("rotation").get<std::array<double, 9>>();
        pose_out->rotation.m = rot;
        const auto tr = jp.at("translation").get<std::array<double, 3>>();
        pose_out->translation = {tr[0], tr[1], tr[2]};
        pose_out->validate();
    }
    return frame;
}

}  // namespace meshrecover
