#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <limits>

#include <meshrecover/camera.hpp>
#include <meshrecover/rng.hpp>
#include <meshrecover/toy_body.hpp>

using namespace meshrecover;

namespace {

Intrinsics small_intr(int size = 64) {
    Intrinsics k;
    k.width = k.height = size;
    k.fx = k.fy = size / 2.0;
    k.cx = k.cy = size / 2.0;
    return k;
}

// Identity pose: camera at the world origin looking along +z.
CameraPose identity_pose() { return CameraPose{}; }

// Camera-facing triangle in the z = depth plane (CCW when seen from -z).
struct Tri {
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> tris;
};

Tri facing_triangle(double depth, double half = 1.0, int base = 0) {
    Tri t;
    t.verts = {{-half, -half, depth}, {0, half, depth}, {half, -half, depth}};
    t.tris = {{base, base + 1, base + 2}};
    return t;
}

// Exhaustive rasterization oracle: every pixel against every triangle, in
// triangle order with a strict nearer-wins compare. Shares only the
// ray_triangle predicate with the production rasterizer.
void oracle_render(const std::vector<Vec3>& cam_verts, const std::vector<std::array<int, 3>>& tris,
                   const Intrinsics& intr, std::vector<double>& depth_out) {
    depth_out.assign(static_cast<std::size_t>(intr.width) * static_cast<std::size_t>(intr.height),
                     0.0);
    for (int y = 0; y < intr.height; ++y)
        for (int x = 0; x < intr.width; ++x) {
            const Vec3 dir{(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0};
            double best = std::numeric_limits<double>::infinity();
            for (const auto& t : tris) {
                RayHit hit;
                if (ray_triangle({0, 0, 0}, dir, cam_verts[static_cast<std::size_t>(t[0])],
                                 cam_verts[static_cast<std::size_t>(t[1])],
                                 cam_verts[static_cast<std::size_t>(t[2])], hit) &&
                    hit.t < best)
                    best = hit.t;
            }
            if (best != std::numeric_limits<double>::infinity())
                depth_out[static_cast<std::size_t>(y) * intr.width + x] = best;
        }
}

}  // namespace

TEST_CASE("lift maps the principal point to the optical axis") {
    DepthUVFrame f;
    f.width = f.height = 256;
    f.intrinsics = Intrinsics{};
    f.depth.assign(256 * 256, 0.0f);
    f.uv.assign(256 * 256 * 2, 0.0f);
    f.depth[128 * 256 + 128] = 3.5f;
    const Vec3 p = lift(f, 128, 128);
    REQUIRE(p.x == 0.0);
    REQUIRE(p.y == 0.0);
    REQUIRE(p.z == 3.5);
}

TEST_CASE("lift one focal length off-axis at unit depth") {
    DepthUVFrame f;
    f.width = f.height = 400;
    f.intrinsics = Intrinsics{200.0, 200.0, 100.0, 100.0, 400, 400};
    f.depth.assign(400 * 400, 0.0f);
    f.uv.assign(400 * 400 * 2, 0.0f);
    // Pixel (cx + fx, cy) = (300, 100) at depth 1 lifts to (1, 0, 1).
    f.depth[100 * 400 + 300] = 1.0f;
    const Vec3 p = lift(f, 300, 100);
    REQUIRE(p.x == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(p.y == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(p.z == 1.0);
    // No body at a zero-depth pixel.
    REQUIRE_THROWS_AS(lift(f, 5, 5), DegenerateInputError);
    REQUIRE_THROWS_AS(lift(f, -1, 0), std::invalid_argument);
}

TEST_CASE("render: facing triangle covering the principal point at z=2") {
    const Tri t = facing_triangle(2.0);
    const Intrinsics intr = small_intr();
    const auto frame = render_depth_uv(t.verts, t.tris, nullptr, identity_pose(), intr);
    REQUIRE(frame.depth_at(static_cast<int>(intr.cx), static_cast<int>(intr.cy)) ==
            Catch::Approx(2.0).margin(1e-5));
}

TEST_CASE("render: nearer of two stacked triangles wins") {
    Tri far = facing_triangle(2.0);
    const Tri near = facing_triangle(1.0, 1.0, 3);
    far.verts.insert(far.verts.end(), near.verts.begin(), near.verts.end());
    far.tris.push_back(near.tris[0]);  // nearer triangle listed second
    const Intrinsics intr = small_intr();
    const auto frame = render_depth_uv(far.verts, far.tris, nullptr, identity_pose(), intr);
    const int cx = static_cast<int>(intr.cx), cy = static_cast<int>(intr.cy);
    REQUIRE(frame.depth_at(cx, cy) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("render: mesh entirely behind the camera gives an empty frame") {
    const Tri t = facing_triangle(-2.0);
    const auto frame = render_depth_uv(t.verts, t.tris, nullptr, identity_pose(), small_intr());
    REQUIRE_FALSE(frame.has_body());
}

TEST_CASE("render matches the exhaustive per-pixel oracle exactly on the toy body") {
    const TemplateMesh tmpl = make_toy_template();
    const CameraPose pose = CameraPose::frontal(2.5);
    Intrinsics intr;
    intr.width = intr.height = 128;
    intr.fx = intr.fy = 100.0;
    intr.cx = intr.cy = 64.0;

    const auto frame = render_depth_uv(tmpl.vertices_full, tmpl.triangles_full, &tmpl.uv_full,
                                       pose, intr);
    REQUIRE(frame.has_body());

    std::vector<double> oracle;
    oracle_render(to_camera_space(tmpl.vertices_full, pose), tmpl.triangles_full, intr, oracle);
    std::size_t covered = 0;
    for (int y = 0; y < intr.height; ++y)
        for (int x = 0; x < intr.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * intr.width + x;
            // Identical coverage and identical depth, bit for bit.
            REQUIRE(frame.depth[i] == static_cast<float>(oracle[i]));
            covered += oracle[i] > 0.0;
        }
    REQUIRE(covered > 500);  // the body actually fills a useful area
}

TEST_CASE("z-buffer minimality: stored depth never exceeds any covering triangle") {
    const TemplateMesh tmpl = make_toy_template();
    Rng rng(12);
    const auto posed = apply_pose(tmpl.vertices_full, random_pose(rng));
    const CameraPose pose = CameraPose::frontal(2.5);
    Intrinsics intr;
    intr.width = intr.height = 96;
    intr.fx = intr.fy = 80.0;
    intr.cx = intr.cy = 48.0;
    const auto frame = render_depth_uv(posed, tmpl.triangles_full, nullptr, pose, intr);
    const auto cam = to_camera_space(posed, pose);
    for (int y = 0; y < intr.height; ++y)
        for (int x = 0; x < intr.width; ++x) {
            const float d = frame.depth_at(x, y);
            if (d == 0.0f) continue;
            const Vec3 dir{(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0};
            for (const auto& t : tmpl.triangles_full) {
                RayHit hit;
                if (ray_triangle({0, 0, 0}, dir, cam[static_cast<std::size_t>(t[0])],
                                 cam[static_cast<std::size_t>(t[1])],
                                 cam[static_cast<std::size_t>(t[2])], hit))
                    // One f32 ulp of slack: depth is stored single-precision.
                    REQUIRE(static_cast<double>(d) <= hit.t * (1.0 + 1.5e-7));
            }
        }
}

TEST_CASE("visibility: single front-facing triangle is fully visible") {
    const Tri t = facing_triangle(2.0, 0.5);
    const auto mask = visible_vertices(t.verts, t.tris, identity_pose(), small_intr());
    REQUIRE(mask == std::vector<std::uint8_t>{1, 1, 1});
}

TEST_CASE("visibility: back-facing triangle is not visible") {
    Tri t = facing_triangle(2.0, 0.5);
    std::swap(t.tris[0][1], t.tris[0][2]);  // flip winding
    const auto mask = visible_vertices(t.verts, t.tris, identity_pose(), small_intr());
    REQUIRE(mask == std::vector<std::uint8_t>{0, 0, 0});
}

TEST_CASE("visibility: fully covered back quad is occluded") {
    // Front quad spans +-0.9 at z=1; back quad spans +-0.4 at z=2, so every
    // back-vertex ray passes through the front quad's interior.
    std::vector<Vec3> verts = {
        {-0.9, -0.9, 1}, {0.9, -0.9, 1}, {0.9, 0.9, 1}, {-0.9, 0.9, 1},   // front
        {-0.4, -0.4, 2}, {0.4, -0.4, 2}, {0.4, 0.4, 2}, {-0.4, 0.4, 2}};  // back
    std::vector<std::array<int, 3>> tris = {
        {0, 2, 1}, {0, 3, 2},  // front, facing camera
        {4, 6, 5}, {4, 7, 6}};  // back, facing camera
    const auto mask = visible_vertices(verts, tris, identity_pose(), small_intr());
    REQUIRE(mask[0] == 1);
    REQUIRE(mask[1] == 1);
    REQUIRE(mask[2] == 1);
    REQUIRE(mask[3] == 1);
    REQUIRE(mask[4] == 0);
    REQUIRE(mask[5] == 0);
    REQUIRE(mask[6] == 0);
    REQUIRE(mask[7] == 0);
}

TEST_CASE("visibility handles degenerate triangles") {
    std::vector<Vec3> verts = {{-0.5, -0.5, 2}, {0, 0.5, 2}, {0.5, -0.5, 2}, {0.1, 0.1, 1.5}};
    std::vector<std::array<int, 3>> tris = {{0, 1, 2}, {3, 3, 3}};  // second has zero area
    const auto mask = visible_vertices(verts, tris, identity_pose(), small_intr());
    REQUIRE(mask[0] == 1);
    REQUIRE(mask[1] == 1);
    REQUIRE(mask[2] == 1);
}

TEST_CASE("visibility agrees with a full-scan oracle on posed toy bodies") {
    const CameraPose pose = CameraPose::frontal(2.5);
    const Intrinsics intr;
    for (int inst = 0; inst < 6; ++inst) {
        ToyBodyConfig bc;
        bc.rows = 7 + inst % 3;
        bc.cols = 11 + inst % 3;
        const TemplateMesh t = make_toy_template(bc);
        Rng rng = Rng::stream(100, static_cast<std::uint64_t>(inst));
        const auto posed = apply_pose(t.vertices_full, random_pose(rng));
        const auto impl = visible_vertices(posed, t.triangles_full, pose, intr);

        const auto cam = to_camera_space(posed, pose);
        const auto inc = detail::incident_triangles(posed.size(), t.triangles_full);
        for (std::size_t i = 0; i < posed.size(); ++i) {
            Vec2 px;
            bool vis = detail::in_frustum(intr, cam[i], px) &&
                       detail::front_facing(cam, t.triangles_full, inc[i]);
            if (vis) {
                double tmin = std::numeric_limits<double>::infinity();
                RayHit hit;
                for (const auto& tri : t.triangles_full)
                    if (ray_triangle({0, 0, 0}, cam[i], cam[static_cast<std::size_t>(tri[0])],
                                     cam[static_cast<std::size_t>(tri[1])],
                                     cam[static_cast<std::size_t>(tri[2])], hit))
                        tmin = std::min(tmin, hit.t);
                vis = !(tmin < 1.0 - 1e-4);
            }
            REQUIRE(static_cast<int>(impl[i]) == static_cast<int>(vis));
        }
    }
}

TEST_CASE("lift-project round trip stays within the quantization bound") {
    const TemplateMesh tmpl = make_toy_template();
    const CameraPose pose = CameraPose::frontal(2.5);
    Intrinsics intr;
    intr.width = intr.height = 128;
    intr.fx = intr.fy = 100.0;
    intr.cx = intr.cy = 64.0;
    const auto frame = render_depth_uv(tmpl.vertices_full, tmpl.triangles_full, &tmpl.uv_full,
                                       pose, intr);
    const auto visible = visible_vertices(tmpl.vertices_full, tmpl.triangles_full, pose, intr);
    const auto cam = to_camera_space(tmpl.vertices_full, pose);

    std::size_t checked = 0, within = 0, covered = 0, total_visible = 0;
    for (std::size_t i = 0; i < cam.size(); ++i) {
        if (!visible[i]) continue;
        ++total_visible;
        const Vec2 px = project(intr, cam[i]);
        const int x = static_cast<int>(std::lround(px.x));
        const int y = static_cast<int>(std::lround(px.y));
        if (x < 0 || x >= intr.width || y < 0 || y >= intr.height) continue;
        if (!(frame.depth_at(x, y) > 0.0f)) continue;
        ++covered;
        const Vec3 lifted = lift(frame, x, y);
        ++checked;
        if (norm(lifted - cam[i]) <= 2.0 * cam[i].z / intr.fx) ++within;
    }
    REQUIRE(total_visible > 100);
    // Most visible vertices land on covered pixels; of those, at least 99%
    // satisfy the one-pixel quantization bound.
    REQUIRE(covered * 10 >= total_visible * 8);
    REQUIRE(within * 100 >= checked * 99);
}

TEST_CASE("depth-buffer visibility agrees with ray casting on at least 99.5% of vertices") {
    const TemplateMesh tmpl = make_toy_template();
    const CameraPose pose = CameraPose::frontal(2.5);
    const Intrinsics intr;
    std::size_t agree = 0, total = 0;
    for (int inst = 0; inst < 4; ++inst) {
        Rng rng = Rng::stream(55, static_cast<std::uint64_t>(inst));
        const auto posed = apply_pose(tmpl.vertices_full, random_pose(rng));
        const auto ray = visible_vertices(posed, tmpl.triangles_full, pose, intr);
        const auto zbuf = visible_vertices_zbuffer(posed, tmpl.triangles_full, pose, intr);
        for (std::size_t i = 0; i < ray.size(); ++i) {
            agree += ray[i] == zbuf[i];
            ++total;
        }
    }
    REQUIRE(static_cast<double>(agree) >= 0.995 * static_cast<double>(total));
}

TEST_CASE("face-level visibility marks vertices of unoccluded front faces") {
    const Tri t = facing_triangle(2.0, 0.5);
    const auto mask = visible_vertices_face_level(t.verts, t.tris, identity_pose(), small_intr());
    REQUIRE(mask == std::vector<std::uint8_t>{1, 1, 1});
}

TEST_CASE("camera pose validation") {
    CameraPose p = CameraPose::frontal(2.5, 0.4);
    REQUIRE_NOTHROW(p.validate());
    const Vec3 c = p.center();
    REQUIRE(norm(c) == Catch::Approx(2.5).epsilon(1e-12));
    // The camera looks at the origin: transforming its center gives 0.
    REQUIRE(norm(p.to_camera(c)) < 1e-12);

    CameraPose bad = p;
    bad.rotation(0, 0) += 0.01;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    REQUIRE_THROWS_AS(Intrinsics{-1.0}.validate(), std::invalid_argument);
}

TEST_CASE("frame serialization round trips bit-exactly with its sidecar") {
    const TemplateMesh tmpl = make_toy_template();
    const CameraPose pose = CameraPose::frontal(2.5, -0.2);
    const Intrinsics intr;
    auto frame = render_depth_uv(tmpl.vertices_full, tmpl.triangles_full, &tmpl.uv_full, pose, intr);
    // Attach a synthetic part channel to exercise the optional tensor.
    frame.part.assign(frame.depth.size(), 0);
    for (std::size_t i = 0; i < frame.depth.size(); ++i)
        if (frame.depth[i] > 0.0f) frame.part[i] = 2;

    const std::string stem = (std::filesystem::temp_directory_path() / "mr_frame").string();
    save_frame(stem, frame, pose);
    CameraPose pose_back;
    const DepthUVFrame back = load_frame(stem, &pose_back);
    REQUIRE(back.depth == frame.depth);
    REQUIRE(back.uv == frame.uv);
    REQUIRE(back.part == frame.part);
    REQUIRE(back.intrinsics.fx == intr.fx);
    for (std::size_t i = 0; i < 9; ++i) REQUIRE(pose_back.rotation.m[i] == pose.rotation.m[i]);
}
