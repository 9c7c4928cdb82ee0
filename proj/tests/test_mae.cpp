#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include <meshrecover/mae.hpp>
#include <meshrecover/rng.hpp>
#include <meshrecover/toy_body.hpp>

using namespace meshrecover;

namespace {

TemplateMesh small_template() {
    ToyBodyConfig bc;
    bc.rows = 4;
    bc.cols = 6;
    return make_toy_template(bc);  // 24 coarse vertices
}

template <class T>
MAEModel<T> small_model(const TemplateMesh& tmpl, std::uint64_t seed = 0) {
    MAEConfig cfg;
    cfg.dim = 12;
    cfg.heads = 3;
    cfg.blocks = 3;
    cfg.seed = seed;
    return make_mae_model<T>(cfg, tmpl);
}

PartialMesh random_partial(const TemplateMesh& tmpl, Rng& rng, double visible_rate = 0.5) {
    PartialMesh pm;
    const std::size_t n = tmpl.coarse_count();
    pm.vertices_in.assign(n, Vec3{});
    pm.mask.assign(n, 0);
    std::size_t vis = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (rng.bernoulli(visible_rate)) {
            pm.mask[i] = 1;
            pm.vertices_in[i] = tmpl.vertices_coarse[i] +
                                Vec3{rng.normal(0, 0.02), rng.normal(0, 0.02), rng.normal(0, 0.02)};
            ++vis;
        }
    if (vis < 2) {
        pm.mask[0] = pm.mask[1] = 1;
        pm.vertices_in[0] = tmpl.vertices_coarse[0];
        pm.vertices_in[1] = tmpl.vertices_coarse[1];
    }
    return pm;
}

}  // namespace

TEST_CASE("normalize: two-point example has unit pooled deviation") {
    PartialMesh pm;
    pm.vertices_in = {{1, 1, 1}, {3, 3, 3}, {99, 99, 99}};
    pm.mask = {1, 1, 0};
    const auto [normed, stats] = normalize(pm);
    // Centroid (2,2,2); pooled deviations {+-1}^6 have variance exactly 1.
    REQUIRE(stats.mean.x == 2.0);
    REQUIRE(stats.mean.y == 2.0);
    REQUIRE(stats.mean.z == 2.0);
    REQUIRE(stats.scale == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(norm(normed.vertices_in[0] - Vec3{-1, -1, -1}) < 1e-12);
    REQUIRE(norm(normed.vertices_in[1] - Vec3{1, 1, 1}) < 1e-12);
}

TEST_CASE("normalize: an already-normalized cloud is a fixed point") {
    Rng rng(42);
    PartialMesh pm;
    pm.vertices_in.resize(40);
    pm.mask.assign(40, 1);
    for (auto& v : pm.vertices_in) v = {rng.normal(), rng.normal(), rng.normal()};
    const auto [once, st1] = normalize(pm);
    const auto [twice, st2] = normalize(once);
    REQUIRE(std::abs(st2.scale - 1.0) < 1e-9);
    REQUIRE(norm(st2.mean) < 1e-9);
    for (std::size_t i = 0; i < 40; ++i)
        REQUIRE(norm(twice.vertices_in[i] - once.vertices_in[i]) < 1e-6);
}

TEST_CASE("normalize: degenerate inputs are rejected") {
    PartialMesh one;
    one.vertices_in = {{1, 2, 3}, {4, 5, 6}};
    one.mask = {1, 0};
    REQUIRE_THROWS_AS(normalize(one), DegenerateInputError);

    PartialMesh same;
    same.vertices_in = {{1, 2, 3}, {1, 2, 3}, {1, 2, 3}};
    same.mask = {1, 1, 1};
    REQUIRE_THROWS_AS(normalize(same), DegenerateInputError);
}

TEST_CASE("forward with a zeroed head predicts the visible centroid everywhere") {
    const TemplateMesh tmpl = small_template();
    MAEModel<double> model = small_model<double>(tmpl);
    model.head_w.fill(0.0);
    model.head_b.fill(0.0);
    Rng rng(7);
    const PartialMesh pm = random_partial(tmpl, rng);
    const NormStats st = normalize_stats(pm);
    const CoarseMesh out = mae_infer_coarse(model, pm);
    for (const auto& v : out.vertices) REQUIRE(norm(v - st.mean) < 1e-12);
}

TEST_CASE("masked vertex positions cannot influence the output bitwise") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<float> model = small_model<float>(tmpl, 3);
    Rng rng(11);
    const PartialMesh pm = random_partial(tmpl, rng);
    const CoarseMesh base = mae_infer_coarse(model, pm);
    for (int trial = 0; trial < 100; ++trial) {
        PartialMesh fuzzed = pm;
        for (std::size_t i = 0; i < fuzzed.mask.size(); ++i)
            if (!fuzzed.mask[i])
                fuzzed.vertices_in[i] = {rng.uniform(-1e6, 1e6), rng.uniform(-1e6, 1e6),
                                         rng.uniform(-1e6, 1e6)};
        const CoarseMesh out = mae_infer_coarse(model, fuzzed);
        for (std::size_t i = 0; i < out.vertices.size(); ++i) {
            REQUIRE(out.vertices[i].x == base.vertices[i].x);
            REQUIRE(out.vertices[i].y == base.vertices[i].y);
            REQUIRE(out.vertices[i].z == base.vertices[i].z);
        }
    }
}

TEST_CASE("translating visible inputs translates the output exactly") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<double> model = small_model<double>(tmpl, 5);
    Rng rng(13);
    const PartialMesh pm = random_partial(tmpl, rng);
    const Vec3 t{0.37, -1.1, 2.4};
    PartialMesh shifted = pm;
    for (std::size_t i = 0; i < pm.mask.size(); ++i)
        if (pm.mask[i]) shifted.vertices_in[i] += t;
    const CoarseMesh a = mae_infer_coarse(model, pm);
    const CoarseMesh b = mae_infer_coarse(model, shifted);
    for (std::size_t i = 0; i < a.vertices.size(); ++i)
        REQUIRE(norm(b.vertices[i] - (a.vertices[i] + t)) < 1e-5);
}

TEST_CASE("similarity equivariance over random scale and translation") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<float> model = small_model<float>(tmpl, 9);
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const PartialMesh pm = random_partial(tmpl, rng);
        const double s = std::exp(rng.uniform(-1.5, 1.5));
        const Vec3 t{rng.normal(), rng.normal(), rng.normal()};
        PartialMesh xf = pm;
        for (std::size_t i = 0; i < pm.mask.size(); ++i)
            if (pm.mask[i]) xf.vertices_in[i] = s * pm.vertices_in[i] + t;
        const CoarseMesh a = mae_infer_coarse(model, pm);
        const CoarseMesh b = mae_infer_coarse(model, xf);
        double ref = 0.0;
        for (const auto& v : a.vertices) ref = std::max(ref, s * norm(v) + norm(t));
        for (std::size_t i = 0; i < a.vertices.size(); ++i) {
            const Vec3 want = s * a.vertices[i] + t;
            REQUIRE(norm(b.vertices[i] - want) < 1e-4 * std::max(1.0, ref));
        }
    }
}

TEST_CASE("permuting vertex slots changes the output (positional identity)") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<float> model = small_model<float>(tmpl, 21);
    Rng rng(23);
    const PartialMesh pm = random_partial(tmpl, rng, 0.7);
    const std::size_t n = pm.mask.size();
    // Random permutation.
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    PartialMesh permuted;
    permuted.vertices_in.resize(n);
    permuted.mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        permuted.vertices_in[i] = pm.vertices_in[perm[i]];
        permuted.mask[i] = pm.mask[perm[i]];
    }
    const CoarseMesh a = mae_infer_coarse(model, pm);
    const CoarseMesh b = mae_infer_coarse(model, permuted);
    // If positional embeddings were dropped, b would equal a permuted by perm.
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, norm(b.vertices[i] - a.vertices[perm[i]]));
    REQUIRE(diff > 1e-4);
}

TEST_CASE("output shape contract holds at extreme mask densities") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<float> model = small_model<float>(tmpl, 31);
    Rng rng(37);

    PartialMesh all;
    all.vertices_in = tmpl.vertices_coarse;
    all.mask.assign(tmpl.coarse_count(), 1);
    const CoarseMesh a = mae_infer_coarse(model, all);
    REQUIRE(a.vertices.size() == tmpl.coarse_count());
    for (const auto& v : a.vertices) REQUIRE((std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z)));

    PartialMesh two;
    two.vertices_in.assign(tmpl.coarse_count(), Vec3{});
    two.mask.assign(tmpl.coarse_count(), 0);
    two.mask[3] = two.mask[17] = 1;
    two.vertices_in[3] = {0.1, 0.2, 0.3};
    two.vertices_in[17] = {-0.2, 0.4, 0.1};
    const CoarseMesh b = mae_infer_coarse(model, two);
    REQUIRE(b.vertices.size() == tmpl.coarse_count());
    for (const auto& v : b.vertices) REQUIRE((std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z)));

    const std::vector<Vec3> full = mae_infer_full(model, all);
    REQUIRE(full.size() == tmpl.full_count());
}

TEST_CASE("forward_full equals the template upsampling of the coarse forward") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<double> model = small_model<double>(tmpl, 41);
    Rng rng(43);
    const PartialMesh pm = random_partial(tmpl, rng);
    const CoarseMesh coarse = mae_infer_coarse(model, pm);
    const std::vector<Vec3> full = mae_infer_full(model, pm);
    // The model's upsampler is initialized from the template, so this must
    // match the mesh-core operator applied to the coarse prediction.
    const std::vector<Vec3> expect = upsample(tmpl, coarse);
    for (std::size_t i = 0; i < full.size(); ++i)
        REQUIRE(norm(full[i] - expect[i]) < 1e-9);
}

TEST_CASE("checkpoint round trip preserves every parameter bitwise") {
    const TemplateMesh tmpl = small_template();
    const MAEModel<float> model = small_model<float>(tmpl, 51);
    const std::string stem = (std::filesystem::temp_directory_path() / "mr_ckpt").string();
    save_checkpoint(stem, model);
    const MAEModel<float> back = load_checkpoint<float>(stem);
    const auto pa = model.params();
    const auto pb = back.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].first == pb[i].first);
        REQUIRE(pa[i].second->to_vector() == pb[i].second->to_vector());
    }
    REQUIRE(back.template_hash == model.template_hash);

    // Shape validation: truncate a parameter in the archive.
    auto entries = load_archive(stem + ".tens");
    for (auto& e : entries)
        if (e.name == "head_w") e.tensor = Tensor<float>({2, 3});
    save_archive(stem + ".tens", entries);
    REQUIRE_THROWS_AS(load_checkpoint<float>(stem), FormatError);
}

TEST_CASE("model config validation") {
    MAEConfig bad;
    bad.dim = 20;
    bad.heads = 3;  // does not divide 20
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}
