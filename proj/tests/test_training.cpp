#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include <meshrecover/data.hpp>
#include <meshrecover/eval.hpp>
#include <meshrecover/toy_body.hpp>
#include <meshrecover/train.hpp>

using namespace meshrecover;

namespace {

TemplateMesh small_template() {
    ToyBodyConfig bc;
    bc.rows = 4;
    bc.cols = 6;
    return make_toy_template(bc);
}

std::vector<TrainingSample> tiny_dataset(const TemplateMesh& tmpl, int count, std::uint64_t seed,
                                         const SampleGenConfig& gen = {}) {
    std::vector<TrainingSample> out;
    const CameraPose cam = CameraPose::frontal(2.5);
    const Intrinsics intr;
    for (int k = 0; k < count; ++k) {
        Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(k));
        const auto posed = apply_pose(tmpl.vertices_full, random_pose(rng));
        out.push_back(make_sample(posed, tmpl, cam, intr, gen, rng));
    }
    return out;
}

std::uint64_t model_hash(const MAEModel<float>& m) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& [name, t] : m.params()) h = fnv1a64(t->data(), t->size() * sizeof(float), h);
    return h;
}

}  // namespace

TEST_CASE("loss_vertex on fixed examples and against an independent oracle") {
    CoarseMesh a{{{1, 2, 3}}};
    REQUIRE(loss_vertex(a, a) == 0.0);
    const CoarseMesh zero{{{0, 0, 0}}};
    REQUIRE(loss_vertex(a, zero) == 6.0);  // |1|+|2|+|3|

    Rng rng(5);
    CoarseMesh p, t;
    p.vertices.resize(100);
    t.vertices.resize(100);
    for (std::size_t i = 0; i < 100; ++i) {
        p.vertices[i] = {rng.normal(), rng.normal(), rng.normal()};
        t.vertices[i] = {rng.normal(), rng.normal(), rng.normal()};
    }
    // Three-line oracle: plain running sum.
    double total = 0.0;
    for (std::size_t i = 0; i < 100; ++i)
        total += std::abs(p.vertices[i].x - t.vertices[i].x) +
                 std::abs(p.vertices[i].y - t.vertices[i].y) +
                 std::abs(p.vertices[i].z - t.vertices[i].z);
    REQUIRE(loss_vertex(p, t) == Catch::Approx(total / 100.0).epsilon(1e-7));

    CoarseMesh wrong{{{0, 0, 0}, {0, 0, 0}}};
    REQUIRE_THROWS_AS(loss_vertex(a, wrong), std::invalid_argument);
}

TEST_CASE("loss_joints on fixed examples and against an oracle") {
    // One-joint template: regressor picks vertex 0.
    TemplateMesh tmpl;
    tmpl.joint_regressor = Tensor<double>::from({1, 2}, {1.0, 0.0});
    CoarseMesh pred{{{0, 3, 4}, {9, 9, 9}}};
    REQUIRE(loss_joints(pred, {{0, 0, 0}}, tmpl) == 25.0);  // 3^2 + 4^2
    REQUIRE(loss_joints(pred, {{0, 3, 4}}, tmpl) == 0.0);
    // Mean variant divides by J*3.
    REQUIRE(loss_joints(pred, {{0, 0, 0}}, tmpl, true) == Catch::Approx(25.0 / 3.0));

    const TemplateMesh toy = small_template();
    Rng rng(6);
    CoarseMesh p;
    p.vertices.resize(toy.coarse_count());
    for (auto& v : p.vertices) v = {rng.normal(), rng.normal(), rng.normal()};
    std::vector<Vec3> tj(toy.joint_count());
    for (auto& v : tj) v = {rng.normal(), rng.normal(), rng.normal()};
    // Independent oracle: explicit regression then squared Frobenius sum.
    double want = 0.0;
    for (std::size_t j = 0; j < toy.joint_count(); ++j) {
        Vec3 acc{};
        for (std::size_t i = 0; i < toy.coarse_count(); ++i)
            acc += toy.joint_regressor.at(j, i) * p.vertices[i];
        want += norm2(acc - tj[j]);
    }
    REQUIRE(loss_joints(p, tj, toy) == Catch::Approx(want).epsilon(1e-6));
}

TEST_CASE("loss_total composes the weighted sum") {
    const TemplateMesh tmpl = small_template();
    Rng rng(7);
    TrainingSample s;
    s.target_coarse.resize(tmpl.coarse_count());
    for (auto& v : s.target_coarse) v = {rng.normal(), rng.normal(), rng.normal()};
    s.target_joints = regress_joints(tmpl, CoarseMesh{s.target_coarse});
    CoarseMesh pred;
    pred.vertices.resize(tmpl.coarse_count());
    for (auto& v : pred.vertices) v = {rng.normal(), rng.normal(), rng.normal()};

    const CoarseMesh target{s.target_coarse};
    REQUIRE(loss_total(target, s, tmpl, {1.0, 1.0}) == 0.0);
    REQUIRE(loss_total(pred, s, tmpl, {1.0, 0.0}) == loss_vertex(pred, target));
    const double lv = loss_vertex(pred, target);
    const double l3 = loss_joints(pred, s.target_joints, tmpl);
    REQUIRE(loss_total(pred, s, tmpl, {0.5, 2.0}) == Catch::Approx(0.5 * lv + 2.0 * l3).epsilon(1e-12));
    REQUIRE_THROWS_AS(loss_total(pred, s, tmpl, {0.0, 0.0}), ConfigError);
    REQUIRE_THROWS_AS(loss_total(pred, s, tmpl, {-1.0, 1.0}), ConfigError);
}

TEST_CASE("learning-rate schedule hits its landmarks exactly") {
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.steps = 2000;
    cfg.warmup_fraction = 0.15;
    const int warmup = 300;
    // Warmup is linear and ends exactly at lr.
    REQUIRE(lr_at(0, cfg) == Catch::Approx(1e-3 / warmup));
    REQUIRE(lr_at(warmup - 1, cfg) == Catch::Approx(1e-3));
    REQUIRE(lr_at(warmup, cfg) == 1e-3);  // cosine start, exact
    // Monotone decay after warmup, reaching ~0 at the last step.
    for (int s = warmup; s + 1 < cfg.steps; ++s) REQUIRE(lr_at(s + 1, cfg) <= lr_at(s, cfg));
    REQUIRE(lr_at(cfg.steps - 1, cfg) <= 1e-9);

    cfg.schedule = "constant";
    REQUIRE(lr_at(cfg.steps - 1, cfg) == 1e-3);
}

TEST_CASE("make_sample with no augmentation reproduces clean targets") {
    const TemplateMesh tmpl = small_template();
    const CameraPose cam = CameraPose::frontal(2.5);
    const Intrinsics intr;
    SampleGenConfig gen;
    gen.extra_mask_rate = 0.0;
    gen.noise_variance = 0.0;
    Rng rng(8);
    const TrainingSample s = make_sample(tmpl.vertices_full, tmpl, cam, intr, gen, rng);
    const auto vis = visible_vertices(downsample(tmpl, tmpl.vertices_full).vertices,
                                      tmpl.triangles_coarse, cam, intr);
    REQUIRE(s.input.mask == vis);
    for (std::size_t i = 0; i < s.input.mask.size(); ++i)
        if (s.input.mask[i]) REQUIRE(norm(s.input.vertices_in[i] - s.target_coarse[i]) == 0.0);
    REQUIRE(s.gt_full.size() == tmpl.full_count());
}

TEST_CASE("make_sample rejects a full extra-mask rate") {
    const TemplateMesh tmpl = small_template();
    SampleGenConfig gen;
    gen.extra_mask_rate = 1.0;
    Rng rng(9);
    REQUIRE_THROWS_AS(
        make_sample(tmpl.vertices_full, tmpl, CameraPose::frontal(2.5), Intrinsics{}, gen, rng),
        DegenerateInputError);
}

TEST_CASE("extra masking drops the configured fraction") {
    Rng rng(10);
    std::vector<std::uint8_t> mask(10000, 1);
    std::size_t dropped = 0;
    const auto out = apply_extra_mask(mask, 0.60, rng);
    for (std::size_t i = 0; i < mask.size(); ++i) dropped += out[i] == 0;
    const double rate = static_cast<double>(dropped) / 10000.0;
    REQUIRE(rate > 0.59);
    REQUIRE(rate < 0.61);
}

TEST_CASE("sample noise carries the configured variance") {
    const TemplateMesh tmpl = small_template();
    const CameraPose cam = CameraPose::frontal(2.5);
    const Intrinsics intr;
    SampleGenConfig gen;
    gen.extra_mask_rate = 0.0;
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (int k = 0; k < 300; ++k) {
        Rng rng = Rng::stream(77, static_cast<std::uint64_t>(k));
        const TrainingSample s = make_sample(tmpl.vertices_full, tmpl, cam, intr, gen, rng);
        for (std::size_t i = 0; i < s.input.mask.size(); ++i)
            if (s.input.mask[i]) {
                const Vec3 d = s.input.vertices_in[i] - s.target_coarse[i];
                for (std::size_t c = 0; c < 3; ++c) {
                    sum += d[c];
                    sum2 += d[c] * d[c];
                    ++n;
                }
            }
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sum2 / static_cast<double>(n) - mean * mean;
    REQUIRE(var > 0.0005 * 0.9);
    REQUIRE(var < 0.0005 * 1.1);
}

TEST_CASE("mask token gradient is nonzero exactly when something is masked") {
    const TemplateMesh tmpl = small_template();
    MAEConfig mc;
    mc.dim = 12;
    mc.heads = 3;
    mc.blocks = 2;
    const MAEModel<double> model = make_mae_model<double>(mc, tmpl);
    const Tensor<double> reg = tmpl.joint_regressor;
    TrainConfig tc;
    tc.steps = 1;

    auto grad_norm = [&](const PartialMesh& pm) {
        TrainingSample s;
        s.input = pm;
        s.target_coarse = tmpl.vertices_coarse;
        s.target_joints = regress_joints(tmpl, CoarseMesh{tmpl.vertices_coarse});
        Tape<double> tape;
        const auto vars = bind_model(tape, model, true);
        const auto loss = sample_loss_graph(model, vars, tape, s, reg, tc);
        tape.backward(loss.total);
        const Tensor<double>& g = tape.grad(vars.mask_token.id);
        double n2 = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) n2 += g[i] * g[i];
        return n2;
    };

    PartialMesh all_visible;
    all_visible.vertices_in = tmpl.vertices_coarse;
    all_visible.mask.assign(tmpl.coarse_count(), 1);
    REQUIRE(grad_norm(all_visible) == 0.0);

    PartialMesh one_masked = all_visible;
    one_masked.mask[5] = 0;
    REQUIRE(grad_norm(one_masked) > 0.0);
}

TEST_CASE("a zero learning rate leaves parameters bitwise unchanged") {
    const TemplateMesh tmpl = small_template();
    MAEConfig mc;
    mc.dim = 12;
    mc.heads = 3;
    mc.blocks = 2;
    MAEModel<float> model = make_mae_model<float>(mc, tmpl);
    auto params = model.params_mut();
    AdamW<float> opt(params);
    std::vector<Tensor<float>> grads;
    Rng rng(12);
    for (const auto& [name, t] : params) {
        Tensor<float> g(t->shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(rng.normal());
        grads.push_back(std::move(g));
    }
    const std::uint64_t before = model_hash(model);
    opt.step(params, grads, 0.0, 1e-4);
    REQUIRE(model_hash(model) == before);
}

TEST_CASE("decoupled weight decay shrinks a parameter with zero gradient") {
    std::vector<std::pair<std::string, Tensor<float>*>> params;
    Tensor<float> w = Tensor<float>::from({1}, {2.0f});
    params.emplace_back("w", &w);
    AdamW<float> opt(params);
    std::vector<Tensor<float>> grads{Tensor<float>({1})};  // zero gradient
    opt.step(params, grads, 0.1, 0.5);
    REQUIRE(w[0] == Catch::Approx(2.0f - 0.1f * 0.5f * 2.0f));
}

TEST_CASE("training reduces the loss and is bitwise deterministic") {
    const TemplateMesh tmpl = small_template();
    const auto dataset = tiny_dataset(tmpl, 8, 2025);
    MAEConfig mc;
    mc.dim = 12;
    mc.heads = 3;
    mc.blocks = 2;
    mc.seed = 1;
    TrainConfig tc;
    tc.steps = 150;
    tc.batch_size = 8;
    tc.checkpoint_every = 0;
    tc.warmup_fraction = 0.1;

    MAEModel<float> m1 = make_mae_model<float>(mc, tmpl);
    const auto log1 = train_with_template(m1, tmpl, dataset, tc);
    REQUIRE(log1.size() == 150);

    // Median of the first 50 losses must exceed the median of the last 50.
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    std::vector<double> head, tail;
    for (int i = 0; i < 50; ++i) head.push_back(log1[static_cast<std::size_t>(i)].loss_total);
    for (int i = 100; i < 150; ++i) tail.push_back(log1[static_cast<std::size_t>(i)].loss_total);
    REQUIRE(median(head) > median(tail));

    MAEModel<float> m2 = make_mae_model<float>(mc, tmpl);
    const auto log2 = train_with_template(m2, tmpl, dataset, tc);
    REQUIRE(model_hash(m1) == model_hash(m2));
    REQUIRE(log1.back().loss_total == log2.back().loss_total);
}

TEST_CASE("training aborts on non-finite parameters with a named tensor") {
    const TemplateMesh tmpl = small_template();
    const auto dataset = tiny_dataset(tmpl, 2, 3030);
    MAEConfig mc;
    mc.dim = 12;
    mc.heads = 3;
    mc.blocks = 2;
    MAEModel<float> model = make_mae_model<float>(mc, tmpl);
    model.embed[0] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig tc;
    tc.steps = 2;
    tc.batch_size = 2;
    try {
        train_with_template(model, tmpl, dataset, tc);
        FAIL("expected abort");
    } catch (const std::runtime_error& e) {
        REQUIRE(std::string(e.what()).find("non-finite") != std::string::npos);
    }
}

TEST_CASE("training sample serialization round trip") {
    const TemplateMesh tmpl = small_template();
    const auto dataset = tiny_dataset(tmpl, 1, 44);
    const std::string path =
        (std::filesystem::temp_directory_path() / "mr_sample.tens").string();
    save_sample(path, dataset[0]);
    const TrainingSample back = load_sample(path);
    REQUIRE(back.input.mask == dataset[0].input.mask);
    REQUIRE(back.target_coarse.size() == dataset[0].target_coarse.size());
    REQUIRE(back.gt_full.size() == tmpl.full_count());
    for (std::size_t i = 0; i < back.target_coarse.size(); ++i)
        REQUIRE(norm(back.target_coarse[i] - dataset[0].target_coarse[i]) < 1e-6);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);  // steps unset
    cfg.steps = 10;
    REQUIRE_NOTHROW(cfg.validate());
    cfg.joint_loss = "quadratic";
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
