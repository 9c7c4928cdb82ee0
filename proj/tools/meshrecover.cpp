// meshrecover: command-line driver for the mesh-recovery pipeline.
//
// Subcommands: make-template, make-poses, gen-data, render, match, train,
// infer, eval, sweep-noise, selfcheck, docs. Exit codes: 0 success, 1 config
// error, 2 degenerate input, 3 I/O or format error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <meshrecover/config.hpp>
#include <meshrecover/data.hpp>
#include <meshrecover/eval.hpp>
#include <meshrecover/mae.hpp>
#include <meshrecover/match.hpp>
#include <meshrecover/mesh.hpp>
#include <meshrecover/toy_body.hpp>
#include <meshrecover/train.hpp>
#include <meshrecover/version.hpp>

namespace fs = std::filesystem;
using namespace meshrecover;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDegenerate = 2;
constexpr int kExitFormat = 3;

std::string strip_tens_suffix(std::string path) {
    const std::string suffix = ".tens";
    if (path.size() > suffix.size() && path.substr(path.size() - suffix.size()) == suffix)
        path.resize(path.size() - suffix.size());
    return path;
}

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) {
        RunConfig c;
        c.validate();
        return c;
    }
    return load_config(path);
}

CameraPose camera_for(const RunConfig& cfg, double azimuth_deg) {
    return CameraPose::frontal(cfg.camera.distance, azimuth_deg * 3.14159265358979323846 / 180.0);
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError(path + ": cannot open file for writing");
    f << j.dump(2) << "\n";
}

std::uint64_t file_fnv(const std::string& path) {
    const auto bytes = detail::slurp(path);
    return fnv1a64(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------

int cmd_make_template(const std::string& out_dir, int rows, int cols) {
    fs::create_directories(out_dir);
    ToyBodyConfig cfg;
    cfg.rows = rows;
    cfg.cols = cols;
    const TemplateMesh tmpl = make_toy_template(cfg);
    save_template(out_dir, tmpl);
    // Round-trip validation: what was written must load cleanly.
    const TemplateMesh back = load_template(out_dir);
    std::cout << "template written to " << out_dir << ": " << back.full_count() << " full / "
              << back.coarse_count() << " coarse vertices, " << back.joint_count()
              << " joints, hash " << hex64(back.content_hash()) << "\n";
    return kExitOk;
}

int cmd_make_poses(const std::string& template_dir, const std::string& out_dir, int count,
                   std::uint64_t seed) {
    const TemplateMesh tmpl = load_template(template_dir);
    fs::create_directories(out_dir);
    const auto files = write_pose_sequence(out_dir, tmpl, count, seed);
    std::cout << "wrote " << files.size() << " posed meshes to " << out_dir << "\n";
    return kExitOk;
}

int cmd_gen_data(const std::string& mesh_dir, const std::string& template_dir,
                 const std::string& out_dir, const std::string& config_path, std::int64_t seed_flag) {
    RunConfig cfg = load_config_or_default(config_path);
    if (seed_flag >= 0) cfg.data_seed = static_cast<std::uint64_t>(seed_flag);
    const TemplateMesh tmpl = load_template(template_dir);
    const auto meshes = list_mesh_sequence(mesh_dir);
    if (meshes.empty()) throw DegenerateInputError(mesh_dir + ": no meshes");

    fs::create_directories(out_dir);
    // Byte-identical template copy rides along so train/eval are
    // self-contained on --data.
    fs::create_directories(out_dir + "/template");
    for (const auto& e : fs::directory_iterator(template_dir))
        fs::copy_file(e.path(), out_dir + "/template/" + e.path().filename().string(),
                      fs::copy_options::overwrite_existing);

    const Intrinsics intr = cfg.camera.intrinsics();
    nlohmann::json manifest;
    manifest["schema"] = "meshrecover-dataset-v1";
    manifest["seed"] = cfg.data_seed;
    manifest["template_hash"] = hex64(tmpl.content_hash());
    manifest["config_hash"] = config_hash(cfg);
    manifest["git_describe"] = git_describe();
    manifest["samples"] = nlohmann::json::array();

    SampleGenConfig gen = cfg.data;
    gen.extra_mask_rate = cfg.train.extra_mask_rate;
    gen.noise_variance = cfg.train.noise_variance;

    std::size_t written = 0;
    for (std::size_t k = 0; k < meshes.size(); ++k) {
        Rng rng = Rng::stream(cfg.data_seed, k);
        double azimuth = cfg.camera.azimuth_deg;
        if (cfg.camera.azimuth_jitter_deg > 0.0)
            azimuth += rng.uniform(-cfg.camera.azimuth_jitter_deg, cfg.camera.azimuth_jitter_deg);
        const CameraPose cam = camera_for(cfg, azimuth);
        const ObjMesh posed = read_obj(meshes[k]);
        TrainingSample sample;
        try {
            sample = make_sample(posed.vertices, tmpl, cam, intr, gen, rng);
        } catch (const DegenerateInputError& e) {
            std::cerr << "warning: skipping " << meshes[k] << ": " << e.what() << "\n";
            continue;
        }
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05d.tens", static_cast<int>(k));
        const std::string path = out_dir + "/" + name;
        save_sample(path, sample);
        manifest["samples"].push_back({{"index", k},
                                       {"file", name},
                                       {"source", fs::path(meshes[k]).filename().string()},
                                       {"rng_stream", k},
                                       {"azimuth_deg", azimuth},
                                       {"checksum", hex64(file_fnv(path))}});
        ++written;
    }
    if (written == 0) throw DegenerateInputError(mesh_dir + ": every mesh was rejected");
    manifest["count"] = written;
    write_json_file(out_dir + "/manifest.json", manifest);
    std::cout << "wrote " << written << " samples to " << out_dir << "\n";
    return kExitOk;
}

int cmd_render(const std::string& template_dir, const std::string& pose_obj,
               const std::string& out_stem, const std::string& config_path, double azimuth_deg) {
    const RunConfig cfg = load_config_or_default(config_path);
    const TemplateMesh tmpl = load_template(template_dir);
    std::vector<Vec3> verts = tmpl.vertices_full;
    if (!pose_obj.empty()) {
        const ObjMesh posed = read_obj(pose_obj);
        if (posed.vertices.size() != tmpl.full_count())
            throw FormatError(pose_obj + ": vertex count does not match template full mesh");
        verts = posed.vertices;
    }
    const CameraPose cam = camera_for(cfg, azimuth_deg);
    const DepthUVFrame frame =
        render_depth_uv(verts, tmpl.triangles_full, &tmpl.uv_full, cam, cfg.camera.intrinsics());
    if (!frame.has_body()) std::cerr << "warning: rendered frame is empty\n";
    save_frame(out_stem, frame, cam);
    std::cout << "frame written to " << out_stem << ".tens / .json\n";
    return kExitOk;
}

int cmd_match(const std::string& frame_stem, const std::string& template_dir, double eps,
              const std::string& out_path, const std::string& config_path) {
    const RunConfig cfg = load_config_or_default(config_path);
    const double use_eps = eps > 0.0 ? eps : cfg.match.eps;
    const TemplateMesh tmpl = load_template(template_dir);
    const DepthUVFrame frame = load_frame(strip_tens_suffix(frame_stem));
    const LiftedPointSet points = lift_all(frame);
    const PartialMesh pm = match(points, tmpl, use_eps);
    if (pm.visible_count() == 0)
        std::cerr << "warning: no vertex matched within eps=" << use_eps << "\n";
    save_partial(out_path, pm);
    std::cout << "matched " << pm.visible_count() << "/" << pm.mask.size() << " vertices ("
              << points.points.size() << " lifted points) -> " << out_path << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& template_dir, const std::string& out_dir) {
    if (config_path.empty()) throw ConfigError("train: --config is required (steps must be set)");
    const RunConfig cfg = load_config(config_path);
    cfg.train.validate();
    const std::string tdir = template_dir.empty() ? data_dir + "/template" : template_dir;
    const TemplateMesh tmpl = load_template(tdir);
    const auto dataset = load_dataset(data_dir);
    fs::create_directories(out_dir);

    MAEModel<float> model = make_mae_model<float>(cfg.model, tmpl);
    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
    if (!metrics) throw FormatError(out_dir + "/metrics.jsonl: cannot open for writing");

    const auto log = train_with_template(model, tmpl, dataset, cfg.train, out_dir, &metrics);
    nlohmann::json summary;
    summary["steps"] = log.size();
    summary["final_loss_total"] = log.empty() ? 0.0 : log.back().loss_total;
    summary["config_hash"] = config_hash(cfg);
    summary["template_hash"] = hex64(tmpl.content_hash());
    summary["git_describe"] = git_describe();
    write_json_file(out_dir + "/train_summary.json", summary);
    std::cout << "trained " << log.size() << " steps, final loss "
              << (log.empty() ? 0.0 : log.back().loss_total) << ", checkpoints in " << out_dir
              << "\n";
    return kExitOk;
}

int cmd_infer(const std::string& input, const std::string& ckpt_stem,
              const std::string& template_dir, const std::string& out_obj,
              const std::string& stats_path, double eps, const std::string& config_path) {
    const RunConfig cfg = load_config_or_default(config_path);
    const TemplateMesh tmpl = load_template(template_dir);
    const MAEModel<float> model = load_checkpoint<float>(strip_tens_suffix(ckpt_stem));
    if (model.template_hash != tmpl.content_hash())
        throw ConfigError("infer: checkpoint was trained for template " +
                          hex64(model.template_hash) + ", got " + hex64(tmpl.content_hash()));

    // Accept either a rendered/ingested frame or a pre-matched partial mesh.
    const std::string stem = strip_tens_suffix(input);
    const auto entries = load_archive(stem + ".tens");
    PartialMesh pm;
    if (archive_find(entries, "depth")) {
        const DepthUVFrame frame = load_frame(stem);
        pm = match(lift_all(frame), tmpl, eps > 0.0 ? eps : cfg.match.eps);
    } else if (archive_find(entries, "vertices")) {
        pm = load_partial(stem + ".tens");
    } else {
        throw FormatError(input + ": expected a frame (depth/uv) or a partial mesh (vertices/mask)");
    }
    if (pm.mask.size() != tmpl.coarse_count())
        throw FormatError(input + ": partial mesh size does not match template");

    // normalize() raises DegenerateInputError (exit 2) on all-masked input.
    const std::vector<Vec3> full = mae_infer_full(model, pm);
    write_obj(out_obj, full, tmpl.triangles_full, &tmpl.uv_full);
    const std::string vis_path = out_obj + ".visibility.tens";
    save_tensor(vis_path, Tensor<std::uint8_t>::from({pm.mask.size()}, pm.mask));

    nlohmann::json stats;
    stats["visible_vertices"] = pm.visible_count();
    stats["coarse_vertices"] = pm.mask.size();
    stats["visible_fraction"] =
        static_cast<double>(pm.visible_count()) / static_cast<double>(pm.mask.size());
    stats["checkpoint"] = strip_tens_suffix(ckpt_stem);
    stats["template_hash"] = hex64(tmpl.content_hash());
    stats["output_obj"] = out_obj;
    stats["visibility_sidecar"] = vis_path;
    stats["git_describe"] = git_describe();
    if (!stats_path.empty()) write_json_file(stats_path, stats);
    std::cout << "inference ok: " << pm.visible_count() << "/" << pm.mask.size()
              << " visible -> " << out_obj << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt_stem, const std::string& data_dir,
             const std::string& template_dir, const std::string& report_path, bool coarse,
             const std::string& dump_dir, const std::string& config_path) {
    const RunConfig cfg = load_config_or_default(config_path);
    const std::string tdir = template_dir.empty() ? data_dir + "/template" : template_dir;
    const TemplateMesh tmpl = load_template(tdir);
    const MAEModel<float> model = load_checkpoint<float>(strip_tens_suffix(ckpt_stem));
    if (model.template_hash != tmpl.content_hash())
        throw ConfigError("eval: checkpoint/template hash mismatch");
    const auto samples = load_dataset(data_dir);

    EvalReport rep = evaluate(model, tmpl, samples, !coarse && cfg.eval.full_resolution);
    rep.config_hash = config_hash(cfg);
    rep.checkpoint_hash = hex64(file_fnv(strip_tens_suffix(ckpt_stem) + ".tens"));
    write_json_file(report_path, rep.to_json());

    if (!dump_dir.empty()) {
        fs::create_directories(dump_dir);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            char prefix[32];
            std::snprintf(prefix, sizeof(prefix), "sample_%03d", static_cast<int>(i));
            const std::string base = dump_dir + "/" + prefix;
            if (!samples[i].gt_full.empty())
                write_obj(base + "_gt.obj", samples[i].gt_full, tmpl.triangles_full);
            else
                write_obj(base + "_gt.obj", samples[i].target_coarse, tmpl.triangles_coarse);
            // Input: visible vertices only, as a point cloud.
            std::vector<Vec3> pts;
            for (std::size_t v = 0; v < samples[i].input.mask.size(); ++v)
                if (samples[i].input.mask[v]) pts.push_back(samples[i].input.vertices_in[v]);
            write_obj(base + "_input.obj", pts, {});
            write_obj(base + "_pred.obj", mae_infer_full(model, samples[i].input),
                      tmpl.triangles_full);
        }
    }
    std::cout << "PVE " << rep.pve_mm << " mm, MPJPE " << rep.mpjpe_mm << " mm over "
              << rep.per_sample.size() << " samples -> " << report_path << "\n";
    return kExitOk;
}

int cmd_sweep_noise(const std::string& ckpt_stem, const std::string& data_dir,
                    const std::string& template_dir, const std::string& stds_csv,
                    const std::string& report_path, std::int64_t seed_flag,
                    const std::string& config_path) {
    const RunConfig cfg = load_config_or_default(config_path);
    const std::string tdir = template_dir.empty() ? data_dir + "/template" : template_dir;
    const TemplateMesh tmpl = load_template(tdir);
    const MAEModel<float> model = load_checkpoint<float>(strip_tens_suffix(ckpt_stem));
    if (model.template_hash != tmpl.content_hash())
        throw ConfigError("sweep-noise: checkpoint/template hash mismatch");
    const auto samples = load_dataset(data_dir);

    std::vector<double> stds = cfg.eval.noise_stds_mm;
    if (!stds_csv.empty()) {
        stds.clear();
        std::stringstream ss(stds_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                stds.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw ConfigError("sweep-noise: bad std value \"" + tok + "\"");
            }
        }
    }
    if (stds.empty()) throw ConfigError("sweep-noise: no noise levels given");
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.eval.noise_seed;

    const auto table = noise_sweep(model, tmpl, samples, stds, seed, cfg.eval.full_resolution);
    nlohmann::json j;
    j["seed"] = seed;
    j["checkpoint_hash"] = hex64(file_fnv(strip_tens_suffix(ckpt_stem) + ".tens"));
    j["table"] = nlohmann::json::array();
    std::cout << "std_mm pve_mm\n";
    for (const auto& e : table) {
        j["table"].push_back({{"std_mm", e.std_mm}, {"pve_mm", e.pve_mm}});
        std::cout << e.std_mm << " " << e.pve_mm << "\n";
    }
    if (!report_path.empty()) write_json_file(report_path, j);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// selfcheck: fast oracle suites guarding the repo's core equivalences.

int cmd_selfcheck(const std::string& template_dir) {
    int failures = 0;
    auto report = [&](const char* name, bool ok, const std::string& detail = "") {
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << name;
        if (!detail.empty()) std::cout << " (" << detail << ")";
        std::cout << "\n";
        if (!ok) ++failures;
    };

    // Template invariants.
    TemplateMesh tmpl;
    try {
        tmpl = template_dir.empty() ? make_toy_template() : load_template(template_dir);
        if (!template_dir.empty()) validate_template(tmpl);
        report("template invariants", true);
    } catch (const std::exception& e) {
        report("template invariants", false, e.what());
        return 1;  // everything below needs a template
    }

    // Nearest neighbor: grid vs brute force, including exact ties.
    {
        bool ok = true;
        std::string detail;
        for (int inst = 0; inst < 20 && ok; ++inst) {
            Rng rng = Rng::stream(17, static_cast<std::uint64_t>(inst));
            const std::size_t m = 50 + static_cast<std::size_t>(rng.uniform_int(0, 1950));
            const std::size_t n = 10 + static_cast<std::size_t>(rng.uniform_int(0, 490));
            LiftedPointSet pts;
            const bool quantize = inst % 3 == 0;  // force ties
            for (std::size_t i = 0; i < m; ++i) {
                auto q = [&](double x) { return quantize ? std::round(x * 50.0) / 50.0 : x; };
                pts.uvs.push_back({q(rng.uniform()), q(rng.uniform())});
                pts.points.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
            }
            std::vector<Vec2> vuv(n);
            for (auto& u : vuv) {
                auto q = [&](double x) { return quantize ? std::round(x * 50.0) / 50.0 : x; };
                u = {q(rng.uniform()), q(rng.uniform())};
            }
            const double eps = rng.uniform(0.005, 0.3);
            const PartialMesh a = match_uv(pts, vuv, eps);
            const PartialMesh b = match_uv_brute(pts, vuv, eps);
            for (std::size_t i = 0; i < n; ++i) {
                if (a.mask[i] != b.mask[i] ||
                    (a.mask[i] && norm2(a.vertices_in[i] - b.vertices_in[i]) != 0.0)) {
                    ok = false;
                    detail = "instance " + std::to_string(inst) + " vertex " + std::to_string(i);
                    break;
                }
            }
        }
        report("nearest-neighbor grid vs brute force", ok, detail);
    }

    // Visibility: early-exit ray cast vs full-scan minimum.
    {
        bool ok = true;
        std::string detail;
        const CameraPose cam = CameraPose::frontal(2.5);
        const Intrinsics intr;
        for (int inst = 0; inst < 8 && ok; ++inst) {
            ToyBodyConfig bc;
            bc.rows = 6 + inst % 3;
            bc.cols = 9 + inst % 4;
            const TemplateMesh t = make_toy_template(bc);
            Rng rng = Rng::stream(23, static_cast<std::uint64_t>(inst));
            const PoseParams p = random_pose(rng);
            const std::vector<Vec3> verts = apply_pose(t.vertices_coarse, p);
            const auto impl = visible_vertices(verts, t.triangles_coarse, cam, intr);
            // Oracle: exhaustive minimum-distance scan, no early exit.
            const auto cs = to_camera_space(verts, cam);
            const auto inc = detail::incident_triangles(verts.size(), t.triangles_coarse);
            for (std::size_t i = 0; i < verts.size(); ++i) {
                Vec2 px;
                bool vis = detail::in_frustum(intr, cs[i], px) &&
                           detail::front_facing(cs, t.triangles_coarse, inc[i]);
                if (vis) {
                    double tmin = std::numeric_limits<double>::infinity();
                    RayHit hit;
                    for (const auto& tri : t.triangles_coarse)
                        if (ray_triangle({0, 0, 0}, cs[i], cs[static_cast<std::size_t>(tri[0])],
                                         cs[static_cast<std::size_t>(tri[1])],
                                         cs[static_cast<std::size_t>(tri[2])], hit))
                            tmin = std::min(tmin, hit.t);
                    vis = !(tmin < 1.0 - 1e-4);
                }
                if (vis != (impl[i] != 0)) {
                    ok = false;
                    detail = "instance " + std::to_string(inst) + " vertex " + std::to_string(i);
                    break;
                }
            }
        }
        report("visibility vs exhaustive ray oracle", ok, detail);
    }

    // Gradients: reverse mode vs central differences on a 6-vertex fixture.
    {
        ToyBodyConfig bc;
        bc.rows = 2;
        bc.cols = 3;
        const TemplateMesh t6 = make_toy_template(bc);
        MAEConfig mc;
        mc.dim = 8;
        mc.heads = 2;
        mc.blocks = 2;
        mc.seed = 5;
        MAEModel<double> model = make_mae_model<double>(mc, t6);
        Rng rng(99);
        TrainingSample s;
        s.target_coarse = t6.vertices_coarse;
        s.target_joints = regress_joints(t6, CoarseMesh{t6.vertices_coarse});
        s.gt_full = t6.vertices_full;
        s.input.mask = {1, 0, 1, 1, 0, 1};
        s.input.vertices_in.resize(6);
        for (std::size_t i = 0; i < 6; ++i)
            if (s.input.mask[i])
                s.input.vertices_in[i] =
                    t6.vertices_coarse[i] + Vec3{rng.normal(0.0, 0.02), rng.normal(0.0, 0.02),
                                                 rng.normal(0.0, 0.02)};
        TrainConfig tc;
        tc.steps = 1;
        tc.train_upsample = true;  // exercise the upsampler path too
        const Tensor<double> reg = t6.joint_regressor;

        auto loss_value = [&]() {
            Tape<double> tape;
            const auto vars = bind_model(tape, model, true);
            return static_cast<double>(
                sample_loss_graph(model, vars, tape, s, reg, tc).total.value()[0]);
        };
        Tape<double> tape;
        const auto vars = bind_model(tape, model, true);
        const auto loss = sample_loss_graph(model, vars, tape, s, reg, tc);
        tape.backward(loss.total);

        // Pass: |ad - fd| <= atol + rtol*(|ad|+|fd|). The atol floor sits
        // above the f64 central-difference truncation floor (measured ~5e-9 on
        // this graph); rtol carries the 1e-6 relative requirement for every
        // gradient of consequential size.
        double max_rel = 0.0;
        bool grad_ok = true;
        auto params = model.params_mut();
        const double h = 1e-5, atol = 2e-8, rtol = 1e-6;
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor<double>& w = *params[p].second;
            const Tensor<double>& g = tape.grad(static_cast<int>(p));
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double keep = w[i];
                w[i] = keep + h;
                const double up = loss_value();
                w[i] = keep - h;
                const double dn = loss_value();
                w[i] = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double mag = std::abs(fd) + std::abs(g[i]);
                if (std::abs(fd - g[i]) > atol + rtol * mag) grad_ok = false;
                max_rel = std::max(max_rel, std::abs(fd - g[i]) / std::max(1e-3, mag));
            }
        }
        report("gradient check vs central differences", grad_ok,
               "max rel err " + std::to_string(max_rel));
    }

    // Resolution operators: pseudoinverse round trips on the rest pose.
    {
        const CoarseMesh down = downsample(tmpl, tmpl.vertices_full);
        const std::vector<Vec3> up = upsample(tmpl, down);
        double max_err = 0.0;
        for (std::size_t i = 0; i < up.size(); ++i)
            max_err = std::max(max_err, norm(up[i] - tmpl.vertices_full[i]));
        const double rel = max_err / std::max(1e-12, mean_edge_length(tmpl.vertices_full,
                                                                      tmpl.triangles_full));
        report("upsample(downsample(rest)) round trip", rel < 0.05,
               "max err / mean edge = " + std::to_string(rel));
    }

    // Seeded determinism of the full mini pipeline.
    {
        auto run = [&]() {
            MAEConfig mc;
            mc.dim = 8;
            mc.heads = 2;
            mc.blocks = 2;
            MAEModel<float> model = make_mae_model<float>(mc, tmpl);
            std::vector<TrainingSample> ds;
            const CameraPose cam = CameraPose::frontal(2.5);
            const Intrinsics intr;
            SampleGenConfig gen;
            for (int k = 0; k < 4; ++k) {
                Rng rng = Rng::stream(7, static_cast<std::uint64_t>(k));
                const auto posed = apply_pose(tmpl.vertices_full, random_pose(rng));
                ds.push_back(make_sample(posed, tmpl, cam, intr, gen, rng));
            }
            TrainConfig tc;
            tc.steps = 6;
            tc.batch_size = 4;
            tc.checkpoint_every = 0;
            train_with_template(model, tmpl, ds, tc);
            std::uint64_t h = 0xCBF29CE484222325ull;
            for (const auto& [name, t] : model.params())
                h = fnv1a64(t->data(), t->size() * sizeof(float), h);
            return h;
        };
        const std::uint64_t h1 = run(), h2 = run();
        report("seeded rerun determinism", h1 == h2, hex64(h1) + " vs " + hex64(h2));
    }

    std::cout << (failures == 0 ? "selfcheck OK\n" : "selfcheck FAILED\n");
    return failures == 0 ? kExitOk : kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meshrecover: partial human-body mesh recovery pipeline"};
    app.require_subcommand(0, 1);

    // make-template
    auto* sc_mkt = app.add_subcommand("make-template", "generate the bundled toy template");
    std::string mkt_out = "assets/toy_template";
    int mkt_rows = 10, mkt_cols = 15;
    sc_mkt->add_option("--out", mkt_out, "output directory");
    sc_mkt->add_option("--rows", mkt_rows, "grid rows");
    sc_mkt->add_option("--cols", mkt_cols, "grid columns");

    // make-poses
    auto* sc_mkp = app.add_subcommand("make-poses", "generate a synthetic mesh sequence");
    std::string mkp_tmpl, mkp_out;
    int mkp_count = 200;
    std::uint64_t mkp_seed = 0;
    sc_mkp->add_option("--template", mkp_tmpl, "template directory")->required();
    sc_mkp->add_option("--out", mkp_out, "output directory")->required();
    sc_mkp->add_option("--count", mkp_count, "number of poses");
    sc_mkp->add_option("--seed", mkp_seed, "pose seed");

    // gen-data
    auto* sc_gen = app.add_subcommand("gen-data", "build training samples from a mesh sequence");
    std::string gen_meshes, gen_tmpl, gen_out, gen_cfg;
    std::int64_t gen_seed = -1;
    sc_gen->add_option("--meshes", gen_meshes, "mesh sequence directory")->required();
    sc_gen->add_option("--template", gen_tmpl, "template directory")->required();
    sc_gen->add_option("--out", gen_out, "output directory")->required();
    sc_gen->add_option("--config", gen_cfg, "config JSON");
    sc_gen->add_option("--seed", gen_seed, "override data seed");

    // render
    auto* sc_ren = app.add_subcommand("render", "render a depth+uv frame of the template");
    std::string ren_tmpl, ren_pose, ren_out, ren_cfg;
    double ren_azimuth = 0.0;
    sc_ren->add_option("--template", ren_tmpl, "template directory")->required();
    sc_ren->add_option("--pose-obj", ren_pose, "posed full mesh (defaults to rest pose)");
    sc_ren->add_option("--out", ren_out, "output stem (writes .tens and .json)")->required();
    sc_ren->add_option("--config", ren_cfg, "config JSON");
    sc_ren->add_option("--azimuth", ren_azimuth, "camera azimuth in degrees");

    // match
    auto* sc_match = app.add_subcommand("match", "lift a frame and match to template vertices");
    std::string match_frame, match_tmpl, match_out, match_cfg;
    double match_eps = -1.0;
    sc_match->add_option("--frame", match_frame, "frame stem or .tens path")->required();
    sc_match->add_option("--template", match_tmpl, "template directory")->required();
    sc_match->add_option("--eps", match_eps, "uv match threshold");
    sc_match->add_option("--out", match_out, "output partial mesh path")->required();
    sc_match->add_option("--config", match_cfg, "config JSON");

    // train
    auto* sc_train = app.add_subcommand("train", "train the masked autoencoder");
    std::string train_cfg, train_data, train_tmpl, train_out;
    sc_train->add_option("--config", train_cfg, "config JSON (train.steps required)")->required();
    sc_train->add_option("--data", train_data, "sample directory")->required();
    sc_train->add_option("--template", train_tmpl, "template directory (default: <data>/template)");
    sc_train->add_option("--out", train_out, "checkpoint directory")->required();

    // infer
    auto* sc_infer = app.add_subcommand("infer", "complete a frame or partial mesh");
    std::string inf_input, inf_ckpt, inf_tmpl, inf_out = "prediction.obj", inf_stats, inf_cfg;
    double inf_eps = -1.0;
    sc_infer->add_option("--input", inf_input, "frame stem or partial .tens")->required();
    sc_infer->add_option("--ckpt", inf_ckpt, "checkpoint stem")->required();
    sc_infer->add_option("--template", inf_tmpl, "template directory")->required();
    sc_infer->add_option("--out", inf_out, "output OBJ path");
    sc_infer->add_option("--stats", inf_stats, "write stats JSON here");
    sc_infer->add_option("--eps", inf_eps, "uv match threshold for frame inputs");
    sc_infer->add_option("--config", inf_cfg, "config JSON");

    // eval
    auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on a sample set");
    std::string ev_ckpt, ev_data, ev_tmpl, ev_report = "report.json", ev_dump, ev_cfg;
    bool ev_coarse = false;
    sc_eval->add_option("--ckpt", ev_ckpt, "checkpoint stem")->required();
    sc_eval->add_option("--data", ev_data, "sample directory")->required();
    sc_eval->add_option("--template", ev_tmpl, "template directory (default: <data>/template)");
    sc_eval->add_option("--report", ev_report, "output report JSON");
    sc_eval->add_flag("--coarse", ev_coarse, "evaluate at coarse resolution");
    sc_eval->add_option("--dump-obj", ev_dump, "dump (gt, input, prediction) OBJ triples here");
    sc_eval->add_option("--config", ev_cfg, "config JSON");

    // sweep-noise
    auto* sc_sweep = app.add_subcommand("sweep-noise", "PVE under increasing input noise");
    std::string sw_ckpt, sw_data, sw_tmpl, sw_stds, sw_report, sw_cfg;
    std::int64_t sw_seed = -1;
    sc_sweep->add_option("--ckpt", sw_ckpt, "checkpoint stem")->required();
    sc_sweep->add_option("--data", sw_data, "sample directory")->required();
    sc_sweep->add_option("--template", sw_tmpl, "template directory (default: <data>/template)");
    sc_sweep->add_option("--stds", sw_stds, "comma-separated noise stds in mm");
    sc_sweep->add_option("--report", sw_report, "output report JSON");
    sc_sweep->add_option("--seed", sw_seed, "noise seed");
    sc_sweep->add_option("--config", sw_cfg, "config JSON");

    // selfcheck
    auto* sc_self = app.add_subcommand("selfcheck", "run the fast oracle suites");
    std::string self_tmpl;
    sc_self->add_option("--template", self_tmpl, "validate this template directory instead");

    // docs
    auto* sc_docs = app.add_subcommand("docs", "print the full flag reference");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (sc_mkt->parsed()) return cmd_make_template(mkt_out, mkt_rows, mkt_cols);
        if (sc_mkp->parsed()) return cmd_make_poses(mkp_tmpl, mkp_out, mkp_count, mkp_seed);
        if (sc_gen->parsed()) return cmd_gen_data(gen_meshes, gen_tmpl, gen_out, gen_cfg, gen_seed);
        if (sc_ren->parsed()) return cmd_render(ren_tmpl, ren_pose, ren_out, ren_cfg, ren_azimuth);
        if (sc_match->parsed())
            return cmd_match(match_frame, match_tmpl, match_eps, match_out, match_cfg);
        if (sc_train->parsed()) return cmd_train(train_cfg, train_data, train_tmpl, train_out);
        if (sc_infer->parsed())
            return cmd_infer(inf_input, inf_ckpt, inf_tmpl, inf_out, inf_stats, inf_eps, inf_cfg);
        if (sc_eval->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_tmpl, ev_report, ev_coarse, ev_dump, ev_cfg);
        if (sc_sweep->parsed())
            return cmd_sweep_noise(sw_ckpt, sw_data, sw_tmpl, sw_stds, sw_report, sw_seed, sw_cfg);
        if (sc_self->parsed()) return cmd_selfcheck(self_tmpl);
        if (sc_docs->parsed()) {
            std::cout << app.get_description() << "\n\n"
                      << "Exit codes: 0 success, 1 config error, 2 degenerate input, "
                      << "3 I/O or format error.\n"
                      << "MESHRECOVER_THREADS caps internal parallelism.\n";
            for (const CLI::App* sub : app.get_subcommands({})) {
                std::cout << "\n## " << sub->get_name() << "\n\n";
                std::cout << sub->help();
            }
            return kExitOk;
        }
        std::cout << app.help();
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DegenerateInputError& e) {
        std::cerr << "degenerate input: " << e.what() << "\n";
        return kExitDegenerate;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
