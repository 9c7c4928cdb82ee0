// Training-pair generation: render-free visibility from a virtual camera,
// random extra masking to bridge the synthetic/real gap, additive Gaussian
// noise, and sample (de)serialization.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "camera.hpp"
#include "errors.hpp"
#include "match.hpp"
#include "mesh.hpp"
#include "obj_io.hpp"
#include "rng.hpp"
#include "tensor_io.hpp"

namespace meshrecover {

struct TrainingSample {
    PartialMesh input;
    std::vector<Vec3> target_coarse;   // clean coarse vertices V
    std::vector<Vec3> target_joints;   // regressor * V
    std::vector<Vec3> gt_full;         // full-resolution ground truth when available
};

struct SampleGenConfig {
    double extra_mask_rate = 0.60;
    double noise_variance = 0.0005;  // squared meters, i.i.d. per coordinate
    int max_retries = 10;
    std::string visibility = "vertex";  // "vertex" | "face" | "zbuffer"
    double vis_rel_tol = 1e-4;

    void validate() const {
        if (extra_mask_rate < 0.0 || extra_mask_rate > 1.0)
            throw ConfigError("data: extra_mask_rate must be in [0,1]");
        if (noise_variance < 0.0) throw ConfigError("data: noise_variance must be non-negative");
        if (visibility != "vertex" && visibility != "face" && visibility != "zbuffer")
            throw ConfigError("data: visibility must be vertex, face or zbuffer");
    }
};

// Drops each set bit with probability `rate`; one uniform draw per visible
// vertex in index order.
inline std::vector<std::uint8_t> apply_extra_mask(const std::vector<std::uint8_t>& mask,
                                                  double rate, Rng& rng) {
    std::vector<std::uint8_t> out = mask;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] && rng.bernoulli(rate)) out[i] = 0;
    return out;
}

// Builds one training pair from a full-resolution ground-truth mesh. Masking
// happens before noise: noise is drawn only for surviving visible vertices,
// three draws per vertex in index order.
inline TrainingSample make_sample(const std::vector<Vec3>& full_gt, const TemplateMesh& tmpl,
                                  const CameraPose& cam, const Intrinsics& intr,
                                  const SampleGenConfig& cfg, Rng& rng) {
    cfg.validate();
    if (full_gt.size() != tmpl.full_count())
        throw std::invalid_argument("make_sample: mesh has " + std::to_string(full_gt.size()) +
                                    " vertices, template expects " + std::to_string(tmpl.full_count()));
    TrainingSample s;
    s.gt_full = full_gt;
    s.target_coarse = downsample(tmpl, full_gt).vertices;
    s.target_joints = regress_joints(tmpl, CoarseMesh{s.target_coarse});

    std::vector<std::uint8_t> cam_visible;
    if (cfg.visibility == "face")
        cam_visible = visible_vertices_face_level(s.target_coarse, tmpl.triangles_coarse, cam, intr,
                                                  cfg.vis_rel_tol);
    else if (cfg.visibility == "zbuffer")
        cam_visible = visible_vertices_zbuffer(s.target_coarse, tmpl.triangles_coarse, cam, intr,
                                               2e-3, cfg.vis_rel_tol);
    else
        cam_visible = visible_vertices(s.target_coarse, tmpl.triangles_coarse, cam, intr,
                                       cfg.vis_rel_tol);

    std::size_t cam_count = 0;
    for (auto m : cam_visible) cam_count += m;
    if (cam_count == 0)
        throw DegenerateInputError("make_sample: no vertex is visible from the virtual camera");

    // Keep at least two survivors so the sample stays normalizable.
    std::vector<std::uint8_t> mask;
    bool ok = false;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        mask = apply_extra_mask(cam_visible, cfg.extra_mask_rate, rng);
        std::size_t kept = 0;
        for (auto m : mask) kept += m;
        if (kept >= std::min<std::size_t>(2, cam_count)) {
            ok = true;
            break;
        }
    }
    if (!ok)
        throw DegenerateInputError("make_sample: extra masking left no visible vertices after " +
                                   std::to_string(cfg.max_retries) + " retries");

    const double sigma = std::sqrt(cfg.noise_variance);
    s.input.mask = mask;
    s.input.vertices_in.assign(tmpl.coarse_count(), Vec3{});
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
            Vec3 v = s.target_coarse[i];
            if (sigma > 0.0) {
                v.x += rng.normal(0.0, sigma);
                v.y += rng.normal(0.0, sigma);
                v.z += rng.normal(0.0, sigma);
            }
            s.input.vertices_in[i] = v;
        }
    return s;
}

// ---------------------------------------------------------------------------
// Sample serialization: one archive per sample.

inline void save_sample(const std::string& path, const TrainingSample& s) {
    auto pack = [](const std::vector<Vec3>& v) {
        std::vector<float> flat(v.size() * 3);
        for (std::size_t i = 0; i < v.size(); ++i) {
            flat[i * 3] = static_cast<float>(v[i].x);
            flat[i * 3 + 1] = static_cast<float>(v[i].y);
            flat[i * 3 + 2] = static_cast<float>(v[i].z);
        }
        return Tensor<float>::from({v.size(), 3}, std::move(flat));
    };
    std::vector<NamedTensor> entries;
    entries.push_back({"input_vertices", pack(s.input.vertices_in)});
    entries.push_back({"input_mask", Tensor<std::uint8_t>::from({s.input.mask.size()}, s.input.mask)});
    entries.push_back({"target_coarse", pack(s.target_coarse)});
    entries.push_back({"target_joints", pack(s.target_joints)});
    if (!s.gt_full.empty()) entries.push_back({"gt_full", pack(s.gt_full)});
    save_archive(path, entries);
}

inline TrainingSample load_sample(const std::string& path) {
    const auto entries = load_archive(path);
    auto unpack = [&](const Tensor<float>& t) {
        if (t.rank() != 2 || t.dim(1) != 3)
            throw FormatError(path + ": expected shape (N,3), got " + shape_str(t.shape()));
        std::vector<Vec3> v(t.dim(0));
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
        return v;
    };
    TrainingSample s;
    s.input.vertices_in = unpack(archive_get<float>(entries, "input_vertices", path));
    s.input.mask = archive_get<std::uint8_t>(entries, "input_mask", path).to_vector();
    s.target_coarse = unpack(archive_get<float>(entries, "target_coarse", path));
    s.target_joints = unpack(archive_get<float>(entries, "target_joints", path));
    if (archive_find(entries, "gt_full"))
        s.gt_full = unpack(archive_get<float>(entries, "gt_full", path));
    if (s.input.mask.size() != s.input.vertices_in.size() ||
        s.input.mask.size() != s.target_coarse.size())
        throw FormatError(path + ": inconsistent vertex counts across tensors");
    return s;
}

// Loads a sample directory via its manifest (written by gen-data).
inline std::vector<TrainingSample> load_dataset(const std::string& dir,
                                                std::vector<std::string>* files_out = nullptr) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    const std::string manifest = dir + "/manifest.json";
    if (fs::exists(manifest)) {
        std::ifstream f(manifest);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const std::exception& e) {
            throw FormatError(manifest + ": parse error: " + e.what());
        }
        for (const auto& s : j.at("samples")) files.push_back(dir + "/" + s.at("file").get<std::string>());
    } else {
        for (const auto& e : fs::directory_iterator(dir)) {
            const std::string name = e.path().filename().string();
            if (name.size() > 5 && name.substr(name.size() - 5) == ".tens") files.push_back(e.path().string());
        }
        std::sort(files.begin(), files.end());
    }
    if (files.empty()) throw DegenerateInputError(dir + ": no samples found");
    std::vector<TrainingSample> samples;
    samples.reserve(files.size());
    for (const auto& f : files) samples.push_back(load_sample(f));
    if (files_out) *files_out = files;
    return samples;
}

// Sorted .obj listing of a mesh-sequence directory.
inline std::vector<std::string> list_mesh_sequence(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw FormatError(dir + ": not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > 4 && name.substr(name.size() - 4) == ".obj") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace meshrecover
