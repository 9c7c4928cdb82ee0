// Run configuration: one JSON document covering camera, matching, model,
// data generation, training and evaluation. Every field has a default;
// unknown keys are rejected before any compute.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "camera.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "mae.hpp"
#include "train.hpp"
#include "util.hpp"

namespace meshrecover {

struct CameraConfig {
    double distance = 2.5;
    double azimuth_deg = 0.0;
    double azimuth_jitter_deg = 0.0;  // gen-data draws per-sample azimuth in +-jitter
    double fx = 200.0, fy = 200.0;
    double cx = -1.0, cy = -1.0;  // < 0: image center
    int width = 256, height = 256;

    Intrinsics intrinsics() const {
        Intrinsics k;
        k.fx = fx;
        k.fy = fy;
        k.width = width;
        k.height = height;
        k.cx = cx < 0.0 ? width / 2.0 : cx;
        k.cy = cy < 0.0 ? height / 2.0 : cy;
        k.validate();
        return k;
    }
};

struct MatchConfig {
    double eps = 0.01;
};

struct EvalConfig {
    bool full_resolution = true;
    std::vector<double> noise_stds_mm = {0.0, 10.0, 30.0, 50.0};
    std::uint64_t noise_seed = 0;
};

struct RunConfig {
    CameraConfig camera;
    MatchConfig match;
    MAEConfig model;
    SampleGenConfig data;
    std::uint64_t data_seed = 0;
    TrainConfig train;
    EvalConfig eval;

    void validate() const {
        camera.intrinsics();
        if (!(match.eps > 0.0)) throw ConfigError("match: eps must be positive");
        model.validate();
        data.validate();
        // train.validate() is deferred until training actually runs, because
        // steps is only required there.
    }
};

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
    }
}

template <class T>
void get_to(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const std::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace config_detail

inline RunConfig parse_config(const nlohmann::json& j) {
    using config_detail::check_keys;
    using config_detail::get_to;
    RunConfig c;
    check_keys(j, {"camera", "match", "model", "data", "train", "eval"}, "config");

    if (j.contains("camera")) {
        const auto& jc = j.at("camera");
        check_keys(jc, {"distance", "azimuth_deg", "azimuth_jitter_deg", "fx", "fy", "cx", "cy",
                        "width", "height"}, "camera");
        get_to(jc, "distance", c.camera.distance, "camera");
        get_to(jc, "azimuth_deg", c.camera.azimuth_deg, "camera");
        get_to(jc, "azimuth_jitter_deg", c.camera.azimuth_jitter_deg, "camera");
        get_to(jc, "fx", c.camera.fx, "camera");
        get_to(jc, "fy", c.camera.fy, "camera");
        get_to(jc, "cx", c.camera.cx, "camera");
        get_to(jc, "cy", c.camera.cy, "camera");
        get_to(jc, "width", c.camera.width, "camera");
        get_to(jc, "height", c.camera.height, "camera");
    }
    if (j.contains("match")) {
        const auto& jm = j.at("match");
        check_keys(jm, {"eps"}, "match");
        get_to(jm, "eps", c.match.eps, "match");
    }
    if (j.contains("model")) {
        const auto& jm = j.at("model");
        check_keys(jm, {"dim", "blocks", "heads", "mlp_ratio", "init_std", "seed"}, "model");
        get_to(jm, "dim", c.model.dim, "model");
        get_to(jm, "blocks", c.model.blocks, "model");
        get_to(jm, "heads", c.model.heads, "model");
        get_to(jm, "mlp_ratio", c.model.mlp_ratio, "model");
        get_to(jm, "init_std", c.model.init_std, "model");
        get_to(jm, "seed", c.model.seed, "model");
    }
    if (j.contains("data")) {
        const auto& jd = j.at("data");
        check_keys(jd, {"extra_mask_rate", "noise_variance", "max_retries", "visibility",
                        "vis_rel_tol", "seed"}, "data");
        get_to(jd, "extra_mask_rate", c.data.extra_mask_rate, "data");
        get_to(jd, "noise_variance", c.data.noise_variance, "data");
        get_to(jd, "max_retries", c.data.max_retries, "data");
        get_to(jd, "visibility", c.data.visibility, "data");
        get_to(jd, "vis_rel_tol", c.data.vis_rel_tol, "data");
        get_to(jd, "seed", c.data_seed, "data");
    }
    if (j.contains("train")) {
        const auto& jt = j.at("train");
        check_keys(jt, {"lr", "weight_decay", "batch_size", "warmup_fraction", "schedule",
                        "extra_mask_rate", "noise_variance", "steps", "seed", "fine_tune",
                        "checkpoint_every", "joint_loss", "lambda_v", "lambda_3d",
                        "train_upsample", "aux_full_weight"}, "train");
        get_to(jt, "fine_tune", c.train.fine_tune, "train");
        if (c.train.fine_tune) {
            // Fine-tuning defaults; explicit keys below still win.
            c.train.lr = 1e-5;
            c.train.weight_decay = 1e-6;
            c.train.warmup_fraction = 0.0;
        }
        get_to(jt, "lr", c.train.lr, "train");
        get_to(jt, "weight_decay", c.train.weight_decay, "train");
        get_to(jt, "batch_size", c.train.batch_size, "train");
        get_to(jt, "warmup_fraction", c.train.warmup_fraction, "train");
        get_to(jt, "schedule", c.train.schedule, "train");
        get_to(jt, "extra_mask_rate", c.train.extra_mask_rate, "train");
        get_to(jt, "noise_variance", c.train.noise_variance, "train");
        get_to(jt, "steps", c.train.steps, "train");
        get_to(jt, "seed", c.train.seed, "train");
        get_to(jt, "checkpoint_every", c.train.checkpoint_every, "train");
        get_to(jt, "joint_loss", c.train.joint_loss, "train");
        get_to(jt, "lambda_v", c.train.lambda_v, "train");
        get_to(jt, "lambda_3d", c.train.lambda_3d, "train");
        get_to(jt, "train_upsample", c.train.train_upsample, "train");
        get_to(jt, "aux_full_weight", c.train.aux_full_weight, "train");
    }
    if (j.contains("eval")) {
        const auto& je = j.at("eval");
        check_keys(je, {"full_resolution", "noise_stds_mm", "noise_seed"}, "eval");
        get_to(je, "full_resolution", c.eval.full_resolution, "eval");
        get_to(je, "noise_stds_mm", c.eval.noise_stds_mm, "eval");
        get_to(je, "noise_seed", c.eval.noise_seed, "eval");
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path + ": cannot open config file");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": JSON parse error: " + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["camera"] = {{"distance", c.camera.distance}, {"azimuth_deg", c.camera.azimuth_deg},
                   {"azimuth_jitter_deg", c.camera.azimuth_jitter_deg}, {"fx", c.camera.fx},
                   {"fy", c.camera.fy}, {"cx", c.camera.cx}, {"cy", c.camera.cy},
                   {"width", c.camera.width}, {"height", c.camera.height}};
    j["match"] = {{"eps", c.match.eps}};
    j["model"] = {{"dim", c.model.dim}, {"blocks", c.model.blocks}, {"heads", c.model.heads},
                  {"mlp_ratio", c.model.mlp_ratio}, {"init_std", c.model.init_std},
                  {"seed", c.model.seed}};
    j["data"] = {{"extra_mask_rate", c.data.extra_mask_rate},
                 {"noise_variance", c.data.noise_variance}, {"max_retries", c.data.max_retries},
                 {"visibility", c.data.visibility}, {"vis_rel_tol", c.data.vis_rel_tol},
                 {"seed", c.data_seed}};
    j["train"] = {{"lr", c.train.lr}, {"weight_decay", c.train.weight_decay},
                  {"batch_size", c.train.batch_size}, {"warmup_fraction", c.train.warmup_fraction},
                  {"schedule", c.train.schedule}, {"extra_mask_rate", c.train.extra_mask_rate},
                  {"noise_variance", c.train.noise_variance}, {"steps", c.train.steps},
                  {"seed", c.train.seed}, {"fine_tune", c.train.fine_tune},
                  {"checkpoint_every", c.train.checkpoint_every}, {"joint_loss", c.train.joint_loss},
                  {"lambda_v", c.train.lambda_v}, {"lambda_3d", c.train.lambda_3d},
                  {"train_upsample", c.train.train_upsample},
                  {"aux_full_weight", c.train.aux_full_weight}};
    j["eval"] = {{"full_resolution", c.eval.full_resolution},
                 {"noise_stds_mm", c.eval.noise_stds_mm}, {"noise_seed", c.eval.noise_seed}};
    return j;
}

// Canonical hash: nlohmann::json orders object keys, so dump() is canonical.
inline std::string config_hash(const RunConfig& c) {
    return hex64(fnv1a64(config_to_json(c).dump()));
}

}  // namespace meshrecover
