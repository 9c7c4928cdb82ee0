// Losses, schedule, optimizer and the training loop.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "data.hpp"
#include "mae.hpp"
#include "util.hpp"

namespace meshrecover {

struct LossWeights {
    double lambda_v = 1.0;
    double lambda_3d = 1.0;

    void validate() const {
        if (lambda_v < 0.0 || lambda_3d < 0.0)
            throw ConfigError("loss weights must be non-negative");
        if (lambda_v == 0.0 && lambda_3d == 0.0)
            throw ConfigError("loss weights must not both be zero");
    }
};

// ---------------------------------------------------------------------------
// Reference losses over vertex lists (double precision; these are the
// spec-level operations, the tape builds the same quantities for training).

// (1/N) sum_i ||pred_i - target_i||_1
inline double loss_vertex(const CoarseMesh& pred, const CoarseMesh& target) {
    if (pred.vertices.size() != target.vertices.size())
        throw std::invalid_argument("loss_vertex: size mismatch " +
                                    std::to_string(pred.vertices.size()) + " vs " +
                                    std::to_string(target.vertices.size()));
    double total = 0.0;
    for (std::size_t i = 0; i < pred.vertices.size(); ++i) {
        const Vec3 d = pred.vertices[i] - target.vertices[i];
        total += std::abs(d.x) + std::abs(d.y) + std::abs(d.z);
    }
    return total / static_cast<double>(pred.vertices.size());
}

// ||J pred - target||_F^2, optionally averaged over entries for scale
// comparability with the vertex loss.
inline double loss_joints(const CoarseMesh& pred, const std::vector<Vec3>& target_joints,
                          const TemplateMesh& tmpl, bool mean = false) {
    const std::vector<Vec3> pj = regress_joints(tmpl, pred);
    if (pj.size() != target_joints.size())
        throw std::invalid_argument("loss_joints: regressor emits " + std::to_string(pj.size()) +
                                    " joints, target has " + std::to_string(target_joints.size()));
    double total = 0.0;
    for (std::size_t i = 0; i < pj.size(); ++i) total += norm2(pj[i] - target_joints[i]);
    return mean ? total / static_cast<double>(pj.size() * 3) : total;
}

inline double loss_total(const CoarseMesh& pred, const TrainingSample& sample,
                         const TemplateMesh& tmpl, const LossWeights& w, bool joint_mean = false) {
    w.validate();
    return w.lambda_v * loss_vertex(pred, CoarseMesh{sample.target_coarse}) +
           w.lambda_3d * loss_joints(pred, sample.target_joints, tmpl, joint_mean);
}

// ---------------------------------------------------------------------------
// Training configuration.

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 32;
    double warmup_fraction = 0.15;
    std::string schedule = "cosine";
    double extra_mask_rate = 0.60;
    double noise_variance = 0.0005;
    int steps = 0;  // required
    std::uint64_t seed = 0;
    bool fine_tune = false;  // resolved defaults: lr 1e-5, wd 1e-6, no warmup
    int checkpoint_every = 500;
    std::string joint_loss = "mean";  // "mean" | "frobenius"
    double lambda_v = 1.0;
    double lambda_3d = 1.0;
    bool train_upsample = false;  // auxiliary full-resolution L1 through the upsampler
    double aux_full_weight = 1.0;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
        if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
        if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
            throw ConfigError("train: warmup_fraction must be in [0,1]");
        if (schedule != "cosine" && schedule != "constant")
            throw ConfigError("train: schedule must be cosine or constant");
        if (extra_mask_rate < 0.0 || extra_mask_rate > 1.0)
            throw ConfigError("train: extra_mask_rate must be in [0,1]");
        if (steps < 1) throw ConfigError("train: steps is required and must be at least 1");
        if (joint_loss != "mean" && joint_loss != "frobenius")
            throw ConfigError("train: joint_loss must be mean or frobenius");
        LossWeights{lambda_v, lambda_3d}.validate();
    }
};

// Linear warmup to lr over the first round(warmup_fraction*steps) steps, then
// cosine decay that reaches exactly lr at the warmup boundary and 0 at the
// final step.
inline double lr_at(int step, const TrainConfig& cfg) {
    const int warmup = static_cast<int>(std::lround(cfg.warmup_fraction * cfg.steps));
    if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (cfg.schedule == "constant") return cfg.lr;
    const int denom = std::max(1, cfg.steps - 1 - warmup);
    const double x = static_cast<double>(step - warmup) / static_cast<double>(denom);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay), elementwise math in double.

template <class T>
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamW(const std::vector<std::pair<std::string, Tensor<T>*>>& params) {
        for (const auto& [name, t] : params) {
            m_.emplace_back(t->shape());
            v_.emplace_back(t->shape());
        }
    }

    void step(std::vector<std::pair<std::string, Tensor<T>*>>& params,
              const std::vector<Tensor<T>>& grads, double lr, double weight_decay) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor<T>& w = *params[p].second;
            const Tensor<T>& g = grads[p];
            Tensor<double>& m = m_[p];
            Tensor<double>& v = v_[p];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                const double upd = lr * (mhat / (std::sqrt(vhat) + eps) +
                                         weight_decay * static_cast<double>(w[i]));
                w[i] = static_cast<T>(static_cast<double>(w[i]) - upd);
            }
        }
    }

private:
    std::vector<Tensor<double>> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Loss graph for one sample.

template <class T>
struct SampleLoss {
    Var<T> total, vertex, joints;
};

template <class T>
SampleLoss<T> sample_loss_graph(const MAEModel<T>& model, const ModelVars<T>& vars, Tape<T>& tape,
                                const TrainingSample& sample, const Tensor<T>& regressor,
                                const TrainConfig& cfg) {
    auto pack = [](const std::vector<Vec3>& v) {
        Tensor<T> t({v.size(), 3});
        for (std::size_t i = 0; i < v.size(); ++i) {
            t.at(i, 0) = static_cast<T>(v[i].x);
            t.at(i, 1) = static_cast<T>(v[i].y);
            t.at(i, 2) = static_cast<T>(v[i].z);
        }
        return t;
    };
    const bool with_full = cfg.train_upsample && !sample.gt_full.empty();
    const auto fwd = mae_forward(model, vars, tape, sample.input, with_full);
    tape.set_label(fwd.coarse.id, "prediction");

    SampleLoss<T> out;
    out.vertex = l1_mean_rows(fwd.coarse, pack(sample.target_coarse));
    tape.set_label(out.vertex.id, "loss_v");
    Var<T> pred_joints = mm(tape.constant(regressor), fwd.coarse);
    out.joints = frob_sq(pred_joints, pack(sample.target_joints), cfg.joint_loss == "mean");
    tape.set_label(out.joints.id, "loss_3d");
    out.total = lincomb(out.vertex, out.joints, static_cast<T>(cfg.lambda_v),
                        static_cast<T>(cfg.lambda_3d));
    if (with_full) {
        Var<T> aux = l1_mean_rows(fwd.full, pack(sample.gt_full));
        tape.set_label(aux.id, "loss_full_aux");
        out.total = lincomb(out.total, aux, T(1), static_cast<T>(cfg.aux_full_weight));
    }
    tape.set_label(out.total.id, "loss_total");
    return out;
}

// ---------------------------------------------------------------------------
// Training loop. Workers process whole samples; per-sample gradients are
// reduced in sample order, so results do not depend on the worker count.

struct TrainLogEntry {
    int step = 0;
    double lr = 0.0, loss_v = 0.0, loss_3d = 0.0, loss_total = 0.0;
};

template <class T>
std::vector<TrainLogEntry> train_with_template(
    MAEModel<T>& model, const TemplateMesh& tmpl, const std::vector<TrainingSample>& dataset,
    const TrainConfig& cfg, const std::string& ckpt_dir = "", std::ostream* metrics_stream = nullptr,
    const std::function<void(const TrainLogEntry&)>& on_step = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw DegenerateInputError("train: dataset is empty");
    for (const auto& s : dataset)
        if (s.input.mask.size() != model.n_coarse)
            throw std::invalid_argument("train: sample has " + std::to_string(s.input.mask.size()) +
                                        " vertices, model expects " + std::to_string(model.n_coarse));

    auto params = model.params_mut();
    const std::size_t n_params = params.size();
    AdamW<T> opt(params);
    const Tensor<T> regressor = tmpl.joint_regressor.template cast<T>();

    std::vector<TrainLogEntry> log;
    log.reserve(static_cast<std::size_t>(cfg.steps));

    const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
    std::vector<std::vector<Tensor<T>>> sample_grads(batch);
    std::vector<std::array<double, 3>> sample_losses(batch);
    std::vector<std::string> sample_errors(batch);

    // Epoch-wise sample order: a seeded Fisher-Yates permutation per epoch.
    const std::size_t n_data = dataset.size();
    std::size_t perm_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm(n_data);
    auto index_at = [&](std::size_t global) {
        const std::size_t epoch = global / n_data;
        if (epoch != perm_epoch) {
            for (std::size_t i = 0; i < n_data; ++i) perm[i] = i;
            Rng rng = Rng::stream(cfg.seed ^ 0x5A11ADull, epoch);
            for (std::size_t i = n_data; i > 1; --i)
                std::swap(perm[i - 1], perm[static_cast<std::size_t>(
                                           rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
            perm_epoch = epoch;
        }
        return perm[global % n_data];
    };
    std::vector<std::size_t> step_indices(batch);

    for (int step = 0; step < cfg.steps; ++step) {
        const double lr = lr_at(step, cfg);
        for (std::size_t bi = 0; bi < batch; ++bi)
            step_indices[bi] = index_at(static_cast<std::size_t>(step) * batch + bi);

        for (auto& e : sample_errors) e.clear();
        parallel_for(batch, [&](std::size_t bi) {
            const TrainingSample& sample = dataset[step_indices[bi]];
            try {
                Tape<T> tape;
                const auto vars = bind_model(tape, model, true);
                const auto loss = sample_loss_graph(model, vars, tape, sample, regressor, cfg);
                const double lt = static_cast<double>(loss.total.value()[0]);
                if (!std::isfinite(lt)) {
                    const auto bad = tape.first_nonfinite();
                    throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                                             ", first non-finite tensor: " +
                                             (bad ? *bad : std::string("loss_total")));
                }
                tape.backward(loss.total);
                auto& grads = sample_grads[bi];
                grads.clear();
                grads.reserve(n_params);
                // Leaves were bound first, in params() order: ids 0..n_params-1.
                for (std::size_t p = 0; p < n_params; ++p) {
                    Tensor<T>& g = tape.grad(static_cast<int>(p));
                    grads.push_back(std::move(g));
                }
                sample_losses[bi] = {static_cast<double>(loss.vertex.value()[0]),
                                     static_cast<double>(loss.joints.value()[0]), lt};
            } catch (const std::exception& e) {
                sample_errors[bi] = e.what();
            }
        });
        for (const auto& e : sample_errors)
            if (!e.empty()) {
                if (!ckpt_dir.empty()) save_checkpoint(ckpt_dir + "/ckpt_abort", model);
                throw std::runtime_error("train: " + e);
            }

        // Deterministic reduction: mean over the batch in sample order.
        std::vector<Tensor<T>> grads;
        grads.reserve(n_params);
        const T inv_b = T(1) / static_cast<T>(batch);
        for (std::size_t p = 0; p < n_params; ++p) {
            Tensor<T> acc(params[p].second->shape());
            for (std::size_t bi = 0; bi < batch; ++bi) {
                const Tensor<T>& g = sample_grads[bi][p];
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
            }
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] *= inv_b;
            grads.push_back(std::move(acc));
        }
        opt.step(params, grads, lr, cfg.weight_decay);

        TrainLogEntry entry;
        entry.step = step;
        entry.lr = lr;
        for (std::size_t bi = 0; bi < batch; ++bi) {
            entry.loss_v += sample_losses[bi][0];
            entry.loss_3d += sample_losses[bi][1];
            entry.loss_total += sample_losses[bi][2];
        }
        entry.loss_v /= static_cast<double>(batch);
        entry.loss_3d /= static_cast<double>(batch);
        entry.loss_total /= static_cast<double>(batch);
        log.push_back(entry);
        if (metrics_stream) {
            nlohmann::json j;
            j["step"] = entry.step;
            j["lr"] = entry.lr;
            j["loss_v"] = entry.loss_v;
            j["loss_3d"] = entry.loss_3d;
            j["loss_total"] = entry.loss_total;
            (*metrics_stream) << j.dump() << "\n";
        }
        if (on_step) on_step(entry);
        if (!ckpt_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof(name), "/ckpt_step_%06d", step + 1);
            save_checkpoint(ckpt_dir + name, model);
        }
    }
    if (!ckpt_dir.empty()) save_checkpoint(ckpt_dir + "/ckpt_final", model);
    return log;
}

}  // namespace meshrecover
