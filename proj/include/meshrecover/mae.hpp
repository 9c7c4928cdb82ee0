// Masked autoencoder for mesh completion: per-vertex embeddings with a
// learned mask token and positional table, a pre-norm transformer encoder,
// a linear output head over normalized coordinates, and a learned upsampling
// layer to full resolution.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "errors.hpp"
#include "match.hpp"
#include "mesh.hpp"
#include "rng.hpp"
#include "tensor_io.hpp"
#include "util.hpp"

namespace meshrecover {

struct MAEConfig {
    std::size_t dim = 20;
    std::size_t blocks = 6;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (dim == 0 || blocks == 0 || heads == 0 || mlp_ratio == 0)
            throw ConfigError("model: dim, blocks, heads and mlp_ratio must be positive");
        if (dim % heads != 0)
            throw ConfigError("model: attention head count " + std::to_string(heads) +
                              " must divide dim " + std::to_string(dim));
    }
};

template <class T>
struct MAEModel {
    MAEConfig cfg;
    std::size_t n_coarse = 0;
    std::size_t n_full = 0;
    std::uint64_t template_hash = 0;

    Tensor<T> embed;       // (3, d)
    Tensor<T> mask_token;  // (d)
    Tensor<T> pos_embed;   // (N, d)
    struct Block {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    Tensor<T> final_ln_g, final_ln_b;
    Tensor<T> head_w;  // (d, 3)
    Tensor<T> head_b;  // (3)
    Tensor<T> upsample;  // (F, N), shared with the template's upsample operator

    // Stable parameter enumeration; the checkpoint format, the optimizer and
    // gradient extraction all follow this order.
    std::vector<std::pair<std::string, const Tensor<T>*>> params() const {
        auto* self = const_cast<MAEModel*>(this);
        std::vector<std::pair<std::string, const Tensor<T>*>> out;
        auto add = [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); };
        add("embed", self->embed);
        add("mask_token", self->mask_token);
        add("pos_embed", self->pos_embed);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            auto& blk = self->blocks[b];
            const std::string p = "blocks." + std::to_string(b) + ".";
            add(p + "ln1_g", blk.ln1_g);
            add(p + "ln1_b", blk.ln1_b);
            add(p + "wq", blk.wq);
            add(p + "bq", blk.bq);
            add(p + "wk", blk.wk);
            add(p + "bk", blk.bk);
            add(p + "wv", blk.wv);
            add(p + "bv", blk.bv);
            add(p + "wo", blk.wo);
            add(p + "bo", blk.bo);
            add(p + "ln2_g", blk.ln2_g);
            add(p + "ln2_b", blk.ln2_b);
            add(p + "w1", blk.w1);
            add(p + "b1", blk.b1);
            add(p + "w2", blk.w2);
            add(p + "b2", blk.b2);
        }
        add("final_ln_g", self->final_ln_g);
        add("final_ln_b", self->final_ln_b);
        add("head_w", self->head_w);
        add("head_b", self->head_b);
        add("upsample", self->upsample);
        return out;
    }
    std::vector<std::pair<std::string, Tensor<T>*>> params_mut() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& [name, t] : params()) out.emplace_back(name, const_cast<Tensor<T>*>(t));
        return out;
    }

    bool finite() const {
        for (const auto& [name, t] : params())
            for (std::size_t i = 0; i < t->size(); ++i)
                if (!std::isfinite(static_cast<double>((*t)[i]))) return false;
        return true;
    }
};

namespace mae_detail {

// Truncated normal: resample outside two standard deviations.
template <class T>
void trunc_normal_fill(Tensor<T>& t, double stddev, Rng& rng) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        double x = rng.normal();
        while (std::abs(x) > 2.0) x = rng.normal();
        t[i] = static_cast<T>(x * stddev);
    }
}

}  // namespace mae_detail

template <class T>
MAEModel<T> make_mae_model(const MAEConfig& cfg, const TemplateMesh& tmpl) {
    cfg.validate();
    MAEModel<T> m;
    m.cfg = cfg;
    m.n_coarse = tmpl.coarse_count();
    m.n_full = tmpl.full_count();
    m.template_hash = tmpl.content_hash();
    const std::size_t d = cfg.dim, h = cfg.mlp_ratio * cfg.dim;
    Rng rng(splitmix64(cfg.seed ^ 0xAE0DE1ull));

    auto weights = [&](std::vector<std::size_t> shape) {
        Tensor<T> t(std::move(shape));
        mae_detail::trunc_normal_fill(t, cfg.init_std, rng);
        return t;
    };
    auto zeros = [](std::vector<std::size_t> shape) { return Tensor<T>(std::move(shape)); };
    auto ones = [](std::vector<std::size_t> shape) {
        Tensor<T> t(std::move(shape));
        t.fill(T(1));
        return t;
    };

    m.embed = weights({3, d});
    m.mask_token = zeros({d});
    m.pos_embed = weights({m.n_coarse, d});
    m.blocks.resize(cfg.blocks);
    for (auto& blk : m.blocks) {
        blk.ln1_g = ones({d});
        blk.ln1_b = zeros({d});
        blk.wq = weights({d, d});
        blk.bq = zeros({d});
        blk.wk = weights({d, d});
        blk.bk = zeros({d});
        blk.wv = weights({d, d});
        blk.bv = zeros({d});
        blk.wo = weights({d, d});
        blk.bo = zeros({d});
        blk.ln2_g = ones({d});
        blk.ln2_b = zeros({d});
        blk.w1 = weights({d, h});
        blk.b1 = zeros({h});
        blk.w2 = weights({h, d});
        blk.b2 = zeros({d});
    }
    m.final_ln_g = ones({d});
    m.final_ln_b = zeros({d});
    m.head_w = weights({d, 3});
    m.head_b = zeros({3});
    m.upsample = tmpl.upsample_params.template cast<T>();
    return m;
}

// ---------------------------------------------------------------------------
// Input normalization: zero mean, unit pooled variance over the visible
// vertices. Masked positions are untouched (they are never read).

struct NormStats {
    Vec3 mean;
    double scale = 1.0;
};

inline NormStats normalize_stats(const PartialMesh& pm) {
    std::size_t nv = 0;
    Vec3 mean{};
    for (std::size_t i = 0; i < pm.mask.size(); ++i)
        if (pm.mask[i]) {
            mean += pm.vertices_in[i];
            ++nv;
        }
    if (nv < 2)
        throw DegenerateInputError("normalize: degenerate input, need at least 2 visible vertices, got " +
                                   std::to_string(nv));
    mean = (1.0 / static_cast<double>(nv)) * mean;
    double var = 0.0;
    for (std::size_t i = 0; i < pm.mask.size(); ++i)
        if (pm.mask[i]) {
            const Vec3 d = pm.vertices_in[i] - mean;
            var += norm2(d);
        }
    var /= static_cast<double>(3 * nv);  // pooled over the three axes
    if (!(var > 0.0))
        throw DegenerateInputError("normalize: degenerate input, visible vertices have zero variance");
    return {mean, std::sqrt(var)};
}

inline std::pair<PartialMesh, NormStats> normalize(const PartialMesh& pm) {
    const NormStats st = normalize_stats(pm);
    PartialMesh out = pm;
    const double inv = 1.0 / st.scale;
    for (std::size_t i = 0; i < pm.mask.size(); ++i)
        if (pm.mask[i]) out.vertices_in[i] = inv * (pm.vertices_in[i] - st.mean);
    return {out, st};
}

// ---------------------------------------------------------------------------
// Forward pass.

template <class T>
struct ModelVars {
    Var<T> embed, mask_token, pos_embed;
    struct BlockVars {
        Var<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<BlockVars> blocks;
    Var<T> final_ln_g, final_ln_b, head_w, head_b, upsample;
};

// Binds every model parameter onto the tape, in params() order. Leaves
// accumulate gradients; constants are for inference.
template <class T>
ModelVars<T> bind_model(Tape<T>& tape, const MAEModel<T>& m, bool trainable) {
    auto bind = [&](const Tensor<T>& t) {
        return trainable ? tape.leaf(t) : tape.constant(t);
    };
    ModelVars<T> v;
    v.embed = bind(m.embed);
    v.mask_token = bind(m.mask_token);
    v.pos_embed = bind(m.pos_embed);
    v.blocks.resize(m.blocks.size());
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        const auto& s = m.blocks[b];
        auto& d = v.blocks[b];
        d.ln1_g = bind(s.ln1_g); d.ln1_b = bind(s.ln1_b);
        d.wq = bind(s.wq); d.bq = bind(s.bq);
        d.wk = bind(s.wk); d.bk = bind(s.bk);
        d.wv = bind(s.wv); d.bv = bind(s.bv);
        d.wo = bind(s.wo); d.bo = bind(s.bo);
        d.ln2_g = bind(s.ln2_g); d.ln2_b = bind(s.ln2_b);
        d.w1 = bind(s.w1); d.b1 = bind(s.b1);
        d.w2 = bind(s.w2); d.b2 = bind(s.b2);
    }
    v.final_ln_g = bind(m.final_ln_g);
    v.final_ln_b = bind(m.final_ln_b);
    v.head_w = bind(m.head_w);
    v.head_b = bind(m.head_b);
    v.upsample = bind(m.upsample);
    return v;
}

template <class T>
struct ForwardResult {
    Var<T> coarse;  // (N, 3) denormalized prediction over all vertices
    Var<T> full;    // (F, 3) when requested, else id == -1
    NormStats stats;
};

// Embedding (visible: position embedding of the 3D location; masked: the
// learned mask token), encoder blocks, final norm, linear head,
// denormalization with the input's stats, optional upsampling.
template <class T>
ForwardResult<T> mae_forward(const MAEModel<T>& model, const ModelVars<T>& vars, Tape<T>& tape,
                             const PartialMesh& partial, bool with_full = false) {
    if (partial.mask.size() != model.n_coarse)
        throw std::invalid_argument("forward: partial mesh has " + std::to_string(partial.mask.size()) +
                                    " vertices, model expects " + std::to_string(model.n_coarse));
    const auto [normed, stats] = normalize(partial);
    const std::size_t n = model.n_coarse;

    Tensor<T> x_in({n, 3});
    for (std::size_t i = 0; i < n; ++i)
        if (normed.mask[i]) {
            x_in.at(i, 0) = static_cast<T>(normed.vertices_in[i].x);
            x_in.at(i, 1) = static_cast<T>(normed.vertices_in[i].y);
            x_in.at(i, 2) = static_cast<T>(normed.vertices_in[i].z);
        }
    Var<T> z0 = mm(tape.constant(std::move(x_in)), vars.embed);
    Var<T> z = token_mix(z0, partial.mask, vars.mask_token, vars.pos_embed);

    const std::size_t d = model.cfg.dim;
    const std::size_t heads = model.cfg.heads;
    const std::size_t dh = d / heads;
    const T attn_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

    for (const auto& blk : vars.blocks) {
        Var<T> h = layer_norm(z, blk.ln1_g, blk.ln1_b);
        Var<T> q = add_rowvec(mm(h, blk.wq), blk.bq);
        Var<T> k = add_rowvec(mm(h, blk.wk), blk.bk);
        Var<T> v = add_rowvec(mm(h, blk.wv), blk.bv);
        // Per-head operands stay head-dim-major (dh x N): the N-length axis
        // is then contiguous in every attention product.
        std::vector<Var<T>> ctx_t;
        ctx_t.reserve(heads);
        for (std::size_t hh = 0; hh < heads; ++hh) {
            Var<T> qt = slice_cols_t(q, hh * dh, dh);
            Var<T> kt = slice_cols_t(k, hh * dh, dh);
            Var<T> vt = slice_cols_t(v, hh * dh, dh);
            ctx_t.push_back(attention_t(qt, kt, vt, attn_scale));  // (dh, N)
        }
        Var<T> proj = add_rowvec(mm(concat_cols_from_t(ctx_t), blk.wo), blk.bo);
        z = add(z, proj);
        Var<T> h2 = layer_norm(z, blk.ln2_g, blk.ln2_b);
        Var<T> m1 = gelu(add_rowvec(mm(h2, blk.w1), blk.b1));
        Var<T> m2 = add_rowvec(mm(m1, blk.w2), blk.b2);
        z = add(z, m2);
    }
    Var<T> zf = layer_norm(z, vars.final_ln_g, vars.final_ln_b);
    Var<T> y_norm = add_rowvec(mm(zf, vars.head_w), vars.head_b);

    Tensor<T> shift({std::size_t(3)});
    shift[0] = static_cast<T>(stats.mean.x);
    shift[1] = static_cast<T>(stats.mean.y);
    shift[2] = static_cast<T>(stats.mean.z);
    ForwardResult<T> out;
    out.coarse = affine_rows(y_norm, static_cast<T>(stats.scale), shift);
    out.stats = stats;
    if (with_full) out.full = mm(vars.upsample, out.coarse);
    return out;
}

template <class T>
CoarseMesh tensor_to_coarse(const Tensor<T>& t) {
    CoarseMesh c;
    c.vertices.resize(t.dim(0));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        c.vertices[i] = {static_cast<double>(t.at(i, 0)), static_cast<double>(t.at(i, 1)),
                         static_cast<double>(t.at(i, 2))};
    return c;
}

// Inference entry points (fresh tape, constant parameters).
template <class T>
CoarseMesh mae_infer_coarse(const MAEModel<T>& model, const PartialMesh& partial) {
    Tape<T> tape;
    const auto vars = bind_model(tape, model, false);
    const auto res = mae_forward(model, vars, tape, partial, false);
    return tensor_to_coarse(res.coarse.value());
}

template <class T>
std::vector<Vec3> mae_infer_full(const MAEModel<T>& model, const PartialMesh& partial) {
    Tape<T> tape;
    const auto vars = bind_model(tape, model, false);
    const auto res = mae_forward(model, vars, tape, partial, true);
    return tensor_to_coarse(res.full.value()).vertices;
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.tens parameter archive + <stem>.json header. Loading
// validates every tensor's shape against the header-derived model geometry.

template <class T>
void save_checkpoint(const std::string& stem, const MAEModel<T>& model) {
    std::vector<NamedTensor> entries;
    for (const auto& [name, t] : model.params()) entries.push_back({name, *t});
    save_archive(stem + ".tens", entries);
    nlohmann::json j;
    j["dim"] = model.cfg.dim;
    j["blocks"] = model.cfg.blocks;
    j["heads"] = model.cfg.heads;
    j["mlp_ratio"] = model.cfg.mlp_ratio;
    j["init_std"] = model.cfg.init_std;
    j["seed"] = model.cfg.seed;
    j["coarse_vertices"] = model.n_coarse;
    j["full_vertices"] = model.n_full;
    j["dtype"] = dtype_name(dtype_of<T>::value);
    j["template_hash"] = hex64(model.template_hash);
    std::ofstream f(stem + ".json", std::ios::trunc);
    if (!f) throw FormatError(stem + ".json: cannot open file for writing");
    f << j.dump(2) << "\n";
}

template <class T>
MAEModel<T> load_checkpoint(const std::string& stem) {
    std::ifstream f(stem + ".json");
    if (!f) throw FormatError(stem + ".json: cannot open file");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw FormatError(stem + ".json: parse error: " + e.what());
    }
    MAEModel<T> m;
    m.cfg.dim = j.at("dim").get<std::size_t>();
    m.cfg.blocks = j.at("blocks").get<std::size_t>();
    m.cfg.heads = j.at("heads").get<std::size_t>();
    m.cfg.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    m.cfg.init_std = j.value("init_std", 0.02);
    m.cfg.seed = j.at("seed").get<std::uint64_t>();
    m.cfg.validate();
    m.n_coarse = j.at("coarse_vertices").get<std::size_t>();
    m.n_full = j.at("full_vertices").get<std::size_t>();
    const std::string dtype = j.at("dtype").get<std::string>();
    if (dtype != dtype_name(dtype_of<T>::value))
        throw FormatError(stem + ": checkpoint dtype " + dtype + " does not match requested " +
                          dtype_name(dtype_of<T>::value));
    m.template_hash = std::stoull(j.at("template_hash").get<std::string>(), nullptr, 16);

    // Allocate the expected geometry, then overwrite from the archive with
    // strict shape checks.
    const std::size_t d = m.cfg.dim, hdim = m.cfg.mlp_ratio * d;
    m.embed = Tensor<T>({3, d});
    m.mask_token = Tensor<T>({d});
    m.pos_embed = Tensor<T>({m.n_coarse, d});
    m.blocks.resize(m.cfg.blocks);
    for (auto& blk : m.blocks) {
        blk.ln1_g = Tensor<T>({d}); blk.ln1_b = Tensor<T>({d});
        blk.wq = Tensor<T>({d, d}); blk.bq = Tensor<T>({d});
        blk.wk = Tensor<T>({d, d}); blk.bk = Tensor<T>({d});
        blk.wv = Tensor<T>({d, d}); blk.bv = Tensor<T>({d});
        blk.wo = Tensor<T>({d, d}); blk.bo = Tensor<T>({d});
        blk.ln2_g = Tensor<T>({d}); blk.ln2_b = Tensor<T>({d});
        blk.w1 = Tensor<T>({d, hdim}); blk.b1 = Tensor<T>({hdim});
        blk.w2 = Tensor<T>({hdim, d}); blk.b2 = Tensor<T>({d});
    }
    m.final_ln_g = Tensor<T>({d});
    m.final_ln_b = Tensor<T>({d});
    m.head_w = Tensor<T>({d, 3});
    m.head_b = Tensor<T>({3});
    m.upsample = Tensor<T>({m.n_full, m.n_coarse});

    const auto entries = load_archive(stem + ".tens");
    for (auto& [name, slot] : m.params_mut()) {
        const Tensor<T>& stored = archive_get<T>(entries, name, stem + ".tens");
        if (!stored.same_shape(*slot))
            throw FormatError(stem + ": parameter \"" + name + "\" has shape " +
                              shape_str(stored.shape()) + ", header implies " +
                              shape_str(slot->shape()));
        *slot = stored;
    }
    return m;
}

}  // namespace meshrecover
