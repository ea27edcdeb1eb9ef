#pragma once

// ViT-style encoder: patch embedding + class token + learned positions,
// pre-norm transformer blocks, final norm, tanh pooler over the class
// token. Key/value projections take an optional low-rank delta
// W x + scale * B (A x) from an active adapter.

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lorafuse/common.hpp"
#include "lorafuse/container.hpp"
#include "lorafuse/lora.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

struct BackboneConfig {
    int image_size = 224;
    int patch_size = 16;
    int channels = 3;
    int hidden_dim = 768;
    int num_layers = 12;
    int num_heads = 12;
    int mlp_dim = 3072;

    int num_patches() const {
        int side = image_size / patch_size;
        return side * side;
    }
    int patch_dim() const { return channels * patch_size * patch_size; }
    int seq_len() const { return num_patches() + 1; }  // + class token
    int head_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || channels <= 0 || hidden_dim <= 0 ||
            num_layers <= 0 || num_heads <= 0 || mlp_dim <= 0)
            throw ConfigError("backbone: all config fields must be positive");
        if (image_size % patch_size != 0)
            throw ConfigError("backbone: image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (hidden_dim % num_heads != 0)
            throw ConfigError("backbone: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
    }

    static BackboneConfig desk_scale() {
        BackboneConfig c;
        c.image_size = 16;
        c.patch_size = 4;
        c.channels = 1;
        c.hidden_dim = 32;
        c.num_layers = 2;
        c.num_heads = 2;
        c.mlp_dim = 64;
        return c;
    }
};

// Weight matrices are stored [out x in]; forward multiplies row-major token
// matrices against cached transposes. Immutable after assembly.
struct BackboneWeights {
    BackboneConfig config;
    // ordered by name so serialization and checksums are canonical
    std::map<std::string, TensorPtr> params;
    std::map<std::string, TensorPtr> transposed;  // cache, not serialized

    const TensorPtr& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw LookupError("backbone: no parameter \"" + name + "\"");
        return it->second;
    }
    const TensorPtr& t(const std::string& name) const {
        auto it = transposed.find(name);
        if (it == transposed.end()) throw LookupError("backbone: no transposed cache for \"" + name + "\"");
        return it->second;
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : params) {
            h = fnv1a(name.data(), name.size(), h);
            h = fnv1a(t->data, h);
        }
        return h;
    }
};

namespace detail {

inline std::map<std::string, std::vector<int>> backbone_schema(const BackboneConfig& c) {
    std::map<std::string, std::vector<int>> s;
    s["embed.patch.weight"] = {c.hidden_dim, c.patch_dim()};
    s["embed.patch.bias"] = {c.hidden_dim};
    s["embed.cls_token"] = {1, c.hidden_dim};
    s["embed.pos"] = {c.seq_len(), c.hidden_dim};
    for (int i = 0; i < c.num_layers; ++i) {
        const std::string p = "encoder." + std::to_string(i) + ".";
        s[p + "ln1.gain"] = {c.hidden_dim};
        s[p + "ln1.bias"] = {c.hidden_dim};
        for (const char* proj : {"query", "key", "value", "out"}) {
            s[p + "attn." + proj + ".weight"] = {c.hidden_dim, c.hidden_dim};
            s[p + "attn." + proj + ".bias"] = {c.hidden_dim};
        }
        s[p + "ln2.gain"] = {c.hidden_dim};
        s[p + "ln2.bias"] = {c.hidden_dim};
        s[p + "mlp.fc1.weight"] = {c.mlp_dim, c.hidden_dim};
        s[p + "mlp.fc1.bias"] = {c.mlp_dim};
        s[p + "mlp.fc2.weight"] = {c.hidden_dim, c.mlp_dim};
        s[p + "mlp.fc2.bias"] = {c.hidden_dim};
    }
    s["final_norm.gain"] = {c.hidden_dim};
    s["final_norm.bias"] = {c.hidden_dim};
    s["pooler.dense.weight"] = {c.hidden_dim, c.hidden_dim};
    s["pooler.dense.bias"] = {c.hidden_dim};
    return s;
}

inline void build_transpose_cache(BackboneWeights& w) {
    for (const auto& [name, t] : w.params)
        if (t->shape.size() == 2 && name.ends_with(".weight")) w.transposed[name] = transpose(t);
}

}  // namespace detail

inline BackboneWeights init_backbone(const BackboneConfig& config, uint64_t seed) {
    config.validate();
    BackboneWeights w;
    w.config = config;
    Rng rng(static_cast<Rng::result_type>(seed));
    for (const auto& [name, shape] : detail::backbone_schema(config)) {
        auto t = zeros(shape);
        if (name.ends_with(".bias")) {
            // zeros
        } else if (name.ends_with("gain")) {
            std::fill(t->data.begin(), t->data.end(), 1.0f);
        } else {
            for (auto& v : t->data) v = trunc_normal(rng, 0.0f, 0.02f);
        }
        w.params[name] = t;
    }
    detail::build_transpose_cache(w);
    return w;
}

inline void save_backbone(const BackboneWeights& w, const std::filesystem::path& path) {
    Container c;
    c.metadata = {{"format", "backbone-v1"},
                  {"image_size", w.config.image_size},
                  {"patch_size", w.config.patch_size},
                  {"channels", w.config.channels},
                  {"hidden_dim", w.config.hidden_dim},
                  {"num_layers", w.config.num_layers},
                  {"num_heads", w.config.num_heads},
                  {"mlp_dim", w.config.mlp_dim}};
    for (const auto& [name, t] : w.params) c.tensors[name] = {t->shape, t->data};
    save_container(c, path);
}

inline BackboneWeights load_backbone(const std::filesystem::path& path) {
    Container c = load_container(path);
    if (!c.metadata.contains("format") || c.metadata["format"] != "backbone-v1")
        throw FormatError("backbone " + path.string() + ": metadata format is not backbone-v1");
    BackboneWeights w;
    try {
        w.config.image_size = c.metadata.at("image_size").get<int>();
        w.config.patch_size = c.metadata.at("patch_size").get<int>();
        w.config.channels = c.metadata.at("channels").get<int>();
        w.config.hidden_dim = c.metadata.at("hidden_dim").get<int>();
        w.config.num_layers = c.metadata.at("num_layers").get<int>();
        w.config.num_heads = c.metadata.at("num_heads").get<int>();
        w.config.mlp_dim = c.metadata.at("mlp_dim").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("backbone " + path.string() + ": bad metadata: " + e.what());
    }
    w.config.validate();
    for (const auto& [name, shape] : detail::backbone_schema(w.config)) {
        const NamedTensor& t = require_tensor(c, name, shape);
        w.params[name] = make_tensor(t.shape, t.data);
    }
    detail::build_transpose_cache(w);
    return w;
}

// Non-overlapping patches, scanned top-left to bottom-right row by row;
// within a patch: channel-major, then pixel rows.
inline TensorPtr patchify(const std::vector<float>& image, const BackboneConfig& c) {
    const size_t expect = static_cast<size_t>(c.channels) * c.image_size * c.image_size;
    if (image.size() != expect)
        throw ConfigError("patchify: image has " + std::to_string(image.size()) +
                          " values, config expects " + std::to_string(expect));
    const int side = c.image_size / c.patch_size;
    const int ps = c.patch_size;
    auto out = zeros({c.num_patches(), c.patch_dim()});
    for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
            const int patch = py * side + px;
            int idx = 0;
            for (int ch = 0; ch < c.channels; ++ch)
                for (int y = 0; y < ps; ++y)
                    for (int x = 0; x < ps; ++x) {
                        const int iy = py * ps + y, ix = px * ps + x;
                        out->data[patch * c.patch_dim() + idx++] =
                            image[(static_cast<size_t>(ch) * c.image_size + iy) * c.image_size + ix];
                    }
        }
    return out;
}

inline size_t& backbone_forward_count() {
    thread_local size_t count = 0;
    return count;
}

namespace detail {

inline void check_adapter(const BackboneWeights& w, const LoraAdapter& a) {
    if (a.hidden_dim != w.config.hidden_dim || a.num_layers != w.config.num_layers)
        throw CompatError("adapter \"" + a.task_name + "\" built for d=" +
                          std::to_string(a.hidden_dim) + ", L=" + std::to_string(a.num_layers) +
                          "; backbone has d=" + std::to_string(w.config.hidden_dim) +
                          ", L=" + std::to_string(w.config.num_layers));
    for (const auto& [key, fp] : a.factors) {
        const auto& [A, B] = fp;
        if (A->shape[1] != w.config.hidden_dim || B->shape[0] != w.config.hidden_dim)
            throw CompatError("adapter \"" + a.task_name + "\": factor shapes at layer " +
                              std::to_string(key.first) + " projection " +
                              projection_name(key.second) + " do not match hidden_dim " +
                              std::to_string(w.config.hidden_dim));
    }
}

// base projection plus optional low-rank delta
inline TensorPtr project(const BackboneWeights& w, const TensorPtr& h, int layer,
                         const char* proj_name, const LoraAdapter* adapter, Projection proj) {
    const std::string p = "encoder." + std::to_string(layer) + ".attn." + proj_name + ".";
    TensorPtr out = add_rowvec(matmul(h, w.t(p + "weight")), w.at(p + "bias"));
    if (adapter && adapter->targets_pair(layer, proj)) {
        const auto& [A, B] = adapter->pair(layer, proj);
        TensorPtr ax = matmul(h, transpose(A));        // seq x r
        TensorPtr delta = matmul(ax, transpose(B));    // seq x d
        out = add(out, scale(delta, adapter->config.scale()));
    }
    return out;
}

}  // namespace detail

// One image through the encoder; returns the pooled feature row [1 x d].
inline TensorPtr encode_image(const BackboneWeights& w, const std::vector<float>& image,
                              const LoraAdapter* adapter) {
    const BackboneConfig& c = w.config;
    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(c.head_dim()));
    TensorPtr x = matmul(patchify(image, c), w.t("embed.patch.weight"));
    x = add_rowvec(x, w.at("embed.patch.bias"));
    x = concat_rows({w.at("embed.cls_token"), x});
    x = add(x, w.at("embed.pos"));
    const int dh = c.head_dim();
    for (int layer = 0; layer < c.num_layers; ++layer) {
        const std::string p = "encoder." + std::to_string(layer) + ".";
        TensorPtr h = layer_norm(x, w.at(p + "ln1.gain"), w.at(p + "ln1.bias"));
        TensorPtr q = detail::project(w, h, layer, "query", nullptr, Projection::Key);
        TensorPtr k = detail::project(w, h, layer, "key", adapter, Projection::Key);
        TensorPtr v = detail::project(w, h, layer, "value", adapter, Projection::Value);
        std::vector<TensorPtr> heads;
        heads.reserve(c.num_heads);
        for (int hd = 0; hd < c.num_heads; ++hd) {
            TensorPtr qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            TensorPtr kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            TensorPtr vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            TensorPtr attn = softmax_rows(scale(matmul(qh, transpose(kh)), attn_scale));
            heads.push_back(matmul(attn, vh));
        }
        TensorPtr merged = c.num_heads == 1 ? heads[0] : concat_cols(heads);
        TensorPtr attn_out = add_rowvec(matmul(merged, w.t(p + "attn.out.weight")),
                                        w.at(p + "attn.out.bias"));
        x = add(x, attn_out);
        TensorPtr h2 = layer_norm(x, w.at(p + "ln2.gain"), w.at(p + "ln2.bias"));
        TensorPtr m = gelu(add_rowvec(matmul(h2, w.t("encoder." + std::to_string(layer) +
                                                     ".mlp.fc1.weight")),
                                      w.at(p + "mlp.fc1.bias")));
        TensorPtr m2 = add_rowvec(matmul(m, w.t(p + "mlp.fc2.weight")), w.at(p + "mlp.fc2.bias"));
        x = add(x, m2);
    }
    x = layer_norm(x, w.at("final_norm.gain"), w.at("final_norm.bias"));
    TensorPtr cls = slice_rows(x, 0, 1);
    return tanh_op(add_rowvec(matmul(cls, w.t("pooler.dense.weight")), w.at("pooler.dense.bias")));
}

// Batch forward; returns pooled features [batch x d].
inline TensorPtr backbone_forward(const BackboneWeights& w,
                                  const std::vector<std::vector<float>>& images,
                                  const LoraAdapter* adapter = nullptr) {
    if (images.empty()) throw DataError("backbone_forward: empty batch");
    if (adapter) detail::check_adapter(w, *adapter);
    ++backbone_forward_count();
    std::vector<TensorPtr> rows;
    rows.reserve(images.size());
    for (const auto& img : images) rows.push_back(encode_image(w, img, adapter));
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

}  // namespace lorafuse
