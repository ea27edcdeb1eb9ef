#pragma once

// Low-rank adapters: per (layer, projection) factor pairs A (r x d) and
// B (d x r), applied to the key and value projections as
// W x + (alpha / r) * B (A x). B starts at zero so a fresh adapter is a
// no-op on the backbone.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lorafuse/common.hpp"
#include "lorafuse/container.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

enum class Projection { Key, Value };

inline const char* projection_name(Projection p) {
    return p == Projection::Key ? "key" : "value";
}

inline Projection projection_from_name(const std::string& s) {
    if (s == "key") return Projection::Key;
    if (s == "value") return Projection::Value;
    throw FormatError("unknown projection \"" + s + "\"");
}

struct LoraConfig {
    int rank = 16;
    float alpha = 16.0f;  // default: alpha == rank, scale 1
    std::vector<Projection> targets = {Projection::Key, Projection::Value};

    float scale() const { return alpha / static_cast<float>(rank); }

    void validate(int hidden_dim) const {
        if (rank < 1) throw ConfigError("lora: rank must be >= 1");
        if (alpha <= 0.0f) throw ConfigError("lora: alpha must be positive");
        if (targets.empty()) throw ConfigError("lora: target projections must be non-empty");
        if (rank > hidden_dim)
            throw ConfigError("lora: rank " + std::to_string(rank) + " exceeds hidden_dim " +
                              std::to_string(hidden_dim));
    }
};

struct LoraAdapter {
    LoraConfig config;
    std::string task_name;
    int hidden_dim = 0;
    int num_layers = 0;
    // keyed by (layer, projection); A: rank x d, B: d x rank
    std::map<std::pair<int, Projection>, std::pair<TensorPtr, TensorPtr>> factors;

    bool targets_pair(int layer, Projection p) const {
        return factors.count({layer, p}) != 0;
    }

    const std::pair<TensorPtr, TensorPtr>& pair(int layer, Projection p) const {
        auto it = factors.find({layer, p});
        if (it == factors.end())
            throw LookupError("adapter \"" + task_name + "\": layer " + std::to_string(layer) +
                              " projection " + projection_name(p) + " is not targeted");
        return it->second;
    }
};

inline LoraAdapter init_adapter(const LoraConfig& config, int hidden_dim, int num_layers,
                                const std::string& task_name, uint64_t seed) {
    config.validate(hidden_dim);
    LoraAdapter a;
    a.config = config;
    a.task_name = task_name;
    a.hidden_dim = hidden_dim;
    a.num_layers = num_layers;
    Rng rng(static_cast<Rng::result_type>(seed));
    for (int layer = 0; layer < num_layers; ++layer)
        for (Projection p : config.targets) {
            auto A = zeros({config.rank, hidden_dim});
            for (auto& v : A->data) v = trunc_normal(rng, 0.0f, 0.02f);
            auto B = zeros({hidden_dim, config.rank});
            a.factors[{layer, p}] = {A, B};
        }
    return a;
}

// Dense delta (alpha / r) * B * A for one targeted pair; d x d.
inline std::vector<float> effective_delta(const LoraAdapter& a, int layer, Projection p) {
    const auto& [A, B] = a.pair(layer, p);
    const int d = a.hidden_dim, r = a.config.rank;
    const float s = a.config.scale();
    std::vector<float> delta(static_cast<size_t>(d) * d, 0.0f);
    for (int i = 0; i < d; ++i)
        for (int q = 0; q < r; ++q) {
            const float bv = B->data[i * r + q];
            if (bv == 0.0f) continue;
            for (int j = 0; j < d; ++j) delta[i * d + j] += s * bv * A->data[q * d + j];
        }
    return delta;
}

inline size_t param_count(const LoraAdapter& a) {
    size_t n = 0;
    for (const auto& [key, fp] : a.factors) n += fp.first->numel() + fp.second->numel();
    return n;
}

inline void save_adapter(const LoraAdapter& a, const std::filesystem::path& path) {
    Container c;
    nlohmann::json targets = nlohmann::json::array();
    for (Projection p : a.config.targets) targets.push_back(projection_name(p));
    c.metadata = {{"format", "lora-v1"},
                  {"task_name", a.task_name},
                  {"rank", a.config.rank},
                  {"alpha", a.config.alpha},
                  {"targets", targets},
                  {"num_layers", a.num_layers},
                  {"hidden_dim", a.hidden_dim}};
    for (const auto& [key, fp] : a.factors) {
        const std::string base = "layer." + std::to_string(key.first) + "." +
                                 projection_name(key.second) + ".";
        c.tensors[base + "A"] = {fp.first->shape, fp.first->data};
        c.tensors[base + "B"] = {fp.second->shape, fp.second->data};
    }
    save_container(c, path);
}

inline LoraAdapter load_adapter(const std::filesystem::path& path) {
    Container c = load_container(path);
    const auto& md = c.metadata;
    if (!md.contains("format") || md["format"] != "lora-v1")
        throw FormatError("adapter " + path.string() + ": metadata format is not lora-v1");
    LoraAdapter a;
    try {
        a.task_name = md.at("task_name").get<std::string>();
        a.config.rank = md.at("rank").get<int>();
        a.config.alpha = md.at("alpha").get<float>();
        a.hidden_dim = md.at("hidden_dim").get<int>();
        a.num_layers = md.at("num_layers").get<int>();
        a.config.targets.clear();
        for (const auto& t : md.at("targets")) a.config.targets.push_back(projection_from_name(t));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("adapter " + path.string() + ": bad metadata: " + e.what());
    }
    a.config.validate(a.hidden_dim);
    const int r = a.config.rank, d = a.hidden_dim;
    for (int layer = 0; layer < a.num_layers; ++layer)
        for (Projection p : a.config.targets) {
            const std::string base = "layer." + std::to_string(layer) + "." + projection_name(p) + ".";
            const NamedTensor& A = require_tensor(c, base + "A");
            const NamedTensor& B = require_tensor(c, base + "B");
            if (A.shape.size() != 2 || A.shape[1] != d)
                throw FormatError("adapter: tensor " + base + "A shape " + shape_str(A.shape) +
                                  " disagrees with hidden_dim " + std::to_string(d));
            if (A.shape[0] != r)
                throw FormatError("adapter: tensor " + base + "A has rank " +
                                  std::to_string(A.shape[0]) + ", metadata says " + std::to_string(r));
            if (B.shape != std::vector<int>{d, r})
                throw FormatError("adapter: tensor " + base + "B shape " + shape_str(B.shape) +
                                  ", expected " + shape_str({d, r}));
            a.factors[{layer, p}] = {make_tensor(A.shape, A.data), make_tensor(B.shape, B.data)};
        }
    const size_t expected = param_count(a);
    if (expected != c.total_floats())
        throw FormatError("adapter: file carries " + std::to_string(c.total_floats()) +
                          " floats, expected " + std::to_string(expected));
    return a;
}

}  // namespace lorafuse
