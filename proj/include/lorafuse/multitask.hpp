#pragma once

// Per-task heads (two-layer MLP over the pooled backbone feature) and the
// assembled multi-task model: one backbone, one optional merged adapter,
// one head per task. Evaluating several tasks on a batch runs the
// backbone once.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lorafuse/backbone.hpp"
#include "lorafuse/common.hpp"
#include "lorafuse/container.hpp"
#include "lorafuse/lora.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

enum class TaskKind { Classification, Regression };

inline const char* task_kind_name(TaskKind k) {
    return k == TaskKind::Classification ? "classification" : "regression";
}

inline TaskKind task_kind_from_name(const std::string& s) {
    if (s == "classification") return TaskKind::Classification;
    if (s == "regression") return TaskKind::Regression;
    throw FormatError("unknown task kind \"" + s + "\"");
}

struct TaskHead {
    std::string task_name;
    TaskKind kind = TaskKind::Classification;
    int out_dim = 0;  // num_classes or regression width
    TensorPtr w1, b1;  // hidden x d, hidden
    TensorPtr w2, b2;  // out x hidden, out

    int in_dim() const { return w1->shape[1]; }
    int hidden_dim() const { return w1->shape[0]; }
    size_t param_floats() const {
        return w1->numel() + b1->numel() + w2->numel() + b2->numel();
    }
};

inline TaskHead init_head(const std::string& task_name, TaskKind kind, int in_dim, int out_dim,
                          int hidden, uint64_t seed) {
    if (in_dim <= 0 || out_dim <= 0 || hidden <= 0)
        throw ConfigError("head: dimensions must be positive");
    TaskHead h;
    h.task_name = task_name;
    h.kind = kind;
    h.out_dim = out_dim;
    Rng rng(static_cast<Rng::result_type>(seed));
    h.w1 = zeros({hidden, in_dim});
    for (auto& v : h.w1->data) v = trunc_normal(rng, 0.0f, 0.02f);
    h.b1 = zeros({hidden});
    h.w2 = zeros({out_dim, hidden});
    for (auto& v : h.w2->data) v = trunc_normal(rng, 0.0f, 0.02f);
    h.b2 = zeros({out_dim});
    return h;
}

// logits / raw values: W2 relu(W1 f + b1) + b2
inline TensorPtr head_forward(const TaskHead& h, const TensorPtr& features) {
    if (features->shape.size() != 2 || features->shape[1] != h.in_dim())
        throw ShapeError("head \"" + h.task_name + "\": feature width " +
                         std::to_string(features->cols()) + " does not match " +
                         std::to_string(h.in_dim()));
    TensorPtr hid = relu(add_rowvec(matmul(features, transpose(h.w1)), h.b1));
    return add_rowvec(matmul(hid, transpose(h.w2)), h.b2);
}

inline TensorPtr task_loss(TaskKind kind, const TensorPtr& predictions,
                           const std::vector<int>& class_targets,
                           const TensorPtr& regression_targets) {
    if (kind == TaskKind::Classification) return cross_entropy_loss(predictions, class_targets);
    return l1_loss(predictions, regression_targets);
}

inline void save_head(const TaskHead& h, const std::filesystem::path& path) {
    Container c;
    c.metadata = {{"format", "head-v1"},
                  {"task_name", h.task_name},
                  {"kind", task_kind_name(h.kind)},
                  {"out_dim", h.out_dim},
                  {"in_dim", h.in_dim()},
                  {"hidden", h.hidden_dim()}};
    c.tensors["fc1.weight"] = {h.w1->shape, h.w1->data};
    c.tensors["fc1.bias"] = {h.b1->shape, h.b1->data};
    c.tensors["fc2.weight"] = {h.w2->shape, h.w2->data};
    c.tensors["fc2.bias"] = {h.b2->shape, h.b2->data};
    save_container(c, path);
}

inline TaskHead load_head(const std::filesystem::path& path) {
    Container c = load_container(path);
    if (!c.metadata.contains("format") || c.metadata["format"] != "head-v1")
        throw FormatError("head " + path.string() + ": metadata format is not head-v1");
    TaskHead h;
    int in_dim, hidden;
    try {
        h.task_name = c.metadata.at("task_name").get<std::string>();
        h.kind = task_kind_from_name(c.metadata.at("kind").get<std::string>());
        h.out_dim = c.metadata.at("out_dim").get<int>();
        in_dim = c.metadata.at("in_dim").get<int>();
        hidden = c.metadata.at("hidden").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("head " + path.string() + ": bad metadata: " + e.what());
    }
    const NamedTensor& w1 = require_tensor(c, "fc1.weight", {hidden, in_dim});
    const NamedTensor& b1 = require_tensor(c, "fc1.bias", {hidden});
    const NamedTensor& w2 = require_tensor(c, "fc2.weight", {h.out_dim, hidden});
    const NamedTensor& b2 = require_tensor(c, "fc2.bias", {h.out_dim});
    h.w1 = make_tensor(w1.shape, w1.data);
    h.b1 = make_tensor(b1.shape, b1.data);
    h.w2 = make_tensor(w2.shape, w2.data);
    h.b2 = make_tensor(b2.shape, b2.data);
    return h;
}

struct MultiTaskModel {
    BackboneWeights backbone;
    std::optional<LoraAdapter> adapter;
    std::map<std::string, TaskHead> heads;

    void add_head(TaskHead h) {
        if (h.in_dim() != backbone.config.hidden_dim)
            throw CompatError("head \"" + h.task_name + "\" input width " +
                              std::to_string(h.in_dim()) + " does not match backbone hidden_dim " +
                              std::to_string(backbone.config.hidden_dim));
        if (heads.count(h.task_name))
            throw ConfigError("duplicate task \"" + h.task_name + "\"");
        heads.emplace(h.task_name, std::move(h));
    }
};

struct Prediction {
    std::string task_name;
    TaskKind kind;
    std::vector<int> classes;                 // argmax, classification only
    std::vector<std::vector<float>> probs;    // per-sample, classification only
    std::vector<std::vector<float>> values;   // per-sample, regression only
};

namespace detail {

inline Prediction apply_head(const TaskHead& head, const TensorPtr& features) {
    Prediction pred;
    pred.task_name = head.task_name;
    pred.kind = head.kind;
    TensorPtr out = head_forward(head, features);
    const int m = out->shape[0], k = out->shape[1];
    if (head.kind == TaskKind::Classification) {
        TensorPtr probs = softmax_rows(out);
        for (int i = 0; i < m; ++i) {
            const float* row = probs->data.data() + i * k;
            pred.probs.emplace_back(row, row + k);
            pred.classes.push_back(
                static_cast<int>(std::max_element(row, row + k) - row));
        }
    } else {
        for (int i = 0; i < m; ++i) {
            const float* row = out->data.data() + i * k;
            pred.values.emplace_back(row, row + k);
        }
    }
    return pred;
}

}  // namespace detail

// One backbone pass, one head pass per requested task.
inline std::vector<Prediction> predict(const MultiTaskModel& model,
                                       const std::vector<std::string>& task_names,
                                       const std::vector<std::vector<float>>& images) {
    for (const auto& name : task_names)
        if (!model.heads.count(name)) throw LookupError("predict: unknown task \"" + name + "\"");
    TensorPtr features =
        backbone_forward(model.backbone, images,
                         model.adapter ? &*model.adapter : nullptr);
    std::vector<Prediction> out;
    out.reserve(task_names.size());
    for (const auto& name : task_names)
        out.push_back(detail::apply_head(model.heads.at(name), features));
    return out;
}

inline Prediction predict(const MultiTaskModel& model, const std::string& task_name,
                          const std::vector<std::vector<float>>& images) {
    return predict(model, std::vector<std::string>{task_name}, images)[0];
}

// ---- multitask bundle: directory with backbone, optional adapter, heads ----

inline void save_bundle(const MultiTaskModel& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_backbone(model.backbone, dir / "backbone.ltns");
    nlohmann::json manifest;
    manifest["format"] = "bundle-v1";
    manifest["backbone"] = "backbone.ltns";
    if (model.adapter) {
        save_adapter(*model.adapter, dir / "adapter.ltns");
        manifest["adapter"] = "adapter.ltns";
    }
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& [name, head] : model.heads) {
        const std::string file = "head." + name + ".ltns";
        save_head(head, dir / file);
        tasks.push_back({{"task", name}, {"kind", task_kind_name(head.kind)}, {"file", file}});
    }
    manifest["tasks"] = tasks;
    std::filesystem::path tmp = dir / "bundle.json.tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        f << manifest.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, dir / "bundle.json");
}

inline MultiTaskModel load_bundle(const std::filesystem::path& dir) {
    std::ifstream f(dir / "bundle.json");
    if (!f) throw DataError("bundle: cannot open " + (dir / "bundle.json").string());
    nlohmann::json manifest;
    try {
        f >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bundle: bad manifest JSON: " + std::string(e.what()));
    }
    MultiTaskModel model;
    model.backbone = load_backbone(dir / manifest.at("backbone").get<std::string>());
    if (manifest.contains("adapter"))
        model.adapter = load_adapter(dir / manifest.at("adapter").get<std::string>());
    for (const auto& t : manifest.at("tasks"))
        model.add_head(load_head(dir / t.at("file").get<std::string>()));
    return model;
}

}  // namespace lorafuse
