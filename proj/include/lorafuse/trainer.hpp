#pragma once

// Per-task training of (adapter + head) or head only, with Adam on a
// frozen backbone. "Trained until converged" is realized as early
// stopping on the validation metric with a patience window, restoring
// the best snapshot.

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/backbone.hpp"
#include "lorafuse/common.hpp"
#include "lorafuse/data.hpp"
#include "lorafuse/lora.hpp"
#include "lorafuse/metrics.hpp"
#include "lorafuse/multitask.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

enum class TrainMode { Lora, HeadOnly };

struct TrainConfig {
    TrainMode mode = TrainMode::Lora;
    int rank = 16;
    float alpha = 16.0f;  // alpha == rank by default
    float learning_rate = 1e-3f;
    int batch_size = 32;
    int max_epochs = 50;
    int patience = 10;
    int head_hidden = 512;
    uint64_t seed = 0;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;

    void validate() const {
        if (learning_rate <= 0.0f) throw ConfigError("train: learning_rate must be positive");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
        if (batch_size < 1 || max_epochs < 1) throw ConfigError("train: bad batch/epoch counts");
    }
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_metric = 0.0;
};

struct TrainReport {
    std::string task_name;
    std::string mode;
    std::string val_metric_name;
    bool higher_is_better = false;
    std::vector<EpochStats> epochs;
    int best_epoch = 0;
    double best_val_metric = 0.0;
    std::map<std::string, double> test_metrics;
    size_t trained_param_count = 0;
    double wall_time_s = 0.0;
    uint64_t backbone_checksum_before = 0;
    uint64_t backbone_checksum_after = 0;

    nlohmann::json to_json() const {
        nlohmann::json eps = nlohmann::json::array();
        for (const auto& e : epochs)
            eps.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss},
                           {"val_metric", e.val_metric}});
        return {{"task_name", task_name},
                {"mode", mode},
                {"val_metric", val_metric_name},
                {"higher_is_better", higher_is_better},
                {"epochs", eps},
                {"best_epoch", best_epoch},
                {"best_val_metric", best_val_metric},
                {"test_metrics", test_metrics},
                {"trained_param_count", trained_param_count},
                // wall time deliberately left out: reports are compared
                // byte-for-byte across reruns
                {"backbone_checksum_before", backbone_checksum_before},
                {"backbone_checksum_after", backbone_checksum_after}};
    }
};

// ---- Adam -----------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<float>> m, v;

    void init(const std::vector<TensorPtr>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p->numel(), 0.0f);
            v.emplace_back(p->numel(), 0.0f);
        }
    }
};

// Standard Adam with bias correction; t is 1-based.
inline void adam_step(const std::vector<TensorPtr>& params, AdamState& state, long t,
                      const TrainConfig& cfg) {
    if (t < 1) throw ConfigError("adam: step index must be >= 1");
    if (state.m.size() != params.size()) throw ConfigError("adam: state/param count mismatch");
    const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(t));
    const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        p.ensure_grad();
        if (state.m[i].size() != p.numel()) throw ShapeError("adam: state shape mismatch");
        for (size_t j = 0; j < p.numel(); ++j) {
            const float g = p.grad[j];
            if (std::isnan(g)) throw NumericError("adam: NaN gradient");
            state.m[i][j] = cfg.beta1 * state.m[i][j] + (1.0f - cfg.beta1) * g;
            state.v[i][j] = cfg.beta2 * state.v[i][j] + (1.0f - cfg.beta2) * g * g;
            const float mhat = state.m[i][j] / bc1;
            const float vhat = state.v[i][j] / bc2;
            p.data[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// ---- training loop --------------------------------------------------------

struct TrainResult {
    std::optional<LoraAdapter> adapter;
    TaskHead head;
    TrainReport report;
};

namespace detail {

struct MaterializedSplit {
    std::vector<std::vector<float>> images;
    std::vector<int> class_targets;
    std::vector<std::vector<float>> value_targets;
};

inline MaterializedSplit materialize(const DatasetManifest& m, const std::string& split,
                                     const ImageLoadConfig& cfg,
                                     const std::filesystem::path& base_dir) {
    MaterializedSplit out;
    for (size_t i : m.split_indices(split)) {
        const auto& r = m.records[i];
        out.images.push_back(load_record_image(r, cfg, base_dir));
        if (m.kind == TaskKind::Classification)
            out.class_targets.push_back(r.class_target);
        else
            out.value_targets.push_back(r.value_target);
    }
    return out;
}

inline TensorPtr value_batch(const std::vector<std::vector<float>>& targets,
                             const std::vector<size_t>& idx) {
    const int w = static_cast<int>(targets[idx[0]].size());
    std::vector<float> data;
    data.reserve(idx.size() * w);
    for (size_t i : idx) data.insert(data.end(), targets[i].begin(), targets[i].end());
    return make_tensor({static_cast<int>(idx.size()), w}, std::move(data));
}

// Validation / test metric over a split using the current parameters.
inline std::map<std::string, double> eval_split(const BackboneWeights& backbone,
                                                const LoraAdapter* adapter, const TaskHead& head,
                                                const DatasetManifest& manifest,
                                                const MaterializedSplit& split, int batch_size) {
    std::map<std::string, double> out;
    if (split.images.empty()) throw DataError("eval: empty split");
    std::vector<int> pred_classes;
    std::vector<std::vector<float>> pred_values;
    for (size_t start = 0; start < split.images.size(); start += batch_size) {
        const size_t end = std::min(split.images.size(), start + batch_size);
        std::vector<std::vector<float>> batch(split.images.begin() + start,
                                              split.images.begin() + end);
        TensorPtr features = backbone_forward(backbone, batch, adapter);
        TensorPtr logits = head_forward(head, features);
        const int k = logits->shape[1];
        for (size_t i = 0; i < batch.size(); ++i) {
            const float* row = logits->data.data() + i * k;
            if (head.kind == TaskKind::Classification)
                pred_classes.push_back(static_cast<int>(std::max_element(row, row + k) - row));
            else
                pred_values.emplace_back(row, row + k);
        }
    }
    if (head.kind == TaskKind::Classification) {
        out["accuracy"] = accuracy(pred_classes, split.class_targets);
        out["macro_f1"] = macro_f1(pred_classes, split.class_targets, head.out_dim);
    } else {
        std::vector<float> flat_pred, flat_true;
        for (const auto& v : pred_values) flat_pred.insert(flat_pred.end(), v.begin(), v.end());
        for (const auto& v : split.value_targets) flat_true.insert(flat_true.end(), v.begin(), v.end());
        out["rmse"] = rmse(flat_pred, flat_true);
        if (manifest.is_landmark())
            out["nme"] = nme(pred_values, split.value_targets, manifest.left_eye_idx,
                             manifest.right_eye_idx);
    }
    return out;
}

}  // namespace detail

inline TrainResult train_task(const DatasetManifest& manifest, const BackboneWeights& backbone,
                              const TrainConfig& config,
                              const std::filesystem::path& data_dir = {}) {
    config.validate();
    manifest.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const uint64_t checksum_before = backbone.checksum();

    const ImageLoadConfig img_cfg = ImageLoadConfig::for_backbone(backbone.config);
    detail::MaterializedSplit train = detail::materialize(manifest, "train", img_cfg, data_dir);
    detail::MaterializedSplit val = detail::materialize(manifest, "val", img_cfg, data_dir);
    detail::MaterializedSplit test = detail::materialize(manifest, "test", img_cfg, data_dir);
    if (train.images.empty() || val.images.empty() || test.images.empty())
        throw DataError("train: task \"" + manifest.task_name + "\" has an empty split");

    TrainResult res;
    if (config.mode == TrainMode::Lora) {
        LoraConfig lc;
        lc.rank = config.rank;
        lc.alpha = config.alpha;
        res.adapter = init_adapter(lc, backbone.config.hidden_dim, backbone.config.num_layers,
                                   manifest.task_name, config.seed);
    }
    res.head = init_head(manifest.task_name, manifest.kind, backbone.config.hidden_dim,
                         manifest.target_width(), config.head_hidden, config.seed + 1);

    std::vector<TensorPtr> params = {res.head.w1, res.head.b1, res.head.w2, res.head.b2};
    if (res.adapter)
        for (auto& [key, fp] : res.adapter->factors) {
            params.push_back(fp.first);
            params.push_back(fp.second);
        }
    for (auto& p : params) p->requires_grad = true;

    AdamState adam;
    adam.init(params);

    // head_only never perturbs the features; compute them once
    std::optional<std::vector<std::vector<float>>> frozen_features;
    if (config.mode == TrainMode::HeadOnly) {
        frozen_features.emplace();
        for (const auto& img : train.images) {
            TensorPtr f = backbone_forward(backbone, {img}, nullptr);
            frozen_features->push_back(f->data);
        }
    }

    TrainReport& rep = res.report;
    rep.task_name = manifest.task_name;
    rep.mode = config.mode == TrainMode::Lora ? "lora" : "head_only";
    rep.higher_is_better = manifest.kind == TaskKind::Classification;
    rep.val_metric_name = manifest.kind == TaskKind::Classification
                              ? "accuracy"
                              : (manifest.is_landmark() ? "nme" : "rmse");
    rep.trained_param_count = res.head.param_floats();
    if (res.adapter) rep.trained_param_count += param_count(*res.adapter);

    auto snapshot = [&] {
        std::vector<std::vector<float>> s;
        for (const auto& p : params) s.push_back(p->data);
        return s;
    };
    auto restore = [&](const std::vector<std::vector<float>>& s) {
        for (size_t i = 0; i < params.size(); ++i) params[i]->data = s[i];
    };

    std::vector<std::vector<float>> best = snapshot();
    double best_metric = rep.higher_is_better ? -1e300 : 1e300;
    int best_epoch = 0;
    long step = 0;

    std::vector<size_t> order(train.images.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        Rng shuffle_rng(static_cast<Rng::result_type>(config.seed + 0x9e3779b9ull * epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            const size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<size_t> idx(order.begin() + start, order.begin() + end);

            TensorPtr features;
            if (frozen_features) {
                std::vector<float> data;
                for (size_t i : idx)
                    data.insert(data.end(), (*frozen_features)[i].begin(),
                                (*frozen_features)[i].end());
                features = make_tensor({static_cast<int>(idx.size()), backbone.config.hidden_dim},
                                       std::move(data));
            } else {
                std::vector<std::vector<float>> batch;
                for (size_t i : idx) batch.push_back(train.images[i]);
                features = backbone_forward(backbone, batch,
                                            res.adapter ? &*res.adapter : nullptr);
            }
            TensorPtr out = head_forward(res.head, features);
            TensorPtr loss;
            if (manifest.kind == TaskKind::Classification) {
                std::vector<int> targets;
                for (size_t i : idx) targets.push_back(train.class_targets[i]);
                loss = cross_entropy_loss(out, targets);
            } else {
                loss = l1_loss(out, detail::value_batch(train.value_targets, idx));
            }
            if (std::isnan(loss->data[0]))
                throw NumericError("train: loss diverged (NaN) at epoch " + std::to_string(epoch));
            loss_sum += loss->data[0];
            ++batches;
            for (auto& p : params) p->zero_grad();
            backward(loss);
            adam_step(params, adam, ++step, config);
        }

        auto val_metrics = detail::eval_split(backbone, res.adapter ? &*res.adapter : nullptr,
                                              res.head, manifest, val, config.batch_size);
        const double vm = val_metrics.at(rep.val_metric_name);
        rep.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), vm});
        const bool improved = rep.higher_is_better ? vm > best_metric : vm < best_metric;
        if (improved) {
            best_metric = vm;
            best_epoch = epoch;
            best = snapshot();
        }
        if (epoch - best_epoch >= config.patience) break;
    }

    restore(best);
    rep.best_epoch = best_epoch;
    rep.best_val_metric = best_metric;
    rep.test_metrics = detail::eval_split(backbone, res.adapter ? &*res.adapter : nullptr,
                                          res.head, manifest, test, config.batch_size);
    rep.backbone_checksum_before = checksum_before;
    rep.backbone_checksum_after = backbone.checksum();
    if (rep.backbone_checksum_before != rep.backbone_checksum_after)
        throw NumericError("train: frozen backbone was modified");
    for (auto& p : params) p->requires_grad = false;
    rep.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace lorafuse
