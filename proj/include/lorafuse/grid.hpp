#pragma once

// Experiment-grid harness. Three modes:
//   single  - per-task metrics for each rank plus the head-only baseline
//   pairs   - every ordered adapter pair (X+Y), concat-merged, scored on
//             X's task; k adapters give k(k-1) cells grouped per task
//   triples - two fixed base adapters plus each remaining third, scored
//             on every constituent task
// Emits machine-readable JSON and an aligned text table. Acc/F1 and NME
// are reported x100 in the text tables.

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/backbone.hpp"
#include "lorafuse/common.hpp"
#include "lorafuse/data.hpp"
#include "lorafuse/lora.hpp"
#include "lorafuse/merge.hpp"
#include "lorafuse/metrics.hpp"
#include "lorafuse/multitask.hpp"
#include "lorafuse/trainer.hpp"

namespace lorafuse {

enum class GridMode { Single, Pairs, Triples };

inline const char* grid_mode_name(GridMode m) {
    switch (m) {
        case GridMode::Single: return "single";
        case GridMode::Pairs: return "pairs";
        case GridMode::Triples: return "triples";
    }
    throw ConfigError("bad grid mode");
}

inline GridMode grid_mode_from_name(const std::string& s) {
    if (s == "single") return GridMode::Single;
    if (s == "pairs") return GridMode::Pairs;
    if (s == "triples") return GridMode::Triples;
    throw ConfigError("unknown grid mode \"" + s + "\"");
}

// head-only baseline entries use this pseudo-rank key
inline constexpr int kHeadOnlyRank = 0;

struct GridInputs {
    const BackboneWeights* backbone = nullptr;
    std::map<std::string, DatasetManifest> datasets;                 // by task
    std::map<std::string, std::map<int, LoraAdapter>> adapters;      // task -> rank -> adapter
    std::map<std::string, std::map<int, TaskHead>> heads;            // task -> rank -> head
    std::filesystem::path data_dir;
    std::vector<std::string> triple_bases;  // two fixed tasks, triples mode
    int batch_size = 32;
};

struct GridCell {
    std::vector<std::string> combination;  // task names in merge order
    int rank = 0;
    std::string task_evaluated;
    std::string metric;
    double value = 0.0;
    size_t n = 0;
};

struct GridReport {
    std::string mode;
    uint64_t backbone_config_hash = 0;
    std::vector<GridCell> cells;

    nlohmann::json to_json() const {
        nlohmann::json out = {{"mode", mode},
                              {"backbone_config_hash", backbone_config_hash},
                              {"cells", nlohmann::json::array()}};
        for (const auto& c : cells)
            out["cells"].push_back({{"combination", c.combination},
                                    {"rank", c.rank},
                                    {"task_evaluated", c.task_evaluated},
                                    {"metric", c.metric},
                                    {"value", c.value},
                                    {"n", c.n}});
        return out;
    }

    std::string render_text() const;
};

namespace detail {

inline uint64_t config_hash(const BackboneConfig& c) {
    const int fields[] = {c.image_size, c.patch_size, c.channels, c.hidden_dim,
                          c.num_layers, c.num_heads, c.mlp_dim};
    return fnv1a(fields, sizeof(fields));
}

inline std::string primary_metric(const DatasetManifest& m) {
    if (m.kind == TaskKind::Classification) return "macro_f1";
    return m.is_landmark() ? "nme" : "rmse";
}

inline std::string combo_key(const std::vector<std::string>& combo) {
    std::string key;
    for (size_t i = 0; i < combo.size(); ++i) {
        if (i) key += "+";
        key += combo[i];
    }
    return key;
}

struct GridContext {
    const GridInputs& in;
    std::map<std::string, MaterializedSplit> test_splits;  // by task

    explicit GridContext(const GridInputs& inputs) : in(inputs) {
        for (const auto& [task, manifest] : in.datasets)
            test_splits.emplace(task,
                                materialize(manifest, "test",
                                            ImageLoadConfig::for_backbone(in.backbone->config),
                                            in.data_dir));
    }

    void evaluate(GridReport& rep, const std::vector<std::string>& combo, int rank,
                  const LoraAdapter* adapter, const std::string& eval_task,
                  const TaskHead& head) const {
        const DatasetManifest& manifest = in.datasets.at(eval_task);
        const MaterializedSplit& split = test_splits.at(eval_task);
        auto metrics = eval_split(*in.backbone, adapter, head, manifest, split, in.batch_size);
        for (const auto& [metric, value] : metrics)
            rep.cells.push_back({combo, rank, eval_task, metric, value, split.images.size()});
    }
};

}  // namespace detail

inline GridReport run_grid(GridMode mode, const GridInputs& in) {
    if (!in.backbone) throw ConfigError("grid: no backbone");
    for (const auto& [task, ranks] : in.adapters)
        for (const auto& [rank, adapter] : ranks)
            if (adapter.hidden_dim != in.backbone->config.hidden_dim ||
                adapter.num_layers != in.backbone->config.num_layers)
                throw CompatError("grid: adapter \"" + task + "\" rank " + std::to_string(rank) +
                                  " does not match the backbone config");
    for (const auto& [task, ranks] : in.adapters) {
        if (!in.datasets.count(task)) throw DataError("grid: no dataset for task \"" + task + "\"");
        for (const auto& [rank, adapter] : ranks)
            if (!in.heads.count(task) || !in.heads.at(task).count(rank))
                throw LookupError("grid: missing head for task \"" + task + "\" rank " +
                                  std::to_string(rank));
    }

    detail::GridContext ctx(in);
    GridReport rep;
    rep.mode = grid_mode_name(mode);
    rep.backbone_config_hash = detail::config_hash(in.backbone->config);

    // sorted task list for deterministic report assembly
    std::vector<std::string> tasks;
    for (const auto& [task, ranks] : in.adapters) tasks.push_back(task);
    std::sort(tasks.begin(), tasks.end());

    switch (mode) {
        case GridMode::Single: {
            for (const auto& task : tasks) {
                for (const auto& [rank, adapter] : in.adapters.at(task))
                    ctx.evaluate(rep, {task}, rank, &adapter, task, in.heads.at(task).at(rank));
                auto hit = in.heads.find(task);
                if (hit != in.heads.end() && hit->second.count(kHeadOnlyRank))
                    ctx.evaluate(rep, {task}, kHeadOnlyRank, nullptr, task,
                                 hit->second.at(kHeadOnlyRank));
            }
            break;
        }
        case GridMode::Pairs: {
            for (const auto& x : tasks)
                for (const auto& y : tasks) {
                    if (x == y) continue;
                    for (const auto& [rank, ax] : in.adapters.at(x)) {
                        auto yit = in.adapters.at(y).find(rank);
                        if (yit == in.adapters.at(y).end()) continue;
                        MergeSpec spec;
                        spec.adapters = {&ax, &yit->second};
                        spec.weights = {1.0f, 1.0f};
                        spec.strategy = MergeStrategy::Concat;
                        LoraAdapter merged = concat_merge(spec);
                        ctx.evaluate(rep, {x, y}, rank, &merged, x, in.heads.at(x).at(rank));
                    }
                }
            break;
        }
        case GridMode::Triples: {
            if (in.triple_bases.size() != 2)
                throw ConfigError("grid: triples mode needs exactly two base tasks");
            for (const auto& b : in.triple_bases)
                if (!in.adapters.count(b))
                    throw LookupError("grid: base task \"" + b + "\" has no adapter");
            for (const auto& third : tasks) {
                if (third == in.triple_bases[0] || third == in.triple_bases[1]) continue;
                for (const auto& [rank, a3] : in.adapters.at(third)) {
                    auto b0 = in.adapters.at(in.triple_bases[0]).find(rank);
                    auto b1 = in.adapters.at(in.triple_bases[1]).find(rank);
                    if (b0 == in.adapters.at(in.triple_bases[0]).end() ||
                        b1 == in.adapters.at(in.triple_bases[1]).end())
                        continue;
                    MergeSpec spec;
                    spec.adapters = {&b0->second, &b1->second, &a3};
                    spec.weights = {1.0f, 1.0f, 1.0f};
                    spec.strategy = MergeStrategy::Concat;
                    LoraAdapter merged = concat_merge(spec);
                    const std::vector<std::string> combo = {in.triple_bases[0],
                                                            in.triple_bases[1], third};
                    for (const auto& t : combo)
                        ctx.evaluate(rep, combo, rank, &merged, t, in.heads.at(t).at(rank));
                }
            }
            break;
        }
    }
    return rep;
}

inline std::string GridReport::render_text() const {
    // group: task_evaluated -> combination -> rank -> primary metric value
    std::map<std::string, std::map<std::string, std::map<int, double>>> table;
    std::map<std::string, std::string> metric_of_task;
    std::set<int> ranks;
    for (const auto& c : cells) {
        // keep one primary metric per task for the text view
        auto& chosen = metric_of_task[c.task_evaluated];
        const bool primary = c.metric == "macro_f1" || c.metric == "nme" || c.metric == "rmse";
        if (chosen.empty() && primary) chosen = c.metric;
        if (c.metric == "nme") chosen = "nme";  // landmark tasks also emit rmse
    }
    for (const auto& c : cells) {
        if (c.metric != metric_of_task[c.task_evaluated]) continue;
        table[c.task_evaluated][detail::combo_key(c.combination)][c.rank] = c.value;
        ranks.insert(c.rank);
    }
    std::ostringstream out;
    for (const auto& [task, rows] : table) {
        const std::string& metric = metric_of_task[task];
        const bool x100 = metric == "macro_f1" || metric == "accuracy" || metric == "nme";
        out << "== " << task << " (" << metric << (x100 ? " x100" : "") << ") ==\n";
        out << std::left << std::setw(28) << "merged adapters";
        for (int r : ranks)
            out << std::right << std::setw(12) << (r == kHeadOnlyRank ? "head-only" : "rank " + std::to_string(r));
        out << "\n";
        for (const auto& [combo, by_rank] : rows) {
            out << std::left << std::setw(28) << combo;
            for (int r : ranks) {
                auto it = by_rank.find(r);
                if (it == by_rank.end())
                    out << std::right << std::setw(12) << "-";
                else
                    out << std::right << std::setw(12) << std::fixed << std::setprecision(3)
                        << (x100 ? it->second * 100.0 : it->second);
            }
            out << "\n";
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace lorafuse
