// lorafuse: train LoRA adapters on a shared ViT backbone, merge them into
// a single multi-task adapter, and benchmark the result.
//
// Subcommands: train, merge, verify, evaluate, matrix, synth.
// Exit codes: 2 config/format error, 3 data error, 4 numeric divergence,
// 5 incompatible adapters, 6 task/head mismatch.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lorafuse/lorafuse.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t resolve_seed(std::optional<uint64_t> flag_seed) {
    if (flag_seed) return *flag_seed;
    if (const char* env = std::getenv("LORAFUSE_SEED")) return std::strtoull(env, nullptr, 10);
    return 0;
}

void echo_config(const json& cfg, const fs::path& out_dir) {
    std::cout << "resolved config: " << cfg.dump() << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        fs::path tmp = out_dir / "config.json.tmp";
        std::ofstream f(tmp, std::ios::trunc);
        f << cfg.dump(2) << "\n";
        f.close();
        fs::rename(tmp, out_dir / "config.json");
    }
}

void write_json(const json& j, const fs::path& path) {
    fs::path tmp = path;
    tmp += ".tmp";
    std::ofstream f(tmp, std::ios::trunc);
    f << j.dump(2) << "\n";
    f.close();
    fs::rename(tmp, path);
}

// Dense-delta discrepancy between a concat merge and the weighted sum of
// input deltas; the number the `verify` subcommand reports.
double concat_discrepancy(const std::vector<lorafuse::LoraAdapter>& adapters,
                          const std::vector<float>& weights) {
    using namespace lorafuse;
    MergeSpec spec;
    for (const auto& a : adapters) spec.adapters.push_back(&a);
    spec.weights = weights;
    spec.strategy = MergeStrategy::Concat;
    LoraAdapter merged = concat_merge(spec);
    double worst = 0.0;
    for (const auto& [key, fp] : merged.factors) {
        std::vector<float> merged_delta = effective_delta(merged, key.first, key.second);
        std::vector<double> expect(merged_delta.size(), 0.0);
        for (size_t i = 0; i < adapters.size(); ++i) {
            std::vector<float> di = effective_delta(adapters[i], key.first, key.second);
            for (size_t k = 0; k < di.size(); ++k) expect[k] += static_cast<double>(weights[i]) * di[k];
        }
        for (size_t k = 0; k < merged_delta.size(); ++k)
            worst = std::max(worst, std::abs(merged_delta[k] - expect[k]));
    }
    return worst;
}

struct ExitCoded {
    int code;
    std::string message;
};

template <typename Fn>
int guarded(Fn&& fn, int compat_code = 5, int lookup_code = 6) {
    using namespace lorafuse;
    try {
        fn();
        return 0;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const CompatError& e) {
        std::cerr << "compatibility error: " << e.what() << "\n";
        return compat_code;
    } catch (const LookupError& e) {
        std::cerr << "lookup error: " << e.what() << "\n";
        return lookup_code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LoRA adapter training, merging and benchmarking on a shared ViT backbone"};
    app.require_subcommand(1);

    // ---- train ----
    auto* train = app.add_subcommand("train", "train an adapter and head for one task");
    std::string train_manifest, train_backbone, train_out, train_mode = "lora";
    std::string train_data_dir;
    int train_rank = 16, train_batch = 32, train_epochs = 50, train_patience = 10,
        train_hidden = 512;
    double train_alpha = -1.0, train_lr = 1e-3;
    std::optional<uint64_t> train_seed;
    train->add_option("--manifest", train_manifest, "dataset manifest (JSONL)")->required();
    train->add_option("--backbone", train_backbone, "backbone weights container")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--mode", train_mode, "lora | head_only")
        ->check(CLI::IsMember({"lora", "head_only"}));
    train->add_option("--rank", train_rank, "LoRA rank");
    train->add_option("--alpha", train_alpha, "LoRA alpha (default: rank)");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_option("--batch", train_batch, "batch size");
    train->add_option("--epochs", train_epochs, "max epochs");
    train->add_option("--patience", train_patience, "early-stopping patience");
    train->add_option("--head-hidden", train_hidden, "head hidden width");
    train->add_option("--seed", train_seed, "run seed (env LORAFUSE_SEED as fallback)");
    train->add_option("--data-dir", train_data_dir, "base directory for relative image paths");

    // ---- merge ----
    auto* merge = app.add_subcommand("merge", "merge adapters into one");
    std::vector<std::string> merge_inputs;
    std::string merge_out, merge_strategy = "concat";
    std::vector<double> merge_weights;
    merge->add_option("adapters", merge_inputs, "adapter files")->required()->expected(-1);
    merge->add_option("--out", merge_out, "output adapter file")->required();
    merge->add_option("--strategy", merge_strategy, "concat | linear")
        ->check(CLI::IsMember({"concat", "linear"}));
    merge->add_option("--weights", merge_weights, "per-adapter weights (default 1)");

    // ---- verify ----
    auto* verify = app.add_subcommand("verify", "check concat-merge exactness on given adapters");
    std::vector<std::string> verify_inputs;
    std::vector<double> verify_weights;
    verify->add_option("adapters", verify_inputs, "adapter files")->required()->expected(-1);
    verify->add_option("--weights", verify_weights, "per-adapter weights (default 1)");

    // ---- evaluate ----
    auto* evaluate = app.add_subcommand("evaluate", "score a bundle on one task");
    std::string eval_bundle, eval_manifest, eval_task, eval_out, eval_data_dir;
    int eval_batch = 32;
    evaluate->add_option("--bundle", eval_bundle, "multitask bundle directory")->required();
    evaluate->add_option("--manifest", eval_manifest, "dataset manifest")->required();
    evaluate->add_option("--task", eval_task, "task name (default: manifest task)");
    evaluate->add_option("--out", eval_out, "output directory")->required();
    evaluate->add_option("--batch", eval_batch, "batch size");
    evaluate->add_option("--data-dir", eval_data_dir, "base directory for relative image paths");

    // ---- matrix ----
    auto* matrix = app.add_subcommand("matrix", "run the experiment grid");
    std::string mx_mode = "pairs", mx_adapters, mx_data, mx_backbone, mx_out, mx_base;
    int mx_batch = 32;
    matrix->add_option("--mode", mx_mode, "single | pairs | triples")
        ->check(CLI::IsMember({"single", "pairs", "triples"}));
    matrix->add_option("--adapters", mx_adapters, "directory of *.adapter.ltns / *.head.ltns")
        ->required();
    matrix->add_option("--data", mx_data, "directory of <task>.jsonl manifests")->required();
    matrix->add_option("--backbone", mx_backbone, "backbone weights container")->required();
    matrix->add_option("--out", mx_out, "output directory")->required();
    matrix->add_option("--base", mx_base, "comma-separated base tasks (triples mode)");
    matrix->add_option("--batch", mx_batch, "batch size");

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset manifest");
    std::string sy_family = "grating_orientation", sy_task = "synthetic", sy_out;
    int sy_classes = 2, sy_size = 16, sy_train = 128, sy_val = 32, sy_test = 32, sy_landmarks = 98;
    double sy_noise = 0.0;
    std::optional<uint64_t> sy_seed;
    synth->add_option("--family", sy_family,
                      "grating_orientation | grating_frequency | corner_marker | landmark");
    synth->add_option("--task-name", sy_task, "task name");
    synth->add_option("--classes", sy_classes, "number of classes");
    synth->add_option("--landmarks", sy_landmarks, "landmark count (landmark family)");
    synth->add_option("--noise", sy_noise, "pixel noise stddev");
    synth->add_option("--size", sy_size, "image side length");
    synth->add_option("--train", sy_train, "train sample count");
    synth->add_option("--val", sy_val, "val sample count");
    synth->add_option("--test", sy_test, "test sample count");
    synth->add_option("--seed", sy_seed, "generator seed (env LORAFUSE_SEED as fallback)");
    synth->add_option("--out", sy_out, "output manifest path")->required();

    CLI11_PARSE(app, argc, argv);
    using namespace lorafuse;

    if (*train) {
        return guarded([&] {
            TrainConfig cfg;
            cfg.mode = train_mode == "lora" ? TrainMode::Lora : TrainMode::HeadOnly;
            cfg.rank = train_rank;
            cfg.alpha = train_alpha > 0 ? static_cast<float>(train_alpha)
                                        : static_cast<float>(train_rank);
            cfg.learning_rate = static_cast<float>(train_lr);
            cfg.batch_size = train_batch;
            cfg.max_epochs = train_epochs;
            cfg.patience = train_patience;
            cfg.head_hidden = train_hidden;
            cfg.seed = resolve_seed(train_seed);
            json cj = {{"subcommand", "train"},   {"manifest", train_manifest},
                       {"backbone", train_backbone}, {"out", train_out},
                       {"mode", train_mode},      {"rank", cfg.rank},
                       {"alpha", cfg.alpha},      {"lr", cfg.learning_rate},
                       {"batch", cfg.batch_size}, {"epochs", cfg.max_epochs},
                       {"patience", cfg.patience}, {"head_hidden", cfg.head_hidden},
                       {"seed", cfg.seed}};
            echo_config(cj, train_out);
            if (!fs::exists(train_manifest))
                throw DataError("manifest not found: " + train_manifest);
            DatasetManifest manifest = load_manifest(train_manifest);
            BackboneWeights backbone = load_backbone(train_backbone);
            TrainResult res = train_task(manifest, backbone, cfg, train_data_dir);
            if (res.adapter) save_adapter(*res.adapter, fs::path(train_out) / "adapter.ltns");
            save_head(res.head, fs::path(train_out) / "head.ltns");
            write_json(res.report.to_json(), fs::path(train_out) / "report.json");
            std::cout << "task " << res.report.task_name << ": best epoch "
                      << res.report.best_epoch << ", val " << res.report.val_metric_name << " "
                      << res.report.best_val_metric << " (" << res.report.wall_time_s << " s)\n";
        });
    }

    if (*merge) {
        return guarded([&] {
            std::vector<LoraAdapter> adapters;
            for (const auto& p : merge_inputs) adapters.push_back(load_adapter(p));
            std::vector<float> weights(adapters.size(), 1.0f);
            if (!merge_weights.empty()) {
                if (merge_weights.size() != adapters.size())
                    throw ConfigError("merge: weight count does not match adapter count");
                for (size_t i = 0; i < weights.size(); ++i)
                    weights[i] = static_cast<float>(merge_weights[i]);
            }
            json cj = {{"subcommand", "merge"}, {"inputs", merge_inputs},
                       {"out", merge_out},      {"strategy", merge_strategy},
                       {"weights", weights}};
            std::cout << "resolved config: " << cj.dump() << "\n";
            std::vector<const LoraAdapter*> ptrs;
            for (const auto& a : adapters) ptrs.push_back(&a);
            auto rep = validate_compatibility(ptrs);
            for (const auto& m : rep.mismatches) std::cout << "compatibility: " << m << "\n";
            if (rep.mismatches.empty()) std::cout << "compatibility: ok\n";
            MergeSpec spec;
            spec.adapters = ptrs;
            spec.weights = weights;
            spec.strategy =
                merge_strategy == "concat" ? MergeStrategy::Concat : MergeStrategy::Linear;
            LoraAdapter merged = merge_adapters(spec);
            save_adapter(merged, merge_out);
            write_json(cj, fs::path(merge_out).string() + ".config.json");
            std::cout << "merged task: " << merged.task_name << "\n";
            std::cout << "rank: " << merged.config.rank << "\n";
        });
    }

    if (*verify) {
        return guarded([&] {
            std::vector<LoraAdapter> adapters;
            for (const auto& p : verify_inputs) adapters.push_back(load_adapter(p));
            std::vector<float> weights(adapters.size(), 1.0f);
            if (!verify_weights.empty()) {
                if (verify_weights.size() != adapters.size())
                    throw ConfigError("verify: weight count does not match adapter count");
                for (size_t i = 0; i < weights.size(); ++i)
                    weights[i] = static_cast<float>(verify_weights[i]);
            }
            json cj = {{"subcommand", "verify"}, {"inputs", verify_inputs}, {"weights", weights}};
            std::cout << "resolved config: " << cj.dump() << "\n";
            double worst = concat_discrepancy(adapters, weights);
            std::cout << "max delta discrepancy: " << worst << "\n";
        });
    }

    if (*evaluate) {
        return guarded(
            [&] {
                json cj = {{"subcommand", "evaluate"}, {"bundle", eval_bundle},
                           {"manifest", eval_manifest}, {"task", eval_task},
                           {"out", eval_out},           {"batch", eval_batch}};
                echo_config(cj, eval_out);
                if (!fs::exists(eval_manifest))
                    throw DataError("manifest not found: " + eval_manifest);
                DatasetManifest manifest = load_manifest(eval_manifest);
                MultiTaskModel model = load_bundle(eval_bundle);
                const std::string task = eval_task.empty() ? manifest.task_name : eval_task;
                auto hit = model.heads.find(task);
                if (hit == model.heads.end())
                    throw LookupError("bundle has no head for task \"" + task + "\"");
                if (hit->second.kind != manifest.kind)
                    throw LookupError("head/manifest kind mismatch for task \"" + task + "\"");
                auto split = lorafuse::detail::materialize(
                    manifest, "test", ImageLoadConfig::for_backbone(model.backbone.config),
                    eval_data_dir);
                if (split.images.empty()) throw DataError("empty test split");
                auto metrics = lorafuse::detail::eval_split(
                    model.backbone, model.adapter ? &*model.adapter : nullptr, hit->second,
                    manifest, split, eval_batch);
                json out = {{"task_name", task}, {"n", split.images.size()}, {"metrics", metrics}};
                for (const auto& [name, value] : metrics) {
                    const bool x100 = name == "accuracy" || name == "macro_f1" || name == "nme";
                    std::cout << std::left << std::setw(12) << name << (x100 ? value * 100.0 : value)
                              << (x100 ? "  (x100)" : "") << "\n";
                }
                write_json(out, fs::path(eval_out) / "metrics.json");
            },
            6, 6);
    }

    if (*matrix) {
        return guarded([&] {
            json cj = {{"subcommand", "matrix"}, {"mode", mx_mode}, {"adapters", mx_adapters},
                       {"data", mx_data},        {"backbone", mx_backbone}, {"out", mx_out},
                       {"base", mx_base},        {"batch", mx_batch}};
            echo_config(cj, mx_out);
            BackboneWeights backbone = load_backbone(mx_backbone);
            GridInputs in;
            in.backbone = &backbone;
            in.batch_size = mx_batch;
            in.data_dir = mx_data;
            for (const auto& entry : fs::directory_iterator(mx_adapters)) {
                const std::string name = entry.path().filename().string();
                if (name.ends_with(".adapter.ltns")) {
                    LoraAdapter a = load_adapter(entry.path());
                    const int rank = a.config.rank;
                    std::string stem = name.substr(0, name.size() - strlen(".adapter.ltns"));
                    fs::path head_path = entry.path().parent_path() / (stem + ".head.ltns");
                    if (!fs::exists(head_path))
                        throw LookupError("no head file for adapter " + name);
                    TaskHead h = load_head(head_path);
                    in.adapters[a.task_name].emplace(rank, std::move(a));
                    in.heads[h.task_name].emplace(rank, std::move(h));
                } else if (name.ends_with(".head_only.head.ltns")) {
                    TaskHead h = load_head(entry.path());
                    in.heads[h.task_name].emplace(kHeadOnlyRank, std::move(h));
                }
            }
            if (in.adapters.empty()) throw DataError("no adapters found in " + mx_adapters);
            for (const auto& [task, ranks] : in.adapters) {
                fs::path mpath = fs::path(mx_data) / (task + ".jsonl");
                if (!fs::exists(mpath)) throw DataError("no manifest for task: " + mpath.string());
                in.datasets.emplace(task, load_manifest(mpath));
            }
            if (!mx_base.empty()) {
                std::stringstream ss(mx_base);
                std::string item;
                while (std::getline(ss, item, ',')) in.triple_bases.push_back(item);
            }
            GridReport rep = run_grid(grid_mode_from_name(mx_mode), in);
            write_json(rep.to_json(), fs::path(mx_out) / "grid.json");
            const std::string text = rep.render_text();
            {
                fs::path tmp = fs::path(mx_out) / "grid.txt.tmp";
                std::ofstream f(tmp, std::ios::trunc);
                f << text;
                f.close();
                fs::rename(tmp, fs::path(mx_out) / "grid.txt");
            }
            std::cout << text;
            std::cout << "cells: " << rep.cells.size() << "\n";
        });
    }

    if (*synth) {
        return guarded([&] {
            SyntheticTaskSpec spec;
            spec.family = synthetic_family_from_name(sy_family);
            spec.task_name = sy_task;
            spec.num_classes = sy_classes;
            spec.num_landmarks = sy_landmarks;
            spec.noise = static_cast<float>(sy_noise);
            spec.image_size = sy_size;
            spec.train_count = sy_train;
            spec.val_count = sy_val;
            spec.test_count = sy_test;
            spec.seed = resolve_seed(sy_seed);
            json cj = {{"subcommand", "synth"}, {"family", sy_family}, {"task_name", sy_task},
                       {"classes", sy_classes}, {"noise", sy_noise},   {"size", sy_size},
                       {"train", sy_train},     {"val", sy_val},       {"test", sy_test},
                       {"seed", spec.seed},     {"out", sy_out}};
            std::cout << "resolved config: " << cj.dump() << "\n";
            DatasetManifest m = generate_synthetic(spec);
            save_manifest(m, sy_out);
            write_json(cj, fs::path(sy_out).string() + ".config.json");
            std::cout << "wrote " << m.records.size() << " records to " << sy_out << "\n";
        });
    }

    return 0;
}
