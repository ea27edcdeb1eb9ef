#pragma once

// Adapter merging. Concatenation stacks factors and is exact: the merged
// delta equals the weighted sum of the input deltas up to float
// reassociation. Linear merging sums same-rank factors entrywise
// (sqrt(w) on each factor so w lands linearly on the self terms) and is
// approximate because of the B_i A_j cross terms.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "lorafuse/common.hpp"
#include "lorafuse/lora.hpp"

namespace lorafuse {

enum class MergeStrategy { Concat, Linear };

struct MergeSpec {
    std::vector<const LoraAdapter*> adapters;
    std::vector<float> weights;  // one per adapter, positive
    MergeStrategy strategy = MergeStrategy::Concat;
};

struct CompatibilityReport {
    std::vector<std::string> mismatches;
    bool concat_eligible = false;
    bool linear_eligible = false;
};

inline CompatibilityReport validate_compatibility(const std::vector<const LoraAdapter*>& adapters) {
    if (adapters.empty()) throw ConfigError("merge: need at least one adapter");
    CompatibilityReport rep;
    const LoraAdapter& ref = *adapters[0];
    bool ranks_equal = true;
    for (size_t i = 1; i < adapters.size(); ++i) {
        const LoraAdapter& a = *adapters[i];
        if (a.hidden_dim != ref.hidden_dim)
            rep.mismatches.push_back("hidden_dim: \"" + ref.task_name + "\" has " +
                                     std::to_string(ref.hidden_dim) + ", \"" + a.task_name +
                                     "\" has " + std::to_string(a.hidden_dim));
        if (a.num_layers != ref.num_layers)
            rep.mismatches.push_back("num_layers: \"" + ref.task_name + "\" has " +
                                     std::to_string(ref.num_layers) + ", \"" + a.task_name +
                                     "\" has " + std::to_string(a.num_layers));
        if (a.config.targets != ref.config.targets)
            rep.mismatches.push_back("targets differ between \"" + ref.task_name + "\" and \"" +
                                     a.task_name + "\"");
        if (a.config.rank != ref.config.rank) ranks_equal = false;
    }
    rep.concat_eligible = rep.mismatches.empty();
    rep.linear_eligible = rep.mismatches.empty() && ranks_equal;
    if (rep.concat_eligible && !ranks_equal)
        rep.mismatches.push_back("ranks differ: linear ineligible, concat eligible");
    return rep;
}

namespace detail {

inline void check_merge_spec(const MergeSpec& spec) {
    if (spec.adapters.empty()) throw ConfigError("merge: empty adapter list");
    if (spec.weights.size() != spec.adapters.size())
        throw ConfigError("merge: " + std::to_string(spec.weights.size()) + " weights for " +
                          std::to_string(spec.adapters.size()) + " adapters");
    for (float w : spec.weights)
        if (!(w > 0.0f)) throw ConfigError("merge: weights must be positive");
    auto rep = validate_compatibility(spec.adapters);
    if (!rep.concat_eligible) {
        std::string msg = "merge: incompatible adapters";
        for (const auto& m : rep.mismatches) msg += "; " + m;
        throw CompatError(msg);
    }
}

inline std::string joined_name(const MergeSpec& spec) {
    std::string name;
    for (size_t i = 0; i < spec.adapters.size(); ++i) {
        if (i) name += "+";
        name += spec.adapters[i]->task_name;
    }
    return name;
}

}  // namespace detail

inline LoraAdapter concat_merge(const MergeSpec& spec) {
    if (spec.strategy != MergeStrategy::Concat)
        throw ConfigError("concat_merge: spec strategy is not concat");
    detail::check_merge_spec(spec);
    const LoraAdapter& ref = *spec.adapters[0];
    const int d = ref.hidden_dim;
    int merged_rank = 0;
    for (const auto* a : spec.adapters) merged_rank += a->config.rank;

    LoraAdapter out;
    out.task_name = detail::joined_name(spec);
    out.hidden_dim = d;
    out.num_layers = ref.num_layers;
    out.config.rank = merged_rank;
    out.config.alpha = static_cast<float>(merged_rank);  // scale 1
    out.config.targets = ref.config.targets;

    for (int layer = 0; layer < ref.num_layers; ++layer)
        for (Projection p : ref.config.targets) {
            auto A = zeros({merged_rank, d});
            auto B = zeros({d, merged_rank});
            int row = 0;
            for (size_t i = 0; i < spec.adapters.size(); ++i) {
                const LoraAdapter& a = *spec.adapters[i];
                const auto& [Ai, Bi] = a.pair(layer, p);
                const int r = a.config.rank;
                // fold w_i and the scale ratio into the stacked A rows
                const float f = spec.weights[i] * a.config.scale();
                for (int q = 0; q < r; ++q)
                    for (int j = 0; j < d; ++j)
                        A->data[(row + q) * d + j] = f * Ai->data[q * d + j];
                for (int j = 0; j < d; ++j)
                    for (int q = 0; q < r; ++q)
                        B->data[j * merged_rank + row + q] = Bi->data[j * r + q];
                row += r;
            }
            out.factors[{layer, p}] = {A, B};
        }
    return out;
}

inline LoraAdapter linear_merge(const MergeSpec& spec) {
    if (spec.strategy != MergeStrategy::Linear)
        throw ConfigError("linear_merge: spec strategy is not linear");
    detail::check_merge_spec(spec);
    const LoraAdapter& ref = *spec.adapters[0];
    for (const auto* a : spec.adapters)
        if (a->config.rank != ref.config.rank)
            throw CompatError("linear_merge: ranks differ (" + std::to_string(ref.config.rank) +
                              " vs " + std::to_string(a->config.rank) + ")");
    const int d = ref.hidden_dim, r = ref.config.rank;

    LoraAdapter out;
    out.task_name = detail::joined_name(spec);
    out.hidden_dim = d;
    out.num_layers = ref.num_layers;
    out.config.rank = r;
    out.config.alpha = static_cast<float>(r);  // scale 1
    out.config.targets = ref.config.targets;

    for (int layer = 0; layer < ref.num_layers; ++layer)
        for (Projection p : ref.config.targets) {
            auto A = zeros({r, d});
            auto B = zeros({d, r});
            for (size_t i = 0; i < spec.adapters.size(); ++i) {
                const LoraAdapter& a = *spec.adapters[i];
                const auto& [Ai, Bi] = a.pair(layer, p);
                const float sw = std::sqrt(spec.weights[i]);
                // split each adapter's own scale evenly across its factors
                const float sc = std::sqrt(a.config.scale());
                for (size_t k = 0; k < A->numel(); ++k) A->data[k] += sw * sc * Ai->data[k];
                for (size_t k = 0; k < B->numel(); ++k) B->data[k] += sw * sc * Bi->data[k];
            }
            out.factors[{layer, p}] = {A, B};
        }
    return out;
}

inline LoraAdapter merge_adapters(const MergeSpec& spec) {
    return spec.strategy == MergeStrategy::Concat ? concat_merge(spec) : linear_merge(spec);
}

}  // namespace lorafuse
