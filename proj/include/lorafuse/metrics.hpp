#pragma once

// Evaluation metrics: accuracy, macro F1, RMSE and inter-ocular-normalized
// landmark error (NME). Tables report Acc/F1 and NME scaled by 100.

#include <cmath>
#include <string>
#include <vector>

#include "lorafuse/common.hpp"

namespace lorafuse {

struct MetricResult {
    std::string task_name;
    std::string metric;  // "accuracy" | "macro_f1" | "rmse" | "nme"
    double value = 0.0;
    size_t sample_count = 0;
};

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size())
        throw ShapeError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
    if (preds.empty()) throw DataError("accuracy: empty input");
    size_t hit = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// Unweighted mean of per-class F1. Classes absent from both predictions and
// labels are skipped; classes present on either side with zero F1 count as 0.
inline double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                       int num_classes) {
    if (preds.size() != labels.size())
        throw ShapeError("macro_f1: prediction/label length mismatch");
    if (preds.empty()) throw DataError("macro_f1: empty input");
    for (int l : labels)
        if (l < 0 || l >= num_classes)
            throw DataError("macro_f1: label " + std::to_string(l) + " out of range [0, " +
                            std::to_string(num_classes) + ")");
    std::vector<long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || preds[i] >= num_classes)
            throw DataError("macro_f1: prediction " + std::to_string(preds[i]) + " out of range");
        if (preds[i] == labels[i])
            ++tp[preds[i]];
        else {
            ++fp[preds[i]];
            ++fn[labels[i]];
        }
    }
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (tp[c] + fp[c] + fn[c] == 0) continue;  // absent everywhere
        ++present;
        const double denom = 2.0 * tp[c] + fp[c] + fn[c];
        sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    }
    if (present == 0) throw DataError("macro_f1: no classes present");
    return sum / present;
}

inline double rmse(const std::vector<float>& preds, const std::vector<float>& targets) {
    if (preds.size() != targets.size())
        throw ShapeError("rmse: size mismatch " + std::to_string(preds.size()) + " vs " +
                         std::to_string(targets.size()));
    if (preds.empty()) throw DataError("rmse: empty input");
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double d = static_cast<double>(preds[i]) - targets[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(preds.size()));
}

// Landmarks are flat [sample][point * 2] arrays of (x, y) pairs.
// Per sample: mean point-wise Euclidean error over the inter-ocular
// distance between the two given eye-corner landmarks; averaged over
// samples.
inline double nme(const std::vector<std::vector<float>>& pred_landmarks,
                  const std::vector<std::vector<float>>& true_landmarks, int left_eye_idx,
                  int right_eye_idx) {
    if (pred_landmarks.size() != true_landmarks.size())
        throw ShapeError("nme: sample count mismatch");
    if (pred_landmarks.empty()) throw DataError("nme: empty input");
    double total = 0.0;
    for (size_t s = 0; s < pred_landmarks.size(); ++s) {
        const auto& p = pred_landmarks[s];
        const auto& t = true_landmarks[s];
        if (p.size() != t.size() || p.size() % 2 != 0)
            throw ShapeError("nme: sample " + std::to_string(s) + " landmark sizes disagree");
        const int n = static_cast<int>(p.size() / 2);
        if (left_eye_idx < 0 || left_eye_idx >= n || right_eye_idx < 0 || right_eye_idx >= n)
            throw ConfigError("nme: eye indices out of range for " + std::to_string(n) + " points");
        const double ex = static_cast<double>(t[2 * left_eye_idx]) - t[2 * right_eye_idx];
        const double ey = static_cast<double>(t[2 * left_eye_idx + 1]) - t[2 * right_eye_idx + 1];
        const double iod = std::sqrt(ex * ex + ey * ey);
        if (iod <= 0.0)
            throw DataError("nme: coincident eye landmarks (indices " +
                            std::to_string(left_eye_idx) + ", " + std::to_string(right_eye_idx) +
                            ") in sample " + std::to_string(s));
        double err = 0.0;
        for (int j = 0; j < n; ++j) {
            const double dx = static_cast<double>(p[2 * j]) - t[2 * j];
            const double dy = static_cast<double>(p[2 * j + 1]) - t[2 * j + 1];
            err += std::sqrt(dx * dx + dy * dy);
        }
        total += (err / n) / iod;
    }
    return total / static_cast<double>(pred_landmarks.size());
}

}  // namespace lorafuse
