#pragma once

// Double-precision straight-line mirrors of the library ops and the full
// encoder/head forward. The finite-difference gradient oracle evaluates
// these instead of the float32 graph so that the difference quotient is
// not drowned in single-precision rounding noise; the mirrors share only
// the mathematical definitions (same constants), never the tape code.

#include <cmath>
#include <vector>

#include "lorafuse/backbone.hpp"
#include "lorafuse/lora.hpp"
#include "lorafuse/multitask.hpp"
#include "lorafuse/tensor.hpp"

namespace refops {

struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> data;
};

inline Mat from(const lorafuse::TensorPtr& t) {
    Mat m;
    if (t->shape.size() == 2) {
        m.rows = t->shape[0];
        m.cols = t->shape[1];
    } else {
        m.rows = 1;
        m.cols = static_cast<int>(t->numel());
    }
    m.data.assign(t->data.begin(), t->data.end());
    return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out{a.rows, b.cols, std::vector<double>(static_cast<size_t>(a.rows) * b.cols, 0.0)};
    for (int i = 0; i < a.rows; ++i)
        for (int k = 0; k < a.cols; ++k) {
            const double v = a.data[i * a.cols + k];
            for (int j = 0; j < b.cols; ++j) out.data[i * b.cols + j] += v * b.data[k * b.cols + j];
        }
    return out;
}

inline Mat transpose(const Mat& a) {
    Mat out{a.cols, a.rows, std::vector<double>(a.data.size())};
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out.data[j * a.rows + i] = a.data[i * a.cols + j];
    return out;
}

inline Mat add(Mat a, const Mat& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
    return a;
}

inline Mat mul(Mat a, const Mat& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] *= b.data[i];
    return a;
}

inline Mat scale(Mat a, double c) {
    for (auto& v : a.data) v *= c;
    return a;
}

inline Mat add_rowvec(Mat a, const Mat& v) {
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) a.data[i * a.cols + j] += v.data[j];
    return a;
}

inline Mat relu(Mat a) {
    for (auto& v : a.data) v = v > 0.0 ? v : 0.0;
    return a;
}

inline Mat tanh_m(Mat a) {
    for (auto& v : a.data) v = std::tanh(v);
    return a;
}

inline Mat gelu(Mat a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    for (auto& v : a.data) v = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    return a;
}

inline Mat softmax_rows(Mat a) {
    for (int i = 0; i < a.rows; ++i) {
        double* row = a.data.data() + static_cast<size_t>(i) * a.cols;
        double mx = row[0];
        for (int j = 1; j < a.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < a.cols; ++j) sum += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j < a.cols; ++j) row[j] /= sum;
    }
    return a;
}

inline Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps = 1e-6) {
    Mat out = x;
    for (int i = 0; i < x.rows; ++i) {
        const double* row = x.data.data() + static_cast<size_t>(i) * x.cols;
        double mu = 0.0;
        for (int j = 0; j < x.cols; ++j) mu += row[j];
        mu /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= x.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols; ++j)
            out.data[i * x.cols + j] = gain.data[j] * (row[j] - mu) * inv + bias.data[j];
    }
    return out;
}

inline Mat slice_cols(const Mat& a, int from, int to) {
    Mat out{a.rows, to - from, {}};
    out.data.reserve(static_cast<size_t>(out.rows) * out.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int j = from; j < to; ++j) out.data.push_back(a.data[i * a.cols + j]);
    return out;
}

inline Mat slice_rows(const Mat& a, int from, int to) {
    Mat out{to - from, a.cols, {a.data.begin() + static_cast<size_t>(from) * a.cols,
                                a.data.begin() + static_cast<size_t>(to) * a.cols}};
    return out;
}

inline Mat concat_cols(const std::vector<Mat>& parts) {
    int cols = 0;
    for (const auto& p : parts) cols += p.cols;
    Mat out{parts[0].rows, cols, {}};
    out.data.reserve(static_cast<size_t>(out.rows) * cols);
    for (int i = 0; i < out.rows; ++i)
        for (const auto& p : parts)
            for (int j = 0; j < p.cols; ++j) out.data.push_back(p.data[i * p.cols + j]);
    return out;
}

inline Mat concat_rows(const std::vector<Mat>& parts) {
    Mat out{0, parts[0].cols, {}};
    for (const auto& p : parts) {
        out.rows += p.rows;
        out.data.insert(out.data.end(), p.data.begin(), p.data.end());
    }
    return out;
}

inline double mean_all(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    return s / static_cast<double>(a.data.size());
}

inline double sum_all(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    return s;
}

inline double cross_entropy(const Mat& logits, const std::vector<int>& targets) {
    double loss = 0.0;
    for (int i = 0; i < logits.rows; ++i) {
        const double* row = logits.data.data() + static_cast<size_t>(i) * logits.cols;
        double mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
        loss += std::log(sum) - (row[targets[i]] - mx);
    }
    return loss / logits.rows;
}

inline double l1(const Mat& pred, const Mat& tgt) {
    double s = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) s += std::abs(pred.data[i] - tgt.data[i]);
    return s / static_cast<double>(pred.data.size());
}

// ---- full model --------------------------------------------------------

inline Mat linear(const Mat& x, const lorafuse::TensorPtr& w, const lorafuse::TensorPtr& b) {
    return add_rowvec(matmul(x, transpose(from(w))), from(b));
}

// mirrors encode_image, including the LoRA delta on key/value
inline Mat ref_encode(const lorafuse::BackboneWeights& w, const lorafuse::LoraAdapter* adapter,
                      const std::vector<float>& image) {
    using namespace lorafuse;
    const BackboneConfig& c = w.config;
    Mat tokens = from(patchify(image, c));
    Mat x = linear(tokens, w.at("embed.patch.weight"), w.at("embed.patch.bias"));
    x = concat_rows({from(w.at("embed.cls_token")), x});
    x = add(x, from(w.at("embed.pos")));
    const int dh = c.head_dim();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto project = [&](const Mat& h, int layer, const char* name, const LoraAdapter* ad,
                       Projection proj) {
        const std::string p = "encoder." + std::to_string(layer) + ".attn." + name + ".";
        Mat out = linear(h, w.at(p + "weight"), w.at(p + "bias"));
        if (ad && ad->targets_pair(layer, proj)) {
            const auto& [A, B] = ad->pair(layer, proj);
            Mat delta = matmul(matmul(h, transpose(from(A))), transpose(from(B)));
            out = add(out, scale(delta, ad->config.scale()));
        }
        return out;
    };

    for (int layer = 0; layer < c.num_layers; ++layer) {
        const std::string p = "encoder." + std::to_string(layer) + ".";
        Mat h = layer_norm(x, from(w.at(p + "ln1.gain")), from(w.at(p + "ln1.bias")));
        Mat q = project(h, layer, "query", nullptr, Projection::Key);  // query is never adapted
        Mat k = project(h, layer, "key", adapter, Projection::Key);
        Mat v = project(h, layer, "value", adapter, Projection::Value);
        std::vector<Mat> heads;
        for (int hd = 0; hd < c.num_heads; ++hd) {
            Mat qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            Mat kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            Mat vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            Mat attn = softmax_rows(scale(matmul(qh, transpose(kh)), attn_scale));
            heads.push_back(matmul(attn, vh));
        }
        Mat merged = c.num_heads == 1 ? heads[0] : concat_cols(heads);
        x = add(x, linear(merged, w.at(p + "attn.out.weight"), w.at(p + "attn.out.bias")));
        Mat h2 = layer_norm(x, from(w.at(p + "ln2.gain")), from(w.at(p + "ln2.bias")));
        Mat m = gelu(linear(h2, w.at(p + "mlp.fc1.weight"), w.at(p + "mlp.fc1.bias")));
        x = add(x, linear(m, w.at(p + "mlp.fc2.weight"), w.at(p + "mlp.fc2.bias")));
    }
    x = layer_norm(x, from(w.at("final_norm.gain")), from(w.at("final_norm.bias")));
    Mat cls = slice_rows(x, 0, 1);
    return tanh_m(linear(cls, w.at("pooler.dense.weight"), w.at("pooler.dense.bias")));
}

inline Mat ref_head(const lorafuse::TaskHead& h, const Mat& features) {
    Mat hid = relu(linear(features, h.w1, h.b1));
    return linear(hid, h.w2, h.b2);
}

inline double ref_model_loss(const lorafuse::BackboneWeights& backbone,
                             const lorafuse::LoraAdapter* adapter, const lorafuse::TaskHead& head,
                             const std::vector<std::vector<float>>& batch, bool classification,
                             const std::vector<int>& cls, const lorafuse::TensorPtr& tgt) {
    std::vector<Mat> rows;
    for (const auto& img : batch) rows.push_back(ref_encode(backbone, adapter, img));
    Mat out = ref_head(head, concat_rows(rows));
    return classification ? cross_entropy(out, cls) : l1(out, from(tgt));
}

}  // namespace refops
