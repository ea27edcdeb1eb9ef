#pragma once

// Dense float tensors with reverse-mode autodiff over the op set needed by
// the backbone, adapters, heads and losses. Graphs are built per forward
// pass (define-by-run); backward() walks the tape in reverse topological
// order and accumulates gradients additively across fan-out.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "lorafuse/common.hpp"

namespace lorafuse {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor {
public:
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // sized lazily, same length as data
    bool requires_grad = false;

    // Tape linkage. parents are the op inputs; backward_fn scatters the
    // output gradient into the parents' grad buffers.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (numel_of(shape) != data.size())
            throw ShapeError("tensor: " + std::to_string(data.size()) +
                             " values do not fill shape " + shape_str(shape));
    }

    size_t numel() const { return data.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
    void zero_grad() { grad.assign(data.size(), 0.0f); }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("tensor: nonpositive dimension in " + shape_str(s));
            n *= static_cast<size_t>(d);
        }
        return n;
    }
};

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<float> data,
                             bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

inline TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
    size_t n = Tensor::numel_of(shape);
    return make_tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

inline TensorPtr full(std::vector<int> shape, float v, bool requires_grad = false) {
    size_t n = Tensor::numel_of(shape);
    return make_tensor(std::move(shape), std::vector<float>(n, v), requires_grad);
}

namespace detail {

inline bool track(const std::vector<TensorPtr>& inputs) {
    for (const auto& t : inputs)
        if (t->requires_grad || t->backward_fn) return true;
    return false;
}

inline TensorPtr wire(TensorPtr out, std::vector<TensorPtr> parents,
                      std::function<void(Tensor&)> fn) {
    if (track(parents)) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(fn);
        out->requires_grad = true;
    }
    return out;
}

inline void require_2d(const Tensor& t, const char* who) {
    if (t.shape.size() != 2)
        throw ShapeError(std::string(who) + ": expected 2-d tensor, got shape " + shape_str(t.shape));
}

}  // namespace detail

// ---- core ops -------------------------------------------------------------

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    detail::require_2d(*a, "matmul");
    detail::require_2d(*b, "matmul");
    const int m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a->shape) +
                         " x " + shape_str(b->shape));
    auto out = zeros({m, n});
    const float* A = a->data.data();
    const float* B = b->data.data();
    float* C = out->data.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const float av = A[i * k + p];
            if (av == 0.0f) continue;
            const float* brow = B + p * n;
            float* crow = C + i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    return detail::wire(out, {a, b}, [a, b, m, k, n](Tensor& o) {
        const float* G = o.grad.data();
        if (a->requires_grad || a->backward_fn) {
            a->ensure_grad();
            // dA = G * B^T
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    float acc = 0.0f;
                    for (int j = 0; j < n; ++j)
                        acc += G[i * n + j] * b->data[p * n + j];
                    a->grad[i * k + p] += acc;
                }
        }
        if (b->requires_grad || b->backward_fn) {
            b->ensure_grad();
            // dB = A^T * G
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < n; ++j) {
                    float acc = 0.0f;
                    for (int i = 0; i < m; ++i)
                        acc += a->data[i * k + p] * G[i * n + j];
                    b->grad[p * n + j] += acc;
                }
        }
    });
}

inline TensorPtr transpose(const TensorPtr& x) {
    detail::require_2d(*x, "transpose");
    const int m = x->shape[0], n = x->shape[1];
    auto out = zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[j * m + i] = x->data[i * n + j];
    return detail::wire(out, {x}, [x, m, n](Tensor& o) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) x->grad[i * n + j] += o.grad[j * m + i];
    });
}

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = zeros(a->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    return detail::wire(out, {a, b}, [a, b](Tensor& o) {
        for (auto& p : {a, b}) {
            if (!p->requires_grad && !p->backward_fn) continue;
            p->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
        }
    });
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw ShapeError("mul: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = zeros(a->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    return detail::wire(out, {a, b}, [a, b](Tensor& o) {
        if (a->requires_grad || a->backward_fn) {
            a->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) a->grad[i] += o.grad[i] * b->data[i];
        }
        if (b->requires_grad || b->backward_fn) {
            b->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) b->grad[i] += o.grad[i] * a->data[i];
        }
    });
}

// Broadcast a length-n row vector over every row of an m x n matrix.
inline TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& bias) {
    detail::require_2d(*x, "add_rowvec");
    const int m = x->shape[0], n = x->shape[1];
    if (static_cast<int>(bias->numel()) != n)
        throw ShapeError("add_rowvec: bias length " + std::to_string(bias->numel()) +
                         " vs row width " + std::to_string(n));
    auto out = zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[i * n + j] = x->data[i * n + j] + bias->data[j];
    return detail::wire(out, {x, bias}, [x, bias, m, n](Tensor& o) {
        if (x->requires_grad || x->backward_fn) {
            x->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i];
        }
        if (bias->requires_grad || bias->backward_fn) {
            bias->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) bias->grad[j] += o.grad[i * n + j];
        }
    });
}

inline TensorPtr scale(const TensorPtr& x, float c) {
    auto out = zeros(x->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = x->data[i] * c;
    return detail::wire(out, {x}, [x, c](Tensor& o) {
        x->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i] * c;
    });
}

inline TensorPtr relu(const TensorPtr& x) {
    auto out = zeros(x->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = x->data[i] > 0.0f ? x->data[i] : 0.0f;
    return detail::wire(out, {x}, [x](Tensor& o) {
        x->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            if (x->data[i] > 0.0f) x->grad[i] += o.grad[i];
    });
}

// tanh-approximate GELU.
inline TensorPtr gelu(const TensorPtr& x) {
    static constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    static constexpr float kA = 0.044715f;
    auto out = zeros(x->shape);
    for (size_t i = 0; i < out->numel(); ++i) {
        const float v = x->data[i];
        out->data[i] = 0.5f * v * (1.0f + std::tanh(kC * (v + kA * v * v * v)));
    }
    return detail::wire(out, {x}, [x](Tensor& o) {
        x->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const float v = x->data[i];
            const float t = std::tanh(kC * (v + kA * v * v * v));
            const float d = 0.5f * (1.0f + t) +
                            0.5f * v * (1.0f - t * t) * kC * (1.0f + 3.0f * kA * v * v);
            x->grad[i] += o.grad[i] * d;
        }
    });
}

inline TensorPtr tanh_op(const TensorPtr& x) {
    auto out = zeros(x->shape);
    for (size_t i = 0; i < out->numel(); ++i) out->data[i] = std::tanh(x->data[i]);
    return detail::wire(out, {x}, [x](Tensor& o) {
        x->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const float y = o.data[i];
            x->grad[i] += o.grad[i] * (1.0f - y * y);
        }
    });
}

// Row-wise softmax with per-row max subtraction.
inline TensorPtr softmax_rows(const TensorPtr& x) {
    detail::require_2d(*x, "softmax_rows");
    const int m = x->shape[0], n = x->shape[1];
    for (float v : x->data)
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
    auto out = zeros({m, n});
    for (int i = 0; i < m; ++i) {
        const float* row = x->data.data() + i * n;
        float mx = *std::max_element(row, row + n);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            out->data[i * n + j] = std::exp(row[j] - mx);
            sum += out->data[i * n + j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < n; ++j) out->data[i * n + j] *= inv;
    }
    return detail::wire(out, {x}, [x, m, n](Tensor& o) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += static_cast<double>(o.grad[i * n + j]) * o.data[i * n + j];
            for (int j = 0; j < n; ++j)
                x->grad[i * n + j] +=
                    o.data[i * n + j] * (o.grad[i * n + j] - static_cast<float>(dot));
        }
    });
}

// Per-row normalization then affine with gain/bias of length n.
inline TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                            float eps = 1e-6f) {
    detail::require_2d(*x, "layer_norm");
    if (eps <= 0.0f) throw ConfigError("layer_norm: eps must be positive");
    const int m = x->shape[0], n = x->shape[1];
    if (static_cast<int>(gain->numel()) != n || static_cast<int>(bias->numel()) != n)
        throw ShapeError("layer_norm: gain/bias length must equal row width " + std::to_string(n));
    auto out = zeros({m, n});
    std::vector<float> inv_std(m), mean(m);
    for (int i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += x->data[i * n + j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double d = x->data[i * n + j] - mu;
            var += d * d;
        }
        var /= n;
        mean[i] = static_cast<float>(mu);
        inv_std[i] = static_cast<float>(1.0 / std::sqrt(var + eps));
        for (int j = 0; j < n; ++j) {
            float xhat = (x->data[i * n + j] - mean[i]) * inv_std[i];
            out->data[i * n + j] = gain->data[j] * xhat + bias->data[j];
        }
    }
    return detail::wire(out, {x, gain, bias},
                        [x, gain, bias, m, n, mean, inv_std](Tensor& o) {
        const bool need_x = x->requires_grad || x->backward_fn;
        const bool need_g = gain->requires_grad || gain->backward_fn;
        const bool need_b = bias->requires_grad || bias->backward_fn;
        if (need_x) x->ensure_grad();
        if (need_g) gain->ensure_grad();
        if (need_b) bias->ensure_grad();
        for (int i = 0; i < m; ++i) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            std::vector<float> xhat(n), dxhat(n);
            for (int j = 0; j < n; ++j) {
                xhat[j] = (x->data[i * n + j] - mean[i]) * inv_std[i];
                dxhat[j] = o.grad[i * n + j] * gain->data[j];
                sum_dxhat += dxhat[j];
                sum_dxhat_xhat += static_cast<double>(dxhat[j]) * xhat[j];
            }
            for (int j = 0; j < n; ++j) {
                if (need_x)
                    x->grad[i * n + j] +=
                        inv_std[i] * (dxhat[j] - static_cast<float>(sum_dxhat) / n -
                                      xhat[j] * static_cast<float>(sum_dxhat_xhat) / n);
                if (need_g) gain->grad[j] += o.grad[i * n + j] * xhat[j];
                if (need_b) bias->grad[j] += o.grad[i * n + j];
            }
        }
    });
}

inline TensorPtr slice_cols(const TensorPtr& x, int c0, int c1) {
    detail::require_2d(*x, "slice_cols");
    const int m = x->shape[0], n = x->shape[1];
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") for width " + std::to_string(n));
    const int w = c1 - c0;
    auto out = zeros({m, w});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out->data[i * w + j] = x->data[i * n + c0 + j];
    return detail::wire(out, {x}, [x, m, n, c0, w](Tensor& o) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) x->grad[i * n + c0 + j] += o.grad[i * w + j];
    });
}

inline TensorPtr slice_rows(const TensorPtr& x, int r0, int r1) {
    detail::require_2d(*x, "slice_rows");
    const int m = x->shape[0], n = x->shape[1];
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + ", " +
                         std::to_string(r1) + ") for height " + std::to_string(m));
    const int h = r1 - r0;
    auto out = zeros({h, n});
    std::copy_n(x->data.data() + r0 * n, static_cast<size_t>(h) * n, out->data.data());
    return detail::wire(out, {x}, [x, n, r0, h](Tensor& o) {
        x->ensure_grad();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < n; ++j) x->grad[(r0 + i) * n + j] += o.grad[i * n + j];
    });
}

inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int m = parts[0]->shape[0];
    int total = 0;
    for (const auto& p : parts) {
        detail::require_2d(*p, "concat_cols");
        if (p->shape[0] != m) throw ShapeError("concat_cols: row counts differ");
        total += p->shape[1];
    }
    auto out = zeros({m, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape[1];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) out->data[i * total + off + j] = p->data[i * w + j];
        off += w;
    }
    return detail::wire(out, parts, [parts, m, total](Tensor& o) {
        int off = 0;
        for (const auto& p : parts) {
            const int w = p->shape[1];
            if (p->requires_grad || p->backward_fn) {
                p->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j) p->grad[i * w + j] += o.grad[i * total + off + j];
            }
            off += w;
        }
    });
}

inline TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const int n = parts[0]->shape.size() == 2 ? parts[0]->shape[1] : 1;
    int total = 0;
    for (const auto& p : parts) {
        detail::require_2d(*p, "concat_rows");
        if (p->shape[1] != n) throw ShapeError("concat_rows: column counts differ");
        total += p->shape[0];
    }
    auto out = zeros({total, n});
    int off = 0;
    for (const auto& p : parts) {
        std::copy_n(p->data.data(), p->numel(), out->data.data() + static_cast<size_t>(off) * n);
        off += p->shape[0];
    }
    return detail::wire(out, parts, [parts, n](Tensor& o) {
        int off = 0;
        for (const auto& p : parts) {
            const int h = p->shape[0];
            if (p->requires_grad || p->backward_fn) {
                p->ensure_grad();
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < n; ++j) p->grad[i * n + j] += o.grad[(off + i) * n + j];
            }
            off += h;
        }
    });
}

inline TensorPtr sum_all(const TensorPtr& x) {
    double acc = 0.0;
    for (float v : x->data) acc += v;
    auto out = make_tensor({1}, {static_cast<float>(acc)});
    return detail::wire(out, {x}, [x](Tensor& o) {
        x->ensure_grad();
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += o.grad[0];
    });
}

inline TensorPtr mean_all(const TensorPtr& x) {
    const float inv = 1.0f / static_cast<float>(x->numel());
    double acc = 0.0;
    for (float v : x->data) acc += v;
    auto out = make_tensor({1}, {static_cast<float>(acc * inv)});
    return detail::wire(out, {x}, [x, inv](Tensor& o) {
        x->ensure_grad();
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += o.grad[0] * inv;
    });
}

// ---- losses ---------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[target]. Fused for stability.
inline TensorPtr cross_entropy_loss(const TensorPtr& logits, const std::vector<int>& targets) {
    detail::require_2d(*logits, "cross_entropy");
    const int m = logits->shape[0], k = logits->shape[1];
    if (static_cast<int>(targets.size()) != m)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for batch " + std::to_string(m));
    for (int t : targets)
        if (t < 0 || t >= k)
            throw DataError("cross_entropy: class index " + std::to_string(t) +
                            " out of range [0, " + std::to_string(k) + ")");
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(m) * k);
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const float* row = logits->data.data() + i * k;
        float mx = *std::max_element(row, row + k);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        for (int j = 0; j < k; ++j)
            (*probs)[i * k + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / sum);
        loss -= (static_cast<double>(row[targets[i]]) - mx - std::log(sum));
    }
    auto out = make_tensor({1}, {static_cast<float>(loss / m)});
    return detail::wire(out, {logits}, [logits, targets, probs, m, k](Tensor& o) {
        logits->ensure_grad();
        const float g = o.grad[0] / static_cast<float>(m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j) {
                float p = (*probs)[i * k + j];
                logits->grad[i * k + j] += g * (p - (j == targets[i] ? 1.0f : 0.0f));
            }
    });
}

// Mean absolute error over all entries.
inline TensorPtr l1_loss(const TensorPtr& pred, const TensorPtr& target) {
    if (pred->shape != target->shape)
        throw ShapeError("l1_loss: shape mismatch " + shape_str(pred->shape) + " vs " +
                         shape_str(target->shape));
    double acc = 0.0;
    for (size_t i = 0; i < pred->numel(); ++i) acc += std::abs(pred->data[i] - target->data[i]);
    const float inv = 1.0f / static_cast<float>(pred->numel());
    auto out = make_tensor({1}, {static_cast<float>(acc * inv)});
    return detail::wire(out, {pred, target}, [pred, target, inv](Tensor& o) {
        if (!pred->requires_grad && !pred->backward_fn) return;
        pred->ensure_grad();
        for (size_t i = 0; i < pred->numel(); ++i) {
            float d = pred->data[i] - target->data[i];
            float s = (d > 0.0f) ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
            pred->grad[i] += o.grad[0] * inv * s;
        }
    });
}

// ---- backward -------------------------------------------------------------

inline void backward(const TensorPtr& loss) {
    if (loss->numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    // reverse topological order over the tape
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> seen;
    std::function<void(const TensorPtr&)> visit = [&](const TensorPtr& t) {
        if (seen.count(t.get())) return;
        seen.insert(t.get());
        for (const auto& p : t->parents) visit(p);
        order.push_back(t.get());
    };
    visit(loss);
    loss->ensure_grad();
    loss->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* t = *it;
        if (t->backward_fn && !t->grad.empty()) t->backward_fn(*t);
    }
}

}  // namespace lorafuse
