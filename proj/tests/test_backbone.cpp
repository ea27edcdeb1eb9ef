#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "lorafuse/backbone.hpp"
#include "test_support.hpp"

using namespace lorafuse;
namespace fs = std::filesystem;

namespace {

fs::path tmp_file(const char* name) {
    fs::path p = fs::temp_directory_path() / "lorafuse_tests";
    fs::create_directories(p);
    return p / name;
}

std::vector<float> random_image(const BackboneConfig& c, Rng& rng) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> img(static_cast<size_t>(c.channels) * c.image_size * c.image_size);
    for (auto& v : img) v = dist(rng);
    return img;
}

// ---- straight-line reference encoder (independent of the tensor library) ---

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const TensorPtr& t) {
    Mat m(t->shape[0], std::vector<double>(t->shape[1]));
    for (int i = 0; i < t->shape[0]; ++i)
        for (int j = 0; j < t->shape[1]; ++j) m[i][j] = t->data[i * t->shape[1] + j];
    return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t k = 0; k < b.size(); ++k)
            for (size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

Mat mat_t(const Mat& a) {
    Mat c(a[0].size(), std::vector<double>(a.size()));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < a[0].size(); ++j) c[j][i] = a[i][j];
    return c;
}

// rows x W^T + bias, torch-style [out x in] weight
Mat ref_linear(const Mat& x, const TensorPtr& w, const TensorPtr& b) {
    Mat r = mat_mul(x, mat_t(to_mat(w)));
    for (auto& row : r)
        for (size_t j = 0; j < row.size(); ++j) row[j] += b->data[j];
    return r;
}

Mat ref_layernorm(const Mat& x, const TensorPtr& g, const TensorPtr& b, double eps = 1e-6) {
    Mat r = x;
    for (auto& row : r) {
        double mu = 0;
        for (double v : row) mu += v;
        mu /= row.size();
        double var = 0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= row.size();
        for (size_t j = 0; j < row.size(); ++j)
            row[j] = g->data[j] * (row[j] - mu) / std::sqrt(var + eps) + b->data[j];
    }
    return r;
}

Mat ref_softmax_rows(Mat x) {
    for (auto& row : x) {
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0;
        for (auto& v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (auto& v : row) v /= sum;
    }
    return x;
}

std::vector<double> ref_encode(const BackboneWeights& w, const std::vector<float>& image) {
    const BackboneConfig& c = w.config;
    // patchify
    const int side = c.image_size / c.patch_size, ps = c.patch_size;
    Mat tokens(c.num_patches(), std::vector<double>(c.patch_dim()));
    for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
            int idx = 0;
            for (int ch = 0; ch < c.channels; ++ch)
                for (int y = 0; y < ps; ++y)
                    for (int x = 0; x < ps; ++x)
                        tokens[py * side + px][idx++] =
                            image[((size_t)ch * c.image_size + py * ps + y) * c.image_size +
                                  px * ps + x];
        }
    Mat x = ref_linear(tokens, w.at("embed.patch.weight"), w.at("embed.patch.bias"));
    // class token + positions
    Mat seq(c.seq_len(), std::vector<double>(c.hidden_dim));
    for (int j = 0; j < c.hidden_dim; ++j) seq[0][j] = w.at("embed.cls_token")->data[j];
    for (int i = 0; i < c.num_patches(); ++i) seq[i + 1] = x[i];
    for (int i = 0; i < c.seq_len(); ++i)
        for (int j = 0; j < c.hidden_dim; ++j)
            seq[i][j] += w.at("embed.pos")->data[i * c.hidden_dim + j];
    const int dh = c.head_dim();
    for (int layer = 0; layer < c.num_layers; ++layer) {
        const std::string p = "encoder." + std::to_string(layer) + ".";
        Mat h = ref_layernorm(seq, w.at(p + "ln1.gain"), w.at(p + "ln1.bias"));
        Mat q = ref_linear(h, w.at(p + "attn.query.weight"), w.at(p + "attn.query.bias"));
        Mat k = ref_linear(h, w.at(p + "attn.key.weight"), w.at(p + "attn.key.bias"));
        Mat v = ref_linear(h, w.at(p + "attn.value.weight"), w.at(p + "attn.value.bias"));
        Mat merged(c.seq_len(), std::vector<double>(c.hidden_dim));
        for (int head = 0; head < c.num_heads; ++head) {
            Mat qh(c.seq_len(), std::vector<double>(dh)), kh = qh, vh = qh;
            for (int i = 0; i < c.seq_len(); ++i)
                for (int j = 0; j < dh; ++j) {
                    qh[i][j] = q[i][head * dh + j];
                    kh[i][j] = k[i][head * dh + j];
                    vh[i][j] = v[i][head * dh + j];
                }
            Mat scores = mat_mul(qh, mat_t(kh));
            for (auto& row : scores)
                for (auto& s : row) s /= std::sqrt((double)dh);
            Mat oh = mat_mul(ref_softmax_rows(scores), vh);
            for (int i = 0; i < c.seq_len(); ++i)
                for (int j = 0; j < dh; ++j) merged[i][head * dh + j] = oh[i][j];
        }
        Mat attn_out = ref_linear(merged, w.at(p + "attn.out.weight"), w.at(p + "attn.out.bias"));
        for (int i = 0; i < c.seq_len(); ++i)
            for (int j = 0; j < c.hidden_dim; ++j) seq[i][j] += attn_out[i][j];
        Mat h2 = ref_layernorm(seq, w.at(p + "ln2.gain"), w.at(p + "ln2.bias"));
        Mat m = ref_linear(h2, w.at(p + "mlp.fc1.weight"), w.at(p + "mlp.fc1.bias"));
        for (auto& row : m)
            for (auto& vv : row) {
                const double t = std::tanh(0.7978845608028654 * (vv + 0.044715 * vv * vv * vv));
                vv = 0.5 * vv * (1.0 + t);
            }
        Mat m2 = ref_linear(m, w.at(p + "mlp.fc2.weight"), w.at(p + "mlp.fc2.bias"));
        for (int i = 0; i < c.seq_len(); ++i)
            for (int j = 0; j < c.hidden_dim; ++j) seq[i][j] += m2[i][j];
    }
    seq = ref_layernorm(seq, w.at("final_norm.gain"), w.at("final_norm.bias"));
    Mat cls = {seq[0]};
    Mat pooled = ref_linear(cls, w.at("pooler.dense.weight"), w.at("pooler.dense.bias"));
    std::vector<double> out(c.hidden_dim);
    for (int j = 0; j < c.hidden_dim; ++j) out[j] = std::tanh(pooled[0][j]);
    return out;
}

}  // namespace

TEST_CASE("patchify: single patch, block indexing, shape arithmetic") {
    BackboneConfig c;
    c.image_size = 4;
    c.patch_size = 4;
    c.channels = 1;
    c.hidden_dim = 8;
    c.num_layers = 1;
    c.num_heads = 2;
    c.mlp_dim = 8;
    std::vector<float> img(16);
    for (int i = 0; i < 16; ++i) img[i] = static_cast<float>(i);
    auto one = patchify(img, c);
    CHECK(one->shape == std::vector<int>{1, 16});
    for (int i = 0; i < 16; ++i) CHECK(one->data[i] == static_cast<float>(i));

    c.patch_size = 2;
    auto four = patchify(img, c);
    CHECK(four->shape == std::vector<int>{4, 4});
    // patch 0 is the top-left 2x2 block: pixels (0,0),(0,1),(1,0),(1,1)
    CHECK(four->data[0] == 0.0f);
    CHECK(four->data[1] == 1.0f);
    CHECK(four->data[2] == 4.0f);
    CHECK(four->data[3] == 5.0f);
    // patch 1 is the top-right block
    CHECK(four->data[4] == 2.0f);

    BackboneConfig c3;
    c3.image_size = 6;
    c3.patch_size = 2;
    c3.channels = 3;
    c3.hidden_dim = 8;
    c3.num_heads = 2;
    std::vector<float> img3(3 * 36, 0.0f);
    auto nine = patchify(img3, c3);
    CHECK(nine->shape == std::vector<int>{9, 12});

    CHECK_THROWS_AS(patchify(std::vector<float>(5), c), ConfigError);
}

TEST_CASE("forward shape, determinism and batch equivariance") {
    auto cfg = BackboneConfig::desk_scale();
    auto w = init_backbone(cfg, 7);
    Rng rng(1);
    std::vector<std::vector<float>> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_image(cfg, rng));

    auto out = backbone_forward(w, batch);
    CHECK(out->shape == std::vector<int>{3, cfg.hidden_dim});

    auto out2 = backbone_forward(w, batch);
    CHECK(out->data == out2->data);

    for (int i = 0; i < 3; ++i) {
        auto solo = backbone_forward(w, {batch[i]});
        for (int j = 0; j < cfg.hidden_dim; ++j)
            CHECK(std::abs(solo->data[j] - out->data[i * cfg.hidden_dim + j]) < 1e-6);
    }
}

TEST_CASE("zero-B adapter leaves the forward bitwise unchanged") {
    auto cfg = BackboneConfig::desk_scale();
    auto w = init_backbone(cfg, 3);
    LoraConfig lc;
    lc.rank = 4;
    lc.alpha = 4;
    auto adapter = init_adapter(lc, cfg.hidden_dim, cfg.num_layers, "fresh", 9);
    Rng rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::vector<float>> batch = {random_image(cfg, rng), random_image(cfg, rng)};
        auto plain = backbone_forward(w, batch);
        auto adapted = backbone_forward(w, batch, &adapter);
        CHECK(plain->data == adapted->data);
    }
}

TEST_CASE("forward matches the straight-line reference on a tiny config") {
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.hidden_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.mlp_dim = 16;
    auto w = init_backbone(cfg, 1234);
    Rng rng(5);
    for (int trial = 0; trial < 3; ++trial) {
        auto img = random_image(cfg, rng);
        auto got = backbone_forward(w, {img});
        auto want = ref_encode(w, img);
        for (int j = 0; j < cfg.hidden_dim; ++j)
            CHECK(got->data[j] == doctest::Approx(want[j]).epsilon(1e-5));
    }
}

TEST_CASE("adapter deltas shift key/value exactly as dense matrices say") {
    // the adapted forward equals a reference forward whose K/V weights are
    // W + delta
    BackboneConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.hidden_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.mlp_dim = 16;
    auto w = init_backbone(cfg, 55);
    auto adapter = testutil::random_adapter(2, cfg.hidden_dim, cfg.num_layers, "t", 66);
    // scale down so float error stays small
    for (auto& [key, fp] : adapter.factors)
        for (auto* t : {fp.first.get(), fp.second.get()})
            for (auto& v : t->data) v *= 0.1f;

    BackboneWeights dense = load_backbone([&] {
        auto p = fs::temp_directory_path() / "lorafuse_tests" / "bb_dense.ltns";
        fs::create_directories(p.parent_path());
        save_backbone(w, p);
        return p;
    }());
    for (int layer = 0; layer < cfg.num_layers; ++layer)
        for (auto proj : {Projection::Key, Projection::Value}) {
            auto delta = effective_delta(adapter, layer, proj);
            auto& wt = dense.params.at("encoder." + std::to_string(layer) + ".attn." +
                                       projection_name(proj) + ".weight");
            for (size_t i = 0; i < wt->numel(); ++i) wt->data[i] += delta[i];
        }

    Rng rng(8);
    auto img = random_image(cfg, rng);
    auto got = backbone_forward(w, {img}, &adapter);
    auto want = ref_encode(dense, img);
    for (int j = 0; j < cfg.hidden_dim; ++j)
        CHECK(got->data[j] == doctest::Approx(want[j]).epsilon(1e-4));
}

TEST_CASE("incompatible adapter is rejected with layer info") {
    auto cfg = BackboneConfig::desk_scale();
    auto w = init_backbone(cfg, 3);
    auto bad = testutil::random_adapter(2, cfg.hidden_dim * 2, cfg.num_layers, "bad", 1);
    Rng rng(4);
    std::vector<std::vector<float>> batch = {random_image(cfg, rng)};
    CHECK_THROWS_AS(backbone_forward(w, batch, &bad), CompatError);
}

TEST_CASE("backbone container round-trip and error cases") {
    auto cfg = BackboneConfig::desk_scale();
    auto w = init_backbone(cfg, 99);
    auto path = tmp_file("bb_rt.ltns");
    save_backbone(w, path);
    auto w2 = load_backbone(path);
    CHECK(w2.checksum() == w.checksum());
    for (const auto& [name, t] : w.params) CHECK(w2.at(name)->data == t->data);

    Container c = load_container(path);
    SUBCASE("missing pooler tensor is named") {
        c.tensors.erase("pooler.dense.weight");
        save_container(c, path);
        CHECK_THROWS_WITH_AS(load_backbone(path), doctest::Contains("pooler.dense.weight"),
                             FormatError);
    }
    SUBCASE("wrong shape names expected and found") {
        auto t = c.tensors["embed.patch.bias"];
        t.shape = {t.shape[0] + 1};
        t.data.resize(t.shape[0]);
        c.tensors["embed.patch.bias"] = t;
        save_container(c, path);
        CHECK_THROWS_WITH_AS(load_backbone(path), doctest::Contains("expected"), FormatError);
    }
    SUBCASE("bad magic") {
        std::string bytes = serialize_container(c);
        bytes[0] = 'X';
        CHECK_THROWS_AS(parse_container(bytes), FormatError);
    }
}
