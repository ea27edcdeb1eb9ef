#pragma once

// Dataset manifests (JSONL), the preprocessing transforms as pure manifest
// operations, PNG decode/encode, bilinear resize, and a deterministic
// synthetic multi-task generator for desk-scale runs.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lorafuse/common.hpp"
#include "lorafuse/multitask.hpp"

namespace lorafuse {

// ---- base64 ---------------------------------------------------------------

namespace detail {
inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}
}  // namespace detail

inline std::string base64_encode(const std::string& in) {
    const char* tab = detail::b64_alphabet();
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= in.size(); i += 3) {
        uint32_t v = (static_cast<uint8_t>(in[i]) << 16) | (static_cast<uint8_t>(in[i + 1]) << 8) |
                     static_cast<uint8_t>(in[i + 2]);
        out += tab[(v >> 18) & 63];
        out += tab[(v >> 12) & 63];
        out += tab[(v >> 6) & 63];
        out += tab[v & 63];
    }
    const size_t rem = in.size() - i;
    if (rem == 1) {
        uint32_t v = static_cast<uint8_t>(in[i]) << 16;
        out += tab[(v >> 18) & 63];
        out += tab[(v >> 12) & 63];
        out += "==";
    } else if (rem == 2) {
        uint32_t v = (static_cast<uint8_t>(in[i]) << 16) | (static_cast<uint8_t>(in[i + 1]) << 8);
        out += tab[(v >> 18) & 63];
        out += tab[(v >> 12) & 63];
        out += tab[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

inline std::string base64_decode(const std::string& in) {
    static const auto rev = [] {
        std::array<int8_t, 256> r;
        r.fill(-1);
        const char* tab = detail::b64_alphabet();
        for (int i = 0; i < 64; ++i) r[static_cast<uint8_t>(tab[i])] = static_cast<int8_t>(i);
        return r;
    }();
    std::string out;
    uint32_t buf = 0;
    int bits = 0;
    for (char c : in) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int8_t v = rev[static_cast<uint8_t>(c)];
        if (v < 0) throw FormatError("base64: invalid character");
        buf = (buf << 6) | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out += static_cast<char>((buf >> bits) & 0xff);
        }
    }
    return out;
}

// ---- PNG ------------------------------------------------------------------

// 8-bit image, interleaved pixels (gray or rgb), row-major
struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 1;  // 1 or 3
    std::vector<uint8_t> pixels;
};

inline RawImage png_decode(const std::string& bytes, int want_channels) {
    if (want_channels != 1 && want_channels != 3)
        throw ConfigError("png_decode: channels must be 1 or 3");
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw DataError(std::string("png: decode failed: ") + img.message);
    img.format = want_channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    RawImage out;
    out.width = static_cast<int>(img.width);
    out.height = static_cast<int>(img.height);
    out.channels = want_channels;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw DataError("png: decode failed: " + msg);
    }
    return out;
}

inline std::string png_encode(const RawImage& image) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
        throw DataError(std::string("png: encode sizing failed: ") + img.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
        throw DataError(std::string("png: encode failed: ") + img.message);
    out.resize(size);
    return out;
}

// ---- decode + resize + normalize ------------------------------------------

struct ImageLoadConfig {
    int size = 224;
    int channels = 3;
    std::vector<float> mean = {0.5f, 0.5f, 0.5f};
    std::vector<float> stddev = {0.5f, 0.5f, 0.5f};

    static ImageLoadConfig for_backbone(const BackboneConfig& c) {
        ImageLoadConfig lc;
        lc.size = c.image_size;
        lc.channels = c.channels;
        lc.mean.assign(c.channels, 0.5f);
        lc.stddev.assign(c.channels, 0.5f);
        return lc;
    }
};

// bilinear, pixel-center aligned; identity when sizes already match
inline std::vector<float> bilinear_resize(const std::vector<float>& src, int sw, int sh,
                                          int channels, int dw, int dh) {
    std::vector<float> dst(static_cast<size_t>(channels) * dw * dh);
    const float sx = static_cast<float>(sw) / dw, sy = static_cast<float>(sh) / dh;
    for (int c = 0; c < channels; ++c) {
        const float* plane = src.data() + static_cast<size_t>(c) * sw * sh;
        float* out = dst.data() + static_cast<size_t>(c) * dw * dh;
        for (int y = 0; y < dh; ++y) {
            float fy = (y + 0.5f) * sy - 0.5f;
            int y0 = static_cast<int>(std::floor(fy));
            float wy = fy - y0;
            int y0c = std::clamp(y0, 0, sh - 1), y1c = std::clamp(y0 + 1, 0, sh - 1);
            for (int x = 0; x < dw; ++x) {
                float fx = (x + 0.5f) * sx - 0.5f;
                int x0 = static_cast<int>(std::floor(fx));
                float wx = fx - x0;
                int x0c = std::clamp(x0, 0, sw - 1), x1c = std::clamp(x0 + 1, 0, sw - 1);
                float top = plane[y0c * sw + x0c] * (1 - wx) + plane[y0c * sw + x1c] * wx;
                float bot = plane[y1c * sw + x0c] * (1 - wx) + plane[y1c * sw + x1c] * wx;
                out[y * dw + x] = top * (1 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

// PNG bytes -> CHW float tensor data at the configured resolution
inline std::vector<float> load_image_bytes(const std::string& png_bytes,
                                           const ImageLoadConfig& cfg) {
    RawImage raw = png_decode(png_bytes, cfg.channels);
    // interleaved u8 -> planar float in [0, 1]
    std::vector<float> planar(static_cast<size_t>(cfg.channels) * raw.width * raw.height);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            for (int c = 0; c < cfg.channels; ++c)
                planar[(static_cast<size_t>(c) * raw.height + y) * raw.width + x] =
                    raw.pixels[(static_cast<size_t>(y) * raw.width + x) * cfg.channels + c] / 255.0f;
    std::vector<float> resized =
        bilinear_resize(planar, raw.width, raw.height, cfg.channels, cfg.size, cfg.size);
    for (int c = 0; c < cfg.channels; ++c) {
        const float m = cfg.mean[c], s = cfg.stddev[c];
        float* plane = resized.data() + static_cast<size_t>(c) * cfg.size * cfg.size;
        for (int i = 0; i < cfg.size * cfg.size; ++i) plane[i] = (plane[i] - m) / s;
    }
    return resized;
}

inline std::vector<float> load_image_file(const std::filesystem::path& path,
                                          const ImageLoadConfig& cfg) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("image: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return load_image_bytes(bytes, cfg);
}

// ---- manifests ------------------------------------------------------------

struct ManifestRecord {
    std::string path;        // exactly one of path / inline_b64 is set
    std::string inline_b64;  // base64 PNG bytes
    int class_target = -1;                 // classification
    std::vector<float> value_target;       // regression
    std::string split;                     // train | val | test
};

struct DatasetManifest {
    std::string task_name;
    TaskKind kind = TaskKind::Classification;
    int num_classes = 0;  // classification
    int out_dim = 0;      // regression
    std::vector<std::string> class_names;
    int left_eye_idx = -1;   // >= 0 marks a landmark task
    int right_eye_idx = -1;
    std::vector<ManifestRecord> records;

    bool is_landmark() const { return left_eye_idx >= 0 && right_eye_idx >= 0; }
    int target_width() const { return kind == TaskKind::Classification ? num_classes : out_dim; }

    std::vector<size_t> split_indices(const std::string& split) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < records.size(); ++i)
            if (records[i].split == split) out.push_back(i);
        return out;
    }

    void validate() const {
        for (size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            if (r.split != "train" && r.split != "val" && r.split != "test")
                throw DataError("manifest: record " + std::to_string(i) + " has split \"" +
                                r.split + "\"");
            if (kind == TaskKind::Classification) {
                if (r.class_target < 0 || r.class_target >= num_classes)
                    throw DataError("manifest: record " + std::to_string(i) +
                                    " class target out of range");
            } else if (static_cast<int>(r.value_target.size()) != out_dim) {
                throw DataError("manifest: record " + std::to_string(i) + " target width " +
                                std::to_string(r.value_target.size()) + ", expected " +
                                std::to_string(out_dim));
            }
        }
    }
};

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw DataError("manifest: cannot open for writing " + tmp.string());
        nlohmann::json header = {{"type", "manifest-header"},
                                 {"task_name", m.task_name},
                                 {"kind", task_kind_name(m.kind)},
                                 {"class_names", m.class_names}};
        if (m.kind == TaskKind::Classification)
            header["num_classes"] = m.num_classes;
        else
            header["out_dim"] = m.out_dim;
        if (m.is_landmark()) {
            header["left_eye_idx"] = m.left_eye_idx;
            header["right_eye_idx"] = m.right_eye_idx;
        }
        f << header.dump() << "\n";
        for (const auto& r : m.records) {
            nlohmann::json rec;
            if (!r.path.empty())
                rec["path"] = r.path;
            else
                rec["inline_b64"] = r.inline_b64;
            if (m.kind == TaskKind::Classification)
                rec["target"] = r.class_target;
            else
                rec["target"] = r.value_target;
            rec["split"] = r.split;
            f << rec.dump() << "\n";
        }
    }
    std::filesystem::rename(tmp, path);
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("manifest: cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw FormatError("manifest: empty file " + path.string());
    DatasetManifest m;
    try {
        nlohmann::json header = nlohmann::json::parse(line);
        if (header.value("type", "") != "manifest-header")
            throw FormatError("manifest: first line is not a manifest-header");
        m.task_name = header.at("task_name").get<std::string>();
        m.kind = task_kind_from_name(header.at("kind").get<std::string>());
        if (m.kind == TaskKind::Classification)
            m.num_classes = header.at("num_classes").get<int>();
        else
            m.out_dim = header.at("out_dim").get<int>();
        if (header.contains("class_names"))
            m.class_names = header["class_names"].get<std::vector<std::string>>();
        m.left_eye_idx = header.value("left_eye_idx", -1);
        m.right_eye_idx = header.value("right_eye_idx", -1);
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json rec = nlohmann::json::parse(line);
            ManifestRecord r;
            r.path = rec.value("path", "");
            r.inline_b64 = rec.value("inline_b64", "");
            if (m.kind == TaskKind::Classification)
                r.class_target = rec.at("target").get<int>();
            else
                r.value_target = rec.at("target").get<std::vector<float>>();
            r.split = rec.at("split").get<std::string>();
            m.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

inline std::vector<float> load_record_image(const ManifestRecord& r, const ImageLoadConfig& cfg,
                                            const std::filesystem::path& base_dir = {}) {
    if (!r.inline_b64.empty()) return load_image_bytes(base64_decode(r.inline_b64), cfg);
    std::filesystem::path p = r.path;
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return load_image_file(p, cfg);
}

// ---- preprocessing transforms ---------------------------------------------

// water, non-burnable -> 0; very-high, high, moderate -> 1; low, very-low -> 2
inline int remap_fire_risk(const std::string& label) {
    static const std::map<std::string, int> table = {
        {"water", 0},     {"non-burnable", 0}, {"very-high", 1}, {"high", 1},
        {"moderate", 1},  {"low", 2},          {"very-low", 2}};
    auto it = table.find(label);
    if (it == table.end()) throw DataError("fire risk: unknown label \"" + label + "\"");
    return it->second;
}

// bins 0-3, 4-16, 17-30, 31-45, 46-59, 60+
inline int bin_age(int age) {
    if (age < 0) throw DataError("age: negative age " + std::to_string(age));
    if (age <= 3) return 0;
    if (age <= 16) return 1;
    if (age <= 30) return 2;
    if (age <= 45) return 3;
    if (age <= 59) return 4;
    return 5;
}

// Uniform per-class subset up to cap, split proportions preserved per class.
inline DatasetManifest downsample_balanced(const DatasetManifest& m, size_t per_class_cap,
                                           uint64_t seed) {
    if (m.kind != TaskKind::Classification)
        throw ConfigError("downsample_balanced: classification manifests only");
    if (per_class_cap < 1) throw ConfigError("downsample_balanced: cap must be >= 1");
    Rng rng(static_cast<Rng::result_type>(seed));
    // class -> split -> record indices
    std::map<int, std::map<std::string, std::vector<size_t>>> groups;
    for (size_t i = 0; i < m.records.size(); ++i)
        groups[m.records[i].class_target][m.records[i].split].push_back(i);

    std::vector<size_t> keep;
    for (auto& [cls, splits] : groups) {
        size_t total = 0;
        for (auto& [s, idx] : splits) total += idx.size();
        if (total <= per_class_cap) {
            for (auto& [s, idx] : splits) keep.insert(keep.end(), idx.begin(), idx.end());
            continue;
        }
        // proportional quota per split, remainder to the largest fractions
        std::vector<std::pair<std::string, size_t>> quota;
        std::vector<std::pair<double, std::string>> frac;
        size_t assigned = 0;
        for (auto& [s, idx] : splits) {
            double exact = static_cast<double>(per_class_cap) * idx.size() / total;
            size_t q = static_cast<size_t>(exact);
            quota.emplace_back(s, q);
            frac.emplace_back(exact - q, s);
            assigned += q;
        }
        std::sort(frac.rbegin(), frac.rend());
        for (size_t i = 0; assigned < per_class_cap && i < frac.size(); ++i) {
            for (auto& [s, q] : quota)
                if (s == frac[i].second && q < splits[s].size()) {
                    ++q;
                    ++assigned;
                    break;
                }
        }
        for (auto& [s, q] : quota) {
            auto idx = splits[s];
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(std::min(q, idx.size()));
            std::sort(idx.begin(), idx.end());
            keep.insert(keep.end(), idx.begin(), idx.end());
        }
    }
    std::sort(keep.begin(), keep.end());
    DatasetManifest out = m;
    out.records.clear();
    for (size_t i : keep) out.records.push_back(m.records[i]);
    return out;
}

// Remove one class; surviving class indices compacted preserving order.
inline DatasetManifest drop_class(const DatasetManifest& m, const std::string& class_name) {
    if (m.kind != TaskKind::Classification)
        throw ConfigError("drop_class: classification manifests only");
    auto it = std::find(m.class_names.begin(), m.class_names.end(), class_name);
    if (it == m.class_names.end())
        throw DataError("drop_class: unknown class \"" + class_name + "\"");
    const int dropped = static_cast<int>(it - m.class_names.begin());
    DatasetManifest out = m;
    out.num_classes = m.num_classes - 1;
    out.class_names.erase(out.class_names.begin() + dropped);
    out.records.clear();
    for (const auto& r : m.records) {
        if (r.class_target == dropped) continue;
        ManifestRecord nr = r;
        if (nr.class_target > dropped) --nr.class_target;
        out.records.push_back(std::move(nr));
    }
    return out;
}

// ---- synthetic generator --------------------------------------------------

enum class SyntheticFamily {
    GratingOrientation,  // class = stripe orientation
    GratingFrequency,    // class = stripe frequency, same family as above
    CornerMarker,        // class = bright marker position
    Landmark             // regression: dots on an ellipse, 98 2-D points
};

inline const char* synthetic_family_name(SyntheticFamily f) {
    switch (f) {
        case SyntheticFamily::GratingOrientation: return "grating_orientation";
        case SyntheticFamily::GratingFrequency: return "grating_frequency";
        case SyntheticFamily::CornerMarker: return "corner_marker";
        case SyntheticFamily::Landmark: return "landmark";
    }
    throw ConfigError("bad synthetic family");
}

inline SyntheticFamily synthetic_family_from_name(const std::string& s) {
    if (s == "grating_orientation") return SyntheticFamily::GratingOrientation;
    if (s == "grating_frequency") return SyntheticFamily::GratingFrequency;
    if (s == "corner_marker") return SyntheticFamily::CornerMarker;
    if (s == "landmark") return SyntheticFamily::Landmark;
    throw ConfigError("unknown synthetic family \"" + s + "\"");
}

struct SyntheticTaskSpec {
    SyntheticFamily family = SyntheticFamily::GratingOrientation;
    std::string task_name = "synthetic";
    int num_classes = 2;       // classification families
    int num_landmarks = 98;    // landmark family
    float noise = 0.0f;        // stddev of additive pixel noise, [0, 1] scale
    int image_size = 16;
    int train_count = 128;
    int val_count = 32;
    int test_count = 32;
    uint64_t seed = 0;
};

namespace detail {

inline std::vector<uint8_t> to_u8(const std::vector<float>& img) {
    std::vector<uint8_t> out(img.size());
    for (size_t i = 0; i < img.size(); ++i)
        out[i] = static_cast<uint8_t>(std::lround(std::clamp(img[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

inline void add_noise(std::vector<float>& img, float noise, Rng& rng) {
    if (noise <= 0.0f) return;
    std::normal_distribution<float> dist(0.0f, noise);
    for (auto& v : img) v += dist(rng);
}

struct SyntheticSample {
    std::vector<float> image;  // [0, 1] gray, size x size
    int class_target = -1;
    std::vector<float> value_target;
};

inline SyntheticSample make_sample(const SyntheticTaskSpec& spec, Rng& rng) {
    const int s = spec.image_size;
    SyntheticSample out;
    out.image.assign(static_cast<size_t>(s) * s, 0.0f);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    switch (spec.family) {
        case SyntheticFamily::GratingOrientation: {
            const int cls = std::uniform_int_distribution<int>(0, spec.num_classes - 1)(rng);
            const float theta = static_cast<float>(M_PI) * cls / spec.num_classes;
            const float freq = 2.0f;
            const float amp = 0.8f + 0.2f * unit(rng);
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    float u = (x * std::cos(theta) + y * std::sin(theta)) / s;
                    float v = std::sin(2.0f * static_cast<float>(M_PI) * freq * u) > 0 ? 1.0f : 0.0f;
                    out.image[y * s + x] = 0.5f + amp * (v - 0.5f);
                }
            out.class_target = cls;
            break;
        }
        case SyntheticFamily::GratingFrequency: {
            const int cls = std::uniform_int_distribution<int>(0, spec.num_classes - 1)(rng);
            const float freq = 1.0f + 2.0f * cls;
            const float amp = 0.8f + 0.2f * unit(rng);
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    float v = std::sin(2.0f * static_cast<float>(M_PI) * freq * x / s) > 0 ? 1.0f : 0.0f;
                    out.image[y * s + x] = 0.5f + amp * (v - 0.5f);
                }
            out.class_target = cls;
            break;
        }
        case SyntheticFamily::CornerMarker: {
            const int cls = std::uniform_int_distribution<int>(0, spec.num_classes - 1)(rng);
            // marker anchors walk the border clockwise from top-left
            const int positions[8][2] = {{0, 0}, {1, 0}, {2, 0}, {2, 1},
                                         {2, 2}, {1, 2}, {0, 2}, {0, 1}};
            if (spec.num_classes > 8) throw ConfigError("corner_marker: at most 8 classes");
            const int mk = std::max(2, s / 4);
            const int cx = positions[cls][0] * (s - mk) / 2;
            const int cy = positions[cls][1] * (s - mk) / 2;
            const float amp = 0.8f + 0.2f * unit(rng);
            for (int y = 0; y < mk; ++y)
                for (int x = 0; x < mk; ++x) out.image[(cy + y) * s + cx + x] = amp;
            out.class_target = cls;
            break;
        }
        case SyntheticFamily::Landmark: {
            const float cx = s * (0.4f + 0.2f * unit(rng));
            const float cy = s * (0.4f + 0.2f * unit(rng));
            const float rx = s * (0.15f + 0.15f * unit(rng));
            const float ry = s * (0.15f + 0.15f * unit(rng));
            out.value_target.reserve(spec.num_landmarks * 2);
            for (int j = 0; j < spec.num_landmarks; ++j) {
                const float ang = 2.0f * static_cast<float>(M_PI) * j / spec.num_landmarks;
                const float px = cx + rx * std::cos(ang);
                const float py = cy + ry * std::sin(ang);
                const int ix = std::clamp(static_cast<int>(std::lround(px)), 0, s - 1);
                const int iy = std::clamp(static_cast<int>(std::lround(py)), 0, s - 1);
                out.image[iy * s + ix] = 1.0f;
                // targets normalized by image side
                out.value_target.push_back(px / s);
                out.value_target.push_back(py / s);
            }
            break;
        }
    }
    add_noise(out.image, spec.noise, rng);
    return out;
}

}  // namespace detail

inline DatasetManifest generate_synthetic(const SyntheticTaskSpec& spec) {
    if (spec.image_size < 4) throw ConfigError("synthetic: image_size too small");
    DatasetManifest m;
    m.task_name = spec.task_name;
    if (spec.family == SyntheticFamily::Landmark) {
        m.kind = TaskKind::Regression;
        m.out_dim = spec.num_landmarks * 2;
        // outer-corner convention from the 98-point scheme
        m.left_eye_idx = std::min(60, spec.num_landmarks - 1);
        m.right_eye_idx = std::min(72, spec.num_landmarks - 1);
    } else {
        m.kind = TaskKind::Classification;
        m.num_classes = spec.num_classes;
        for (int c = 0; c < spec.num_classes; ++c) m.class_names.push_back("class_" + std::to_string(c));
    }
    Rng rng(static_cast<Rng::result_type>(spec.seed));
    const std::vector<std::pair<std::string, int>> splits = {
        {"train", spec.train_count}, {"val", spec.val_count}, {"test", spec.test_count}};
    for (const auto& [split, count] : splits)
        for (int i = 0; i < count; ++i) {
            detail::SyntheticSample sample = detail::make_sample(spec, rng);
            RawImage raw;
            raw.width = raw.height = spec.image_size;
            raw.channels = 1;
            raw.pixels = detail::to_u8(sample.image);
            ManifestRecord r;
            r.inline_b64 = base64_encode(png_encode(raw));
            r.class_target = sample.class_target;
            r.value_target = std::move(sample.value_target);
            r.split = split;
            m.records.push_back(std::move(r));
        }
    m.validate();
    return m;
}

}  // namespace lorafuse
