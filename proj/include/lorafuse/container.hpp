#pragma once

// Named-tensor container: magic "LTNS", u32 version, u32 metadata length,
// UTF-8 JSON metadata, then per tensor (sorted by name): u32 name length,
// name bytes, u8 rank, u32 dims[], raw little-endian f32 row-major payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/common.hpp"

namespace lorafuse {

struct NamedTensor {
    std::vector<int> shape;
    std::vector<float> data;
};

struct Container {
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, NamedTensor> tensors;  // map keeps names sorted

    size_t total_floats() const {
        size_t n = 0;
        for (const auto& [name, t] : tensors) n += t.data.size();
        return n;
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

inline void put_u32(std::string& out, uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    explicit ByteReader(const std::string& b) : buf(b) {}
    void need(size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw FormatError(std::string("container: truncated while reading ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[pos++]);
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline std::string serialize_container(const Container& c) {
    std::string out = "LTNS";
    detail::put_u32(out, 1u);
    const std::string meta = c.metadata.dump();
    detail::put_u32(out, static_cast<uint32_t>(meta.size()));
    out += meta;
    for (const auto& [name, t] : c.tensors) {
        detail::put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.shape.size()));
        for (int d : t.shape) detail::put_u32(out, static_cast<uint32_t>(d));
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    return out;
}

inline Container parse_container(const std::string& buf) {
    detail::ByteReader r(buf);
    if (r.bytes(4, "magic") != "LTNS") throw FormatError("container: bad magic, expected LTNS");
    uint32_t version = r.u32("version");
    if (version != 1) throw FormatError("container: unsupported version " + std::to_string(version));
    uint32_t meta_len = r.u32("metadata length");
    Container c;
    try {
        c.metadata = nlohmann::json::parse(r.bytes(meta_len, "metadata"));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("container: bad metadata JSON: ") + e.what());
    }
    while (r.pos < buf.size()) {
        uint32_t name_len = r.u32("name length");
        std::string name = r.bytes(name_len, "name");
        uint8_t rank = r.u8("rank");
        NamedTensor t;
        size_t n = 1;
        for (int i = 0; i < rank; ++i) {
            uint32_t d = r.u32("dimension");
            if (d == 0) throw FormatError("container: zero dimension in tensor " + name);
            t.shape.push_back(static_cast<int>(d));
            n *= d;
        }
        r.need(n * sizeof(float), "payload");
        t.data.resize(n);
        std::memcpy(t.data.data(), buf.data() + r.pos, n * sizeof(float));
        r.pos += n * sizeof(float);
        if (c.tensors.count(name)) throw FormatError("container: duplicate tensor " + name);
        c.tensors.emplace(std::move(name), std::move(t));
    }
    return c;
}

// Atomic write: to a temp file in the same directory, then rename.
inline void save_container(const Container& c, const std::filesystem::path& path) {
    const std::string bytes = serialize_container(c);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open for writing: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Container load_container(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_container(buf);
}

inline const NamedTensor& require_tensor(const Container& c, const std::string& name) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw FormatError("container: missing tensor \"" + name + "\"");
    return it->second;
}

inline const NamedTensor& require_tensor(const Container& c, const std::string& name,
                                         const std::vector<int>& shape) {
    const NamedTensor& t = require_tensor(c, name);
    if (t.shape != shape)
        throw FormatError("container: tensor \"" + name + "\" has shape " + shape_str(t.shape) +
                          ", expected " + shape_str(shape));
    return t;
}

}  // namespace lorafuse
