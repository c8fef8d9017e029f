#include "robumtl/serialize.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace robumtl {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
        table[i] = c;
    }
    return table;
}

struct ByteWriter {
    std::vector<uint8_t> buf;

    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u8(uint8_t v) { buf.push_back(v); }
    void u32(uint32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }
    void f32s(const float* p, size_t n) { raw(p, n * 4); }
};

struct ByteReader {
    const uint8_t* p;
    size_t size;
    size_t pos = 0;
    std::string what;

    void need(size_t n, const char* field) {
        if (pos + n > size)
            throw FormatError(what + ": truncated reading " + field, pos);
    }
    uint8_t u8(const char* field) {
        need(1, field);
        return p[pos++];
    }
    uint32_t u32(const char* field) {
        need(4, field);
        uint32_t v;
        std::memcpy(&v, p + pos, 4);
        pos += 4;
        return v;
    }
    float f32(const char* field) {
        need(4, field);
        float v;
        std::memcpy(&v, p + pos, 4);
        pos += 4;
        return v;
    }
    void bytes(void* dst, size_t n, const char* field) {
        need(n, field);
        std::memcpy(dst, p + pos, n);
        pos += n;
    }
};

std::vector<uint8_t> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    in.seekg(0, std::ios::end);
    auto n = static_cast<size_t>(in.tellg());
    in.seekg(0);
    std::vector<uint8_t> buf(n);
    if (n > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (!in) throw IoError("short read from '" + path.string() + "'");
    return buf;
}

void write_all(const std::filesystem::path& path, const std::vector<uint8_t>& buf) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

void check_magic(ByteReader& r) {
    char m[4];
    r.bytes(m, 4, "magic");
    if (std::memcmp(m, kMagic, 4) != 0)
        throw FormatError(r.what + ": bad magic, expected \"RMTL\"", 0);
}

void append_tensor_records(ByteWriter& w, const std::vector<NamedTensor>& tensors) {
    for (const auto& t : tensors) {
        w.u32(static_cast<uint32_t>(t.name.size()));
        w.raw(t.name.data(), t.name.size());
        w.u32(static_cast<uint32_t>(t.shape.size()));
        int64_t numel = 1;
        for (int64_t d : t.shape) {
            w.u32(static_cast<uint32_t>(d));
            numel *= d;
        }
        if (numel != static_cast<int64_t>(t.data.size()))
            throw ValidationError("tensor '" + t.name + "' data length does not match shape");
        w.f32s(t.data.data(), t.data.size());
    }
}

std::vector<NamedTensor> parse_tensor_records(ByteReader& r, uint32_t count) {
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        uint32_t name_len = r.u32("name length");
        if (name_len > 4096) throw FormatError(r.what + ": implausible tensor name length", r.pos - 4);
        t.name.resize(name_len);
        r.bytes(t.name.data(), name_len, "name");
        uint32_t ndim = r.u32("ndim");
        if (ndim > 8) throw FormatError(r.what + ": implausible tensor rank", r.pos - 4);
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            uint32_t dim = r.u32("dim");
            t.shape.push_back(static_cast<int64_t>(dim));
            numel *= dim;
        }
        t.data.resize(static_cast<size_t>(numel));
        r.bytes(t.data.data(), static_cast<size_t>(numel) * 4, "tensor data");
        tensors.push_back(std::move(t));
    }
    return tensors;
}

}  // namespace

uint32_t crc32(const void* data, size_t n, uint32_t seed) {
    static const std::array<uint32_t, 256> table = make_crc_table();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

uint64_t file_fnv1a(const std::filesystem::path& path) {
    auto buf = read_all(path);
    uint64_t h = 1469598103934665603ull;
    for (uint8_t b : buf) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

void write_image_file(const std::filesystem::path& path, const ImageData& img) {
    if (static_cast<int64_t>(img.data.size()) != img.c * img.h * img.w)
        throw ValidationError("image data length does not match C*H*W");
    ByteWriter w;
    w.raw(kMagic, 4);
    w.u32(static_cast<uint32_t>(img.c));
    w.u32(static_cast<uint32_t>(img.h));
    w.u32(static_cast<uint32_t>(img.w));
    w.f32s(img.data.data(), img.data.size());
    write_all(path, w.buf);
}

ImageData read_image_file(const std::filesystem::path& path) {
    auto buf = read_all(path);
    ByteReader r{buf.data(), buf.size(), 0, path.filename().string()};
    check_magic(r);
    ImageData img;
    img.c = r.u32("C");
    img.h = r.u32("H");
    img.w = r.u32("W");
    if (img.c <= 0 || img.h <= 0 || img.w <= 0 || img.c > 64 || img.h > 65536 || img.w > 65536)
        throw FormatError(r.what + ": implausible dimensions", 4);
    size_t n = static_cast<size_t>(img.c * img.h * img.w);
    img.data.resize(n);
    r.bytes(img.data.data(), n * 4, "pixel data");
    if (r.pos != buf.size())
        throw FormatError(r.what + ": trailing bytes after pixel data", r.pos);
    return img;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    ByteWriter payload;
    append_tensor_records(payload, tensors);
    ByteWriter w;
    w.raw(kMagic, 4);
    w.u32(kFileTypeCheckpoint);
    w.u32(static_cast<uint32_t>(tensors.size()));
    w.u32(crc32(payload.buf.data(), payload.buf.size()));
    w.raw(payload.buf.data(), payload.buf.size());
    write_all(path, w.buf);
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
    auto buf = read_all(path);
    ByteReader r{buf.data(), buf.size(), 0, path.filename().string()};
    check_magic(r);
    uint32_t type = r.u32("file type");
    if (type != kFileTypeCheckpoint)
        throw FormatError(r.what + ": not a checkpoint file (type " + std::to_string(type) + ")", 4);
    uint32_t count = r.u32("record count");
    uint32_t stored_crc = r.u32("crc");
    uint32_t actual_crc = crc32(buf.data() + 16, buf.size() - 16);
    if (stored_crc != actual_crc)
        throw FormatError(r.what + ": checksum mismatch", 12);
    return parse_tensor_records(r, count);
}

void write_expert_file(const std::filesystem::path& path, const ExpertFileMeta& meta,
                       const std::vector<NamedTensor>& tensors) {
    ByteWriter payload;
    payload.u8(meta.kind);
    payload.f32(meta.alpha);
    payload.u32(static_cast<uint32_t>(meta.schedule.size()));
    for (uint32_t r : meta.schedule) payload.u32(r);
    payload.u8(meta.has_squad ? 1 : 0);
    append_tensor_records(payload, tensors);
    ByteWriter w;
    w.raw(kMagic, 4);
    w.u32(kFileTypeExpert);
    w.u32(static_cast<uint32_t>(tensors.size()));
    w.u32(crc32(payload.buf.data(), payload.buf.size()));
    w.raw(payload.buf.data(), payload.buf.size());
    write_all(path, w.buf);
}

std::pair<ExpertFileMeta, std::vector<NamedTensor>> read_expert_file(
    const std::filesystem::path& path) {
    auto buf = read_all(path);
    ByteReader r{buf.data(), buf.size(), 0, path.filename().string()};
    check_magic(r);
    uint32_t type = r.u32("file type");
    if (type != kFileTypeExpert)
        throw FormatError(r.what + ": not an expert file (type " + std::to_string(type) + ")", 4);
    uint32_t count = r.u32("record count");
    uint32_t stored_crc = r.u32("crc");
    uint32_t actual_crc = crc32(buf.data() + 16, buf.size() - 16);
    if (stored_crc != actual_crc)
        throw FormatError(r.what + ": checksum mismatch", 12);
    ExpertFileMeta meta;
    meta.kind = r.u8("kind");
    meta.alpha = r.f32("alpha");
    uint32_t s = r.u32("schedule length");
    if (s > 16) throw FormatError(r.what + ": implausible schedule length", r.pos - 4);
    for (uint32_t i = 0; i < s; ++i) meta.schedule.push_back(r.u32("schedule rank"));
    meta.has_squad = r.u8("squad flag") != 0;
    return {meta, parse_tensor_records(r, count)};
}

}  // namespace robumtl
