#include "lloco/common.hpp"

#include <cstring>
#include <fstream>

namespace lloco {

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s, uint64_t seed) {
    return fnv1a64(s.data(), s.size(), seed);
}

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

namespace {

void put_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw corrupt_file_error("truncated file: expected 4 header bytes");
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

// floats are written component-wise little-endian so files are portable
void put_f32(std::ofstream& out, const std::vector<float>& data) {
    for (float f : data) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                              static_cast<unsigned char>((bits >> 8) & 0xff),
                              static_cast<unsigned char>((bits >> 16) & 0xff),
                              static_cast<unsigned char>((bits >> 24) & 0xff)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
}

} // namespace

void write_blob(const std::string& path, const char magic[4], uint32_t version,
                const std::string& header_json, const std::vector<float>& payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write(magic, 4);
    put_u32(out, version);
    put_u32(out, static_cast<uint32_t>(header_json.size()));
    out.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
    put_f32(out, payload);
    if (!out) throw std::runtime_error("write failed: " + path);
}

BlobFile read_blob(const std::string& path, const char magic[4], uint32_t expect_version) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw corrupt_file_error("cannot open: " + path);
    char m[4];
    in.read(m, 4);
    if (!in || std::memcmp(m, magic, 4) != 0)
        throw corrupt_file_error("bad magic in " + path);
    uint32_t version = get_u32(in);
    if (version != expect_version)
        throw version_mismatch_error("format version " + std::to_string(version) + " in " + path +
                                     ", expected " + std::to_string(expect_version));
    uint32_t header_len = get_u32(in);
    BlobFile blob;
    blob.header_json.resize(header_len);
    in.read(blob.header_json.data(), header_len);
    if (!in) throw corrupt_file_error("truncated header in " + path);

    std::vector<unsigned char> raw;
    {
        std::streampos here = in.tellg();
        in.seekg(0, std::ios::end);
        std::streamoff n = in.tellg() - here;
        in.seekg(here);
        if (n < 0 || (n % 4) != 0)
            throw corrupt_file_error("payload not a whole number of float32s in " + path);
        raw.resize(static_cast<size_t>(n));
        in.read(reinterpret_cast<char*>(raw.data()), n);
        if (!in) throw corrupt_file_error("truncated payload in " + path);
    }
    blob.payload.resize(raw.size() / 4);
    for (size_t i = 0; i < blob.payload.size(); ++i) {
        uint32_t bits = uint32_t(raw[4 * i]) | (uint32_t(raw[4 * i + 1]) << 8) |
                        (uint32_t(raw[4 * i + 2]) << 16) | (uint32_t(raw[4 * i + 3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        blob.payload[i] = f;
    }
    return blob;
}

std::vector<float> read_f32_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw corrupt_file_error("cannot open: " + path);
    in.seekg(0, std::ios::end);
    std::streamoff n = in.tellg();
    in.seekg(0);
    if (n < 0 || (n % 4) != 0) throw corrupt_file_error("size not a multiple of 4: " + path);
    std::vector<unsigned char> raw(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(raw.data()), n);
    if (!in) throw corrupt_file_error("read failed: " + path);
    std::vector<float> out(raw.size() / 4);
    for (size_t i = 0; i < out.size(); ++i) {
        uint32_t bits = uint32_t(raw[4 * i]) | (uint32_t(raw[4 * i + 1]) << 8) |
                        (uint32_t(raw[4 * i + 2]) << 16) | (uint32_t(raw[4 * i + 3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        out[i] = f;
    }
    return out;
}

void write_f32_file(const std::string& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    put_f32(out, data);
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw corrupt_file_error("cannot open: " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

} // namespace lloco
