#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lloco {

// ---------------------------------------------------------------------------
// error types
// ---------------------------------------------------------------------------

// combined sequence length would exceed the decoder window
struct window_overflow_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// file is unreadable, truncated, or fails its structural checks
struct corrupt_file_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct version_mismatch_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct not_found_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct empty_store_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// retrieved passages span more than one document group under strict policy
struct mixed_group_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// training loss became non-finite
struct divergence_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// deterministic rng
// ---------------------------------------------------------------------------

// FNV-1a, used for seed derivation and config digests
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(const std::string& s, uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(uint64_t v);

// mt19937_64 with an explicit Box-Muller normal so draws are identical
// across standard library implementations
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform() { // [0, 1)
        return (gen_() >> 11) * 0x1.0p-53;
    }
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }
    uint64_t next_u64() { return gen_(); }
    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do { v = gen_(); } while (v >= lim);
        return v % n;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// independent stream per (seed, name)
inline uint64_t derive_seed(uint64_t seed, const std::string& name) {
    return fnv1a64(name, seed ^ 0x9e3779b97f4a7c15ull);
}

// ---------------------------------------------------------------------------
// little-endian float32 blob files:  magic(4) | u32 version | u32 header_len |
// header JSON bytes | payload
// ---------------------------------------------------------------------------

struct BlobFile {
    std::string header_json;
    std::vector<float> payload;
};

void write_blob(const std::string& path, const char magic[4], uint32_t version,
                const std::string& header_json, const std::vector<float>& payload);

// throws corrupt_file_error / version_mismatch_error
BlobFile read_blob(const std::string& path, const char magic[4], uint32_t expect_version);

// raw byte helpers
std::vector<float> read_f32_file(const std::string& path);
void write_f32_file(const std::string& path, const std::vector<float>& data);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

} // namespace lloco
