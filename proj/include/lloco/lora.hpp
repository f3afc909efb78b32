#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lloco/model.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// low-rank adaptor
// ---------------------------------------------------------------------------

enum class Proj : uint8_t { query = 0, value = 1 };

const char* proj_name(Proj p);
Proj proj_from_name(const std::string& name); // throws config_error

struct LoraTargetSpec {
    int layer = 0;
    Proj proj = Proj::query;
    bool operator==(const LoraTargetSpec&) const = default;
};

struct LoraTarget {
    LoraTargetSpec where;
    Mat a; // r x d_in
    Mat b; // d_out x r, zero right after init
};

struct LoraAdaptor {
    std::string adaptor_id;
    std::string group_id;
    int rank = 8;
    float alpha = 16.0f;
    std::vector<LoraTarget> targets;

    double scale() const { return double(alpha) / double(rank); }
    const LoraTarget* find(int layer, Proj proj) const;
};

// query+value at every layer, the default target set
std::vector<LoraTargetSpec> default_lora_targets(int n_layers);

// A ~ small normal (seed-controlled), B = 0, so the applied delta starts as an
// exact no-op; throws config_error on an unknown target
LoraAdaptor init_adaptor(const ModelConfig& cfg, const std::string& group_id,
                         std::span<const LoraTargetSpec> targets, int rank, float alpha,
                         uint64_t seed);

// (alpha/r) * B(Ax); throws shape_error
std::vector<double> apply_delta(const LoraAdaptor& adaptor, const LoraTarget& target,
                                std::span<const double> x);

// W' = W + (alpha/r) * B*A folded into the frozen projections
Weights merge(const LoraAdaptor& adaptor, const Weights& weights);
Weights unmerge(const LoraAdaptor& adaptor, const Weights& merged);

// single-file format: JSON header + float32 A,B matrices in header order
void save_adaptor(const LoraAdaptor& adaptor, const std::string& path);
LoraAdaptor load_adaptor(const std::string& path); // corrupt_file_error / version_mismatch_error

// ---------------------------------------------------------------------------
// adaptor registry (one active adaptor per group)
// ---------------------------------------------------------------------------

struct AdaptorRecord {
    std::string adaptor_id;
    std::string group_id;
    std::string path; // relative to the registry directory
    int64_t created_at = 0; // unix seconds
    std::string train_config_digest;
    int version = 1; // bumped every time the group's adaptor is replaced
};

class AdaptorRegistry {
public:
    AdaptorRegistry() = default;
    explicit AdaptorRegistry(std::string dir) : dir_(std::move(dir)) {}

    // loads an existing manifest; a missing manifest is an empty registry
    static AdaptorRegistry open(const std::string& dir);

    // saves the adaptor file and records it as the group's active adaptor;
    // a previously active file is kept with a .vN suffix; the manifest is
    // replaced atomically
    AdaptorRecord register_adaptor(const LoraAdaptor& adaptor,
                                   const std::string& train_config_digest);

    std::optional<AdaptorRecord> lookup(const std::string& group_id) const;
    LoraAdaptor load(const AdaptorRecord& record) const;
    std::vector<AdaptorRecord> records() const;
    const std::string& dir() const { return dir_; }

private:
    std::string dir_;
    std::vector<AdaptorRecord> records_; // sorted by group_id
    void save_manifest() const;
};

} // namespace lloco
