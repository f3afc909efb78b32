#include "lloco/lora.hpp"

#include <algorithm>
#include <ctime>
#include <filesystem>

#include <json.hpp>

#include "lloco/common.hpp"

namespace lloco {

namespace fs = std::filesystem;
using json = nlohmann::json;

static constexpr char kAdaptorMagic[4] = {'L', 'L', 'R', 'A'};
static constexpr uint32_t kAdaptorVersion = 1;
static constexpr uint32_t kRegistryVersion = 1;

const char* proj_name(Proj p) { return p == Proj::query ? "query" : "value"; }

Proj proj_from_name(const std::string& name) {
    if (name == "query") return Proj::query;
    if (name == "value") return Proj::value;
    throw config_error("unknown projection '" + name + "' (expected query or value)");
}

const LoraTarget* LoraAdaptor::find(int layer, Proj proj) const {
    for (const LoraTarget& t : targets)
        if (t.where.layer == layer && t.where.proj == proj) return &t;
    return nullptr;
}

std::vector<LoraTargetSpec> default_lora_targets(int n_layers) {
    std::vector<LoraTargetSpec> out;
    out.reserve(size_t(n_layers) * 2);
    for (int l = 0; l < n_layers; ++l) {
        out.push_back({l, Proj::query});
        out.push_back({l, Proj::value});
    }
    return out;
}

LoraAdaptor init_adaptor(const ModelConfig& cfg, const std::string& group_id,
                         std::span<const LoraTargetSpec> targets, int rank, float alpha,
                         uint64_t seed) {
    if (rank < 1) throw config_error("lora rank must be >= 1");
    if (alpha <= 0.0f) throw config_error("lora alpha must be > 0");
    LoraAdaptor ad;
    ad.adaptor_id = group_id + "-r" + std::to_string(rank) + "-" + hex64(derive_seed(seed, group_id));
    ad.group_id = group_id;
    ad.rank = rank;
    ad.alpha = alpha;
    for (const LoraTargetSpec& spec : targets) {
        if (spec.layer < 0 || spec.layer >= cfg.n_layers)
            throw config_error("lora target layer " + std::to_string(spec.layer) +
                               " outside [0, " + std::to_string(cfg.n_layers) + ")");
        if (ad.find(spec.layer, spec.proj))
            throw config_error("duplicate lora target layer " + std::to_string(spec.layer) + " " +
                               proj_name(spec.proj));
        LoraTarget t;
        t.where = spec;
        t.a = Mat(rank, cfg.d_model);
        t.b = Mat(cfg.d_model, rank); // zeros: the delta starts as an exact no-op
        Rng rng(derive_seed(seed, "lora." + std::to_string(spec.layer) + "." +
                                      proj_name(spec.proj) + ".a"));
        for (float& v : t.a.w) v = float(rng.normal() * 0.02);
        ad.targets.push_back(std::move(t));
    }
    return ad;
}

std::vector<double> apply_delta(const LoraAdaptor& adaptor, const LoraTarget& target,
                                std::span<const double> x) {
    const Mat& a = target.a;
    const Mat& b = target.b;
    if (static_cast<int>(x.size()) != a.cols)
        throw shape_error("lora input size " + std::to_string(x.size()) + " != " +
                          std::to_string(a.cols));
    if (b.cols != a.rows) throw shape_error("lora A/B rank mismatch");
    std::vector<double> u(a.rows, 0.0);
    for (int r = 0; r < a.rows; ++r) {
        const float* ar = a.row(r);
        double acc = 0.0;
        for (int c = 0; c < a.cols; ++c) acc += double(ar[c]) * x[c];
        u[r] = acc;
    }
    const double s = adaptor.scale();
    std::vector<double> out(b.rows, 0.0);
    for (int r = 0; r < b.rows; ++r) {
        const float* br = b.row(r);
        double acc = 0.0;
        for (int c = 0; c < b.cols; ++c) acc += double(br[c]) * u[c];
        out[r] = s * acc;
    }
    return out;
}

static Mat& proj_mat(Weights& w, const LoraTargetSpec& spec) {
    LayerWeights& lw = w.layers.at(spec.layer);
    return spec.proj == Proj::query ? lw.wq : lw.wv;
}

static Weights fold(const LoraAdaptor& adaptor, const Weights& weights, double sign) {
    Weights out = weights;
    const double s = adaptor.scale() * sign;
    for (const LoraTarget& t : adaptor.targets) {
        Mat& wm = proj_mat(out, t.where);
        if (wm.rows != t.b.rows || wm.cols != t.a.cols)
            throw shape_error("adaptor shape does not match projection");
        for (int r = 0; r < wm.rows; ++r) {
            const float* br = t.b.row(r);
            for (int c = 0; c < wm.cols; ++c) {
                double acc = 0.0;
                for (int k = 0; k < t.a.rows; ++k) acc += double(br[k]) * double(t.a.at(k, c));
                wm.at(r, c) = float(double(wm.at(r, c)) + s * acc);
            }
        }
    }
    return out;
}

Weights merge(const LoraAdaptor& adaptor, const Weights& weights) {
    return fold(adaptor, weights, 1.0);
}

Weights unmerge(const LoraAdaptor& adaptor, const Weights& merged) {
    return fold(adaptor, merged, -1.0);
}

// ---------------------------------------------------------------------------
// adaptor file
// ---------------------------------------------------------------------------

void save_adaptor(const LoraAdaptor& adaptor, const std::string& path) {
    json targets = json::array();
    std::vector<float> payload;
    for (const LoraTarget& t : adaptor.targets) {
        targets.push_back({{"layer", t.where.layer},
                           {"proj", proj_name(t.where.proj)},
                           {"a_shape", {t.a.rows, t.a.cols}},
                           {"b_shape", {t.b.rows, t.b.cols}}});
        payload.insert(payload.end(), t.a.w.begin(), t.a.w.end());
        payload.insert(payload.end(), t.b.w.begin(), t.b.w.end());
    }
    json header = {{"adaptor_id", adaptor.adaptor_id},
                   {"group_id", adaptor.group_id},
                   {"rank", adaptor.rank},
                   {"alpha", adaptor.alpha},
                   {"targets", targets}};
    write_blob(path, kAdaptorMagic, kAdaptorVersion, header.dump(), payload);
}

LoraAdaptor load_adaptor(const std::string& path) {
    BlobFile blob = read_blob(path, kAdaptorMagic, kAdaptorVersion);
    json header;
    try {
        header = json::parse(blob.header_json);
    } catch (const json::exception& e) {
        throw corrupt_file_error(path + ": bad adaptor header: " + e.what());
    }
    LoraAdaptor ad;
    try {
        ad.adaptor_id = header.at("adaptor_id").get<std::string>();
        ad.group_id = header.at("group_id").get<std::string>();
        ad.rank = header.at("rank").get<int>();
        ad.alpha = header.at("alpha").get<float>();
        size_t off = 0;
        for (const json& jt : header.at("targets")) {
            LoraTarget t;
            t.where.layer = jt.at("layer").get<int>();
            t.where.proj = proj_from_name(jt.at("proj").get<std::string>());
            auto as = jt.at("a_shape");
            auto bs = jt.at("b_shape");
            t.a = Mat(as.at(0).get<int>(), as.at(1).get<int>());
            t.b = Mat(bs.at(0).get<int>(), bs.at(1).get<int>());
            if (t.a.rows != ad.rank || t.b.cols != ad.rank)
                throw corrupt_file_error(path + ": target shape disagrees with rank");
            if (off + t.a.size() + t.b.size() > blob.payload.size())
                throw corrupt_file_error(path + ": payload shorter than declared shapes");
            std::copy_n(blob.payload.begin() + off, t.a.size(), t.a.w.begin());
            off += t.a.size();
            std::copy_n(blob.payload.begin() + off, t.b.size(), t.b.w.begin());
            off += t.b.size();
            ad.targets.push_back(std::move(t));
        }
        if (off != blob.payload.size())
            throw corrupt_file_error(path + ": trailing payload bytes");
    } catch (const json::exception& e) {
        throw corrupt_file_error(path + ": bad adaptor header: " + e.what());
    }
    return ad;
}

// ---------------------------------------------------------------------------
// registry
// ---------------------------------------------------------------------------

static std::string registry_manifest_path(const std::string& dir) {
    return dir + "/registry.json";
}

AdaptorRegistry AdaptorRegistry::open(const std::string& dir) {
    AdaptorRegistry reg(dir);
    fs::create_directories(dir);
    const std::string manifest = registry_manifest_path(dir);
    if (!fs::exists(manifest)) return reg;
    json j;
    try {
        j = json::parse(read_text_file(manifest));
    } catch (const json::exception& e) {
        throw corrupt_file_error(manifest + ": " + e.what());
    }
    try {
        if (j.at("format_version").get<uint32_t>() != kRegistryVersion)
            throw version_mismatch_error(manifest + ": unsupported registry version");
        for (const json& jr : j.at("records")) {
            AdaptorRecord r;
            r.adaptor_id = jr.at("adaptor_id").get<std::string>();
            r.group_id = jr.at("group_id").get<std::string>();
            r.path = jr.at("path").get<std::string>();
            r.created_at = jr.at("created_at").get<int64_t>();
            r.train_config_digest = jr.at("train_config_digest").get<std::string>();
            r.version = jr.at("version").get<int>();
            reg.records_.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw corrupt_file_error(manifest + ": " + e.what());
    }
    std::sort(reg.records_.begin(), reg.records_.end(),
              [](const AdaptorRecord& x, const AdaptorRecord& y) { return x.group_id < y.group_id; });
    return reg;
}

void AdaptorRegistry::save_manifest() const {
    json records = json::array();
    for (const AdaptorRecord& r : records_)
        records.push_back({{"adaptor_id", r.adaptor_id},
                           {"group_id", r.group_id},
                           {"path", r.path},
                           {"created_at", r.created_at},
                           {"train_config_digest", r.train_config_digest},
                           {"version", r.version}});
    json j = {{"format_version", kRegistryVersion}, {"records", records}};
    const std::string manifest = registry_manifest_path(dir_);
    const std::string tmp = manifest + ".tmp";
    write_text_file(tmp, j.dump(2) + "\n");
    fs::rename(tmp, manifest); // atomic replace: readers never see a half-written manifest
}

AdaptorRecord AdaptorRegistry::register_adaptor(const LoraAdaptor& adaptor,
                                                const std::string& train_config_digest) {
    if (dir_.empty()) throw config_error("registry has no directory");
    if (adaptor.group_id.empty() ||
        adaptor.group_id.find_first_of("/\\") != std::string::npos)
        throw config_error("group_id must be a plain name, got '" + adaptor.group_id + "'");
    fs::create_directories(dir_);

    AdaptorRecord rec;
    rec.adaptor_id = adaptor.adaptor_id;
    rec.group_id = adaptor.group_id;
    rec.path = adaptor.group_id + ".lora";
    rec.created_at = int64_t(std::time(nullptr));
    rec.train_config_digest = train_config_digest;
    rec.version = 1;

    auto it = std::lower_bound(records_.begin(), records_.end(), adaptor.group_id,
                               [](const AdaptorRecord& r, const std::string& g) {
                                   return r.group_id < g;
                               });
    if (it != records_.end() && it->group_id == adaptor.group_id) {
        // keep the superseded file next to the active one
        const std::string old = dir_ + "/" + it->path;
        if (fs::exists(old))
            fs::rename(old, old + ".v" + std::to_string(it->version));
        rec.version = it->version + 1;
        *it = rec;
    } else {
        records_.insert(it, rec);
    }
    save_adaptor(adaptor, dir_ + "/" + rec.path);
    save_manifest();
    return rec;
}

std::optional<AdaptorRecord> AdaptorRegistry::lookup(const std::string& group_id) const {
    for (const AdaptorRecord& r : records_)
        if (r.group_id == group_id) return r;
    return std::nullopt;
}

LoraAdaptor AdaptorRegistry::load(const AdaptorRecord& record) const {
    return load_adaptor(dir_ + "/" + record.path);
}

std::vector<AdaptorRecord> AdaptorRegistry::records() const { return records_; }

} // namespace lloco
