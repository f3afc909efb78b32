#include "lloco/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

#include "lloco/lora.hpp"

namespace lloco {

using json = nlohmann::json;

static constexpr double kRmsEps = 1e-5;

void ModelConfig::validate() const {
    if (vocab_size < 1) throw config_error("vocab_size must be >= 1");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || window < 1)
        throw config_error("d_model, n_layers, n_heads, window must be >= 1");
    if (d_model % n_heads != 0) throw config_error("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw config_error("head dim must be even for rotary pairs");
    if (rope_base <= 1.0) throw config_error("rope_base must be > 1");
}

// ---------------------------------------------------------------------------
// sequences
// ---------------------------------------------------------------------------

void EmbeddingSequence::append_raw(std::span<const double> row, RowOrigin tag) {
    if (dim == 0) dim = static_cast<int>(row.size());
    if (static_cast<int>(row.size()) != dim)
        throw shape_error("row dimension " + std::to_string(row.size()) + " != " + std::to_string(dim));
    data.insert(data.end(), row.begin(), row.end());
    origin.push_back(tag);
    token_ids.push_back(-1);
}

void EmbeddingSequence::append(const EmbeddingSequence& other) {
    if (other.size() == 0) return;
    if (dim == 0) dim = other.dim;
    if (other.dim != dim) throw shape_error("appending sequence of different dimension");
    data.insert(data.end(), other.data.begin(), other.data.end());
    origin.insert(origin.end(), other.origin.begin(), other.origin.end());
    token_ids.insert(token_ids.end(), other.token_ids.begin(), other.token_ids.end());
}

EmbeddingSequence hidden_at(std::span<const int> positions, const DecoderOutput& output) {
    EmbeddingSequence out(output.d_model);
    for (int p : positions) {
        if (p < 0 || p >= output.n)
            throw std::out_of_range("hidden_at: position " + std::to_string(p) + " out of range [0," +
                                    std::to_string(output.n) + ")");
        out.append_raw(std::span<const double>(output.hidden_row(p), output.d_model),
                       RowOrigin::summary);
    }
    return out;
}

// ---------------------------------------------------------------------------
// byte-level tokenizer
// ---------------------------------------------------------------------------

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

std::string detokenize(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t > 255) throw std::out_of_range("token id " + std::to_string(t) + " not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Mat*>> Weights::tensor_list() {
    std::vector<std::pair<std::string, Mat*>> out;
    out.emplace_back("tok_embedding", &embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", &layers[l].attn_norm);
        out.emplace_back(p + "wq", &layers[l].wq);
        out.emplace_back(p + "wk", &layers[l].wk);
        out.emplace_back(p + "wv", &layers[l].wv);
        out.emplace_back(p + "wo", &layers[l].wo);
        out.emplace_back(p + "mlp_norm", &layers[l].mlp_norm);
        out.emplace_back(p + "w_up", &layers[l].w_up);
        out.emplace_back(p + "w_down", &layers[l].w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("summary_slots", &slots);
    return out;
}

std::vector<std::pair<std::string, const Mat*>> Weights::tensor_list() const {
    auto mut = const_cast<Weights*>(this)->tensor_list();
    std::vector<std::pair<std::string, const Mat*>> out;
    out.reserve(mut.size());
    for (auto& [n, m] : mut) out.emplace_back(n, m);
    return out;
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

static void fill_normal(Mat& m, Rng& rng, double sigma) {
    for (float& v : m.w) v = static_cast<float>(rng.normal() * sigma);
}

Model Model::init(const ModelConfig& cfg, int n_slots) {
    cfg.validate();
    if (n_slots < 0) throw config_error("n_slots must be >= 0");
    Model model;
    model.cfg_ = cfg;
    Weights& w = model.w_;

    w.embedding = Mat(cfg.vocab_size, cfg.d_model);
    w.final_norm = Mat(1, cfg.d_model);
    w.slots = Mat(n_slots, cfg.d_model);
    w.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights& lw = w.layers[l];
        lw.attn_norm = Mat(1, cfg.d_model);
        lw.wq = Mat(cfg.d_model, cfg.d_model);
        lw.wk = Mat(cfg.d_model, cfg.d_model);
        lw.wv = Mat(cfg.d_model, cfg.d_model);
        lw.wo = Mat(cfg.d_model, cfg.d_model);
        lw.mlp_norm = Mat(1, cfg.d_model);
        lw.w_up = Mat(cfg.d_ff(), cfg.d_model);
        lw.w_down = Mat(cfg.d_model, cfg.d_ff());
    }

    // scaled normal init; residual-feeding projections get shrunk by depth
    const double sigma = 0.08;
    const double resid_sigma = sigma / std::sqrt(2.0 * cfg.n_layers);
    for (auto& [name, mat] : w.tensor_list()) {
        if (name.ends_with("norm")) {
            std::fill(mat->w.begin(), mat->w.end(), 1.0f);
            continue;
        }
        Rng rng(derive_seed(cfg.seed, "init." + name));
        bool resid = name.ends_with(".wo") || name.ends_with(".w_down");
        fill_normal(*mat, rng, resid ? resid_sigma : sigma);
    }
    return model;
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

namespace {

// y = W x, accumulated in double
void matvec(const Mat& w, const double* x, double* y) {
    for (int r = 0; r < w.rows; ++r) {
        const float* wr = w.row(r);
        double acc = 0.0;
        for (int c = 0; c < w.cols; ++c) acc += double(wr[c]) * x[c];
        y[r] = acc;
    }
}

void rmsnorm(const float* g, const double* x, double* out, int d) {
    double ss = 0.0;
    for (int i = 0; i < d; ++i) ss += x[i] * x[i];
    double r = 1.0 / std::sqrt(ss / d + kRmsEps);
    for (int i = 0; i < d; ++i) out[i] = x[i] * r * double(g[i]);
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

} // namespace

void rope_rotate(double* vec, int pos, int n_heads, int head_dim, double base) {
    for (int h = 0; h < n_heads; ++h) {
        double* v = vec + h * head_dim;
        for (int j = 0; j < head_dim / 2; ++j) {
            double theta = pos * std::pow(base, -2.0 * j / head_dim);
            double c = std::cos(theta), s = std::sin(theta);
            double a = v[2 * j], b = v[2 * j + 1];
            v[2 * j] = a * c - b * s;
            v[2 * j + 1] = a * s + b * c;
        }
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

EmbeddingSequence Model::embed_tokens(std::span<const int> tokens) const {
    EmbeddingSequence seq(cfg_.d_model);
    std::vector<double> row(cfg_.d_model);
    for (int t : tokens) {
        if (t < 0 || t >= cfg_.vocab_size)
            throw std::out_of_range("token id " + std::to_string(t) + " outside vocab");
        const float* e = w_.embedding.row(t);
        for (int i = 0; i < cfg_.d_model; ++i) row[i] = double(e[i]);
        seq.append_raw(row, RowOrigin::token);
        seq.token_ids.back() = t;
    }
    return seq;
}

DecoderOutput Model::forward_rows(const EmbeddingSequence& rows, const LoraAdaptor* adaptor) const {
    const int n = rows.size();
    const int d = cfg_.d_model;
    const int hd = cfg_.head_dim();
    const int nh = cfg_.n_heads;

    DecoderOutput out;
    out.n = n;
    out.d_model = d;
    out.vocab_size = cfg_.vocab_size;
    if (n == 0) return out;
    if (rows.dim != d) throw shape_error("input rows have wrong dimension");
    if (n > cfg_.window)
        throw window_overflow_error("sequence length " + std::to_string(n) + " exceeds window " +
                                    std::to_string(cfg_.window));

    std::vector<double> x(rows.data); // residual stream, n x d
    std::vector<double> xn(size_t(n) * d), q(size_t(n) * d), k(size_t(n) * d), v(size_t(n) * d),
        ao(size_t(n) * d), tmp(size_t(n) * d);
    std::vector<double> up(cfg_.d_ff());

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const LayerWeights& lw = w_.layers[l];
        const LoraTarget* lq = adaptor ? adaptor->find(l, Proj::query) : nullptr;
        const LoraTarget* lv = adaptor ? adaptor->find(l, Proj::value) : nullptr;

        for (int i = 0; i < n; ++i) {
            const double* xi = x.data() + size_t(i) * d;
            double* xni = xn.data() + size_t(i) * d;
            rmsnorm(lw.attn_norm.row(0), xi, xni, d);

            double* qi = q.data() + size_t(i) * d;
            double* ki = k.data() + size_t(i) * d;
            double* vi = v.data() + size_t(i) * d;
            matvec(lw.wq, xni, qi);
            matvec(lw.wk, xni, ki);
            matvec(lw.wv, xni, vi);
            if (lq) {
                auto delta = apply_delta(*adaptor, *lq, std::span<const double>(xni, d));
                for (int j = 0; j < d; ++j) qi[j] += delta[j];
            }
            if (lv) {
                auto delta = apply_delta(*adaptor, *lv, std::span<const double>(xni, d));
                for (int j = 0; j < d; ++j) vi[j] += delta[j];
            }
            rope_rotate(qi, i, nh, hd, cfg_.rope_base);
            rope_rotate(ki, i, nh, hd, cfg_.rope_base);
        }

        // causal attention
        const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));
        std::vector<double> scores(n);
        for (int h = 0; h < nh; ++h) {
            const int off = h * hd;
            for (int i = 0; i < n; ++i) {
                const double* qi = q.data() + size_t(i) * d + off;
                double maxs = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = k.data() + size_t(j) * d + off;
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    scores[j] = s;
                    if (s > maxs) maxs = s;
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - maxs);
                    z += scores[j];
                }
                double* aoi = ao.data() + size_t(i) * d + off;
                for (int c = 0; c < hd; ++c) aoi[c] = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double p = scores[j] / z;
                    const double* vj = v.data() + size_t(j) * d + off;
                    for (int c = 0; c < hd; ++c) aoi[c] += p * vj[c];
                }
            }
        }

        for (int i = 0; i < n; ++i) {
            matvec(lw.wo, ao.data() + size_t(i) * d, tmp.data() + size_t(i) * d);
            double* xi = x.data() + size_t(i) * d;
            for (int c = 0; c < d; ++c) xi[c] += tmp[size_t(i) * d + c];

            double* xni = xn.data() + size_t(i) * d;
            rmsnorm(lw.mlp_norm.row(0), xi, xni, d);
            matvec(lw.w_up, xni, up.data());
            for (int c = 0; c < cfg_.d_ff(); ++c) up[c] = silu(up[c]);
            matvec(lw.w_down, up.data(), tmp.data() + size_t(i) * d);
            for (int c = 0; c < d; ++c) xi[c] += tmp[size_t(i) * d + c];
        }
    }

    out.final_hidden.resize(size_t(n) * d);
    out.logits.resize(size_t(n) * cfg_.vocab_size);
    for (int i = 0; i < n; ++i) {
        double* hf = out.final_hidden.data() + size_t(i) * d;
        rmsnorm(w_.final_norm.row(0), x.data() + size_t(i) * d, hf, d);
        // tied output head: logits = hf . E^T
        double* lg = out.logits.data() + size_t(i) * cfg_.vocab_size;
        for (int t = 0; t < cfg_.vocab_size; ++t) {
            const float* er = w_.embedding.row(t);
            double acc = 0.0;
            for (int c = 0; c < d; ++c) acc += double(er[c]) * hf[c];
            lg[t] = acc;
        }
    }
    return out;
}

DecoderOutput Model::forward(const EmbeddingSequence& prefix, std::span<const int> tokens,
                             const LoraAdaptor* adaptor) const {
    if (prefix.size() + static_cast<int>(tokens.size()) > cfg_.window)
        throw window_overflow_error("prefix " + std::to_string(prefix.size()) + " + tokens " +
                                    std::to_string(tokens.size()) + " exceeds window " +
                                    std::to_string(cfg_.window));
    EmbeddingSequence rows(cfg_.d_model);
    rows.append(prefix);
    rows.append(embed_tokens(tokens));
    return forward_rows(rows, adaptor);
}

// ---------------------------------------------------------------------------
// incremental greedy decoding
// ---------------------------------------------------------------------------

namespace {

// per-request decode state, one K/V strip per layer
struct DecodeState {
    int d = 0;
    std::vector<std::vector<double>> k, v; // per layer, appended n x d
    int n = 0;
};

} // namespace

static void decode_step(const Model& model, const LoraAdaptor* adaptor, DecodeState& st,
                        const double* row_in, std::vector<double>& logits_out) {
    const ModelConfig& cfg = model.config();
    const Weights& w = model.weights();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int nh = cfg.n_heads;
    const int pos = st.n;

    std::vector<double> x(row_in, row_in + d), xn(d), qv(d), kv(d), vv(d), ao(d), tmp(d),
        up(cfg.d_ff());
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        const LoraTarget* lq = adaptor ? adaptor->find(l, Proj::query) : nullptr;
        const LoraTarget* lv = adaptor ? adaptor->find(l, Proj::value) : nullptr;

        rmsnorm(lw.attn_norm.row(0), x.data(), xn.data(), d);
        matvec(lw.wq, xn.data(), qv.data());
        matvec(lw.wk, xn.data(), kv.data());
        matvec(lw.wv, xn.data(), vv.data());
        if (lq) {
            auto delta = apply_delta(*adaptor, *lq, xn);
            for (int j = 0; j < d; ++j) qv[j] += delta[j];
        }
        if (lv) {
            auto delta = apply_delta(*adaptor, *lv, xn);
            for (int j = 0; j < d; ++j) vv[j] += delta[j];
        }
        rope_rotate(qv.data(), pos, nh, hd, cfg.rope_base);
        rope_rotate(kv.data(), pos, nh, hd, cfg.rope_base);

        auto& kc = st.k[l];
        auto& vc = st.v[l];
        kc.insert(kc.end(), kv.begin(), kv.end());
        vc.insert(vc.end(), vv.begin(), vv.end());

        const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));
        std::vector<double> scores(pos + 1);
        for (int h = 0; h < nh; ++h) {
            const int off = h * hd;
            double maxs = -1e300;
            for (int j = 0; j <= pos; ++j) {
                const double* kj = kc.data() + size_t(j) * d + off;
                double s = 0.0;
                for (int c = 0; c < hd; ++c) s += qv[off + c] * kj[c];
                s *= inv_sqrt_hd;
                scores[j] = s;
                if (s > maxs) maxs = s;
            }
            double z = 0.0;
            for (int j = 0; j <= pos; ++j) {
                scores[j] = std::exp(scores[j] - maxs);
                z += scores[j];
            }
            for (int c = 0; c < hd; ++c) ao[off + c] = 0.0;
            for (int j = 0; j <= pos; ++j) {
                double p = scores[j] / z;
                const double* vj = vc.data() + size_t(j) * d + off;
                for (int c = 0; c < hd; ++c) ao[off + c] += p * vj[c];
            }
        }

        matvec(lw.wo, ao.data(), tmp.data());
        for (int c = 0; c < d; ++c) x[c] += tmp[c];
        rmsnorm(lw.mlp_norm.row(0), x.data(), xn.data(), d);
        matvec(lw.w_up, xn.data(), up.data());
        for (int c = 0; c < cfg.d_ff(); ++c) up[c] = silu(up[c]);
        matvec(lw.w_down, up.data(), tmp.data());
        for (int c = 0; c < d; ++c) x[c] += tmp[c];
    }

    std::vector<double> hf(d);
    rmsnorm(w.final_norm.row(0), x.data(), hf.data(), d);
    logits_out.resize(cfg.vocab_size);
    for (int t = 0; t < cfg.vocab_size; ++t) {
        const float* er = w.embedding.row(t);
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += double(er[c]) * hf[c];
        logits_out[t] = acc;
    }
    st.n += 1;
}

static int argmax_lowest(const std::vector<double>& logits) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

std::vector<int> Model::generate(const EmbeddingSequence& prefix,
                                 std::span<const int> prompt_tokens, int max_new,
                                 const LoraAdaptor* adaptor) const {
    if (max_new < 0) throw config_error("max_new must be >= 0");
    if (max_new == 0) return {};
    const int total = prefix.size() + static_cast<int>(prompt_tokens.size());
    if (total + max_new > cfg_.window)
        throw window_overflow_error("prompt " + std::to_string(total) + " + max_new " +
                                    std::to_string(max_new) + " exceeds window " +
                                    std::to_string(cfg_.window));
    if (total == 0) throw config_error("cannot generate from an empty input");
    if (prefix.size() > 0 && prefix.dim != cfg_.d_model)
        throw shape_error("prefix rows have wrong dimension");

    DecodeState st;
    st.d = cfg_.d_model;
    st.k.resize(cfg_.n_layers);
    st.v.resize(cfg_.n_layers);

    std::vector<double> logits;
    for (int i = 0; i < prefix.size(); ++i) decode_step(*this, adaptor, st, prefix.row(i), logits);
    std::vector<double> row(cfg_.d_model);
    auto embed_row = [&](int t) {
        if (t < 0 || t >= cfg_.vocab_size)
            throw std::out_of_range("token id " + std::to_string(t) + " outside vocab");
        const float* e = w_.embedding.row(t);
        for (int c = 0; c < cfg_.d_model; ++c) row[c] = double(e[c]);
    };
    for (int t : prompt_tokens) {
        embed_row(t);
        decode_step(*this, adaptor, st, row.data(), logits);
    }

    std::vector<int> out;
    out.reserve(max_new);
    for (int i = 0; i < max_new; ++i) {
        int next = argmax_lowest(logits);
        out.push_back(next);
        if (i + 1 < max_new) {
            embed_row(next);
            decode_step(*this, adaptor, st, row.data(), logits);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

void Model::save(const std::string& manifest_path, const std::string& bin_path) const {
    json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = {{"vocab_size", cfg_.vocab_size}, {"d_model", cfg_.d_model},
                          {"n_layers", cfg_.n_layers},     {"n_heads", cfg_.n_heads},
                          {"window", cfg_.window},         {"rope_base", cfg_.rope_base},
                          {"seed", cfg_.seed}};
    json tensors = json::array();
    std::vector<float> blob;
    for (auto& [name, mat] : w_.tensor_list()) {
        tensors.push_back({{"name", name}, {"shape", {mat->rows, mat->cols}}});
        blob.insert(blob.end(), mat->w.begin(), mat->w.end());
    }
    manifest["tensors"] = tensors;
    write_text_file(manifest_path, manifest.dump(2) + "\n");
    write_f32_file(bin_path, blob);
}

Model Model::load(const std::string& manifest_path, const std::string& bin_path) {
    json manifest;
    try {
        manifest = json::parse(read_text_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw corrupt_file_error("bad checkpoint manifest " + manifest_path + ": " + e.what());
    }
    if (!manifest.contains("format_version") || !manifest["format_version"].is_number())
        throw corrupt_file_error("checkpoint manifest missing format_version");
    if (manifest["format_version"].get<int>() != 1)
        throw version_mismatch_error("checkpoint format_version " +
                                     manifest["format_version"].dump());
    ModelConfig cfg;
    try {
        const json& c = manifest.at("config");
        cfg.vocab_size = c.at("vocab_size").get<int>();
        cfg.d_model = c.at("d_model").get<int>();
        cfg.n_layers = c.at("n_layers").get<int>();
        cfg.n_heads = c.at("n_heads").get<int>();
        cfg.window = c.at("window").get<int>();
        cfg.rope_base = c.at("rope_base").get<double>();
        cfg.seed = c.at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw corrupt_file_error("bad checkpoint config: " + std::string(e.what()));
    }
    cfg.validate();

    // slot count comes from the summary_slots tensor shape
    int n_slots = 0;
    {
        const json& tensors = manifest.at("tensors");
        for (const auto& t : tensors)
            if (t.at("name").get<std::string>() == "summary_slots")
                n_slots = t.at("shape").at(0).get<int>();
    }
    Model model = Model::init(cfg, n_slots);

    std::vector<float> blob = read_f32_file(bin_path);
    const json& tensors = manifest.at("tensors");
    auto list = model.w_.tensor_list();
    if (tensors.size() != list.size())
        throw corrupt_file_error("checkpoint tensor count mismatch");
    size_t off = 0;
    for (size_t i = 0; i < list.size(); ++i) {
        const json& t = tensors.at(i);
        auto& [name, mat] = list[i];
        if (t.at("name").get<std::string>() != name)
            throw corrupt_file_error("checkpoint tensor order mismatch at " + name);
        int r = t.at("shape").at(0).get<int>();
        int c = t.at("shape").at(1).get<int>();
        if (r != mat->rows || c != mat->cols)
            throw corrupt_file_error("checkpoint tensor shape mismatch at " + name);
        if (off + mat->size() > blob.size())
            throw corrupt_file_error("checkpoint binary too short at " + name);
        std::copy(blob.begin() + off, blob.begin() + off + mat->size(), mat->w.begin());
        off += mat->size();
    }
    if (off != blob.size()) throw corrupt_file_error("checkpoint binary has trailing data");
    return model;
}

uint64_t Model::weight_digest() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, mat] : w_.tensor_list()) {
        h = fnv1a64(name, h);
        h = fnv1a64(mat->w.data(), mat->w.size() * sizeof(float), h);
    }
    return h;
}

} // namespace lloco
