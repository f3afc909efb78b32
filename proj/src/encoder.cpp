#include "lloco/encoder.hpp"

#include <cmath>

#include <json.hpp>

#include "lloco/common.hpp"

namespace lloco {

using json = nlohmann::json;

static constexpr char kSummaryMagic[4] = {'L', 'S', 'U', 'M'};
static constexpr uint32_t kSummaryVersion = 1;

void CompressionConfig::validate() const {
    if (chunk_length <= 0) throw config_error("chunk_length must be > 0");
    if (summary_count <= 0) throw config_error("summary_count must be > 0");
    if (summary_count >= chunk_length)
        throw config_error("summary_count must be smaller than chunk_length");
    if (max_summary_rows < 0) throw config_error("max_summary_rows must be >= 0");
}

CompressionConfig toy_compression() {
    CompressionConfig cfg;
    cfg.chunk_length = 120;
    cfg.summary_count = 4;
    return cfg;
}

std::vector<std::vector<int>> chunk_document(std::span<const int> tokens, int chunk_length) {
    if (chunk_length <= 0) throw config_error("chunk_length must be > 0");
    std::vector<std::vector<int>> chunks;
    for (size_t start = 0; start < tokens.size(); start += size_t(chunk_length)) {
        size_t end = std::min(tokens.size(), start + size_t(chunk_length));
        chunks.emplace_back(tokens.begin() + start, tokens.begin() + end);
    }
    return chunks;
}

SummaryEmbeddings compress_chunk(const Model& model, std::span<const int> chunk,
                                 const EmbeddingSequence& prior, const CompressionConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = model.config();
    const int k = cfg.summary_count;
    if (model.n_slots() < k)
        throw config_error("model has " + std::to_string(model.n_slots()) +
                           " summary slots, need " + std::to_string(k));
    if (static_cast<int>(chunk.size()) + k > mc.window)
        throw window_overflow_error("chunk of " + std::to_string(chunk.size()) + " tokens plus " +
                                    std::to_string(k) + " slots exceeds window " +
                                    std::to_string(mc.window));

    // keep only the most recent conditioning rows
    const int cap = cfg.conditioning_cap(mc.window);
    const int keep = std::min(prior.size(), cap);
    EmbeddingSequence rows(mc.d_model);
    for (int i = prior.size() - keep; i < prior.size(); ++i)
        rows.append_raw(std::span<const double>(prior.row(i), mc.d_model), RowOrigin::summary);

    if (rows.size() + static_cast<int>(chunk.size()) + k > mc.window)
        throw window_overflow_error("prior rows + chunk + slots exceed window");

    rows.append(model.embed_tokens(chunk));
    const Mat& slots = model.weights().slots;
    std::vector<double> slot_row(mc.d_model);
    for (int s = 0; s < k; ++s) {
        for (int c = 0; c < mc.d_model; ++c) slot_row[c] = double(slots.at(s, c));
        rows.append_raw(slot_row, RowOrigin::summary);
    }

    DecoderOutput out = model.forward_rows(rows, nullptr);
    SummaryEmbeddings se;
    se.d_model = mc.d_model;
    se.rows.resize(size_t(k) * mc.d_model);
    const int base = out.n - k;
    for (int s = 0; s < k; ++s)
        for (int c = 0; c < mc.d_model; ++c)
            se.rows[size_t(s) * mc.d_model + c] = out.hidden_row(base + s)[c];
    return se;
}

std::vector<SummaryEmbeddings> compress_document(const Model& model, std::span<const int> tokens,
                                                 const CompressionConfig& cfg,
                                                 const std::string& doc_id) {
    cfg.validate();
    std::vector<SummaryEmbeddings> out;
    EmbeddingSequence accumulated(model.config().d_model);
    int start = 0;
    auto chunks = chunk_document(tokens, cfg.chunk_length);
    for (size_t i = 0; i < chunks.size(); ++i) {
        SummaryEmbeddings se = compress_chunk(model, chunks[i], accumulated, cfg);
        se.chunk_index = static_cast<int>(i);
        se.source_doc = doc_id;
        se.token_start = start;
        se.token_end = start + static_cast<int>(chunks[i].size());
        start = se.token_end;
        for (int r = 0; r < se.k(); ++r)
            accumulated.append_raw(std::span<const double>(se.row(r), se.d_model),
                                   RowOrigin::summary);
        out.push_back(std::move(se));
    }
    return out;
}

double compression_ratio(int chunk_length, int summary_count) {
    if (summary_count <= 0) throw config_error("summary_count must be > 0");
    return double(chunk_length) / double(summary_count);
}

int64_t effective_window(int window, int chunk_length, int summary_count) {
    if (summary_count <= 0 || summary_count > window)
        throw config_error("summary_count must be in [1, window]");
    return int64_t(window / summary_count) * int64_t(chunk_length);
}

EmbeddingSequence summaries_as_rows(std::span<const SummaryEmbeddings> entries) {
    EmbeddingSequence rows;
    for (const SummaryEmbeddings& se : entries) {
        if (rows.dim == 0) rows.dim = se.d_model;
        for (int r = 0; r < se.k(); ++r)
            rows.append_raw(std::span<const double>(se.row(r), se.d_model), RowOrigin::summary);
    }
    return rows;
}

void save_summaries(const std::string& path, std::span<const SummaryEmbeddings> entries,
                    const CompressionConfig& cfg) {
    json chunks = json::array();
    std::vector<float> payload;
    std::string doc_id;
    int d_model = 0;
    for (const SummaryEmbeddings& se : entries) {
        if (doc_id.empty()) doc_id = se.source_doc;
        if (d_model == 0) d_model = se.d_model;
        chunks.push_back({{"chunk_index", se.chunk_index},
                          {"token_start", se.token_start},
                          {"token_end", se.token_end}});
        for (double v : se.rows) payload.push_back(float(v));
    }
    json header = {{"doc_id", doc_id},
                   {"chunk_length", cfg.chunk_length},
                   {"summary_count", cfg.summary_count},
                   {"d_model", d_model},
                   {"chunks", chunks}};
    write_blob(path, kSummaryMagic, kSummaryVersion, header.dump(), payload);
}

std::vector<SummaryEmbeddings> load_summaries(const std::string& path) {
    BlobFile blob = read_blob(path, kSummaryMagic, kSummaryVersion);
    json header;
    try {
        header = json::parse(blob.header_json);
    } catch (const json::exception& e) {
        throw corrupt_file_error(path + ": bad summary header: " + e.what());
    }
    std::vector<SummaryEmbeddings> out;
    try {
        const std::string doc_id = header.at("doc_id").get<std::string>();
        const int k = header.at("summary_count").get<int>();
        const int d = header.at("d_model").get<int>();
        size_t off = 0;
        for (const json& jc : header.at("chunks")) {
            SummaryEmbeddings se;
            se.chunk_index = jc.at("chunk_index").get<int>();
            se.token_start = jc.at("token_start").get<int>();
            se.token_end = jc.at("token_end").get<int>();
            se.source_doc = doc_id;
            se.d_model = d;
            if (off + size_t(k) * d > blob.payload.size())
                throw corrupt_file_error(path + ": payload shorter than declared chunks");
            se.rows.assign(blob.payload.begin() + off, blob.payload.begin() + off + size_t(k) * d);
            off += size_t(k) * d;
            out.push_back(std::move(se));
        }
        if (off != blob.payload.size()) throw corrupt_file_error(path + ": trailing payload bytes");
    } catch (const json::exception& e) {
        throw corrupt_file_error(path + ": bad summary header: " + e.what());
    }
    return out;
}

} // namespace lloco
