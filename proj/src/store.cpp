#include "lloco/store.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lloco/common.hpp"

namespace lloco {

namespace fs = std::filesystem;
using json = nlohmann::json;

static constexpr uint32_t kStoreVersion = 1;

std::vector<std::pair<int, int>> chunk_passages(int n_tokens, int passage_length) {
    if (passage_length <= 0) throw config_error("passage_length must be > 0");
    if (n_tokens < 0) throw config_error("token count must be >= 0");
    std::vector<std::pair<int, int>> spans;
    for (int start = 0; start < n_tokens; start += passage_length)
        spans.emplace_back(start, std::min(n_tokens, start + passage_length));
    return spans;
}

std::vector<float> embed_passage(const Model& model, const std::string& text) {
    const Mat& table = model.weights().embedding;
    const int d = table.cols;
    std::vector<double> mean(d, 0.0);
    for (unsigned char byte : text) {
        const float* row = table.row(byte);
        for (int c = 0; c < d; ++c) mean[c] += double(row[c]);
    }
    double norm = 0.0;
    for (double v : mean) norm += v * v;
    norm = std::sqrt(norm);
    std::vector<float> out(d);
    if (text.empty() || norm < 1e-12) {
        // fixed fallback direction so empty queries are well-defined
        const float unit = float(1.0 / std::sqrt(double(d)));
        for (float& v : out) v = unit;
        return out;
    }
    for (int c = 0; c < d; ++c) out[c] = float(mean[c] / norm);
    return out;
}

std::vector<int> covering_chunks(int token_start, int token_end, int chunk_length, int n_chunks) {
    if (chunk_length <= 0) throw config_error("chunk_length must be > 0");
    std::vector<int> out;
    if (token_end <= token_start || n_chunks <= 0) return out;
    int first = token_start / chunk_length;
    int last = (token_end - 1) / chunk_length;
    first = std::min(first, n_chunks - 1);
    last = std::min(last, n_chunks - 1);
    for (int i = first; i <= last; ++i) out.push_back(i);
    return out;
}

void VectorStore::add(PassageRecord record) {
    if (d_model_ <= 0) throw config_error("store has no embedding dimension");
    if (static_cast<int>(record.sentence_embedding.size()) != d_model_)
        throw shape_error("embedding size " + std::to_string(record.sentence_embedding.size()) +
                          " != " + std::to_string(d_model_));
    double norm = 0.0;
    for (float v : record.sentence_embedding) norm += double(v) * double(v);
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-6)
        throw config_error("passage embedding must be unit norm");
    if (record.token_end < record.token_start) throw config_error("bad token span");
    for (const PassageRecord& r : records_)
        if (r.passage_id == record.passage_id)
            throw config_error("duplicate passage_id " + record.passage_id);
    records_.push_back(std::move(record));
}

void VectorStore::set_summaries(const std::string& doc_id, std::vector<SummaryEmbeddings> entries,
                                const CompressionConfig& comp, const std::string& group_id) {
    // archives hold float32; snap at ingestion so a persisted store reloads
    // bit-exactly and serving reads the same rows either way
    for (SummaryEmbeddings& se : entries)
        for (double& v : se.rows) v = double(float(v));
    DocInfo info;
    info.group_id = group_id;
    info.chunk_length = comp.chunk_length;
    info.summary_count = comp.summary_count;
    info.n_chunks = static_cast<int>(entries.size());
    docs_[doc_id] = info;
    summaries_[doc_id] = std::move(entries);
}

std::vector<PassageRecord> VectorStore::top_k(std::span<const float> query, int k,
                                              const std::string* doc_filter) const {
    if (k <= 0) throw config_error("k must be >= 1");
    if (static_cast<int>(query.size()) != d_model_) throw shape_error("query dimension mismatch");
    std::vector<std::pair<double, const PassageRecord*>> scored;
    for (const PassageRecord& r : records_) {
        if (doc_filter && r.doc_id != *doc_filter) continue;
        double dot = 0.0;
        for (int c = 0; c < d_model_; ++c)
            dot += double(query[c]) * double(r.sentence_embedding[c]);
        scored.emplace_back(dot, &r);
    }
    if (scored.empty()) throw empty_store_error(doc_filter ? "no passages for doc " + *doc_filter
                                                           : "store is empty");
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second->passage_id < b.second->passage_id;
    });
    if (size_t(k) < scored.size()) scored.resize(k);
    std::vector<PassageRecord> out;
    out.reserve(scored.size());
    for (const auto& [score, rec] : scored) out.push_back(*rec);
    return out;
}

std::vector<PassageRecord> VectorStore::top_k(const Model& model, const std::string& query_text,
                                              int k, const std::string* doc_filter) const {
    std::vector<float> q = embed_passage(model, query_text);
    return top_k(q, k, doc_filter);
}

EmbeddingSequence VectorStore::gather_summaries(std::span<const PassageRecord> records,
                                                int max_rows) const {
    std::set<std::pair<std::string, int>> wanted;
    for (const PassageRecord& r : records)
        for (int chunk : r.covering_chunk_indices) wanted.insert({r.doc_id, chunk});
    EmbeddingSequence rows(d_model_);
    for (const auto& [doc_id, chunk] : wanted) {
        const std::vector<SummaryEmbeddings>& entries = summaries(doc_id);
        if (chunk < 0 || chunk >= static_cast<int>(entries.size()))
            throw not_found_error("doc " + doc_id + " has no chunk " + std::to_string(chunk));
        const SummaryEmbeddings& se = entries[chunk];
        if (max_rows >= 0 && rows.size() + se.k() > max_rows) {
            if (rows.size() == 0)
                throw window_overflow_error("summary budget " + std::to_string(max_rows) +
                                            " cannot fit one chunk of " + std::to_string(se.k()) +
                                            " rows");
            break; // keep the earliest whole chunks
        }
        for (int r = 0; r < se.k(); ++r)
            rows.append_raw(std::span<const double>(se.row(r), se.d_model), RowOrigin::summary);
    }
    return rows;
}

const std::vector<SummaryEmbeddings>& VectorStore::summaries(const std::string& doc_id) const {
    auto it = summaries_.find(doc_id);
    if (it == summaries_.end()) throw not_found_error("no summary archive for doc " + doc_id);
    return it->second;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void VectorStore::persist(const std::string& dir) const {
    fs::create_directories(dir);
    fs::create_directories(fs::path(dir) / "summaries");

    json docs = json::object();
    for (const auto& [doc_id, info] : docs_)
        docs[doc_id] = {{"group_id", info.group_id},
                        {"chunk_length", info.chunk_length},
                        {"summary_count", info.summary_count},
                        {"n_chunks", info.n_chunks}};
    json manifest = {{"format_version", kStoreVersion},
                     {"passage_count", records_.size()},
                     {"passage_length", passage_length_},
                     {"d_model", d_model_},
                     {"embedder_digest", embedder_digest},
                     {"docs", docs}};

    std::string lines;
    std::vector<float> embeddings;
    embeddings.reserve(records_.size() * size_t(d_model_));
    for (const PassageRecord& r : records_) {
        json j = {{"passage_id", r.passage_id},
                  {"doc_id", r.doc_id},
                  {"group_id", r.group_id},
                  {"token_start", r.token_start},
                  {"token_end", r.token_end},
                  {"text", r.text},
                  {"covering_chunk_indices", r.covering_chunk_indices},
                  {"adaptor_id", r.adaptor_id}};
        lines += j.dump();
        lines += '\n';
        embeddings.insert(embeddings.end(), r.sentence_embedding.begin(),
                          r.sentence_embedding.end());
    }

    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    write_text_file((fs::path(dir) / "records.jsonl").string(), lines);
    write_f32_file((fs::path(dir) / "embeddings.bin").string(), embeddings);
    for (const auto& [doc_id, entries] : summaries_) {
        CompressionConfig comp;
        comp.chunk_length = docs_.at(doc_id).chunk_length;
        comp.summary_count = docs_.at(doc_id).summary_count;
        save_summaries((fs::path(dir) / "summaries" / (doc_id + ".summ")).string(), entries, comp);
    }
}

VectorStore VectorStore::load(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    json manifest;
    try {
        manifest = json::parse(read_text_file(manifest_path));
    } catch (const json::exception& e) {
        throw corrupt_file_error(manifest_path + ": " + e.what());
    }

    VectorStore store;
    try {
        if (manifest.at("format_version").get<uint32_t>() != kStoreVersion)
            throw version_mismatch_error(manifest_path + ": unsupported store version");
        store.d_model_ = manifest.at("d_model").get<int>();
        store.passage_length_ = manifest.at("passage_length").get<int>();
        store.embedder_digest = manifest.at("embedder_digest").get<std::string>();
        for (const auto& [doc_id, j] : manifest.at("docs").items()) {
            DocInfo info;
            info.group_id = j.at("group_id").get<std::string>();
            info.chunk_length = j.at("chunk_length").get<int>();
            info.summary_count = j.at("summary_count").get<int>();
            info.n_chunks = j.at("n_chunks").get<int>();
            store.docs_[doc_id] = info;
        }

        const size_t expect = manifest.at("passage_count").get<size_t>();
        std::istringstream lines(read_text_file((fs::path(dir) / "records.jsonl").string()));
        std::vector<float> embeddings =
            read_f32_file((fs::path(dir) / "embeddings.bin").string());
        if (embeddings.size() != expect * size_t(store.d_model_))
            throw corrupt_file_error(dir + ": embeddings.bin size disagrees with manifest");

        std::string line;
        size_t at = 0;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            if (at >= expect) throw corrupt_file_error(dir + ": more records than manifest count");
            json j = json::parse(line);
            PassageRecord r;
            r.passage_id = j.at("passage_id").get<std::string>();
            r.doc_id = j.at("doc_id").get<std::string>();
            r.group_id = j.at("group_id").get<std::string>();
            r.token_start = j.at("token_start").get<int>();
            r.token_end = j.at("token_end").get<int>();
            r.text = j.at("text").get<std::string>();
            r.covering_chunk_indices = j.at("covering_chunk_indices").get<std::vector<int>>();
            r.adaptor_id = j.at("adaptor_id").get<std::string>();
            r.sentence_embedding.assign(embeddings.begin() + at * store.d_model_,
                                        embeddings.begin() + (at + 1) * store.d_model_);
            store.records_.push_back(std::move(r));
            ++at;
        }
        if (at != expect)
            throw corrupt_file_error(dir + ": record count " + std::to_string(at) +
                                     " disagrees with manifest " + std::to_string(expect));
    } catch (const json::exception& e) {
        throw corrupt_file_error(dir + ": " + e.what());
    }

    for (const auto& [doc_id, info] : store.docs_) {
        const std::string path = (fs::path(dir) / "summaries" / (doc_id + ".summ")).string();
        if (!fs::exists(path))
            throw corrupt_file_error(dir + ": missing summary archive for doc " + doc_id);
        store.summaries_[doc_id] = load_summaries(path);
        if (static_cast<int>(store.summaries_[doc_id].size()) != info.n_chunks)
            throw corrupt_file_error(path + ": chunk count disagrees with manifest");
    }
    return store;
}

// ---------------------------------------------------------------------------
// document ingestion
// ---------------------------------------------------------------------------

void index_document(VectorStore& store, const Model& model, const std::string& doc_id,
                    const std::string& group_id, const std::string& adaptor_id,
                    const std::string& text, const CompressionConfig& comp) {
    std::vector<int> tokens = tokenize(text);
    std::vector<SummaryEmbeddings> entries = compress_document(model, tokens, comp, doc_id);
    const int n_chunks = static_cast<int>(entries.size());
    store.set_summaries(doc_id, std::move(entries), comp, group_id);

    auto spans = chunk_passages(static_cast<int>(tokens.size()), store.passage_length());
    for (size_t p = 0; p < spans.size(); ++p) {
        PassageRecord rec;
        rec.passage_id = doc_id + "#p" + std::to_string(p);
        rec.doc_id = doc_id;
        rec.group_id = group_id;
        rec.token_start = spans[p].first;
        rec.token_end = spans[p].second;
        rec.text = detokenize(std::span<const int>(tokens.data() + spans[p].first,
                                                   size_t(spans[p].second - spans[p].first)));
        rec.sentence_embedding = embed_passage(model, rec.text);
        rec.covering_chunk_indices =
            covering_chunks(rec.token_start, rec.token_end, comp.chunk_length, n_chunks);
        rec.adaptor_id = adaptor_id;
        store.add(std::move(rec));
    }
}

} // namespace lloco
