#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lloco/encoder.hpp"
#include "lloco/model.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// passage index: exact cosine retrieval over unit-norm embeddings, with each
// passage linked to the compression chunks that cover its token span
// ---------------------------------------------------------------------------

struct PassageRecord {
    std::string passage_id;
    std::string doc_id;
    std::string group_id;
    int token_start = 0;
    int token_end = 0; // [start, end)
    std::string text;
    std::vector<float> sentence_embedding; // unit norm
    std::vector<int> covering_chunk_indices;
    std::string adaptor_id;
};

// consecutive non-overlapping [start, end) spans; the last may be shorter
std::vector<std::pair<int, int>> chunk_passages(int n_tokens, int passage_length = 512);

// mean of the model's token embeddings over the text's bytes, L2-normalized;
// empty (or degenerate zero-mean) text maps to a fixed unit vector
std::vector<float> embed_passage(const Model& model, const std::string& text);

// chunk indices whose token ranges intersect [start, end)
std::vector<int> covering_chunks(int token_start, int token_end, int chunk_length, int n_chunks);

struct DocInfo {
    std::string group_id;
    int chunk_length = 0;
    int summary_count = 0;
    int n_chunks = 0;
};

class VectorStore {
public:
    VectorStore() = default;
    VectorStore(int d_model, int passage_length)
        : d_model_(d_model), passage_length_(passage_length) {}

    void add(PassageRecord record); // throws config_error / shape_error

    // registers a document's summaries (archive rows) and chunk grid
    void set_summaries(const std::string& doc_id, std::vector<SummaryEmbeddings> entries,
                       const CompressionConfig& comp, const std::string& group_id);

    // exact exhaustive search: descending cosine, ties by ascending passage_id;
    // optionally restricted to one doc_id
    std::vector<PassageRecord> top_k(std::span<const float> query, int k,
                                     const std::string* doc_filter = nullptr) const;
    std::vector<PassageRecord> top_k(const Model& model, const std::string& query_text, int k,
                                     const std::string* doc_filter = nullptr) const;

    // union of covering chunks, deduplicated, ordered by (doc_id, chunk_index);
    // max_rows >= 0 truncates at whole-chunk granularity keeping the earliest
    // chunks, and throws window_overflow_error if not even one chunk fits
    EmbeddingSequence gather_summaries(std::span<const PassageRecord> records,
                                       int max_rows = -1) const;

    const std::vector<SummaryEmbeddings>& summaries(const std::string& doc_id) const;
    const std::map<std::string, DocInfo>& docs() const { return docs_; }
    const std::vector<PassageRecord>& records() const { return records_; }
    int d_model() const { return d_model_; }
    int passage_length() const { return passage_length_; }
    size_t size() const { return records_.size(); }

    std::string embedder_digest;

    // directory layout: manifest.json + records.jsonl + embeddings.bin +
    // summaries/<doc_id>.summ; bit-exact round trip
    void persist(const std::string& dir) const;
    static VectorStore load(const std::string& dir);

private:
    int d_model_ = 0;
    int passage_length_ = 512;
    std::vector<PassageRecord> records_;
    std::map<std::string, DocInfo> docs_;
    std::map<std::string, std::vector<SummaryEmbeddings>> summaries_;
};

// tokenizes, compresses, chunks into passages, embeds, and adds every record
// for one document
void index_document(VectorStore& store, const Model& model, const std::string& doc_id,
                    const std::string& group_id, const std::string& adaptor_id,
                    const std::string& text, const CompressionConfig& comp);

} // namespace lloco
