#pragma once

#include <string>
#include <vector>

#include "lloco/model.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// recursive summary compression: each chunk of L tokens becomes k summary
// rows, conditioned on the summaries of earlier chunks
// ---------------------------------------------------------------------------

struct CompressionConfig {
    int chunk_length = 1536; // L
    int summary_count = 50;  // k
    int max_summary_rows = 0; // cap on conditioning rows; 0 derives floor(W/2)

    void validate() const; // throws config_error
    int conditioning_cap(int window) const {
        return max_summary_rows > 0 ? max_summary_rows : window / 2;
    }
};

// the desk-scale profile keeps L/k = 30, the full-scale ratio
CompressionConfig toy_compression();

struct SummaryEmbeddings {
    int chunk_index = 0;
    int d_model = 0;
    std::vector<double> rows; // k x d_model
    std::string source_doc;
    int token_start = 0;
    int token_end = 0; // [start, end)

    int k() const { return d_model == 0 ? 0 : static_cast<int>(rows.size()) / d_model; }
    const double* row(int r) const { return rows.data() + size_t(r) * d_model; }
};

// non-overlapping consecutive spans, all length L except a shorter final one
std::vector<std::vector<int>> chunk_document(std::span<const int> tokens, int chunk_length);

// [prior rows; chunk embeddings; k slot embeddings] -> hidden states at the
// slot positions; prior is truncated to its most recent conditioning rows
SummaryEmbeddings compress_chunk(const Model& model, std::span<const int> chunk,
                                 const EmbeddingSequence& prior, const CompressionConfig& cfg);

std::vector<SummaryEmbeddings> compress_document(const Model& model, std::span<const int> tokens,
                                                 const CompressionConfig& cfg,
                                                 const std::string& doc_id = "");

double compression_ratio(int chunk_length, int summary_count);
int64_t effective_window(int window, int chunk_length, int summary_count);

// flatten archive entries into decoder prefix rows, in chunk order
EmbeddingSequence summaries_as_rows(std::span<const SummaryEmbeddings> entries);

// per-document archive: JSON header + float32 rows, chunk-major; the file
// round-trips bit-exactly (loaded rows are the float32-snapped values)
void save_summaries(const std::string& path, std::span<const SummaryEmbeddings> entries,
                    const CompressionConfig& cfg);
std::vector<SummaryEmbeddings> load_summaries(const std::string& path);

} // namespace lloco
