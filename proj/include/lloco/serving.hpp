#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lloco/lora.hpp"
#include "lloco/store.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// query-time flow: assemble a prompt per serving mode, pick the group's
// adaptor, and decode greedily
// ---------------------------------------------------------------------------

enum class ServeMode : uint8_t {
    no_context,            // question only
    full_context,          // document text prepended, head kept under the window
    retrieval,             // top-k passage texts prepended
    compressed_unfinetuned, // gathered summary rows prepended, no adaptor
    lloco,                 // summary rows + the group's adaptor
};

const char* mode_name(ServeMode mode);
ServeMode mode_from_name(const std::string& name); // throws config_error

enum class GroupPolicy : uint8_t {
    strict,   // retrieved passages must share one group
    majority, // modal group wins; ties go to the lexicographically smallest
};

const char* policy_name(GroupPolicy policy);
GroupPolicy policy_from_name(const std::string& name); // throws config_error

struct ServeRequest {
    std::string question;
    std::string group_id; // optional: pins the adaptor choice
    std::string doc_id;   // optional: scopes retrieval / names the full-context doc
    ServeMode mode = ServeMode::lloco;
    int max_new_tokens = 16;
    int top_k = 5;

    void validate() const; // throws config_error
};

struct PromptComposition {
    int summary_rows = 0;
    int context_tokens = 0;
    int question_tokens = 0; // includes the QA template bytes
};

struct ServeResponse {
    std::string answer;
    std::vector<std::string> retrieved_passage_ids; // rank order
    std::string adaptor_id; // empty when no adaptor was applied
    PromptComposition composition;
    double latency_ms = 0.0;
};

// request/response JSON bodies, field-for-field
std::string request_to_json(const ServeRequest& req);
ServeRequest request_from_json(const std::string& body); // throws config_error
std::string response_to_json(const ServeResponse& resp);
ServeResponse response_from_json(const std::string& body); // throws config_error

// ---------------------------------------------------------------------------
// artifacts: everything serving needs, immutable once loaded
// ---------------------------------------------------------------------------

struct Artifacts {
    Model model;
    VectorStore store;
    AdaptorRegistry registry;
    std::map<std::string, LoraAdaptor> adaptors; // group_id -> active adaptor

    // layout: model.json + model.bin + store/ + registry/; verifies the store
    // was embedded by this model
    static Artifacts load(const std::string& dir);
};

void save_base_model(const Model& model, const std::string& dir);

// group of a retrieved passage set under the policy; throws mixed_group_error
// (strict) or empty_store_error (no records)
std::string choose_group(std::span<const PassageRecord> records, GroupPolicy policy);

ServeResponse serve_query(const ServeRequest& req, const Artifacts& artifacts,
                          GroupPolicy policy = GroupPolicy::strict);

// ---------------------------------------------------------------------------
// offline preprocessing: compress + index a corpus directory of .txt docs
// ---------------------------------------------------------------------------

struct PreprocessDocReport {
    std::string doc_id;
    std::string group_id;
    std::string status; // "ok", "skipped: ...", or "flagged: ..."
    int n_tokens = 0;
    int n_chunks = 0;
    int n_passages = 0;
};

struct PreprocessReport {
    std::vector<PreprocessDocReport> docs;
    int64_t total_tokens = 0;       // over indexed docs
    int64_t total_summary_rows = 0; // over indexed docs

    double achieved_ratio() const {
        return total_summary_rows == 0 ? 0.0 : double(total_tokens) / double(total_summary_rows);
    }
};

// doc_id = file stem of each "<doc_id>.txt"; unmapped or unreadable docs are
// skipped with a report entry, docs that overflow the encoder are flagged;
// deterministic, so a rerun rebuilds an identical store
VectorStore preprocess_corpus(const Model& model, const std::string& corpus_dir,
                              const std::map<std::string, std::string>& group_map,
                              const CompressionConfig& comp, int passage_length,
                              PreprocessReport* report = nullptr);

// ---------------------------------------------------------------------------
// http service: POST /v1/query, GET /v1/health, GET /v1/groups
// ---------------------------------------------------------------------------

class HttpServer {
public:
    HttpServer(const Artifacts& artifacts, GroupPolicy policy);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // binds (port 0 picks an ephemeral port), serves on a background thread,
    // and returns the bound port; throws config_error when the bind fails
    int start(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace lloco
