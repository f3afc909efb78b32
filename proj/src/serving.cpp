#include "lloco/serving.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "lloco/trainer.hpp"

namespace lloco {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// enums and request plumbing
// ---------------------------------------------------------------------------

const char* mode_name(ServeMode mode) {
    switch (mode) {
    case ServeMode::no_context: return "no_context";
    case ServeMode::full_context: return "full_context";
    case ServeMode::retrieval: return "retrieval";
    case ServeMode::compressed_unfinetuned: return "compressed_unfinetuned";
    case ServeMode::lloco: return "lloco";
    }
    throw config_error("unknown serve mode value");
}

ServeMode mode_from_name(const std::string& name) {
    for (ServeMode m : {ServeMode::no_context, ServeMode::full_context, ServeMode::retrieval,
                        ServeMode::compressed_unfinetuned, ServeMode::lloco})
        if (name == mode_name(m)) return m;
    throw config_error("unknown serve mode: " + name);
}

const char* policy_name(GroupPolicy policy) {
    return policy == GroupPolicy::strict ? "strict" : "majority";
}

GroupPolicy policy_from_name(const std::string& name) {
    if (name == "strict") return GroupPolicy::strict;
    if (name == "majority") return GroupPolicy::majority;
    throw config_error("unknown group policy: " + name);
}

void ServeRequest::validate() const {
    if (max_new_tokens < 0) throw config_error("max_new_tokens must be >= 0");
    if (top_k < 1) throw config_error("top_k must be >= 1");
}

// json text fields carry raw bytes as codepoints U+0000..U+00FF, so arbitrary
// byte-level model output survives the wire losslessly (ASCII is unchanged)
static std::string bytes_to_json_text(const std::string& bytes) {
    std::string out;
    out.reserve(bytes.size());
    for (unsigned char b : bytes) {
        if (b < 0x80) {
            out += char(b);
        } else {
            out += char(0xC0 | (b >> 6));
            out += char(0x80 | (b & 0x3F));
        }
    }
    return out;
}

static std::string json_text_to_bytes(const std::string& text) {
    std::string out;
    for (size_t i = 0; i < text.size();) {
        unsigned char c = text[i];
        if (c < 0x80) {
            out += char(c);
            ++i;
        } else if ((c & 0xE0) == 0xC0 && i + 1 < text.size()) {
            unsigned cp = unsigned((c & 0x1Fu) << 6) | unsigned(text[i + 1] & 0x3F);
            if (cp > 0xFF) throw config_error("text field has a codepoint above U+00FF");
            out += char(cp);
            i += 2;
        } else {
            throw config_error("text field has a codepoint above U+00FF");
        }
    }
    return out;
}

std::string request_to_json(const ServeRequest& req) {
    json j = {{"question", bytes_to_json_text(req.question)},
              {"mode", mode_name(req.mode)},
              {"max_new_tokens", req.max_new_tokens},
              {"top_k", req.top_k}};
    if (!req.group_id.empty()) j["group_id"] = req.group_id;
    if (!req.doc_id.empty()) j["doc_id"] = req.doc_id;
    return j.dump();
}

ServeRequest request_from_json(const std::string& body) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception& e) {
        throw config_error(std::string("request is not valid json: ") + e.what());
    }
    ServeRequest req;
    try {
        req.question = json_text_to_bytes(j.at("question").get<std::string>());
        req.mode = mode_from_name(j.at("mode").get<std::string>());
        if (j.contains("group_id")) req.group_id = j.at("group_id").get<std::string>();
        if (j.contains("doc_id")) req.doc_id = j.at("doc_id").get<std::string>();
        if (j.contains("max_new_tokens")) req.max_new_tokens = j.at("max_new_tokens").get<int>();
        if (j.contains("top_k")) req.top_k = j.at("top_k").get<int>();
    } catch (const json::exception& e) {
        throw config_error(std::string("bad request field: ") + e.what());
    }
    req.validate();
    return req;
}

std::string response_to_json(const ServeResponse& resp) {
    json j = {{"answer", bytes_to_json_text(resp.answer)},
              {"retrieved_passage_ids", resp.retrieved_passage_ids},
              {"adaptor_id", resp.adaptor_id},
              {"composition",
               {{"summary_rows", resp.composition.summary_rows},
                {"context_tokens", resp.composition.context_tokens},
                {"question_tokens", resp.composition.question_tokens}}},
              {"latency_ms", resp.latency_ms}};
    return j.dump();
}

ServeResponse response_from_json(const std::string& body) {
    ServeResponse resp;
    try {
        json j = json::parse(body);
        resp.answer = json_text_to_bytes(j.at("answer").get<std::string>());
        resp.retrieved_passage_ids =
            j.at("retrieved_passage_ids").get<std::vector<std::string>>();
        resp.adaptor_id = j.at("adaptor_id").get<std::string>();
        const json& c = j.at("composition");
        resp.composition.summary_rows = c.at("summary_rows").get<int>();
        resp.composition.context_tokens = c.at("context_tokens").get<int>();
        resp.composition.question_tokens = c.at("question_tokens").get<int>();
        resp.latency_ms = j.at("latency_ms").get<double>();
    } catch (const json::exception& e) {
        throw config_error(std::string("bad response body: ") + e.what());
    }
    return resp;
}

// ---------------------------------------------------------------------------
// artifacts
// ---------------------------------------------------------------------------

void save_base_model(const Model& model, const std::string& dir) {
    fs::create_directories(dir);
    model.save((fs::path(dir) / "model.json").string(), (fs::path(dir) / "model.bin").string());
}

Artifacts Artifacts::load(const std::string& dir) {
    Artifacts art;
    art.model = Model::load((fs::path(dir) / "model.json").string(),
                            (fs::path(dir) / "model.bin").string());
    art.store = VectorStore::load((fs::path(dir) / "store").string());
    if (!art.store.embedder_digest.empty() &&
        art.store.embedder_digest != hex64(art.model.weight_digest()))
        throw config_error("store was embedded by a different model (digest " +
                           art.store.embedder_digest + " vs " +
                           hex64(art.model.weight_digest()) + ")");
    art.registry = AdaptorRegistry::open((fs::path(dir) / "registry").string());
    for (const AdaptorRecord& rec : art.registry.records())
        art.adaptors[rec.group_id] = art.registry.load(rec);
    return art;
}

// ---------------------------------------------------------------------------
// query flow
// ---------------------------------------------------------------------------

std::string choose_group(std::span<const PassageRecord> records, GroupPolicy policy) {
    if (records.empty()) throw empty_store_error("no retrieved passages to infer a group from");
    std::map<std::string, int> counts; // ordered, so ties resolve to the smallest id
    for (const PassageRecord& r : records) ++counts[r.group_id];
    if (counts.size() == 1) return counts.begin()->first;
    if (policy == GroupPolicy::strict) {
        std::string groups;
        for (const auto& [g, n] : counts) groups += (groups.empty() ? "" : ", ") + g;
        throw mixed_group_error("retrieved passages span groups {" + groups + "}");
    }
    std::string best;
    int best_n = -1;
    for (const auto& [g, n] : counts)
        if (n > best_n) {
            best = g;
            best_n = n;
        }
    return best;
}

// original document bytes, rebuilt from its tiled passages
static std::vector<int> document_tokens(const VectorStore& store, const std::string& doc_id) {
    std::vector<const PassageRecord*> passages;
    for (const PassageRecord& r : store.records())
        if (r.doc_id == doc_id) passages.push_back(&r);
    if (passages.empty()) throw not_found_error("no passages indexed for doc " + doc_id);
    std::sort(passages.begin(), passages.end(),
              [](const auto* a, const auto* b) { return a->token_start < b->token_start; });
    std::string text;
    for (const auto* p : passages) text += p->text;
    return tokenize(text);
}

ServeResponse serve_query(const ServeRequest& req, const Artifacts& artifacts,
                          GroupPolicy policy) {
    req.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const Model& model = artifacts.model;
    const int window = model.config().window;

    std::vector<int> prompt = tokenize(qa_prompt(req.question));
    ServeResponse resp;
    resp.composition.question_tokens = static_cast<int>(prompt.size());

    const int fixed = static_cast<int>(prompt.size()) + req.max_new_tokens;
    if (fixed > window)
        throw window_overflow_error("question and generation budget alone exceed the window");
    const int budget = window - fixed;

    EmbeddingSequence prefix(model.config().d_model);
    std::vector<int> context;
    const LoraAdaptor* adaptor = nullptr;
    const std::string* doc_filter = req.doc_id.empty() ? nullptr : &req.doc_id;

    switch (req.mode) {
    case ServeMode::no_context:
        break;
    case ServeMode::full_context: {
        std::string doc = req.doc_id;
        if (doc.empty()) {
            // no stated document: the top retrieved passage names one
            auto hits = artifacts.store.top_k(model, req.question, 1);
            resp.retrieved_passage_ids.push_back(hits[0].passage_id);
            doc = hits[0].doc_id;
        }
        context = document_tokens(artifacts.store, doc);
        if (static_cast<int>(context.size()) > budget) context.resize(budget); // keep the head
        break;
    }
    case ServeMode::retrieval: {
        auto hits = artifacts.store.top_k(model, req.question, req.top_k, doc_filter);
        for (const PassageRecord& h : hits) {
            resp.retrieved_passage_ids.push_back(h.passage_id);
            std::vector<int> t = tokenize(h.text);
            context.insert(context.end(), t.begin(), t.end());
        }
        if (static_cast<int>(context.size()) > budget)
            throw window_overflow_error("retrieved passages exceed the window; lower top_k");
        break;
    }
    case ServeMode::compressed_unfinetuned:
    case ServeMode::lloco: {
        auto hits = artifacts.store.top_k(model, req.question, req.top_k, doc_filter);
        for (const PassageRecord& h : hits) resp.retrieved_passage_ids.push_back(h.passage_id);
        prefix = artifacts.store.gather_summaries(hits, budget);
        if (req.mode == ServeMode::lloco) {
            const std::string group =
                req.group_id.empty() ? choose_group(hits, policy) : req.group_id;
            auto it = artifacts.adaptors.find(group);
            if (it == artifacts.adaptors.end())
                throw not_found_error("no adaptor registered for group " + group);
            adaptor = &it->second;
            resp.adaptor_id = it->second.adaptor_id;
        }
        break;
    }
    }

    resp.composition.summary_rows = prefix.size();
    resp.composition.context_tokens = static_cast<int>(context.size());
    if (prefix.size() + static_cast<int>(context.size()) + fixed > window)
        throw window_overflow_error("assembled prompt exceeds the window");

    std::vector<int> full_prompt = std::move(context);
    full_prompt.insert(full_prompt.end(), prompt.begin(), prompt.end());
    std::vector<int> out = model.generate(prefix, full_prompt, req.max_new_tokens, adaptor);
    resp.answer = detokenize(out);

    resp.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return resp;
}

// ---------------------------------------------------------------------------
// offline preprocessing
// ---------------------------------------------------------------------------

VectorStore preprocess_corpus(const Model& model, const std::string& corpus_dir,
                              const std::map<std::string, std::string>& group_map,
                              const CompressionConfig& comp, int passage_length,
                              PreprocessReport* report) {
    VectorStore store(model.config().d_model, passage_length);
    store.embedder_digest = hex64(model.weight_digest());
    PreprocessReport local;
    PreprocessReport& rep = report ? *report : local;
    rep = PreprocessReport{};

    if (!fs::is_directory(corpus_dir)) throw not_found_error("no corpus dir " + corpus_dir);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(corpus_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".txt")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end()); // deterministic ingestion order

    for (const fs::path& file : files) {
        PreprocessDocReport doc;
        doc.doc_id = file.stem().string();
        auto git = group_map.find(doc.doc_id);
        if (git == group_map.end()) {
            doc.status = "skipped: no group mapping";
            rep.docs.push_back(doc);
            continue;
        }
        doc.group_id = git->second;
        std::string text;
        try {
            text = read_text_file(file.string());
        } catch (const std::exception& e) {
            doc.status = std::string("skipped: ") + e.what();
            rep.docs.push_back(doc);
            continue;
        }
        try {
            index_document(store, model, doc.doc_id, doc.group_id, "lora:" + doc.group_id, text,
                           comp);
        } catch (const window_overflow_error& e) {
            doc.status = std::string("flagged: ") + e.what();
            rep.docs.push_back(doc);
            continue;
        }
        doc.n_tokens = static_cast<int>(text.size());
        doc.n_chunks = store.docs().at(doc.doc_id).n_chunks;
        doc.n_passages =
            static_cast<int>(chunk_passages(doc.n_tokens, passage_length).size());
        doc.status = "ok";
        rep.total_tokens += doc.n_tokens;
        rep.total_summary_rows += int64_t(doc.n_chunks) * comp.summary_count;
        rep.docs.push_back(doc);
    }
    return store;
}

// ---------------------------------------------------------------------------
// http service
// ---------------------------------------------------------------------------

struct HttpServer::Impl {
    const Artifacts& artifacts;
    GroupPolicy policy;
    httplib::Server server;
    std::thread thread;

    Impl(const Artifacts& art, GroupPolicy pol) : artifacts(art), policy(pol) {
        server.new_task_queue = [] { return new httplib::ThreadPool(8); };

        server.Post("/v1/query", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                ServeRequest sreq = request_from_json(req.body);
                ServeResponse sresp = serve_query(sreq, artifacts, policy);
                res.set_content(response_to_json(sresp), "application/json");
            } catch (const not_found_error& e) {
                fail(res, 404, e.what());
            } catch (const mixed_group_error& e) {
                fail(res, 409, e.what());
            } catch (const std::runtime_error& e) {
                fail(res, 400, e.what());
            } catch (const std::exception& e) {
                fail(res, 500, e.what());
            }
        });

        server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
            json j = {{"status", "ok"},
                      {"groups", artifacts.registry.records().size()},
                      {"passages", artifacts.store.size()}};
            res.set_content(j.dump(), "application/json");
        });

        server.Get("/v1/groups", [this](const httplib::Request&, httplib::Response& res) {
            json list = json::array();
            for (const AdaptorRecord& r : artifacts.registry.records())
                list.push_back({{"group_id", r.group_id},
                                {"adaptor_id", r.adaptor_id},
                                {"version", r.version},
                                {"path", r.path},
                                {"created_at", r.created_at},
                                {"train_config_digest", r.train_config_digest}});
            res.set_content(list.dump(), "application/json");
        });
    }

    static void fail(httplib::Response& res, int code, const std::string& message) {
        res.status = code;
        json j = {{"error", message}};
        res.set_content(j.dump(), "application/json");
    }
};

HttpServer::HttpServer(const Artifacts& artifacts, GroupPolicy policy)
    : impl_(std::make_unique<Impl>(artifacts, policy)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
        if (bound <= 0) throw config_error("failed to bind an ephemeral port on " + host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        throw config_error("failed to bind " + host + ":" + std::to_string(port));
    }
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void HttpServer::stop() {
    if (!impl_ || !impl_->thread.joinable()) return;
    impl_->server.stop();
    impl_->thread.join();
}

} // namespace lloco
