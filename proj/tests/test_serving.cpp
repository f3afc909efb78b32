#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "lloco/serving.hpp"
#include "lloco/synth.hpp"
#include "lloco/trainer.hpp"
#include "test_util.hpp"

using namespace lloco;

namespace {

ModelConfig serve_model_config() {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.window = 256;
    cfg.seed = 33;
    return cfg;
}

CompressionConfig serve_comp() {
    CompressionConfig comp;
    comp.chunk_length = 24;
    comp.summary_count = 2;
    return comp;
}

std::string read_bytes(const std::string& path) { return read_text_file(path); }

// a complete artifact directory: base model, preprocessed store for two
// groups, and a registry with one (zero-delta) adaptor per group
struct ServeFixture {
    testutil::TempDir tmp{"serve"};
    SynthGroup ga, gb;
    Artifacts art;

    ServeFixture() {
        Model model = Model::init(serve_model_config(), 4);
        ga = make_group("ga", 2, 3, 200, 2, 81);
        gb = make_group("gb", 1, 3, 200, 2, 82);

        std::filesystem::create_directories(tmp.file("corpus"));
        std::map<std::string, std::string> groups;
        for (const SynthGroup* g : {&ga, &gb})
            for (const SynthDoc& d : g->docs) {
                write_text_file(tmp.file("corpus/" + d.doc_id + ".txt"), d.text);
                groups[d.doc_id] = g->group_id;
            }

        VectorStore store = preprocess_corpus(model, tmp.file("corpus"), groups, serve_comp(),
                                              /*passage_length=*/16);
        store.persist(tmp.file("art/store"));
        save_base_model(model, tmp.file("art"));

        AdaptorRegistry registry = AdaptorRegistry::open(tmp.file("art/registry"));
        for (const char* gid : {"ga", "gb"}) {
            LoraAdaptor ad = init_adaptor(serve_model_config(), gid,
                                          default_lora_targets(serve_model_config().n_layers),
                                          /*rank=*/2, /*alpha=*/4.0f, /*seed=*/7);
            registry.register_adaptor(ad, "test");
        }
        art = Artifacts::load(tmp.file("art"));
    }

    ServeRequest request(ServeMode mode, const std::string& question) const {
        ServeRequest req;
        req.question = question;
        req.mode = mode;
        req.top_k = 3;
        req.max_new_tokens = 8;
        return req;
    }
};

PassageRecord group_stub(const std::string& id, const std::string& group) {
    PassageRecord r;
    r.passage_id = id;
    r.group_id = group;
    return r;
}

} // namespace

TEST_CASE("mode and policy names round trip") {
    for (ServeMode m : {ServeMode::no_context, ServeMode::full_context, ServeMode::retrieval,
                        ServeMode::compressed_unfinetuned, ServeMode::lloco})
        CHECK(mode_from_name(mode_name(m)) == m);
    CHECK_THROWS_AS(mode_from_name("fancy"), config_error);
    CHECK(policy_from_name("strict") == GroupPolicy::strict);
    CHECK(policy_from_name("majority") == GroupPolicy::majority);
    CHECK_THROWS_AS(policy_from_name("loose"), config_error);
}

TEST_CASE("request and response json round trip field for field") {
    ServeRequest req;
    req.question = "what is the anchor?";
    req.group_id = "ga";
    req.doc_id = "ga-d0";
    req.mode = ServeMode::retrieval;
    req.max_new_tokens = 5;
    req.top_k = 2;
    ServeRequest back = request_from_json(request_to_json(req));
    CHECK(back.question == req.question);
    CHECK(back.group_id == req.group_id);
    CHECK(back.doc_id == req.doc_id);
    CHECK(back.mode == req.mode);
    CHECK(back.max_new_tokens == req.max_new_tokens);
    CHECK(back.top_k == req.top_k);

    // omitted optionals take their defaults
    ServeRequest bare = request_from_json(R"({"question":"q","mode":"no_context"})");
    CHECK(bare.group_id.empty());
    CHECK(bare.doc_id.empty());
    CHECK(bare.max_new_tokens == 16);
    CHECK(bare.top_k == 5);

    CHECK_THROWS_AS(request_from_json("{nope"), config_error);
    CHECK_THROWS_AS(request_from_json(R"({"question":"q"})"), config_error);
    CHECK_THROWS_AS(request_from_json(R"({"question":"q","mode":"warp"})"), config_error);
    CHECK_THROWS_AS(request_from_json(R"({"question":"q","mode":"lloco","top_k":0})"),
                    config_error);

    ServeResponse resp;
    resp.answer = "fjord.";
    resp.retrieved_passage_ids = {"a#p0", "b#p1"};
    resp.adaptor_id = "ga-r2-x";
    resp.composition = {4, 32, 24};
    resp.latency_ms = 1.5;
    ServeResponse rback = response_from_json(response_to_json(resp));
    CHECK(rback.answer == resp.answer);

    // raw (non-UTF-8) byte answers survive the wire losslessly
    ServeResponse raw = resp;
    raw.answer = std::string("\xfd\x00\x80 ok", 6);
    CHECK(response_from_json(response_to_json(raw)).answer == raw.answer);
    ServeRequest rawq;
    rawq.question = std::string("\xff\x01", 2);
    rawq.mode = ServeMode::no_context;
    CHECK(request_from_json(request_to_json(rawq)).question == rawq.question);
    CHECK(rback.retrieved_passage_ids == resp.retrieved_passage_ids);
    CHECK(rback.adaptor_id == resp.adaptor_id);
    CHECK(rback.composition.summary_rows == 4);
    CHECK(rback.composition.context_tokens == 32);
    CHECK(rback.composition.question_tokens == 24);
    CHECK(rback.latency_ms == 1.5);
}

TEST_CASE("choose_group policies") {
    std::vector<PassageRecord> mixed = {group_stub("p0", "A"), group_stub("p1", "A"),
                                        group_stub("p2", "A"), group_stub("p3", "B"),
                                        group_stub("p4", "B")};
    // modal-count oracle
    std::map<std::string, int> counts;
    for (const PassageRecord& r : mixed) ++counts[r.group_id];
    CHECK(counts["A"] == 3);
    CHECK(choose_group(mixed, GroupPolicy::majority) == "A");
    CHECK_THROWS_AS(choose_group(mixed, GroupPolicy::strict), mixed_group_error);

    std::vector<PassageRecord> tied = {group_stub("p0", "B"), group_stub("p1", "A"),
                                       group_stub("p2", "A"), group_stub("p3", "B")};
    CHECK(choose_group(tied, GroupPolicy::majority) == "A"); // lexicographic tie-break

    std::vector<PassageRecord> uniform = {group_stub("p0", "C"), group_stub("p1", "C")};
    CHECK(choose_group(uniform, GroupPolicy::strict) == "C");
    CHECK(choose_group(uniform, GroupPolicy::majority) == "C");

    std::vector<PassageRecord> none;
    CHECK_THROWS_AS(choose_group(none, GroupPolicy::majority), empty_store_error);
}

TEST_CASE("preprocess indexes, reports, and reruns identically") {
    testutil::TempDir tmp("prep");
    Model model = Model::init(serve_model_config(), 4);
    std::filesystem::create_directories(tmp.file("corpus"));

    // one doc of exactly two toy chunks
    std::string two_chunks(2 * serve_comp().chunk_length, 'x');
    for (size_t i = 0; i < two_chunks.size(); ++i) two_chunks[i] = char('a' + i % 7);
    write_text_file(tmp.file("corpus/solo.txt"), two_chunks);
    write_text_file(tmp.file("corpus/orphan.txt"), "no group for this one");

    std::map<std::string, std::string> groups = {{"solo", "g0"}};
    PreprocessReport report;
    VectorStore store =
        preprocess_corpus(model, tmp.file("corpus"), groups, serve_comp(), 16, &report);

    REQUIRE(store.docs().count("solo") == 1);
    CHECK(store.summaries("solo").size() == 2);
    CHECK(store.docs().at("solo").n_chunks == 2);
    REQUIRE(report.docs.size() == 2); // sorted by filename: orphan, solo
    CHECK(report.docs[0].doc_id == "orphan");
    CHECK(report.docs[0].status == "skipped: no group mapping");
    CHECK(report.docs[1].status == "ok");
    CHECK(report.docs[1].n_chunks == 2);
    CHECK(report.docs[1].n_passages == 3); // 48 tokens in 16-token passages
    CHECK(report.total_tokens == 48);
    CHECK(report.total_summary_rows == 4);

    // records carry the group's adaptor slot
    for (const PassageRecord& r : store.records()) CHECK(r.adaptor_id == "lora:g0");

    // a rerun rebuilds a bitwise-identical store
    VectorStore again = preprocess_corpus(model, tmp.file("corpus"), groups, serve_comp(), 16);
    store.persist(tmp.file("out1"));
    again.persist(tmp.file("out2"));
    for (const char* name : {"manifest.json", "records.jsonl", "embeddings.bin",
                             "summaries/solo.summ"})
        CHECK(read_bytes(tmp.file(std::string("out1/") + name)) ==
              read_bytes(tmp.file(std::string("out2/") + name)));
}

TEST_CASE("preprocess achieves the full-scale compression ratio") {
    // skinny model, real chunk geometry: 1536-token chunks into 50 rows
    ModelConfig mc;
    mc.vocab_size = 256;
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.window = 1600;
    mc.seed = 5;
    Model model = Model::init(mc, 50);

    CompressionConfig comp;
    comp.chunk_length = 1536;
    comp.summary_count = 50;
    comp.max_summary_rows = 14; // 1536 + 14 + 50 = 1600 fits the window exactly

    testutil::TempDir tmp("prep-full");
    std::filesystem::create_directories(tmp.file("corpus"));
    Rng rng(99);
    auto doc = [&](int chunks) {
        std::string text(size_t(chunks) * comp.chunk_length, ' ');
        for (char& c : text) c = char('a' + rng.below(26));
        return text;
    };
    write_text_file(tmp.file("corpus/long0.txt"), doc(3));
    write_text_file(tmp.file("corpus/long1.txt"), doc(2));

    std::map<std::string, std::string> groups = {{"long0", "g"}, {"long1", "g"}};
    PreprocessReport report;
    VectorStore store =
        preprocess_corpus(model, tmp.file("corpus"), groups, comp, 512, &report);

    CHECK(report.total_tokens == 5 * 1536);
    CHECK(report.total_summary_rows == 5 * 50);
    CHECK(report.achieved_ratio() == doctest::Approx(30.72));
    // five passages of 512 tokens tile each 1536-token chunk
    CHECK(store.records().size() == size_t(report.total_tokens / 512));
}

TEST_CASE("serve_query no_context ignores the store") {
    ServeFixture fx;
    ServeRequest req = fx.request(ServeMode::no_context, "what is the anchor?");
    ServeResponse resp = serve_query(req, fx.art);

    CHECK(resp.composition.summary_rows == 0);
    CHECK(resp.composition.context_tokens == 0);
    CHECK(resp.composition.question_tokens ==
          int(tokenize(qa_prompt(req.question)).size()));
    CHECK(resp.retrieved_passage_ids.empty());
    CHECK(resp.adaptor_id.empty());
    CHECK(int(resp.answer.size()) == req.max_new_tokens);
    CHECK(resp.latency_ms > 0.0);

    // invariant to store contents: an artifact set with an empty store
    Artifacts bare;
    bare.model = fx.art.model;
    bare.store = VectorStore(serve_model_config().d_model, 16);
    ServeResponse resp2 = serve_query(req, bare);
    CHECK(resp2.answer == resp.answer);
}

TEST_CASE("serve_query full_context prepends the stated document") {
    ServeFixture fx;
    const std::string doc_id = fx.ga.docs[0].doc_id;
    ServeRequest req = fx.request(ServeMode::full_context, fx.ga.examples[0].question);
    req.doc_id = doc_id;
    ServeResponse resp = serve_query(req, fx.art);

    const int window = fx.art.model.config().window;
    const int budget = window - resp.composition.question_tokens - req.max_new_tokens;
    const int doc_tokens = int(fx.ga.docs[0].text.size());
    CHECK(resp.composition.context_tokens == std::min(doc_tokens, budget));
    CHECK(resp.composition.summary_rows == 0);
    CHECK(resp.composition.context_tokens + resp.composition.question_tokens +
              req.max_new_tokens <=
          window);

    // no stated doc: the top retrieved passage names one
    ServeRequest vague = fx.request(ServeMode::full_context, fx.ga.examples[0].question);
    ServeResponse picked = serve_query(vague, fx.art);
    CHECK(picked.retrieved_passage_ids.size() == 1);
    CHECK(picked.composition.context_tokens > 0);

    ServeRequest missing = req;
    missing.doc_id = "no-such-doc";
    CHECK_THROWS_AS(serve_query(missing, fx.art), not_found_error);
}

TEST_CASE("serve_query retrieval prepends whole passages") {
    ServeFixture fx;
    ServeRequest req = fx.request(ServeMode::retrieval, fx.ga.examples[0].question);
    ServeResponse resp = serve_query(req, fx.art);

    REQUIRE(int(resp.retrieved_passage_ids.size()) == req.top_k);
    int expect_tokens = 0;
    for (const std::string& pid : resp.retrieved_passage_ids) {
        auto it = std::find_if(fx.art.store.records().begin(), fx.art.store.records().end(),
                               [&](const PassageRecord& r) { return r.passage_id == pid; });
        REQUIRE(it != fx.art.store.records().end());
        expect_tokens += int(it->text.size());
    }
    CHECK(resp.composition.context_tokens == expect_tokens);
    CHECK(resp.composition.summary_rows == 0);
    CHECK(resp.adaptor_id.empty());

    // doc filter keeps retrieval inside the named document
    ServeRequest scoped = req;
    scoped.doc_id = fx.ga.docs[1].doc_id;
    ServeResponse sresp = serve_query(scoped, fx.art);
    for (const std::string& pid : sresp.retrieved_passage_ids)
        CHECK(pid.rfind(scoped.doc_id + "#", 0) == 0);
}

TEST_CASE("serve_query compressed modes prepend summary rows") {
    ServeFixture fx;
    ServeRequest req = fx.request(ServeMode::compressed_unfinetuned, fx.ga.examples[0].question);
    ServeResponse resp = serve_query(req, fx.art);

    // summary rows = distinct covering chunks * k
    auto hits = fx.art.store.top_k(fx.art.model, req.question, req.top_k);
    std::set<std::pair<std::string, int>> chunks;
    for (const PassageRecord& r : hits)
        for (int c : r.covering_chunk_indices) chunks.insert({r.doc_id, c});
    CHECK(resp.composition.summary_rows == int(chunks.size()) * serve_comp().summary_count);
    CHECK(resp.composition.context_tokens == 0);
    CHECK(resp.adaptor_id.empty());
    CHECK(resp.retrieved_passage_ids.size() == size_t(req.top_k));

    // lloco = same prompt + the group's adaptor; zero-delta adaptor keeps the
    // answer identical
    ServeRequest lreq = req;
    lreq.mode = ServeMode::lloco;
    lreq.group_id = "ga";
    ServeResponse lresp = serve_query(lreq, fx.art);
    CHECK(lresp.adaptor_id == fx.art.registry.lookup("ga")->adaptor_id);
    CHECK(lresp.composition.summary_rows == resp.composition.summary_rows);
    CHECK(lresp.answer == resp.answer);

    ServeRequest unknown = lreq;
    unknown.group_id = "nope";
    CHECK_THROWS_AS(serve_query(unknown, fx.art), not_found_error);
}

TEST_CASE("serve_query lloco infers the group from retrieval") {
    ServeFixture fx;
    ServeRequest req = fx.request(ServeMode::lloco, fx.gb.examples[0].question);
    req.doc_id = fx.gb.docs[0].doc_id; // scope retrieval to a gb doc
    ServeResponse resp = serve_query(req, fx.art);
    CHECK(resp.adaptor_id == fx.art.registry.lookup("gb")->adaptor_id);

    // spanning both groups: strict errors, majority picks the modal group
    ServeRequest wide = fx.request(ServeMode::lloco, fx.ga.examples[0].question);
    wide.top_k = int(fx.art.store.size());
    CHECK_THROWS_AS(serve_query(wide, fx.art, GroupPolicy::strict), mixed_group_error);
    ServeResponse major = serve_query(wide, fx.art, GroupPolicy::majority);
    CHECK(major.adaptor_id == fx.art.registry.lookup("ga")->adaptor_id); // ga has 2 of 3 docs
}

TEST_CASE("serve_query respects the window budget") {
    ServeFixture fx;

    ServeRequest big = fx.request(ServeMode::no_context, "q");
    big.max_new_tokens = fx.art.model.config().window + 1;
    CHECK_THROWS_AS(serve_query(big, fx.art), window_overflow_error);

    // retrieval refuses rather than truncating passages
    ServeRequest tight = fx.request(ServeMode::retrieval, fx.ga.examples[0].question);
    tight.top_k = 5;
    tight.max_new_tokens = fx.art.model.config().window -
                           int(tokenize(qa_prompt(tight.question)).size()) - 30;
    CHECK_THROWS_AS(serve_query(tight, fx.art), window_overflow_error);

    // compressed prefixes truncate at whole-chunk granularity instead
    ServeRequest comp = tight;
    comp.mode = ServeMode::compressed_unfinetuned;
    ServeResponse resp = serve_query(comp, fx.art);
    CHECK(resp.composition.summary_rows <= 30);
    CHECK(resp.composition.summary_rows % serve_comp().summary_count == 0);

    const int window = fx.art.model.config().window;
    for (ServeMode m : {ServeMode::no_context, ServeMode::full_context, ServeMode::retrieval,
                        ServeMode::compressed_unfinetuned, ServeMode::lloco}) {
        ServeRequest req = fx.request(m, fx.ga.examples[1].question);
        req.group_id = m == ServeMode::lloco ? "ga" : "";
        req.doc_id = m == ServeMode::full_context ? fx.ga.docs[0].doc_id : "";
        ServeResponse r = serve_query(req, fx.art);
        CHECK(r.composition.summary_rows + r.composition.context_tokens +
                  r.composition.question_tokens + req.max_new_tokens <=
              window);
    }
}

TEST_CASE("serving never mutates the artifacts") {
    ServeFixture fx;
    const uint64_t digest = fx.art.model.weight_digest();
    const size_t n_records = fx.art.store.size();
    const std::vector<float> a_before = fx.art.adaptors.at("ga").targets[0].a.w;

    for (ServeMode m : {ServeMode::no_context, ServeMode::retrieval, ServeMode::lloco}) {
        ServeRequest req = fx.request(m, fx.ga.examples[0].question);
        req.group_id = m == ServeMode::lloco ? "ga" : "";
        serve_query(req, fx.art);
    }
    CHECK(fx.art.model.weight_digest() == digest);
    CHECK(fx.art.store.size() == n_records);
    CHECK(fx.art.adaptors.at("ga").targets[0].a.w == a_before);
}

TEST_CASE("artifacts loading validates the embedder digest") {
    ServeFixture fx;
    // rebuild the store stamped with a different digest
    VectorStore copy = VectorStore::load(fx.tmp.file("art/store"));
    copy.embedder_digest = "0000000000000000";
    copy.persist(fx.tmp.file("art/store"));
    CHECK_THROWS_AS(Artifacts::load(fx.tmp.file("art")), config_error);
}

TEST_CASE("http server answers queries") {
    ServeFixture fx;
    HttpServer server(fx.art, GroupPolicy::strict);
    const int port = server.start("127.0.0.1", 0);
    REQUIRE(port > 0);
    httplib::Client client("127.0.0.1", port);

    ServeRequest req = fx.request(ServeMode::lloco, fx.ga.examples[0].question);
    req.group_id = "ga";
    ServeResponse direct = serve_query(req, fx.art);

    SUBCASE("valid query returns 200 with the same answer as direct serving") {
        auto res = client.Post("/v1/query", request_to_json(req), "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        ServeResponse resp = response_from_json(res->body);
        CHECK(resp.answer == direct.answer);
        CHECK(resp.adaptor_id == direct.adaptor_id);
        CHECK(resp.composition.summary_rows == direct.composition.summary_rows);
    }
    SUBCASE("malformed body returns 400") {
        auto res = client.Post("/v1/query", "{oops", "application/json");
        REQUIRE(res);
        CHECK(res->status == 400);
        auto res2 = client.Post("/v1/query", R"({"question":"q","mode":"warp"})",
                                "application/json");
        REQUIRE(res2);
        CHECK(res2->status == 400);
    }
    SUBCASE("unknown group returns 404") {
        ServeRequest bad = req;
        bad.group_id = "absent";
        auto res = client.Post("/v1/query", request_to_json(bad), "application/json");
        REQUIRE(res);
        CHECK(res->status == 404);
    }
    SUBCASE("mixed groups under strict policy return 409") {
        ServeRequest wide = fx.request(ServeMode::lloco, fx.ga.examples[0].question);
        wide.top_k = int(fx.art.store.size());
        auto res = client.Post("/v1/query", request_to_json(wide), "application/json");
        REQUIRE(res);
        CHECK(res->status == 409);
    }
    SUBCASE("health and groups endpoints") {
        auto health = client.Get("/v1/health");
        REQUIRE(health);
        CHECK(health->status == 200);
        CHECK(health->body.find("\"status\":\"ok\"") != std::string::npos);

        auto groups = client.Get("/v1/groups");
        REQUIRE(groups);
        CHECK(groups->status == 200);
        CHECK(groups->body.find("\"ga\"") != std::string::npos);
        CHECK(groups->body.find("\"gb\"") != std::string::npos);
    }
    SUBCASE("concurrent identical greedy requests agree") {
        const std::string body = request_to_json(req);
        std::vector<std::string> answers(8);
        std::vector<std::thread> threads;
        for (int i = 0; i < 8; ++i)
            threads.emplace_back([&, i] {
                httplib::Client c("127.0.0.1", port);
                auto res = c.Post("/v1/query", body, "application/json");
                if (res && res->status == 200) answers[i] = response_from_json(res->body).answer;
            });
        for (std::thread& t : threads) t.join();
        for (const std::string& a : answers) CHECK(a == direct.answer);
    }
    server.stop();
}
