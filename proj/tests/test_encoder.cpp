#include <doctest.h>

#include <cmath>

#include "lloco/encoder.hpp"
#include "test_util.hpp"

using namespace lloco;

namespace {

ModelConfig toy_model_config() {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.window = 256;
    cfg.seed = 5;
    return cfg;
}

std::vector<int> random_tokens(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> t(n);
    for (int& v : t) v = int(rng.below(256));
    return t;
}

} // namespace

TEST_CASE("chunking basics") {
    auto two = chunk_document(random_tokens(3072, 1), 1536);
    REQUIRE(two.size() == 2);
    CHECK(two[0].size() == 1536);
    CHECK(two[1].size() == 1536);

    CHECK(chunk_document({}, 1536).empty());
    CHECK_THROWS_AS(chunk_document(random_tokens(4, 1), 0), config_error);
}

TEST_CASE("chunking covers the input exactly, in order") {
    Rng rng(2);
    for (int it = 0; it < 50; ++it) {
        int n = int(rng.below(4000));
        int L = 1 + int(rng.below(700));
        auto toks = random_tokens(n, 100 + it);
        auto chunks = chunk_document(toks, L);
        CHECK(chunks.size() == size_t((n + L - 1) / L));
        std::vector<int> flat;
        for (size_t i = 0; i < chunks.size(); ++i) {
            if (i + 1 < chunks.size()) CHECK(chunks[i].size() == size_t(L));
            flat.insert(flat.end(), chunks[i].begin(), chunks[i].end());
        }
        CHECK(flat == toks);
    }
}

TEST_CASE("chunk count for a long document") {
    // 84770 = 55*1536 + 290, so the last chunk carries the remainder
    auto chunks = chunk_document(random_tokens(84770, 3), 1536);
    REQUIRE(chunks.size() == 56);
    CHECK(chunks.back().size() == 290);
    // and the implied summary total at full-scale k
    CHECK(chunks.size() * 50 == 2800);
}

TEST_CASE("compression config validation") {
    CompressionConfig cfg = toy_compression();
    CHECK(cfg.chunk_length == 120);
    CHECK(cfg.summary_count == 4);
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.conditioning_cap(256) == 128);
    cfg.max_summary_rows = 12;
    CHECK(cfg.conditioning_cap(256) == 12);
    cfg.summary_count = 0;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = CompressionConfig{};
    cfg.summary_count = cfg.chunk_length;
    CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("compress_chunk shape, determinism, live recursion") {
    ModelConfig mc = toy_model_config();
    Model m = Model::init(mc, 4);
    CompressionConfig cfg = toy_compression();

    auto chunk = random_tokens(120, 7);
    EmbeddingSequence no_prior(mc.d_model);
    SummaryEmbeddings a = compress_chunk(m, chunk, no_prior, cfg);
    CHECK(a.k() == 4);
    CHECK(a.d_model == mc.d_model);
    for (double v : a.rows) CHECK(std::isfinite(v));

    SummaryEmbeddings b = compress_chunk(m, chunk, no_prior, cfg);
    CHECK(a.rows == b.rows);

    // conditioning rows must influence the result
    Rng rng(9);
    EmbeddingSequence prior(mc.d_model);
    std::vector<double> row(mc.d_model);
    for (int i = 0; i < 4; ++i) {
        for (double& v : row) v = rng.normal();
        prior.append_raw(row, RowOrigin::summary);
    }
    SummaryEmbeddings c = compress_chunk(m, chunk, prior, cfg);
    CHECK(c.rows != a.rows);

    // a chunk that cannot fit even without prior rows
    auto huge = random_tokens(mc.window, 8);
    CHECK_THROWS_AS(compress_chunk(m, huge, no_prior, cfg), window_overflow_error);
}

TEST_CASE("compress_document row-count law and determinism") {
    ModelConfig mc = toy_model_config();
    Model m = Model::init(mc, 4);
    CompressionConfig cfg = toy_compression();

    CHECK(compress_document(m, {}, cfg).empty());

    for (int n : {1, 119, 120, 121, 360, 500}) {
        auto toks = random_tokens(n, 40 + n);
        auto entries = compress_document(m, toks, cfg, "doc");
        int expect_chunks = (n + cfg.chunk_length - 1) / cfg.chunk_length;
        REQUIRE(int(entries.size()) == expect_chunks);
        int rows = 0;
        for (size_t i = 0; i < entries.size(); ++i) {
            CHECK(entries[i].chunk_index == int(i));
            CHECK(entries[i].source_doc == "doc");
            CHECK(entries[i].k() == cfg.summary_count);
            rows += entries[i].k();
        }
        CHECK(rows == expect_chunks * cfg.summary_count);
        // spans tile the document
        CHECK(entries.front().token_start == 0);
        CHECK(entries.back().token_end == n);
        for (size_t i = 1; i < entries.size(); ++i)
            CHECK(entries[i].token_start == entries[i - 1].token_end);
    }

    auto toks = random_tokens(400, 77);
    auto e1 = compress_document(m, toks, cfg);
    auto e2 = compress_document(m, toks, cfg);
    REQUIRE(e1.size() == e2.size());
    for (size_t i = 0; i < e1.size(); ++i) CHECK(e1[i].rows == e2[i].rows);
}

TEST_CASE("prefix monotonicity: earlier summaries ignore appended text") {
    ModelConfig mc = toy_model_config();
    Model m = Model::init(mc, 4);
    CompressionConfig cfg = toy_compression();

    auto toks = random_tokens(360, 13); // 3 chunks
    auto longer = toks;
    auto extra = random_tokens(240, 14); // 2 more chunks
    longer.insert(longer.end(), extra.begin(), extra.end());

    auto head = compress_document(m, toks, cfg);
    auto full = compress_document(m, longer, cfg);
    REQUIRE(full.size() == head.size() + 2);
    for (size_t i = 0; i < head.size(); ++i) CHECK(head[i].rows == full[i].rows);
}

TEST_CASE("a single full-scale chunk compresses to 50 rows at ratio 30.72") {
    ModelConfig mc;
    mc.vocab_size = 256;
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.window = 1600;
    mc.seed = 21;
    Model m = Model::init(mc, 50);

    CompressionConfig cfg; // full-scale defaults: L=1536, k=50
    auto entries = compress_document(m, random_tokens(1536, 6), cfg, "novel");
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].k() == 50);
    CHECK(compression_ratio(cfg.chunk_length, cfg.summary_count) == doctest::Approx(30.72));
}

TEST_CASE("compression ratios match the reported table") {
    CHECK(compression_ratio(1536, 50) == doctest::Approx(30.72));
    CHECK(int(std::floor(compression_ratio(1536, 50))) == 30); // reported as "30x"
    CHECK(compression_ratio(4096, 2560) == doctest::Approx(1.6));
    CHECK(compression_ratio(32768, 2560) == doctest::Approx(12.8));
    CHECK_THROWS_AS(compression_ratio(10, 0), config_error);
}

TEST_CASE("effective window arithmetic") {
    CHECK(effective_window(4096, 1536, 50) == 124416); // "roughly 128k"
    CHECK(effective_window(4096, 1536, 4096) == 1536); // k = W: one chunk
    CHECK(effective_window(256, 120, 4) == 7680);
    CHECK_THROWS_AS(effective_window(256, 120, 257), config_error);
    CHECK_THROWS_AS(effective_window(256, 120, 0), config_error);
}

TEST_CASE("summaries_as_rows preserves order and tags rows as summaries") {
    ModelConfig mc = toy_model_config();
    Model m = Model::init(mc, 4);
    CompressionConfig cfg = toy_compression();
    auto entries = compress_document(m, random_tokens(300, 19), cfg, "d");
    EmbeddingSequence rows = summaries_as_rows(entries);
    REQUIRE(rows.size() == int(entries.size()) * cfg.summary_count);
    int at = 0;
    for (const auto& se : entries)
        for (int r = 0; r < se.k(); ++r, ++at) {
            CHECK(rows.origin[at] == RowOrigin::summary);
            for (int c = 0; c < se.d_model; ++c) CHECK(rows.row(at)[c] == se.row(r)[c]);
        }
}

TEST_CASE("summary archive round trip") {
    testutil::TempDir tmp("summ");
    ModelConfig mc = toy_model_config();
    Model m = Model::init(mc, 4);
    CompressionConfig cfg = toy_compression();
    auto entries = compress_document(m, random_tokens(250, 23), cfg, "archive-doc");

    const std::string path = tmp.file("doc.summ");
    save_summaries(path, entries, cfg);
    auto back = load_summaries(path);
    REQUIRE(back.size() == entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        CHECK(back[i].chunk_index == entries[i].chunk_index);
        CHECK(back[i].source_doc == "archive-doc");
        CHECK(back[i].token_start == entries[i].token_start);
        CHECK(back[i].token_end == entries[i].token_end);
        REQUIRE(back[i].rows.size() == entries[i].rows.size());
        // rows are stored as float32: loading returns the snapped values
        for (size_t j = 0; j < back[i].rows.size(); ++j)
            CHECK(back[i].rows[j] == double(float(entries[i].rows[j])));
    }

    // saving the loaded entries reproduces the file byte for byte
    const std::string again = tmp.file("doc2.summ");
    save_summaries(again, back, cfg);
    CHECK(read_text_file(path) == read_text_file(again));

    // corruption checks
    std::string bytes = read_text_file(path);
    write_text_file(path, bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(load_summaries(path), corrupt_file_error);
    std::string wrong = bytes;
    wrong[5] = char(wrong[5] + 1); // version field
    write_text_file(path, wrong);
    CHECK_THROWS_AS(load_summaries(path), version_mismatch_error);
}
