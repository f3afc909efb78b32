#include <doctest.h>

#include <cmath>
#include <map>

#include "lloco/synth.hpp"
#include "lloco/trainer.hpp"
#include "test_util.hpp"

using namespace lloco;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.window = 160;
    cfg.seed = 11;
    return cfg;
}

CompressionConfig tiny_comp() {
    CompressionConfig comp;
    comp.chunk_length = 24;
    comp.summary_count = 2;
    return comp;
}

// in-memory summary archive for a handful of docs
struct SummaryBank {
    std::map<std::string, std::vector<SummaryEmbeddings>> by_doc;

    SummaryLookup lookup() const {
        return [this](const std::string& doc_id) -> const std::vector<SummaryEmbeddings>& {
            auto it = by_doc.find(doc_id);
            if (it == by_doc.end()) throw not_found_error("no summaries for " + doc_id);
            return it->second;
        };
    }
};

bool adaptors_equal(const LoraAdaptor& a, const LoraAdaptor& b) {
    if (a.targets.size() != b.targets.size()) return false;
    for (size_t t = 0; t < a.targets.size(); ++t)
        if (a.targets[t].a.w != b.targets[t].a.w || a.targets[t].b.w != b.targets[t].b.w)
            return false;
    return true;
}

} // namespace

TEST_CASE("examples jsonl round trip") {
    testutil::TempDir tmp("jsonl");
    std::vector<TrainingExample> examples = {
        {"g0", "g0-d0", "what is the anchor?", "amber."},
        {"g0", "g0-d1", "what is the basil?", "fjord."},
        {"g1", "g1-d0", "what is the cobalt?", "heron."},
    };
    const std::string path = tmp.file("train.jsonl");
    save_examples_jsonl(path, examples);
    auto back = load_examples_jsonl(path);
    REQUIRE(back.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back[i].group_id == examples[i].group_id);
        CHECK(back[i].doc_id == examples[i].doc_id);
        CHECK(back[i].question == examples[i].question);
        CHECK(back[i].answer == examples[i].answer);
    }
    write_text_file(path, "{\"group_id\": 3}\n");
    CHECK_THROWS_AS(load_examples_jsonl(path), corrupt_file_error);
}

TEST_CASE("qa prompt template is stable") {
    CHECK(qa_prompt("what is the anchor?") == "Q: what is the anchor?\nA: ");
}

TEST_CASE("learning rate schedule") {
    TrainConfig cfg; // lr 2e-5, warmup_ratio 0.04
    const int total = 100;
    const int warmup = 4; // ceil(0.04 * 100)
    CHECK(lr_at(0, cfg, total) == 0.0);
    CHECK(lr_at(warmup, cfg, total) == doctest::Approx(2e-5).epsilon(1e-12));
    CHECK(lr_at(total, cfg, total) == doctest::Approx(0.0));

    // single peak at the warmup boundary, non-increasing afterwards, never negative
    double prev = lr_at(0, cfg, total);
    for (int s = 1; s <= total; ++s) {
        double cur = lr_at(s, cfg, total);
        CHECK(cur >= 0.0);
        CHECK(cur <= cfg.lr + 1e-18);
        if (s <= warmup) CHECK(cur >= prev);
        else CHECK(cur <= prev);
        // continuity: steps never jump by more than the warmup slope or the
        // steepest cosine slope
        CHECK(std::abs(cur - prev) <=
              cfg.lr * std::max(1.0 / warmup, 3.2 / (total - warmup)) * (1.0 + 1e-12));
        prev = cur;
    }
}

TEST_CASE("training sequence assembly and masking") {
    ModelConfig mc = tiny_config();
    Model m = Model::init(mc, 2);
    CompressionConfig comp = tiny_comp();
    Rng rng(3);
    std::string text = filler_text(40, rng); // 2 chunks of 24 -> 4 summary rows
    auto toks = tokenize(text);
    toks.resize(48);
    auto entries = compress_document(m, toks, comp, "d");
    REQUIRE(entries.size() == 2);

    TrainSequence seq = build_training_sequence(entries, "what is the anchor?", "amber.", mc.window);
    CHECK(seq.prefix.size() == 4); // 2 chunks x k=2
    const std::string prompt = qa_prompt("what is the anchor?");
    REQUIRE(seq.tokens.size() == prompt.size() + 6);
    int masked = 0;
    for (size_t i = 0; i < seq.tokens.size(); ++i) {
        if (i < prompt.size()) CHECK(seq.mask[i] == 0);
        else ++masked;
    }
    CHECK(masked == 6); // "amber."

    // targets align each masked token with the position that predicts it
    auto targets = seq.targets();
    REQUIRE(int(targets.size()) == seq.prefix.size() + int(seq.tokens.size()));
    int flagged = 0;
    for (int p = 0; p < int(targets.size()); ++p) {
        if (targets[p] < 0) continue;
        ++flagged;
        int tok_index = p + 1 - seq.prefix.size();
        CHECK(seq.mask[tok_index] == 1);
        CHECK(targets[p] == seq.tokens[tok_index]);
    }
    CHECK(flagged == 6);

    TrainSequence empty_answer = build_training_sequence(entries, "what is the anchor?", "", mc.window);
    for (uint8_t f : empty_answer.mask) CHECK(f == 0);
    for (int t : empty_answer.targets()) CHECK(t == -1);

    std::string huge(mc.window, 'x');
    CHECK_THROWS_AS(build_training_sequence(entries, huge, "a", mc.window), window_overflow_error);
}

TEST_CASE("optimizer reaches a quadratic minimum") {
    // f(w) = (w - 3)^2 / 2, driven through the real schedule
    std::vector<float> w = {0.0f};
    AdamWState state(1);
    TrainConfig cfg;
    cfg.lr = 0.1;
    const int total = 1000;
    for (int step = 1; step <= total; ++step) {
        std::vector<double> g = {double(w[0]) - 3.0};
        adamw_step(w, g, state, step, lr_at(step, cfg, total), 0.0);
    }
    CHECK(std::abs(double(w[0]) - 3.0) < 1e-6);
}

TEST_CASE("weight decay pulls unused parameters toward zero") {
    std::vector<float> w = {2.0f};
    AdamWState state(1);
    for (int step = 1; step <= 200; ++step) {
        std::vector<double> g = {0.0};
        adamw_step(w, g, state, step, 0.05, 0.1);
    }
    CHECK(std::abs(w[0]) < 2.0f * std::pow(1.0 - 0.05 * 0.1, 200) + 1e-4);
}

TEST_CASE("grad_check exact and flat cases") {
    float w = 0.5f;
    std::vector<float*> params = {&w};
    std::vector<double> analytic = {3.0};
    auto linear = [&]() { return 3.0 * double(w); };
    GradCheckResult res = grad_check(linear, params, analytic, 1e-3, 0, 1);
    CHECK(res.probes == 1);
    CHECK(res.max_rel_err < 1e-8);

    std::vector<double> zero = {0.0};
    auto flat = [&]() { return 7.0; };
    res = grad_check(flat, params, zero, 1e-3, 0, 1);
    CHECK(res.max_rel_err == 0.0);
}

TEST_CASE("adaptor gradients verify on a tiny model") {
    ModelConfig mc = tiny_config();
    Model m = Model::init(mc, 2);
    CompressionConfig comp = tiny_comp();
    Rng rng(7);
    auto toks = tokenize(filler_text(30, rng));
    toks.resize(24);
    auto entries = compress_document(m, toks, comp, "d");
    TrainSequence seq = build_training_sequence(entries, "what is the dune?", "delta.", mc.window);

    LoraAdaptor ad = init_adaptor(mc, "probe", default_lora_targets(mc.n_layers), 4, 8.0f, 3);
    Rng brand(8);
    for (LoraTarget& t : ad.targets)
        for (float& v : t.b.w) v = float(brand.normal() * 0.05);

    GradCheckResult res = grad_check_adaptor(m, seq, ad, 1e-3, 50, 21);
    CHECK(res.probes == 50);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("train_group: zero epochs, determinism, loss decreases, base frozen") {
    ModelConfig mc = tiny_config();
    Model m = Model::init(mc, 2);
    CompressionConfig comp = tiny_comp();

    SynthGroup g = make_group("g0", 2, 3, 120, 1, 31);
    SummaryBank bank;
    for (const SynthDoc& doc : g.docs) {
        auto toks = tokenize(doc.text);
        bank.by_doc[doc.doc_id] = compress_document(m, toks, comp, doc.doc_id);
    }

    TrainConfig cfg;
    cfg.lr = 2e-3;
    cfg.epochs = 0;
    cfg.seed = 5;
    LoraAdaptor a0 = train_group(m, "g0", g.examples, bank.lookup(), cfg);
    LoraAdaptor fresh = init_adaptor(mc, "g0", default_lora_targets(mc.n_layers), cfg.rank,
                                     cfg.alpha, derive_seed(cfg.seed, "adaptor.g0"));
    CHECK(adaptors_equal(a0, fresh));

    const uint64_t before = m.weight_digest();
    cfg.epochs = 4;
    std::vector<TrainLogRow> log;
    LoraAdaptor trained = train_group(m, "g0", g.examples, bank.lookup(), cfg, &log);
    CHECK(m.weight_digest() == before);
    REQUIRE(log.size() >= 4);
    CHECK(log.back().loss < log.front().loss);
    CHECK(log.front().step == 1);
    for (const TrainLogRow& row : log) {
        CHECK(std::isfinite(row.loss));
        CHECK(row.lr >= 0.0);
    }
    CHECK_FALSE(adaptors_equal(trained, fresh));

    LoraAdaptor again = train_group(m, "g0", g.examples, bank.lookup(), cfg);
    CHECK(adaptors_equal(trained, again));

    cfg.seed = 6;
    LoraAdaptor other = train_group(m, "g0", g.examples, bank.lookup(), cfg);
    CHECK_FALSE(adaptors_equal(trained, other));
}

TEST_CASE("cap sampling is deterministic and respects caps") {
    SynthGroup g0 = make_group("g0", 2, 3, 100, 1, 1);
    SynthGroup g1 = make_group("g1", 2, 2, 100, 1, 2);
    std::vector<TrainingExample> all = g0.examples; // 6
    all.insert(all.end(), g1.examples.begin(), g1.examples.end()); // +4

    std::map<std::string, int> caps = {{"g0", 2}};
    auto sampled = sample_with_caps(all, caps, 9);
    int n0 = 0, n1 = 0;
    for (const auto& ex : sampled) (ex.group_id == "g0" ? n0 : n1)++;
    CHECK(n0 == 2);
    CHECK(n1 == 4); // uncapped group passes through

    auto again = sample_with_caps(all, caps, 9);
    REQUIRE(sampled.size() == again.size());
    for (size_t i = 0; i < sampled.size(); ++i) {
        CHECK(sampled[i].doc_id == again[i].doc_id);
        CHECK(sampled[i].question == again[i].question);
    }

    // a cap above the group size keeps everything
    caps["g0"] = 100;
    CHECK(sample_with_caps(all, caps, 9).size() == all.size());
}

TEST_CASE("train log csv") {
    testutil::TempDir tmp("csv");
    std::vector<TrainLogRow> rows = {{1, 2.5, 1e-3, 0.1}, {2, 2.0, 2e-3, 0.2}};
    const std::string path = tmp.file("log.csv");
    save_train_log_csv(path, rows);
    std::string text = read_text_file(path);
    CHECK(text.substr(0, 21) == "step,loss,lr,seconds\n");
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("pretraining: zero steps is identity, runs are deterministic") {
    ModelConfig mc = tiny_config();
    Model a = Model::init(mc, 2);
    const uint64_t init_digest = a.weight_digest();

    auto corpus = pretrain_corpus(4, 200, 13);
    PretrainConfig pc;
    pc.steps = 0;
    pc.comp = tiny_comp();
    pc.lm_crop = 32;
    pc.batch = 2;
    pretrain_base(a, corpus, pc);
    CHECK(a.weight_digest() == init_digest);

    pc.steps = 6;
    pc.lr = 1e-3;
    std::vector<TrainLogRow> log;
    pretrain_base(a, corpus, pc, &log);
    CHECK(a.weight_digest() != init_digest);
    REQUIRE(log.size() == 6);
    for (const auto& row : log) CHECK(std::isfinite(row.loss));

    Model b = Model::init(mc, 2);
    pretrain_base(b, corpus, pc);
    CHECK(b.weight_digest() == a.weight_digest());
}

TEST_CASE("reconstruction probe returns finite chunk losses") {
    ModelConfig mc = tiny_config();
    Model m = Model::init(mc, 2);
    auto docs = pretrain_corpus(2, 150, 17);
    ReconstructionProbe probe = reconstruction_probe(m, docs, tiny_comp());
    CHECK(std::isfinite(probe.with_summaries));
    CHECK(std::isfinite(probe.without));
    CHECK(probe.with_summaries > 0.0);
    CHECK(probe.without > 0.0);
}
