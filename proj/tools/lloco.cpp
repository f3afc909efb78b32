// command-line front end for the compression/finetune/serve/eval pipeline
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "lloco/bench.hpp"
#include "lloco/serving.hpp"
#include "lloco/store.hpp"
#include "lloco/synth.hpp"

namespace fs = std::filesystem;
using namespace lloco;

namespace {

std::atomic<bool> g_stop{false};
void handle_stop(int) { g_stop = true; }

// the environment wins over the flag so deployments can pin one location
std::string resolve_artifacts(const std::string& flag_value) {
    const char* env = std::getenv("LLOCO_ARTIFACTS");
    if (env && *env) return env;
    return flag_value;
}

Model load_model(const std::string& artifacts) {
    return Model::load((fs::path(artifacts) / "model.json").string(),
                       (fs::path(artifacts) / "model.bin").string());
}

// "960" -> 960, "4k" -> 4096
int parse_size(const std::string& text) {
    if (text.empty()) throw config_error("empty size");
    size_t used = 0;
    const int base = std::stoi(text, &used);
    if (used == text.size()) return base;
    if (used + 1 == text.size() && (text[used] == 'k' || text[used] == 'K')) return base * 1024;
    throw config_error("cannot parse size '" + text + "'");
}

std::map<std::string, int> parse_caps(const std::vector<std::string>& entries) {
    std::map<std::string, int> caps;
    for (const std::string& e : entries) {
        const size_t eq = e.find('=');
        if (eq == std::string::npos)
            throw config_error("cap '" + e + "' is not of the form group=count");
        caps[e.substr(0, eq)] = std::stoi(e.substr(eq + 1));
    }
    return caps;
}

void print_table(const BenchResult& table) {
    for (size_t c = 0; c < table.columns.size(); ++c)
        std::printf("%s%s", c ? "\t" : "", table.columns[c].c_str());
    std::printf("\n");
    for (const auto& row : table.rows) {
        for (size_t c = 0; c < row.size(); ++c)
            std::printf("%s%s", c ? "\t" : "", row[c].c_str());
        std::printf("\n");
    }
}

void maybe_report(const BenchResult& table, const std::string& out_dir) {
    if (out_dir.empty()) return;
    report(table, out_dir);
    std::printf("wrote %s/results.csv and results.json\n", out_dir.c_str());
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::string out;
    int d_model = 64, layers = 2, heads = 4, window = 256, slots = 4;
    int chunk = 120, summaries = 4;
    int steps = 600, batch = 4, lm_crop = 128, docs = 16, doc_bytes = 360, needle_docs = 0;
    double lr = 1e-3;
    uint64_t seed = 1;
};

int run_pretrain(const PretrainArgs& a) {
    ModelConfig mc;
    mc.d_model = a.d_model;
    mc.n_layers = a.layers;
    mc.n_heads = a.heads;
    mc.window = a.window;
    mc.seed = a.seed;
    Model model = Model::init(mc, a.slots);

    PretrainConfig pc;
    pc.steps = a.steps;
    pc.lr = a.lr;
    pc.batch = a.batch;
    pc.lm_crop = a.lm_crop;
    pc.seed = a.seed;
    pc.comp.chunk_length = a.chunk;
    pc.comp.summary_count = a.summaries;

    std::vector<std::string> corpus = pretrain_corpus(a.docs, a.doc_bytes, a.seed);
    std::vector<std::string> needles = needle_pretrain_docs(a.needle_docs, a.seed);
    corpus.insert(corpus.end(), std::make_move_iterator(needles.begin()),
                  std::make_move_iterator(needles.end()));
    std::vector<TrainLogRow> log;
    pretrain_base(model, corpus, pc, &log);
    save_base_model(model, a.out);
    if (!log.empty()) {
        save_train_log_csv((fs::path(a.out) / "pretrain_log.csv").string(), log);
        std::printf("pretrained %d steps, final loss %.4f, %.1fs\n", log.back().step,
                    log.back().loss, log.back().seconds);
    }
    std::printf("saved base model to %s (digest %s)\n", a.out.c_str(),
                hex64(model.weight_digest()).c_str());
    return 0;
}

struct GendataArgs {
    std::string out;
    std::vector<std::string> groups = {"ga", "gb"};
    int docs_per_group = 2, keys_per_doc = 3, doc_bytes = 480, repeats = 2;
    int needle_docs = 0, needle_doc_bytes = 480;
    uint64_t seed = 7;
};

int run_gendata(const GendataArgs& a) {
    const fs::path corpus_dir = fs::path(a.out) / "corpus";
    fs::create_directories(corpus_dir);
    nlohmann::json group_map = nlohmann::json::object();
    std::vector<TrainingExample> examples;

    for (size_t g = 0; g < a.groups.size(); ++g) {
        const SynthGroup group =
            make_group(a.groups[g], a.docs_per_group, a.keys_per_doc, a.doc_bytes, a.repeats,
                       derive_seed(a.seed, "gen." + a.groups[g]));
        for (const SynthDoc& doc : group.docs) {
            write_text_file((corpus_dir / (doc.doc_id + ".txt")).string(), doc.text);
            group_map[doc.doc_id] = doc.group_id;
        }
        examples.insert(examples.end(), group.examples.begin(), group.examples.end());
    }
    for (int i = 0; i < a.needle_docs; ++i) {
        const std::string doc_id = "needle-d" + std::to_string(i);
        Rng rng(derive_seed(a.seed, "gen." + doc_id));
        const std::string& city = needle_cities()[rng.below(needle_cities().size())];
        std::string text = filler_text(a.needle_doc_bytes, rng);
        text = insert_at_depth(text, needle_sentence(city), rng.uniform());
        write_text_file((corpus_dir / (doc_id + ".txt")).string(), text);
        group_map[doc_id] = "needle";
        examples.push_back({"needle", doc_id, needle_question(), city + "."});
    }

    write_text_file((fs::path(a.out) / "groups.json").string(), group_map.dump(2) + "\n");
    save_examples_jsonl((fs::path(a.out) / "train.jsonl").string(), examples);
    std::printf("wrote %zu docs and %zu examples under %s\n", group_map.size(), examples.size(),
                a.out.c_str());
    return 0;
}

struct PreprocessArgs {
    std::string corpus, groups_file, out;
    int chunk = 120, summaries = 4, passage_bytes = 0; // 0: one passage per chunk
};

int run_preprocess(const PreprocessArgs& a) {
    const std::string artifacts = resolve_artifacts(a.out);
    const Model model = load_model(artifacts);
    CompressionConfig comp;
    comp.chunk_length = a.chunk;
    comp.summary_count = a.summaries;

    std::map<std::string, std::string> group_map;
    try {
        const nlohmann::json j = nlohmann::json::parse(read_text_file(a.groups_file));
        for (const auto& [doc, group] : j.items()) group_map[doc] = group.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw corrupt_file_error("bad group map " + a.groups_file + ": " + e.what());
    }

    PreprocessReport rep;
    const int passage_length = a.passage_bytes > 0 ? a.passage_bytes : a.chunk;
    VectorStore store = preprocess_corpus(model, a.corpus, group_map, comp, passage_length, &rep);
    store.persist((fs::path(artifacts) / "store").string());

    for (const PreprocessDocReport& d : rep.docs)
        std::printf("%-24s %-8s %s (%d tokens, %d chunks, %d passages)\n", d.doc_id.c_str(),
                    d.group_id.c_str(), d.status.c_str(), d.n_tokens, d.n_chunks, d.n_passages);
    std::printf("indexed %lld tokens into %lld summary rows (ratio %.2f), %zu passages\n",
                (long long)rep.total_tokens, (long long)rep.total_summary_rows,
                rep.achieved_ratio(), store.size());
    return 0;
}

struct FinetuneArgs {
    std::string train_file, out, group;
    bool combined = false;
    std::vector<std::string> caps;
    int rank = 8, batch = 1, accum = 4, epochs = 1;
    double alpha = 16.0, lr = 1e-2, wd = 0.0, warmup = 0.04;
    uint64_t seed = 0;
    std::string log_file;
};

int run_finetune(const FinetuneArgs& a) {
    const std::string artifacts = resolve_artifacts(a.out);
    const Model model = load_model(artifacts);
    const VectorStore store = VectorStore::load((fs::path(artifacts) / "store").string());
    const std::vector<TrainingExample> all = load_examples_jsonl(a.train_file);
    const SummaryLookup lookup = [&store](const std::string& doc_id) -> const auto& {
        return store.summaries(doc_id);
    };

    TrainConfig cfg;
    cfg.rank = a.rank;
    cfg.alpha = float(a.alpha);
    cfg.lr = a.lr;
    cfg.weight_decay = a.wd;
    cfg.warmup_ratio = a.warmup;
    cfg.batch_size = a.batch;
    cfg.grad_accum = a.accum;
    cfg.epochs = a.epochs;
    cfg.seed = a.seed;

    std::vector<TrainLogRow> log;
    LoraAdaptor adaptor;
    if (a.combined) {
        adaptor = train_combined(model, all, lookup, cfg, parse_caps(a.caps), &log);
    } else {
        std::vector<TrainingExample> mine;
        for (const TrainingExample& ex : all)
            if (ex.group_id == a.group) mine.push_back(ex);
        if (mine.empty()) throw config_error("no examples for group " + a.group);
        adaptor = train_group(model, a.group, mine, lookup, cfg, &log);
    }

    AdaptorRegistry registry =
        AdaptorRegistry::open((fs::path(artifacts) / "registry").string());
    const AdaptorRecord rec = registry.register_adaptor(adaptor, cfg.digest());
    if (!a.log_file.empty()) save_train_log_csv(a.log_file, log);
    if (!log.empty())
        std::printf("trained %d steps, final loss %.4f, %.1fs\n", log.back().step,
                    log.back().loss, log.back().seconds);
    std::printf("registered %s for group %s (v%d)\n", rec.adaptor_id.c_str(),
                rec.group_id.c_str(), rec.version);
    return 0;
}

struct ServeArgs {
    std::string artifacts, addr = "127.0.0.1:8080", policy = "strict";
};

int run_serve(const ServeArgs& a) {
    const std::string dir = resolve_artifacts(a.artifacts);
    const Artifacts art = Artifacts::load(dir);
    const size_t colon = a.addr.rfind(':');
    if (colon == std::string::npos)
        throw config_error("--addr must be HOST:PORT, got '" + a.addr + "'");
    const std::string host = a.addr.substr(0, colon);
    const int port = std::stoi(a.addr.substr(colon + 1));

    HttpServer server(art, policy_from_name(a.policy));
    const int bound = server.start(host, port);
    std::printf("serving %zu passages, %zu adaptors on %s:%d\n", art.store.size(),
                art.adaptors.size(), host.c_str(), bound);

    std::signal(SIGINT, handle_stop);
    std::signal(SIGTERM, handle_stop);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    std::printf("stopped\n");
    return 0;
}

struct EvalArgs {
    std::string dataset, mode = "lloco", artifacts, out, policy = "strict";
    int max_new = 16, top_k = 5;
};

int run_eval(const EvalArgs& a) {
    const std::string dir = resolve_artifacts(a.artifacts);
    const Artifacts art = Artifacts::load(dir);
    const std::vector<TrainingExample> examples = load_examples_jsonl(a.dataset);
    const QaEvalResult r = qa_eval(art, examples, mode_from_name(a.mode), a.max_new, a.top_k,
                                   policy_from_name(a.policy));
    std::printf("mode=%s examples=%zu failed=%d em=%.1f f1=%.1f\n", a.mode.c_str(),
                examples.size(), r.n_failed, 100.0 * r.em, 100.0 * r.f1);
    maybe_report(r.table, a.out);
    return 0;
}

struct LatencyArgs {
    std::string artifacts, out;
    std::vector<std::string> sizes;
    int chunk = 120, summaries = 4, max_new = 16, runs = 5, warmups = 2;
    uint64_t seed = 0;
};

int run_bench_latency(const LatencyArgs& a) {
    const Model model = load_model(resolve_artifacts(a.artifacts));
    CompressionConfig comp;
    comp.chunk_length = a.chunk;
    comp.summary_count = a.summaries;
    std::vector<int> sizes;
    for (const std::string& s : a.sizes) sizes.push_back(parse_size(s));
    const LatencyResult r =
        latency_bench(model, comp, sizes, a.max_new, a.runs, a.warmups, a.seed);
    print_table(r.table);
    maybe_report(r.table, a.out);
    return 0;
}

struct NeedleArgs {
    std::string artifacts, out, variant = "city", group;
    std::vector<std::string> lengths;
    std::vector<double> depths;
    int chunk = 120, summaries = 4, max_new = 16;
    uint64_t seed = 0;
};

int run_bench_needle(const NeedleArgs& a) {
    const std::string dir = resolve_artifacts(a.artifacts);
    const Model model = load_model(dir);
    CompressionConfig comp;
    comp.chunk_length = a.chunk;
    comp.summary_count = a.summaries;

    LoraAdaptor adaptor;
    const LoraAdaptor* adaptor_ptr = nullptr;
    if (!a.group.empty()) {
        const AdaptorRegistry registry =
            AdaptorRegistry::open((fs::path(dir) / "registry").string());
        const auto rec = registry.lookup(a.group);
        if (!rec) throw not_found_error("no adaptor registered for group " + a.group);
        adaptor = registry.load(*rec);
        adaptor_ptr = &adaptor;
    }

    NeedleGridConfig cfg;
    for (const std::string& s : a.lengths) cfg.lengths.push_back(parse_size(s));
    cfg.depths = a.depths;
    if (a.variant == "fixed")
        cfg.variant = NeedleVariant::fixed;
    else if (a.variant == "city" || a.variant == "random_city")
        cfg.variant = NeedleVariant::random_city;
    else
        throw config_error("variant must be fixed or city, got '" + a.variant + "'");
    cfg.max_new_tokens = a.max_new;
    cfg.seed = a.seed;

    const NeedleGridResult r = needle_grid(model, adaptor_ptr, comp, cfg);
    int refused = 0;
    for (const NeedleCell& c : r.cells) refused += c.hit == -1 ? 1 : 0;
    std::printf("cells=%zu success=%.1f%% refused=%d adaptor=%s\n", r.cells.size(),
                100.0 * r.success_rate, refused,
                adaptor_ptr ? adaptor.adaptor_id.c_str() : "none");
    maybe_report(r.table, a.out);
    return 0;
}

struct ThroughputArgs {
    std::string artifacts, train_file, corpus, out;
    int steps = 20, rank = 8;
    double alpha = 16.0, lr = 1e-3;
    uint64_t seed = 0;
};

int run_bench_throughput(const ThroughputArgs& a) {
    const std::string dir = resolve_artifacts(a.artifacts);
    const Model model = load_model(dir);
    const VectorStore store = VectorStore::load((fs::path(dir) / "store").string());
    const std::vector<TrainingExample> examples = load_examples_jsonl(a.train_file);
    const SummaryLookup lookup = [&store](const std::string& doc_id) -> const auto& {
        return store.summaries(doc_id);
    };
    std::map<std::string, std::string> docs;
    for (const TrainingExample& ex : examples)
        if (!docs.count(ex.doc_id))
            docs[ex.doc_id] = read_text_file((fs::path(a.corpus) / (ex.doc_id + ".txt")).string());

    TrainConfig cfg;
    cfg.rank = a.rank;
    cfg.alpha = float(a.alpha);
    cfg.lr = a.lr;
    cfg.seed = a.seed;

    const ThroughputResult r = throughput_bench(model, examples, docs, lookup, cfg, a.steps,
                                                a.seed);
    std::printf("lloco_ft %.2f ex/s (%.0f rows), full_context_ft %.2f ex/s (%.0f rows), "
                "ratio %.2fx\n",
                r.lloco.examples_per_sec, r.lloco.mean_positions, r.full.examples_per_sec,
                r.full.mean_positions, r.ratio);
    maybe_report(r.table, a.out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"compressed long-context pipeline: preprocess, finetune, serve, eval, bench"};
    app.require_subcommand(1);

    PretrainArgs pt;
    CLI::App* pretrain = app.add_subcommand("pretrain", "initialize and pretrain a base model");
    pretrain->add_option("--out", pt.out, "artifacts directory")->required();
    pretrain->add_option("--d-model", pt.d_model);
    pretrain->add_option("--layers", pt.layers);
    pretrain->add_option("--heads", pt.heads);
    pretrain->add_option("--window", pt.window);
    pretrain->add_option("--slots", pt.slots, "summary slot embeddings");
    pretrain->add_option("--chunk", pt.chunk, "chunk length L");
    pretrain->add_option("--summaries", pt.summaries, "summary rows per chunk k");
    pretrain->add_option("--steps", pt.steps);
    pretrain->add_option("--lr", pt.lr);
    pretrain->add_option("--batch", pt.batch);
    pretrain->add_option("--lm-crop", pt.lm_crop);
    pretrain->add_option("--docs", pt.docs, "synthetic pretraining docs");
    pretrain->add_option("--doc-bytes", pt.doc_bytes);
    pretrain->add_option("--needle-docs", pt.needle_docs,
                         "extra docs planting random-word needles, for copy pretraining");
    pretrain->add_option("--seed", pt.seed);

    GendataArgs gd;
    CLI::App* gendata = app.add_subcommand("gendata", "write a synthetic corpus and QA examples");
    gendata->add_option("--out", gd.out, "output directory")->required();
    gendata->add_option("--groups", gd.groups, "group ids")->delimiter(',');
    gendata->add_option("--docs-per-group", gd.docs_per_group);
    gendata->add_option("--keys-per-doc", gd.keys_per_doc);
    gendata->add_option("--doc-bytes", gd.doc_bytes);
    gendata->add_option("--repeats", gd.repeats, "times each fact is planted");
    gendata->add_option("--needle-docs", gd.needle_docs, "extra needle-group documents");
    gendata->add_option("--needle-doc-bytes", gd.needle_doc_bytes);
    gendata->add_option("--seed", gd.seed);

    PreprocessArgs pp;
    CLI::App* preprocess =
        app.add_subcommand("preprocess", "compress and index a corpus into the store");
    preprocess->add_option("--corpus", pp.corpus, "directory of <doc_id>.txt files")->required();
    preprocess->add_option("--groups", pp.groups_file, "json map of doc_id to group")->required();
    preprocess->add_option("--out", pp.out, "artifacts directory (holds the model)")->required();
    preprocess->add_option("--chunk", pp.chunk);
    preprocess->add_option("--summaries", pp.summaries);
    preprocess->add_option("--passage-bytes", pp.passage_bytes, "retrieval passage length");

    FinetuneArgs ft;
    CLI::App* finetune = app.add_subcommand("finetune", "train a group adaptor on QA examples");
    finetune->add_option("--train", ft.train_file, "jsonl training examples")->required();
    finetune->add_option("--out", ft.out, "artifacts directory")->required();
    finetune->add_option("--group", ft.group, "train this group only");
    finetune->add_flag("--combined", ft.combined, "train one adaptor across groups");
    finetune->add_option("--caps", ft.caps, "per-group caps, group=count")->delimiter(',');
    finetune->add_option("--rank", ft.rank);
    finetune->add_option("--alpha", ft.alpha);
    finetune->add_option("--lr", ft.lr);
    finetune->add_option("--wd", ft.wd);
    finetune->add_option("--warmup", ft.warmup);
    finetune->add_option("--batch", ft.batch);
    finetune->add_option("--accum", ft.accum);
    finetune->add_option("--epochs", ft.epochs);
    finetune->add_option("--seed", ft.seed);
    finetune->add_option("--log", ft.log_file, "write the step log as csv");

    ServeArgs sv;
    CLI::App* serve = app.add_subcommand("serve", "answer queries over http");
    serve->add_option("--artifacts", sv.artifacts, "artifacts directory");
    serve->add_option("--addr", sv.addr, "HOST:PORT");
    serve->add_option("--group-policy", sv.policy, "strict or majority");

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score QA examples through serving");
    eval_cmd->add_option("--dataset", ev.dataset, "jsonl examples")->required();
    eval_cmd->add_option("--mode", ev.mode, "serving mode");
    eval_cmd->add_option("--artifacts", ev.artifacts);
    eval_cmd->add_option("--out", ev.out, "write results.csv/results.json here");
    eval_cmd->add_option("--max-new", ev.max_new);
    eval_cmd->add_option("--top-k", ev.top_k);
    eval_cmd->add_option("--group-policy", ev.policy);

    CLI::App* bench = app.add_subcommand("bench", "latency, needle, and throughput benchmarks");
    bench->require_subcommand(1);

    LatencyArgs la;
    CLI::App* latency = bench->add_subcommand("latency", "per-token decode cost by context size");
    latency->add_option("--artifacts", la.artifacts);
    latency->add_option("--sizes", la.sizes, "context sizes, e.g. 1k,2k,4096")
        ->delimiter(',')
        ->required();
    latency->add_option("--chunk", la.chunk);
    latency->add_option("--summaries", la.summaries);
    latency->add_option("--max-new", la.max_new);
    latency->add_option("--runs", la.runs);
    latency->add_option("--warmups", la.warmups);
    latency->add_option("--seed", la.seed);
    latency->add_option("--out", la.out);

    NeedleArgs na;
    CLI::App* needle = bench->add_subcommand("needle", "planted-fact recovery grid");
    needle->add_option("--artifacts", na.artifacts);
    needle->add_option("--variant", na.variant, "fixed or city");
    needle->add_option("--group", na.group, "serve with this group's adaptor");
    needle->add_option("--lengths", na.lengths, "haystack sizes")->delimiter(',')->required();
    needle->add_option("--depths", na.depths, "fractions in [0,1]")->delimiter(',')->required();
    needle->add_option("--chunk", na.chunk);
    needle->add_option("--summaries", na.summaries);
    needle->add_option("--max-new", na.max_new);
    needle->add_option("--seed", na.seed);
    needle->add_option("--out", na.out);

    ThroughputArgs ta;
    CLI::App* throughput = bench->add_subcommand("throughput", "finetune samples/sec comparison");
    throughput->add_option("--artifacts", ta.artifacts);
    throughput->add_option("--train", ta.train_file, "jsonl examples")->required();
    throughput->add_option("--corpus", ta.corpus, "directory of <doc_id>.txt files")->required();
    throughput->add_option("--steps", ta.steps);
    throughput->add_option("--rank", ta.rank);
    throughput->add_option("--alpha", ta.alpha);
    throughput->add_option("--lr", ta.lr);
    throughput->add_option("--seed", ta.seed);
    throughput->add_option("--out", ta.out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) return run_pretrain(pt);
        if (gendata->parsed()) return run_gendata(gd);
        if (preprocess->parsed()) return run_preprocess(pp);
        if (finetune->parsed()) return run_finetune(ft);
        if (serve->parsed()) return run_serve(sv);
        if (eval_cmd->parsed()) return run_eval(ev);
        if (bench->parsed()) {
            if (latency->parsed()) return run_bench_latency(la);
            if (needle->parsed()) return run_bench_needle(na);
            if (throughput->parsed()) return run_bench_throughput(ta);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
