#include "lloco/bench.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "json.hpp"
#include "lloco/model_grad.hpp"
#include "lloco/store.hpp"

namespace lloco {

namespace {

using nlohmann::json;

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

std::string lowercased(const std::string& text) {
    std::string out = text;
    for (char& c : out) c = char(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// raw generations may hold arbitrary bytes; tables must stay valid text
std::string printable(const std::string& text) {
    std::string out = text;
    for (char& c : out) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (u < 0x20 || u > 0x7e) c = '?';
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::vector<std::string> split_tokens(const std::string& normalized) {
    std::vector<std::string> out;
    std::istringstream in(normalized);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    if (n == 0) return 0.0;
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// answer scoring
// ---------------------------------------------------------------------------

std::string normalize_answer(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u))
            out += char(std::tolower(u));
        else
            out += ' ';
    }
    std::string collapsed;
    for (char c : out) {
        if (c == ' ' && (collapsed.empty() || collapsed.back() == ' ')) continue;
        collapsed += c;
    }
    while (!collapsed.empty() && collapsed.back() == ' ') collapsed.pop_back();
    return collapsed;
}

std::string first_sentence(const std::string& text) {
    const size_t dot = text.find('.');
    return dot == std::string::npos ? text : text.substr(0, dot);
}

bool exact_match(const std::string& prediction, const std::string& gold) {
    return normalize_answer(prediction) == normalize_answer(gold);
}

double token_f1(const std::string& prediction, const std::string& gold) {
    const std::vector<std::string> p = split_tokens(normalize_answer(prediction));
    const std::vector<std::string> g = split_tokens(normalize_answer(gold));
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const std::string& t : g) counts[t]++;
    int overlap = 0;
    for (const std::string& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = double(overlap) / double(p.size());
    const double recall = double(overlap) / double(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// result tables
// ---------------------------------------------------------------------------

void save_bench_csv(const std::string& path, const BenchResult& result) {
    std::ostringstream out;
    out << "# name=" << result.name << " config_digest=" << result.config_digest
        << " seed=" << result.seed << " wall_clock_sec=" << format_double(result.wall_clock_sec)
        << "\n";
    for (size_t c = 0; c < result.columns.size(); ++c)
        out << (c ? "," : "") << csv_field(result.columns[c]);
    out << "\n";
    for (const std::vector<std::string>& row : result.rows) {
        for (size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << csv_field(row[c]);
        out << "\n";
    }
    write_text_file(path, out.str());
}

void save_bench_json(const std::string& path, const BenchResult& result) {
    json j{{"name", result.name},
           {"columns", result.columns},
           {"rows", result.rows},
           {"config_digest", result.config_digest},
           {"seed", result.seed},
           {"wall_clock_sec", result.wall_clock_sec}};
    write_text_file(path, j.dump(2) + "\n");
}

BenchResult load_bench_json(const std::string& path) {
    BenchResult result;
    try {
        const json j = json::parse(read_text_file(path));
        result.name = j.at("name").get<std::string>();
        result.columns = j.at("columns").get<std::vector<std::string>>();
        result.rows = j.at("rows").get<std::vector<std::vector<std::string>>>();
        result.config_digest = j.at("config_digest").get<std::string>();
        result.seed = j.at("seed").get<uint64_t>();
        result.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    } catch (const json::exception& e) {
        throw corrupt_file_error("bad bench result " + path + ": " + e.what());
    }
    return result;
}

void report(const BenchResult& result, const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    save_bench_csv(out_dir + "/results.csv", result);
    save_bench_json(out_dir + "/results.json", result);
}

// ---------------------------------------------------------------------------
// QA evaluation
// ---------------------------------------------------------------------------

QaEvalResult qa_eval(const Artifacts& artifacts, std::span<const TrainingExample> examples,
                     ServeMode mode, int max_new_tokens, int top_k, GroupPolicy policy) {
    Stopwatch clock;
    QaEvalResult result;
    result.mode = mode;
    double em_sum = 0.0, f1_sum = 0.0;
    int scored = 0;
    for (const TrainingExample& ex : examples) {
        QaExampleScore score;
        score.doc_id = ex.doc_id;
        score.question = ex.question;
        score.gold = ex.answer;
        ServeRequest req;
        req.question = ex.question;
        req.doc_id = ex.doc_id;
        req.mode = mode;
        req.max_new_tokens = max_new_tokens;
        req.top_k = top_k;
        if (mode == ServeMode::lloco) req.group_id = ex.group_id;
        try {
            const ServeResponse resp = serve_query(req, artifacts, policy);
            score.prediction = resp.answer;
            const std::string clipped = first_sentence(resp.answer);
            score.em = exact_match(clipped, ex.answer) ? 1.0 : 0.0;
            score.f1 = token_f1(clipped, ex.answer);
            em_sum += score.em;
            f1_sum += score.f1;
            ++scored;
        } catch (const std::runtime_error& e) {
            score.status = std::string("failed: ") + e.what();
            ++result.n_failed;
        }
        result.scores.push_back(std::move(score));
    }
    result.em = scored > 0 ? em_sum / scored : 0.0;
    result.f1 = scored > 0 ? f1_sum / scored : 0.0;

    result.table.name = "qa_eval:" + std::string(mode_name(mode));
    result.table.columns = {"doc_id", "question", "gold", "prediction", "em", "f1", "status"};
    for (const QaExampleScore& s : result.scores)
        result.table.rows.push_back({s.doc_id, s.question, s.gold, printable(s.prediction),
                                     format_double(s.em), format_double(s.f1), s.status});
    result.table.config_digest = hex64(
        fnv1a64("qa_eval|" + std::string(mode_name(mode)) + "|max_new=" +
                std::to_string(max_new_tokens) + "|top_k=" + std::to_string(top_k) +
                "|examples=" + std::to_string(examples.size())));
    result.table.wall_clock_sec = clock.seconds();
    return result;
}

// ---------------------------------------------------------------------------
// needle in a haystack
// ---------------------------------------------------------------------------

int place_needle(std::string& haystack, const std::string& needle, double depth) {
    if (needle.empty()) throw config_error("needle is empty");
    if (needle.size() > haystack.size())
        throw config_error("needle of " + std::to_string(needle.size()) +
                           " bytes cannot fit in a haystack of " +
                           std::to_string(haystack.size()));
    if (!(depth >= 0.0 && depth <= 1.0)) throw config_error("depth must be in [0, 1]");
    const double span = double(haystack.size() - needle.size());
    const int offset = int(std::llround(depth * span));
    haystack.replace(size_t(offset), needle.size(), needle);
    return offset;
}

NeedleGridResult needle_grid(const Model& model, const LoraAdaptor* adaptor,
                             const CompressionConfig& comp, const NeedleGridConfig& cfg) {
    if (cfg.lengths.empty() || cfg.depths.empty())
        throw config_error("needle grid needs at least one length and one depth");
    Stopwatch clock;
    NeedleGridResult result;

    Artifacts art;
    art.model = model;
    if (adaptor) art.adaptors[adaptor->group_id] = *adaptor;
    const std::string group = adaptor ? adaptor->group_id : "needle";
    const std::string slot = adaptor ? "lora:" + adaptor->group_id : "none";
    const std::string fixed_city =
        needle_cities()[derive_seed(cfg.seed, "city") % needle_cities().size()];
    const auto& pool = heldout_cities();

    int hits = 0;
    for (size_t li = 0; li < cfg.lengths.size(); ++li) {
        for (size_t di = 0; di < cfg.depths.size(); ++di) {
            const int length = cfg.lengths[li];
            const double depth = cfg.depths[di];
            Rng rng(derive_seed(cfg.seed,
                                "cell." + std::to_string(li) + "." + std::to_string(di)));
            NeedleCell cell;
            cell.length = length;
            cell.depth = depth;
            cell.city = cfg.variant == NeedleVariant::fixed ? fixed_city
                                                            : pool[rng.below(pool.size())];
            std::string haystack = filler_text(length + 80, rng).substr(0, size_t(length));
            cell.offset = place_needle(haystack, needle_sentence(cell.city), depth);

            art.store = VectorStore(model.config().d_model, comp.chunk_length);
            index_document(art.store, model, "needle", group, slot, haystack, comp);

            ServeRequest req;
            req.question = needle_question();
            req.doc_id = "needle";
            req.group_id = adaptor ? adaptor->group_id : "";
            req.mode = adaptor ? ServeMode::lloco : ServeMode::compressed_unfinetuned;
            req.max_new_tokens = cfg.max_new_tokens;
            req.top_k = (length + comp.chunk_length - 1) / comp.chunk_length;
            try {
                const ServeResponse resp = serve_query(req, art);
                cell.answer = resp.answer;
                cell.hit = lowercased(resp.answer).find(cell.city) != std::string::npos ? 1 : 0;
                hits += cell.hit;
            } catch (const window_overflow_error&) {
                cell.hit = -1;
            }
            result.cells.push_back(std::move(cell));
        }
    }
    result.success_rate = double(hits) / double(result.cells.size());

    std::string variant = cfg.variant == NeedleVariant::fixed ? "fixed" : "random_city";
    result.table.name = "needle_grid";
    result.table.columns = {"length", "depth", "city", "offset", "hit", "answer"};
    for (const NeedleCell& c : result.cells)
        result.table.rows.push_back({std::to_string(c.length), format_double(c.depth), c.city,
                                     std::to_string(c.offset), std::to_string(c.hit),
                                     printable(c.answer)});
    std::string config = "needle|L=" + std::to_string(comp.chunk_length) +
                         "|k=" + std::to_string(comp.summary_count) + "|variant=" + variant +
                         "|max_new=" + std::to_string(cfg.max_new_tokens) + "|lengths=";
    for (int l : cfg.lengths) config += std::to_string(l) + ";";
    config += "|depths=";
    for (double d : cfg.depths) config += format_double(d) + ";";
    result.table.config_digest = hex64(fnv1a64(config));
    result.table.seed = cfg.seed;
    result.table.wall_clock_sec = clock.seconds();
    return result;
}

// ---------------------------------------------------------------------------
// serving latency
// ---------------------------------------------------------------------------

bool full_mode_fits(int context_tokens, int window) { return context_tokens <= window; }

int compressed_rows_for(int context_tokens, const CompressionConfig& comp) {
    const int chunks = (context_tokens + comp.chunk_length - 1) / comp.chunk_length;
    return chunks * comp.summary_count;
}

bool compressed_mode_fits(int context_tokens, const CompressionConfig& comp, int window) {
    return context_tokens <=
           effective_window(window, comp.chunk_length, comp.summary_count);
}

namespace {

// one timed serving of `positions` decoder rows; generates what fits of
// max_new and falls back to a single prefill when nothing does
double timed_ms_per_token(const Model& model, const EmbeddingSequence& prefix,
                          std::span<const int> tokens, int max_new, int runs, int warmups) {
    const int positions = prefix.size() + int(tokens.size());
    const int budget = std::min(max_new, model.config().window - positions);
    auto one_run = [&]() -> double {
        Stopwatch t;
        if (budget >= 1)
            model.generate(prefix, tokens, budget);
        else if (prefix.size() > 0)
            model.forward_rows(prefix);
        else
            model.forward_rows(model.embed_tokens(tokens));
        return t.seconds() * 1e3 / double(std::max(budget, 1));
    };
    for (int w = 0; w < warmups; ++w) one_run();
    std::vector<double> samples;
    samples.reserve(size_t(runs));
    for (int r = 0; r < runs; ++r) samples.push_back(one_run());
    return median(std::move(samples));
}

} // namespace

LatencyResult latency_bench(const Model& model, const CompressionConfig& comp,
                            std::span<const int> context_sizes, int max_new_tokens, int runs,
                            int warmups, uint64_t seed) {
    if (runs < 1 || warmups < 0) throw config_error("need runs >= 1 and warmups >= 0");
    if (max_new_tokens < 1) throw config_error("max_new_tokens must be >= 1");
    Stopwatch clock;
    const int d = model.config().d_model;
    const int window = model.config().window;
    LatencyResult result;
    result.table.name = "latency";
    result.table.columns = {"context_tokens",      "full_positions", "full_status",
                            "full_ms_per_token",   "comp_positions", "comp_status",
                            "comp_ms_per_token",   "speedup"};

    for (int n : context_sizes) {
        if (n < 1) throw config_error("context sizes must be >= 1");
        Rng rng(derive_seed(seed, "latency." + std::to_string(n)));

        LatencyCell full;
        full.context_tokens = n;
        full.mode = "full_context";
        full.prompt_positions = n;
        full.served = full_mode_fits(n, window);
        if (full.served) {
            std::vector<int> tokens(static_cast<size_t>(n));
            for (int& t : tokens) t = int(rng.below(256));
            full.ms_per_token = timed_ms_per_token(model, EmbeddingSequence(d), tokens,
                                                   max_new_tokens, runs, warmups);
        }

        LatencyCell comp_cell;
        comp_cell.context_tokens = n;
        comp_cell.mode = "compressed";
        comp_cell.prompt_positions = compressed_rows_for(n, comp);
        comp_cell.served = compressed_mode_fits(n, comp, window);
        if (comp_cell.served) {
            // decode cost is value-independent; synthetic unit-scale rows
            // stand in for real summaries
            EmbeddingSequence rows(d);
            std::vector<double> row(static_cast<size_t>(d));
            for (int r = 0; r < comp_cell.prompt_positions; ++r) {
                for (double& v : row) v = rng.normal();
                rows.append_raw(row, RowOrigin::summary);
            }
            comp_cell.ms_per_token =
                timed_ms_per_token(model, rows, {}, max_new_tokens, runs, warmups);
        }

        std::string speedup;
        if (full.served && comp_cell.served && comp_cell.ms_per_token > 0.0)
            speedup = format_double(full.ms_per_token / comp_cell.ms_per_token);
        result.table.rows.push_back(
            {std::to_string(n), std::to_string(full.prompt_positions),
             full.served ? "served" : "refused",
             full.served ? format_double(full.ms_per_token) : "",
             std::to_string(comp_cell.prompt_positions),
             comp_cell.served ? "served" : "refused",
             comp_cell.served ? format_double(comp_cell.ms_per_token) : "", speedup});
        result.cells.push_back(std::move(full));
        result.cells.push_back(std::move(comp_cell));
    }

    std::string config = "latency|L=" + std::to_string(comp.chunk_length) +
                         "|k=" + std::to_string(comp.summary_count) +
                         "|W=" + std::to_string(window) +
                         "|max_new=" + std::to_string(max_new_tokens) +
                         "|runs=" + std::to_string(runs) + "|sizes=";
    for (int n : context_sizes) config += std::to_string(n) + ";";
    result.table.config_digest = hex64(fnv1a64(config));
    result.table.seed = seed;
    result.table.wall_clock_sec = clock.seconds();
    return result;
}

// ---------------------------------------------------------------------------
// finetuning throughput
// ---------------------------------------------------------------------------

TrainSequence build_full_context_sequence(const Model& model, const std::string& doc_text,
                                          const std::string& question, const std::string& answer) {
    TrainSequence seq;
    seq.prefix = EmbeddingSequence(model.config().d_model);
    const std::vector<int> prompt = tokenize(qa_prompt(question));
    const std::vector<int> ans = tokenize(answer);
    const int window = model.config().window;
    const int fixed = int(prompt.size() + ans.size());
    if (fixed > window)
        throw window_overflow_error("prompt and answer of " + std::to_string(fixed) +
                                    " tokens exceed window " + std::to_string(window));
    std::vector<int> doc = tokenize(doc_text);
    if (int(doc.size()) > window - fixed) doc.resize(size_t(window - fixed));
    seq.tokens = std::move(doc);
    seq.tokens.insert(seq.tokens.end(), prompt.begin(), prompt.end());
    const size_t answer_from = seq.tokens.size();
    seq.tokens.insert(seq.tokens.end(), ans.begin(), ans.end());
    seq.mask.assign(seq.tokens.size(), 0);
    for (size_t i = answer_from; i < seq.tokens.size(); ++i) seq.mask[i] = 1;
    return seq;
}

namespace {

// flat views over every adaptor matrix, in target order (a then b)
struct BenchAdaptorParams {
    std::vector<std::span<float>> tensors;
    std::vector<AdamWState> states;

    explicit BenchAdaptorParams(LoraAdaptor& ad) {
        for (LoraTarget& t : ad.targets) {
            tensors.emplace_back(t.a.w);
            tensors.emplace_back(t.b.w);
            states.emplace_back(t.a.size());
            states.emplace_back(t.b.size());
        }
    }

    void apply(const LoraGrads& g, int step, double lr, double wd) {
        for (size_t t = 0; t < tensors.size(); ++t) {
            const std::vector<double>& grad = (t % 2 == 0) ? g.da[t / 2] : g.db[t / 2];
            adamw_step(tensors[t], grad, states[t], step, lr, wd);
        }
    }
};

ThroughputArm run_arm(const Model& model, const std::string& mode,
                      std::span<const TrainSequence> seqs, const TrainConfig& cfg, int steps,
                      uint64_t seed) {
    ThroughputArm arm;
    arm.mode = mode;
    arm.steps = steps;
    LoraAdaptor adaptor =
        init_adaptor(model.config(), "bench", default_lora_targets(model.config().n_layers),
                     cfg.rank, cfg.alpha, derive_seed(seed, "adaptor." + mode));
    BenchAdaptorParams params(adaptor);
    LoraGrads grads = LoraGrads::zeros_like(adaptor);
    int64_t positions = 0;
    Stopwatch clock;
    for (int step = 1; step <= steps; ++step) {
        const TrainSequence& seq = seqs[size_t(step - 1) % seqs.size()];
        EmbeddingSequence rows = seq.prefix;
        rows.append(model.embed_tokens(seq.tokens));
        ForwardCache cache;
        const DecoderOutput out = forward_cached(model, rows, &adaptor, cache);
        std::vector<double> dlogits;
        const std::vector<int> targets = seq.targets();
        const double loss = masked_cross_entropy(out, targets, &dlogits);
        if (!std::isfinite(loss))
            throw divergence_error("loss became non-finite at step " + std::to_string(step));
        grads.zero();
        backward(model, &adaptor, cache, dlogits, {}, nullptr, &grads);
        params.apply(grads, step, cfg.lr, cfg.weight_decay);
        positions += rows.size();
    }
    arm.seconds = clock.seconds();
    arm.examples_per_sec = arm.seconds > 0.0 ? double(steps) / arm.seconds : 0.0;
    arm.mean_positions = double(positions) / double(steps);
    return arm;
}

} // namespace

ThroughputResult throughput_bench(const Model& model, std::span<const TrainingExample> examples,
                                  const std::map<std::string, std::string>& doc_texts,
                                  const SummaryLookup& summaries, const TrainConfig& cfg,
                                  int steps, uint64_t seed) {
    if (examples.empty()) throw config_error("throughput bench needs at least one example");
    if (steps < 1) throw config_error("steps must be >= 1");
    cfg.validate();
    Stopwatch clock;

    // sequence assembly mirrors training: summaries come precomputed (offline
    // preprocessing), the baseline re-feeds the raw document every step
    std::vector<TrainSequence> lloco_seqs, full_seqs;
    for (const TrainingExample& ex : examples) {
        lloco_seqs.push_back(build_training_sequence(summaries(ex.doc_id), ex.question, ex.answer,
                                                     model.config().window));
        auto doc = doc_texts.find(ex.doc_id);
        if (doc == doc_texts.end())
            throw not_found_error("no document text for " + ex.doc_id);
        full_seqs.push_back(
            build_full_context_sequence(model, doc->second, ex.question, ex.answer));
    }

    ThroughputResult result;
    result.lloco = run_arm(model, "lloco_ft", lloco_seqs, cfg, steps, seed);
    result.full = run_arm(model, "full_context_ft", full_seqs, cfg, steps, seed);
    result.ratio = result.full.examples_per_sec > 0.0
                       ? result.lloco.examples_per_sec / result.full.examples_per_sec
                       : 0.0;

    result.table.name = "throughput";
    result.table.columns = {"mode", "steps", "seconds", "examples_per_sec", "mean_positions",
                            "ratio"};
    for (const ThroughputArm* arm : {&result.lloco, &result.full})
        result.table.rows.push_back({arm->mode, std::to_string(arm->steps),
                                     format_double(arm->seconds),
                                     format_double(arm->examples_per_sec),
                                     format_double(arm->mean_positions),
                                     format_double(result.ratio)});
    result.table.config_digest = hex64(fnv1a64(
        "throughput|rank=" + std::to_string(cfg.rank) + "|steps=" + std::to_string(steps) +
        "|examples=" + std::to_string(examples.size())));
    result.table.seed = seed;
    result.table.wall_clock_sec = clock.seconds();
    return result;
}

} // namespace lloco
