#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "lloco/serving.hpp"
#include "lloco/synth.hpp"
#include "lloco/trainer.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// answer scoring
// ---------------------------------------------------------------------------

// lowercase, punctuation and control bytes to spaces, whitespace collapsed
// and trimmed
std::string normalize_answer(const std::string& text);

// text up to the first '.', or the whole string without one; greedy decoding
// keeps emitting bytes after the answer, and gold answers are one sentence
std::string first_sentence(const std::string& text);

// equality of the normalized strings
bool exact_match(const std::string& prediction, const std::string& gold);

// unigram F1 over whitespace tokens of the normalized strings; both empty
// scores 1, exactly one empty scores 0
double token_f1(const std::string& prediction, const std::string& gold);

// ---------------------------------------------------------------------------
// result tables
// ---------------------------------------------------------------------------

struct BenchResult {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows; // each row parallel to columns
    std::string config_digest;                  // hash of the generating config
    uint64_t seed = 0;
    double wall_clock_sec = 0.0;
};

void save_bench_csv(const std::string& path, const BenchResult& result);
void save_bench_json(const std::string& path, const BenchResult& result);
BenchResult load_bench_json(const std::string& path); // exact round trip

// results.csv and results.json under out_dir (created if missing)
void report(const BenchResult& result, const std::string& out_dir);

// ---------------------------------------------------------------------------
// QA evaluation over the serving path
// ---------------------------------------------------------------------------

struct QaExampleScore {
    std::string doc_id;
    std::string question;
    std::string gold;
    std::string prediction; // raw generation, before truncation/normalization
    double em = 0.0;
    double f1 = 0.0;
    std::string status = "ok"; // failures carry the reason
};

struct QaEvalResult {
    ServeMode mode = ServeMode::lloco;
    std::vector<QaExampleScore> scores; // one per example, failed included
    int n_failed = 0;                   // refused or errored, excluded from the means
    double em = 0.0;                    // mean over scored examples, in [0, 1]
    double f1 = 0.0;
    BenchResult table;
};

// serves every example in the requested mode and scores the first sentence of
// the generation against the gold answer; examples whose serve call throws
// are marked failed and excluded from the aggregate means
QaEvalResult qa_eval(const Artifacts& artifacts, std::span<const TrainingExample> examples,
                     ServeMode mode, int max_new_tokens = 16, int top_k = 5,
                     GroupPolicy policy = GroupPolicy::strict);

// ---------------------------------------------------------------------------
// needle in a haystack
// ---------------------------------------------------------------------------

struct NeedleSpec {
    std::string doc_id;
    std::string needle; // full planted sentence
    double depth = 0.0; // 0 = front, 1 = back
    int length = 0;     // haystack bytes
};

// overwrites haystack bytes with the needle at the offset nearest
// depth * (length - needle size), so every depth in [0, 1] lands in bounds;
// returns the offset used, throws config_error if the needle cannot fit
int place_needle(std::string& haystack, const std::string& needle, double depth);

enum class NeedleVariant { fixed, random_city };

struct NeedleGridConfig {
    std::vector<int> lengths;   // haystack sizes in tokens
    std::vector<double> depths; // each in [0, 1]
    NeedleVariant variant = NeedleVariant::random_city;
    int max_new_tokens = 16;
    uint64_t seed = 0;
};

struct NeedleCell {
    int length = 0;
    double depth = 0.0;
    std::string city;
    int offset = 0;     // byte position the needle landed at
    std::string answer; // raw generation; empty when refused
    int hit = 0;        // 1 found, 0 missed, -1 refused
};

struct NeedleGridResult {
    std::vector<NeedleCell> cells; // row-major, lengths x depths
    double success_rate = 0.0;     // hits / cells; refused counts as a miss
    BenchResult table;
};

// per cell: plant one needle sentence in exact-length filler, index the
// document into a fresh store (passage length = chunk length), and route the
// needle question through serve_query; success is lowercased containment of
// the city in the answer. adaptor == nullptr serves compressed_unfinetuned,
// otherwise lloco under the adaptor's group. The fixed variant plants one
// seed-chosen training city everywhere; random_city draws per cell from the
// held-out city list.
NeedleGridResult needle_grid(const Model& model, const LoraAdaptor* adaptor,
                             const CompressionConfig& comp, const NeedleGridConfig& cfg);

// ---------------------------------------------------------------------------
// serving latency
// ---------------------------------------------------------------------------

// the serving refusal rule, spelled out: full mode feeds n raw tokens and
// fits iff n <= window; compressed mode feeds ceil(n/L)*k summary rows and
// fits iff n <= effective_window(window, L, k)
bool full_mode_fits(int context_tokens, int window);
int compressed_rows_for(int context_tokens, const CompressionConfig& comp);
bool compressed_mode_fits(int context_tokens, const CompressionConfig& comp, int window);

struct LatencyCell {
    int context_tokens = 0;
    std::string mode;          // "full_context" or "compressed"
    int prompt_positions = 0;  // rows fed to the decoder
    bool served = false;       // refused cells carry no timing
    double ms_per_token = 0.0; // median over the timed runs
};

struct LatencyResult {
    std::vector<LatencyCell> cells; // two per size, full then compressed
    BenchResult table;              // one row per size with a speedup column
};

// decode-cost comparison at fixed generation length: full mode feeds n random
// byte tokens, compressed mode feeds ceil(n/L)*k synthetic summary rows
// (decode cost does not depend on row values); each served cell reports the
// median of `runs` timed generations after `warmups` untimed ones
LatencyResult latency_bench(const Model& model, const CompressionConfig& comp,
                            std::span<const int> context_sizes, int max_new_tokens = 16,
                            int runs = 5, int warmups = 2, uint64_t seed = 0);

// ---------------------------------------------------------------------------
// finetuning throughput
// ---------------------------------------------------------------------------

// baseline sequence: the raw document replaces the summary prefix; documents
// too long for the window are cut at the tail (earliest tokens kept), and a
// window too small for even the prompt and answer throws
// window_overflow_error
TrainSequence build_full_context_sequence(const Model& model, const std::string& doc_text,
                                          const std::string& question, const std::string& answer);

struct ThroughputArm {
    std::string mode; // "lloco_ft" or "full_context_ft"
    int steps = 0;
    double seconds = 0.0;
    double examples_per_sec = 0.0;
    double mean_positions = 0.0; // mean decoder rows per example
};

struct ThroughputResult {
    ThroughputArm lloco;
    ThroughputArm full;
    double ratio = 0.0; // lloco examples/sec over full examples/sec
    BenchResult table;
};

// times `steps` single-example adaptor updates per arm over the same examples
// in the same round-robin order; the lloco arm trains on precomputed summary
// prefixes, the full arm on raw document tokens
ThroughputResult throughput_bench(const Model& model, std::span<const TrainingExample> examples,
                                  const std::map<std::string, std::string>& doc_texts,
                                  const SummaryLookup& summaries, const TrainConfig& cfg,
                                  int steps, uint64_t seed);

} // namespace lloco
