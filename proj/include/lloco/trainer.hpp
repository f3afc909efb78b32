#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lloco/encoder.hpp"
#include "lloco/lora.hpp"
#include "lloco/model.hpp"
#include "lloco/model_grad.hpp"

namespace lloco {

// ---------------------------------------------------------------------------
// training data
// ---------------------------------------------------------------------------

struct TrainingExample {
    std::string group_id;
    std::string doc_id;
    std::string question;
    std::string answer;
};

// JSON lines, one example per line
void save_examples_jsonl(const std::string& path, std::span<const TrainingExample> examples);
std::vector<TrainingExample> load_examples_jsonl(const std::string& path);

// the one QA template shared by training and serving
std::string qa_prompt(const std::string& question);

struct TrainConfig {
    double lr = 2e-5; // full-scale recipe default; toy runs pass a larger value
    double weight_decay = 0.0;
    double warmup_ratio = 0.04;
    int batch_size = 1;
    int grad_accum = 4;
    int epochs = 1;
    int rank = 8;
    float alpha = 16.0f;
    uint64_t seed = 0;

    void validate() const;       // throws config_error
    std::string digest() const;  // stable hash of every field, for registry records
};

// linear warmup from 0 over ceil(warmup_ratio * total) steps, cosine to 0 at total
double lr_at(int step, const TrainConfig& cfg, int total_steps);

// ---------------------------------------------------------------------------
// sequence assembly
// ---------------------------------------------------------------------------

struct TrainSequence {
    EmbeddingSequence prefix;  // summary rows in chunk order
    std::vector<int> tokens;   // prompt + answer bytes
    std::vector<uint8_t> mask; // per token: contributes to the loss

    // next-token targets over [prefix; tokens]: position p predicts token p+1,
    // kept only where the *predicted* token is masked; -1 elsewhere
    std::vector<int> targets() const;
};

TrainSequence build_training_sequence(std::span<const SummaryEmbeddings> summaries,
                                      const std::string& question, const std::string& answer,
                                      int window);

// ---------------------------------------------------------------------------
// optimizer (decoupled weight decay, 64-bit moments)
// ---------------------------------------------------------------------------

struct AdamWState {
    std::vector<double> m, v;
    explicit AdamWState(size_t n) : m(n, 0.0), v(n, 0.0) {}
};

void adamw_step(std::span<float> w, std::span<const double> g, AdamWState& state, int step,
                double lr, double weight_decay);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainLogRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0; // wall clock since training start
};

void save_train_log_csv(const std::string& path, std::span<const TrainLogRow> rows);

// summaries for a doc_id; throws not_found_error for unknown docs
using SummaryLookup =
    std::function<const std::vector<SummaryEmbeddings>&(const std::string& doc_id)>;

// one adaptor per document group; the base model stays frozen
LoraAdaptor train_group(const Model& model, const std::string& group_id,
                        std::span<const TrainingExample> examples, const SummaryLookup& summaries,
                        const TrainConfig& cfg, std::vector<TrainLogRow>* log = nullptr);

// balanced union across groups: per-group caps, seed-controlled sampling
LoraAdaptor train_combined(const Model& model, std::span<const TrainingExample> examples,
                           const SummaryLookup& summaries, const TrainConfig& cfg,
                           const std::map<std::string, int>& group_caps,
                           std::vector<TrainLogRow>* log = nullptr);

// deterministic per-group cap sampling used by train_combined, exposed for tests
std::vector<TrainingExample> sample_with_caps(std::span<const TrainingExample> examples,
                                              const std::map<std::string, int>& group_caps,
                                              uint64_t seed);

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    int probes = 0;
};

// central differences against supplied analytic gradients; params are probed
// in place (restored afterwards), the step uses the actually-realized
// float-snapped perturbation
GradCheckResult grad_check(const std::function<double()>& loss, std::span<float* const> params,
                           std::span<const double> analytic, double epsilon, int max_probes,
                           uint64_t seed);

// convenience probe: masked LM loss of one training sequence wrt adaptor params
GradCheckResult grad_check_adaptor(const Model& model, const TrainSequence& seq,
                                   LoraAdaptor& adaptor, double epsilon, int max_probes,
                                   uint64_t seed);

// ---------------------------------------------------------------------------
// toy-scale base pretraining (summary slots learn to carry content)
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int steps = 600;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double warmup_ratio = 0.04;
    int lm_crop = 128;       // window for the plain next-byte objective
    int batch = 4;           // sequences per optimizer step
    uint64_t seed = 1;
    CompressionConfig comp = toy_compression();
    // > 0 turns on a ratio curriculum: each compression sample draws its chunk
    // length from a doubling ladder starting here and capped at chunk_length,
    // so summary reading is learned at easy ratios before the full one
    int chunk_curriculum_min = 0;
};

// interleaves plain next-byte prediction, compress-then-reconstruct of one
// chunk (gradients flow through the compression pass), and reconstruction of
// a later chunk conditioned on accumulated summaries (earlier summaries are
// held constant); mutates the model in place
void pretrain_base(Model& model, std::span<const std::string> corpus, const PretrainConfig& cfg,
                   std::vector<TrainLogRow>* log = nullptr);

// mean reconstruction loss of held-out docs given their own summaries vs no
// context at all; the gap is the signal that summaries carry content
struct ReconstructionProbe {
    double with_summaries = 0.0;
    double without = 0.0;
};
ReconstructionProbe reconstruction_probe(const Model& model, std::span<const std::string> docs,
                                         const CompressionConfig& comp);

} // namespace lloco
