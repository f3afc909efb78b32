#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lloco/common.hpp"

namespace lloco {

struct LoraAdaptor;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

struct ModelConfig {
    int vocab_size = 256; // byte-level
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int window = 256; // W, max positions per forward
    double rope_base = 10000.0;
    uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    int d_ff() const { return 4 * d_model; }
    void validate() const; // throws config_error
};

// row-major float matrix; weights live in float32 so checkpoints round-trip
// bit-exactly
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> w;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), w(size_t(r) * size_t(c), 0.0f) {}
    float* row(int r) { return w.data() + size_t(r) * cols; }
    const float* row(int r) const { return w.data() + size_t(r) * cols; }
    float& at(int r, int c) { return w[size_t(r) * cols + c]; }
    float at(int r, int c) const { return w[size_t(r) * cols + c]; }
    size_t size() const { return w.size(); }
};

// ---------------------------------------------------------------------------
// sequences
// ---------------------------------------------------------------------------

enum class RowOrigin : uint8_t { summary = 0, token = 1 };

// A sequence of d_model rows fed to the decoder. Summary rows are raw
// embeddings produced by the context encoder; token rows come from the
// embedding table (their byte id is kept so training can route gradients
// back into the table).
struct EmbeddingSequence {
    int dim = 0;
    std::vector<double> data;       // n x dim, row-major
    std::vector<RowOrigin> origin;  // per row
    std::vector<int> token_ids;     // per row, -1 for summary rows

    EmbeddingSequence() = default;
    explicit EmbeddingSequence(int d) : dim(d) {}

    int size() const { return static_cast<int>(origin.size()); }
    double* row(int r) { return data.data() + size_t(r) * dim; }
    const double* row(int r) const { return data.data() + size_t(r) * dim; }

    void append_raw(std::span<const double> row, RowOrigin tag);
    void append(const EmbeddingSequence& other);
};

struct DecoderOutput {
    int n = 0;
    int d_model = 0;
    int vocab_size = 0;
    std::vector<double> logits;       // n x vocab_size
    std::vector<double> final_hidden; // n x d_model, post final norm

    const double* logits_row(int r) const { return logits.data() + size_t(r) * vocab_size; }
    const double* hidden_row(int r) const { return final_hidden.data() + size_t(r) * d_model; }
};

// rows of output.final_hidden at the given positions, in the given order;
// throws std::out_of_range
EmbeddingSequence hidden_at(std::span<const int> positions, const DecoderOutput& output);

// ---------------------------------------------------------------------------
// byte-level tokenizer
// ---------------------------------------------------------------------------

std::vector<int> tokenize(const std::string& text);
std::string detokenize(std::span<const int> tokens); // throws std::out_of_range on id >= 256

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

struct LayerWeights {
    Mat attn_norm; // 1 x d
    Mat wq, wk, wv, wo; // d x d
    Mat mlp_norm; // 1 x d
    Mat w_up;   // d_ff x d
    Mat w_down; // d x d_ff
};

struct Weights {
    Mat embedding; // vocab x d, tied output head
    std::vector<LayerWeights> layers;
    Mat final_norm; // 1 x d
    Mat slots; // n_slots x d, learned summary-slot embeddings

    // named tensor list in checkpoint order
    std::vector<std::pair<std::string, Mat*>> tensor_list();
    std::vector<std::pair<std::string, const Mat*>> tensor_list() const;
};

// ---------------------------------------------------------------------------
// decoder model
// ---------------------------------------------------------------------------

class Model {
public:
    Model() = default;

    // fresh seed-controlled init; n_slots summary-slot embeddings are part of
    // the checkpoint
    static Model init(const ModelConfig& cfg, int n_slots);

    const ModelConfig& config() const { return cfg_; }
    Weights& weights() { return w_; }
    const Weights& weights() const { return w_; }
    int n_slots() const { return w_.slots.rows; }

    EmbeddingSequence embed_tokens(std::span<const int> tokens) const;

    // causal forward over an already-assembled row sequence; positions are
    // contiguous 0..n-1
    DecoderOutput forward_rows(const EmbeddingSequence& rows,
                               const LoraAdaptor* adaptor = nullptr) const;

    // prefix rows followed by token embeddings; exactly equivalent to
    // forward_rows over the concatenation
    DecoderOutput forward(const EmbeddingSequence& prefix, std::span<const int> tokens,
                          const LoraAdaptor* adaptor = nullptr) const;

    // greedy decode (argmax, ties to the lowest token id) with incremental
    // per-request state; returns the new tokens only
    std::vector<int> generate(const EmbeddingSequence& prefix, std::span<const int> prompt_tokens,
                              int max_new, const LoraAdaptor* adaptor = nullptr) const;

    // checkpoint: JSON manifest + sidecar float32 binary, bit-exact round trip
    void save(const std::string& manifest_path, const std::string& bin_path) const;
    static Model load(const std::string& manifest_path, const std::string& bin_path);

    uint64_t weight_digest() const;

private:
    ModelConfig cfg_;
    Weights w_;

    friend struct ForwardCache;
};

} // namespace lloco
