#pragma once

#include <span>
#include <string>
#include <vector>

#include "lloco/lora.hpp"
#include "lloco/model.hpp"

namespace lloco {

// rotary position encoding, applied to every position including summary rows
void rope_rotate(double* vec, int pos, int n_heads, int head_dim, double base);

// ---------------------------------------------------------------------------
// cached forward + hand-written backward (all accumulation in double)
// ---------------------------------------------------------------------------

struct LayerCache {
    std::vector<double> x_att_in;    // n x d, residual entering attention
    std::vector<double> att_xn;      // n x d, post attn_norm
    std::vector<double> att_inv_rms; // n
    std::vector<double> q, k, v;     // n x d (q, k post-rope)
    std::vector<double> probs;       // n_heads x n x n softmax rows, zero above diagonal
    std::vector<double> ao;          // n x d, attention mix
    std::vector<double> x_mlp_in;    // n x d, residual entering mlp
    std::vector<double> mlp_xn;      // n x d, post mlp_norm
    std::vector<double> mlp_inv_rms; // n
    std::vector<double> up;          // n x d_ff, pre-silu
};

struct ForwardCache {
    EmbeddingSequence input; // copy, keeps token ids for embedding grads
    int n = 0;
    std::vector<LayerCache> layers;
    std::vector<double> x_final_in;    // n x d
    std::vector<double> final_inv_rms; // n
};

DecoderOutput forward_cached(const Model& model, const EmbeddingSequence& rows,
                             const LoraAdaptor* adaptor, ForwardCache& cache);

// gradient buffers mirroring Weights, same tensor names and order
struct GradLayer {
    std::vector<double> attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
};

struct WeightGrads {
    std::vector<double> embedding;
    std::vector<GradLayer> layers;
    std::vector<double> final_norm;
    std::vector<double> slots;

    static WeightGrads zeros_like(const Weights& w);
    void zero();
    std::vector<std::pair<std::string, std::vector<double>*>> tensor_list();
};

// gradients for one adaptor, parallel to adaptor.targets
struct LoraGrads {
    std::vector<std::vector<double>> da; // r x d_in each
    std::vector<std::vector<double>> db; // d_out x r each
    static LoraGrads zeros_like(const LoraAdaptor& adaptor);
    void zero();
};

// Seeds the backward pass with dL/dlogits and/or dL/dfinal_hidden (either may
// be empty). Accumulates parameter gradients into wg / lg when non-null and
// returns dL/d(input rows) so composed graphs (reconstruction through the
// compressor) can keep flowing.
std::vector<double> backward(const Model& model, const LoraAdaptor* adaptor,
                             const ForwardCache& cache, std::span<const double> dlogits,
                             std::span<const double> dhidden, WeightGrads* wg, LoraGrads* lg);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// mean cross-entropy over masked positions; fills dlogits (n x vocab, scaled
// by 1/n_masked) unless null. targets[i] < 0 marks an unmasked position.
double masked_cross_entropy(const DecoderOutput& out, std::span<const int> targets,
                            std::vector<double>* dlogits);

} // namespace lloco
