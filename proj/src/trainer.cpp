#include "lloco/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lloco/common.hpp"

namespace lloco {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// data files
// ---------------------------------------------------------------------------

void save_examples_jsonl(const std::string& path, std::span<const TrainingExample> examples) {
    std::string out;
    for (const TrainingExample& ex : examples) {
        json j = {{"group_id", ex.group_id},
                  {"doc_id", ex.doc_id},
                  {"question", ex.question},
                  {"answer", ex.answer}};
        out += j.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<TrainingExample> load_examples_jsonl(const std::string& path) {
    std::vector<TrainingExample> out;
    std::istringstream in(read_text_file(path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            TrainingExample ex;
            ex.group_id = j.at("group_id").get<std::string>();
            ex.doc_id = j.at("doc_id").get<std::string>();
            ex.question = j.at("question").get<std::string>();
            ex.answer = j.at("answer").get<std::string>();
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw corrupt_file_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::string qa_prompt(const std::string& question) { return "Q: " + question + "\nA: "; }

// ---------------------------------------------------------------------------
// config and schedule
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (lr < 0) throw config_error("lr must be >= 0");
    if (weight_decay < 0) throw config_error("weight_decay must be >= 0");
    if (warmup_ratio < 0 || warmup_ratio > 1) throw config_error("warmup_ratio must be in [0,1]");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (grad_accum < 1) throw config_error("grad_accum must be >= 1");
    if (epochs < 0) throw config_error("epochs must be >= 0");
    if (rank < 1) throw config_error("rank must be >= 1");
    if (alpha <= 0) throw config_error("alpha must be > 0");
}

std::string TrainConfig::digest() const {
    std::ostringstream s;
    s << lr << '|' << weight_decay << '|' << warmup_ratio << '|' << batch_size << '|' << grad_accum
      << '|' << epochs << '|' << rank << '|' << alpha << '|' << seed;
    return hex64(fnv1a64(s.str(), 0xcbf29ce484222325ull));
}

static double lr_schedule(int step, double peak, double warmup_ratio, int total_steps) {
    if (total_steps <= 0) return 0.0;
    step = std::clamp(step, 0, total_steps);
    const int warmup = int(std::ceil(warmup_ratio * total_steps));
    if (step < warmup) return peak * double(step) / double(warmup);
    if (total_steps == warmup) return peak;
    const double t = double(step - warmup) / double(total_steps - warmup);
    return peak * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

double lr_at(int step, const TrainConfig& cfg, int total_steps) {
    return lr_schedule(step, cfg.lr, cfg.warmup_ratio, total_steps);
}

// ---------------------------------------------------------------------------
// sequence assembly
// ---------------------------------------------------------------------------

std::vector<int> TrainSequence::targets() const {
    const int pn = prefix.size();
    const int n = pn + static_cast<int>(tokens.size());
    std::vector<int> t(n, -1);
    for (int p = 0; p + 1 < n; ++p) {
        const int tok_index = p + 1 - pn; // token predicted at position p
        if (tok_index >= 0 && mask[tok_index]) t[p] = tokens[tok_index];
    }
    return t;
}

TrainSequence build_training_sequence(std::span<const SummaryEmbeddings> summaries,
                                      const std::string& question, const std::string& answer,
                                      int window) {
    TrainSequence seq;
    seq.prefix = summaries_as_rows(summaries);
    std::vector<int> prompt = tokenize(qa_prompt(question));
    std::vector<int> ans = tokenize(answer);
    seq.tokens = prompt;
    seq.tokens.insert(seq.tokens.end(), ans.begin(), ans.end());
    seq.mask.assign(seq.tokens.size(), 0);
    for (size_t i = prompt.size(); i < seq.tokens.size(); ++i) seq.mask[i] = 1;
    const int total = seq.prefix.size() + static_cast<int>(seq.tokens.size());
    if (total > window)
        throw window_overflow_error("training sequence of " + std::to_string(total) +
                                    " rows exceeds window " + std::to_string(window));
    return seq;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void adamw_step(std::span<float> w, std::span<const double> g, AdamWState& state, int step,
                double lr, double weight_decay) {
    if (w.size() != g.size() || w.size() != state.m.size())
        throw shape_error("optimizer buffers disagree in size");
    if (step < 1) throw config_error("optimizer step counts from 1");
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, step);
    const double c2 = 1.0 - std::pow(b2, step);
    for (size_t i = 0; i < w.size(); ++i) {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        const double wd = weight_decay * double(w[i]);
        w[i] = float(double(w[i]) - lr * (mhat / (std::sqrt(vhat) + eps) + wd));
    }
}

// ---------------------------------------------------------------------------
// logging
// ---------------------------------------------------------------------------

void save_train_log_csv(const std::string& path, std::span<const TrainLogRow> rows) {
    std::ostringstream out;
    out << "step,loss,lr,seconds\n";
    out.precision(10);
    for (const TrainLogRow& r : rows)
        out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.seconds << '\n';
    write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// adaptor training
// ---------------------------------------------------------------------------

namespace {

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

// flat views over every adaptor matrix, in target order (a then b)
struct AdaptorParams {
    std::vector<std::span<float>> tensors;
    std::vector<AdamWState> states;

    explicit AdaptorParams(LoraAdaptor& ad) {
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

} // namespace

LoraAdaptor train_group(const Model& model, const std::string& group_id,
                        std::span<const TrainingExample> examples, const SummaryLookup& summaries,
                        const TrainConfig& cfg, std::vector<TrainLogRow>* log) {
    cfg.validate();
    LoraAdaptor adaptor =
        init_adaptor(model.config(), group_id, default_lora_targets(model.config().n_layers),
                     cfg.rank, cfg.alpha, derive_seed(cfg.seed, "adaptor." + group_id));
    if (examples.empty() || cfg.epochs == 0) return adaptor;

    // sequences are static while the base stays frozen; build them once
    std::vector<TrainSequence> seqs;
    seqs.reserve(examples.size());
    for (const TrainingExample& ex : examples)
        seqs.push_back(build_training_sequence(summaries(ex.doc_id), ex.question, ex.answer,
                                               model.config().window));

    const int per_step = cfg.batch_size * cfg.grad_accum;
    const int steps_per_epoch = int((examples.size() + per_step - 1) / per_step);
    const int total_steps = cfg.epochs * steps_per_epoch;

    AdaptorParams params(adaptor);
    LoraGrads grads = LoraGrads::zeros_like(adaptor);
    Stopwatch clock;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(examples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(cfg.seed, "epoch." + std::to_string(epoch)));
        shuffle_indices(order, rng);

        size_t at = 0;
        while (at < order.size()) {
            const size_t take = std::min(size_t(per_step), order.size() - at);
            grads.zero();
            double loss_sum = 0.0;
            for (size_t s = 0; s < take; ++s) {
                const TrainSequence& seq = seqs[order[at + s]];
                EmbeddingSequence rows = seq.prefix;
                rows.append(model.embed_tokens(seq.tokens));
                ForwardCache cache;
                DecoderOutput out = forward_cached(model, rows, &adaptor, cache);
                std::vector<double> dlogits;
                const std::vector<int> targets = seq.targets();
                const double loss = masked_cross_entropy(out, targets, &dlogits);
                loss_sum += loss;
                for (double& v : dlogits) v /= double(take);
                backward(model, &adaptor, cache, dlogits, {}, nullptr, &grads);
            }
            at += take;
            ++step;
            const double lr = lr_at(step, cfg, total_steps);
            const double mean_loss = loss_sum / double(take);
            if (!std::isfinite(mean_loss))
                throw divergence_error("loss became non-finite at step " + std::to_string(step));
            params.apply(grads, step, lr, cfg.weight_decay);
            if (log) log->push_back({step, mean_loss, lr, clock.seconds()});
        }
    }
    return adaptor;
}

std::vector<TrainingExample> sample_with_caps(std::span<const TrainingExample> examples,
                                              const std::map<std::string, int>& group_caps,
                                              uint64_t seed) {
    // indices per group, in input order
    std::map<std::string, std::vector<size_t>> by_group;
    for (size_t i = 0; i < examples.size(); ++i) by_group[examples[i].group_id].push_back(i);

    std::vector<char> keep(examples.size(), 1);
    for (auto& [group, idx] : by_group) {
        auto cap_it = group_caps.find(group);
        if (cap_it == group_caps.end() || size_t(cap_it->second) >= idx.size()) continue;
        std::vector<size_t> pool = idx;
        Rng rng(derive_seed(seed, "cap." + group));
        shuffle_indices(pool, rng);
        for (size_t i : idx) keep[i] = 0;
        for (int s = 0; s < cap_it->second; ++s) keep[pool[s]] = 1;
    }
    std::vector<TrainingExample> out;
    for (size_t i = 0; i < examples.size(); ++i)
        if (keep[i]) out.push_back(examples[i]);
    return out;
}

LoraAdaptor train_combined(const Model& model, std::span<const TrainingExample> examples,
                           const SummaryLookup& summaries, const TrainConfig& cfg,
                           const std::map<std::string, int>& group_caps,
                           std::vector<TrainLogRow>* log) {
    std::vector<TrainingExample> sampled = sample_with_caps(examples, group_caps, cfg.seed);
    return train_group(model, "combined", sampled, summaries, cfg, log);
}

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<double()>& loss, std::span<float* const> params,
                           std::span<const double> analytic, double epsilon, int max_probes,
                           uint64_t seed) {
    if (params.size() != analytic.size())
        throw shape_error("grad_check: params and analytic gradients disagree");
    std::vector<size_t> idx(params.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_probes > 0 && size_t(max_probes) < idx.size()) {
        Rng rng(derive_seed(seed, "grad_check"));
        shuffle_indices(idx, rng);
        idx.resize(max_probes);
    }
    GradCheckResult res;
    for (size_t i : idx) {
        float* w = params[i];
        const float keep = *w;
        *w = float(double(keep) + epsilon);
        const double hi = loss();
        const double whi = double(*w);
        *w = float(double(keep) - epsilon);
        const double lo = loss();
        const double wlo = double(*w);
        *w = keep;
        const double fd = (hi - lo) / (whi - wlo);
        const double err =
            std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-8});
        res.max_rel_err = std::max(res.max_rel_err, err);
        ++res.probes;
    }
    return res;
}

GradCheckResult grad_check_adaptor(const Model& model, const TrainSequence& seq,
                                   LoraAdaptor& adaptor, double epsilon, int max_probes,
                                   uint64_t seed) {
    const std::vector<int> targets = seq.targets();
    auto loss = [&]() {
        EmbeddingSequence rows = seq.prefix;
        rows.append(model.embed_tokens(seq.tokens));
        ForwardCache cache;
        DecoderOutput out = forward_cached(model, rows, &adaptor, cache);
        return masked_cross_entropy(out, targets, nullptr);
    };

    LoraGrads grads = LoraGrads::zeros_like(adaptor);
    {
        EmbeddingSequence rows = seq.prefix;
        rows.append(model.embed_tokens(seq.tokens));
        ForwardCache cache;
        DecoderOutput out = forward_cached(model, rows, &adaptor, cache);
        std::vector<double> dlogits;
        masked_cross_entropy(out, targets, &dlogits);
        backward(model, &adaptor, cache, dlogits, {}, nullptr, &grads);
    }

    std::vector<float*> params;
    std::vector<double> analytic;
    for (size_t t = 0; t < adaptor.targets.size(); ++t) {
        for (size_t i = 0; i < adaptor.targets[t].a.size(); ++i) {
            params.push_back(adaptor.targets[t].a.w.data() + i);
            analytic.push_back(grads.da[t][i]);
        }
        for (size_t i = 0; i < adaptor.targets[t].b.size(); ++i) {
            params.push_back(adaptor.targets[t].b.w.data() + i);
            analytic.push_back(grads.db[t][i]);
        }
    }
    return grad_check(loss, params, analytic, epsilon, max_probes, seed);
}

// ---------------------------------------------------------------------------
// base pretraining
// ---------------------------------------------------------------------------

namespace {

// gradient buffers + optimizer state over every model tensor
struct ModelParams {
    std::vector<std::pair<std::string, Mat*>> tensors;
    std::vector<AdamWState> states;

    explicit ModelParams(Weights& w) : tensors(w.tensor_list()) {
        for (auto& t : tensors) states.emplace_back(t.second->size());
    }

    void apply(WeightGrads& g, int step, double lr, double wd) {
        auto grads = g.tensor_list();
        for (size_t t = 0; t < tensors.size(); ++t)
            adamw_step(tensors[t].second->w, *grads[t].second, states[t], step, lr, wd);
    }
};

// all-position next-token targets for a raw byte window
std::vector<int> lm_targets(std::span<const int> toks) {
    std::vector<int> t(toks.size(), -1);
    for (size_t p = 0; p + 1 < toks.size(); ++p) t[p] = toks[p + 1];
    return t;
}

// append k slot-embedding rows
void append_slots(EmbeddingSequence& rows, const Model& model, int k) {
    const Mat& slots = model.weights().slots;
    std::vector<double> row(rows.dim);
    for (int s = 0; s < k; ++s) {
        for (int c = 0; c < rows.dim; ++c) row[c] = double(slots.at(s, c));
        rows.append_raw(row, RowOrigin::summary);
    }
}

// compress one chunk with gradients flowing: returns the cache and the slot
// hidden rows
struct CompressPass {
    ForwardCache cache;
    std::vector<double> summary; // k x d
    int n = 0;
    int k = 0;
};

CompressPass compress_with_grad(const Model& model, std::span<const int> chunk,
                                const EmbeddingSequence& prior, int k) {
    const int d = model.config().d_model;
    EmbeddingSequence rows = prior;
    if (rows.dim == 0) rows.dim = d;
    rows.append(model.embed_tokens(chunk));
    append_slots(rows, model, k);
    CompressPass pass;
    pass.k = k;
    DecoderOutput out = forward_cached(model, rows, nullptr, pass.cache);
    pass.n = out.n;
    pass.summary.resize(size_t(k) * d);
    for (int s = 0; s < k; ++s)
        for (int c = 0; c < d; ++c)
            pass.summary[size_t(s) * d + c] = out.hidden_row(out.n - k + s)[c];
    return pass;
}

} // namespace

void pretrain_base(Model& model, std::span<const std::string> corpus, const PretrainConfig& cfg,
                   std::vector<TrainLogRow>* log) {
    if (cfg.steps < 0) throw config_error("steps must be >= 0");
    if (corpus.empty() && cfg.steps > 0) throw config_error("pretraining needs a corpus");
    if (cfg.chunk_curriculum_min < 0) throw config_error("chunk_curriculum_min must be >= 0");
    cfg.comp.validate();
    const ModelConfig& mc = model.config();
    const int d = mc.d_model;
    const int k = cfg.comp.summary_count;
    const int L = cfg.comp.chunk_length;
    if (model.n_slots() < k) throw config_error("model has too few summary slots");
    if (L + k > mc.window) throw config_error("chunk plus slots exceed the window");

    // pre-tokenize once
    std::vector<std::vector<int>> docs;
    docs.reserve(corpus.size());
    for (const std::string& text : corpus) docs.push_back(tokenize(text));

    ModelParams params(model.weights());
    WeightGrads grads = WeightGrads::zeros_like(model.weights());
    Rng rng(derive_seed(cfg.seed, "pretrain"));
    Stopwatch clock;

    for (int step = 1; step <= cfg.steps; ++step) {
        grads.zero();
        double loss_sum = 0.0;
        const double inv_batch = 1.0 / double(cfg.batch);
        for (int s = 0; s < cfg.batch; ++s) {
            const std::vector<int>& doc = docs[rng.below(docs.size())];
            const int objective = s % 4;
            if (objective <= 1 || static_cast<int>(doc.size()) < L + 2) {
                // plain next-byte prediction over a random crop
                const int crop = std::min<int>(cfg.lm_crop, int(doc.size()));
                if (crop < 2) continue;
                const int start = int(rng.below(doc.size() - crop + 1));
                std::span<const int> window(doc.data() + start, size_t(crop));
                EmbeddingSequence rows = model.embed_tokens(window);
                ForwardCache cache;
                DecoderOutput out = forward_cached(model, rows, nullptr, cache);
                std::vector<double> dlogits;
                const double loss = masked_cross_entropy(out, lm_targets(window), &dlogits);
                loss_sum += loss;
                for (double& v : dlogits) v *= inv_batch;
                backward(model, nullptr, cache, dlogits, {}, &grads, nullptr);
                continue;
            }

            // compression objectives need at least one aligned chunk
            int chunk_len = L;
            if (cfg.chunk_curriculum_min > 0 && cfg.chunk_curriculum_min < L) {
                // doubling ladder from the floor up to the full chunk length
                std::vector<int> ladder;
                for (int v = cfg.chunk_curriculum_min; v < L; v *= 2) ladder.push_back(v);
                ladder.push_back(L);
                chunk_len = ladder[rng.below(ladder.size())];
            }
            auto chunks = chunk_document(doc, chunk_len);
            if (chunks.back().size() < size_t(chunk_len)) chunks.pop_back();
            const size_t n_chunks = chunks.size();

            EmbeddingSequence prior(d);
            size_t target_chunk;
            if (objective == 2 || n_chunks < 2) {
                // reconstruct a chunk from its own summaries
                target_chunk = rng.below(n_chunks);
            } else {
                // reconstruct the next chunk from accumulated summaries; the
                // pair is chosen first, then earlier summaries are built
                // without gradients
                target_chunk = 1 + rng.below(n_chunks - 1);
            }
            const size_t compress_chunk_i = (objective == 2 || n_chunks < 2)
                                                ? target_chunk
                                                : target_chunk - 1;
            const int cap = cfg.comp.conditioning_cap(mc.window);
            // rows older than the cap are erased below, so summaries of chunks
            // that could never survive it are not worth building
            const size_t keep_chunks = size_t((cap + k - 1) / k);
            const size_t prior_start =
                compress_chunk_i > keep_chunks ? compress_chunk_i - keep_chunks : 0;
            for (size_t i = prior_start; i < compress_chunk_i; ++i) {
                EmbeddingSequence in = prior;
                in.append(model.embed_tokens(chunks[i]));
                append_slots(in, model, k);
                DecoderOutput out = model.forward_rows(in, nullptr);
                for (int slot = 0; slot < k; ++slot)
                    prior.append_raw(
                        std::span<const double>(out.hidden_row(out.n - k + slot), d),
                        RowOrigin::summary);
                // keep only the most recent conditioning rows
                while (prior.size() > cap) {
                    prior.data.erase(prior.data.begin(), prior.data.begin() + d);
                    prior.origin.erase(prior.origin.begin());
                    prior.token_ids.erase(prior.token_ids.begin());
                }
            }

            CompressPass pass1 = compress_with_grad(model, chunks[compress_chunk_i], prior, k);

            // second pass: [prior; fresh summary; target chunk bytes]
            std::span<const int> tail = (objective == 2 || n_chunks < 2)
                                            ? std::span<const int>(chunks[compress_chunk_i])
                                            : std::span<const int>(chunks[target_chunk]);
            EmbeddingSequence rows2 = prior;
            for (int r = 0; r < k; ++r)
                rows2.append_raw(std::span<const double>(pass1.summary.data() + size_t(r) * d, d),
                                 RowOrigin::summary);
            rows2.append(model.embed_tokens(tail));
            const int ctx = rows2.size() - static_cast<int>(tail.size());
            ForwardCache cache2;
            DecoderOutput out2 = forward_cached(model, rows2, nullptr, cache2);
            // predict every byte of the tail, starting from the last context row
            std::vector<int> targets(out2.n, -1);
            for (size_t j = 0; j < tail.size(); ++j) targets[ctx - 1 + j] = tail[j];
            std::vector<double> dlogits;
            const double loss = masked_cross_entropy(out2, targets, &dlogits);
            loss_sum += loss;
            for (double& v : dlogits) v *= inv_batch;
            std::vector<double> d_input2 =
                backward(model, nullptr, cache2, dlogits, {}, &grads, nullptr);

            // flow the summary-row gradients back through the compression pass;
            // rows before the fresh summary are held constant
            std::vector<double> dh1(size_t(pass1.n) * d, 0.0);
            const int sum_at2 = prior.size(); // fresh summary rows start here in pass 2
            const int slot_at1 = pass1.n - k; // and were read from these rows in pass 1
            for (int r = 0; r < k; ++r)
                for (int c = 0; c < d; ++c)
                    dh1[size_t(slot_at1 + r) * d + c] = d_input2[size_t(sum_at2 + r) * d + c];
            std::vector<double> d_input1 =
                backward(model, nullptr, pass1.cache, {}, dh1, &grads, nullptr);
            // slot-embedding gradients arrive as input-row gradients
            for (int r = 0; r < k; ++r)
                for (int c = 0; c < d; ++c)
                    grads.slots[size_t(r) * d + c] += d_input1[size_t(slot_at1 + r) * d + c];
        }

        const double mean_loss = loss_sum / double(cfg.batch);
        if (!std::isfinite(mean_loss))
            throw divergence_error("pretraining loss became non-finite at step " +
                                   std::to_string(step));
        const double lr = lr_schedule(step, cfg.lr, cfg.warmup_ratio, cfg.steps);
        params.apply(grads, step, lr, cfg.weight_decay);
        if (log) log->push_back({step, mean_loss, lr, clock.seconds()});
    }
}

ReconstructionProbe reconstruction_probe(const Model& model, std::span<const std::string> docs,
                                         const CompressionConfig& comp) {
    comp.validate();
    ReconstructionProbe probe;
    int counted = 0;
    for (const std::string& text : docs) {
        std::vector<int> toks = tokenize(text);
        auto entries = compress_document(model, toks, comp);
        auto chunks = chunk_document(toks, comp.chunk_length);
        const int cap = comp.conditioning_cap(model.config().window);
        EmbeddingSequence prior(model.config().d_model);
        for (size_t i = 0; i < chunks.size(); ++i) {
            // context = summaries of chunks up to and including this one
            for (int r = 0; r < entries[i].k(); ++r)
                prior.append_raw(
                    std::span<const double>(entries[i].row(r), entries[i].d_model),
                    RowOrigin::summary);
            while (prior.size() > cap) {
                prior.data.erase(prior.data.begin(), prior.data.begin() + prior.dim);
                prior.origin.erase(prior.origin.begin());
                prior.token_ids.erase(prior.token_ids.begin());
            }

            EmbeddingSequence rows = prior;
            rows.append(model.embed_tokens(chunks[i]));
            const int ctx = rows.size() - static_cast<int>(chunks[i].size());
            DecoderOutput with = model.forward_rows(rows, nullptr);
            std::vector<int> targets(with.n, -1);
            for (size_t j = 0; j < chunks[i].size(); ++j) targets[ctx - 1 + j] = chunks[i][j];
            probe.with_summaries += masked_cross_entropy(with, targets, nullptr);

            EmbeddingSequence bare = model.embed_tokens(chunks[i]);
            DecoderOutput without = model.forward_rows(bare, nullptr);
            std::vector<int> bare_targets(without.n, -1);
            for (size_t j = 1; j < chunks[i].size(); ++j) bare_targets[j - 1] = chunks[i][j];
            probe.without += masked_cross_entropy(without, bare_targets, nullptr);
            ++counted;
        }
    }
    if (counted > 0) {
        probe.with_summaries /= counted;
        probe.without /= counted;
    }
    return probe;
}

} // namespace lloco
