#include "lloco/model_grad.hpp"

#include <cmath>
#include <cstring>

namespace lloco {

static constexpr double kRmsEps = 1e-5;

namespace {

void matvec(const Mat& w, const double* x, double* y) {
    for (int r = 0; r < w.rows; ++r) {
        const float* wr = w.row(r);
        double acc = 0.0;
        for (int c = 0; c < w.cols; ++c) acc += double(wr[c]) * x[c];
        y[r] = acc;
    }
}

// dx[c] += sum_r W[r][c] * dy[r]
void matvec_t_acc(const Mat& w, const double* dy, double* dx) {
    for (int r = 0; r < w.rows; ++r) {
        const float* wr = w.row(r);
        double g = dy[r];
        for (int c = 0; c < w.cols; ++c) dx[c] += double(wr[c]) * g;
    }
}

// dW[r][c] += dy[r] * x[c]
void outer_acc(std::vector<double>& dw, int rows, int cols, const double* dy, const double* x) {
    for (int r = 0; r < rows; ++r) {
        double g = dy[r];
        double* row = dw.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) row[c] += g * x[c];
    }
}

double rmsnorm_fwd(const float* g, const double* x, double* out, int d) {
    double ss = 0.0;
    for (int i = 0; i < d; ++i) ss += x[i] * x[i];
    double r = 1.0 / std::sqrt(ss / d + kRmsEps);
    for (int i = 0; i < d; ++i) out[i] = x[i] * r * double(g[i]);
    return r;
}

// given dL/dy, x, r: accumulates dL/dg and dL/dx
void rmsnorm_bwd(const float* g, const double* x, double r, const double* dy, double* dg_acc,
                 double* dx_acc, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += dy[i] * double(g[i]) * x[i];
    double r3_over_d = r * r * r / d;
    for (int i = 0; i < d; ++i) {
        if (dg_acc) dg_acc[i] += dy[i] * x[i] * r;
        dx_acc[i] += r * double(g[i]) * dy[i] - r3_over_d * x[i] * s;
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

// ---------------------------------------------------------------------------
// cached forward
// ---------------------------------------------------------------------------

DecoderOutput forward_cached(const Model& model, const EmbeddingSequence& rows,
                             const LoraAdaptor* adaptor, ForwardCache& cache) {
    const ModelConfig& cfg = model.config();
    const Weights& w = model.weights();
    const int n = rows.size();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int nh = cfg.n_heads;
    const int dff = cfg.d_ff();

    DecoderOutput out;
    out.n = n;
    out.d_model = d;
    out.vocab_size = cfg.vocab_size;
    if (n == 0) return out;
    if (rows.dim != d) throw shape_error("input rows have wrong dimension");
    if (n > cfg.window)
        throw window_overflow_error("sequence length " + std::to_string(n) + " exceeds window " +
                                    std::to_string(cfg.window));

    cache.input = rows;
    cache.n = n;
    cache.layers.assign(cfg.n_layers, LayerCache{});

    std::vector<double> x(rows.data);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        const LoraTarget* lq = adaptor ? adaptor->find(l, Proj::query) : nullptr;
        const LoraTarget* lv = adaptor ? adaptor->find(l, Proj::value) : nullptr;
        LayerCache& lc = cache.layers[l];
        lc.x_att_in = x;
        lc.att_xn.resize(size_t(n) * d);
        lc.att_inv_rms.resize(n);
        lc.q.assign(size_t(n) * d, 0.0);
        lc.k.assign(size_t(n) * d, 0.0);
        lc.v.assign(size_t(n) * d, 0.0);
        lc.probs.assign(size_t(nh) * n * n, 0.0);
        lc.ao.assign(size_t(n) * d, 0.0);

        for (int i = 0; i < n; ++i) {
            const double* xi = x.data() + size_t(i) * d;
            double* xni = lc.att_xn.data() + size_t(i) * d;
            lc.att_inv_rms[i] = rmsnorm_fwd(lw.attn_norm.row(0), xi, xni, d);

            double* qi = lc.q.data() + size_t(i) * d;
            double* ki = lc.k.data() + size_t(i) * d;
            double* vi = lc.v.data() + size_t(i) * d;
            matvec(lw.wq, xni, qi);
            matvec(lw.wk, xni, ki);
            matvec(lw.wv, xni, vi);
            if (lq) {
                auto delta = apply_delta(*adaptor, *lq, std::span<const double>(xni, d));
                for (int c = 0; c < d; ++c) qi[c] += delta[c];
            }
            if (lv) {
                auto delta = apply_delta(*adaptor, *lv, std::span<const double>(xni, d));
                for (int c = 0; c < d; ++c) vi[c] += delta[c];
            }
            rope_rotate(qi, i, nh, hd, cfg.rope_base);
            rope_rotate(ki, i, nh, hd, cfg.rope_base);
        }

        const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));
        std::vector<double> scores(n);
        for (int h = 0; h < nh; ++h) {
            const int off = h * hd;
            for (int i = 0; i < n; ++i) {
                const double* qi = lc.q.data() + size_t(i) * d + off;
                double maxs = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = lc.k.data() + size_t(j) * d + off;
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    scores[j] = s;
                    if (s > maxs) maxs = s;
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - maxs);
                    z += scores[j];
                }
                double* prow = lc.probs.data() + (size_t(h) * n + i) * n;
                double* aoi = lc.ao.data() + size_t(i) * d + off;
                for (int j = 0; j <= i; ++j) {
                    double p = scores[j] / z;
                    prow[j] = p;
                    const double* vj = lc.v.data() + size_t(j) * d + off;
                    for (int c = 0; c < hd; ++c) aoi[c] += p * vj[c];
                }
            }
        }

        lc.x_mlp_in.resize(size_t(n) * d);
        lc.mlp_xn.resize(size_t(n) * d);
        lc.mlp_inv_rms.resize(n);
        lc.up.resize(size_t(n) * dff);
        std::vector<double> tmp(d);
        for (int i = 0; i < n; ++i) {
            matvec(lw.wo, lc.ao.data() + size_t(i) * d, tmp.data());
            double* xi = x.data() + size_t(i) * d;
            for (int c = 0; c < d; ++c) xi[c] += tmp[c];
            std::memcpy(lc.x_mlp_in.data() + size_t(i) * d, xi, sizeof(double) * d);

            double* xni = lc.mlp_xn.data() + size_t(i) * d;
            lc.mlp_inv_rms[i] = rmsnorm_fwd(lw.mlp_norm.row(0), xi, xni, d);
            double* upi = lc.up.data() + size_t(i) * dff;
            matvec(lw.w_up, xni, upi);
            std::vector<double> su(dff);
            for (int c = 0; c < dff; ++c) su[c] = upi[c] * sigmoid(upi[c]);
            matvec(lw.w_down, su.data(), tmp.data());
            for (int c = 0; c < d; ++c) xi[c] += tmp[c];
        }
    }

    cache.x_final_in = x;
    cache.final_inv_rms.resize(n);
    out.final_hidden.resize(size_t(n) * d);
    out.logits.resize(size_t(n) * cfg.vocab_size);
    for (int i = 0; i < n; ++i) {
        double* hf = out.final_hidden.data() + size_t(i) * d;
        cache.final_inv_rms[i] = rmsnorm_fwd(w.final_norm.row(0), x.data() + size_t(i) * d, hf, d);
        double* lg = out.logits.data() + size_t(i) * cfg.vocab_size;
        for (int t = 0; t < cfg.vocab_size; ++t) {
            const float* er = w.embedding.row(t);
            double acc = 0.0;
            for (int c = 0; c < d; ++c) acc += double(er[c]) * hf[c];
            lg[t] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// grad buffers
// ---------------------------------------------------------------------------

WeightGrads WeightGrads::zeros_like(const Weights& w) {
    WeightGrads g;
    g.embedding.assign(w.embedding.size(), 0.0);
    g.layers.resize(w.layers.size());
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& lw = w.layers[l];
        g.layers[l].attn_norm.assign(lw.attn_norm.size(), 0.0);
        g.layers[l].wq.assign(lw.wq.size(), 0.0);
        g.layers[l].wk.assign(lw.wk.size(), 0.0);
        g.layers[l].wv.assign(lw.wv.size(), 0.0);
        g.layers[l].wo.assign(lw.wo.size(), 0.0);
        g.layers[l].mlp_norm.assign(lw.mlp_norm.size(), 0.0);
        g.layers[l].w_up.assign(lw.w_up.size(), 0.0);
        g.layers[l].w_down.assign(lw.w_down.size(), 0.0);
    }
    g.final_norm.assign(w.final_norm.size(), 0.0);
    g.slots.assign(w.slots.size(), 0.0);
    return g;
}

void WeightGrads::zero() {
    auto z = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
    z(embedding);
    for (auto& l : layers) {
        z(l.attn_norm); z(l.wq); z(l.wk); z(l.wv);
        z(l.wo); z(l.mlp_norm); z(l.w_up); z(l.w_down);
    }
    z(final_norm);
    z(slots);
}

std::vector<std::pair<std::string, std::vector<double>*>> WeightGrads::tensor_list() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    out.emplace_back("tok_embedding", &embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", &layers[l].attn_norm);
        out.emplace_back(p + "wq", &layers[l].wq);
        out.emplace_back(p + "wk", &layers[l].wk);
        out.emplace_back(p + "wv", &layers[l].wv);
        out.emplace_back(p + "wo", &layers[l].wo);
        out.emplace_back(p + "mlp_norm", &layers[l].mlp_norm);
        out.emplace_back(p + "w_up", &layers[l].w_up);
        out.emplace_back(p + "w_down", &layers[l].w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("summary_slots", &slots);
    return out;
}

LoraGrads LoraGrads::zeros_like(const LoraAdaptor& adaptor) {
    LoraGrads g;
    g.da.resize(adaptor.targets.size());
    g.db.resize(adaptor.targets.size());
    for (size_t t = 0; t < adaptor.targets.size(); ++t) {
        g.da[t].assign(adaptor.targets[t].a.size(), 0.0);
        g.db[t].assign(adaptor.targets[t].b.size(), 0.0);
    }
    return g;
}

void LoraGrads::zero() {
    for (auto& v : da) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : db) std::fill(v.begin(), v.end(), 0.0);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

std::vector<double> backward(const Model& model, const LoraAdaptor* adaptor,
                             const ForwardCache& cache, std::span<const double> dlogits,
                             std::span<const double> dhidden, WeightGrads* wg, LoraGrads* lg) {
    const ModelConfig& cfg = model.config();
    const Weights& w = model.weights();
    const int n = cache.n;
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int nh = cfg.n_heads;
    const int dff = cfg.d_ff();
    const int V = cfg.vocab_size;

    if (n == 0) return {};
    if (!dlogits.empty() && static_cast<int>(dlogits.size()) != n * V)
        throw shape_error("dlogits size mismatch");
    if (!dhidden.empty() && static_cast<int>(dhidden.size()) != n * d)
        throw shape_error("dhidden size mismatch");

    // recompute final_hidden rows (needed for the tied-head embedding grad)
    std::vector<double> hf(size_t(n) * d);
    for (int i = 0; i < n; ++i) {
        double r = cache.final_inv_rms[i];
        const double* xi = cache.x_final_in.data() + size_t(i) * d;
        double* hfi = hf.data() + size_t(i) * d;
        for (int c = 0; c < d; ++c) hfi[c] = xi[c] * r * double(w.final_norm.at(0, c));
    }

    // dL/d final_hidden
    std::vector<double> dhf(size_t(n) * d, 0.0);
    if (!dhidden.empty())
        for (size_t i = 0; i < dhidden.size(); ++i) dhf[i] = dhidden[i];
    if (!dlogits.empty()) {
        for (int i = 0; i < n; ++i) {
            const double* dlg = dlogits.data() + size_t(i) * V;
            double* dhfi = dhf.data() + size_t(i) * d;
            const double* hfi = hf.data() + size_t(i) * d;
            for (int t = 0; t < V; ++t) {
                double g = dlg[t];
                if (g == 0.0) continue;
                const float* er = w.embedding.row(t);
                for (int c = 0; c < d; ++c) dhfi[c] += double(er[c]) * g;
                if (wg) {
                    double* de = wg->embedding.data() + size_t(t) * d;
                    for (int c = 0; c < d; ++c) de[c] += g * hfi[c];
                }
            }
        }
    }

    // final norm
    std::vector<double> dx(size_t(n) * d, 0.0);
    for (int i = 0; i < n; ++i)
        rmsnorm_bwd(w.final_norm.row(0), cache.x_final_in.data() + size_t(i) * d,
                    cache.final_inv_rms[i], dhf.data() + size_t(i) * d,
                    wg ? wg->final_norm.data() : nullptr, dx.data() + size_t(i) * d, d);

    const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));
    std::vector<double> dxn(d), dup(dff), dsu(dff), su(dff), tmp(d);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        const LayerCache& lc = cache.layers[l];
        GradLayer* gl = wg ? &wg->layers[l] : nullptr;
        const LoraTarget* lq = adaptor ? adaptor->find(l, Proj::query) : nullptr;
        const LoraTarget* lv = adaptor ? adaptor->find(l, Proj::value) : nullptr;
        int tq = -1, tv = -1;
        if (adaptor) {
            for (size_t t = 0; t < adaptor->targets.size(); ++t) {
                if (&adaptor->targets[t] == lq) tq = static_cast<int>(t);
                if (&adaptor->targets[t] == lv) tv = static_cast<int>(t);
            }
        }

        // ---- mlp backward; dx is the grad wrt the layer output
        for (int i = 0; i < n; ++i) {
            double* dxi = dx.data() + size_t(i) * d;
            const double* upi = lc.up.data() + size_t(i) * dff;
            for (int c = 0; c < dff; ++c) su[c] = upi[c] * sigmoid(upi[c]);
            // down proj
            if (gl) outer_acc(gl->w_down, d, dff, dxi, su.data());
            std::fill(dsu.begin(), dsu.end(), 0.0);
            matvec_t_acc(lw.w_down, dxi, dsu.data());
            // silu
            for (int c = 0; c < dff; ++c) {
                double s = sigmoid(upi[c]);
                dup[c] = dsu[c] * s * (1.0 + upi[c] * (1.0 - s));
            }
            // up proj
            const double* xni = lc.mlp_xn.data() + size_t(i) * d;
            if (gl) outer_acc(gl->w_up, dff, d, dup.data(), xni);
            std::fill(dxn.begin(), dxn.end(), 0.0);
            matvec_t_acc(lw.w_up, dup.data(), dxn.data());
            // norm; residual passthrough keeps dxi and adds the norm-path grad
            rmsnorm_bwd(lw.mlp_norm.row(0), lc.x_mlp_in.data() + size_t(i) * d, lc.mlp_inv_rms[i],
                        dxn.data(), gl ? gl->mlp_norm.data() : nullptr, dxi, d);
        }

        // ---- attention backward; dx is now the grad wrt x_mlp_in
        std::vector<double> dao(size_t(n) * d, 0.0);
        for (int i = 0; i < n; ++i) {
            const double* dxi = dx.data() + size_t(i) * d;
            if (gl) outer_acc(gl->wo, d, d, dxi, lc.ao.data() + size_t(i) * d);
            matvec_t_acc(lw.wo, dxi, dao.data() + size_t(i) * d);
        }

        std::vector<double> dq(size_t(n) * d, 0.0), dk(size_t(n) * d, 0.0), dv(size_t(n) * d, 0.0);
        std::vector<double> dp(n), ds(n);
        for (int h = 0; h < nh; ++h) {
            const int off = h * hd;
            for (int i = 0; i < n; ++i) {
                const double* prow = lc.probs.data() + (size_t(h) * n + i) * n;
                const double* daoi = dao.data() + size_t(i) * d + off;
                double pdsum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double* vj = lc.v.data() + size_t(j) * d + off;
                    double g = 0.0;
                    for (int c = 0; c < hd; ++c) g += daoi[c] * vj[c];
                    dp[j] = g;
                    pdsum += prow[j] * g;
                    double* dvj = dv.data() + size_t(j) * d + off;
                    double pij = prow[j];
                    for (int c = 0; c < hd; ++c) dvj[c] += pij * daoi[c];
                }
                double* dqi = dq.data() + size_t(i) * d + off;
                const double* qi = lc.q.data() + size_t(i) * d + off;
                for (int j = 0; j <= i; ++j) {
                    double dsij = prow[j] * (dp[j] - pdsum) * inv_sqrt_hd;
                    if (dsij == 0.0) continue;
                    const double* kj = lc.k.data() + size_t(j) * d + off;
                    double* dkj = dk.data() + size_t(j) * d + off;
                    for (int c = 0; c < hd; ++c) {
                        dqi[c] += dsij * kj[c];
                        dkj[c] += dsij * qi[c];
                    }
                }
            }
        }

        // un-rotate and push through the projections
        for (int i = 0; i < n; ++i) {
            double* dqi = dq.data() + size_t(i) * d;
            double* dki = dk.data() + size_t(i) * d;
            double* dvi = dv.data() + size_t(i) * d;
            rope_rotate(dqi, -i, nh, hd, cfg.rope_base);
            rope_rotate(dki, -i, nh, hd, cfg.rope_base);

            const double* xni = lc.att_xn.data() + size_t(i) * d;
            std::fill(dxn.begin(), dxn.end(), 0.0);
            if (gl) {
                outer_acc(gl->wq, d, d, dqi, xni);
                outer_acc(gl->wk, d, d, dki, xni);
                outer_acc(gl->wv, d, d, dvi, xni);
            }
            matvec_t_acc(lw.wq, dqi, dxn.data());
            matvec_t_acc(lw.wk, dki, dxn.data());
            matvec_t_acc(lw.wv, dvi, dxn.data());

            // low-rank branches share the projection output grad
            if (lq) {
                const int r = lq->a.rows;
                std::vector<double> u(r), du(r, 0.0);
                matvec(lq->a, xni, u.data());
                double s = adaptor->scale();
                for (int rr = 0; rr < r; ++rr) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c) acc += double(lq->b.at(c, rr)) * dqi[c];
                    du[rr] = s * acc;
                }
                if (lg && tq >= 0) {
                    auto& dbm = lg->db[tq];
                    for (int c = 0; c < d; ++c)
                        for (int rr = 0; rr < r; ++rr) dbm[size_t(c) * r + rr] += s * dqi[c] * u[rr];
                    auto& dam = lg->da[tq];
                    for (int rr = 0; rr < r; ++rr)
                        for (int c = 0; c < d; ++c) dam[size_t(rr) * d + c] += du[rr] * xni[c];
                }
                for (int rr = 0; rr < r; ++rr) {
                    const float* ar = lq->a.row(rr);
                    for (int c = 0; c < d; ++c) dxn[c] += double(ar[c]) * du[rr];
                }
            }
            if (lv) {
                const int r = lv->a.rows;
                std::vector<double> u(r), du(r, 0.0);
                matvec(lv->a, xni, u.data());
                double s = adaptor->scale();
                for (int rr = 0; rr < r; ++rr) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c) acc += double(lv->b.at(c, rr)) * dvi[c];
                    du[rr] = s * acc;
                }
                if (lg && tv >= 0) {
                    auto& dbm = lg->db[tv];
                    for (int c = 0; c < d; ++c)
                        for (int rr = 0; rr < r; ++rr) dbm[size_t(c) * r + rr] += s * dvi[c] * u[rr];
                    auto& dam = lg->da[tv];
                    for (int rr = 0; rr < r; ++rr)
                        for (int c = 0; c < d; ++c) dam[size_t(rr) * d + c] += du[rr] * xni[c];
                }
                for (int rr = 0; rr < r; ++rr) {
                    const float* ar = lv->a.row(rr);
                    for (int c = 0; c < d; ++c) dxn[c] += double(ar[c]) * du[rr];
                }
            }

            double* dxi = dx.data() + size_t(i) * d;
            rmsnorm_bwd(lw.attn_norm.row(0), lc.x_att_in.data() + size_t(i) * d, lc.att_inv_rms[i],
                        dxn.data(), gl ? gl->attn_norm.data() : nullptr, dxi, d);
        }
    }

    // dx is now the grad wrt the input rows; token rows also flow into the
    // embedding table
    if (wg) {
        for (int i = 0; i < n; ++i) {
            int t = cache.input.token_ids[i];
            if (t < 0) continue;
            double* de = wg->embedding.data() + size_t(t) * d;
            const double* dxi = dx.data() + size_t(i) * d;
            for (int c = 0; c < d; ++c) de[c] += dxi[c];
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

double masked_cross_entropy(const DecoderOutput& out, std::span<const int> targets,
                            std::vector<double>* dlogits) {
    const int n = out.n;
    const int V = out.vocab_size;
    if (static_cast<int>(targets.size()) != n) throw shape_error("targets size mismatch");
    if (dlogits) dlogits->assign(size_t(n) * V, 0.0);

    int masked = 0;
    for (int t : targets)
        if (t >= 0) ++masked;
    if (masked == 0) return 0.0;

    double loss = 0.0;
    std::vector<double> p(V);
    for (int i = 0; i < n; ++i) {
        int t = targets[i];
        if (t < 0) continue;
        if (t >= V) throw shape_error("target id outside vocab");
        const double* lg = out.logits_row(i);
        double maxl = lg[0];
        for (int c = 1; c < V; ++c) maxl = std::max(maxl, lg[c]);
        double z = 0.0;
        for (int c = 0; c < V; ++c) {
            p[c] = std::exp(lg[c] - maxl);
            z += p[c];
        }
        loss += -(lg[t] - maxl - std::log(z));
        if (dlogits) {
            double* dl = dlogits->data() + size_t(i) * V;
            for (int c = 0; c < V; ++c) dl[c] = (p[c] / z) / masked;
            dl[t] -= 1.0 / masked;
        }
    }
    return loss / masked;
}

} // namespace lloco
