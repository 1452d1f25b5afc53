#pragma once
// Test-only oracles, written independently of the library paths they check:
// central finite differences, a literal MAC-counting FLOP counter, a direct
// transcription of the latency recursion, a plain Lloyd k-means, extended
// precision KLD/score formulas, and a plain FedAvg mean.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "splitgan/cut_optimizer.hpp"
#include "splitgan/latency_model.hpp"
#include "splitgan/model_graph.hpp"
#include "splitgan/rng.hpp"
#include "splitgan/tensor.hpp"

namespace oracles {

using namespace splitgan;

// ---------------------------------------------------------------------------
// Finite differences

// probe loss: fixed random projection of the outputs, averaged (double)
inline double probe_loss(const Tensor& y, const std::vector<double>& w) {
    double acc = 0;
    for (int64_t i = 0; i < y.numel(); ++i) acc += w[size_t(i)] * double(y.data[i]);
    return acc / double(y.numel());
}

struct FdResult {
    double max_rel_err = 0;
    int64_t checked = 0;
};

inline double rel_err(double fd, double an) {
    double denom = std::max({1.0, std::fabs(fd), std::fabs(an)});
    return std::fabs(fd - an) / denom;
}

// Central finite differences over every parameter and the input of a block
// range, against backward_blocks.  Step h is applied in float, with the
// realized step recovered in double.
inline FdResult finite_difference_check(const NetworkProfile& net, SegmentStore& store,
                                        int first, int last, const Tensor& input,
                                        const std::vector<int>& labels, int classes,
                                        double h, uint64_t seed) {
    Rng rng(seed);
    Tensor out0 = forward_blocks(net, store, first, last, input, labels, classes, true,
                                 nullptr);
    std::vector<double> w(size_t(out0.numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);

    // analytic gradients
    for (auto& b : store.blocks) {
        b.for_each_trainable([](const char*, Tensor&, Tensor& g) {
            std::fill(g.data.begin(), g.data.end(), 0.0f);
        });
    }
    ForwardCache cache;
    Tensor out = forward_blocks(net, store, first, last, input, labels, classes, true,
                                &cache);
    Tensor dy(out.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        dy.data[i] = float(w[size_t(i)] / double(out.numel()));
    Tensor input_grad = backward_blocks(net, store, cache, dy, true);

    FdResult res;
    auto probe = [&](float* slot, double analytic) {
        float orig = *slot;
        float xp = float(double(orig) + h), xm = float(double(orig) - h);
        *slot = xp;
        double lp = probe_loss(
            forward_blocks(net, store, first, last, input, labels, classes, true, nullptr),
            w);
        *slot = xm;
        double lm = probe_loss(
            forward_blocks(net, store, first, last, input, labels, classes, true, nullptr),
            w);
        *slot = orig;
        double delta = double(xp) - double(xm);
        double fd = (lp - lm) / delta;
        res.max_rel_err = std::max(res.max_rel_err, rel_err(fd, analytic));
        ++res.checked;
    };

    for (auto& b : store.blocks) {
        b.for_each_trainable([&](const char*, Tensor& p, Tensor& g) {
            for (int64_t i = 0; i < p.numel(); ++i) probe(&p.data[i], double(g.data[i]));
        });
    }
    Tensor in_copy = input;
    for (int64_t i = 0; i < in_copy.numel(); ++i) {
        float orig = in_copy.data[i];
        float xp = float(double(orig) + h), xm = float(double(orig) - h);
        in_copy.data[i] = xp;
        double lp = probe_loss(forward_blocks(net, store, first, last, in_copy, labels,
                                              classes, true, nullptr),
                               w);
        in_copy.data[i] = xm;
        double lm = probe_loss(forward_blocks(net, store, first, last, in_copy, labels,
                                              classes, true, nullptr),
                               w);
        in_copy.data[i] = orig;
        double fd = (lp - lm) / (double(xp) - double(xm));
        res.max_rel_err = std::max(res.max_rel_err, rel_err(fd, double(input_grad.data[i])));
        ++res.checked;
    }
    return res;
}

// Central differences are only valid away from relu/leaky kinks; callers
// reroll seeds until every piecewise-linear unit has a safe margin.
inline double min_abs_preactivation(const NetworkProfile& net, SegmentStore& store,
                                    int first, int last, const Tensor& input,
                                    const std::vector<int>& labels, int classes) {
    ForwardCache cache;
    forward_blocks(net, store, first, last, input, labels, classes, true, &cache);
    double m = std::numeric_limits<double>::infinity();
    for (const auto& e : cache.entries)
        if (e.kind == LayerKind::relu || e.kind == LayerKind::leaky_relu)
            for (float v : e.t0.data) m = std::min(m, double(std::fabs(v)));
    return m;
}

// ---------------------------------------------------------------------------
// Literal MAC counting for conv layers: walk every output element and count
// two FLOPs per multiply-accumulate actually performed.

inline int64_t conv_flops_by_counting(int in_ch, int out_ch, int k, int stride, int pad,
                                      int h_in, int w_in) {
    int h_out = (h_in + 2 * pad - k) / stride + 1;
    int w_out = (w_in + 2 * pad - k) / stride + 1;
    int64_t macs = 0;
    for (int co = 0; co < out_ch; ++co)
        for (int oh = 0; oh < h_out; ++oh)
            for (int ow = 0; ow < w_out; ++ow)
                for (int ci = 0; ci < in_ch; ++ci)
                    for (int kh = 0; kh < k; ++kh)
                        for (int kw = 0; kw < k; ++kw) ++macs;  // padded taps included
    return 2 * macs;
}

inline int64_t convt_flops_by_counting(int in_ch, int out_ch, int k, int stride, int pad,
                                       int h_in, int w_in) {
    int64_t macs = 0;
    for (int ci = 0; ci < in_ch; ++ci)
        for (int hi = 0; hi < h_in; ++hi)
            for (int wi = 0; wi < w_in; ++wi)
                for (int co = 0; co < out_ch; ++co)
                    for (int kh = 0; kh < k; ++kh)
                        for (int kw = 0; kw < k; ++kw) ++macs;
    return 2 * macs;
}

// ---------------------------------------------------------------------------
// Direct transcription of the latency recursion (independent of
// latency_model's cumulative/total_latency internals).

struct TranscribedLatency {
    double l_g_f = 0, l_g_b = 0, l_d_f = 0, l_d_b = 0, l_total = 0;
    std::vector<double> sf[2], sb[2];  // S vectors per network
};

inline TranscribedLatency transcribe_latency(const Fleet& fleet, const ModelProfile& p,
                                             const CutAssignment& cuts) {
    TranscribedLatency out;
    int b = fleet.batch;
    for (int net = 0; net < 2; ++net) {
        const NetworkProfile& np = net == 0 ? p.gen : p.disc;
        int n = np.n();
        size_t K = fleet.clients.size();
        auto gammaF = [&](int i) { return double(np.block(i).flops_fwd); };
        auto gammaB = [&](int i) { return double(np.block(i).flops_bwd()); };
        auto xi = [&](int boundary) { return double(np.act_bytes(boundary)); };

        std::vector<double> headF(K, 0), headB(K, 0), tailF(K, 0), tailB(K, 0);
        std::vector<double> upF(K, 0), upB(K, 0), dnF(K, 0), dnB(K, 0);
        for (size_t k = 0; k < K; ++k) {
            int lh = net == 0 ? cuts[k].g_head : cuts[k].d_head;
            int lt = net == 0 ? cuts[k].g_tail : cuts[k].d_tail;
            double fk = fleet.clients[k].dev.freq_hz * fleet.clients[k].dev.flops_per_cycle;
            for (int i = 1; i <= lh; ++i) {
                headF[k] += b * gammaF(i) / fk;
                headB[k] += b * gammaB(i) / fk;
            }
            for (int i = lt; i <= n; ++i) {
                tailF[k] += b * gammaF(i) / fk;
                tailB[k] += b * gammaB(i) / fk;
            }
            upF[k] = b * xi(lh) / fleet.clients[k].dev.rate;
            upB[k] = b * xi(lt - 1) / fleet.clients[k].dev.rate;
            dnF[k] = b * xi(lt - 1) / fleet.server.rate;
            dnB[k] = b * xi(lh) / fleet.server.rate;
        }
        std::vector<int> N(size_t(n) + 2, 0);
        for (size_t k = 0; k < K; ++k) {
            int lh = net == 0 ? cuts[k].g_head : cuts[k].d_head;
            int lt = net == 0 ? cuts[k].g_tail : cuts[k].d_tail;
            for (int i = lh + 1; i <= lt - 1; ++i) ++N[size_t(i)];
        }
        double fs = fleet.server.freq_hz * fleet.server.flops_per_cycle;

        std::vector<double> SF(size_t(n) + 1, 0), SB(size_t(n) + 2, 0);
        for (int i = 1; i <= n; ++i) {
            double v = SF[size_t(i) - 1] + (b * gammaF(i) / fs) * N[size_t(i)];
            for (size_t k = 0; k < K; ++k) {
                int lh = net == 0 ? cuts[k].g_head : cuts[k].d_head;
                if (lh == i) v = std::max(v, headF[k] + upF[k]);
            }
            SF[size_t(i)] = v;
        }
        for (int i = n; i >= 1; --i) {
            double v = SB[size_t(i) + 1] + (b * gammaB(i) / fs) * N[size_t(i)];
            for (size_t k = 0; k < K; ++k) {
                int lt = net == 0 ? cuts[k].g_tail : cuts[k].d_tail;
                if (lt == i) v = std::max(v, tailB[k] + upB[k]);
            }
            SB[size_t(i)] = v;
        }
        double lf = 0, lb = 0;
        for (size_t k = 0; k < K; ++k) {
            int lh = net == 0 ? cuts[k].g_head : cuts[k].d_head;
            int lt = net == 0 ? cuts[k].g_tail : cuts[k].d_tail;
            lf = std::max(lf, SF[size_t(lt) - 1] + dnF[k] + tailF[k]);
            lb = std::max(lb, SB[size_t(lh) + 1] + dnB[k] + headB[k]);
        }
        out.sf[net] = SF;
        out.sb[net] = SB;
        if (net == 0) {
            out.l_g_f = lf;
            out.l_g_b = lb;
        } else {
            out.l_d_f = lf;
            out.l_d_b = lb;
        }
    }
    out.l_total = out.l_g_f + out.l_g_b + 3.0 * (out.l_d_f + out.l_d_b);
    return out;
}

// ---------------------------------------------------------------------------
// Plain Lloyd iteration with random restarts (no k-means++), long-double KLD,
// and a literal score transcription.

inline double lloyd_best_inertia(const std::vector<std::vector<double>>& pts, int k,
                                 uint64_t seed, int restarts = 50, int iters = 200) {
    Rng rng(seed);
    size_t n = pts.size(), dim = pts[0].size();
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        std::vector<std::vector<double>> centers;
        std::vector<int> chosen;
        while (int(chosen.size()) < k) {
            int c = rng.uniform_int(0, int(n) - 1);
            bool dup = false;
            for (int x : chosen) dup = dup || x == c;
            if (!dup) chosen.push_back(c);
        }
        for (int c : chosen) centers.push_back(pts[size_t(c)]);
        std::vector<int> lab(n, 0);
        for (int it = 0; it < iters; ++it) {
            bool moved = false;
            for (size_t i = 0; i < n; ++i) {
                int bi = 0;
                double bd = std::numeric_limits<double>::infinity();
                for (int c = 0; c < k; ++c) {
                    double d = 0;
                    for (size_t j = 0; j < dim; ++j) {
                        double t = pts[i][j] - centers[size_t(c)][j];
                        d += t * t;
                    }
                    if (d < bd) {
                        bd = d;
                        bi = c;
                    }
                }
                if (lab[i] != bi) {
                    lab[i] = bi;
                    moved = true;
                }
            }
            std::vector<std::vector<double>> sum(size_t(k), std::vector<double>(dim, 0));
            std::vector<int> cnt(size_t(k), 0);
            for (size_t i = 0; i < n; ++i) {
                ++cnt[size_t(lab[i])];
                for (size_t j = 0; j < dim; ++j) sum[size_t(lab[i])][j] += pts[i][j];
            }
            for (int c = 0; c < k; ++c)
                if (cnt[size_t(c)])
                    for (size_t j = 0; j < dim; ++j)
                        centers[size_t(c)][j] = sum[size_t(c)][j] / cnt[size_t(c)];
            if (!moved) break;
        }
        double inertia = 0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < dim; ++j) {
                double t = pts[i][j] - centers[size_t(lab[i])][j];
                inertia += t * t;
            }
        best = std::min(best, inertia);
    }
    return best;
}

inline long double kld_ld(const std::vector<double>& P, const std::vector<double>& Q) {
    long double acc = 0;
    for (size_t i = 0; i < P.size(); ++i) {
        if (P[i] <= 0) continue;
        long double q = Q[i] < 1e-12 ? (long double)1e-12 : (long double)Q[i];
        acc += (long double)P[i] * std::log((long double)P[i] / q);
    }
    return acc;
}

// literal transcription of the score equations in long double
inline std::vector<double> scores_ld(const std::vector<std::vector<double>>& P,
                                     const std::vector<int64_t>& n, double beta) {
    size_t m = P.size();
    std::vector<long double> klds(m, 0);
    for (size_t k = 0; k < m; ++k) {
        std::vector<double> pj(P[k].size(), 0);
        for (size_t x = 0; x < m; ++x)
            if (x != k)
                for (size_t i = 0; i < pj.size(); ++i) pj[i] += P[x][i];
        for (auto& v : pj) v /= double(m - 1);
        klds[k] = kld_ld(P[k], pj);
    }
    long double denom = 0;
    for (size_t k = 0; k < m; ++k)
        denom += (long double)n[k] * std::exp(-(long double)beta * klds[k]);
    std::vector<double> s(m);
    for (size_t k = 0; k < m; ++k)
        s[k] = double((long double)n[k] * std::exp(-(long double)beta * klds[k]) / denom);
    return s;
}

// plain FedAvg mean of aligned float arrays
inline std::vector<float> fedavg_mean(const std::vector<std::vector<float>>& members) {
    std::vector<float> out(members[0].size(), 0.0f);
    for (size_t i = 0; i < out.size(); ++i) {
        double acc = 0;
        for (const auto& m : members) acc += double(m[i]);
        out[i] = float(acc / double(members.size()));
    }
    return out;
}

// random valid cut assignment
inline CutAssignment random_cuts(const ModelProfile& p, int clients, Rng& rng) {
    CutAssignment cuts;
    for (int k = 0; k < clients; ++k) {
        CutQuad q;
        q.g_head = rng.uniform_int(1, p.gen.mid() - 1);
        q.g_tail = rng.uniform_int(p.gen.mid() + 1, p.gen.n());
        q.d_head = rng.uniform_int(1, p.disc.mid() - 1);
        q.d_tail = rng.uniform_int(p.disc.mid() + 1, p.disc.n());
        cuts.push_back(q);
    }
    return cuts;
}

}  // namespace oracles
