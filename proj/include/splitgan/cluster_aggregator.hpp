#pragma once
// Clustered federated aggregation: KMeans over middle-layer discriminator
// activations, softmax + KLD scoring, per-cluster client-side aggregation and
// global server-side aggregation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "splitgan/errors.hpp"
#include "splitgan/rng.hpp"
#include "splitgan/split_engine.hpp"

namespace splitgan {

constexpr double kDistEps = 1e-12;

// sum P(i) * log(P(i)/Q(i)); 0*log(0/q) = 0; Q clamped below at kDistEps
inline double kld(const std::vector<double>& P, const std::vector<double>& Q) {
    if (P.size() != Q.size())
        throw InvariantError("kld: length mismatch " + std::to_string(P.size()) + " vs " +
                             std::to_string(Q.size()));
    double acc = 0;
    for (size_t i = 0; i < P.size(); ++i) {
        if (P[i] <= 0) continue;
        acc += P[i] * std::log(P[i] / std::max(Q[i], kDistEps));
    }
    return acc < 0 ? 0.0 : acc;
}

inline std::vector<double> softmax(const std::vector<double>& v) {
    double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double sum = 0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (auto& x : out) x /= sum;
    return out;
}

// ---------------------------------------------------------------------------
// KMeans (k-means++ seeding, 10 restarts, 300 Lloyd iterations, best inertia)

struct KMeansResult {
    std::vector<int> labels;
    std::vector<std::vector<double>> centers;
    double inertia = 0;
};

namespace detail {

inline double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double t = a[i] - b[i];
        d += t * t;
    }
    return d;
}

inline KMeansResult lloyd_once(const std::vector<std::vector<double>>& pts, int k,
                               Rng& rng, int max_iter) {
    size_t n = pts.size(), dim = pts[0].size();
    // k-means++ seeding
    std::vector<std::vector<double>> centers;
    centers.push_back(pts[size_t(rng.uniform_int(0, int(n) - 1))]);
    std::vector<double> d2(n);
    while (int(centers.size()) < k) {
        double total = 0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centers) best = std::min(best, sqdist(pts[i], c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0) {
            centers.push_back(pts[size_t(rng.uniform_int(0, int(n) - 1))]);
            continue;
        }
        double pick = rng.uniform() * total;
        size_t chosen = n - 1;
        double acc = 0;
        for (size_t i = 0; i < n; ++i) {
            acc += d2[i];
            if (acc >= pick) {
                chosen = i;
                break;
            }
        }
        centers.push_back(pts[chosen]);
    }

    std::vector<int> labels(n, 0);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double d = sqdist(pts[i], centers[size_t(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (labels[i] != best) {
                labels[i] = best;
                changed = true;
            }
        }
        std::vector<std::vector<double>> sums(size_t(k), std::vector<double>(dim, 0.0));
        std::vector<int> counts(size_t(k), 0);
        for (size_t i = 0; i < n; ++i) {
            ++counts[size_t(labels[i])];
            for (size_t d = 0; d < dim; ++d) sums[size_t(labels[i])][d] += pts[i][d];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[size_t(c)] == 0) {
                // re-seed an empty cluster on the farthest point
                size_t far = 0;
                double fd = -1;
                for (size_t i = 0; i < n; ++i) {
                    double d = sqdist(pts[i], centers[size_t(labels[i])]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                centers[size_t(c)] = pts[far];
                changed = true;
            } else {
                for (size_t d = 0; d < dim; ++d)
                    centers[size_t(c)][d] = sums[size_t(c)][d] / counts[size_t(c)];
            }
        }
        if (!changed) break;
    }
    KMeansResult res;
    res.labels = std::move(labels);
    res.centers = std::move(centers);
    res.inertia = 0;
    for (size_t i = 0; i < n; ++i)
        res.inertia += sqdist(pts[i], res.centers[size_t(res.labels[i])]);
    return res;
}

}  // namespace detail

inline KMeansResult kmeans_cluster(const std::vector<std::vector<double>>& pts, int k,
                                   uint64_t seed, int restarts = 10, int max_iter = 300) {
    if (pts.empty() || k < 1) throw InvariantError("kmeans: need points and k >= 1");
    if (k > int(pts.size()))
        throw InvariantError("kmeans: k=" + std::to_string(k) + " exceeds " +
                             std::to_string(pts.size()) + " points");
    Rng rng(mix_seed(seed, 0x4b6dULL));
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        KMeansResult cur = detail::lloyd_once(pts, k, rng, max_iter);
        if (cur.inertia < best.inertia) best = std::move(cur);
    }
    return best;
}

// chance-corrected agreement between two labelings
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw InvariantError("ari: length mismatch");
    auto relabel = [](const std::vector<int>& v) {
        std::map<int, int> m;
        std::vector<int> out(v.size());
        for (size_t i = 0; i < v.size(); ++i) {
            auto [it, fresh] = m.emplace(v[i], int(m.size()));
            out[i] = it->second;
        }
        return std::pair(out, int(m.size()));
    };
    auto [ra, ka] = relabel(a);
    auto [rb, kb] = relabel(b);
    std::vector<std::vector<int64_t>> c(size_t(ka), std::vector<int64_t>(size_t(kb), 0));
    for (size_t i = 0; i < ra.size(); ++i) ++c[size_t(ra[i])][size_t(rb[i])];
    auto comb2 = [](int64_t x) { return double(x) * double(x - 1) / 2.0; };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (int i = 0; i < ka; ++i) {
        int64_t row = 0;
        for (int j = 0; j < kb; ++j) {
            sum_ij += comb2(c[size_t(i)][size_t(j)]);
            row += c[size_t(i)][size_t(j)];
        }
        sum_a += comb2(row);
    }
    for (int j = 0; j < kb; ++j) {
        int64_t col = 0;
        for (int i = 0; i < ka; ++i) col += c[size_t(i)][size_t(j)];
        sum_b += comb2(col);
    }
    double total = comb2(int64_t(ra.size()));
    double expected = sum_a * sum_b / total;
    double maxi = 0.5 * (sum_a + sum_b);
    if (maxi == expected) return 1.0;
    return (sum_ij - expected) / (maxi - expected);
}

// ---------------------------------------------------------------------------
// Scores

struct MemberScore {
    double kld_value = 0;
    double score = 0;
};

// s_k = n_k e^{-beta KLD_k} / sum_j n_j e^{-beta KLD_j}, KLD against the mean
// distribution of the other members.  Singleton -> s = 1, KLD recorded as 0.
inline std::vector<MemberScore> scores(const std::vector<std::vector<double>>& dists,
                                       const std::vector<int64_t>& sizes, double beta) {
    if (beta < 0) throw InvariantError("scores: beta must be >= 0");
    size_t m = dists.size();
    if (sizes.size() != m) throw InvariantError("scores: sizes/dists mismatch");
    std::vector<MemberScore> out(m);
    if (m == 1) {
        out[0] = {0.0, 1.0};
        return out;
    }
    for (size_t k = 0; k < m; ++k) {
        std::vector<double> pj(dists[k].size(), 0.0);
        for (size_t x = 0; x < m; ++x) {
            if (x == k) continue;
            for (size_t i = 0; i < pj.size(); ++i) pj[i] += dists[x][i];
        }
        for (auto& v : pj) v /= double(m - 1);
        out[k].kld_value = kld(dists[k], pj);
    }
    // normalized in log space so large beta*KLD cannot underflow everyone
    std::vector<double> logw(m);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < m; ++k) {
        if (sizes[k] <= 0) throw InvariantError("scores: non-positive dataset size");
        logw[k] = std::log(double(sizes[k])) - beta * out[k].kld_value;
        mx = std::max(mx, logw[k]);
    }
    double denom = 0;
    for (size_t k = 0; k < m; ++k) denom += std::exp(logw[k] - mx);
    for (size_t k = 0; k < m; ++k) out[k].score = std::exp(logw[k] - mx) / denom;
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation

// Elementwise weighted average of aligned segment stores, broadcast back to
// every member.  Weights must sum to 1.
inline void aggregate(std::vector<SegmentStore*> members, const std::vector<double>& w) {
    if (members.empty()) return;
    if (members.size() != w.size()) throw InvariantError("aggregate: weight count mismatch");
    double sum = std::accumulate(w.begin(), w.end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-9)
        throw InvariantError("aggregate: weights sum to " + std::to_string(sum));
    SegmentStore& first = *members[0];
    for (size_t b = 0; b < first.blocks.size(); ++b) {
        std::vector<Tensor*> slot0;
        first.blocks[b].for_each_state([&](const char*, Tensor& t) { slot0.push_back(&t); });
        for (size_t mi = 1; mi < members.size(); ++mi) {
            size_t si = 0;
            members[mi]->blocks[b].for_each_state([&](const char* name, Tensor& t) {
                if (si >= slot0.size() || t.shape != slot0[si]->shape)
                    throw InvariantError(std::string("aggregate: member shapes differ at '") +
                                         name + "'");
                ++si;
            });
        }
        size_t nslots = slot0.size();
        for (size_t si = 0; si < nslots; ++si) {
            Tensor& t0 = *slot0[si];
            std::vector<double> acc(size_t(t0.numel()), 0.0);
            for (size_t mi = 0; mi < members.size(); ++mi) {
                size_t sj = 0;
                members[mi]->blocks[b].for_each_state([&](const char*, Tensor& t) {
                    if (sj == si)
                        for (int64_t i = 0; i < t.numel(); ++i)
                            acc[size_t(i)] += w[mi] * double(t.data[i]);
                    ++sj;
                });
            }
            for (size_t mi = 0; mi < members.size(); ++mi) {
                size_t sj = 0;
                members[mi]->blocks[b].for_each_state([&](const char*, Tensor& t) {
                    if (sj == si)
                        for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = float(acc[size_t(i)]);
                    ++sj;
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Federation round

struct FederationConfig {
    bool clustering = true;
    bool kld_weighting = true;
    bool label_source = false;  // `kld-source: labels`
    int k = 2;
    double beta = 150.0;
    int warmup_rounds = 2;  // vanilla FedAvg rounds
};

struct ClientRoundRecord {
    int client_id = 0;
    int cluster = 0;
    double kld_value = 0;
    double score = 0;         // intra-cluster weight
    double score_global = 0;  // server-side weight before per-layer renormalization
};

struct RoundReport {
    int round = 0;
    std::string type;  // "fedavg" or "clustered"
    std::vector<ClientRoundRecord> clients;
};

namespace detail {

// average like-shaped client segments; members grouped by cut index
inline void aggregate_client_segments(SplitEngine& eng,
                                      const std::vector<std::vector<int>>& clusters,
                                      const std::vector<double>& weight_by_client) {
    for (int net = 0; net < 2; ++net) {
        for (int part = 0; part < 2; ++part) {
            for (const auto& cluster : clusters) {
                // sub-group by the segment's cut index (shape equality)
                std::map<int, std::vector<int>> by_cut;
                for (int k : cluster) {
                    int cut = part == 0 ? eng.cuts[size_t(k)].head(net)
                                        : eng.cuts[size_t(k)].tail(net);
                    by_cut[cut].push_back(k);
                }
                for (auto& [cut, ks] : by_cut) {
                    double total = 0;
                    for (int k : ks) total += weight_by_client[size_t(k)];
                    if (total <= 0) continue;
                    std::vector<SegmentStore*> members;
                    std::vector<double> w;
                    for (int k : ks) {
                        members.push_back(&eng.clients[size_t(k)].seg[net][part]);
                        w.push_back(weight_by_client[size_t(k)] / total);
                    }
                    // keep the simplex exact under fp division
                    double s = std::accumulate(w.begin(), w.end(), 0.0);
                    for (auto& v : w) v /= s;
                    try {
                        aggregate(members, w);
                    } catch (const InvariantError& e) {
                        std::string ids;
                        for (int k : ks)
                            ids += (ids.empty() ? "" : ",") +
                                   std::to_string(eng.clients[size_t(k)].id);
                        throw InvariantError(std::string(e.what()) + " (clients " + ids + ")");
                    }
                }
            }
        }
    }
}

// server-side blocks: per-layer weighted average over that layer's
// participants, weights renormalized per layer
inline void aggregate_server_segments(SplitEngine& eng,
                                      const std::vector<double>& global_weight) {
    for (int net = 0; net < 2; ++net) {
        int n = eng.profile->net(net).n();
        for (int i = 2; i <= n - 1; ++i) {
            const auto& parts = eng.pmap.at_layer[net][size_t(i)];
            if (parts.empty()) continue;
            double total = 0;
            for (int k : parts) total += global_weight[size_t(k)];
            if (total <= 0) continue;
            // the server keeps a single shared copy per layer, so the
            // weighted combination below is over identical views; it is the
            // per-layer renormalized form of the global update
            SegmentStore layer = slice_segment(eng.server_seg[net], i, i);
            std::vector<SegmentStore> copies(parts.size(), layer);
            std::vector<SegmentStore*> members;
            std::vector<double> w;
            for (size_t j = 0; j < parts.size(); ++j) {
                members.push_back(&copies[j]);
                w.push_back(global_weight[size_t(parts[j])] / total);
            }
            double s = std::accumulate(w.begin(), w.end(), 0.0);
            for (auto& v : w) v /= s;
            aggregate(members, w);
            eng.server_seg[net].block(i) = copies[0].block(i);
        }
    }
}

}  // namespace detail

// Runs one federation round over the engine.  `summaries` are the per-client
// mean middle-layer activations collected since the previous round;
// `label_hists` are per-client label distributions (used when label_source).
inline RoundReport federation_round(SplitEngine& eng, int round_index,
                                    const std::map<int, std::vector<double>>& summaries,
                                    const std::map<int, std::vector<double>>& label_hists,
                                    const FederationConfig& cfg, uint64_t seed) {
    int m = eng.client_count();
    RoundReport rep;
    rep.round = round_index;
    std::vector<int64_t> sizes((size_t(m)));
    for (int k = 0; k < m; ++k) sizes[size_t(k)] = eng.fleet.clients[size_t(k)].n;

    bool vanilla = round_index <= cfg.warmup_rounds || (!cfg.clustering && !cfg.kld_weighting);
    std::vector<int> labels(size_t(m), 0);
    std::vector<double> intra(size_t(m), 0.0), global_w(size_t(m), 0.0);
    std::vector<double> klds(size_t(m), 0.0), glob_klds(size_t(m), 0.0);

    if (vanilla) {
        rep.type = "fedavg";
        double total = 0;
        for (auto s : sizes) total += double(s);
        for (int k = 0; k < m; ++k) {
            intra[size_t(k)] = double(sizes[size_t(k)]) / total;
            global_w[size_t(k)] = intra[size_t(k)];
        }
    } else {
        rep.type = "clustered";
        // cluster on mean middle-layer activations
        std::vector<std::vector<double>> feats((size_t(m)));
        for (int k = 0; k < m; ++k) {
            auto it = summaries.find(eng.clients[size_t(k)].id);
            if (it == summaries.end())
                throw InvariantError("federation: no activation summary for client " +
                                     std::to_string(eng.clients[size_t(k)].id));
            feats[size_t(k)] = it->second;
        }
        if (cfg.clustering) {
            int k_eff = std::min(cfg.k, m);
            labels = kmeans_cluster(feats, k_eff, mix_seed(seed, uint64_t(round_index))).labels;
        }
        // P_k: softmax of the mean activation, or the label histogram
        std::vector<std::vector<double>> P((size_t(m)));
        for (int k = 0; k < m; ++k) {
            if (cfg.label_source) {
                auto it = label_hists.find(eng.clients[size_t(k)].id);
                if (it == label_hists.end())
                    throw InvariantError("federation: label-source mode without label "
                                         "histogram for client " +
                                         std::to_string(eng.clients[size_t(k)].id));
                P[size_t(k)] = it->second;
            } else {
                P[size_t(k)] = softmax(feats[size_t(k)]);
            }
        }
        double beta_eff = cfg.kld_weighting ? cfg.beta : 0.0;
        int n_clusters = *std::max_element(labels.begin(), labels.end()) + 1;
        for (int c = 0; c < n_clusters; ++c) {
            std::vector<int> members;
            for (int k = 0; k < m; ++k)
                if (labels[size_t(k)] == c) members.push_back(k);
            if (members.empty()) continue;
            std::vector<std::vector<double>> pd;
            std::vector<int64_t> sz;
            for (int k : members) {
                pd.push_back(P[size_t(k)]);
                sz.push_back(sizes[size_t(k)]);
            }
            auto sc = scores(pd, sz, beta_eff);
            for (size_t j = 0; j < members.size(); ++j) {
                intra[size_t(members[j])] = sc[j].score;
                klds[size_t(members[j])] = sc[j].kld_value;
            }
        }
        // global scores for the server-side update
        auto gsc = scores(P, sizes, beta_eff);
        for (int k = 0; k < m; ++k) {
            global_w[size_t(k)] = gsc[size_t(k)].score;
            glob_klds[size_t(k)] = gsc[size_t(k)].kld_value;
        }
    }

    std::vector<std::vector<int>> clusters;
    int n_clusters = *std::max_element(labels.begin(), labels.end()) + 1;
    clusters.resize(size_t(n_clusters));
    for (int k = 0; k < m; ++k) clusters[size_t(labels[size_t(k)])].push_back(k);
    detail::aggregate_client_segments(eng, clusters, intra);
    detail::aggregate_server_segments(eng, global_w);

    for (int k = 0; k < m; ++k) {
        ClientRoundRecord r;
        r.client_id = eng.clients[size_t(k)].id;
        r.cluster = labels[size_t(k)];
        r.kld_value = klds[size_t(k)];
        r.score = intra[size_t(k)];
        r.score_global = global_w[size_t(k)];
        rep.clients.push_back(r);
    }
    return rep;
}

}  // namespace splitgan
