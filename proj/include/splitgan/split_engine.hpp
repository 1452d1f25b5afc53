#pragma once
// U-shaped split training: clients run head/tail blocks, the server runs the
// middle blocks on batches concatenated across the clients participating at
// each layer, and gradients retrace the path in reverse.  Only activation and
// gradient tensors ever cross the client boundary.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/errors.hpp"
#include "splitgan/latency_model.hpp"
#include "splitgan/losses.hpp"
#include "splitgan/model_graph.hpp"
#include "splitgan/rng.hpp"

namespace splitgan {

struct SplitMessage {
    enum class Kind { activation, gradient };
    Kind kind = Kind::activation;
    int client_id = 0;
    int net = kGen;
    int boundary = 0;  // block index whose output (fwd) / input grad (bwd) this is
    int rows = 0;
    Tensor payload;
};

inline nlohmann::json message_to_json(const SplitMessage& m) {
    return nlohmann::json{
        {"kind", m.kind == SplitMessage::Kind::activation ? "activation" : "gradient"},
        {"client_id", m.client_id},
        {"net", m.net == kGen ? "G" : "D"},
        {"boundary", m.boundary},
        {"rows", m.rows},
        {"payload_shape", m.payload.shape},
        {"payload", m.payload.data}};
}

// client -> server-side entry/exit layers, and participants per server layer
struct ParticipationMap {
    std::vector<int> entry[2], exit_[2];          // by client index
    std::vector<std::vector<int>> at_layer[2];    // by block index (1..n)

    void build(const ModelProfile& p, const CutAssignment& cuts) {
        for (int net = 0; net < 2; ++net) {
            int n = p.net(net).n();
            entry[net].assign(cuts.size(), 0);
            exit_[net].assign(cuts.size(), 0);
            at_layer[net].assign(size_t(n) + 1, {});
            for (size_t k = 0; k < cuts.size(); ++k) {
                entry[net][k] = cuts[k].head(net) + 1;
                exit_[net][k] = cuts[k].tail(net) - 1;
                for (int i = entry[net][k]; i <= exit_[net][k]; ++i)
                    at_layer[net][size_t(i)].push_back(int(k));
            }
        }
    }
};

struct ClientModel {
    int id = 0;
    CutQuad cuts;
    SegmentStore seg[2][2];  // [net][0=head,1=tail]
    AdamState opt[2][2];
};

// One split forward pass over a network; holds every cache needed by the
// matching backward and is consumed by it.
struct PassContext {
    int net = kGen;
    bool train = true;
    std::vector<ForwardCache> head_cache, tail_cache;
    std::vector<Tensor> tail_out;
    struct ServerLayer {
        std::vector<std::pair<int, int>> layout;  // (client index, rows) in order
        ForwardCache cache;
    };
    std::map<int, ServerLayer> server;  // block index -> state
    bool backward_done = false;
};

struct StepResult {
    std::vector<double> d_loss, g_loss;  // per client
};

struct PassCounters {
    int64_t fwd[2] = {0, 0};
    int64_t bwd[2] = {0, 0};
};

class SplitEngine {
public:
    const ModelProfile* profile = nullptr;
    Fleet fleet;
    CutAssignment cuts;
    ParticipationMap pmap;
    std::vector<ClientModel> clients;
    SegmentStore server_seg[2];
    AdamState server_opt[2];
    OptimConfig optim;
    bool saturating = false;
    PassCounters counters;

    bool audit_enabled = false;
    std::vector<SplitMessage> audit_log;

    // running mean of the middle-layer D activation per client (real data only)
    struct SummaryAcc {
        std::vector<double> sum;
        int64_t count = 0;
    };
    std::map<int, SummaryAcc> mid_summaries;

    void init(const ModelProfile& p, const Fleet& f, const CutAssignment& ca,
              uint64_t seed) {
        validate_cuts(f, p, ca);
        profile = &p;
        fleet = f;
        cuts = ca;
        pmap.build(p, ca);
        // one master initialization per network; every owner starts from the
        // same values so federation averages like-for-like
        SegmentStore master[2];
        for (int net = 0; net < 2; ++net)
            master[net] = make_segment(p.net(net), p.classes, 1, p.net(net).n(), seed, net);
        clients.clear();
        for (size_t k = 0; k < f.clients.size(); ++k) {
            ClientModel c;
            c.id = f.clients[k].id;
            c.cuts = ca[k];
            for (int net = 0; net < 2; ++net) {
                c.seg[net][0] = slice_segment(master[net], 1, ca[k].head(net));
                c.seg[net][1] = slice_segment(master[net], ca[k].tail(net), p.net(net).n());
            }
            clients.push_back(std::move(c));
        }
        for (int net = 0; net < 2; ++net)
            server_seg[net] = slice_segment(master[net], 2, p.net(net).n() - 1);
        mid_summaries.clear();
        audit_log.clear();
        counters = PassCounters{};
    }

    int client_count() const { return int(clients.size()); }

    // ---- spec operations -------------------------------------------------

    SplitMessage client_forward_head(int k, int net, const Tensor& input,
                                     const std::vector<int>& labels, bool train,
                                     ForwardCache* cache) {
        ClientModel& c = clients.at(size_t(k));
        int l_h = c.cuts.head(net);
        Tensor out = forward_blocks(profile->net(net), c.seg[net][0], 1, l_h, input,
                                    labels, profile->classes, train, cache);
        SplitMessage m;
        m.kind = SplitMessage::Kind::activation;
        m.client_id = c.id;
        m.net = net;
        m.boundary = l_h;
        m.rows = out.rows();
        m.payload = std::move(out);
        record(m);
        return m;
    }

    // Concatenated forward through the server blocks.  Returns one exit
    // message per client, keyed by client index.
    std::map<int, SplitMessage> server_forward(int net,
                                               const std::vector<SplitMessage>& inbox,
                                               PassContext& ctx, bool train,
                                               bool collect_mid_summary) {
        std::vector<const SplitMessage*> by_client(clients.size(), nullptr);
        for (const auto& m : inbox) {
            int k = client_index(m.client_id);
            if (by_client[size_t(k)])
                throw ProtocolError("duplicate head message from client " +
                                    std::to_string(m.client_id));
            by_client[size_t(k)] = &m;
        }
        for (size_t k = 0; k < clients.size(); ++k)
            if (!by_client[k])
                throw ProtocolError("missing head message from client " +
                                    std::to_string(clients[k].id));

        int n = profile->net(net).n();
        int mid = profile->net(net).mid();
        std::map<int, SplitMessage> exits;
        Tensor cur;
        std::vector<std::pair<int, int>> layout;  // (client index, rows)
        for (int i = 2; i <= n - 1; ++i) {
            // clients entering at layer i append after the continuing rows,
            // in ascending client id order
            for (int k : pmap.at_layer[net][size_t(i)]) {
                if (pmap.entry[net][size_t(k)] != i) continue;
                const Tensor& pay = by_client[size_t(k)]->payload;
                cur = layout.empty() ? pay : concat_rows({&cur, &pay});
                layout.emplace_back(k, pay.rows());
            }
            if (layout.empty()) continue;  // no participants: no server latency, no compute
            auto& sl = ctx.server[i];
            sl.layout = layout;
            cur = forward_blocks(profile->net(net), server_seg[net], i, i, cur, {},
                                 profile->classes, train, train ? &sl.cache : nullptr);
            if (collect_mid_summary && net == kDisc && i == mid) accumulate_mid(cur, layout);
            // extract rows of clients exiting at layer i
            std::vector<std::pair<int, int>> keep;
            Tensor next;
            int row_at = 0;
            std::vector<const Tensor*> kept_parts;
            std::vector<Tensor> slices;
            slices.reserve(layout.size());
            for (auto& [k, rows] : layout) {
                slices.push_back(slice_rows(cur, row_at, rows));
                row_at += rows;
            }
            for (size_t j = 0; j < layout.size(); ++j) {
                int k = layout[j].first;
                if (pmap.exit_[net][size_t(k)] == i) {
                    SplitMessage m;
                    m.kind = SplitMessage::Kind::activation;
                    m.client_id = clients[size_t(k)].id;
                    m.net = net;
                    m.boundary = i;
                    m.rows = layout[j].second;
                    m.payload = std::move(slices[j]);
                    record(m);
                    exits.emplace(k, std::move(m));
                } else {
                    keep.push_back(layout[j]);
                    kept_parts.push_back(&slices[j]);
                }
            }
            layout = std::move(keep);
            cur = kept_parts.empty() ? Tensor() : concat_rows(kept_parts);
        }
        if (!layout.empty()) throw ProtocolError("clients left in the server pipeline");
        return exits;
    }

    Tensor client_forward_tail(int k, int net, const SplitMessage& exit_msg, bool train,
                               ForwardCache* cache) {
        ClientModel& c = clients.at(size_t(k));
        int l_t = c.cuts.tail(net);
        if (exit_msg.boundary != l_t - 1)
            throw ProtocolError("client " + std::to_string(c.id) + ": exit message at " +
                                std::to_string(exit_msg.boundary) + ", tail expects " +
                                std::to_string(l_t - 1));
        return forward_blocks(profile->net(net), c.seg[net][1], l_t,
                              profile->net(net).n(), exit_msg.payload, {},
                              profile->classes, train, cache);
    }

    // Full forward pass: heads -> server -> tails.
    PassContext forward_pass(int net, const std::vector<Tensor>& inputs,
                             const std::vector<std::vector<int>>& labels, bool train,
                             bool collect_mid_summary = false) {
        if (int(inputs.size()) != client_count())
            throw UsageError("forward_pass: one input batch per client required");
        PassContext ctx;
        ctx.net = net;
        ctx.train = train;
        ctx.head_cache.resize(clients.size());
        ctx.tail_cache.resize(clients.size());
        ctx.tail_out.resize(clients.size());
        std::vector<SplitMessage> inbox;
        for (size_t k = 0; k < clients.size(); ++k)
            inbox.push_back(client_forward_head(int(k), net, inputs[k], labels[k], train,
                                                train ? &ctx.head_cache[k] : nullptr));
        auto exits = server_forward(net, inbox, ctx, train, collect_mid_summary);
        for (size_t k = 0; k < clients.size(); ++k)
            ctx.tail_out[k] = client_forward_tail(int(k), net, exits.at(int(k)), train,
                                                  train ? &ctx.tail_cache[k] : nullptr);
        ++counters.fwd[net];
        return ctx;
    }

    // Reverse path: tail grads -> server -> head grads.  Accumulates parameter
    // gradients into the owning segment stores unless accum_params is false.
    std::vector<Tensor> backward_pass(int net, PassContext& ctx,
                                      const std::vector<Tensor>& out_grads,
                                      bool accum_params = true) {
        if (ctx.net != net) throw UsageError("backward_pass: context is for the other network");
        if (!ctx.train) throw ProtocolError("backward_pass: forward ran in eval mode");
        if (ctx.backward_done) throw ProtocolError("backward_pass: context already consumed");
        ctx.backward_done = true;

        int n = profile->net(net).n();
        // tail backward -> gradient messages at the exit boundary
        std::map<int, Tensor> grads;  // client index -> grad at its current boundary
        for (size_t k = 0; k < clients.size(); ++k) {
            Tensor g = backward_blocks(profile->net(net), clients[k].seg[net][1],
                                       ctx.tail_cache[k], out_grads[k], accum_params);
            SplitMessage m;
            m.kind = SplitMessage::Kind::gradient;
            m.client_id = clients[k].id;
            m.net = net;
            // grad wrt the input of the first tail block, i.e. the activation
            // boundary l_T - 1
            m.boundary = clients[k].cuts.tail(net) - 1;
            m.rows = g.rows();
            m.payload = g;
            record(m);
            grads[int(k)] = std::move(g);
        }
        // server backward, high to low, re-assembling each layer's row layout
        std::vector<Tensor> head_grads(clients.size());
        for (int i = n - 1; i >= 2; --i) {
            auto it = ctx.server.find(i);
            if (it == ctx.server.end()) continue;
            auto& sl = it->second;
            std::vector<Tensor> parts;
            std::vector<const Tensor*> ptrs;
            parts.reserve(sl.layout.size());
            for (auto& [k, rows] : sl.layout) {
                auto git = grads.find(k);
                if (git == grads.end())
                    throw ProtocolError("no gradient for client " +
                                        std::to_string(clients[size_t(k)].id) +
                                        " at layer " + std::to_string(i));
                parts.push_back(std::move(git->second));
                grads.erase(git);
            }
            for (auto& t : parts) ptrs.push_back(&t);
            Tensor cat = concat_rows(ptrs);
            Tensor d = backward_blocks(profile->net(net), server_seg[net], sl.cache, cat,
                                       accum_params);
            int row_at = 0;
            for (auto& [k, rows] : sl.layout) {
                Tensor slice = slice_rows(d, row_at, rows);
                row_at += rows;
                if (pmap.entry[net][size_t(k)] == i) {
                    SplitMessage m;
                    m.kind = SplitMessage::Kind::gradient;
                    m.client_id = clients[size_t(k)].id;
                    m.net = net;
                    m.boundary = i - 1;  // grad wrt the head output boundary l_H
                    m.rows = rows;
                    m.payload = slice;
                    record(m);
                    head_grads[size_t(k)] = std::move(slice);
                } else {
                    grads[k] = std::move(slice);
                }
            }
        }
        // head backward
        std::vector<Tensor> input_grads(clients.size());
        for (size_t k = 0; k < clients.size(); ++k)
            input_grads[k] = backward_blocks(profile->net(net), clients[k].seg[net][0],
                                             ctx.head_cache[k], head_grads[k], accum_params);
        ++counters.bwd[net];
        return input_grads;
    }

    // One cGAN training step: D on real, D on fake, G via a frozen-D pass.
    StepResult training_step(const std::vector<Tensor>& real,
                             const std::vector<std::vector<int>>& real_labels,
                             const std::vector<std::vector<int>>& local_label_sets,
                             Rng& rng) {
        int m = client_count();
        StepResult res;
        res.d_loss.assign(size_t(m), 0.0);
        res.g_loss.assign(size_t(m), 0.0);

        // D on real (mid-layer activations recorded for clustering)
        PassContext d_real = forward_pass(kDisc, real, real_labels, true, true);
        std::vector<Tensor> d_real_grads((size_t(m)));
        for (int k = 0; k < m; ++k) {
            res.d_loss[size_t(k)] = bce_loss(d_real.tail_out[size_t(k)], 1.0);
            d_real_grads[size_t(k)] = bce_grad(d_real.tail_out[size_t(k)], 1.0);
        }
        backward_pass(kDisc, d_real, d_real_grads);

        // D on generated samples (G forward only; samples detached)
        auto [z1, y1] = sample_noise(local_label_sets, rng);
        PassContext g_gen = forward_pass(kGen, z1, y1, true);
        PassContext d_fake = forward_pass(kDisc, g_gen.tail_out, y1, true);
        std::vector<Tensor> d_fake_grads((size_t(m)));
        for (int k = 0; k < m; ++k) {
            res.d_loss[size_t(k)] += bce_loss(d_fake.tail_out[size_t(k)], 0.0);
            d_fake_grads[size_t(k)] = bce_grad(d_fake.tail_out[size_t(k)], 0.0);
        }
        backward_pass(kDisc, d_fake, d_fake_grads);
        step_net(kDisc);

        // G update through a frozen D
        auto [z2, y2] = sample_noise(local_label_sets, rng);
        PassContext g_up = forward_pass(kGen, z2, y2, true);
        PassContext d_up = forward_pass(kDisc, g_up.tail_out, y2, true);
        std::vector<Tensor> g_out_grads((size_t(m)));
        for (int k = 0; k < m; ++k) {
            const Tensor& p = d_up.tail_out[size_t(k)];
            res.g_loss[size_t(k)] = saturating ? saturating_loss(p) : bce_loss(p, 1.0);
            g_out_grads[size_t(k)] = saturating ? saturating_grad(p) : bce_grad(p, 1.0);
        }
        std::vector<Tensor> d_input_grads = backward_pass(kDisc, d_up, g_out_grads,
                                                          /*accum_params=*/false);
        backward_pass(kGen, g_up, d_input_grads);
        step_net(kGen);
        return res;
    }

    // Assemble the full per-client model (head + shared server + tail); used
    // by evaluation and by the monolithic test oracle.
    SegmentStore monolithic_store(int k, int net) const {
        const ClientModel& c = clients.at(size_t(k));
        SegmentStore s;
        s.first = 1;
        s.last = profile->net(net).n();
        for (int i = 1; i <= c.cuts.head(net); ++i) s.blocks.push_back(c.seg[net][0].block(i));
        for (int i = c.cuts.head(net) + 1; i <= c.cuts.tail(net) - 1; ++i)
            s.blocks.push_back(server_seg[net].block(i));
        for (int i = c.cuts.tail(net); i <= profile->net(net).n(); ++i)
            s.blocks.push_back(c.seg[net][1].block(i));
        return s;
    }

    // drained by the federation round
    std::map<int, std::vector<double>> take_mid_summaries() {
        std::map<int, std::vector<double>> out;
        for (auto& [cid, acc] : mid_summaries) {
            std::vector<double> mean(acc.sum.size());
            for (size_t i = 0; i < mean.size(); ++i) mean[i] = acc.sum[i] / double(acc.count);
            out[cid] = std::move(mean);
        }
        mid_summaries.clear();
        return out;
    }

    void zero_all_grads() {
        for (auto& c : clients)
            for (int net = 0; net < 2; ++net)
                for (int s = 0; s < 2; ++s) c.seg[net][s].zero_grad();
        for (int net = 0; net < 2; ++net) server_seg[net].zero_grad();
    }

    int client_index(int client_id) const {
        for (size_t k = 0; k < clients.size(); ++k)
            if (clients[k].id == client_id) return int(k);
        throw ProtocolError("unknown client id " + std::to_string(client_id));
    }

private:
    void record(const SplitMessage& m) {
        if (m.boundary < 1 || m.boundary > profile->net(m.net).n() - 1)
            throw InvariantError("message at boundary " + std::to_string(m.boundary) +
                                 " would leave the exchanged-tensor range");
        if (audit_enabled) audit_log.push_back(m);
    }

    void accumulate_mid(const Tensor& acts, const std::vector<std::pair<int, int>>& layout) {
        int64_t dim = acts.row_size();
        int row_at = 0;
        for (auto& [k, rows] : layout) {
            auto& acc = mid_summaries[clients[size_t(k)].id];
            if (acc.sum.empty()) acc.sum.assign(size_t(dim), 0.0);
            for (int r = 0; r < rows; ++r) {
                const float* src = acts.row(row_at + r);
                for (int64_t i = 0; i < dim; ++i) acc.sum[size_t(i)] += src[i];
            }
            acc.count += rows;
            row_at += rows;
        }
    }

    std::pair<std::vector<Tensor>, std::vector<std::vector<int>>> sample_noise(
        const std::vector<std::vector<int>>& local_label_sets, Rng& rng) {
        int m = client_count();
        std::vector<Tensor> z((size_t(m)));
        std::vector<std::vector<int>> y((size_t(m)));
        for (int k = 0; k < m; ++k) {
            z[size_t(k)] = Tensor({fleet.batch, profile->noise_dim});
            for (auto& v : z[size_t(k)].data) v = float(rng.uniform(-1.0, 1.0));
            const auto& pool = local_label_sets[size_t(k)];
            if (pool.empty()) throw UsageError("client without local labels");
            y[size_t(k)].resize(size_t(fleet.batch));
            for (int r = 0; r < fleet.batch; ++r)
                y[size_t(k)][size_t(r)] = pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))];
        }
        return {std::move(z), std::move(y)};
    }

    void step_net(int net) {
        for (auto& c : clients) {
            c.opt[net][0].step(c.seg[net][0], optim);
            c.opt[net][1].step(c.seg[net][1], optim);
            c.seg[net][0].zero_grad();
            c.seg[net][1].zero_grad();
        }
        server_opt[net].step(server_seg[net], optim);
        server_seg[net].zero_grad();
    }
};

}  // namespace splitgan
