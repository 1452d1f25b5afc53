#pragma once
// Closed-form latency of one split training iteration over a heterogeneous
// fleet.  All quantities are seconds; FLOPs and activation byte sizes come
// from the model profile's accounting.
//
// Cut quadruple (l_GH, l_GT, l_DH, l_DT) per client: head = blocks [1..l_H],
// server = [l_H+1..l_T-1], tail = [l_T..n].  The server span must contain the
// middle block mid = ceil(n/2) of each network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/errors.hpp"
#include "splitgan/model_graph.hpp"

namespace splitgan {

constexpr int kGen = 0;
constexpr int kDisc = 1;

struct DeviceProfile {
    double freq_hz = 0;          // f
    double flops_per_cycle = 0;  // kappa
    double rate = 0;             // R, bytes/s

    bool operator==(const DeviceProfile& o) const {
        return freq_hz == o.freq_hz && flops_per_cycle == o.flops_per_cycle &&
               rate == o.rate;
    }
    double flops_per_s() const { return freq_hz * flops_per_cycle; }
};

struct FleetClient {
    int id = 0;
    DeviceProfile dev;
    int64_t n = 0;  // local dataset size
    std::string profile_name;
};

struct Fleet {
    std::vector<FleetClient> clients;
    DeviceProfile server;
    int batch = 64;
};

inline void validate_fleet(const Fleet& f) {
    if (f.clients.empty()) throw InvariantError("fleet: needs at least one client");
    if (f.batch < 1) throw InvariantError("fleet: batch must be >= 1");
    auto check_dev = [](const DeviceProfile& d, const std::string& who) {
        if (d.freq_hz <= 0 || d.flops_per_cycle <= 0 || d.rate <= 0)
            throw InvariantError("fleet: " + who + " has a non-positive capability");
    };
    check_dev(f.server, "server");
    for (const auto& c : f.clients) check_dev(c.dev, "client " + std::to_string(c.id));
}

struct CutQuad {
    int g_head = 0, g_tail = 0, d_head = 0, d_tail = 0;

    int head(int net) const { return net == 0 ? g_head : d_head; }
    int tail(int net) const { return net == 0 ? g_tail : d_tail; }
    void set(int net, int h, int t) {
        if (net == 0) {
            g_head = h;
            g_tail = t;
        } else {
            d_head = h;
            d_tail = t;
        }
    }
    bool operator==(const CutQuad& o) const {
        return g_head == o.g_head && g_tail == o.g_tail && d_head == o.d_head &&
               d_tail == o.d_tail;
    }
};

using CutAssignment = std::vector<CutQuad>;  // indexed like fleet.clients

inline void validate_cut(const NetworkProfile& net, int l_h, int l_t,
                         const std::string& who) {
    int n = net.n(), mid = net.mid();
    if (l_h < 1)
        throw InvariantError(who + ": head cut " + std::to_string(l_h) +
                             " leaves an empty head segment");
    if (l_t > n)
        throw InvariantError(who + ": tail cut " + std::to_string(l_t) +
                             " leaves an empty tail segment (n=" + std::to_string(n) + ")");
    if (l_h + 1 > mid || mid > l_t - 1)
        throw InvariantError(who + ": server span [" + std::to_string(l_h + 1) + "," +
                             std::to_string(l_t - 1) + "] must contain the middle block " +
                             std::to_string(mid));
}

inline void validate_cuts(const Fleet& fleet, const ModelProfile& p,
                          const CutAssignment& cuts) {
    if (cuts.size() != fleet.clients.size())
        throw InvariantError("cut assignment covers " + std::to_string(cuts.size()) +
                             " clients, fleet has " + std::to_string(fleet.clients.size()));
    for (size_t i = 0; i < cuts.size(); ++i) {
        std::string who = "client " + std::to_string(fleet.clients[i].id);
        validate_cut(p.gen, cuts[i].g_head, cuts[i].g_tail, who + " generator");
        validate_cut(p.disc, cuts[i].d_head, cuts[i].d_tail, who + " discriminator");
    }
}

enum class Dir { F, B };
enum class SegRole { head, tail };

// per-sample FLOPs of block i in a given direction
inline double block_flops(const NetworkProfile& net, int i, Dir d) {
    return double(d == Dir::F ? net.block(i).flops_fwd : net.block(i).flops_bwd());
}

// b * gamma(segment) / (f_k * kappa_k)
inline double client_compute(const Fleet& fleet, const ModelProfile& p,
                             const CutAssignment& cuts, int k, int net, SegRole role,
                             Dir dir) {
    const NetworkProfile& np = p.net(net);
    const CutQuad& q = cuts.at(size_t(k));
    int lo = role == SegRole::head ? 1 : q.tail(net);
    int hi = role == SegRole::head ? q.head(net) : np.n();
    if (lo > hi)
        throw InvariantError("client " + std::to_string(fleet.clients[size_t(k)].id) +
                             ": empty " + (role == SegRole::head ? "head" : "tail") +
                             " segment");
    double flops = 0;
    for (int i = lo; i <= hi; ++i) flops += block_flops(np, i, dir);
    return double(fleet.batch) * flops / fleet.clients[size_t(k)].dev.flops_per_s();
}

// b * gamma_{s,x,i} / (f_s * kappa_s); participation multiplier applied by the caller
inline double server_layer_compute(const Fleet& fleet, const ModelProfile& p, int net,
                                   int layer, Dir dir) {
    return double(fleet.batch) * block_flops(p.net(net), layer, dir) /
           fleet.server.flops_per_s();
}

enum class Link { uplink, downlink };

// b * xi(boundary) / R; boundary l is the activation emitted by block l
inline double transmission(const Fleet& fleet, const ModelProfile& p, int k, int net,
                           int boundary, Link link) {
    double bytes = double(p.net(net).act_bytes(boundary)) * fleet.batch;
    double rate = link == Link::uplink ? fleet.clients[size_t(k)].dev.rate
                                       : fleet.server.rate;
    return bytes / rate;
}

// Cumulative S-vector.  Forward: S[0..n] with S[0]=0.  Backward: S[1..n+1]
// with S[n+1]=0 (returned vector has n+2 entries; unused slots are 0).
inline std::vector<double> cumulative(const Fleet& fleet, const ModelProfile& p,
                                      const CutAssignment& cuts, int net, Dir dir) {
    const NetworkProfile& np = p.net(net);
    int n = np.n();
    std::vector<int> N(size_t(n) + 2, 0);
    for (const auto& q : cuts)
        for (int i = q.head(net) + 1; i <= q.tail(net) - 1; ++i) ++N[size_t(i)];

    std::vector<double> S(size_t(n) + 2, 0.0);
    if (dir == Dir::F) {
        for (int i = 1; i <= n; ++i) {
            double chain = S[size_t(i) - 1] +
                           server_layer_compute(fleet, p, net, i, Dir::F) * N[size_t(i)];
            double arrivals = -1;
            for (size_t k = 0; k < cuts.size(); ++k)
                if (cuts[k].head(net) == i)
                    arrivals = std::max(
                        arrivals,
                        client_compute(fleet, p, cuts, int(k), net, SegRole::head, Dir::F) +
                            transmission(fleet, p, int(k), net, i, Link::uplink));
            S[size_t(i)] = std::max(chain, arrivals);
        }
    } else {
        for (int i = n; i >= 1; --i) {
            double chain = S[size_t(i) + 1] +
                           server_layer_compute(fleet, p, net, i, Dir::B) * N[size_t(i)];
            double arrivals = -1;
            for (size_t k = 0; k < cuts.size(); ++k)
                if (cuts[k].tail(net) == i)
                    arrivals = std::max(
                        arrivals,
                        client_compute(fleet, p, cuts, int(k), net, SegRole::tail, Dir::B) +
                            transmission(fleet, p, int(k), net, i - 1, Link::uplink));
            S[size_t(i)] = std::max(chain, arrivals);
        }
    }
    return S;
}

struct NetBreakdown {
    std::vector<double> s_fwd;  // index 0..n
    std::vector<double> s_bwd;  // index 1..n+1
    double l_fwd = 0;
    double l_bwd = 0;
};

struct LatencyBreakdown {
    NetBreakdown gen, disc;
    double l_total = 0;

    double recombine() const {
        return gen.l_fwd + gen.l_bwd + 3.0 * (disc.l_fwd + disc.l_bwd);
    }
};

inline LatencyBreakdown total_latency(const Fleet& fleet, const ModelProfile& p,
                                      const CutAssignment& cuts) {
    validate_fleet(fleet);
    validate_cuts(fleet, p, cuts);
    LatencyBreakdown out;
    for (int net = 0; net < 2; ++net) {
        NetBreakdown& nb = net == 0 ? out.gen : out.disc;
        nb.s_fwd = cumulative(fleet, p, cuts, net, Dir::F);
        nb.s_bwd = cumulative(fleet, p, cuts, net, Dir::B);
        double lf = 0, lb = 0;
        for (size_t k = 0; k < cuts.size(); ++k) {
            int lt = cuts[k].tail(net), lh = cuts[k].head(net);
            double f = nb.s_fwd[size_t(lt) - 1] +
                       transmission(fleet, p, int(k), net, lt - 1, Link::downlink) +
                       client_compute(fleet, p, cuts, int(k), net, SegRole::tail, Dir::F);
            double b = nb.s_bwd[size_t(lh) + 1] +
                       transmission(fleet, p, int(k), net, lh, Link::downlink) +
                       client_compute(fleet, p, cuts, int(k), net, SegRole::head, Dir::B);
            lf = std::max(lf, f);
            lb = std::max(lb, b);
        }
        nb.l_fwd = lf;
        nb.l_bwd = lb;
    }
    out.l_total = out.recombine();
    return out;
}

// ---------------------------------------------------------------------------
// Fleet file IO

inline void from_json(const nlohmann::json& j, DeviceProfile& d) {
    if (j.contains("frequency_mhz"))
        d.freq_hz = j["frequency_mhz"].get<double>() * 1e6;
    else
        d.freq_hz = j.at("frequency_hz").get<double>();
    d.flops_per_cycle = j.at("flops_per_cycle").get<double>();
    d.rate = j.at("rate_bytes_per_s").get<double>();
}

inline void to_json(nlohmann::json& j, const DeviceProfile& d) {
    j = nlohmann::json{{"frequency_hz", d.freq_hz},
                       {"flops_per_cycle", d.flops_per_cycle},
                       {"rate_bytes_per_s", d.rate}};
}

inline Fleet fleet_from_json(const nlohmann::json& j) {
    Fleet f;
    f.server = j.at("server").get<DeviceProfile>();
    f.batch = j.value("batch", 64);
    std::map<std::string, DeviceProfile> named;
    if (j.contains("profiles"))
        for (auto it = j["profiles"].begin(); it != j["profiles"].end(); ++it)
            named[it.key()] = it.value().get<DeviceProfile>();
    int next_id = 0;
    for (const auto& cj : j.at("clients")) {
        int count = cj.value("count", 1);
        for (int r = 0; r < count; ++r) {
            FleetClient c;
            c.id = cj.contains("id") && count == 1 ? cj["id"].get<int>() : next_id;
            next_id = std::max(next_id, c.id) + 1;
            if (cj.contains("profile")) {
                auto it = named.find(cj["profile"].get<std::string>());
                if (it == named.end())
                    throw ConfigError("fleet: unknown device profile '" +
                                      cj["profile"].get<std::string>() + "'");
                c.dev = it->second;
                c.profile_name = cj["profile"].get<std::string>();
            } else {
                c.dev = cj.get<DeviceProfile>();
            }
            c.n = cj.value("n", 0);
            f.clients.push_back(c);
        }
    }
    validate_fleet(f);
    return f;
}

inline Fleet load_fleet(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open fleet file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("fleet file " + path + ": " + e.what());
    }
    return fleet_from_json(j);
}

inline nlohmann::json cuts_to_json(const CutAssignment& cuts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& q : cuts)
        arr.push_back({{"g_head", q.g_head},
                       {"g_tail", q.g_tail},
                       {"d_head", q.d_head},
                       {"d_tail", q.d_tail}});
    return arr;
}

inline CutAssignment cuts_from_json(const nlohmann::json& arr) {
    CutAssignment cuts;
    for (const auto& e : arr) {
        CutQuad q;
        q.g_head = e.at("g_head").get<int>();
        q.g_tail = e.at("g_tail").get<int>();
        q.d_head = e.at("d_head").get<int>();
        q.d_tail = e.at("d_tail").get<int>();
        cuts.push_back(q);
    }
    return cuts;
}

}  // namespace splitgan
