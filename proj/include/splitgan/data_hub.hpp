#pragma once
// Synthetic multi-domain datasets, IDX ubyte ingestion, and the non-IID
// partitioning recipes (label exclusions + size schedules).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/errors.hpp"
#include "splitgan/rng.hpp"
#include "splitgan/tensor.hpp"

namespace splitgan {

struct Dataset {
    Tensor x;             // (n, ...) features, already scaled to [-1, 1]
    std::vector<int> y;   // labels
    int classes = 0;

    int size() const { return x.rows(); }
};

struct DomainSpec {
    std::string name;
    std::string type = "gaussian2d";  // or "idx"
    int classes = 4;
    // gaussian2d
    double center_x = 0, center_y = 0;
    double rotation = 0;
    double radius = 0.35;
    double sigma = 0.04;
    int train_per_class = 1500;
    int test_per_class = 250;
    // idx
    std::string images, labels, test_images, test_labels;
};

struct SizeScheduleEntry {
    int clients = 0;
    int64_t n = 0;
};

struct ExclusionScheduleEntry {
    int clients = 0;
    int labels_excluded = 0;
    std::vector<int> labels;  // optional explicit label list
};

struct DomainAssignment {
    std::string domain;
    int clients = 0;
    std::vector<SizeScheduleEntry> size_schedule;
    std::vector<ExclusionScheduleEntry> exclusion_schedule;
};

struct Scenario {
    std::string name;
    std::vector<DomainSpec> domains;
    std::vector<DomainAssignment> assignments;

    int total_clients() const {
        int n = 0;
        for (const auto& a : assignments) n += a.clients;
        return n;
    }
    int domain_index(const std::string& name) const {
        for (size_t i = 0; i < domains.size(); ++i)
            if (domains[i].name == name) return int(i);
        throw ConfigError("scenario: unknown domain '" + name + "'");
    }
};

struct ClientShard {
    int client_id = 0;
    int domain = 0;
    Dataset data;
    int64_t n = 0;
    std::vector<int> excluded;
};

// ---------------------------------------------------------------------------
// Synthetic 2D Gaussian-mixture domains.  One component per class, means on a
// circle; distinct domains rotate/translate the layout.

inline Dataset synth_domain(const DomainSpec& d, int per_class, uint64_t seed) {
    if (d.classes < 2) throw ConfigError("synth_domain: needs at least 2 classes");
    if (d.sigma <= 0) throw ConfigError("synth_domain: degenerate covariance");
    Dataset out;
    out.classes = d.classes;
    int n = per_class * d.classes;
    out.x = Tensor({n, 2});
    out.y.resize(size_t(n));
    Rng rng(mix_seed(seed, std::hash<std::string>{}(d.name)));
    int at = 0;
    for (int c = 0; c < d.classes; ++c) {
        double ang = d.rotation + 2.0 * M_PI * c / d.classes;
        double mx = d.center_x + d.radius * std::cos(ang);
        double my = d.center_y + d.radius * std::sin(ang);
        for (int i = 0; i < per_class; ++i, ++at) {
            out.x.row(at)[0] = float(mx + d.sigma * rng.normal());
            out.x.row(at)[1] = float(my + d.sigma * rng.normal());
            out.y[size_t(at)] = c;
        }
    }
    return out;
}

inline std::pair<double, double> domain_class_mean(const DomainSpec& d, int c) {
    double ang = d.rotation + 2.0 * M_PI * c / d.classes;
    return {d.center_x + d.radius * std::cos(ang), d.center_y + d.radius * std::sin(ang)};
}

// ---------------------------------------------------------------------------
// IDX ubyte files (the de-facto MNIST layout): big-endian magic + dims, then
// raw ubyte payload.

namespace detail {

inline uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw DataError("idx file " + path + ": truncated header");
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
           uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v >> 24), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 8), (unsigned char)v};
    out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

// Pixels scale to [-1, 1]; label values become the class set 0..9.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw DataError("cannot open idx images file " + images_path);
    uint32_t magic = detail::read_be32(fi, images_path);
    if (magic != kIdxImagesMagic)
        throw DataError("idx file " + images_path + ": bad magic 0x" +
                        [&] { char b[16]; snprintf(b, 16, "%08x", magic); return std::string(b); }());
    uint32_t count = detail::read_be32(fi, images_path);
    uint32_t rows = detail::read_be32(fi, images_path);
    uint32_t cols = detail::read_be32(fi, images_path);
    std::vector<unsigned char> pix(size_t(count) * rows * cols);
    if (!pix.empty() && !fi.read(reinterpret_cast<char*>(pix.data()), std::streamsize(pix.size())))
        throw DataError("idx file " + images_path + ": truncated payload");

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw DataError("cannot open idx labels file " + labels_path);
    uint32_t lmagic = detail::read_be32(fl, labels_path);
    if (lmagic != kIdxLabelsMagic)
        throw DataError("idx file " + labels_path + ": bad magic 0x" +
                        [&] { char b[16]; snprintf(b, 16, "%08x", lmagic); return std::string(b); }());
    uint32_t lcount = detail::read_be32(fl, labels_path);
    if (lcount != count)
        throw DataError("idx count mismatch: " + std::to_string(count) + " images vs " +
                        std::to_string(lcount) + " labels");
    std::vector<unsigned char> labs(lcount);
    if (!labs.empty() && !fl.read(reinterpret_cast<char*>(labs.data()), std::streamsize(labs.size())))
        throw DataError("idx file " + labels_path + ": truncated payload");

    Dataset d;
    d.x = Tensor({int(count), 1, int(rows), int(cols)});
    for (size_t i = 0; i < pix.size(); ++i)
        d.x.data[i] = float(pix[i]) / 127.5f - 1.0f;
    d.y.resize(count);
    int maxl = 0;
    for (size_t i = 0; i < labs.size(); ++i) {
        d.y[i] = labs[i];
        maxl = std::max(maxl, int(labs[i]));
    }
    d.classes = std::max(10, maxl + 1);
    return d;
}

inline void write_idx(const Dataset& d, const std::string& images_path,
                      const std::string& labels_path) {
    if (d.x.shape.size() != 4)
        throw DataError("write_idx: expects (n, 1, rows, cols) image data");
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw DataError("cannot write idx images file " + images_path);
    detail::write_be32(fi, kIdxImagesMagic);
    detail::write_be32(fi, uint32_t(d.x.shape[0]));
    detail::write_be32(fi, uint32_t(d.x.shape[2]));
    detail::write_be32(fi, uint32_t(d.x.shape[3]));
    for (int64_t i = 0; i < d.x.numel(); ++i) {
        double v = (double(d.x.data[size_t(i)]) + 1.0) * 127.5;
        int b = int(std::lround(std::min(255.0, std::max(0.0, v))));
        fi.put(char(b));
    }
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw DataError("cannot write idx labels file " + labels_path);
    detail::write_be32(fl, kIdxLabelsMagic);
    detail::write_be32(fl, uint32_t(d.y.size()));
    for (int v : d.y) fl.put(char(v));
}

// ---------------------------------------------------------------------------
// Partitioning

// Deterministic shards honoring exclusion and size schedules; stratified
// sampling without replacement; shards are disjoint within a domain.
inline std::vector<ClientShard> partition(const std::vector<Dataset>& domain_data,
                                          const Scenario& sc, uint64_t seed) {
    std::vector<ClientShard> shards;
    Rng rng(mix_seed(seed, 0xda7aULL));
    int client_id = 0;
    for (const auto& asg : sc.assignments) {
        int dom = sc.domain_index(asg.domain);
        const Dataset& data = domain_data.at(size_t(dom));
        const DomainSpec& spec = sc.domains[size_t(dom)];

        // per-client plans
        std::vector<int64_t> sizes(size_t(asg.clients), 0);
        int at = 0;
        for (const auto& e : asg.size_schedule)
            for (int i = 0; i < e.clients && at < asg.clients; ++i) sizes[size_t(at++)] = e.n;
        for (; at < asg.clients; ++at)
            sizes[size_t(at)] = asg.size_schedule.empty() ? 0 : asg.size_schedule.back().n;

        std::vector<std::vector<int>> excluded(size_t(asg.clients));
        at = 0;
        for (const auto& e : asg.exclusion_schedule) {
            for (int i = 0; i < e.clients && at < asg.clients; ++i, ++at) {
                if (!e.labels.empty()) {
                    excluded[size_t(at)] = e.labels;
                } else {
                    // draw distinct labels for this client
                    std::vector<int> all(size_t(spec.classes));
                    std::iota(all.begin(), all.end(), 0);
                    for (int j = 0; j < e.labels_excluded; ++j) {
                        int pick = rng.uniform_int(j, spec.classes - 1);
                        std::swap(all[size_t(j)], all[size_t(pick)]);
                    }
                    excluded[size_t(at)].assign(all.begin(), all.begin() + e.labels_excluded);
                    std::sort(excluded[size_t(at)].begin(), excluded[size_t(at)].end());
                }
                if (int(excluded[size_t(at)].size()) >= spec.classes)
                    throw ConfigError("scenario: client would exclude every label");
                for (int l : excluded[size_t(at)])
                    if (l < 0 || l >= spec.classes)
                        throw ConfigError("scenario: excluded label " + std::to_string(l) +
                                          " outside the class set");
            }
        }

        // pools of unused sample indices per label
        std::vector<std::vector<int>> pool(size_t(data.classes));
        for (int i = 0; i < data.size(); ++i) pool[size_t(data.y[size_t(i)])].push_back(i);
        for (auto& p : pool) {
            for (size_t i = p.size(); i > 1; --i)
                std::swap(p[i - 1], p[size_t(rng.uniform_int(0, int(i) - 1))]);
        }
        std::vector<size_t> pool_at(size_t(data.classes), 0);

        for (int ci = 0; ci < asg.clients; ++ci, ++client_id) {
            std::vector<int> allowed;
            for (int c = 0; c < spec.classes; ++c)
                if (std::find(excluded[size_t(ci)].begin(), excluded[size_t(ci)].end(), c) ==
                    excluded[size_t(ci)].end())
                    allowed.push_back(c);
            int64_t want = sizes[size_t(ci)];
            if (want <= 0) throw ConfigError("scenario: client with no size schedule");

            // stratified: floor(n/|allowed|) per label, remainder spread
            int64_t base = want / int64_t(allowed.size());
            int64_t rem = want - base * int64_t(allowed.size());
            std::vector<int64_t> take(allowed.size(), base);
            for (int64_t r = 0; r < rem; ++r) ++take[size_t(rng.uniform_int(0, int(allowed.size()) - 1))];

            ClientShard shard;
            shard.client_id = client_id;
            shard.domain = dom;
            shard.n = want;
            shard.excluded = excluded[size_t(ci)];
            shard.data.classes = data.classes;
            std::vector<int> rows;
            for (size_t a = 0; a < allowed.size(); ++a) {
                int label = allowed[a];
                int64_t avail = int64_t(pool[size_t(label)].size()) - int64_t(pool_at[size_t(label)]);
                if (avail < take[a])
                    throw DataError("domain '" + spec.name + "': label " +
                                    std::to_string(label) + " short by " +
                                    std::to_string(take[a] - avail) + " samples for client " +
                                    std::to_string(client_id));
                for (int64_t i = 0; i < take[a]; ++i)
                    rows.push_back(pool[size_t(label)][pool_at[size_t(label)]++]);
            }
            std::sort(rows.begin(), rows.end());
            std::vector<int> sshape = data.x.shape;
            sshape[0] = int(rows.size());
            shard.data.x = Tensor(sshape);
            shard.data.y.resize(rows.size());
            for (size_t i = 0; i < rows.size(); ++i) {
                const float* src = data.x.row(rows[i]);
                std::copy(src, src + data.x.row_size(), shard.data.x.row(int(i)));
                shard.data.y[i] = data.y[size_t(rows[i])];
            }
            shards.push_back(std::move(shard));
        }
    }
    return shards;
}

// ---------------------------------------------------------------------------
// Scenario IO

inline void from_json(const nlohmann::json& j, DomainSpec& d) {
    d.name = j.at("name").get<std::string>();
    d.type = j.value("type", std::string("gaussian2d"));
    d.classes = j.value("classes", 4);
    if (j.contains("center")) {
        d.center_x = j["center"][0].get<double>();
        d.center_y = j["center"][1].get<double>();
    }
    d.rotation = j.value("rotation", 0.0);
    d.radius = j.value("radius", 0.35);
    d.sigma = j.value("sigma", 0.04);
    d.train_per_class = j.value("train_per_class", 1500);
    d.test_per_class = j.value("test_per_class", 250);
    d.images = j.value("images", std::string());
    d.labels = j.value("labels", std::string());
    d.test_images = j.value("test_images", std::string());
    d.test_labels = j.value("test_labels", std::string());
}

inline void from_json(const nlohmann::json& j, DomainAssignment& a) {
    a.domain = j.at("domain").get<std::string>();
    a.clients = j.at("clients").get<int>();
    if (j.contains("size_schedule"))
        for (const auto& e : j["size_schedule"])
            a.size_schedule.push_back({e.at("clients").get<int>(), e.at("n").get<int64_t>()});
    if (j.contains("n"))
        a.size_schedule.push_back({a.clients, j["n"].get<int64_t>()});
    if (j.contains("exclusion_schedule"))
        for (const auto& e : j["exclusion_schedule"]) {
            ExclusionScheduleEntry x;
            x.clients = e.at("clients").get<int>();
            x.labels_excluded = e.value("labels_excluded", 0);
            if (e.contains("labels")) {
                x.labels = e["labels"].get<std::vector<int>>();
                x.labels_excluded = int(x.labels.size());
            }
            a.exclusion_schedule.push_back(std::move(x));
        }
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
    Scenario s;
    s.name = j.value("name", std::string("unnamed"));
    for (const auto& dj : j.at("domains")) s.domains.push_back(dj.get<DomainSpec>());
    for (const auto& aj : j.at("assignments"))
        s.assignments.push_back(aj.get<DomainAssignment>());
    for (const auto& a : s.assignments) s.domain_index(a.domain);  // validates names
    return s;
}

inline Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("scenario file " + path + ": " + e.what());
    }
    return scenario_from_json(j);
}

// Train/test data per domain, synthesizing or loading as declared.
inline std::pair<std::vector<Dataset>, std::vector<Dataset>> realize_domains(
    const Scenario& sc, uint64_t seed) {
    std::vector<Dataset> train, test;
    for (size_t d = 0; d < sc.domains.size(); ++d) {
        const DomainSpec& spec = sc.domains[d];
        if (spec.type == "gaussian2d") {
            train.push_back(synth_domain(spec, spec.train_per_class, mix_seed(seed, d, 0)));
            test.push_back(synth_domain(spec, spec.test_per_class, mix_seed(seed, d, 1)));
        } else if (spec.type == "idx") {
            train.push_back(load_idx(spec.images, spec.labels));
            test.push_back(load_idx(spec.test_images, spec.test_labels));
        } else {
            throw ConfigError("scenario: unknown domain type '" + spec.type + "'");
        }
    }
    return {std::move(train), std::move(test)};
}

}  // namespace splitgan
