#pragma once
// End-to-end pipeline: plan cuts, initialize segments, split-train the cGAN
// with the three-pass discriminator schedule, federate every E epochs, and
// emit metrics and run artifacts.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/cluster_aggregator.hpp"
#include "splitgan/cut_optimizer.hpp"
#include "splitgan/data_hub.hpp"
#include "splitgan/errors.hpp"
#include "splitgan/eval_metrics.hpp"
#include "splitgan/run_io.hpp"
#include "splitgan/split_engine.hpp"

namespace splitgan {

struct Flags {
    bool clustering = true;
    bool kld = true;
    std::string kld_source = "activations";  // or "labels"
    bool batchnorm = true;
    bool saturating = false;
};

struct RunConfig {
    std::string architecture;
    std::string fleet;
    std::string scenario;
    int batch = 64;
    int epochs = 30;
    int federate_every = 5;  // E
    double beta = 150.0;
    int clusters = 0;  // 0 = one per declared domain
    Flags flags;
    OptimConfig optimizer;
    GaConfig ga;
    EvalConfig eval;
    bool score_every_round = true;
    uint64_t seed = 1;
    std::string out_dir;
};

struct StageError : std::runtime_error {
    std::string stage;
    StageError(std::string st, const std::string& m)
        : std::runtime_error("[" + st + "] " + m), stage(std::move(st)) {}
};

inline void validate_config(const RunConfig& c) {
    if (c.federate_every < 1) throw ConfigError("config: federate_every must be >= 1");
    if (c.epochs < c.federate_every)
        throw ConfigError("config: epochs must be >= federate_every");
    if (c.batch < 1) throw ConfigError("config: batch must be >= 1");
    if (c.flags.kld_source != "activations" && c.flags.kld_source != "labels")
        throw ConfigError("config: kld_source must be 'activations' or 'labels'");
}

struct GanLosses {
    double d_loss = 0;
    double g_loss = 0;
};

// D loss = BCE(real,1) + BCE(fake,0); G loss is non-saturating BCE(fake,1)
// unless the saturating flag restores the literal minimax form.
inline GanLosses gan_losses(const Tensor& d_real_out, const Tensor& d_fake_out,
                            bool saturating = false) {
    GanLosses g;
    g.d_loss = bce_loss(d_real_out, 1.0) + bce_loss(d_fake_out, 0.0);
    g.g_loss = saturating ? saturating_loss(d_fake_out) : bce_loss(d_fake_out, 1.0);
    return g;
}

struct DomainResult {
    std::string name;
    ClassMetrics metrics;
    double generation_score = 0;
};

struct RunSummary {
    std::vector<DomainResult> domains;
    double latency_seconds = 0;
    int federation_rounds = 0;
    std::string run_dir;
    std::vector<std::string> round_types;
};

namespace detail {

inline std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

// lowest-id client of the domain represents it at evaluation time
inline int representative_client(const std::vector<ClientShard>& shards, int domain) {
    for (size_t k = 0; k < shards.size(); ++k)
        if (shards[k].domain == domain) return int(k);
    throw ConfigError("no client holds data from domain index " + std::to_string(domain));
}

inline GeneratorFn make_generator(SplitEngine& eng, int k) {
    return [&eng, k](int count, const std::vector<int>& labels, Rng& rng) {
        SegmentStore g = eng.monolithic_store(k, kGen);
        const NetworkProfile& net = eng.profile->gen;
        Tensor out;
        int at = 0;
        std::vector<Tensor> parts;
        while (at < count) {
            int bs = std::min(256, count - at);
            Tensor z({bs, eng.profile->noise_dim});
            for (auto& v : z.data) v = float(rng.uniform(-1.0, 1.0));
            std::vector<int> lab(labels.begin() + at, labels.begin() + at + bs);
            parts.push_back(forward_blocks(net, g, 1, net.n(), z, lab,
                                           eng.profile->classes, false, nullptr));
            at += bs;
        }
        std::vector<const Tensor*> ptrs;
        for (auto& p : parts) ptrs.push_back(&p);
        return concat_rows(ptrs);
    };
}

inline std::string device_table_text(const Fleet& fleet, const ModelProfile& p,
                                     const CutAssignment& cuts) {
    std::ostringstream os;
    os << "client-side layers per device\n";
    auto seg_names = [&](const NetworkProfile& net, int lo, int hi) {
        std::string s;
        for (int i = lo; i <= hi; ++i) {
            if (!s.empty()) s += " | ";
            s += net.block(i).major().describe();
        }
        return s;
    };
    for (size_t k = 0; k < fleet.clients.size(); ++k) {
        const auto& c = fleet.clients[k];
        const auto& q = cuts[k];
        os << "client " << c.id;
        if (!c.profile_name.empty()) os << " (" << c.profile_name << ")";
        os << "\n";
        os << "  G_H: " << seg_names(p.gen, 1, q.g_head) << "\n";
        os << "  G_T: " << seg_names(p.gen, q.g_tail, p.gen.n()) << "\n";
        os << "  D_H: " << seg_names(p.disc, 1, q.d_head) << "\n";
        os << "  D_T: " << seg_names(p.disc, q.d_tail, p.disc.n()) << "\n";
    }
    return os.str();
}

inline nlohmann::json breakdown_to_json(const LatencyBreakdown& lb) {
    auto net_json = [](const NetBreakdown& nb) {
        return nlohmann::json{{"s_fwd", nb.s_fwd},
                              {"s_bwd", nb.s_bwd},
                              {"l_fwd", nb.l_fwd},
                              {"l_bwd", nb.l_bwd}};
    };
    return nlohmann::json{{"generator", net_json(lb.gen)},
                          {"discriminator", net_json(lb.disc)},
                          {"l_total", lb.l_total}};
}

}  // namespace detail

// Regenerate plot-data series from an existing metrics.csv (used by `train`
// at the end of a run and by `report` standalone).
inline std::vector<std::string> write_plotdata(const std::filesystem::path& run_dir) {
    std::ifstream in(run_dir / "metrics.csv");
    if (!in) throw ConfigError("missing metrics.csv in " + run_dir.string());
    std::filesystem::create_directories(run_dir / "plotdata");
    std::string line;
    std::getline(in, line);  // header: round,domain,generation_score
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> series;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        size_t a = line.find(','), b = line.find(',', a + 1);
        if (a == std::string::npos || b == std::string::npos) continue;
        series[line.substr(a + 1, b - a - 1)].emplace_back(line.substr(0, a),
                                                           line.substr(b + 1));
    }
    std::vector<std::string> written;
    for (auto& [domain, pts] : series) {
        std::string rel = "plotdata/score_" + domain + ".csv";
        CsvWriter w((run_dir / rel).string(), {"round", "generation_score"});
        for (auto& [r, v] : pts) w.row({r, v});
        written.push_back(rel);
    }
    return written;
}

class Orchestrator {
public:
    explicit Orchestrator(RunConfig cfg) : cfg_(std::move(cfg)) {}

    RunSummary run() {
        validate_config(cfg_);
        std::filesystem::path dir(cfg_.out_dir);
        std::filesystem::create_directories(dir);
        RunLock lock(dir);
        manifest_.seed = cfg_.seed;
        manifest_.started_at = detail::iso_now();

        RunSummary summary;
        summary.run_dir = dir.string();
        try {
            stage_ = "config";
            load_inputs();
            stage_ = "data";
            prepare_data();
            stage_ = "plan";
            plan(dir);
            stage_ = "init";
            engine_.optim = cfg_.optimizer;
            engine_.saturating = cfg_.flags.saturating;
            engine_.init(profile_, fleet_, cuts_, mix_seed(cfg_.seed, 0x1217ULL));
            stage_ = "frozen-classifiers";
            train_frozen(dir);
            stage_ = "train";
            train_loop(dir, summary);
            stage_ = "final-eval";
            final_eval(dir, summary);
        } catch (const std::exception& e) {
            manifest_.failed_stage = stage_;
            manifest_.error = e.what();
            manifest_.finished_at = detail::iso_now();
            try {
                write_manifest(dir, manifest_);
            } catch (...) {
            }
            throw StageError(stage_, e.what());
        }
        manifest_.finished_at = detail::iso_now();
        write_manifest(dir, manifest_);
        return summary;
    }

    // exposed for tests
    SplitEngine& engine() { return engine_; }
    const std::vector<ClientShard>& shards() const { return shards_; }
    const std::vector<std::string>& round_types() const { return round_types_; }
    const CutAssignment& cuts() const { return cuts_; }

private:
    void load_inputs() {
        profile_ = load_profile(cfg_.architecture);
        if (!cfg_.flags.batchnorm) profile_ = strip_batchnorm(profile_);
        fleet_ = load_fleet(cfg_.fleet);
        fleet_.batch = cfg_.batch;
        scenario_ = load_scenario(cfg_.scenario);
        if (scenario_.total_clients() != int(fleet_.clients.size()))
            throw ConfigError("scenario declares " + std::to_string(scenario_.total_clients()) +
                              " clients but the fleet has " +
                              std::to_string(fleet_.clients.size()));
        for (const auto& d : scenario_.domains)
            if (d.classes != profile_.classes)
                throw ConfigError("domain '" + d.name + "' has " +
                                  std::to_string(d.classes) + " classes, architecture expects " +
                                  std::to_string(profile_.classes));
    }

    void prepare_data() {
        auto [train, test] = realize_domains(scenario_, mix_seed(cfg_.seed, 0xda7aULL));
        domain_train_ = std::move(train);
        domain_test_ = std::move(test);
        shards_ = partition(domain_train_, scenario_, mix_seed(cfg_.seed, 0x54adULL));
        for (size_t k = 0; k < shards_.size(); ++k) fleet_.clients[k].n = shards_[k].n;
        label_sets_.clear();
        label_hists_.clear();
        for (const auto& s : shards_) {
            std::vector<int64_t> counts(size_t(profile_.classes), 0);
            for (int y : s.data.y) ++counts[size_t(y)];
            std::vector<int> present;
            std::vector<double> hist(size_t(profile_.classes), 0.0);
            for (int c = 0; c < profile_.classes; ++c) {
                if (counts[size_t(c)] > 0) present.push_back(c);
                hist[size_t(c)] = double(counts[size_t(c)]) / double(s.data.y.size());
            }
            label_sets_.push_back(std::move(present));
            label_hists_[s.client_id] = std::move(hist);
        }
    }

    void plan(const std::filesystem::path& dir) {
        GaConfig ga = cfg_.ga;
        ga.seed = mix_seed(cfg_.seed, 0x61aULL);
        GaResult res = evolve(ga, fleet_, profile_);
        cuts_ = res.best_cuts;
        LatencyBreakdown lb = total_latency(fleet_, profile_, cuts_);
        nlohmann::json j;
        j["cuts"] = cuts_to_json(cuts_);
        j["l_total_seconds"] = lb.l_total;
        j["latency"] = detail::breakdown_to_json(lb);
        j["ga_generations"] = res.generations_run;
        write_json((dir / "assignment.json").string(), j);
        write_text((dir / "segment_table.txt").string(),
                   detail::device_table_text(fleet_, profile_, cuts_));
        manifest_.artifacts.push_back("assignment.json");
        manifest_.artifacts.push_back("segment_table.txt");
        planned_latency_ = lb.l_total;
    }

    void train_frozen(const std::filesystem::path& dir) {
        std::filesystem::create_directories(dir / "frozen");
        frozen_.clear();
        for (size_t d = 0; d < scenario_.domains.size(); ++d) {
            FrozenClassifier f = train_frozen_classifier(
                scenario_.domains[d].name, domain_train_[d], domain_test_[d], cfg_.eval,
                mix_seed(cfg_.seed, 0xf2ULL, d));
            std::string rel = "frozen/" + scenario_.domains[d].name + ".json";
            write_json((dir / rel).string(), frozen_to_json(f));
            manifest_.artifacts.push_back(rel);
            frozen_.push_back(std::move(f));
        }
    }

    void train_loop(const std::filesystem::path& dir, RunSummary& summary) {
        int m = engine_.client_count();
        int64_t max_n = 0;
        for (const auto& s : shards_) max_n = std::max(max_n, s.n);
        int steps = int((max_n + cfg_.batch - 1) / cfg_.batch);

        CsvWriter rounds((dir / "rounds.csv").string(),
                         {"round", "epoch", "type", "client", "cluster", "kld", "score",
                          "score_global", "d_loss", "g_loss"});
        CsvWriter metrics((dir / "metrics.csv").string(),
                          {"round", "domain", "generation_score"});
        manifest_.artifacts.push_back("rounds.csv");
        manifest_.artifacts.push_back("metrics.csv");

        FederationConfig fed;
        fed.clustering = cfg_.flags.clustering;
        fed.kld_weighting = cfg_.flags.kld;
        fed.label_source = cfg_.flags.kld_source == "labels";
        fed.k = cfg_.clusters > 0 ? cfg_.clusters : int(scenario_.domains.size());
        fed.beta = cfg_.beta;

        std::vector<double> dl_acc(size_t(m), 0.0), gl_acc(size_t(m), 0.0);
        int64_t acc_steps = 0;
        int round_idx = 0;
        for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
            // per-epoch deterministic shuffles; short shards cycle
            std::vector<std::vector<int>> order((size_t(m)));
            for (int k = 0; k < m; ++k) {
                order[size_t(k)].resize(size_t(shards_[size_t(k)].n));
                std::iota(order[size_t(k)].begin(), order[size_t(k)].end(), 0);
                Rng r(mix_seed(cfg_.seed, uint64_t(epoch) * 1000 + uint64_t(k), 0xEULL));
                for (size_t i = order[size_t(k)].size(); i > 1; --i)
                    std::swap(order[size_t(k)][i - 1],
                              order[size_t(k)][size_t(r.uniform_int(0, int(i) - 1))]);
            }
            for (int st = 0; st < steps; ++st) {
                std::vector<Tensor> real((size_t(m)));
                std::vector<std::vector<int>> labels((size_t(m)));
                for (int k = 0; k < m; ++k) {
                    const ClientShard& sh = shards_[size_t(k)];
                    std::vector<int> shape = sh.data.x.shape;
                    shape[0] = cfg_.batch;
                    real[size_t(k)] = Tensor(shape);
                    labels[size_t(k)].resize(size_t(cfg_.batch));
                    for (int i = 0; i < cfg_.batch; ++i) {
                        int idx = order[size_t(k)][size_t((int64_t(st) * cfg_.batch + i) %
                                                          sh.n)];
                        const float* src = sh.data.x.row(idx);
                        std::copy(src, src + sh.data.x.row_size(),
                                  real[size_t(k)].row(i));
                        labels[size_t(k)][size_t(i)] = sh.data.y[size_t(idx)];
                    }
                }
                Rng step_rng(mix_seed(cfg_.seed, uint64_t(epoch), uint64_t(st)));
                StepResult sr = engine_.training_step(real, labels, label_sets_, step_rng);
                for (int k = 0; k < m; ++k) {
                    dl_acc[size_t(k)] += sr.d_loss[size_t(k)];
                    gl_acc[size_t(k)] += sr.g_loss[size_t(k)];
                }
                ++acc_steps;
            }
            if (epoch % cfg_.federate_every == 0) {
                ++round_idx;
                auto summaries = engine_.take_mid_summaries();
                RoundReport rep = federation_round(engine_, round_idx, summaries,
                                                   label_hists_, fed,
                                                   mix_seed(cfg_.seed, 0xfedULL));
                round_types_.push_back(rep.type);
                for (int k = 0; k < m; ++k) {
                    const auto& r = rep.clients[size_t(k)];
                    rounds.row({std::to_string(round_idx), std::to_string(epoch), rep.type,
                                std::to_string(r.client_id), std::to_string(r.cluster),
                                format_g(r.kld_value), format_g(r.score),
                                format_g(r.score_global),
                                format_g(dl_acc[size_t(k)] / double(acc_steps)),
                                format_g(gl_acc[size_t(k)] / double(acc_steps))});
                }
                std::fill(dl_acc.begin(), dl_acc.end(), 0.0);
                std::fill(gl_acc.begin(), gl_acc.end(), 0.0);
                acc_steps = 0;
                if (cfg_.score_every_round) {
                    for (size_t d = 0; d < scenario_.domains.size(); ++d) {
                        int rep_k = detail::representative_client(shards_, int(d));
                        double sc = generation_score(
                            detail::make_generator(engine_, rep_k), frozen_[d],
                            cfg_.eval.n_gen, mix_seed(cfg_.seed, 0x5cULL, uint64_t(round_idx)));
                        metrics.row({std::to_string(round_idx), scenario_.domains[d].name,
                                     format_g(sc)});
                    }
                }
            }
        }
        rounds.close();
        metrics.close();
        summary.federation_rounds = round_idx;
        summary.round_types = round_types_;
    }

    void final_eval(const std::filesystem::path& dir, RunSummary& summary) {
        nlohmann::json sj;
        sj["scenario"] = scenario_.name;
        sj["architecture"] = profile_.name;
        sj["federation_rounds"] = summary.federation_rounds;
        sj["latency_seconds_per_iteration"] = planned_latency_;
        summary.latency_seconds = planned_latency_;
        nlohmann::json domains = nlohmann::json::array();
        for (size_t d = 0; d < scenario_.domains.size(); ++d) {
            int rep_k = detail::representative_client(shards_, int(d));
            GeneratorFn gen = detail::make_generator(engine_, rep_k);
            ClassMetrics cm = classifier_eval(gen, domain_test_[d], profile_.classes,
                                              cfg_.eval, mix_seed(cfg_.seed, 0xe7a1ULL, d));
            double score = generation_score(gen, frozen_[d], cfg_.eval.n_gen,
                                            mix_seed(cfg_.seed, 0x5cf1ULL, d));
            DomainResult res;
            res.name = scenario_.domains[d].name;
            res.metrics = cm;
            res.generation_score = score;
            summary.domains.push_back(res);
            domains.push_back({{"domain", res.name},
                               {"accuracy", cm.accuracy},
                               {"precision", cm.precision},
                               {"recall", cm.recall},
                               {"f1", cm.f1},
                               {"fpr", cm.fpr},
                               {"generation_score", score}});
        }
        sj["domains"] = std::move(domains);
        write_json((dir / "summary.json").string(), sj);
        manifest_.artifacts.push_back("summary.json");

        write_json((dir / "models.json").string(), engine_state_to_json(engine_));
        manifest_.artifacts.push_back("models.json");

        for (const auto& rel : write_plotdata(dir)) manifest_.artifacts.push_back(rel);
        manifest_.config_snapshot = config_snapshot_;
    }

public:
    nlohmann::json config_snapshot_;

private:
    RunConfig cfg_;
    std::string stage_;
    ModelProfile profile_;
    Fleet fleet_;
    Scenario scenario_;
    std::vector<Dataset> domain_train_, domain_test_;
    std::vector<ClientShard> shards_;
    std::vector<std::vector<int>> label_sets_;
    std::map<int, std::vector<double>> label_hists_;
    CutAssignment cuts_;
    SplitEngine engine_;
    std::vector<FrozenClassifier> frozen_;
    std::vector<std::string> round_types_;
    RunManifest manifest_;
    double planned_latency_ = 0;
};

// ---------------------------------------------------------------------------
// Config file parsing (CLI overrides applied by the caller)

inline RunConfig config_from_json(const nlohmann::json& j, const std::string& base_dir) {
    RunConfig c;
    auto resolve = [&](const std::string& p) {
        if (p.empty() || p.front() == '/') return p;
        std::filesystem::path cand = std::filesystem::path(base_dir) / p;
        if (std::filesystem::exists(cand)) return cand.string();
        return p;
    };
    c.architecture = resolve(j.at("architecture").get<std::string>());
    c.fleet = resolve(j.at("fleet").get<std::string>());
    c.scenario = resolve(j.at("scenario").get<std::string>());
    c.batch = j.value("batch", 64);
    c.epochs = j.value("epochs", 30);
    c.federate_every = j.value("federate_every", 5);
    c.beta = j.value("beta", 150.0);
    c.clusters = j.value("clusters", 0);
    c.score_every_round = j.value("score_every_round", true);
    c.seed = j.value("seed", uint64_t(1));
    c.out_dir = j.value("out", std::string());
    if (j.contains("flags")) {
        const auto& f = j["flags"];
        c.flags.clustering = f.value("clustering", true);
        c.flags.kld = f.value("kld", true);
        c.flags.kld_source = f.value("kld_source", std::string("activations"));
        c.flags.batchnorm = f.value("batchnorm", true);
        c.flags.saturating = f.value("saturating", false);
    }
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        c.optimizer.lr = o.value("lr", 2e-4);
        c.optimizer.beta1 = o.value("beta1", 0.5);
        c.optimizer.beta2 = o.value("beta2", 0.999);
    }
    if (j.contains("ga")) {
        const auto& g = j["ga"];
        c.ga.population = g.value("population", 200);
        c.ga.generations = g.value("generations", 200);
        c.ga.tournament = g.value("tournament", 5);
        c.ga.elites = g.value("elites", 2);
        c.ga.stagnation = g.value("stagnation", 30);
        c.ga.mutation_rate = g.value("mutation_rate", 0.1);
        c.ga.reduce_target = g.value("reduce_target", 20);
    } else {
        c.ga.population = 200;  // desk-scale default
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        c.eval.n_gen = e.value("n_gen", 3000);
        c.eval.classifier_hidden = e.value("classifier_hidden", 64);
        c.eval.classifier_epochs = e.value("classifier_epochs", 40);
        c.eval.classifier_batch = e.value("classifier_batch", 64);
        c.eval.classifier_lr = e.value("classifier_lr", 1e-3);
        c.eval.frozen_min_accuracy = e.value("frozen_min_accuracy", 0.97);
    }
    return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["architecture"] = c.architecture;
    j["fleet"] = c.fleet;
    j["scenario"] = c.scenario;
    j["batch"] = c.batch;
    j["epochs"] = c.epochs;
    j["federate_every"] = c.federate_every;
    j["beta"] = c.beta;
    j["clusters"] = c.clusters;
    j["score_every_round"] = c.score_every_round;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["flags"] = {{"clustering", c.flags.clustering},
                  {"kld", c.flags.kld},
                  {"kld_source", c.flags.kld_source},
                  {"batchnorm", c.flags.batchnorm},
                  {"saturating", c.flags.saturating}};
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2}};
    j["ga"] = {{"population", c.ga.population},   {"generations", c.ga.generations},
               {"tournament", c.ga.tournament},   {"elites", c.ga.elites},
               {"stagnation", c.ga.stagnation},   {"mutation_rate", c.ga.mutation_rate},
               {"reduce_target", c.ga.reduce_target}};
    j["eval"] = {{"n_gen", c.eval.n_gen},
                 {"classifier_hidden", c.eval.classifier_hidden},
                 {"classifier_epochs", c.eval.classifier_epochs},
                 {"classifier_batch", c.eval.classifier_batch},
                 {"classifier_lr", c.eval.classifier_lr},
                 {"frozen_min_accuracy", c.eval.frozen_min_accuracy}};
    return j;
}

}  // namespace splitgan
