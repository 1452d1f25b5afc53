#include <catch2/catch_amalgamated.hpp>

#include "splitgan/eval_metrics.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace splitgan;
using Catch::Approx;

namespace {

DomainSpec ring_domain(int classes = 4) {
    DomainSpec d;
    d.name = "ring";
    d.classes = classes;
    d.radius = 0.45;
    d.sigma = 0.04;
    return d;
}

EvalConfig fast_eval() {
    EvalConfig e;
    e.n_gen = 1200;
    e.classifier_hidden = 32;
    e.classifier_epochs = 25;
    return e;
}

}  // namespace

TEST_CASE("metrics from a perfect confusion matrix") {
    std::vector<std::vector<int64_t>> cm = {{5, 0}, {0, 5}};
    ClassMetrics m = metrics_from_confusion(cm);
    REQUIRE(m.accuracy == 1.0);
    REQUIRE(m.precision == 1.0);
    REQUIRE(m.recall == 1.0);
    REQUIRE(m.f1 == 1.0);
    REQUIRE(m.fpr == 0.0);
}

TEST_CASE("macro metrics are invariant under class relabeling") {
    Rng rng(12);
    std::vector<std::vector<int64_t>> cm(4, std::vector<int64_t>(4));
    for (auto& row : cm)
        for (auto& v : row) v = rng.uniform_int(0, 40);
    ClassMetrics base = metrics_from_confusion(cm);
    std::vector<int> perm = {2, 0, 3, 1};
    std::vector<std::vector<int64_t>> pm(4, std::vector<int64_t>(4));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            pm[size_t(perm[size_t(i)])][size_t(perm[size_t(j)])] = cm[size_t(i)][size_t(j)];
    ClassMetrics p = metrics_from_confusion(pm);
    REQUIRE(p.accuracy == Approx(base.accuracy).margin(1e-12));
    REQUIRE(p.precision == Approx(base.precision).margin(1e-12));
    REQUIRE(p.recall == Approx(base.recall).margin(1e-12));
    REQUIRE(p.f1 == Approx(base.f1).margin(1e-12));
    REQUIRE(p.fpr == Approx(base.fpr).margin(1e-12));
}

TEST_CASE("classifier_eval separates cheating, honest and noise generators") {
    DomainSpec spec = ring_domain();
    Dataset train = synth_domain(spec, 800, 21);
    Dataset test = synth_domain(spec, 200, 22);
    EvalConfig cfg = fast_eval();

    // supervised upper bound: a classifier trained on real data
    Classifier base = train_classifier(train.x, train.y, 4, cfg, 31);
    double base_acc = evaluate_classifier(base, test).accuracy;
    REQUIRE(base_acc > 0.97);

    SECTION("replaying real data matches the supervised baseline") {
        GeneratorFn cheat = [&](int count, const std::vector<int>& labels, Rng& rng) {
            std::vector<std::vector<int>> by_class(4);
            for (int i = 0; i < train.size(); ++i)
                by_class[size_t(train.y[size_t(i)])].push_back(i);
            Tensor out({count, 2});
            for (int i = 0; i < count; ++i) {
                const auto& pool = by_class[size_t(labels[size_t(i)])];
                int idx = pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))];
                out.row(i)[0] = train.x.row(idx)[0];
                out.row(i)[1] = train.x.row(idx)[1];
            }
            return out;
        };
        ClassMetrics m = classifier_eval(cheat, test, 4, cfg, 77);
        REQUIRE(m.accuracy >= base_acc - 0.03);
    }
    SECTION("pure noise scores at chance level") {
        GeneratorFn noise = [&](int count, const std::vector<int>&, Rng& rng) {
            Tensor out({count, 2});
            for (auto& v : out.data) v = float(rng.uniform(-1, 1));
            return out;
        };
        // the tight test clusters quantize per-seed accuracy, so average
        // several seeds around the 1/classes chance level
        double mean = 0;
        const int seeds = 8;
        for (int s = 0; s < seeds; ++s)
            mean += classifier_eval(noise, test, 4, cfg, 70 + uint64_t(s)).accuracy;
        mean /= seeds;
        REQUIRE(mean > 0.05);
        REQUIRE(mean < 0.55);
        REQUIRE(mean == Approx(0.25).margin(0.25));
    }
    SECTION("seed-reproducible end to end") {
        GeneratorFn noise = [&](int count, const std::vector<int>&, Rng& rng) {
            Tensor out({count, 2});
            for (auto& v : out.data) v = float(rng.uniform(-1, 1));
            return out;
        };
        ClassMetrics a = classifier_eval(noise, test, 4, cfg, 99);
        ClassMetrics b = classifier_eval(noise, test, 4, cfg, 99);
        REQUIRE(a.accuracy == b.accuracy);
        REQUIRE(a.f1 == b.f1);
    }
}

TEST_CASE("frozen classifiers train, persist, and guard their accuracy bar") {
    DomainSpec spec = ring_domain();
    Dataset train = synth_domain(spec, 600, 41);
    Dataset test = synth_domain(spec, 150, 42);
    EvalConfig cfg = fast_eval();
    FrozenClassifier f = train_frozen_classifier("ring", train, test, cfg, 5);
    REQUIRE(f.test_accuracy >= 0.97);
    REQUIRE(f.content_hash != 0);

    SECTION("json round trip preserves behavior") {
        nlohmann::json j = frozen_to_json(f);
        FrozenClassifier g = frozen_from_json(j);
        Tensor probe = slice_rows(test.x, 0, 10);
        Tensor pa = f.cl.proba(flatten_features(probe));
        Tensor pb = g.cl.proba(flatten_features(probe));
        REQUIRE(pa.data == pb.data);
        REQUIRE(g.content_hash == f.content_hash);
    }
    SECTION("an untrainable configuration fails the bar with instructions") {
        EvalConfig crippled = cfg;
        crippled.classifier_epochs = 0;
        try {
            train_frozen_classifier("ring", train, test, crippled, 5);
            FAIL("expected the accuracy bar to reject");
        } catch (const InvariantError& e) {
            REQUIRE(std::string(e.what()).find("classifier_epochs") != std::string::npos);
        }
    }
}

TEST_CASE("generation score") {
    DomainSpec spec = ring_domain();
    Dataset train = synth_domain(spec, 600, 51);
    Dataset test = synth_domain(spec, 150, 52);
    EvalConfig cfg = fast_eval();

    SECTION("a classifier that outputs uniform gives exactly 1") {
        FrozenClassifier f = train_frozen_classifier("ring", train, test, cfg, 5);
        for (auto& b : f.cl.params.blocks) {
            std::fill(b.weight.data.begin(), b.weight.data.end(), 0.0f);
            std::fill(b.bias.data.begin(), b.bias.data.end(), 0.0f);
        }
        GeneratorFn noise = [&](int count, const std::vector<int>&, Rng& rng) {
            Tensor out({count, 2});
            for (auto& v : out.data) v = float(rng.uniform(-1, 1));
            return out;
        };
        REQUIRE(generation_score(noise, f, 500, 3) == Approx(1.0).margin(1e-9));
    }
    SECTION("confident, evenly spread predictions approach the class count") {
        FrozenClassifier f = train_frozen_classifier("ring", train, test, cfg, 5);
        // replay exact class means so predictions are confident one-hots
        GeneratorFn means = [&](int count, const std::vector<int>& labels, Rng&) {
            Tensor out({count, 2});
            for (int i = 0; i < count; ++i) {
                auto [mx, my] = domain_class_mean(spec, labels[size_t(i)]);
                out.row(i)[0] = float(mx);
                out.row(i)[1] = float(my);
            }
            return out;
        };
        double score = generation_score(means, f, 2000, 3);
        REQUIRE(score > 3.5);
        REQUIRE(score <= 4.0 + 1e-9);
    }
    SECTION("matches an extended-precision recomputation") {
        FrozenClassifier f = train_frozen_classifier("ring", train, test, cfg, 5);
        Tensor recorded;
        GeneratorFn gen = [&](int count, const std::vector<int>& labels, Rng& rng) {
            Tensor out({count, 2});
            for (int i = 0; i < count; ++i) {
                auto [mx, my] = domain_class_mean(spec, labels[size_t(i)]);
                out.row(i)[0] = float(mx + 0.3 * rng.normal());
                out.row(i)[1] = float(my + 0.3 * rng.normal());
            }
            recorded = out;
            return out;
        };
        double score = generation_score(gen, f, 800, 3);
        // recompute exp(mean KLD(p_i || p_bar)) in long double from the
        // recorded samples
        Tensor p = f.cl.proba(flatten_features(recorded));
        int C = 4;
        std::vector<long double> pbar(size_t(C), 0.0L);
        for (int r = 0; r < p.rows(); ++r)
            for (int c = 0; c < C; ++c) pbar[size_t(c)] += (long double)p.row(r)[c];
        for (auto& v : pbar) v /= p.rows();
        long double mean_kld = 0.0L;
        for (int r = 0; r < p.rows(); ++r) {
            long double acc = 0.0L;
            for (int c = 0; c < C; ++c) {
                long double pi = (long double)p.row(r)[c];
                if (pi > 0)
                    acc += pi * std::log(pi / std::max(pbar[size_t(c)], (long double)1e-12));
            }
            mean_kld += acc;
        }
        mean_kld /= p.rows();
        REQUIRE(score == Approx(double(std::exp(mean_kld))).margin(1e-9));
    }
    SECTION("score stays in [1, C] for arbitrary prediction sets") {
        FrozenClassifier f = train_frozen_classifier("ring", train, test, cfg, 5);
        Rng rng(9);
        for (int rep = 0; rep < 5; ++rep) {
            GeneratorFn gen = [&](int count, const std::vector<int>&, Rng& r2) {
                Tensor out({count, 2});
                for (auto& v : out.data) v = float(r2.uniform(-1.5, 1.5));
                return out;
            };
            double score = generation_score(gen, f, 400, 100 + uint64_t(rep));
            REQUIRE(score >= 1.0 - 1e-9);
            REQUIRE(score <= 4.0 + 1e-9);
        }
    }
}

TEST_CASE("latency report delegates to the analytical model") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({1, 2, 3}, 32);
    Rng rng(4);
    CutAssignment cuts = oracles::random_cuts(p, 3, rng);
    REQUIRE(latency_report(fl, p, cuts) == total_latency(fl, p, cuts).l_total);
    Fleet up = fl;
    for (auto& c : up.clients) c.dev.rate *= 2;
    REQUIRE(latency_report(up, p, cuts) <= latency_report(fl, p, cuts));
}
