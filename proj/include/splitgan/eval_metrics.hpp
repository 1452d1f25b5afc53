#pragma once
// Evaluation: classifier-on-generated-data metrics, an inception-style
// generation score against a frozen per-domain classifier, and the analytical
// latency report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/cluster_aggregator.hpp"
#include "splitgan/data_hub.hpp"
#include "splitgan/errors.hpp"
#include "splitgan/latency_model.hpp"
#include "splitgan/model_graph.hpp"
#include "splitgan/rng.hpp"

namespace splitgan {

// generator callable: (count, labels, rng) -> samples
using GeneratorFn =
    std::function<Tensor(int count, const std::vector<int>& labels, Rng& rng)>;

struct EvalConfig {
    int n_gen = 3000;
    int classifier_hidden = 64;
    int classifier_epochs = 40;
    int classifier_batch = 64;
    double classifier_lr = 1e-3;
    double frozen_min_accuracy = 0.97;
};

// ---------------------------------------------------------------------------
// Small dense softmax classifier (two hidden layers) on flat features.

struct Classifier {
    NetworkProfile net;
    SegmentStore params;
    int classes = 0;
    int in_dim = 0;

    Tensor logits(const Tensor& flat_x) {
        SegmentStore& p = const_cast<SegmentStore&>(params);
        return forward_blocks(net, p, 1, net.n(), flat_x, {}, 0, false, nullptr);
    }

    // softmax probabilities, rows normalized
    Tensor proba(const Tensor& flat_x) {
        Tensor lg = logits(flat_x);
        Tensor out(lg.shape);
        for (int r = 0; r < lg.rows(); ++r) {
            const float* in = lg.row(r);
            float* o = out.row(r);
            double mx = in[0];
            for (int c = 1; c < classes; ++c) mx = std::max(mx, double(in[c]));
            double sum = 0;
            for (int c = 0; c < classes; ++c) {
                double e = std::exp(double(in[c]) - mx);
                o[c] = float(e);
                sum += e;
            }
            for (int c = 0; c < classes; ++c) o[c] = float(o[c] / sum);
        }
        return out;
    }

    std::vector<int> predict(const Tensor& flat_x) {
        Tensor lg = logits(flat_x);
        std::vector<int> out(size_t(lg.rows()));
        for (int r = 0; r < lg.rows(); ++r) {
            const float* in = lg.row(r);
            int best = 0;
            for (int c = 1; c < classes; ++c)
                if (in[c] > in[best]) best = c;
            out[size_t(r)] = best;
        }
        return out;
    }
};

inline Tensor flatten_features(const Tensor& x) {
    return reshape(x, {x.rows(), int(x.row_size())});
}

inline Classifier train_classifier(const Tensor& features, const std::vector<int>& labels,
                                   int classes, const EvalConfig& cfg, uint64_t seed) {
    Classifier cl;
    cl.classes = classes;
    Tensor flat = flatten_features(features);
    cl.in_dim = int(flat.row_size());
    int h = cfg.classifier_hidden;
    std::vector<LayerSpec> ls;
    LayerSpec d1;
    d1.kind = LayerKind::dense;
    d1.in = cl.in_dim;
    d1.out = h;
    LayerSpec r;
    r.kind = LayerKind::relu;
    LayerSpec d2 = d1;
    d2.in = h;
    d2.out = h;
    LayerSpec d3 = d1;
    d3.in = h;
    d3.out = classes;
    ls = {d1, r, d2, r, d3};
    cl.net = compile_network(ls, {cl.in_dim}, 0, "classifier");
    cl.params = make_segment(cl.net, 0, 1, cl.net.n(), mix_seed(seed, 0xc1a55ULL), 7);

    AdamState opt;
    OptimConfig oc;
    oc.lr = cfg.classifier_lr;
    oc.beta1 = 0.9;
    Rng rng(mix_seed(seed, 0x7121aULL));
    int n = flat.rows();
    std::vector<int> order((size_t(n)));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < cfg.classifier_epochs; ++e) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(rng.uniform_int(0, int(i) - 1))]);
        for (int at = 0; at < n; at += cfg.classifier_batch) {
            int bs = std::min(cfg.classifier_batch, n - at);
            Tensor xb({bs, cl.in_dim});
            std::vector<int> yb((size_t(bs)));
            for (int i = 0; i < bs; ++i) {
                const float* src = flat.row(order[size_t(at + i)]);
                std::copy(src, src + cl.in_dim, xb.row(i));
                yb[size_t(i)] = labels[size_t(order[size_t(at + i)])];
            }
            ForwardCache cache;
            Tensor lg = forward_blocks(cl.net, cl.params, 1, cl.net.n(), xb, {}, 0, true,
                                       &cache);
            // softmax cross-entropy gradient: (p - onehot)/batch
            Tensor g(lg.shape);
            for (int rI = 0; rI < bs; ++rI) {
                const float* in = lg.row(rI);
                float* go = g.row(rI);
                double mx = in[0];
                for (int c = 1; c < classes; ++c) mx = std::max(mx, double(in[c]));
                double sum = 0;
                for (int c = 0; c < classes; ++c) sum += std::exp(double(in[c]) - mx);
                for (int c = 0; c < classes; ++c) {
                    double p = std::exp(double(in[c]) - mx) / sum;
                    go[c] = float((p - (yb[size_t(rI)] == c ? 1.0 : 0.0)) / bs);
                }
            }
            backward_blocks(cl.net, cl.params, cache, g);
            opt.step(cl.params, oc);
            cl.params.zero_grad();
        }
    }
    return cl;
}

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
    double accuracy = 0;
    double precision = 0;  // macro
    double recall = 0;     // macro
    double f1 = 0;         // macro
    double fpr = 0;        // macro one-vs-all
    std::vector<std::vector<int64_t>> confusion;
};

inline ClassMetrics metrics_from_confusion(const std::vector<std::vector<int64_t>>& cm) {
    int C = int(cm.size());
    ClassMetrics m;
    m.confusion = cm;
    int64_t total = 0, correct = 0;
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) {
            total += cm[size_t(i)][size_t(j)];
            if (i == j) correct += cm[size_t(i)][size_t(j)];
        }
    m.accuracy = total ? double(correct) / double(total) : 0.0;
    double ps = 0, rs = 0, fs = 0, fp_s = 0;
    for (int c = 0; c < C; ++c) {
        int64_t tp = cm[size_t(c)][size_t(c)];
        int64_t fp = 0, fn = 0;
        for (int i = 0; i < C; ++i) {
            if (i != c) {
                fp += cm[size_t(i)][size_t(c)];
                fn += cm[size_t(c)][size_t(i)];
            }
        }
        int64_t tn = total - tp - fp - fn;
        double prec = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
        double rec = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
        ps += prec;
        rs += rec;
        fs += (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        fp_s += (fp + tn) ? double(fp) / double(fp + tn) : 0.0;
    }
    m.precision = ps / C;
    m.recall = rs / C;
    m.f1 = fs / C;
    m.fpr = fp_s / C;
    return m;
}

inline ClassMetrics evaluate_classifier(Classifier& cl, const Dataset& test) {
    Tensor flat = flatten_features(test.x);
    std::vector<int> pred = cl.predict(flat);
    std::vector<std::vector<int64_t>> cm(size_t(cl.classes),
                                         std::vector<int64_t>(size_t(cl.classes), 0));
    for (size_t i = 0; i < pred.size(); ++i)
        ++cm[size_t(test.y[i])][size_t(pred[i])];
    return metrics_from_confusion(cm);
}

inline std::vector<int> uniform_labels(int count, int classes, Rng& rng) {
    std::vector<int> out((size_t(count)));
    for (int i = 0; i < count; ++i) out[size_t(i)] = i % classes;
    for (size_t i = out.size(); i > 1; --i)
        std::swap(out[i - 1], out[size_t(rng.uniform_int(0, int(i) - 1))]);
    return out;
}

// Train a fresh classifier on generated samples only, evaluate on real data.
inline ClassMetrics classifier_eval(const GeneratorFn& gen, const Dataset& real_test,
                                    int classes, const EvalConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x9e4eULL));
    std::vector<int> labels = uniform_labels(cfg.n_gen, classes, rng);
    Tensor samples = gen(cfg.n_gen, labels, rng);
    Classifier cl = train_classifier(samples, labels, classes, cfg, mix_seed(seed, 1));
    return evaluate_classifier(cl, real_test);
}

// ---------------------------------------------------------------------------
// Frozen per-domain classifier + generation score

struct FrozenClassifier {
    Classifier cl;
    std::string domain;
    double test_accuracy = 0;
    uint64_t content_hash = 0;
};

inline FrozenClassifier train_frozen_classifier(const std::string& domain,
                                                const Dataset& train, const Dataset& test,
                                                const EvalConfig& cfg, uint64_t seed) {
    FrozenClassifier f;
    f.domain = domain;
    f.cl = train_classifier(train.x, train.y, train.classes, cfg, mix_seed(seed, 0xf407eULL));
    f.test_accuracy = evaluate_classifier(f.cl, test).accuracy;
    if (f.test_accuracy < cfg.frozen_min_accuracy)
        throw InvariantError("frozen classifier for domain '" + domain + "' reaches only " +
                             std::to_string(f.test_accuracy) +
                             " accuracy; raise classifier_epochs or simplify the domain");
    uint64_t h = 1469598103934665603ULL;
    auto mixin = [&h](uint64_t v) { h = (h ^ v) * 1099511628211ULL; };
    mixin(std::hash<std::string>{}(domain));
    mixin(uint64_t(train.x.numel()));
    mixin(seed);
    for (const auto& b : f.cl.params.blocks)
        for (size_t i = 0; i < b.weight.data.size(); i += 97)
            mixin(uint64_t(std::llround(double(b.weight.data[i]) * 1e6)));
    f.content_hash = h;
    return f;
}

inline nlohmann::json frozen_to_json(const FrozenClassifier& f) {
    nlohmann::json j;
    j["domain"] = f.domain;
    j["test_accuracy"] = f.test_accuracy;
    j["content_hash"] = f.content_hash;
    j["classes"] = f.cl.classes;
    j["in_dim"] = f.cl.in_dim;
    j["hidden"] = f.cl.net.block(1).major().out;
    nlohmann::json blocks = nlohmann::json::array();
    for (auto& b : const_cast<SegmentStore&>(f.cl.params).blocks) {
        nlohmann::json bj;
        bj["weight"] = b.weight.data;
        bj["bias"] = b.bias.data;
        blocks.push_back(std::move(bj));
    }
    j["blocks"] = std::move(blocks);
    return j;
}

inline FrozenClassifier frozen_from_json(const nlohmann::json& j) {
    FrozenClassifier f;
    f.domain = j.at("domain").get<std::string>();
    f.test_accuracy = j.at("test_accuracy").get<double>();
    f.content_hash = j.at("content_hash").get<uint64_t>();
    int classes = j.at("classes").get<int>();
    int in_dim = j.at("in_dim").get<int>();
    int h = j.at("hidden").get<int>();
    EvalConfig cfg;
    cfg.classifier_hidden = h;
    cfg.classifier_epochs = 0;
    f.cl = train_classifier(Tensor({1, in_dim}), std::vector<int>{0}, classes, cfg, 1);
    const auto& blocks = j.at("blocks");
    for (size_t b = 0; b < f.cl.params.blocks.size(); ++b) {
        f.cl.params.blocks[b].weight.data = blocks.at(b).at("weight").get<std::vector<float>>();
        f.cl.params.blocks[b].bias.data = blocks.at(b).at("bias").get<std::vector<float>>();
    }
    return f;
}

// exp(mean_x KLD(p(y|x) || p_bar)) over generated samples with uniform labels
inline double generation_score(const GeneratorFn& gen, const FrozenClassifier& frozen,
                               int n_gen, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x5c04eULL));
    Classifier& cl = const_cast<Classifier&>(frozen.cl);
    std::vector<int> labels = uniform_labels(n_gen, cl.classes, rng);
    Tensor samples = gen(n_gen, labels, rng);
    Tensor p = cl.proba(flatten_features(samples));
    int C = cl.classes;
    std::vector<double> pbar(size_t(C), 0.0);
    for (int r = 0; r < p.rows(); ++r)
        for (int c = 0; c < C; ++c) pbar[size_t(c)] += double(p.row(r)[c]);
    for (auto& v : pbar) v /= double(p.rows());
    double mean_kld = 0;
    for (int r = 0; r < p.rows(); ++r) {
        std::vector<double> pi((size_t(C)));
        for (int c = 0; c < C; ++c) pi[size_t(c)] = double(p.row(r)[c]);
        mean_kld += kld(pi, pbar);
    }
    mean_kld /= double(p.rows());
    return std::exp(mean_kld);
}

// delegates to the latency model
inline double latency_report(const Fleet& fleet, const ModelProfile& p,
                             const CutAssignment& cuts) {
    return total_latency(fleet, p, cuts).l_total;
}

}  // namespace splitgan
