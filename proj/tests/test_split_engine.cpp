#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "splitgan/data_hub.hpp"
#include "splitgan/split_engine.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace splitgan;
using Catch::Approx;

namespace {

SplitEngine make_engine(const ModelProfile& p, const Fleet& fl, const CutAssignment& cuts,
                        uint64_t seed = 9) {
    SplitEngine eng;
    eng.init(p, fl, cuts, seed);
    return eng;
}

std::vector<Tensor> random_inputs(const ModelProfile& p, int net, int clients, int batch,
                                  Rng& rng) {
    std::vector<Tensor> xs;
    for (int k = 0; k < clients; ++k) {
        std::vector<int> shape = {batch};
        auto s = p.net(net).input_shape;
        shape.insert(shape.end(), s.begin(), s.end());
        Tensor t(shape);
        for (auto& v : t.data) v = float(rng.uniform(-1.0, 1.0));
        xs.push_back(std::move(t));
    }
    return xs;
}

std::vector<std::vector<int>> random_labels(int clients, int batch, int classes, Rng& rng) {
    std::vector<std::vector<int>> ls;
    ls.resize(size_t(clients));
    for (auto& l : ls) {
        l.resize(size_t(batch));
        for (auto& v : l) v = rng.uniform_int(0, classes - 1);
    }
    return ls;
}

}  // namespace

TEST_CASE("an identity head forwards its input unchanged") {
    // dense 4->4 x5 network, no embedding; block 1 set to identity
    LayerSpec d;
    d.kind = LayerKind::dense;
    d.in = 4;
    d.out = 4;
    std::vector<LayerSpec> ls = {d, d, d, d, d};
    std::vector<LayerSpec> ds = ls;
    ModelProfile p = make_profile("id5", 4, 0, ls, {4}, ds, {4});
    Fleet fl = fixtures::make_fleet({3}, 3);
    CutAssignment cuts = {{1, 5, 1, 5}};
    SplitEngine eng = make_engine(p, fl, cuts);
    auto& blk = eng.clients[0].seg[kGen][0].block(1);
    std::fill(blk.weight.data.begin(), blk.weight.data.end(), 0.0f);
    for (int i = 0; i < 4; ++i) blk.weight.data[size_t(i * 4 + i)] = 1.0f;
    std::fill(blk.bias.data.begin(), blk.bias.data.end(), 0.0f);
    Rng rng(4);
    Tensor x({3, 4});
    for (auto& v : x.data) v = float(rng.uniform(-1, 1));
    SplitMessage m = eng.client_forward_head(0, kGen, x, {}, false, nullptr);
    REQUIRE(m.boundary == 1);
    REQUIRE(m.rows == 3);
    for (int64_t i = 0; i < x.numel(); ++i)
        REQUIRE(m.payload.data[i] == Approx(x.data[i]).margin(1e-6));
}

TEST_CASE("table-2 device-1 cut shapes match the published segment table") {
    ModelProfile p = strip_batchnorm(fixtures::table2_profile());
    Fleet fl = fixtures::make_fleet({1}, 2);
    CutAssignment cuts = {{1, 5, 1, 5}};  // device 1: one block per segment
    SplitEngine eng = make_engine(p, fl, cuts);
    Rng rng(12);
    Tensor z({2, 100});
    for (auto& v : z.data) v = float(rng.uniform(-1, 1));
    SplitMessage head = eng.client_forward_head(0, kGen, z, {1, 8}, false, nullptr);
    REQUIRE(head.payload.shape == std::vector<int>{2, 256, 7, 7});

    // run the discriminator end to end; the tail (final FC + sigmoid) gives (b,1)
    auto imgs = random_inputs(p, kDisc, 1, 2, rng);
    PassContext ctx = eng.forward_pass(kDisc, imgs, {{3, 9}}, false);
    REQUIRE(ctx.tail_out[0].shape == std::vector<int>{2, 1});
    for (float v : ctx.tail_out[0].data) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }
}

TEST_CASE("sigmoid tail on a zero logit yields one half") {
    LayerSpec d;
    d.kind = LayerKind::dense;
    d.in = 4;
    d.out = 4;
    std::vector<LayerSpec> gen = {d, d, d, d, d};
    std::vector<LayerSpec> disc = {d, d, d, d};
    LayerSpec last;
    last.kind = LayerKind::dense;
    last.in = 4;
    last.out = 1;
    disc.push_back(last);
    LayerSpec sig;
    sig.kind = LayerKind::sigmoid_act;
    disc.push_back(sig);
    ModelProfile p = make_profile("sig5", 4, 0, gen, {4}, disc, {4});
    Fleet fl = fixtures::make_fleet({2}, 2);
    CutAssignment cuts = {{1, 5, 1, 5}};
    SplitEngine eng = make_engine(p, fl, cuts);
    auto& tail = eng.clients[0].seg[kDisc][1].block(5);
    std::fill(tail.weight.data.begin(), tail.weight.data.end(), 0.0f);
    std::fill(tail.bias.data.begin(), tail.bias.data.end(), 0.0f);
    SplitMessage fake_exit;
    fake_exit.kind = SplitMessage::Kind::activation;
    fake_exit.client_id = 0;
    fake_exit.net = kDisc;
    fake_exit.boundary = 4;
    fake_exit.rows = 2;
    fake_exit.payload = Tensor({2, 4});
    Tensor out = eng.client_forward_tail(0, kDisc, fake_exit, false, nullptr);
    REQUIRE(out.shape == std::vector<int>{2, 1});
    for (float v : out.data) REQUIRE(v == Approx(0.5).margin(1e-7));
}

TEST_CASE("server concatenation keeps per-client row attribution") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({1, 2, 3}, 4);
    // client 1 enters later (head 2) and exits earlier (tail 4)
    CutAssignment cuts = {{1, 5, 1, 5}, {2, 4, 2, 4}, {1, 4, 2, 5}};
    SplitEngine eng = make_engine(p, fl, cuts);
    Rng rng(77);
    auto xs = random_inputs(p, kGen, 3, 4, rng);
    auto ls = random_labels(3, 4, p.classes, rng);
    PassContext ctx = eng.forward_pass(kGen, xs, ls, true);
    // per-client outputs equal a monolithic run over that client's own blocks
    for (int k = 0; k < 3; ++k) {
        SegmentStore mono = eng.monolithic_store(k, kGen);
        Tensor ref = forward_blocks(p.gen, mono, 1, p.gen.n(), xs[size_t(k)],
                                    ls[size_t(k)], p.classes, true, nullptr);
        REQUIRE(ctx.tail_out[size_t(k)].shape == ref.shape);
        for (int64_t i = 0; i < ref.numel(); ++i)
            REQUIRE(double(ctx.tail_out[size_t(k)].data[i]) ==
                    Approx(double(ref.data[i])).margin(1e-7));
    }
}

TEST_CASE("a client whose span is only the middle layer passes one server block") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({4}, 2);
    CutAssignment cuts = {{2, 4, 2, 4}};  // server span = {3} for both nets
    SplitEngine eng = make_engine(p, fl, cuts);
    Rng rng(5);
    auto xs = random_inputs(p, kGen, 1, 2, rng);
    auto ls = random_labels(1, 2, p.classes, rng);
    PassContext ctx = eng.forward_pass(kGen, xs, ls, true);
    REQUIRE(ctx.server.size() == 1);
    REQUIRE(ctx.server.count(3) == 1);
    SegmentStore mono = eng.monolithic_store(0, kGen);
    Tensor ref = forward_blocks(p.gen, mono, 1, 5, xs[0], ls[0], p.classes, true, nullptr);
    for (int64_t i = 0; i < ref.numel(); ++i)
        REQUIRE(double(ctx.tail_out[0].data[i]) == Approx(double(ref.data[i])).margin(1e-7));
}

TEST_CASE("split gradients equal monolithic gradients for random cuts") {
    Rng rng(2025);
    ModelProfile p = fixtures::desk_profile();
    for (int rep = 0; rep < 10; ++rep) {
        int m = rng.uniform_int(2, 4);
        std::vector<int> devs;
        for (int i = 0; i < m; ++i) devs.push_back(rng.uniform_int(1, 7));
        Fleet fl = fixtures::make_fleet(devs, 3);
        CutAssignment cuts = oracles::random_cuts(p, m, rng);
        SplitEngine eng = make_engine(p, fl, cuts, 100 + uint64_t(rep));
        int net = rng.coin() ? kGen : kDisc;
        auto xs = random_inputs(p, net, m, 3, rng);
        auto ls = random_labels(m, 3, p.classes, rng);

        // monolithic references captured before any gradient lands
        std::vector<SegmentStore> mono;
        for (int k = 0; k < m; ++k) mono.push_back(eng.monolithic_store(k, net));

        PassContext ctx = eng.forward_pass(net, xs, ls, true);
        std::vector<Tensor> gouts;
        Rng grng(55 + uint64_t(rep));
        for (int k = 0; k < m; ++k) {
            Tensor g(ctx.tail_out[size_t(k)].shape);
            for (auto& v : g.data) v = float(grng.uniform(-1, 1));
            gouts.push_back(std::move(g));
        }
        std::vector<Tensor> in_grads = eng.backward_pass(net, ctx, gouts, true);

        for (int k = 0; k < m; ++k) {
            ForwardCache cache;
            Tensor ref = forward_blocks(p.net(net), mono[size_t(k)], 1, p.net(net).n(),
                                        xs[size_t(k)], ls[size_t(k)], p.classes, true,
                                        &cache);
            for (int64_t i = 0; i < ref.numel(); ++i)
                REQUIRE(double(ctx.tail_out[size_t(k)].data[i]) ==
                        Approx(double(ref.data[i])).margin(1e-6));
            Tensor ref_in = backward_blocks(p.net(net), mono[size_t(k)], cache,
                                            gouts[size_t(k)], true);
            for (int64_t i = 0; i < ref_in.numel(); ++i)
                REQUIRE(double(in_grads[size_t(k)].data[i]) ==
                        Approx(double(ref_in.data[i])).margin(1e-6));
        }
        // client head/tail gradients match the per-client monolithic runs
        for (int k = 0; k < m; ++k) {
            int lh = cuts[size_t(k)].head(net), lt = cuts[size_t(k)].tail(net);
            for (int i = 1; i <= lh; ++i) {
                const Tensor& a = eng.clients[size_t(k)].seg[net][0].block(i).g_weight;
                const Tensor& b = mono[size_t(k)].block(i).g_weight;
                for (int64_t j = 0; j < a.numel(); ++j)
                    REQUIRE(double(a.data[j]) == Approx(double(b.data[j])).margin(1e-6));
            }
            for (int i = lt; i <= p.net(net).n(); ++i) {
                const Tensor& a = eng.clients[size_t(k)].seg[net][1].block(i).g_weight;
                const Tensor& b = mono[size_t(k)].block(i).g_weight;
                for (int64_t j = 0; j < a.numel(); ++j)
                    REQUIRE(double(a.data[j]) == Approx(double(b.data[j])).margin(1e-6));
            }
        }
        // server gradients equal the sum of the per-client monolithic ones
        for (int i = 2; i <= p.net(net).n() - 1; ++i) {
            const Tensor& sv = eng.server_seg[net].block(i).g_weight;
            std::vector<double> sum(size_t(sv.numel()), 0.0);
            for (int k = 0; k < m; ++k) {
                int lh = cuts[size_t(k)].head(net), lt = cuts[size_t(k)].tail(net);
                if (i <= lh || i >= lt) continue;
                const Tensor& g = mono[size_t(k)].block(i).g_weight;
                for (int64_t j = 0; j < g.numel(); ++j) sum[size_t(j)] += double(g.data[j]);
            }
            for (int64_t j = 0; j < sv.numel(); ++j)
                REQUIRE(double(sv.data[j]) == Approx(sum[size_t(j)]).margin(1e-6));
        }
        eng.zero_all_grads();
    }
}

TEST_CASE("zero upstream gradients leave all stores untouched") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({1, 6}, 2);
    CutAssignment cuts = {{1, 5, 1, 5}, {2, 4, 2, 4}};
    SplitEngine eng = make_engine(p, fl, cuts);
    Rng rng(3);
    auto xs = random_inputs(p, kDisc, 2, 2, rng);
    auto ls = random_labels(2, 2, p.classes, rng);
    PassContext ctx = eng.forward_pass(kDisc, xs, ls, true);
    std::vector<Tensor> zeros;
    for (auto& t : ctx.tail_out) zeros.push_back(Tensor(t.shape));
    auto in_grads = eng.backward_pass(kDisc, ctx, zeros, true);
    for (auto& g : in_grads)
        for (float v : g.data) REQUIRE(v == 0.0f);
    for (auto& c : eng.clients)
        for (int part = 0; part < 2; ++part)
            for (auto& b : c.seg[kDisc][part].blocks)
                for (float v : b.g_weight.data) REQUIRE(v == 0.0f);
    for (auto& b : eng.server_seg[kDisc].blocks)
        for (float v : b.g_weight.data) REQUIRE(v == 0.0f);
}

TEST_CASE("frozen parameters stay untouched when excluded from the step") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({2, 3}, 2);
    CutAssignment cuts = {{1, 5, 2, 4}, {2, 4, 1, 5}};
    SplitEngine eng = make_engine(p, fl, cuts);
    Rng rng(6);
    auto xs = random_inputs(p, kDisc, 2, 2, rng);
    auto ls = random_labels(2, 2, p.classes, rng);
    PassContext ctx = eng.forward_pass(kDisc, xs, ls, true);
    std::vector<Tensor> gouts;
    for (auto& t : ctx.tail_out) {
        Tensor g(t.shape);
        for (auto& v : g.data) v = 1.0f;
        gouts.push_back(std::move(g));
    }
    auto in_grads = eng.backward_pass(kDisc, ctx, gouts, /*accum_params=*/false);
    bool nonzero_input_grad = false;
    for (auto& g : in_grads)
        for (float v : g.data) nonzero_input_grad = nonzero_input_grad || v != 0.0f;
    REQUIRE(nonzero_input_grad);
    for (auto& c : eng.clients)
        for (int part = 0; part < 2; ++part)
            for (auto& b : c.seg[kDisc][part].blocks)
                for (float v : b.g_weight.data) REQUIRE(v == 0.0f);
    for (auto& b : eng.server_seg[kDisc].blocks)
        for (float v : b.g_weight.data) REQUIRE(v == 0.0f);
}

TEST_CASE("protocol errors: duplicate, missing, and stale messages") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({1, 2}, 2);
    CutAssignment cuts = {{1, 5, 1, 5}, {2, 4, 2, 4}};
    SplitEngine eng = make_engine(p, fl, cuts);
    Rng rng(8);
    auto xs = random_inputs(p, kGen, 2, 2, rng);
    auto ls = random_labels(2, 2, p.classes, rng);
    SECTION("missing head message") {
        SplitMessage m = eng.client_forward_head(0, kGen, xs[0], ls[0], true, nullptr);
        PassContext ctx;
        REQUIRE_THROWS_AS(eng.server_forward(kGen, {m}, ctx, true, false), ProtocolError);
    }
    SECTION("stale cache: backward twice") {
        PassContext ctx = eng.forward_pass(kGen, xs, ls, true);
        std::vector<Tensor> zeros;
        for (auto& t : ctx.tail_out) zeros.push_back(Tensor(t.shape));
        eng.backward_pass(kGen, ctx, zeros, true);
        REQUIRE_THROWS_AS(eng.backward_pass(kGen, ctx, zeros, true), ProtocolError);
    }
}

TEST_CASE("training step counts passes and reports balanced untrained losses") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({1, 4}, 16);
    CutAssignment cuts = {{1, 5, 1, 5}, {2, 4, 2, 4}};
    SplitEngine eng = make_engine(p, fl, cuts, 31);
    // scale final D layer weights down so the sigmoid starts near 0.5
    for (auto& c : eng.clients) {
        auto& blk = c.seg[kDisc][1].blocks.back();
        for (auto& v : blk.weight.data) v *= 0.01f;
    }
    DomainSpec spec;
    spec.classes = 4;
    Dataset data = synth_domain(spec, 64, 99);
    std::vector<Tensor> real(2);
    std::vector<std::vector<int>> labels(2);
    for (int k = 0; k < 2; ++k) {
        real[size_t(k)] = Tensor({16, 2});
        labels[size_t(k)].resize(16);
        for (int i = 0; i < 16; ++i) {
            int idx = k * 16 + i;
            real[size_t(k)].row(i)[0] = data.x.row(idx)[0];
            real[size_t(k)].row(i)[1] = data.x.row(idx)[1];
            labels[size_t(k)][size_t(i)] = data.y[size_t(idx)];
        }
    }
    std::vector<std::vector<int>> pools = {{0, 1, 2, 3}, {0, 1, 2, 3}};
    Rng rng(17);
    StepResult sr = eng.training_step(real, labels, pools, rng);
    REQUIRE(eng.counters.fwd[kDisc] == 3);
    REQUIRE(eng.counters.bwd[kDisc] == 3);
    REQUIRE(eng.counters.fwd[kGen] == 2);
    REQUIRE(eng.counters.bwd[kGen] == 1);
    for (int k = 0; k < 2; ++k) {
        // untrained D near 0.5 output: total BCE about 2 ln 2
        REQUIRE(sr.d_loss[size_t(k)] == Approx(2.0 * std::log(2.0)).margin(0.25));
        REQUIRE(std::isfinite(sr.g_loss[size_t(k)]));
    }
    // summaries were collected for the real pass only
    auto sum = eng.take_mid_summaries();
    REQUIRE(sum.size() == 2);
    for (auto& [cid, mean] : sum) REQUIRE(mean.size() == 32);
}

TEST_CASE("generator samples drift toward the data over a short training run") {
    // observed-oracle style check on a 1-client task
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({3}, 32);
    CutAssignment cuts = {{2, 4, 2, 4}};
    SplitEngine eng = make_engine(p, fl, cuts, 11);
    eng.optim.lr = 1e-3;
    DomainSpec spec;
    spec.classes = 4;
    spec.radius = 0.45;
    Dataset data = synth_domain(spec, 256, 5);
    Rng rng(23);
    auto mean_dist = [&] {
        SegmentStore g = eng.monolithic_store(0, kGen);
        Rng zr(404);
        Tensor z({256, p.noise_dim});
        for (auto& v : z.data) v = float(zr.uniform(-1, 1));
        std::vector<int> lab(256);
        for (int i = 0; i < 256; ++i) lab[size_t(i)] = i % 4;
        Tensor out = forward_blocks(p.gen, g, 1, 5, z, lab, p.classes, false, nullptr);
        double acc = 0;
        for (int i = 0; i < 256; ++i) {
            auto [mx, my] = domain_class_mean(spec, lab[size_t(i)]);
            double dx = out.row(i)[0] - mx, dy = out.row(i)[1] - my;
            acc += std::sqrt(dx * dx + dy * dy);
        }
        return acc / 256;
    };
    double before = mean_dist();
    std::vector<std::vector<int>> pools = {{0, 1, 2, 3}};
    for (int step = 0; step < 200; ++step) {
        std::vector<Tensor> real(1);
        std::vector<std::vector<int>> labels(1);
        real[0] = Tensor({32, 2});
        labels[0].resize(32);
        for (int i = 0; i < 32; ++i) {
            int idx = (step * 32 + i) % data.size();
            real[0].row(i)[0] = data.x.row(idx)[0];
            real[0].row(i)[1] = data.x.row(idx)[1];
            labels[0][size_t(i)] = data.y[size_t(idx)];
        }
        StepResult sr = eng.training_step(real, labels, pools, rng);
        REQUIRE(std::isfinite(sr.d_loss[0]));
        REQUIRE(std::isfinite(sr.g_loss[0]));
    }
    double after = mean_dist();
    REQUIRE(after < 0.6 * before);
}

TEST_CASE("messages carry only activation or gradient payloads") {
    ModelProfile p = fixtures::desk_profile();
    Fleet fl = fixtures::make_fleet({1, 5, 7}, 4);
    CutAssignment cuts = {{1, 5, 1, 5}, {2, 4, 2, 4}, {1, 4, 2, 5}};
    SplitEngine eng = make_engine(p, fl, cuts);
    eng.audit_enabled = true;
    Rng rng(61);
    DomainSpec spec;
    spec.classes = 4;
    Dataset data = synth_domain(spec, 16, 3);
    std::vector<Tensor> real(3);
    std::vector<std::vector<int>> labels(3);
    for (int k = 0; k < 3; ++k) {
        real[size_t(k)] = Tensor({4, 2});
        labels[size_t(k)].resize(4);
        for (int i = 0; i < 4; ++i) {
            real[size_t(k)].row(i)[0] = data.x.row(k * 4 + i)[0];
            real[size_t(k)].row(i)[1] = data.x.row(k * 4 + i)[1];
            labels[size_t(k)][size_t(i)] = data.y[size_t(k * 4 + i)];
        }
    }
    std::vector<std::vector<int>> pools = {{0, 1}, {1, 2}, {0, 3}};
    eng.training_step(real, labels, pools, rng);
    REQUIRE(!eng.audit_log.empty());
    const std::set<std::string> allowed = {"kind",  "client_id",     "net",
                                           "boundary", "rows", "payload_shape",
                                           "payload"};
    for (const auto& m : eng.audit_log) {
        nlohmann::json j = message_to_json(m);
        for (auto it = j.begin(); it != j.end(); ++it) {
            REQUIRE(allowed.count(it.key()) == 1);
            REQUIRE(it.key().find("label") == std::string::npos);
        }
        REQUIRE((j["kind"] == "activation" || j["kind"] == "gradient"));
        int n = p.net(m.net).n();
        REQUIRE(m.boundary >= 1);
        REQUIRE(m.boundary <= n - 1);
        // payload size matches the boundary activation size
        REQUIRE(m.payload.row_size() == p.net(m.net).act_elems(m.boundary));
    }
}
