#pragma once
// Shared test fixtures: bundled-config loading and small builder helpers.

#include <string>
#include <vector>

#include "splitgan/data_hub.hpp"
#include "splitgan/latency_model.hpp"
#include "splitgan/model_graph.hpp"

#ifndef SPLITGAN_CONFIG_DIR
#define SPLITGAN_CONFIG_DIR "configs"
#endif

namespace fixtures {

using namespace splitgan;

inline std::string config_path(const std::string& name) {
    return std::string(SPLITGAN_CONFIG_DIR) + "/" + name;
}

inline ModelProfile desk_profile() { return load_profile(config_path("arch_desk2d.json")); }
inline ModelProfile table2_profile() { return load_profile(config_path("arch_table2.json")); }

inline DeviceProfile table3_device(int idx) {
    // Device 1..7 and the server row
    static const double rows[8][3] = {
        {480e6, 1, 50e6},  {6000e6, 8, 150e6}, {15600e6, 8, 1000e6}, {5720e6, 8, 300e6},
        {4000e6, 4, 50e6}, {9000e6, 4, 100e6}, {12000e6, 10, 800e6}, {42000e6, 16, 1000e6}};
    DeviceProfile d;
    d.freq_hz = rows[idx - 1][0];
    d.flops_per_cycle = rows[idx - 1][1];
    d.rate = rows[idx - 1][2];
    return d;
}

inline Fleet make_fleet(const std::vector<int>& device_rows, int batch = 64,
                        int64_t n = 600) {
    Fleet f;
    f.batch = batch;
    f.server = table3_device(8);
    int id = 0;
    for (int r : device_rows) {
        FleetClient c;
        c.id = id++;
        c.dev = table3_device(r);
        c.n = n;
        c.profile_name = "device" + std::to_string(r);
        f.clients.push_back(c);
    }
    return f;
}

// dense-only profile with n major layers per network and given widths
inline ModelProfile toy_profile(int n_major, int width, int classes = 4,
                                int noise_dim = 8) {
    std::vector<LayerSpec> gen, disc;
    LayerSpec emb;
    emb.kind = LayerKind::embedding_concat;
    gen.push_back(emb);
    LayerSpec relu;
    relu.kind = LayerKind::relu;
    LayerSpec lrelu;
    lrelu.kind = LayerKind::leaky_relu;
    int in = noise_dim + classes;
    for (int i = 0; i < n_major; ++i) {
        LayerSpec d;
        d.kind = LayerKind::dense;
        d.in = in;
        d.out = i == n_major - 1 ? 2 : width;
        gen.push_back(d);
        if (i == n_major - 1) {
            LayerSpec t;
            t.kind = LayerKind::tanh_act;
            gen.push_back(t);
        } else {
            gen.push_back(relu);
        }
        in = d.out;
    }
    disc.push_back(emb);
    in = 2 + classes;
    for (int i = 0; i < n_major; ++i) {
        LayerSpec d;
        d.kind = LayerKind::dense;
        d.in = in;
        d.out = i == n_major - 1 ? 1 : width;
        disc.push_back(d);
        if (i == n_major - 1) {
            LayerSpec s;
            s.kind = LayerKind::sigmoid_act;
            disc.push_back(s);
        } else {
            disc.push_back(lrelu);
        }
        in = d.out;
    }
    return make_profile("toy" + std::to_string(n_major), noise_dim, classes, gen,
                        {noise_dim}, disc, {2});
}

// toy profile with per-block widths chosen from an rng, for varied gamma/xi
inline ModelProfile random_toy_profile(int n_major, Rng& rng) {
    int classes = 4, noise_dim = 8;
    std::vector<LayerSpec> gen, disc;
    LayerSpec emb;
    emb.kind = LayerKind::embedding_concat;
    LayerSpec relu;
    relu.kind = LayerKind::relu;
    gen.push_back(emb);
    int in = noise_dim + classes;
    for (int i = 0; i < n_major; ++i) {
        LayerSpec d;
        d.kind = LayerKind::dense;
        d.in = in;
        d.out = i == n_major - 1 ? 2 : rng.uniform_int(8, 40);
        gen.push_back(d);
        gen.push_back(relu);
        in = d.out;
    }
    disc.push_back(emb);
    in = 2 + classes;
    for (int i = 0; i < n_major; ++i) {
        LayerSpec d;
        d.kind = LayerKind::dense;
        d.in = in;
        d.out = i == n_major - 1 ? 1 : rng.uniform_int(8, 40);
        disc.push_back(d);
        disc.push_back(relu);
        in = d.out;
    }
    return make_profile("rt", noise_dim, classes, gen, {noise_dim}, disc, {2});
}

}  // namespace fixtures
