#pragma once
// Minimal layered network engine: sequential stacks of dense / conv /
// conv-transpose major layers with auxiliary layers (activations, batchnorm,
// label concat, flatten) attached to them, exact manual backprop, and static
// FLOP / parameter / activation-size accounting.
//
// Indexing convention used throughout the project: major layers ("blocks")
// are 1-indexed 1..n per network; boundary l is the output of block l, so
// boundary 0 is the network input.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/errors.hpp"
#include "splitgan/rng.hpp"
#include "splitgan/tensor.hpp"

namespace splitgan {

enum class LayerKind {
    dense,
    conv2d,
    conv_transpose2d,
    batchnorm,
    relu,
    leaky_relu,
    tanh_act,
    sigmoid_act,
    embedding_concat,
    flatten,
};

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::conv_transpose2d: return "conv_transpose2d";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::leaky_relu: return "leaky_relu";
        case LayerKind::tanh_act: return "tanh";
        case LayerKind::sigmoid_act: return "sigmoid";
        case LayerKind::embedding_concat: return "embedding_concat";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

inline LayerKind layer_kind_from(const std::string& s) {
    if (s == "dense") return LayerKind::dense;
    if (s == "conv2d") return LayerKind::conv2d;
    if (s == "conv_transpose2d") return LayerKind::conv_transpose2d;
    if (s == "batchnorm") return LayerKind::batchnorm;
    if (s == "relu") return LayerKind::relu;
    if (s == "leaky_relu") return LayerKind::leaky_relu;
    if (s == "tanh") return LayerKind::tanh_act;
    if (s == "sigmoid") return LayerKind::sigmoid_act;
    if (s == "embedding_concat") return LayerKind::embedding_concat;
    if (s == "flatten") return LayerKind::flatten;
    throw ConfigError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    // dense
    int in = 0;
    int out = 0;
    std::vector<int> out_shape;  // optional reshape of a dense output
    // conv / conv_transpose
    int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
    // leaky_relu
    float slope = 0.2f;
    // embedding_concat: appended one-hot vector ("vector") or an extra
    // label plane ("channel")
    bool channel_mode = false;

    bool is_major() const {
        return kind == LayerKind::dense || kind == LayerKind::conv2d ||
               kind == LayerKind::conv_transpose2d;
    }

    std::string describe() const {
        std::ostringstream os;
        switch (kind) {
            case LayerKind::dense:
                os << "FC " << in << "->" << out;
                if (!out_shape.empty()) os << " " << shape_str(out_shape);
                break;
            case LayerKind::conv2d:
                os << "Conv " << in_ch << "->" << out_ch << ", " << kernel << "x"
                   << kernel << ", s" << stride;
                break;
            case LayerKind::conv_transpose2d:
                os << "ConvT " << in_ch << "->" << out_ch << ", " << kernel << "x"
                   << kernel << ", s" << stride;
                break;
            default:
                os << to_string(kind);
        }
        return os.str();
    }
};

// per-sample shape inference
inline std::vector<int> infer_shape(const LayerSpec& l, const std::vector<int>& in,
                                    int classes) {
    auto fail = [&](const std::string& why) {
        throw ConfigError(std::string(to_string(l.kind)) + ": " + why +
                          ", input shape " + shape_str(in));
    };
    switch (l.kind) {
        case LayerKind::dense: {
            if (in.size() != 1 || in[0] != l.in) fail("expects flat input of size " + std::to_string(l.in));
            if (!l.out_shape.empty()) {
                if (Tensor::numel_of(l.out_shape) != l.out) fail("out_shape does not match out");
                return l.out_shape;
            }
            return {l.out};
        }
        case LayerKind::conv2d: {
            if (in.size() != 3 || in[0] != l.in_ch) fail("expects (C,H,W) with C=" + std::to_string(l.in_ch));
            int h = (in[1] + 2 * l.pad - l.kernel) / l.stride + 1;
            int w = (in[2] + 2 * l.pad - l.kernel) / l.stride + 1;
            if (h <= 0 || w <= 0) fail("kernel larger than padded input");
            return {l.out_ch, h, w};
        }
        case LayerKind::conv_transpose2d: {
            if (in.size() != 3 || in[0] != l.in_ch) fail("expects (C,H,W) with C=" + std::to_string(l.in_ch));
            int h = (in[1] - 1) * l.stride - 2 * l.pad + l.kernel;
            int w = (in[2] - 1) * l.stride - 2 * l.pad + l.kernel;
            if (h <= 0 || w <= 0) fail("degenerate output size");
            return {l.out_ch, h, w};
        }
        case LayerKind::batchnorm:
        case LayerKind::relu:
        case LayerKind::leaky_relu:
        case LayerKind::tanh_act:
        case LayerKind::sigmoid_act:
            if (in.empty()) fail("needs a non-empty input");
            return in;
        case LayerKind::flatten: {
            int64_t n = Tensor::numel_of(in);
            return {int(n)};
        }
        case LayerKind::embedding_concat: {
            if (classes <= 0) fail("profile declares no classes");
            if (l.channel_mode) {
                if (in.size() != 3) fail("channel mode expects (C,H,W)");
                return {in[0] + 1, in[1], in[2]};
            }
            if (in.size() != 1) fail("vector mode expects flat input");
            return {in[0] + classes};
        }
    }
    fail("unhandled kind");
    return {};
}

inline int64_t layer_flops_fwd(const LayerSpec& l, const std::vector<int>& out) {
    // Major layers only; auxiliary layers are negligible and counted as 0.
    switch (l.kind) {
        case LayerKind::dense:
            return 2LL * l.in * l.out;
        case LayerKind::conv2d:
            return 2LL * l.kernel * l.kernel * l.in_ch * l.out_ch * out[1] * out[2];
        case LayerKind::conv_transpose2d:
            // one MAC per input position per kernel tap per channel pair
            return 0;  // handled by caller (needs the input shape); see below
        default:
            return 0;
    }
}

inline int64_t layer_param_count(const LayerSpec& l, const std::vector<int>& in) {
    switch (l.kind) {
        case LayerKind::dense:
            return int64_t(l.in) * l.out + l.out;
        case LayerKind::conv2d:
        case LayerKind::conv_transpose2d:
            return int64_t(l.kernel) * l.kernel * l.in_ch * l.out_ch + l.out_ch;
        case LayerKind::batchnorm:
            return 2LL * in[0];  // gamma + beta
        default:
            return 0;
    }
}

// One major layer plus the auxiliary layers that travel with it.
struct MajorBlock {
    std::vector<LayerSpec> layers;  // exactly one major layer inside
    std::vector<int> in_shape;      // per-sample
    std::vector<int> out_shape;     // per-sample, after trailing aux layers
    int64_t flops_fwd = 0;          // per sample, major layer only
    int64_t param_count = 0;        // trainable params in the block
    bool relu_family = false;       // drives He vs Xavier init

    int64_t flops_bwd() const { return 2 * flops_fwd; }
    int64_t act_elems() const { return Tensor::numel_of(out_shape); }
    int64_t act_bytes() const { return act_elems() * 4; }

    const LayerSpec& major() const {
        for (const auto& l : layers)
            if (l.is_major()) return l;
        throw InvariantError("block without a major layer");
    }
};

struct NetworkProfile {
    std::vector<LayerSpec> raw_layers;
    std::vector<MajorBlock> blocks;  // blocks[i-1] is major layer i
    std::vector<int> input_shape;    // per-sample

    int n() const { return int(blocks.size()); }
    int mid() const { return (n() + 1) / 2; }

    const MajorBlock& block(int i) const { return blocks.at(size_t(i - 1)); }

    // boundary l = output of block l; boundary 0 = network input
    int64_t act_elems(int boundary) const {
        if (boundary == 0) return Tensor::numel_of(input_shape);
        return block(boundary).act_elems();
    }
    int64_t act_bytes(int boundary) const { return act_elems(boundary) * 4; }

    std::vector<int> boundary_shape(int boundary) const {
        return boundary == 0 ? input_shape : block(boundary).out_shape;
    }
};

inline NetworkProfile compile_network(const std::vector<LayerSpec>& layers,
                                      std::vector<int> input_shape, int classes,
                                      const std::string& net_name) {
    NetworkProfile net;
    net.raw_layers = layers;
    net.input_shape = input_shape;

    std::vector<int> shape = input_shape;
    std::vector<LayerSpec> pending;        // aux layers before the first major
    std::vector<int> pending_in = input_shape;
    size_t open = 0;  // 1-based index of the block taking trailing aux layers
    int raw_idx = 0;
    for (const auto& l : layers) {
        ++raw_idx;
        std::vector<int> out;
        try {
            out = infer_shape(l, shape, classes);
        } catch (const ConfigError& e) {
            throw ConfigError(net_name + " layer " + std::to_string(raw_idx) + ": " +
                              e.what());
        }
        if (l.is_major()) {
            MajorBlock b;
            b.in_shape = pending.empty() ? shape : pending_in;
            b.layers = std::move(pending);
            pending.clear();
            b.layers.push_back(l);
            b.flops_fwd = l.kind == LayerKind::conv_transpose2d
                              ? 2LL * l.kernel * l.kernel * l.in_ch * l.out_ch *
                                    shape[1] * shape[2]
                              : layer_flops_fwd(l, out);
            b.param_count = layer_param_count(l, shape);
            b.out_shape = out;
            net.blocks.push_back(std::move(b));
            open = net.blocks.size();
        } else if (open == 0) {
            if (pending.empty()) pending_in = shape;
            pending.push_back(l);
        } else {
            MajorBlock& ob = net.blocks[open - 1];
            ob.layers.push_back(l);
            ob.param_count += layer_param_count(l, shape);
            ob.out_shape = out;
            if (l.kind == LayerKind::relu || l.kind == LayerKind::leaky_relu)
                ob.relu_family = true;
        }
        shape = out;
    }
    if (!pending.empty())
        throw ConfigError(net_name + ": trailing auxiliary layers without a major layer");
    for (size_t bi = 0; bi < net.blocks.size(); ++bi) {
        int bn = 0;
        bool saw_major = false;
        for (const auto& l : net.blocks[bi].layers) {
            if (l.is_major()) saw_major = true;
            if (l.kind == LayerKind::batchnorm) {
                if (!saw_major)
                    throw ConfigError(net_name + " block " + std::to_string(bi + 1) +
                                      ": batchnorm must follow its major layer");
                ++bn;
            }
        }
        if (bn > 1)
            throw ConfigError(net_name + " block " + std::to_string(bi + 1) +
                              ": at most one batchnorm per major layer");
    }
    if (net.n() < 3)
        throw ConfigError(net_name + ": needs at least 3 major layers, got " +
                          std::to_string(net.n()));
    for (int b = 1; b < net.n(); ++b)
        if (net.act_elems(b) <= 0)
            throw ConfigError(net_name + ": empty activation at boundary " +
                              std::to_string(b));
    return net;
}

struct ModelProfile {
    std::string name;
    int noise_dim = 0;
    int classes = 0;
    NetworkProfile gen;
    NetworkProfile disc;

    const NetworkProfile& net(int which) const { return which == 0 ? gen : disc; }
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
    j = nlohmann::json{{"kind", to_string(l.kind)}};
    switch (l.kind) {
        case LayerKind::dense:
            j["in"] = l.in;
            j["out"] = l.out;
            if (!l.out_shape.empty()) j["out_shape"] = l.out_shape;
            break;
        case LayerKind::conv2d:
        case LayerKind::conv_transpose2d:
            j["in_ch"] = l.in_ch;
            j["out_ch"] = l.out_ch;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["pad"] = l.pad;
            break;
        case LayerKind::leaky_relu:
            j["slope"] = l.slope;
            break;
        case LayerKind::embedding_concat:
            j["mode"] = l.channel_mode ? "channel" : "vector";
            break;
        default:
            break;
    }
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
    l = LayerSpec{};
    l.kind = layer_kind_from(j.at("kind").get<std::string>());
    switch (l.kind) {
        case LayerKind::dense:
            l.in = j.at("in").get<int>();
            l.out = j.at("out").get<int>();
            if (j.contains("out_shape")) l.out_shape = j["out_shape"].get<std::vector<int>>();
            break;
        case LayerKind::conv2d:
        case LayerKind::conv_transpose2d:
            l.in_ch = j.at("in_ch").get<int>();
            l.out_ch = j.at("out_ch").get<int>();
            l.kernel = j.at("kernel").get<int>();
            l.stride = j.value("stride", 1);
            l.pad = j.value("pad", 0);
            break;
        case LayerKind::leaky_relu:
            l.slope = j.value("slope", 0.2f);
            break;
        case LayerKind::embedding_concat:
            l.channel_mode = j.value("mode", std::string("vector")) == "channel";
            break;
        default:
            break;
    }
}

inline ModelProfile make_profile(const std::string& name, int noise_dim, int classes,
                                 const std::vector<LayerSpec>& gen_layers,
                                 std::vector<int> gen_input,
                                 const std::vector<LayerSpec>& disc_layers,
                                 std::vector<int> disc_input) {
    ModelProfile p;
    p.name = name;
    p.noise_dim = noise_dim;
    p.classes = classes;
    p.gen = compile_network(gen_layers, std::move(gen_input), classes, "generator");
    p.disc = compile_network(disc_layers, std::move(disc_input), classes, "discriminator");
    return p;
}

inline ModelProfile profile_from_json(const nlohmann::json& j) {
    ModelProfile p;
    p.name = j.value("name", std::string("unnamed"));
    p.noise_dim = j.at("noise_dim").get<int>();
    p.classes = j.at("classes").get<int>();
    auto gl = j.at("generator").get<std::vector<LayerSpec>>();
    auto dl = j.at("discriminator").get<std::vector<LayerSpec>>();
    std::vector<int> gin = j.contains("generator_input")
                               ? j["generator_input"].get<std::vector<int>>()
                               : std::vector<int>{p.noise_dim};
    std::vector<int> din = j.at("discriminator_input").get<std::vector<int>>();
    p.gen = compile_network(gl, gin, p.classes, "generator");
    p.disc = compile_network(dl, din, p.classes, "discriminator");
    return p;
}

inline nlohmann::json profile_to_json(const ModelProfile& p) {
    nlohmann::json j;
    j["name"] = p.name;
    j["noise_dim"] = p.noise_dim;
    j["classes"] = p.classes;
    j["generator_input"] = p.gen.input_shape;
    j["discriminator_input"] = p.disc.input_shape;
    j["generator"] = p.gen.raw_layers;
    j["discriminator"] = p.disc.raw_layers;
    return j;
}

inline ModelProfile load_profile(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open architecture file " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("architecture file " + path + ": " + e.what());
    }
    return profile_from_json(j);
}

// Drop batchnorm layers everywhere (config `batchnorm: off`).
inline ModelProfile strip_batchnorm(const ModelProfile& p) {
    auto strip = [](const std::vector<LayerSpec>& ls) {
        std::vector<LayerSpec> out;
        for (const auto& l : ls)
            if (l.kind != LayerKind::batchnorm) out.push_back(l);
        return out;
    };
    return make_profile(p.name + "-nobn", p.noise_dim, p.classes,
                        strip(p.gen.raw_layers), p.gen.input_shape,
                        strip(p.disc.raw_layers), p.disc.input_shape);
}

// ---------------------------------------------------------------------------
// Accounting

struct LayerAccount {
    int64_t flops_fwd = 0;
    int64_t flops_bwd = 0;
    int64_t act_bytes = 0;
    int64_t params = 0;
};

struct AccountTable {
    std::vector<LayerAccount> gen;
    std::vector<LayerAccount> disc;
};

inline AccountTable account(const ModelProfile& p, int batch) {
    AccountTable t;
    auto fill = [&](const NetworkProfile& net, std::vector<LayerAccount>& out) {
        for (const auto& b : net.blocks) {
            LayerAccount a;
            a.flops_fwd = b.flops_fwd * batch;
            a.flops_bwd = b.flops_bwd() * batch;
            a.act_bytes = b.act_bytes();  // per sample
            a.params = b.param_count;
            out.push_back(a);
        }
    };
    fill(p.gen, t.gen);
    fill(p.disc, t.disc);
    return t;
}

// ---------------------------------------------------------------------------
// Parameters

struct BlockParams {
    Tensor weight, bias;
    Tensor g_weight, g_bias;
    bool has_bn = false;
    Tensor bn_gamma, bn_beta, bn_rmean, bn_rvar;
    Tensor g_bn_gamma, g_bn_beta;

    template <class F>
    void for_each_trainable(F&& f) {
        f("weight", weight, g_weight);
        f("bias", bias, g_bias);
        if (has_bn) {
            f("bn_gamma", bn_gamma, g_bn_gamma);
            f("bn_beta", bn_beta, g_bn_beta);
        }
    }
    template <class F>
    void for_each_state(F&& f) {  // trainable + running stats, for IO/aggregation
        f("weight", weight);
        f("bias", bias);
        if (has_bn) {
            f("bn_gamma", bn_gamma);
            f("bn_beta", bn_beta);
            f("bn_rmean", bn_rmean);
            f("bn_rvar", bn_rvar);
        }
    }
};

inline int bn_channels(const std::vector<int>& shape) {
    return shape.empty() ? 0 : shape[0];
}

// Parameters for a contiguous range of major blocks of one network.
struct SegmentStore {
    int first = 1, last = 0;  // inclusive block indices; empty when last < first
    std::vector<BlockParams> blocks;

    bool empty() const { return last < first; }
    int count() const { return empty() ? 0 : last - first + 1; }

    BlockParams& block(int i) { return blocks.at(size_t(i - first)); }
    const BlockParams& block(int i) const { return blocks.at(size_t(i - first)); }

    void zero_grad() {
        for (auto& b : blocks) {
            auto z = [](Tensor& t) { std::fill(t.data.begin(), t.data.end(), 0.0f); };
            z(b.g_weight);
            z(b.g_bias);
            if (b.has_bn) {
                z(b.g_bn_gamma);
                z(b.g_bn_beta);
            }
        }
    }
};

inline void init_block_params(BlockParams& bp, const MajorBlock& blk, int classes,
                              Rng rng) {
    const LayerSpec& m = blk.major();
    int fan_in = 0, fan_out = 0;
    std::vector<int> wshape, bshape;
    if (m.kind == LayerKind::dense) {
        fan_in = m.in;
        fan_out = m.out;
        wshape = {m.out, m.in};
        bshape = {m.out};
    } else {
        fan_in = m.in_ch * m.kernel * m.kernel;
        fan_out = m.out_ch * m.kernel * m.kernel;
        wshape = m.kind == LayerKind::conv2d
                     ? std::vector<int>{m.out_ch, m.in_ch, m.kernel, m.kernel}
                     : std::vector<int>{m.in_ch, m.out_ch, m.kernel, m.kernel};
        bshape = {m.out_ch};
    }
    double bound = blk.relu_family ? std::sqrt(6.0 / fan_in)
                                   : std::sqrt(6.0 / (fan_in + fan_out));
    bp.weight = Tensor(wshape);
    for (auto& v : bp.weight.data) v = float(rng.uniform(-bound, bound));
    bp.bias = Tensor(bshape);
    bp.g_weight = Tensor(wshape);
    bp.g_bias = Tensor(bshape);

    // batchnorm state, sized by the shape right after the layer it follows
    std::vector<int> shape = blk.in_shape;
    bool saw_major = false;
    for (const auto& l : blk.layers) {
        std::vector<int> out = infer_shape(l, shape, classes);
        if (l.is_major()) saw_major = true;
        if (l.kind == LayerKind::batchnorm && saw_major) {
            int c = bn_channels(shape);
            bp.has_bn = true;
            bp.bn_gamma = Tensor({c});
            std::fill(bp.bn_gamma.data.begin(), bp.bn_gamma.data.end(), 1.0f);
            bp.bn_beta = Tensor({c});
            bp.bn_rmean = Tensor({c});
            bp.bn_rvar = Tensor({c});
            std::fill(bp.bn_rvar.data.begin(), bp.bn_rvar.data.end(), 1.0f);
            bp.g_bn_gamma = Tensor({c});
            bp.g_bn_beta = Tensor({c});
        }
        shape = out;
    }
}

inline SegmentStore make_segment(const NetworkProfile& net, int classes, int first,
                                 int last, uint64_t seed, int net_tag) {
    SegmentStore s;
    s.first = first;
    s.last = last;
    for (int i = first; i <= last; ++i) {
        BlockParams bp;
        init_block_params(bp, net.block(i), classes,
                          Rng(mix_seed(seed, uint64_t(net_tag), uint64_t(i))));
        s.blocks.push_back(std::move(bp));
    }
    return s;
}

// Copy blocks [first..last] out of a wider store (parameters only, fresh grads).
inline SegmentStore slice_segment(const SegmentStore& src, int first, int last) {
    SegmentStore s;
    s.first = first;
    s.last = last;
    for (int i = first; i <= last; ++i) s.blocks.push_back(src.block(i));
    s.zero_grad();
    return s;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerCache {
    LayerKind kind;
    Tensor t0, t1;              // kind-specific saved tensors
    std::vector<int> in_shape;  // full shape incl. batch
};

struct ForwardCache {
    bool train = false;
    int first = 0, last = 0;
    std::vector<LayerCache> entries;
    bool consumed = false;
};

namespace detail {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

inline Tensor dense_fwd(const LayerSpec& l, const BlockParams& p, const Tensor& x,
                        LayerCache* c) {
    int b = x.rows();
    Tensor y({b, l.out});
    const float* W = p.weight.data.data();
    for (int r = 0; r < b; ++r) {
        const float* xr = x.row(r);
        float* yr = y.row(r);
        for (int o = 0; o < l.out; ++o) {
            double acc = p.bias.data[o];
            const float* w = W + size_t(o) * l.in;
            for (int i = 0; i < l.in; ++i) acc += double(w[i]) * xr[i];
            yr[o] = float(acc);
        }
    }
    if (c) c->t0 = x;
    if (!l.out_shape.empty()) {
        std::vector<int> s{b};
        s.insert(s.end(), l.out_shape.begin(), l.out_shape.end());
        y = reshape(y, s);
    }
    return y;
}

inline Tensor dense_bwd(const LayerSpec& l, BlockParams& p, const Tensor& dy_in,
                        const LayerCache& c, bool accum) {
    const Tensor& x = c.t0;
    int b = x.rows();
    Tensor dy = reshape(dy_in, {b, l.out});
    Tensor dx({b, l.in});
    const float* W = p.weight.data.data();
    for (int r = 0; r < b; ++r) {
        const float* gr = dy.row(r);
        float* dxr = dx.row(r);
        for (int i = 0; i < l.in; ++i) {
            double acc = 0;
            for (int o = 0; o < l.out; ++o) acc += double(gr[o]) * W[size_t(o) * l.in + i];
            dxr[i] = float(acc);
        }
    }
    if (accum) {
        for (int o = 0; o < l.out; ++o) {
            for (int i = 0; i < l.in; ++i) {
                double acc = 0;
                for (int r = 0; r < b; ++r) acc += double(dy.row(r)[o]) * x.row(r)[i];
                p.g_weight.data[size_t(o) * l.in + i] += float(acc);
            }
            double acc = 0;
            for (int r = 0; r < b; ++r) acc += dy.row(r)[o];
            p.g_bias.data[o] += float(acc);
        }
    }
    return dx;
}

inline Tensor conv_fwd(const LayerSpec& l, const BlockParams& p, const Tensor& x,
                       LayerCache* c) {
    int b = x.shape[0], H = x.shape[2], W = x.shape[3];
    int ho = (H + 2 * l.pad - l.kernel) / l.stride + 1;
    int wo = (W + 2 * l.pad - l.kernel) / l.stride + 1;
    Tensor y({b, l.out_ch, ho, wo});
    auto xat = [&](int r, int ci, int h, int w) {
        return x.data[((size_t(r) * l.in_ch + ci) * H + h) * W + w];
    };
    const float* Wt = p.weight.data.data();
    for (int r = 0; r < b; ++r)
        for (int co = 0; co < l.out_ch; ++co)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    double acc = p.bias.data[co];
                    for (int ci = 0; ci < l.in_ch; ++ci)
                        for (int kh = 0; kh < l.kernel; ++kh) {
                            int ih = oh * l.stride - l.pad + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < l.kernel; ++kw) {
                                int iw = ow * l.stride - l.pad + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += double(xat(r, ci, ih, iw)) *
                                       Wt[((size_t(co) * l.in_ch + ci) * l.kernel + kh) *
                                              l.kernel +
                                          kw];
                            }
                        }
                    y.data[((size_t(r) * l.out_ch + co) * ho + oh) * wo + ow] = float(acc);
                }
    if (c) c->t0 = x;
    return y;
}

inline Tensor conv_bwd(const LayerSpec& l, BlockParams& p, const Tensor& dy,
                       const LayerCache& c, bool accum) {
    const Tensor& x = c.t0;
    int b = x.shape[0], H = x.shape[2], W = x.shape[3];
    int ho = dy.shape[2], wo = dy.shape[3];
    Tensor dx(x.shape);
    const float* Wt = p.weight.data.data();
    auto dyat = [&](int r, int co, int h, int w) {
        return dy.data[((size_t(r) * l.out_ch + co) * ho + h) * wo + w];
    };
    for (int r = 0; r < b; ++r)
        for (int ci = 0; ci < l.in_ch; ++ci)
            for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                    double acc = 0;
                    for (int kh = 0; kh < l.kernel; ++kh) {
                        int num = ih + l.pad - kh;
                        if (num % l.stride) continue;
                        int oh = num / l.stride;
                        if (oh < 0 || oh >= ho) continue;
                        for (int kw = 0; kw < l.kernel; ++kw) {
                            int num2 = iw + l.pad - kw;
                            if (num2 % l.stride) continue;
                            int ow = num2 / l.stride;
                            if (ow < 0 || ow >= wo) continue;
                            for (int co = 0; co < l.out_ch; ++co)
                                acc += double(dyat(r, co, oh, ow)) *
                                       Wt[((size_t(co) * l.in_ch + ci) * l.kernel + kh) *
                                              l.kernel +
                                          kw];
                        }
                    }
                    dx.data[((size_t(r) * l.in_ch + ci) * H + ih) * W + iw] = float(acc);
                }
    if (accum) {
        auto xat = [&](int r, int ci, int h, int w) {
            return x.data[((size_t(r) * l.in_ch + ci) * H + h) * W + w];
        };
        for (int co = 0; co < l.out_ch; ++co) {
            for (int ci = 0; ci < l.in_ch; ++ci)
                for (int kh = 0; kh < l.kernel; ++kh)
                    for (int kw = 0; kw < l.kernel; ++kw) {
                        double acc = 0;
                        for (int r = 0; r < b; ++r)
                            for (int oh = 0; oh < ho; ++oh) {
                                int ih = oh * l.stride - l.pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (int ow = 0; ow < wo; ++ow) {
                                    int iw = ow * l.stride - l.pad + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += double(dyat(r, co, oh, ow)) * xat(r, ci, ih, iw);
                                }
                            }
                        p.g_weight.data[((size_t(co) * l.in_ch + ci) * l.kernel + kh) *
                                            l.kernel +
                                        kw] += float(acc);
                    }
            double acc = 0;
            for (int r = 0; r < b; ++r)
                for (int oh = 0; oh < ho; ++oh)
                    for (int ow = 0; ow < wo; ++ow) acc += dyat(r, co, oh, ow);
            p.g_bias.data[co] += float(acc);
        }
    }
    return dx;
}

inline Tensor convt_fwd(const LayerSpec& l, const BlockParams& p, const Tensor& x,
                        LayerCache* c) {
    int b = x.shape[0], H = x.shape[2], W = x.shape[3];
    int ho = (H - 1) * l.stride - 2 * l.pad + l.kernel;
    int wo = (W - 1) * l.stride - 2 * l.pad + l.kernel;
    Tensor y({b, l.out_ch, ho, wo});
    const float* Wt = p.weight.data.data();  // [in_ch][out_ch][k][k]
    auto xat = [&](int r, int ci, int h, int w) {
        return x.data[((size_t(r) * l.in_ch + ci) * H + h) * W + w];
    };
    for (int r = 0; r < b; ++r)
        for (int co = 0; co < l.out_ch; ++co)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    double acc = p.bias.data[co];
                    for (int kh = 0; kh < l.kernel; ++kh) {
                        int num = oh + l.pad - kh;
                        if (num % l.stride) continue;
                        int ih = num / l.stride;
                        if (ih < 0 || ih >= H) continue;
                        for (int kw = 0; kw < l.kernel; ++kw) {
                            int num2 = ow + l.pad - kw;
                            if (num2 % l.stride) continue;
                            int iw = num2 / l.stride;
                            if (iw < 0 || iw >= W) continue;
                            for (int ci = 0; ci < l.in_ch; ++ci)
                                acc += double(xat(r, ci, ih, iw)) *
                                       Wt[((size_t(ci) * l.out_ch + co) * l.kernel + kh) *
                                              l.kernel +
                                          kw];
                        }
                    }
                    y.data[((size_t(r) * l.out_ch + co) * ho + oh) * wo + ow] = float(acc);
                }
    if (c) c->t0 = x;
    return y;
}

inline Tensor convt_bwd(const LayerSpec& l, BlockParams& p, const Tensor& dy,
                        const LayerCache& c, bool accum) {
    const Tensor& x = c.t0;
    int b = x.shape[0], H = x.shape[2], W = x.shape[3];
    int ho = dy.shape[2], wo = dy.shape[3];
    Tensor dx(x.shape);
    const float* Wt = p.weight.data.data();
    auto dyat = [&](int r, int co, int h, int w) {
        return dy.data[((size_t(r) * l.out_ch + co) * ho + h) * wo + w];
    };
    for (int r = 0; r < b; ++r)
        for (int ci = 0; ci < l.in_ch; ++ci)
            for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                    double acc = 0;
                    for (int co = 0; co < l.out_ch; ++co)
                        for (int kh = 0; kh < l.kernel; ++kh) {
                            int oh = ih * l.stride - l.pad + kh;
                            if (oh < 0 || oh >= ho) continue;
                            for (int kw = 0; kw < l.kernel; ++kw) {
                                int ow = iw * l.stride - l.pad + kw;
                                if (ow < 0 || ow >= wo) continue;
                                acc += double(dyat(r, co, oh, ow)) *
                                       Wt[((size_t(ci) * l.out_ch + co) * l.kernel + kh) *
                                              l.kernel +
                                          kw];
                            }
                        }
                    dx.data[((size_t(r) * l.in_ch + ci) * H + ih) * W + iw] = float(acc);
                }
    if (accum) {
        auto xat = [&](int r, int ci, int h, int w) {
            return x.data[((size_t(r) * l.in_ch + ci) * H + h) * W + w];
        };
        for (int ci = 0; ci < l.in_ch; ++ci)
            for (int co = 0; co < l.out_ch; ++co)
                for (int kh = 0; kh < l.kernel; ++kh)
                    for (int kw = 0; kw < l.kernel; ++kw) {
                        double acc = 0;
                        for (int r = 0; r < b; ++r)
                            for (int ih = 0; ih < H; ++ih) {
                                int oh = ih * l.stride - l.pad + kh;
                                if (oh < 0 || oh >= ho) continue;
                                for (int iw = 0; iw < W; ++iw) {
                                    int ow = iw * l.stride - l.pad + kw;
                                    if (ow < 0 || ow >= wo) continue;
                                    acc += double(xat(r, ci, ih, iw)) * dyat(r, co, oh, ow);
                                }
                            }
                        p.g_weight.data[((size_t(ci) * l.out_ch + co) * l.kernel + kh) *
                                            l.kernel +
                                        kw] += float(acc);
                    }
        for (int co = 0; co < l.out_ch; ++co) {
            double acc = 0;
            for (int r = 0; r < b; ++r)
                for (int oh = 0; oh < ho; ++oh)
                    for (int ow = 0; ow < wo; ++ow) acc += dyat(r, co, oh, ow);
            p.g_bias.data[co] += float(acc);
        }
    }
    return dx;
}

// channel-major reduction geometry: (b, C) or (b, C, H, W)
struct BnGeom {
    int b, c;
    int64_t inner;  // H*W (1 for rank-2)
};

inline BnGeom bn_geom(const Tensor& x) {
    if (x.shape.size() == 2) return {x.shape[0], x.shape[1], 1};
    if (x.shape.size() == 4)
        return {x.shape[0], x.shape[1], int64_t(x.shape[2]) * x.shape[3]};
    throw ConfigError("batchnorm: unsupported rank " + shape_str(x.shape));
}

inline float& bn_at(Tensor& x, const BnGeom& g, int r, int c, int64_t i) {
    return x.data[(size_t(r) * g.c + c) * g.inner + i];
}
inline float bn_at(const Tensor& x, const BnGeom& g, int r, int c, int64_t i) {
    return x.data[(size_t(r) * g.c + c) * g.inner + i];
}

inline Tensor bn_fwd(BlockParams& p, const Tensor& x, bool train, LayerCache* c) {
    BnGeom g = bn_geom(x);
    Tensor y(x.shape);
    if (train) {
        Tensor xhat(x.shape);
        Tensor invstd({g.c});
        double N = double(g.b) * double(g.inner);
        for (int ch = 0; ch < g.c; ++ch) {
            double sum = 0, sq = 0;
            for (int r = 0; r < g.b; ++r)
                for (int64_t i = 0; i < g.inner; ++i) {
                    double v = bn_at(x, g, r, ch, i);
                    sum += v;
                    sq += v * v;
                }
            double mean = sum / N;
            double var = sq / N - mean * mean;
            if (var < 0) var = 0;
            double inv = 1.0 / std::sqrt(var + kBnEps);
            invstd.data[ch] = float(inv);
            float gm = p.bn_gamma.data[ch], bt = p.bn_beta.data[ch];
            for (int r = 0; r < g.b; ++r)
                for (int64_t i = 0; i < g.inner; ++i) {
                    double xh = (bn_at(x, g, r, ch, i) - mean) * inv;
                    bn_at(xhat, g, r, ch, i) = float(xh);
                    bn_at(y, g, r, ch, i) = float(gm * xh + bt);
                }
            double unbiased = N > 1 ? var * N / (N - 1) : var;
            p.bn_rmean.data[ch] =
                float((1 - kBnMomentum) * p.bn_rmean.data[ch] + kBnMomentum * mean);
            p.bn_rvar.data[ch] =
                float((1 - kBnMomentum) * p.bn_rvar.data[ch] + kBnMomentum * unbiased);
        }
        if (c) {
            c->t0 = std::move(xhat);
            c->t1 = std::move(invstd);
        }
    } else {
        Tensor scale({g.c});
        for (int ch = 0; ch < g.c; ++ch) {
            double inv = 1.0 / std::sqrt(double(p.bn_rvar.data[ch]) + kBnEps);
            scale.data[ch] = float(double(p.bn_gamma.data[ch]) * inv);
            float sh = float(p.bn_beta.data[ch] - p.bn_rmean.data[ch] * scale.data[ch]);
            for (int r = 0; r < g.b; ++r)
                for (int64_t i = 0; i < g.inner; ++i)
                    bn_at(y, g, r, ch, i) = bn_at(x, g, r, ch, i) * scale.data[ch] + sh;
        }
        if (c) c->t1 = std::move(scale);
    }
    return y;
}

inline Tensor bn_bwd(BlockParams& p, const Tensor& dy, const LayerCache& c, bool train,
                     bool accum) {
    BnGeom g = bn_geom(dy);
    Tensor dx(dy.shape);
    if (!train) {
        for (int ch = 0; ch < g.c; ++ch)
            for (int r = 0; r < g.b; ++r)
                for (int64_t i = 0; i < g.inner; ++i)
                    bn_at(dx, g, r, ch, i) = bn_at(dy, g, r, ch, i) * c.t1.data[ch];
        return dx;
    }
    const Tensor& xhat = c.t0;
    double N = double(g.b) * double(g.inner);
    for (int ch = 0; ch < g.c; ++ch) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int r = 0; r < g.b; ++r)
            for (int64_t i = 0; i < g.inner; ++i) {
                double d = bn_at(dy, g, r, ch, i);
                sum_dy += d;
                sum_dy_xhat += d * bn_at(xhat, g, r, ch, i);
            }
        if (accum) {
            p.g_bn_gamma.data[ch] += float(sum_dy_xhat);
            p.g_bn_beta.data[ch] += float(sum_dy);
        }
        double k = double(p.bn_gamma.data[ch]) * double(c.t1.data[ch]);
        for (int r = 0; r < g.b; ++r)
            for (int64_t i = 0; i < g.inner; ++i) {
                double d = bn_at(dy, g, r, ch, i);
                double xh = bn_at(xhat, g, r, ch, i);
                bn_at(dx, g, r, ch, i) =
                    float(k * (d - sum_dy / N - xh * sum_dy_xhat / N));
            }
    }
    return dx;
}

// fixed label-plane encoding for channel-mode concat; pure function of geometry
inline Tensor label_plane_matrix(int classes, int h, int w) {
    Tensor e({classes, h * w});
    Rng rng(mix_seed(0xc0ffee5eedULL, uint64_t(classes), uint64_t(h * 1000 + w)));
    for (auto& v : e.data) v = float(rng.uniform(-1.0, 1.0));
    return e;
}

}  // namespace detail

// Forward over blocks [first..last] of `net`, parameters taken from `store`.
// `labels` is required only when the range contains an embedding_concat layer.
inline Tensor forward_blocks(const NetworkProfile& net, SegmentStore& store, int first,
                             int last, Tensor x, const std::vector<int>& labels,
                             int classes, bool train, ForwardCache* cache) {
    if (first < 1 || last > net.n() || first > last)
        throw UsageError("forward_blocks: bad range [" + std::to_string(first) + "," +
                         std::to_string(last) + "]");
    if (x.sample_shape() != net.block(first).in_shape)
        throw ConfigError("forward: block " + std::to_string(first) + " (" +
                          net.block(first).major().describe() + ") expects " +
                          shape_str(net.block(first).in_shape) + " got " +
                          shape_str(x.sample_shape()));
    if (cache) {
        cache->train = train;
        cache->first = first;
        cache->last = last;
        cache->entries.clear();
        cache->consumed = false;
    }
    for (int bi = first; bi <= last; ++bi) {
        BlockParams& bp = store.block(bi);
        for (const auto& l : net.block(bi).layers) {
            LayerCache ent;
            ent.kind = l.kind;
            ent.in_shape = x.shape;
            LayerCache* cp = cache ? &ent : nullptr;
            switch (l.kind) {
                case LayerKind::dense:
                    x = detail::dense_fwd(l, bp, x, cp);
                    break;
                case LayerKind::conv2d:
                    x = detail::conv_fwd(l, bp, x, cp);
                    break;
                case LayerKind::conv_transpose2d:
                    x = detail::convt_fwd(l, bp, x, cp);
                    break;
                case LayerKind::batchnorm:
                    x = detail::bn_fwd(bp, x, train, cp);
                    break;
                case LayerKind::relu: {
                    Tensor y(x.shape);
                    for (int64_t i = 0; i < x.numel(); ++i)
                        y.data[i] = x.data[i] > 0 ? x.data[i] : 0.0f;
                    if (cp) cp->t0 = x;
                    x = std::move(y);
                    break;
                }
                case LayerKind::leaky_relu: {
                    Tensor y(x.shape);
                    for (int64_t i = 0; i < x.numel(); ++i)
                        y.data[i] = x.data[i] > 0 ? x.data[i] : l.slope * x.data[i];
                    if (cp) cp->t0 = x;
                    x = std::move(y);
                    break;
                }
                case LayerKind::tanh_act: {
                    Tensor y(x.shape);
                    for (int64_t i = 0; i < x.numel(); ++i)
                        y.data[i] = std::tanh(x.data[i]);
                    if (cp) cp->t0 = y;
                    x = std::move(y);
                    break;
                }
                case LayerKind::sigmoid_act: {
                    Tensor y(x.shape);
                    for (int64_t i = 0; i < x.numel(); ++i)
                        y.data[i] = float(1.0 / (1.0 + std::exp(-double(x.data[i]))));
                    if (cp) cp->t0 = y;
                    x = std::move(y);
                    break;
                }
                case LayerKind::flatten:
                    if (cp) cp->in_shape = x.shape;
                    x = reshape(x, {x.rows(), int(x.row_size())});
                    break;
                case LayerKind::embedding_concat: {
                    if (int(labels.size()) != x.rows())
                        throw UsageError("embedding_concat: need one label per row");
                    if (!l.channel_mode) {
                        Tensor y({x.rows(), int(x.row_size()) + classes});
                        for (int r = 0; r < x.rows(); ++r) {
                            float* yr = y.row(r);
                            const float* xr = x.row(r);
                            std::copy(xr, xr + x.row_size(), yr);
                            std::fill(yr + x.row_size(), yr + y.row_size(), 0.0f);
                            int lab = labels[size_t(r)];
                            if (lab < 0 || lab >= classes)
                                throw DataError("label " + std::to_string(lab) +
                                                " outside class set");
                            yr[x.row_size() + lab] = 1.0f;
                        }
                        x = std::move(y);
                    } else {
                        int C = x.shape[1], H = x.shape[2], W = x.shape[3];
                        Tensor plane = detail::label_plane_matrix(classes, H, W);
                        Tensor y({x.rows(), C + 1, H, W});
                        for (int r = 0; r < x.rows(); ++r) {
                            const float* xr = x.row(r);
                            float* yr = y.row(r);
                            std::copy(xr, xr + x.row_size(), yr);
                            const float* pl = plane.row(labels[size_t(r)]);
                            std::copy(pl, pl + H * W, yr + x.row_size());
                        }
                        x = std::move(y);
                    }
                    break;
                }
            }
            if (cache) cache->entries.push_back(std::move(ent));
        }
    }
    return x;
}

// Backward over the same range; accumulates parameter gradients unless
// accum_params is false.  Returns the gradient wrt the segment input.
inline Tensor backward_blocks(const NetworkProfile& net, SegmentStore& store,
                              ForwardCache& cache, Tensor dy, bool accum_params = true) {
    if (cache.entries.empty()) throw UsageError("backward: cache missing or empty");
    if (!cache.train) throw UsageError("backward: cache was not built in train mode");
    if (cache.consumed) throw ProtocolError("backward: cache already consumed");
    cache.consumed = true;
    int ei = int(cache.entries.size()) - 1;
    for (int bi = cache.last; bi >= cache.first; --bi) {
        BlockParams& bp = store.block(bi);
        const auto& layers = net.block(bi).layers;
        for (int li = int(layers.size()) - 1; li >= 0; --li, --ei) {
            const LayerSpec& l = layers[size_t(li)];
            LayerCache& c = cache.entries[size_t(ei)];
            switch (l.kind) {
                case LayerKind::dense:
                    dy = detail::dense_bwd(l, bp, dy, c, accum_params);
                    break;
                case LayerKind::conv2d:
                    dy = detail::conv_bwd(l, bp, dy, c, accum_params);
                    break;
                case LayerKind::conv_transpose2d:
                    dy = detail::convt_bwd(l, bp, dy, c, accum_params);
                    break;
                case LayerKind::batchnorm:
                    dy = detail::bn_bwd(bp, dy, c, cache.train, accum_params);
                    break;
                case LayerKind::relu: {
                    Tensor dx(dy.shape);
                    for (int64_t i = 0; i < dy.numel(); ++i)
                        dx.data[i] = c.t0.data[i] > 0 ? dy.data[i] : 0.0f;
                    dy = std::move(dx);
                    break;
                }
                case LayerKind::leaky_relu: {
                    Tensor dx(dy.shape);
                    for (int64_t i = 0; i < dy.numel(); ++i)
                        dx.data[i] = c.t0.data[i] > 0 ? dy.data[i] : l.slope * dy.data[i];
                    dy = std::move(dx);
                    break;
                }
                case LayerKind::tanh_act: {
                    Tensor dx(dy.shape);
                    for (int64_t i = 0; i < dy.numel(); ++i) {
                        double yv = c.t0.data[i];
                        dx.data[i] = float(double(dy.data[i]) * (1.0 - yv * yv));
                    }
                    dy = std::move(dx);
                    break;
                }
                case LayerKind::sigmoid_act: {
                    Tensor dx(dy.shape);
                    for (int64_t i = 0; i < dy.numel(); ++i) {
                        double yv = c.t0.data[i];
                        dx.data[i] = float(double(dy.data[i]) * yv * (1.0 - yv));
                    }
                    dy = std::move(dx);
                    break;
                }
                case LayerKind::flatten:
                    dy = reshape(dy, c.in_shape);
                    break;
                case LayerKind::embedding_concat: {
                    // gradient flows only into the sample part
                    Tensor dx(c.in_shape);
                    if (!l.channel_mode) {
                        int64_t in_sz = dx.row_size();
                        for (int r = 0; r < dx.rows(); ++r)
                            std::copy(dy.row(r), dy.row(r) + in_sz, dx.row(r));
                    } else {
                        int64_t in_sz = dx.row_size();
                        for (int r = 0; r < dx.rows(); ++r)
                            std::copy(dy.row(r), dy.row(r) + in_sz, dx.row(r));
                    }
                    dy = std::move(dx);
                    break;
                }
            }
        }
    }
    return dy;
}

// ---------------------------------------------------------------------------
// Adam

struct OptimConfig {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamState {
public:
    void step(SegmentStore& store, const OptimConfig& cfg) {
        if (slots_.empty()) {
            for (auto& b : store.blocks) {
                b.for_each_trainable([&](const char*, Tensor& t, Tensor&) {
                    slots_.push_back({Tensor(t.shape), Tensor(t.shape)});
                });
            }
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_cache(cfg), t_);
        double bc2 = 1.0 - std::pow(cfg.beta2, t_);
        size_t si = 0;
        for (auto& b : store.blocks) {
            b.for_each_trainable([&](const char*, Tensor& p, Tensor& g) {
                auto& [m, v] = slots_[si++];
                for (int64_t i = 0; i < p.numel(); ++i) {
                    double gi = g.data[i];
                    double mi = cfg.beta1 * m.data[i] + (1 - cfg.beta1) * gi;
                    double vi = cfg.beta2 * v.data[i] + (1 - cfg.beta2) * gi * gi;
                    m.data[i] = float(mi);
                    v.data[i] = float(vi);
                    p.data[i] -= float(cfg.lr * (mi / bc1) /
                                       (std::sqrt(vi / bc2) + cfg.eps));
                }
            });
        }
    }

private:
    static double beta1_cache(const OptimConfig& c) { return c.beta1; }
    std::vector<std::pair<Tensor, Tensor>> slots_;
    int64_t t_ = 0;
};

}  // namespace splitgan
