#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "finedeep/autograd.hpp"
#include "finedeep/ffn.hpp"
#include "finedeep/finedeep_block.hpp"
#include "finedeep/tensor.hpp"

namespace finedeep {

// Architecture + training hyperparameters. Config-file keys mirror these
// field names (see config_io.hpp).
struct ModelConfig {
    std::size_t hidden_size = 128;    // d
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t intermediate = 512;   // d_ff
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 64;
    std::string arch = "dense";       // "dense" | "finedeep"
    std::size_t M = 1;
    std::size_t K = 1;
    std::string routing_mode = "sigmoid";
    bool router_enabled = true;
    double rms_eps = 1e-5;
    double lr = 3e-4;
    double weight_decay = 0.1;
    std::uint64_t seed = 0;
    bool tie_embeddings = false;
    // training-loop knobs (no published reference values; defaults are ours)
    std::size_t batch_size = 2;
    std::size_t warmup_steps = 0;  // 0 = auto: max(10, steps/20)

    bool is_finedeep() const { return arch == "finedeep"; }

    void validate() const {
        if (hidden_size == 0 || n_layers == 0 || n_heads == 0 || intermediate == 0 || vocab_size == 0 ||
            max_seq_len == 0)
            throw ConfigError("config: all sizes must be positive");
        if (hidden_size % n_heads != 0)
            throw ConfigError("config: hidden_size " + std::to_string(hidden_size) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (arch != "dense" && arch != "finedeep") throw ConfigError("config: unknown arch '" + arch + "'");
        if (is_finedeep()) {
            if (M < 1 || K < 1) throw ConfigError("config: M and K must be >= 1");
            if (intermediate % (M * K) != 0)
                throw ConfigError("config: intermediate " + std::to_string(intermediate) +
                                  " not divisible by M*K = " + std::to_string(M) + "*" + std::to_string(K));
            if (!router_enabled && K != 1)
                throw ConfigError("config: router_enabled=false requires K=1");
            routing_mode_from_string(routing_mode);
        }
        if (tie_embeddings)
            throw ConfigError("config: tie_embeddings=true is not supported (embeddings and head are untied)");
        if (rms_eps <= 0) throw ConfigError("config: rms_eps must be positive");
    }
};

struct AttnParams {
    Tensor wq, wk, wv, wo;  // each [d×d], no bias
};

struct LayerParams {
    Tensor attn_norm_gain;  // [d]
    AttnParams attn;
    // dense arch
    Tensor ffn_norm_gain;   // [d]
    DenseFfnParams dense_ffn;
    // finedeep arch (sub-layer 1's norm plays the pre-FFN norm role)
    FinedeepFfn fd;
};

// Decoder-only LM: embed + learned positions → [norm→MHA→residual → FFN
// block] × L → final norm → untied head.
struct LmModel {
    ModelConfig cfg;
    Tensor tok_emb;   // [vocab × d]
    Tensor pos_emb;   // [max_seq_len × d]
    std::vector<LayerParams> layers;
    Tensor final_norm_gain;  // [d]
    Tensor head;             // [d × vocab]

    static LmModel init(const ModelConfig& cfg) {
        cfg.validate();
        constexpr double kInitStd = 0.02;
        LmModel m;
        m.cfg = cfg;
        std::mt19937_64 rng(cfg.seed);
        const std::size_t d = cfg.hidden_size;
        m.tok_emb = Tensor::randn({cfg.vocab_size, d}, rng, kInitStd);
        m.pos_emb = Tensor::randn({cfg.max_seq_len, d}, rng, kInitStd);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            LayerParams lp;
            lp.attn_norm_gain = Tensor::ones({d});
            lp.attn.wq = Tensor::randn({d, d}, rng, kInitStd);
            lp.attn.wk = Tensor::randn({d, d}, rng, kInitStd);
            lp.attn.wv = Tensor::randn({d, d}, rng, kInitStd);
            lp.attn.wo = Tensor::randn({d, d}, rng, kInitStd);
            if (!cfg.is_finedeep()) {
                lp.ffn_norm_gain = Tensor::ones({d});
                lp.dense_ffn.w_gate = Tensor::randn({d, cfg.intermediate}, rng, kInitStd);
                lp.dense_ffn.w_up = Tensor::randn({d, cfg.intermediate}, rng, kInitStd);
                lp.dense_ffn.w_down = Tensor::randn({cfg.intermediate, d}, rng, kInitStd);
            } else {
                const std::size_t de = cfg.intermediate / (cfg.M * cfg.K);
                lp.fd.routing_mode = routing_mode_from_string(cfg.routing_mode);
                lp.fd.eps = cfg.rms_eps;
                for (std::size_t j = 0; j < cfg.M; ++j) {
                    SubLayer s;
                    s.norm_gain = Tensor::ones({d});
                    s.router = Tensor::zeros({d, cfg.K});  // uniform initial contribution
                    s.router_enabled = cfg.router_enabled;
                    for (std::size_t i = 0; i < cfg.K; ++i) {
                        ExpertParams e;
                        e.sublayer = j + 1;
                        e.position = i + 1;
                        e.w_gate = Tensor::randn({d, de}, rng, kInitStd);
                        e.w_up = Tensor::randn({d, de}, rng, kInitStd);
                        e.w_down = Tensor::randn({de, d}, rng, kInitStd);
                        s.experts.push_back(std::move(e));
                    }
                    lp.fd.sublayers.push_back(std::move(s));
                }
            }
            m.layers.push_back(std::move(lp));
        }
        m.final_norm_gain = Tensor::ones({d});
        m.head = Tensor::randn({d, cfg.vocab_size}, rng, kInitStd);
        // Parameters hold float32-representable values so checkpoints
        // round-trip bit-exactly through the f32 payload.
        m.for_each_param([](const std::string&, Tensor& t) { t.round_to_f32(); });
        return m;
    }

    // Visits every parameter tensor in a fixed canonical order.
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            LayerParams& lp = layers[l];
            fn(p + "attn_norm", lp.attn_norm_gain);
            fn(p + "wq", lp.attn.wq);
            fn(p + "wk", lp.attn.wk);
            fn(p + "wv", lp.attn.wv);
            fn(p + "wo", lp.attn.wo);
            if (!cfg.is_finedeep()) {
                fn(p + "ffn_norm", lp.ffn_norm_gain);
                fn(p + "ffn.w_gate", lp.dense_ffn.w_gate);
                fn(p + "ffn.w_up", lp.dense_ffn.w_up);
                fn(p + "ffn.w_down", lp.dense_ffn.w_down);
            } else {
                for (std::size_t j = 0; j < lp.fd.sublayers.size(); ++j) {
                    const std::string sp = p + "sub" + std::to_string(j) + ".";
                    SubLayer& s = lp.fd.sublayers[j];
                    fn(sp + "norm", s.norm_gain);
                    fn(sp + "router", s.router);
                    for (std::size_t i = 0; i < s.experts.size(); ++i) {
                        const std::string ep = sp + "expert" + std::to_string(i) + ".";
                        fn(ep + "w_gate", s.experts[i].w_gate);
                        fn(ep + "w_up", s.experts[i].w_up);
                        fn(ep + "w_down", s.experts[i].w_down);
                    }
                }
            }
        }
        fn("final_norm", final_norm_gain);
        fn("head", head);
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for_each_param([&n](const std::string&, Tensor& t) { n += t.numel(); });
        return n;
    }
};

// ---- graph bindings --------------------------------------------------------

struct AttnVars {
    Var wq, wk, wv, wo;
};

struct LayerVars {
    Var attn_norm;
    AttnVars attn;
    Var ffn_norm;
    GatedFfnVars dense_ffn;
    FinedeepFfnVars fd;
};

struct ModelVars {
    Var tok_emb, pos_emb, final_norm, head;
    std::vector<LayerVars> layers;
    // (name, var) per parameter, in for_each_param order
    std::vector<std::pair<std::string, Var>> params;
};

inline ModelVars bind(Graph& g, LmModel& m) {
    ModelVars v;
    std::unordered_map<const Tensor*, Var> by_ptr;
    m.for_each_param([&](const std::string& name, Tensor& t) {
        Var var = g.leaf(t);
        by_ptr[&t] = var;
        v.params.emplace_back(name, var);
    });
    auto look = [&](const Tensor& t) { return by_ptr.at(&t); };
    v.tok_emb = look(m.tok_emb);
    v.pos_emb = look(m.pos_emb);
    v.final_norm = look(m.final_norm_gain);
    v.head = look(m.head);
    for (LayerParams& lp : m.layers) {
        LayerVars lv;
        lv.attn_norm = look(lp.attn_norm_gain);
        lv.attn = {look(lp.attn.wq), look(lp.attn.wk), look(lp.attn.wv), look(lp.attn.wo)};
        if (!m.cfg.is_finedeep()) {
            lv.ffn_norm = look(lp.ffn_norm_gain);
            lv.dense_ffn = {look(lp.dense_ffn.w_gate), look(lp.dense_ffn.w_up), look(lp.dense_ffn.w_down)};
        } else {
            lv.fd.routing_mode = lp.fd.routing_mode;
            lv.fd.eps = lp.fd.eps;
            for (SubLayer& s : lp.fd.sublayers) {
                SubLayerVars sv;
                sv.norm_gain = look(s.norm_gain);
                sv.router = look(s.router);
                sv.router_enabled = s.router_enabled;
                for (ExpertParams& e : s.experts)
                    sv.experts.push_back({look(e.w_gate), look(e.w_up), look(e.w_down)});
                lv.fd.sublayers.push_back(std::move(sv));
            }
        }
        v.layers.push_back(std::move(lv));
    }
    return v;
}

// Causal mask added to pre-softmax scores; large-negative instead of -inf so
// every stored value stays finite.
inline Tensor causal_mask(std::size_t t) {
    Tensor mask({t, t});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = i + 1; j < t; ++j) mask.at(i, j) = -1e9;
    return mask;
}

// Pre-norm causal multi-head attention body (without the outer residual).
inline Var causal_mha(Graph& g, Var x, const AttnVars& a, std::size_t n_heads) {
    const std::size_t t = g.value(x).rows(), d = g.value(x).cols();
    if (d % n_heads != 0) throw ShapeError("causal_mha: d not divisible by n_heads");
    const std::size_t dh = d / n_heads;
    Var q = g.matmul(x, a.wq);
    Var k = g.matmul(x, a.wk);
    Var v = g.matmul(x, a.wv);
    const Tensor mask = causal_mask(t);
    std::vector<Var> heads(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = g.add_const(g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))), mask);
        heads[h] = g.matmul(g.softmax_rows(scores), vh);
    }
    return g.matmul(g.concat_cols(heads), a.wo);
}

// Full forward pass to logits [t × vocab]. Optional sink receives the silu
// activation matrices (dense: "layer{l}", finedeep: "layer{l}/sub{j}").
inline Var model_forward(Graph& g, const ModelVars& v, const ModelConfig& cfg,
                         const std::vector<int>& tokens, const ActivationSink* sink = nullptr) {
    const std::size_t t = tokens.size();
    if (t == 0) throw InputError("model_forward: empty token sequence");
    if (t > cfg.max_seq_len)
        throw InputError("model_forward: sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    for (int id : tokens)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw InputError("model_forward: token id " + std::to_string(id) + " out of range");
    std::vector<int> positions(t);
    for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<int>(i);
    Var x = g.add(g.gather_rows(v.tok_emb, tokens), g.gather_rows(v.pos_emb, positions));
    for (std::size_t l = 0; l < v.layers.size(); ++l) {
        const LayerVars& lv = v.layers[l];
        Var h = g.add(x, causal_mha(g, g.rmsnorm(x, lv.attn_norm, cfg.rms_eps), lv.attn, cfg.n_heads));
        const std::string lname = "layer" + std::to_string(l);
        if (!cfg.is_finedeep()) {
            Var silu_out;
            Var y = gated_forward(g, g.rmsnorm(h, lv.ffn_norm, cfg.rms_eps), lv.dense_ffn, &silu_out);
            if (sink) (*sink)(lname, g.value(silu_out));
            x = g.add(h, y);
        } else {
            Var hh = h;
            for (std::size_t j = 0; j < lv.fd.sublayers.size(); ++j) {
                std::vector<Var> silus;
                hh = sublayer_forward(g, hh, lv.fd.sublayers[j], lv.fd.routing_mode, lv.fd.eps,
                                      sink ? &silus : nullptr);
                if (sink) {
                    const std::size_t rows = g.value(silus[0]).rows(), de = g.value(silus[0]).cols();
                    Tensor acts({rows, silus.size() * de});
                    for (std::size_t i = 0; i < silus.size(); ++i)
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < de; ++c)
                                acts.at(r, i * de + c) = g.value(silus[i]).at(r, c);
                    (*sink)(lname + "/sub" + std::to_string(j), acts);
                }
            }
            x = hh;
        }
    }
    return g.matmul(g.rmsnorm(x, v.final_norm, cfg.rms_eps), v.head);
}

// Forward-only convenience: logits as a plain tensor.
inline Tensor model_forward(LmModel& m, const std::vector<int>& tokens, const ActivationSink* sink = nullptr) {
    Graph g(false);
    ModelVars v = bind(g, m);
    return g.value(model_forward(g, v, m.cfg, tokens, sink));
}

// Mean over positions of −log softmax(logits)[target].
inline double cross_entropy_loss(const Tensor& logits, const std::vector<int>& targets) {
    Graph g(false);
    return g.value(g.cross_entropy(g.leaf(logits), targets)).data[0];
}

}  // namespace finedeep
