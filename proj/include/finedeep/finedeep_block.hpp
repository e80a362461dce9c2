#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "finedeep/autograd.hpp"
#include "finedeep/ffn.hpp"
#include "finedeep/tensor.hpp"

namespace finedeep {

enum class RoutingMode { kSigmoid, kSoftmax };

inline std::string to_string(RoutingMode m) { return m == RoutingMode::kSigmoid ? "sigmoid" : "softmax"; }
inline RoutingMode routing_mode_from_string(const std::string& s) {
    if (s == "sigmoid") return RoutingMode::kSigmoid;
    if (s == "softmax") return RoutingMode::kSoftmax;
    throw ConfigError("unknown routing_mode: " + s);
}

// Receives named activation matrices (silu outputs) during a forward pass.
using ActivationSink = std::function<void(const std::string& name, const Tensor& rows)>;

// One expert-group sub-layer: K experts, a router matrix [d×K] (column i
// weights expert i), and an RMSNorm gain applied before the experts.
struct SubLayer {
    std::vector<ExpertParams> experts;
    Tensor router;     // [d × K]
    Tensor norm_gain;  // [d]
    bool router_enabled = true;

    std::size_t k() const { return experts.size(); }

    void check() const {
        if (experts.empty()) throw ConfigError("SubLayer: K must be >= 1");
        if (router.cols() != experts.size() || router.rows() != experts[0].d())
            throw ShapeError("SubLayer: router " + router.shape_str() + " vs K=" +
                             std::to_string(experts.size()) + ", d=" + std::to_string(experts[0].d()));
        if (!router_enabled && experts.size() != 1)
            throw ConfigError("SubLayer: router may be disabled only with K=1");
    }
};

// M sub-layers replacing one dense FFN.
struct FinedeepFfn {
    std::vector<SubLayer> sublayers;
    RoutingMode routing_mode = RoutingMode::kSigmoid;
    double eps = 1e-5;

    std::size_t m() const { return sublayers.size(); }
};

// Routing scores from expert outputs:
//   sigmoid: score[t,i] = sigmoid(dot(output_i[t,:], router[:,i]))
//   softmax: same logits, normalized across experts per token
inline Tensor route_scores(const std::vector<Tensor>& expert_outputs, const Tensor& router,
                           RoutingMode mode) {
    const std::size_t k = expert_outputs.size();
    if (router.cols() != k) throw ShapeError("route_scores: router has " + std::to_string(router.cols()) +
                                             " columns for " + std::to_string(k) + " experts");
    const std::size_t t = expert_outputs[0].rows(), d = router.rows();
    Tensor logits({t, k});
    for (std::size_t i = 0; i < k; ++i) {
        const Tensor& out = expert_outputs[i];
        if (out.rows() != t || out.cols() != d)
            throw ShapeError("route_scores: expert output " + out.shape_str() + " vs router " + router.shape_str());
        for (std::size_t r = 0; r < t; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += out.at(r, j) * router.at(j, i);
            logits.at(r, i) = acc;
        }
    }
    return mode == RoutingMode::kSigmoid ? ops::sigmoid(logits) : ops::softmax_rows(logits);
}

// h̃ = rmsnorm(h_in); out = Σ_i score_i ⊙ E_i(h̃) + h_in
inline Tensor sublayer_forward(const Tensor& h_in, const SubLayer& s, RoutingMode mode, double eps,
                               Tensor* capture = nullptr) {
    s.check();
    const std::size_t k = s.k();
    Tensor h_norm = ops::rmsnorm(h_in, s.norm_gain, eps);
    std::vector<Tensor> outs(k);
    std::vector<Tensor> silus(k);
    for (std::size_t i = 0; i < k; ++i) outs[i] = expert_forward(h_norm, s.experts[i], &silus[i]);
    if (capture) {
        // concatenated silu outputs across experts: [t × K·d_e]
        const std::size_t t = h_in.rows(), de = silus[0].cols();
        Tensor acts({t, k * de});
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t r = 0; r < t; ++r)
                for (std::size_t j = 0; j < de; ++j) acts.at(r, i * de + j) = silus[i].at(r, j);
        *capture = std::move(acts);
    }
    Tensor out = h_in;
    if (!s.router_enabled) {
        // K=1 ablation: score ≡ 1
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += outs[0].data[i];
        return out;
    }
    Tensor scores = route_scores(outs, s.router, mode);
    const std::size_t t = h_in.rows(), d = h_in.cols();
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t j = 0; j < d; ++j) out.at(r, j) += scores.at(r, i) * outs[i].at(r, j);
    return out;
}

// Fold the M sub-layers in order, starting from the MHA output.
inline Tensor finedeep_ffn_forward(const Tensor& h0, const FinedeepFfn& f,
                                   const ActivationSink* sink = nullptr,
                                   const std::string& name_prefix = "") {
    Tensor h = h0;
    for (std::size_t j = 0; j < f.sublayers.size(); ++j) {
        Tensor acts;
        h = sublayer_forward(h, f.sublayers[j], f.routing_mode, f.eps, sink ? &acts : nullptr);
        if (sink) (*sink)(name_prefix + "sub" + std::to_string(j), acts);
    }
    return h;
}

// ---- graph-side (differentiable) versions --------------------------------

struct SubLayerVars {
    std::vector<GatedFfnVars> experts;
    Var router;
    Var norm_gain;
    bool router_enabled = true;
};

struct FinedeepFfnVars {
    std::vector<SubLayerVars> sublayers;
    RoutingMode routing_mode = RoutingMode::kSigmoid;
    double eps = 1e-5;
};

inline SubLayerVars bind(Graph& g, const SubLayer& s) {
    SubLayerVars v;
    for (const ExpertParams& e : s.experts) v.experts.push_back(bind(g, e));
    v.router = g.leaf(s.router);
    v.norm_gain = g.leaf(s.norm_gain);
    v.router_enabled = s.router_enabled;
    return v;
}

inline FinedeepFfnVars bind(Graph& g, const FinedeepFfn& f) {
    FinedeepFfnVars v;
    for (const SubLayer& s : f.sublayers) v.sublayers.push_back(bind(g, s));
    v.routing_mode = f.routing_mode;
    v.eps = f.eps;
    return v;
}

// `silus`, when non-null, receives the K silu-output vars (for activation
// capture).
inline Var sublayer_forward(Graph& g, Var h_in, const SubLayerVars& s, RoutingMode mode, double eps,
                            std::vector<Var>* silus = nullptr) {
    const std::size_t k = s.experts.size();
    Var h_norm = g.rmsnorm(h_in, s.norm_gain, eps);
    std::vector<Var> outs(k);
    if (silus) silus->resize(k);
    for (std::size_t i = 0; i < k; ++i)
        outs[i] = gated_forward(g, h_norm, s.experts[i], silus ? &(*silus)[i] : nullptr);
    if (!s.router_enabled) return g.add(h_in, outs[0]);
    // logits[t,i] = dot(out_i[t,:], router[:,i])
    std::vector<Var> logit_cols(k);
    for (std::size_t i = 0; i < k; ++i) {
        Var col = g.slice_cols(s.router, i, i + 1);  // [d×1]
        logit_cols[i] = g.matmul(outs[i], col);      // [t×1]
    }
    Var acc = h_in;
    if (mode == RoutingMode::kSigmoid) {
        for (std::size_t i = 0; i < k; ++i)
            acc = g.add(acc, g.scale_rows(outs[i], g.sigmoid(logit_cols[i])));
    } else {
        Var scores = g.softmax_rows(g.concat_cols(logit_cols));  // [t×K]
        for (std::size_t i = 0; i < k; ++i)
            acc = g.add(acc, g.scale_rows(outs[i], g.slice_cols(scores, i, i + 1)));
    }
    return acc;
}

inline Var finedeep_ffn_forward(Graph& g, Var h0, const FinedeepFfnVars& f) {
    Var h = h0;
    for (const SubLayerVars& s : f.sublayers) h = sublayer_forward(g, h, s, f.routing_mode, f.eps);
    return h;
}

}  // namespace finedeep
