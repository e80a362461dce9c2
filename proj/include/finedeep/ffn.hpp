#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "finedeep/autograd.hpp"
#include "finedeep/tensor.hpp"

namespace finedeep {

// Gated FFN: (silu(h·W_g) ⊙ h·W_up) · W_down. No bias terms.
struct DenseFfnParams {
    Tensor w_gate;  // [d × d_ff]
    Tensor w_up;    // [d × d_ff]
    Tensor w_down;  // [d_ff × d]

    std::size_t d() const { return w_gate.rows(); }
    std::size_t d_ff() const { return w_gate.cols(); }

    void check() const {
        if (w_up.rows() != d() || w_up.cols() != d_ff() || w_down.rows() != d_ff() || w_down.cols() != d())
            throw ShapeError("DenseFfnParams: inconsistent shapes gate=" + w_gate.shape_str() +
                             " up=" + w_up.shape_str() + " down=" + w_down.shape_str());
    }
};

// A contiguous slice of the dense FFN along the intermediate dimension.
// Global index (1-based) is (sublayer−1)·K + position.
struct ExpertParams {
    Tensor w_gate;  // [d × d_e]
    Tensor w_up;    // [d × d_e]
    Tensor w_down;  // [d_e × d]
    std::size_t sublayer = 1;  // j, 1-based
    std::size_t position = 1;  // i within sub-layer, 1-based

    std::size_t d() const { return w_gate.rows(); }
    std::size_t d_e() const { return w_gate.cols(); }
    std::size_t global_index(std::size_t experts_per_sublayer) const {
        return (sublayer - 1) * experts_per_sublayer + position;
    }
};

namespace detail {

// silu-gated projection, shared by the dense FFN and its expert slices.
// `capture`, when non-null, receives the silu output rows (the activations
// analysed by the sparsity metrics).
inline Tensor gated_forward(const Tensor& h, const Tensor& wg, const Tensor& wu, const Tensor& wd,
                            Tensor* capture = nullptr) {
    Tensor gate = ops::silu(ops::matmul(h, wg));
    if (capture) *capture = gate;
    return ops::matmul(ops::mul(gate, ops::matmul(h, wu)), wd);
}

}  // namespace detail

inline Tensor ffn_forward(const Tensor& h, const DenseFfnParams& p, Tensor* capture = nullptr) {
    p.check();
    if (h.cols() != p.d())
        throw ShapeError("ffn_forward: input " + h.shape_str() + " vs hidden size " + std::to_string(p.d()));
    return detail::gated_forward(h, p.w_gate, p.w_up, p.w_down, capture);
}

inline Tensor expert_forward(const Tensor& h, const ExpertParams& e, Tensor* capture = nullptr) {
    if (h.cols() != e.d())
        throw ShapeError("expert_forward: input " + h.shape_str() + " vs hidden size " + std::to_string(e.d()));
    return detail::gated_forward(h, e.w_gate, e.w_up, e.w_down, capture);
}

// Slice the dense FFN into M·K experts, contiguous blocks of d_ff/(M·K)
// intermediate columns in global-index order. Concatenating the slices back
// reproduces the dense matrices bit-exactly.
inline std::vector<ExpertParams> partition_ffn(const DenseFfnParams& p, std::size_t m, std::size_t k) {
    p.check();
    if (m < 1 || k < 1 || p.d_ff() % (m * k) != 0)
        throw ConfigError("partition_ffn: d_ff=" + std::to_string(p.d_ff()) + " not divisible by M·K=" +
                          std::to_string(m) + "·" + std::to_string(k));
    const std::size_t d = p.d(), de = p.d_ff() / (m * k);
    std::vector<ExpertParams> experts;
    experts.reserve(m * k);
    for (std::size_t g = 0; g < m * k; ++g) {
        ExpertParams e;
        e.sublayer = g / k + 1;
        e.position = g % k + 1;
        e.w_gate = Tensor({d, de});
        e.w_up = Tensor({d, de});
        e.w_down = Tensor({de, d});
        const std::size_t c0 = g * de;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < de; ++j) {
                e.w_gate.at(i, j) = p.w_gate.at(i, c0 + j);
                e.w_up.at(i, j) = p.w_up.at(i, c0 + j);
            }
        for (std::size_t i = 0; i < de; ++i)
            for (std::size_t j = 0; j < d; ++j) e.w_down.at(i, j) = p.w_down.at(c0 + i, j);
        experts.push_back(std::move(e));
    }
    return experts;
}

// Inverse of partition_ffn (exact, since slices are contiguous copies).
inline DenseFfnParams reassemble_ffn(const std::vector<ExpertParams>& experts) {
    if (experts.empty()) throw ConfigError("reassemble_ffn: no experts");
    const std::size_t d = experts[0].d(), de = experts[0].d_e();
    const std::size_t dff = de * experts.size();
    DenseFfnParams p;
    p.w_gate = Tensor({d, dff});
    p.w_up = Tensor({d, dff});
    p.w_down = Tensor({dff, d});
    for (std::size_t g = 0; g < experts.size(); ++g) {
        const ExpertParams& e = experts[g];
        if (e.d() != d || e.d_e() != de) throw ShapeError("reassemble_ffn: heterogeneous expert shapes");
        const std::size_t c0 = g * de;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < de; ++j) {
                p.w_gate.at(i, c0 + j) = e.w_gate.at(i, j);
                p.w_up.at(i, c0 + j) = e.w_up.at(i, j);
            }
        for (std::size_t i = 0; i < de; ++i)
            for (std::size_t j = 0; j < d; ++j) p.w_down.at(c0 + i, j) = e.w_down.at(i, j);
    }
    return p;
}

// ---- graph-side (differentiable) versions --------------------------------

struct GatedFfnVars {
    Var w_gate, w_up, w_down;
};

inline GatedFfnVars bind(Graph& g, const DenseFfnParams& p) {
    return {g.leaf(p.w_gate), g.leaf(p.w_up), g.leaf(p.w_down)};
}
inline GatedFfnVars bind(Graph& g, const ExpertParams& e) {
    return {g.leaf(e.w_gate), g.leaf(e.w_up), g.leaf(e.w_down)};
}

inline Var gated_forward(Graph& g, Var h, const GatedFfnVars& p, Var* silu_out = nullptr) {
    Var gate = g.silu(g.matmul(h, p.w_gate));
    if (silu_out) *silu_out = gate;
    return g.matmul(g.mul(gate, g.matmul(h, p.w_up)), p.w_down);
}

}  // namespace finedeep
