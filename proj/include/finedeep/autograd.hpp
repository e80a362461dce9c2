#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "finedeep/tensor.hpp"

namespace finedeep {

// Handle into a Graph's tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. One graph per forward pass; node creation order is a
// topological order, so backward() is a single reverse sweep that visits
// every recorded operation exactly once. Single-threaded by contract.
class Graph {
  public:
    explicit Graph(bool requires_grad = true) : requires_grad_(requires_grad) {}

    Var leaf(const Tensor& value) {
        return push(value, std::function<void(const Tensor&)>());
    }

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }

    // Zero tensor if the loss does not depend on this node.
    const Tensor& grad(Var v) {
        Node& n = nodes_[check(v)];
        ensure_grad(n);
        return n.grad;
    }

    // ---- operations -----------------------------------------------------

    Var matmul(Var a, Var b) {
        Tensor out = ops::matmul(value(a), value(b));
        return push(std::move(out), [this, a, b](const Tensor& g) {
            accumulate(a, ops::matmul_nt(g, value(b)));
            accumulate(b, ops::matmul_tn(value(a), g));
        });
    }

    // a · bᵀ
    Var matmul_nt(Var a, Var b) {
        Tensor out = ops::matmul_nt(value(a), value(b));
        return push(std::move(out), [this, a, b](const Tensor& g) {
            accumulate(a, ops::matmul(g, value(b)));
            accumulate(b, ops::matmul_tn(g, value(a)));
        });
    }

    Var add(Var a, Var b) {
        Tensor out = ops::add(value(a), value(b));
        return push(std::move(out), [this, a, b](const Tensor& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    // a + c with c constant (attention masks)
    Var add_const(Var a, const Tensor& c) {
        Tensor out = ops::add(value(a), c);
        return push(std::move(out), [this, a](const Tensor& g) { accumulate(a, g); });
    }

    Var mul(Var a, Var b) {
        Tensor out = ops::mul(value(a), value(b));
        return push(std::move(out), [this, a, b](const Tensor& g) {
            accumulate(a, ops::mul(g, value(b)));
            accumulate(b, ops::mul(g, value(a)));
        });
    }

    Var scale(Var a, double s) {
        Tensor out = ops::scale(value(a), s);
        return push(std::move(out), [this, a, s](const Tensor& g) { accumulate(a, ops::scale(g, s)); });
    }

    Var silu(Var a) {
        Tensor out = ops::silu(value(a));
        return push(std::move(out), [this, a](const Tensor& g) {
            const Tensor& x = value(a);
            Tensor gx = g;
            for (std::size_t i = 0; i < gx.data.size(); ++i) {
                const double s = ops::sigmoid_scalar(x.data[i]);
                gx.data[i] *= s * (1.0 + x.data[i] * (1.0 - s));
            }
            accumulate(a, std::move(gx));
        });
    }

    Var sigmoid(Var a) {
        Tensor out = ops::sigmoid(value(a));
        return push(std::move(out), [this, a](const Tensor& g, const Tensor& y) {
            Tensor gx = g;
            for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] *= y.data[i] * (1.0 - y.data[i]);
            accumulate(a, std::move(gx));
        });
    }

    Var softmax_rows(Var a) {
        Tensor out = ops::softmax_rows(value(a));
        return push(std::move(out), [this, a](const Tensor& g, const Tensor& y) {
            const std::size_t n = y.shape.back();
            const std::size_t r = y.numel() / n;
            Tensor gx = g;
            for (std::size_t i = 0; i < r; ++i) {
                const double* srow = y.data.data() + i * n;
                double* grow = gx.data.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += grow[j] * srow[j];
                for (std::size_t j = 0; j < n; ++j) grow[j] = srow[j] * (grow[j] - dot);
            }
            accumulate(a, std::move(gx));
        });
    }

    Var rmsnorm(Var x, Var gain, double eps) {
        Tensor out = ops::rmsnorm(value(x), value(gain), eps);
        return push(std::move(out), [this, x, gain, eps](const Tensor& g) {
            const Tensor& xv = value(x);
            const Tensor& gv = value(gain);
            const std::size_t d = xv.shape.back();
            const std::size_t r = xv.numel() / d;
            Tensor gx(xv.shape);
            Tensor gg(gv.shape);
            for (std::size_t i = 0; i < r; ++i) {
                const double* xr = xv.data.data() + i * d;
                const double* gr = g.data.data() + i * d;
                double* oxr = gx.data.data() + i * d;
                double ms = 0.0;
                for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
                ms /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(ms + eps);
                // dot = Σ_j g_j · gain_j · x_j
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv.data[j] * xr[j];
                const double c = inv * inv * inv * dot / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    oxr[j] = inv * gr[j] * gv.data[j] - c * xr[j];
                    gg.data[j] += gr[j] * xr[j] * inv;
                }
            }
            accumulate(x, std::move(gx));
            accumulate(gain, std::move(gg));
        });
    }

    // out[r] = table[idx[r], :]; backward scatter-adds into the table rows.
    Var gather_rows(Var table, const std::vector<int>& idx) {
        const Tensor& tv = value(table);
        const std::size_t d = tv.cols();
        Tensor out({idx.size(), d});
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) out.at(r, j) = tv.at(static_cast<std::size_t>(idx[r]), j);
        return push(std::move(out), [this, table, idx, d](const Tensor& g) {
            Tensor gt(value(table).shape);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) gt.at(static_cast<std::size_t>(idx[r]), j) += g.at(r, j);
            accumulate(table, std::move(gt));
        });
    }

    // Columns [c0, c1) of a matrix.
    Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
        const Tensor& av = value(a);
        const std::size_t m = av.rows(), n = av.cols(), w = c1 - c0;
        if (c1 > n || c0 >= c1) throw ShapeError("slice_cols: range out of bounds");
        Tensor out({m, w});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out.at(i, j) = av.at(i, c0 + j);
        return push(std::move(out), [this, a, c0, w, m, n](const Tensor& g) {
            Tensor ga({m, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) ga.at(i, c0 + j) = g.at(i, j);
            accumulate(a, std::move(ga));
        });
    }

    // Horizontal concatenation of matrices with equal row counts.
    Var concat_cols(const std::vector<Var>& parts) {
        const std::size_t m = value(parts.at(0)).rows();
        std::size_t n = 0;
        for (Var p : parts) {
            if (value(p).rows() != m) throw ShapeError("concat_cols: row count mismatch");
            n += value(p).cols();
        }
        Tensor out({m, n});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& pv = value(p);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < pv.cols(); ++j) out.at(i, off + j) = pv.at(i, j);
            off += pv.cols();
        }
        return push(std::move(out), [this, parts, m, n](const Tensor& g) {
            std::size_t off2 = 0;
            for (Var p : parts) {
                const std::size_t w = value(p).cols();
                Tensor gp({m, w});
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) gp.at(i, j) = g.at(i, off2 + j);
                accumulate(p, std::move(gp));
                off2 += w;
            }
        });
    }

    // out[i,:] = x[i,:] * s[i]; s is [t×1]. One score per token, broadcast
    // over the hidden dimension.
    Var scale_rows(Var x, Var s) {
        const Tensor& xv = value(x);
        const Tensor& sv = value(s);
        const std::size_t m = xv.rows(), d = xv.cols();
        if (sv.numel() != m) throw ShapeError("scale_rows: score length mismatch");
        Tensor out = xv;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) *= sv.data[i];
        return push(std::move(out), [this, x, s, m, d](const Tensor& g) {
            const Tensor& xv2 = value(x);
            const Tensor& sv2 = value(s);
            Tensor gx = g;
            Tensor gs(sv2.shape);
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    acc += g.at(i, j) * xv2.at(i, j);
                    gx.at(i, j) *= sv2.data[i];
                }
                gs.data[i] = acc;
            }
            accumulate(x, std::move(gx));
            accumulate(s, std::move(gs));
        });
    }

    Var sum(Var a) {
        double acc = 0.0;
        for (double v : value(a).data) acc += v;
        Tensor out = Tensor::scalar(acc);
        return push(std::move(out), [this, a](const Tensor& g) {
            Tensor ga(value(a).shape, g.data[0]);
            accumulate(a, std::move(ga));
        });
    }

    // Mean over positions of −log softmax(logits)[target]. Fused for
    // numerical stability; backward is (softmax − onehot)/t.
    Var cross_entropy(Var logits, const std::vector<int>& targets) {
        const Tensor& lv = value(logits);
        const std::size_t t = lv.rows(), v = lv.cols();
        if (targets.size() != t) throw InputError("cross_entropy: target count mismatch");
        for (int tgt : targets)
            if (tgt < 0 || static_cast<std::size_t>(tgt) >= v)
                throw InputError("cross_entropy: target id " + std::to_string(tgt) + " out of range");
        Tensor probs = ops::softmax_rows(lv);
        double loss = 0.0;
        for (std::size_t i = 0; i < t; ++i) {
            // recompute log-prob stably from logits
            const double* row = lv.data.data() + i * v;
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double lse = 0.0;
            for (std::size_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
            loss += std::log(lse) + mx - row[static_cast<std::size_t>(targets[i])];
        }
        loss /= static_cast<double>(t);
        Tensor out = Tensor::scalar(loss);
        return push(std::move(out), [this, logits, targets, probs, t, v](const Tensor& g) {
            Tensor gl = probs;
            for (std::size_t i = 0; i < t; ++i) gl.at(i, static_cast<std::size_t>(targets[i])) -= 1.0;
            const double s = g.data[0] / static_cast<double>(t);
            for (double& x : gl.data) x *= s;
            accumulate(logits, std::move(gl));
        });
    }

    // ---- backward --------------------------------------------------------

    void backward(Var loss) {
        Node& ln = nodes_[check(loss)];
        if (ln.value.numel() != 1) {
            throw InputError("backward: loss must be a scalar, got shape " + ln.value.shape_str());
        }
        ensure_grad(ln);
        ln.grad.data[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && n.has_grad) n.backward(n.grad, n.value);
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        std::function<void(const Tensor& grad, const Tensor& value)> backward;
    };

    int check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw InputError("invalid graph variable");
        return v.id;
    }

    void ensure_grad(Node& n) {
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape);
            n.has_grad = true;
        }
    }

    void accumulate(Var v, const Tensor& g) {
        Node& n = nodes_[check(v)];
        ensure_grad(n);
        check_same_shape(n.grad, g, "grad accumulate");
        for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }
    void accumulate(Var v, Tensor&& g) {
        Node& n = nodes_[check(v)];
        if (!n.has_grad) {
            check_same_shape(n.value, g, "grad accumulate");
            n.grad = std::move(g);
            n.has_grad = true;
        } else {
            accumulate(v, static_cast<const Tensor&>(g));
        }
    }

    Var push(Tensor value, std::function<void(const Tensor&)> bwd) {
        if (bwd && requires_grad_) {
            return push(std::move(value),
                        [f = std::move(bwd)](const Tensor& g, const Tensor&) { f(g); });
        }
        Node n;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var push(Tensor value, std::function<void(const Tensor&, const Tensor&)> bwd) {
        Node n;
        n.value = std::move(value);
        if (requires_grad_) n.backward = std::move(bwd);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    bool requires_grad_;
};

}  // namespace finedeep
