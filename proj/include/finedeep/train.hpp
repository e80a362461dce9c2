#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "finedeep/model.hpp"
#include "finedeep/tensor.hpp"

namespace finedeep {

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::int64_t elapsed_ms = 0;
};

// Linear warmup to lr, then cosine decay to 0.1·lr at the final step.
inline double lr_at_step(int step, int total_steps, double base_lr, std::size_t warmup_steps) {
    int warmup = warmup_steps > 0 ? static_cast<int>(warmup_steps)
                                  : std::max(10, total_steps / 20);
    warmup = std::min(warmup, total_steps);
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double min_lr = 0.1 * base_lr;
    if (total_steps <= warmup) return base_lr;
    const double frac = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(frac * M_PI));
}

// Adam with decoupled weight decay. Decay applies to matrices only (norm
// gains are 1-d and skipped). Moments stay in double; parameters are snapped
// to float32 values after each update so checkpoints are lossless.
class AdamOptimizer {
  public:
    AdamOptimizer(double beta1 = 0.9, double beta2 = 0.95, double eps = 1e-8, double weight_decay = 0.1)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(LmModel& model, const std::vector<Tensor>& grads, double lr) {
        if (moments_m_.empty()) {
            model.for_each_param([this](const std::string&, Tensor& t) {
                moments_m_.emplace_back(t.shape);
                moments_v_.emplace_back(t.shape);
            });
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        std::size_t p = 0;
        model.for_each_param([&](const std::string&, Tensor& theta) {
            const Tensor& g = grads[p];
            Tensor& m = moments_m_[p];
            Tensor& v = moments_v_[p];
            const bool decay = theta.ndim() == 2;
            for (std::size_t i = 0; i < theta.data.size(); ++i) {
                m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g.data[i];
                v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
                double x = theta.data[i];
                if (decay) x -= lr * weight_decay_ * x;
                x -= lr * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + eps_);
                theta.data[i] = static_cast<double>(static_cast<float>(x));
            }
            ++p;
        });
    }

  private:
    double beta1_, beta2_, eps_, weight_decay_;
    int t_ = 0;
    std::vector<Tensor> moments_m_, moments_v_;
};

// One training step's gradient accumulation over a batch of sequences, each
// through its own graph. Fixed sequence order keeps reduction deterministic.
inline double train_step(LmModel& model, const std::vector<std::vector<int>>& batch,
                         std::vector<Tensor>& grads_out) {
    double loss_sum = 0.0;
    bool first = grads_out.empty();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const std::vector<int>& seq : batch) {
        std::vector<int> inputs(seq.begin(), seq.end() - 1);
        std::vector<int> targets(seq.begin() + 1, seq.end());
        Graph g(true);
        ModelVars v = bind(g, model);
        Var loss = g.cross_entropy(model_forward(g, v, model.cfg, inputs), targets);
        loss_sum += g.value(loss).data[0];
        g.backward(loss);
        std::size_t p = 0;
        for (const auto& [name, var] : v.params) {
            const Tensor& grad = g.grad(var);
            if (first) {
                grads_out.emplace_back(grad.shape);
            }
            Tensor& acc = grads_out[p];
            for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += inv_b * grad.data[i];
            ++p;
        }
        first = false;
    }
    return loss_sum * inv_b;
}

// Full training run on a byte corpus. Deterministic for a given config/seed:
// loss and lr columns of the metrics are bit-identical across runs
// (elapsed_ms is wall-clock and excluded from that guarantee).
inline std::vector<StepMetrics> train(LmModel& model, const std::vector<std::uint8_t>& corpus, int steps) {
    if (corpus.empty()) throw ConfigError("train: corpus is empty");
    if (steps <= 0) throw ConfigError("train: steps must be positive");
    const ModelConfig& cfg = model.cfg;
    const std::size_t window = cfg.max_seq_len + 1;
    if (corpus.size() < window) throw ConfigError("train: corpus shorter than one training window");
    for (std::uint8_t b : corpus)
        if (static_cast<std::size_t>(b) >= cfg.vocab_size)
            throw InputError("train: corpus byte " + std::to_string(b) + " outside vocab");

    std::mt19937_64 data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    std::uniform_int_distribution<std::size_t> start_dist(0, corpus.size() - window);

    AdamOptimizer opt(0.9, 0.95, 1e-8, cfg.weight_decay);
    std::vector<StepMetrics> metrics;
    metrics.reserve(static_cast<std::size_t>(steps));
    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 0; step < steps; ++step) {
        std::vector<std::vector<int>> batch;
        for (std::size_t b = 0; b < std::max<std::size_t>(1, cfg.batch_size); ++b) {
            const std::size_t s = start_dist(data_rng);
            std::vector<int> seq(window);
            for (std::size_t i = 0; i < window; ++i) seq[i] = corpus[s + i];
            batch.push_back(std::move(seq));
        }
        std::vector<Tensor> grads;
        const double loss = train_step(model, batch, grads);
        const double lr = lr_at_step(step, steps, cfg.lr, cfg.warmup_steps);
        opt.step(model, grads, lr);
        const auto now = std::chrono::steady_clock::now();
        metrics.push_back({step, loss, lr,
                           std::chrono::duration_cast<std::chrono::milliseconds>(now - t0).count()});
    }
    return metrics;
}

// exp(mean next-token NLL) over non-overlapping max_seq_len windows.
inline double eval_ppl(LmModel& model, const std::vector<std::uint8_t>& corpus) {
    if (corpus.size() < 2) throw InputError("eval_ppl: corpus must hold at least 2 tokens");
    for (std::uint8_t b : corpus)
        if (static_cast<std::size_t>(b) >= model.cfg.vocab_size)
            throw InputError("eval_ppl: corpus byte " + std::to_string(b) + " outside vocab");
    const std::size_t w = model.cfg.max_seq_len;
    double nll_sum = 0.0;
    std::size_t n_preds = 0;
    for (std::size_t off = 0; off + 1 < corpus.size(); off += w) {
        const std::size_t len = std::min(w + 1, corpus.size() - off);
        if (len < 2) break;
        std::vector<int> inputs(len - 1), targets(len - 1);
        for (std::size_t i = 0; i + 1 < len; ++i) {
            inputs[i] = corpus[off + i];
            targets[i] = corpus[off + i + 1];
        }
        const Tensor logits = model_forward(model, inputs);
        nll_sum += cross_entropy_loss(logits, targets) * static_cast<double>(len - 1);
        n_preds += len - 1;
    }
    return std::exp(nll_sum / static_cast<double>(n_preds));
}

}  // namespace finedeep
