#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "finedeep/model.hpp"
#include "finedeep/model_gradcheck.hpp"
#include "finedeep/train.hpp"

using namespace finedeep;

namespace {

ModelConfig tiny_dense() {
    ModelConfig c;
    c.hidden_size = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.intermediate = 16;
    c.vocab_size = 11;
    c.max_seq_len = 8;
    c.arch = "dense";
    c.seed = 42;
    return c;
}

ModelConfig tiny_finedeep() {
    ModelConfig c = tiny_dense();
    c.arch = "finedeep";
    c.M = 2;
    c.K = 2;
    return c;
}

std::vector<std::uint8_t> repeated_corpus(std::size_t copies) {
    // one fixed 32-byte sample, repeated
    const std::string sample = "the quick brown fox jumps over..";
    std::vector<std::uint8_t> corpus;
    for (std::size_t i = 0; i < copies; ++i) corpus.insert(corpus.end(), sample.begin(), sample.end());
    return corpus;
}

}  // namespace

TEST_CASE("causal_mha: single token with identity projections returns the token") {
    const std::size_t d = 4;
    AttnParams a;
    a.wq = a.wk = a.wv = a.wo = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) {
        a.wq.at(i, i) = 1.0;
        a.wk.at(i, i) = 1.0;
        a.wv.at(i, i) = 1.0;
        a.wo.at(i, i) = 1.0;
    }
    Tensor x({1, d}, {0.3, -1.2, 0.8, 2.0});
    Graph g(false);
    AttnVars av = {g.leaf(a.wq), g.leaf(a.wk), g.leaf(a.wv), g.leaf(a.wo)};
    Tensor out = g.value(causal_mha(g, g.leaf(x), av, 1));
    for (std::size_t i = 0; i < d; ++i) CHECK(out.data[i] == doctest::Approx(x.data[i]).epsilon(1e-12));
}

TEST_CASE("causal_mha: zero queries give uniform attention over the prefix") {
    std::mt19937_64 rng(41);
    const std::size_t d = 4;
    AttnParams a;
    a.wq = Tensor::zeros({d, d});
    a.wk = Tensor::randn({d, d}, rng, 0.5);
    a.wv = Tensor::zeros({d, d});
    a.wo = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) {
        a.wv.at(i, i) = 1.0;
        a.wo.at(i, i) = 1.0;
    }
    Tensor x = Tensor::randn({2, d}, rng, 1.0);
    Graph g(false);
    AttnVars av = {g.leaf(a.wq), g.leaf(a.wk), g.leaf(a.wv), g.leaf(a.wo)};
    Tensor out = g.value(causal_mha(g, g.leaf(x), av, 1));
    for (std::size_t j = 0; j < d; ++j) {
        CHECK(out.at(0, j) == doctest::Approx(x.at(0, j)).epsilon(1e-12));
        CHECK(out.at(1, j) == doctest::Approx(0.5 * (x.at(0, j) + x.at(1, j))).epsilon(1e-12));
    }
}

TEST_CASE("causal_mha: random 1-head t=3 matches naive attention oracle") {
    std::mt19937_64 rng(42);
    const std::size_t d = 4, t = 3;
    AttnParams a;
    a.wq = Tensor::randn({d, d}, rng, 0.5);
    a.wk = Tensor::randn({d, d}, rng, 0.5);
    a.wv = Tensor::randn({d, d}, rng, 0.5);
    a.wo = Tensor::randn({d, d}, rng, 0.5);
    Tensor x = Tensor::randn({t, d}, rng, 1.0);

    Graph g(false);
    AttnVars av = {g.leaf(a.wq), g.leaf(a.wk), g.leaf(a.wv), g.leaf(a.wo)};
    Tensor fast = g.value(causal_mha(g, g.leaf(x), av, 1));

    // naive scalar-loop oracle
    Tensor q = ops::matmul(x, a.wq), k = ops::matmul(x, a.wk), v = ops::matmul(x, a.wv);
    Tensor pre({t, d});
    for (std::size_t i = 0; i < t; ++i) {
        std::vector<double> w(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q.at(i, c) * k.at(j, c);
            w[j] = s / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, w[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            w[j] = std::exp(w[j] - mx);
            sum += w[j];
        }
        for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t c = 0; c < d; ++c) pre.at(i, c) += w[j] / sum * v.at(j, c);
    }
    Tensor expect = ops::matmul(pre, a.wo);
    for (std::size_t i = 0; i < fast.numel(); ++i) CHECK(std::fabs(fast.data[i] - expect.data[i]) < 1e-10);
}

TEST_CASE("model_forward: output shape and causality") {
    for (const ModelConfig& cfg : {tiny_dense(), tiny_finedeep()}) {
        LmModel m = LmModel::init(cfg);
        std::vector<int> tokens = {1, 5, 9, 2};
        Tensor logits = model_forward(m, tokens);
        CHECK(logits.rows() == 4);
        CHECK(logits.cols() == cfg.vocab_size);
        CHECK(logits.all_finite());

        // perturb the last token: earlier positions bit-identical
        std::vector<int> perturbed = tokens;
        perturbed[3] = 7;
        Tensor l2 = model_forward(m, perturbed);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < cfg.vocab_size; ++j) CHECK(logits.at(i, j) == l2.at(i, j));
    }
}

TEST_CASE("model_forward: out-of-range token id") {
    LmModel m = LmModel::init(tiny_dense());
    CHECK_THROWS_AS(model_forward(m, {1, 11}), InputError);
    CHECK_THROWS_AS(model_forward(m, {1, -1}), InputError);
}

TEST_CASE("finedeep model with all expert down-projections zeroed equals FFN-ablated model") {
    ModelConfig cfg = tiny_finedeep();
    LmModel fd = LmModel::init(cfg);
    for (LayerParams& lp : fd.layers)
        for (SubLayer& s : lp.fd.sublayers)
            for (ExpertParams& e : s.experts) e.w_down = Tensor::zeros(e.w_down.shape);

    // reference: same weights, FFN stage skipped entirely (identity)
    std::vector<int> tokens = {3, 1, 4, 1, 5};
    Tensor logits = model_forward(fd, tokens);

    Graph g(false);
    ModelVars v = bind(g, fd);
    std::vector<int> positions;
    for (std::size_t i = 0; i < tokens.size(); ++i) positions.push_back(static_cast<int>(i));
    Var x = g.add(g.gather_rows(v.tok_emb, tokens), g.gather_rows(v.pos_emb, positions));
    for (std::size_t l = 0; l < v.layers.size(); ++l) {
        const LayerVars& lv = v.layers[l];
        x = g.add(x, causal_mha(g, g.rmsnorm(x, lv.attn_norm, cfg.rms_eps), lv.attn, cfg.n_heads));
    }
    Tensor expect = g.value(g.matmul(g.rmsnorm(x, v.final_norm, cfg.rms_eps), v.head));
    for (std::size_t i = 0; i < logits.numel(); ++i)
        CHECK(std::fabs(logits.data[i] - expect.data[i]) < 1e-12);
}

TEST_CASE("cross_entropy_loss values") {
    Tensor uniform({2, 8});
    CHECK(cross_entropy_loss(uniform, {3, 5}) == doctest::Approx(std::log(8.0)).epsilon(1e-12));

    Tensor confident({1, 4});
    confident.at(0, 2) = 1000.0;
    CHECK(cross_entropy_loss(confident, {2}) < 1e-6);

    // random 2x3 case against a scalar log-sum-exp oracle
    Tensor logits({2, 3}, {0.3, -1.1, 0.7, 2.0, 0.1, -0.4});
    std::vector<int> targets = {2, 0};
    double expect = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        double lse = 0.0;
        for (std::size_t j = 0; j < 3; ++j) lse += std::exp(logits.at(i, j));
        expect += std::log(lse) - logits.at(i, static_cast<std::size_t>(targets[i]));
    }
    expect /= 2.0;
    CHECK(cross_entropy_loss(logits, targets) == doctest::Approx(expect).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy_loss(uniform, {3, 9}), InputError);
}

TEST_CASE("end-to-end gradient check on tiny models (dense and finedeep)") {
    for (ModelConfig cfg : {tiny_dense(), tiny_finedeep()}) {
        LmModel m = LmModel::init(cfg);
        GradCheckReport rep = model_gradcheck(m, {1, 7, 3, 9, 5}, 1e-5, 1e-4);
        INFO("arch=", cfg.arch, " max_rel_err=", rep.max_rel_err, " worst=", rep.worst_param);
        CHECK(rep.pass);
    }
}

TEST_CASE("parameter count of constructed model matches config accounting") {
    // cross-checked thoroughly in test_analysis; here just the construction invariant
    LmModel dense = LmModel::init(tiny_dense());
    LmModel fd = LmModel::init(tiny_finedeep());
    CHECK(fd.param_count() ==
          dense.param_count() + 2 * (2 * 2 * 8 + 8));  // per layer: MK·d router + (M−1)·d norm
}

TEST_CASE("train: error cases") {
    ModelConfig cfg = tiny_dense();
    LmModel m = LmModel::init(cfg);
    std::vector<std::uint8_t> corpus = repeated_corpus(4);
    CHECK_THROWS_AS(train(m, {}, 10), ConfigError);
    CHECK_THROWS_AS(train(m, corpus, 0), ConfigError);
}

TEST_CASE("train: determinism - identical seeds give bit-identical loss curves") {
    ModelConfig cfg = tiny_dense();
    cfg.vocab_size = 256;
    cfg.batch_size = 2;
    std::vector<std::uint8_t> corpus = repeated_corpus(8);
    LmModel m1 = LmModel::init(cfg);
    LmModel m2 = LmModel::init(cfg);
    auto log1 = train(m1, corpus, 12);
    auto log2 = train(m2, corpus, 12);
    REQUIRE(log1.size() == log2.size());
    for (std::size_t i = 0; i < log1.size(); ++i) {
        CHECK(log1[i].loss == log2[i].loss);
        CHECK(log1[i].lr == log2[i].lr);
        CHECK(log1[i].step == log2[i].step);
    }
    // and the resulting weights match bit-exactly
    bool same = true;
    std::vector<const Tensor*> p1, p2;
    m1.for_each_param([&](const std::string&, Tensor& t) { p1.push_back(&t); });
    m2.for_each_param([&](const std::string&, Tensor& t) { p2.push_back(&t); });
    for (std::size_t i = 0; i < p1.size(); ++i) same = same && (p1[i]->data == p2[i]->data);
    CHECK(same);
}

TEST_CASE("train: overfits a single repeated 32-token sample") {
    ModelConfig cfg;
    cfg.hidden_size = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.intermediate = 64;
    cfg.vocab_size = 256;
    cfg.max_seq_len = 32;
    cfg.batch_size = 1;
    cfg.lr = 1e-3;
    cfg.seed = 7;
    LmModel m = LmModel::init(cfg);
    std::vector<std::uint8_t> corpus = repeated_corpus(64);
    auto metrics = train(m, corpus, 500);
    CHECK(metrics.back().loss < 0.1);

    // ppl on the memorized sample follows
    std::vector<std::uint8_t> sample = repeated_corpus(2);
    CHECK(eval_ppl(m, sample) < 1.2);
}

TEST_CASE("eval_ppl: zeroed head gives ppl = vocab_size; ppl = exp(mean loss)") {
    ModelConfig cfg = tiny_dense();
    cfg.vocab_size = 11;
    LmModel m = LmModel::init(cfg);
    m.head = Tensor::zeros(m.head.shape);
    std::vector<std::uint8_t> corpus = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0, 1, 2};
    CHECK(eval_ppl(m, corpus) == doctest::Approx(11.0).epsilon(1e-12));

    CHECK_THROWS_AS(eval_ppl(m, {static_cast<std::uint8_t>(1)}), InputError);
}

TEST_CASE("lr schedule: warmup then cosine decay") {
    CHECK(lr_at_step(0, 1000, 3e-4, 100) == doctest::Approx(3e-4 / 100.0));
    CHECK(lr_at_step(99, 1000, 3e-4, 100) == doctest::Approx(3e-4));
    CHECK(lr_at_step(999, 1000, 3e-4, 100) == doctest::Approx(0.1 * 3e-4).epsilon(1e-4));
    // monotone decreasing after warmup
    double prev = 1.0;
    for (int s = 100; s < 1000; s += 50) {
        const double lr = lr_at_step(s, 1000, 3e-4, 100);
        CHECK(lr < prev);
        prev = lr;
    }
}
