#pragma once

#include <string>
#include <utility>
#include <vector>

#include "finedeep/gradcheck.hpp"
#include "finedeep/model.hpp"

namespace finedeep {

// Central-difference check of the full model loss gradient. `tokens` must
// hold at least 2 ids; loss is next-token cross entropy over the sequence.
inline GradCheckReport model_gradcheck(LmModel& model, const std::vector<int>& tokens,
                                       double h = 1e-5, double tol = 1e-4) {
    if (tokens.size() < 2) throw InputError("model_gradcheck: need at least 2 tokens");
    const std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
    const std::vector<int> targets(tokens.begin() + 1, tokens.end());

    Graph g(true);
    ModelVars v = bind(g, model);
    Var loss = g.cross_entropy(model_forward(g, v, model.cfg, inputs), targets);
    g.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(v.params.size());
    for (const auto& [name, var] : v.params) grads.push_back(g.grad(var));

    std::vector<std::pair<std::string, Tensor*>> params;
    model.for_each_param([&](const std::string& name, Tensor& t) { params.emplace_back(name, &t); });
    std::vector<const Tensor*> grad_ptrs;
    for (const Tensor& t : grads) grad_ptrs.push_back(&t);

    auto f = [&]() {
        Graph fg(false);
        ModelVars fv = bind(fg, model);
        return fg.value(fg.cross_entropy(model_forward(fg, fv, model.cfg, inputs), targets)).data[0];
    };
    return finite_diff_check(f, params, grad_ptrs, h, tol);
}

}  // namespace finedeep
