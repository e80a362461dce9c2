#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "finedeep/model.hpp"

namespace finedeep {

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"hidden_size", c.hidden_size},
                          {"n_layers", c.n_layers},
                          {"n_heads", c.n_heads},
                          {"intermediate", c.intermediate},
                          {"vocab_size", c.vocab_size},
                          {"max_seq_len", c.max_seq_len},
                          {"arch", c.arch},
                          {"M", c.M},
                          {"K", c.K},
                          {"routing_mode", c.routing_mode},
                          {"router_enabled", c.router_enabled},
                          {"rms_eps", c.rms_eps},
                          {"lr", c.lr},
                          {"weight_decay", c.weight_decay},
                          {"seed", c.seed},
                          {"tie_embeddings", c.tie_embeddings},
                          {"batch_size", c.batch_size},
                          {"warmup_steps", c.warmup_steps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
    };
    get("hidden_size", c.hidden_size);
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("intermediate", c.intermediate);
    get("vocab_size", c.vocab_size);
    get("max_seq_len", c.max_seq_len);
    get("arch", c.arch);
    get("M", c.M);
    get("K", c.K);
    get("routing_mode", c.routing_mode);
    get("router_enabled", c.router_enabled);
    get("rms_eps", c.rms_eps);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("seed", c.seed);
    get("tie_embeddings", c.tie_embeddings);
    get("batch_size", c.batch_size);
    get("warmup_steps", c.warmup_steps);
    c.validate();
    return c;
}

inline ModelConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config " + path + " is not valid JSON: " + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
}

}  // namespace finedeep
