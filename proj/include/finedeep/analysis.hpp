#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "finedeep/binio.hpp"
#include "finedeep/model.hpp"
#include "finedeep/tensor.hpp"

namespace finedeep {

// Non-sparse activation rate: fraction of entries with |a| strictly > tau.
inline double nsar(const Tensor& a, double tau) {
    if (a.numel() == 0) throw InputError("nsar: empty activation matrix");
    if (tau < 0) throw InputError("nsar: tau must be >= 0");
    std::size_t count = 0;
    for (double v : a.data)
        if (std::fabs(v) > tau) ++count;
    return static_cast<double>(count) / static_cast<double>(a.numel());
}

// Histogram with open-ended edge bins: values below the first edge fall in
// bin 0, values at or above the last edge in the final bin. Bin i covers
// [edge_i, edge_{i+1}).
inline std::vector<std::size_t> activation_histogram(const Tensor& a, const std::vector<double>& edges) {
    if (edges.size() < 2) throw InputError("activation_histogram: need at least 2 bin edges");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (edges[i] <= edges[i - 1]) throw InputError("activation_histogram: edges must be strictly increasing");
    std::vector<std::size_t> counts(edges.size() + 1, 0);
    for (double v : a.data) {
        std::size_t bin = 0;
        while (bin < edges.size() && v >= edges[bin]) ++bin;
        ++counts[bin];
    }
    return counts;
}

// Exact closed-form parameter count:
//   2·vocab·d (untied embeddings + head)
//   + per layer: 4d² attention + 3·d·d_ff FFN + 2d norms
//   + d final norm
//   + max_seq_len·d learned position table
//   finedeep adds per layer: M·K·d router + (M−1)·d extra norm gains
// Matches the sum of tensor sizes of a constructed LmModel exactly.
inline std::size_t count_params(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.hidden_size, dff = cfg.intermediate, l = cfg.n_layers;
    std::size_t per_layer = 4 * d * d + 3 * d * dff + 2 * d;
    if (cfg.is_finedeep()) per_layer += cfg.M * cfg.K * d + (cfg.M - 1) * d;
    return 2 * cfg.vocab_size * d + cfg.max_seq_len * d + l * per_layer + d;
}

// FLOPs for one forward pass at the given batch/sequence, 2 FLOPs per
// multiply-accumulate. Covers every linear map (attention projections,
// FFN/expert matrices, routers, LM head) plus the attention score and value
// products (2·2·t²·d per layer); embedding lookups, norms and nonlinearities
// are excluded.
inline std::uint64_t count_flops(const ModelConfig& cfg, std::uint64_t batch, std::uint64_t seq) {
    cfg.validate();
    if (batch == 0 || seq == 0) throw ConfigError("count_flops: batch and seq must be positive");
    const std::uint64_t d = cfg.hidden_size, dff = cfg.intermediate, l = cfg.n_layers;
    std::uint64_t linear_per_token = l * (4 * d * d + 3 * d * dff) + d * cfg.vocab_size;
    if (cfg.is_finedeep()) linear_per_token += l * cfg.M * cfg.K * d;  // router dot products
    const std::uint64_t attn = l * 4 * seq * seq * d;
    return batch * (2 * seq * linear_per_token + attn);
}

// One captured activation matrix: B token rows × H neurons.
struct ActivationRecord {
    std::string name;  // "layer{l}" or "layer{l}/sub{j}"
    Tensor acts;       // [B × H]
};

// Runs the model over the first `n_tokens` of the corpus (non-overlapping
// max_seq_len windows) and collects silu activations per layer/sub-layer.
inline std::vector<ActivationRecord> capture_activations(LmModel& model,
                                                         const std::vector<std::uint8_t>& corpus,
                                                         std::size_t n_tokens) {
    if (corpus.empty()) throw InputError("capture_activations: empty corpus");
    n_tokens = std::min(n_tokens, corpus.size());
    std::map<std::string, std::vector<Tensor>> parts;
    std::vector<std::string> order;
    ActivationSink sink = [&](const std::string& name, const Tensor& rows) {
        if (parts.find(name) == parts.end()) order.push_back(name);
        parts[name].push_back(rows);
    };
    for (std::size_t off = 0; off < n_tokens; off += model.cfg.max_seq_len) {
        const std::size_t len = std::min(model.cfg.max_seq_len, n_tokens - off);
        std::vector<int> tokens(len);
        for (std::size_t i = 0; i < len; ++i) tokens[i] = corpus[off + i];
        model_forward(model, tokens, &sink);
    }
    std::vector<ActivationRecord> records;
    for (const std::string& name : order) {
        const std::vector<Tensor>& chunks = parts[name];
        std::size_t rows = 0;
        for (const Tensor& c : chunks) rows += c.rows();
        Tensor acc({rows, chunks[0].cols()});
        std::size_t r = 0;
        for (const Tensor& c : chunks) {
            std::copy(c.data.begin(), c.data.end(), acc.data.begin() + r * acc.cols());
            r += c.rows();
        }
        records.push_back({name, std::move(acc)});
    }
    return records;
}

// ---- FDAC capture file -----------------------------------------------------
// magic "FDAC", version u32 LE, then per record:
//   name length u32 LE, UTF-8 name, B u32 LE, H u32 LE, B·H float32 LE row-major

inline void write_capture_file(const std::vector<ActivationRecord>& records, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("FDAC", 4);
    detail::put_u32(os, 1);
    for (const ActivationRecord& rec : records) {
        detail::put_u32(os, static_cast<std::uint32_t>(rec.name.size()));
        os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(rec.acts.rows()));
        detail::put_u32(os, static_cast<std::uint32_t>(rec.acts.cols()));
        for (double v : rec.acts.data) detail::put_f32(os, static_cast<float>(v));
    }
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<ActivationRecord> read_capture_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FDAC", 4) != 0)
        throw FormatError("bad magic in capture file " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != 1) throw FormatError("unsupported capture version " + std::to_string(version));
    std::vector<ActivationRecord> records;
    while (is.peek() != EOF) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("truncated record name in " + path);
        const std::uint32_t b = detail::get_u32(is);
        const std::uint32_t h = detail::get_u32(is);
        Tensor acts({b, h});
        for (double& v : acts.data) v = static_cast<double>(detail::get_f32(is));
        records.push_back({std::move(name), std::move(acts)});
    }
    return records;
}

// Splits "layer3/sub1" into ("layer3", "sub1"); dense records have no
// sub-layer component.
inline std::pair<std::string, std::string> split_record_name(const std::string& name) {
    const std::size_t slash = name.find('/');
    if (slash == std::string::npos) return {name, ""};
    return {name.substr(0, slash), name.substr(slash + 1)};
}

inline void write_nsar_csv(const std::vector<ActivationRecord>& records, double tau,
                           const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "layer,sublayer,metric,tau,value\n";
    for (const ActivationRecord& rec : records) {
        const auto [layer, sub] = split_record_name(rec.name);
        os << layer << "," << sub << ",nsar," << tau << "," << nsar(rec.acts, tau) << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

// Histogram rows reuse the report schema: tau carries the bin's lower edge
// (-inf/+inf for the open-ended end bins), value the count.
inline void write_histogram_csv(const std::vector<ActivationRecord>& records,
                                const std::vector<double>& edges, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "layer,sublayer,metric,tau,value\n";
    for (const ActivationRecord& rec : records) {
        const auto [layer, sub] = split_record_name(rec.name);
        const std::vector<std::size_t> counts = activation_histogram(rec.acts, edges);
        for (std::size_t i = 0; i < counts.size(); ++i) {
            os << layer << "," << sub << ",histogram,";
            if (i == 0)
                os << "-inf";
            else
                os << edges[i - 1];
            os << "," << counts[i] << "\n";
        }
    }
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace finedeep
