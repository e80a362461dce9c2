#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "finedeep/binio.hpp"
#include "finedeep/config_io.hpp"
#include "finedeep/model.hpp"

namespace finedeep {

// Checkpoint layout (all little-endian):
//   magic "FDCP" | version u32 (=1) | header length u64 | JSON header
//   | zero padding to a 64-byte boundary | payload
// The JSON header holds the config and a tensor manifest (name, shape,
// offset). Offsets are relative to the payload start and 64-byte aligned;
// payload values are float32, row-major, in manifest order.
namespace ckpt {

constexpr char kMagic[4] = {'F', 'D', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kAlign = 64;

inline std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

}  // namespace ckpt

inline void save_checkpoint(LmModel& model, const std::string& path) {
    model.cfg.validate();
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    model.for_each_param([&](const std::string& name, Tensor& t) {
        manifest.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset = ckpt::align_up(offset + t.numel() * 4);
    });
    nlohmann::json header = {{"config", config_to_json(model.cfg)}, {"manifest", manifest}};
    const std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(ckpt::kMagic, 4);
    detail::put_u32(os, ckpt::kVersion);
    const std::uint64_t hlen = header_str.size();
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(hlen >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    const std::size_t payload_base = ckpt::align_up(4 + 4 + 8 + header_str.size());
    for (std::size_t pos = 4 + 4 + 8 + header_str.size(); pos < payload_base; ++pos) os.put('\0');

    std::size_t written = 0;
    model.for_each_param([&](const std::string&, Tensor& t) {
        for (double v : t.data) detail::put_f32(os, static_cast<float>(v));
        written += t.numel() * 4;
        const std::size_t padded = ckpt::align_up(written);
        for (; written < padded; ++written) os.put('\0');
    });
    if (!os) throw IoError("write failed: " + path);
}

inline LmModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    is.seekg(0, std::ios::end);
    const std::uint64_t file_size = static_cast<std::uint64_t>(is.tellg());
    is.seekg(0);

    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, ckpt::kMagic, 4) != 0)
        throw FormatError("bad magic at byte 0 in " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != ckpt::kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at byte 4");
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated header length at byte 8");
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    if (16 + hlen > file_size)
        throw FormatError("header length " + std::to_string(hlen) + " exceeds file size at byte 8");
    std::string header_str(hlen, '\0');
    if (!is.read(header_str.data(), static_cast<std::streamsize>(hlen)))
        throw FormatError("truncated header at byte 16");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid JSON header: " + std::string(e.what()));
    }
    ModelConfig cfg;
    try {
        cfg = config_from_json(header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint config: " + std::string(e.what()));
    }

    LmModel model = LmModel::init(cfg);
    const std::size_t payload_base = ckpt::align_up(16 + hlen);

    // index manifest entries by name, validating bounds and uniqueness
    struct Entry {
        std::vector<std::size_t> shape;
        std::uint64_t offset;
    };
    std::map<std::string, Entry> entries;
    if (!header.contains("manifest") || !header.at("manifest").is_array())
        throw FormatError("missing manifest array in header");
    for (const nlohmann::json& e : header.at("manifest")) {
        const std::string name = e.at("name").get<std::string>();
        Entry ent{e.at("shape").get<std::vector<std::size_t>>(), e.at("offset").get<std::uint64_t>()};
        const std::uint64_t size = Tensor::numel_of(ent.shape) * 4;
        if (ent.offset % ckpt::kAlign != 0)
            throw FormatError("tensor '" + name + "' offset " + std::to_string(ent.offset) +
                              " not 64-byte aligned");
        if (payload_base + ent.offset + size > file_size)
            throw FormatError("tensor '" + name + "' extends past end of file (payload byte " +
                              std::to_string(payload_base + ent.offset + size) + " of " +
                              std::to_string(file_size) + ")");
        if (!entries.emplace(name, std::move(ent)).second)
            throw FormatError("duplicate manifest entry '" + name + "'");
    }

    model.for_each_param([&](const std::string& name, Tensor& t) {
        auto it = entries.find(name);
        if (it == entries.end()) throw FormatError("manifest missing tensor '" + name + "'");
        if (it->second.shape != t.shape)
            throw FormatError("tensor '" + name + "' shape " + Tensor::shape_str(it->second.shape) +
                              " does not match config-implied " + t.shape_str());
        is.seekg(static_cast<std::streamoff>(payload_base + it->second.offset));
        for (double& v : t.data) v = static_cast<double>(detail::get_f32(is));
        entries.erase(it);
    });
    if (!entries.empty())
        throw FormatError("manifest has " + std::to_string(entries.size()) +
                          " entries not used by the config (first: '" + entries.begin()->first + "')");
    return model;
}

// Dense→Finedeep warm start: slice each layer's FFN into M·K experts,
// zero-init routers (uniform 0.5 sigmoid scores), copy the pre-FFN norm gain
// into sub-layer 1, unit gains for sub-layers 2..M. Everything outside the
// FFNs is copied bit-exactly. Not function-preserving for M·K > 1: zero
// routers scale every expert by 0.5, so the converted forward differs from
// the dense source (a warm start for further training, not an equivalence).
inline LmModel convert_dense_to_finedeep(LmModel& dense, std::size_t m, std::size_t k) {
    if (dense.cfg.is_finedeep()) throw InputError("convert: input checkpoint is not a dense model");
    ModelConfig cfg = dense.cfg;
    cfg.arch = "finedeep";
    cfg.M = m;
    cfg.K = k;
    cfg.routing_mode = "sigmoid";
    cfg.router_enabled = k > 1;
    cfg.validate();  // throws ConfigError on indivisible intermediate
    LmModel out = LmModel::init(cfg);
    out.tok_emb = dense.tok_emb;
    out.pos_emb = dense.pos_emb;
    out.final_norm_gain = dense.final_norm_gain;
    out.head = dense.head;
    for (std::size_t l = 0; l < dense.layers.size(); ++l) {
        LayerParams& src = dense.layers[l];
        LayerParams& dst = out.layers[l];
        dst.attn_norm_gain = src.attn_norm_gain;
        dst.attn = src.attn;
        std::vector<ExpertParams> experts = partition_ffn(src.dense_ffn, m, k);
        for (std::size_t j = 0; j < m; ++j) {
            SubLayer& s = dst.fd.sublayers[j];
            for (std::size_t i = 0; i < k; ++i) s.experts[i] = std::move(experts[j * k + i]);
            s.router = Tensor::zeros({cfg.hidden_size, k});
            s.norm_gain = j == 0 ? src.ffn_norm_gain : Tensor::ones({cfg.hidden_size});
        }
    }
    return out;
}

// Exact inverse for auditing: concatenate experts back into dense FFNs.
// Lossless only when routers are zero and the extra norm gains are still 1
// (in particular after convert with M=K=1).
inline LmModel reassemble_finedeep_to_dense(LmModel& fd) {
    if (!fd.cfg.is_finedeep()) throw InputError("reassemble: input is not a finedeep model");
    ModelConfig cfg = fd.cfg;
    cfg.arch = "dense";
    cfg.M = 1;
    cfg.K = 1;
    cfg.router_enabled = true;
    LmModel out = LmModel::init(cfg);
    out.tok_emb = fd.tok_emb;
    out.pos_emb = fd.pos_emb;
    out.final_norm_gain = fd.final_norm_gain;
    out.head = fd.head;
    for (std::size_t l = 0; l < fd.layers.size(); ++l) {
        LayerParams& src = fd.layers[l];
        LayerParams& dst = out.layers[l];
        dst.attn_norm_gain = src.attn_norm_gain;
        dst.attn = src.attn;
        std::vector<ExpertParams> all;
        for (const SubLayer& s : src.fd.sublayers)
            for (const ExpertParams& e : s.experts) all.push_back(e);
        dst.dense_ffn = reassemble_ffn(all);
        dst.ffn_norm_gain = src.fd.sublayers[0].norm_gain;
    }
    return out;
}

}  // namespace finedeep
