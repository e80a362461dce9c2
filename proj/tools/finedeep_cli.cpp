// Command-line surface: training, evaluation, sparsity metrics, accounting,
// checkpoint conversion. Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "finedeep/analysis.hpp"
#include "finedeep/checkpoint.hpp"
#include "finedeep/config_io.hpp"
#include "finedeep/model_gradcheck.hpp"
#include "finedeep/train.hpp"

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw finedeep::IoError("cannot open corpus: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return bytes;
}

std::vector<double> parse_edges(const std::string& spec) {
    std::vector<double> edges;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) edges.push_back(std::stod(item));
    }
    return edges;
}

void write_metrics_log(const std::vector<finedeep::StepMetrics>& metrics, std::ostream& os) {
    for (const finedeep::StepMetrics& m : metrics) {
        nlohmann::json line = {{"step", m.step}, {"loss", m.loss}, {"lr", m.lr}, {"elapsed_ms", m.elapsed_ms}};
        os << line.dump() << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Finedeep fine-grained-expert language model toolkit"};
    app.require_subcommand(1);

    std::string config_path, corpus_path, ckpt_path, in_path, out_path, log_path, bins_spec;
    int steps = 1000;
    std::size_t m_subs = 2, k_experts = 8, n_tokens = 4096, batch_flops = 1, seq_flops = 128;
    double tau = 0.1, fd_h = 1e-5, fd_tol = 1e-4;

    CLI::App* c_train = app.add_subcommand("train", "Train a model on a byte-level corpus");
    c_train->add_option("--config", config_path, "JSON model config")->required();
    c_train->add_option("--corpus", corpus_path, "raw byte corpus file")->required();
    c_train->add_option("--steps", steps, "optimizer steps")->required();
    c_train->add_option("--out", out_path, "output checkpoint path")->required();
    c_train->add_option("--log", log_path, "metrics log path (JSONL; default stdout)");

    CLI::App* c_ppl = app.add_subcommand("ppl", "Perplexity of a checkpoint on a corpus");
    c_ppl->add_option("--ckpt", ckpt_path)->required();
    c_ppl->add_option("--corpus", corpus_path)->required();

    CLI::App* c_nsar = app.add_subcommand("nsar", "Non-sparse activation rate per layer/sub-layer");
    c_nsar->add_option("--ckpt", ckpt_path)->required();
    c_nsar->add_option("--corpus", corpus_path)->required();
    c_nsar->add_option("--tau", tau, "threshold (default 0.1)");
    c_nsar->add_option("--tokens", n_tokens, "tokens to capture (default 4096)");
    c_nsar->add_option("--out", out_path, "output CSV")->required();

    CLI::App* c_hist = app.add_subcommand("histogram", "Activation histogram per layer/sub-layer");
    c_hist->add_option("--ckpt", ckpt_path)->required();
    c_hist->add_option("--corpus", corpus_path)->required();
    c_hist->add_option("--bins", bins_spec, "comma-separated bin edges")->required();
    c_hist->add_option("--tokens", n_tokens, "tokens to capture (default 4096)");
    c_hist->add_option("--out", out_path, "output CSV")->required();

    CLI::App* c_params = app.add_subcommand("params", "Closed-form parameter count for a config");
    c_params->add_option("--config", config_path)->required();

    CLI::App* c_flops = app.add_subcommand("flops", "Forward-pass FLOPs for a config");
    c_flops->add_option("--config", config_path)->required();
    c_flops->add_option("--batch", batch_flops, "batch size (default 1)");
    c_flops->add_option("--seq", seq_flops, "sequence length (default 128)");

    CLI::App* c_conv = app.add_subcommand("convert", "Slice a dense checkpoint into a Finedeep warm start");
    c_conv->add_option("--in", in_path, "dense checkpoint")->required();
    c_conv->add_option("--M", m_subs, "sub-layers")->required();
    c_conv->add_option("--K", k_experts, "experts per sub-layer")->required();
    c_conv->add_option("--out", out_path, "output checkpoint")->required();

    CLI::App* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of all model gradients");
    c_grad->add_option("--config", config_path)->required();
    c_grad->add_option("--step", fd_h, "central-difference step (default 1e-5)");
    c_grad->add_option("--tol", fd_tol, "max relative error (default 1e-4)");

    CLI::App* c_dump = app.add_subcommand("dump-acts", "Dump activation capture file (FDAC)");
    c_dump->add_option("--ckpt", ckpt_path)->required();
    c_dump->add_option("--corpus", corpus_path)->required();
    c_dump->add_option("--tokens", n_tokens, "tokens to capture (default 4096)");
    c_dump->add_option("--out", out_path, "output FDAC file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (c_train->parsed()) {
            finedeep::ModelConfig cfg = finedeep::load_config(config_path);
            finedeep::LmModel model = finedeep::LmModel::init(cfg);
            const std::vector<std::uint8_t> corpus = read_bytes(corpus_path);
            const std::vector<finedeep::StepMetrics> metrics = finedeep::train(model, corpus, steps);
            if (log_path.empty()) {
                write_metrics_log(metrics, std::cout);
            } else {
                std::ofstream os(log_path);
                if (!os) throw finedeep::IoError("cannot open log for writing: " + log_path);
                write_metrics_log(metrics, os);
            }
            finedeep::save_checkpoint(model, out_path);
        } else if (c_ppl->parsed()) {
            finedeep::LmModel model = finedeep::load_checkpoint(ckpt_path);
            std::cout << finedeep::eval_ppl(model, read_bytes(corpus_path)) << "\n";
        } else if (c_nsar->parsed()) {
            finedeep::LmModel model = finedeep::load_checkpoint(ckpt_path);
            const auto records = finedeep::capture_activations(model, read_bytes(corpus_path), n_tokens);
            finedeep::write_nsar_csv(records, tau, out_path);
        } else if (c_hist->parsed()) {
            finedeep::LmModel model = finedeep::load_checkpoint(ckpt_path);
            const auto records = finedeep::capture_activations(model, read_bytes(corpus_path), n_tokens);
            finedeep::write_histogram_csv(records, parse_edges(bins_spec), out_path);
        } else if (c_params->parsed()) {
            const finedeep::ModelConfig cfg = finedeep::load_config(config_path);
            std::cout << finedeep::count_params(cfg) << "\n";
        } else if (c_flops->parsed()) {
            const finedeep::ModelConfig cfg = finedeep::load_config(config_path);
            std::cout << finedeep::count_flops(cfg, batch_flops, seq_flops) << "\n";
        } else if (c_conv->parsed()) {
            finedeep::LmModel dense = finedeep::load_checkpoint(in_path);
            finedeep::LmModel fd = finedeep::convert_dense_to_finedeep(dense, m_subs, k_experts);
            finedeep::save_checkpoint(fd, out_path);
        } else if (c_grad->parsed()) {
            finedeep::ModelConfig cfg = finedeep::load_config(config_path);
            finedeep::LmModel model = finedeep::LmModel::init(cfg);
            std::mt19937_64 rng(cfg.seed + 1);
            std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
            std::vector<int> tokens(std::min<std::size_t>(cfg.max_seq_len, 4) + 1);
            for (int& t : tokens) t = tok(rng);
            const finedeep::GradCheckReport rep = finedeep::model_gradcheck(model, tokens, fd_h, fd_tol);
            std::cout << "max_rel_err=" << rep.max_rel_err << " worst=" << rep.worst_param << "["
                      << rep.worst_index << "] pass=" << (rep.pass ? "true" : "false") << "\n";
            return rep.pass ? 0 : 1;
        } else if (c_dump->parsed()) {
            finedeep::LmModel model = finedeep::load_checkpoint(ckpt_path);
            const auto records = finedeep::capture_activations(model, read_bytes(corpus_path), n_tokens);
            finedeep::write_capture_file(records, out_path);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
