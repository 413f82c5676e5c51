// eqat: tokenize -> pretrain -> quantize (Block-AP) -> finetune (E2E-QP) -> eval
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "eqat/eqat.hpp"

using nlohmann::json;

namespace {

struct Globals {
    bool json_out = false;
    std::optional<std::uint64_t> seed;
};

std::uint64_t resolve_seed(const Globals& g) {
    if (g.seed) return *g.seed;
    if (const char* env = std::getenv("BLOCKQAT_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            eqat::fail(eqat::ErrorKind::domain, std::string("BLOCKQAT_SEED is not an integer: ") + env);
        }
    }
    return 0;
}

std::unique_ptr<std::ofstream> open_log(const std::string& path) {
    if (path.empty()) return nullptr;
    auto f = std::make_unique<std::ofstream>(path, std::ios::trunc);
    eqat::require(static_cast<bool>(*f), eqat::ErrorKind::data, "cannot write log " + path);
    return f;
}

void emit(const Globals& g, const json& j, const std::string& text) {
    if (g.json_out) {
        std::cout << j.dump(2) << '\n';
    } else {
        std::cout << text;
    }
}

eqat::ModelConfig model_config(const eqat::KeyValueConfig& c) {
    eqat::ModelConfig m;
    m.n_layers = c.get<std::size_t>("n_layers", m.n_layers);
    m.d_model = c.get<std::size_t>("d_model", m.d_model);
    m.n_heads = c.get<std::size_t>("n_heads", m.n_heads);
    m.d_ff = c.get<std::size_t>("d_ff", m.d_ff);
    m.vocab_size = c.get<std::size_t>("vocab_size", m.vocab_size);
    m.max_context = c.get<std::size_t>("max_context", m.max_context);
    m.norm_eps = c.get<float>("norm_eps", m.norm_eps);
    m.validate();
    return m;
}

eqat::TrainPlan train_plan(const eqat::KeyValueConfig& c) {
    eqat::TrainPlan p;
    p.steps = c.get<std::size_t>("steps", p.steps);
    p.batch = c.get<std::size_t>("batch", p.batch);
    p.ctx_len = c.get<std::size_t>("ctx_len", p.ctx_len);
    p.lr = c.get<float>("lr", p.lr);
    p.warmup = c.get<std::size_t>("warmup", p.warmup);
    p.min_lr_frac = c.get<float>("min_lr_frac", p.min_lr_frac);
    p.grad_clip = c.get<float>("grad_clip", p.grad_clip);
    p.val_frac = c.get<double>("val_frac", p.val_frac);
    p.eval_windows = c.get<std::size_t>("eval_windows", p.eval_windows);
    p.log_every = c.get<std::size_t>("log_every", p.log_every);
    return p;
}

eqat::TokenStream load_stream(const std::string& path) {
    try {
        return eqat::load_tokens(path);
    } catch (const eqat::Error& e) {
        if (e.kind() != eqat::ErrorKind::format) throw;
    }
    // Not a token file: treat it as UTF-8 text.
    return eqat::tokenize_bytes(eqat::detail::read_file(path));
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    eqat::tune_allocator();
    CLI::App app{"Two-phase quantization-aware training for small transformers"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed_flag = 0;
    app.add_flag("--json", g.json_out, "print a single JSON document on stdout");
    auto* seed_opt = app.add_option("--seed", seed_flag, "random seed (default: $BLOCKQAT_SEED or 0)");

    // tokenize
    std::string tok_in, tok_out;
    auto* tok = app.add_subcommand("tokenize", "UTF-8 text -> byte-level token stream");
    tok->add_option("text", tok_in, "input text file")->required()->check(CLI::ExistingFile);
    tok->add_option("-o,--output", tok_out, "output token stream")->required();

    // pretrain
    std::string pt_cfg, pt_data, pt_out, pt_log;
    std::optional<std::size_t> pt_steps;
    auto* pre = app.add_subcommand("pretrain", "train the full-precision base model");
    pre->add_option("-c,--config", pt_cfg, "key=value model/training config")->check(CLI::ExistingFile);
    pre->add_option("-d,--data", pt_data, "token stream or text")->required()->check(CLI::ExistingFile);
    pre->add_option("-o,--output", pt_out, "output checkpoint")->required();
    pre->add_option("--steps", pt_steps, "override optimizer steps");
    pre->add_option("--log", pt_log, "JSON-lines loss log");

    // quantize
    std::string q_model, q_data, q_out, q_log, q_trainable = "s,z,W", q_source = "quantized-prefix", q_heldout;
    int q_bits = 2, q_group = 64;
    std::size_t q_samples = 256, q_ctx = 128, q_epochs = 2, q_batch = 2;
    std::optional<float> q_lr_qp, q_lr_w;
    bool q_rtn = false;
    auto* qz = app.add_subcommand("quantize", "Block-AP quantization");
    qz->add_option("-m,--model", q_model, "full-precision checkpoint")->required()->check(CLI::ExistingFile);
    qz->add_option("-d,--data", q_data, "calibration token stream or text")->required()->check(CLI::ExistingFile);
    qz->add_option("-o,--output", q_out, "output quantized checkpoint")->required();
    qz->add_option("--bits", q_bits, "weight bits N")->check(CLI::Range(2, 8));
    qz->add_option("--group", q_group, "group size g (-1 = per output channel)");
    qz->add_option("--trainable", q_trainable, "subset of s,z,W");
    qz->add_option("--samples", q_samples, "calibration samples");
    qz->add_option("--ctx", q_ctx, "calibration context length");
    qz->add_option("--epochs", q_epochs, "epochs per block");
    qz->add_option("--batch", q_batch, "samples per step");
    qz->add_option("--lr-qp", q_lr_qp, "learning rate for s and z (default 1e-4)");
    qz->add_option("--lr-w", q_lr_w, "learning rate for W (default 2e-5 at 2 bits, else 1e-5)");
    qz->add_option("--input-source", q_source, "quantized-prefix | fp-prefix");
    qz->add_option("--heldout", q_heldout, "held-out stream for validation MSE")->check(CLI::ExistingFile);
    qz->add_option("--log", q_log, "JSON-lines per-block log");
    qz->add_flag("--rtn", q_rtn, "round-to-nearest only, no training");

    // finetune
    std::string f_model, f_data, f_out, f_log, f_trainable = "s";
    std::size_t f_samples = 4096, f_ctx = 128, f_batch = 32, f_micro = 8, f_epochs = 1;
    std::optional<float> f_lr;
    auto* ft = app.add_subcommand("finetune", "E2E-QP training of step sizes");
    ft->add_option("-m,--model", f_model, "quantized checkpoint")->required()->check(CLI::ExistingFile);
    ft->add_option("-d,--data", f_data, "training token stream or text")->required()->check(CLI::ExistingFile);
    ft->add_option("-o,--output", f_out, "output quantized checkpoint")->required();
    ft->add_option("--trainable", f_trainable, "s | z | s,z");
    ft->add_option("--samples", f_samples, "training sequences");
    ft->add_option("--ctx", f_ctx, "context length");
    ft->add_option("--batch", f_batch, "sequences per optimizer step");
    ft->add_option("--micro-batch", f_micro, "sequences per forward pass");
    ft->add_option("--epochs", f_epochs, "epochs");
    ft->add_option("--lr", f_lr, "learning rate (default 2e-5 at 2 bits, else 1e-5)");
    ft->add_option("--log", f_log, "JSON-lines per-step log");

    // eval
    std::string e_model, e_data;
    std::size_t e_ctx = 128, e_windows = 0;
    auto* ev = app.add_subcommand("eval", "perplexity over non-overlapping windows");
    ev->add_option("-m,--model", e_model, "checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("-d,--data", e_data, "token stream or text")->required()->check(CLI::ExistingFile);
    ev->add_option("--ctx", e_ctx, "window length");
    ev->add_option("--max-windows", e_windows, "cap on evaluated windows (0 = all)");

    // inspect
    std::string i_path;
    auto* ins = app.add_subcommand("inspect", "print checkpoint header and size table");
    ins->add_option("checkpoint", i_path, "checkpoint file")->required()->check(CLI::ExistingFile);

    // bench
    std::string b_preset = "toy";
    std::vector<int> b_bits = {2, 3, 4, 16};
    int b_group = 64, b_reps = 7;
    auto* be = app.add_subcommand("bench", "packed GEMV benchmark (CSV)");
    be->add_option("--preset", b_preset, "paper | toy");
    be->add_option("--bits", b_bits, "bit widths (16 = dense binary16)");
    be->add_option("--group", b_group, "group size");
    be->add_option("--reps", b_reps, "timed repetitions (median reported)");

    CLI11_PARSE(app, argc, argv);
    if (seed_opt->count()) g.seed = seed_flag;

    try {
        const std::uint64_t seed = resolve_seed(g);
        if (*tok) {
            const eqat::TokenStream s = eqat::tokenize_bytes(eqat::detail::read_file(tok_in));
            eqat::save_tokens(s, tok_out);
            emit(g, {{"command", "tokenize"}, {"tokens", s.size()}, {"vocab_size", s.vocab_size}, {"output", tok_out}},
                 "wrote " + std::to_string(s.size()) + " tokens to " + tok_out + "\n");
        } else if (*pre) {
            const eqat::KeyValueConfig cfg = pt_cfg.empty() ? eqat::KeyValueConfig{} : eqat::KeyValueConfig::load(pt_cfg);
            const eqat::ModelConfig mc = model_config(cfg);
            eqat::TrainPlan plan = train_plan(cfg);
            plan.seed = seed;
            if (pt_steps) plan.steps = *pt_steps;
            const auto stream = load_stream(pt_data);
            auto log = open_log(pt_log);
            eqat::PretrainResult r = eqat::pretrain(mc, stream, plan, log.get());
            json meta = r.meta();
            meta["seed"] = seed;
            meta["steps"] = plan.steps;
            eqat::export_checkpoint(r.model, pt_out, meta);
            json j = {{"command", "pretrain"}, {"output", pt_out}, {"params", r.model.param_count()}};
            j.update(meta);
            emit(g, j,
                 "train loss " + fmt(r.train_loss) + "  val loss " + fmt(r.val_loss) + "  val ppl " + fmt(r.val_ppl) +
                     "\nwrote " + pt_out + "\n");
        } else if (*qz) {
            eqat::Checkpoint ck = eqat::import_checkpoint(q_model);
            const eqat::QuantSpec spec(q_bits, q_group);
            spec.validate();
            json meta = {{"phase", q_rtn ? "rtn" : "block-ap"}, {"bits", q_bits}, {"group_size", q_group},
                         {"seed", seed}};
            eqat::Model out;
            if (q_rtn) {
                out = eqat::quantize_rtn(ck.model, spec);
            } else {
                eqat::BlockAPPlan plan = eqat::BlockAPPlan::defaults_for(spec);
                if (q_lr_qp) plan.lr_qp = *q_lr_qp;
                if (q_lr_w) plan.lr_w = *q_lr_w;
                plan.trainable = eqat::Trainable::parse(q_trainable);
                plan.n_samples = q_samples;
                plan.ctx_len = q_ctx;
                plan.epochs = q_epochs;
                plan.batch = q_batch;
                plan.input_source = eqat::parse_input_source(q_source);
                plan.seed = seed;
                const auto stream = load_stream(q_data);
                const eqat::CalibSet calib = eqat::sample_calibration(stream, plan.n_samples, plan.ctx_len, seed);
                std::optional<eqat::CalibSet> held;
                if (!q_heldout.empty()) {
                    held = eqat::sample_calibration(load_stream(q_heldout), plan.eval_samples, plan.ctx_len,
                                                    seed + 1);
                }
                auto log = open_log(q_log);
                eqat::BlockAPResult r = eqat::run_block_ap(ck.model, calib, plan, held ? &*held : nullptr, log.get());
                out = std::move(r.model);
                meta["trainable"] = plan.trainable.str();
                meta["samples"] = plan.n_samples;
                meta["epochs"] = plan.epochs;
                json blocks = json::array();
                for (const auto& rec : r.log) blocks.push_back(rec.json());
                meta["block_log"] = blocks;
            }
            eqat::export_checkpoint(out, q_out, meta);
            const auto rep = eqat::report_size_file(q_out);
            json j = {{"command", "quantize"},
                      {"output", q_out},
                      {"avg_bits", eqat::format_2dp(rep.quantized_bits_per_param)},
                      {"total_bytes", rep.total_bytes}};
            j["meta"] = meta;
            emit(g, j, "wrote " + q_out + "  avg bits " + eqat::format_2dp(rep.quantized_bits_per_param) + "\n");
        } else if (*ft) {
            eqat::Checkpoint ck = eqat::import_checkpoint(f_model);
            int bits = 2;
            ck.model.for_each_projection([&](const std::string&, eqat::Projection& p) {
                if (auto* q = std::get_if<eqat::QuantLinear>(&p)) bits = q->spec().bits;
            });
            eqat::E2EQPPlan plan = eqat::E2EQPPlan::defaults_for(bits);
            if (f_lr) plan.lr = *f_lr;
            plan.trainable = eqat::Trainable::parse(f_trainable);
            plan.n_samples = f_samples;
            plan.ctx_len = f_ctx;
            plan.batch = f_batch;
            plan.micro_batch = f_micro;
            plan.epochs = f_epochs;
            plan.seed = seed;
            const auto stream = load_stream(f_data);
            auto log = open_log(f_log);
            eqat::E2EQPResult r = eqat::run_e2e_qp(ck.model, stream, plan, log.get());
            const eqat::ParamCensus census = eqat::trainable_param_census(r.model, plan.trainable);
            json meta = ck.meta;
            meta["e2e"] = {{"trainable", plan.trainable.str()},
                           {"samples", plan.n_samples},
                           {"steps", r.log.size()},
                           {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss},
                           {"seed", seed}};
            eqat::export_checkpoint(r.model, f_out, meta);
            const auto rep = eqat::report_size_file(f_out);
            char hash[32];
            std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.hash_after));
            json j = {{"command", "finetune"},
                      {"output", f_out},
                      {"steps", r.log.size()},
                      {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss},
                      {"weight_hash", hash},
                      {"weights_unchanged", r.hash_before == r.hash_after},
                      {"avg_bits", eqat::format_2dp(rep.quantized_bits_per_param)},
                      {"census", census.json()}};
            emit(g, j,
                 "wrote " + f_out + "  steps " + std::to_string(r.log.size()) + "  final loss " +
                     fmt(r.log.empty() ? 0.0 : r.log.back().loss) + "  weight hash " + hash + "  avg bits " +
                     eqat::format_2dp(rep.quantized_bits_per_param) + "\n");
        } else if (*ev) {
            eqat::Checkpoint ck = eqat::import_checkpoint(e_model);
            const auto stream = load_stream(e_data);
            const eqat::PerplexityResult r = eqat::evaluate_perplexity(ck.model, stream, e_ctx, e_windows);
            const json j = {{"command", "eval"},     {"model", e_model},        {"ppl", r.ppl},
                            {"mean_nll", r.mean_nll}, {"positions", r.positions}, {"windows", r.windows},
                            {"ctx", e_ctx}};
            if (g.json_out) {
                std::cout << j.dump(2) << '\n';
            } else {
                std::cout << "ppl " << fmt(r.ppl) << "  (" << r.windows << " windows, " << r.positions
                          << " positions)\n"
                          << j.dump() << '\n';
            }
        } else if (*ins) {
            const std::string bytes = eqat::detail::read_file(i_path);
            if (g.json_out) {
                const auto h = eqat::parse_container_header(bytes);
                const auto rep = eqat::report_size(bytes);
                json rows = json::array();
                for (const auto& r : rep.rows) {
                    rows.push_back({{"name", r.name}, {"role", r.role}, {"params", r.params}, {"bytes", r.bytes},
                                    {"bits_per_param", eqat::format_2dp(r.bits_per_param)}});
                }
                std::cout << json{{"header", h.json},
                                  {"file_bytes", h.file_size},
                                  {"tensors", rows},
                                  {"avg_bits", eqat::format_2dp(rep.quantized_bits_per_param)},
                                  {"total_params", rep.total_params},
                                  {"total_bytes", rep.total_bytes},
                                  {"total_gib", rep.total_gib},
                                  {"compression_ratio", rep.compression_ratio}}
                                 .dump(2)
                          << '\n';
            } else {
                std::cout << eqat::inspect(bytes);
            }
        } else if (*be) {
            eqat::BenchConfig cfg;
            cfg.dims = eqat::bench_preset(b_preset);
            cfg.bits = b_bits;
            cfg.group_size = b_group;
            cfg.reps = b_reps;
            cfg.seed = seed;
            const auto rows = eqat::bench(cfg);
            if (g.json_out) {
                json arr = json::array();
                for (const auto& r : rows) {
                    arr.push_back({{"out", r.out}, {"in", r.in}, {"bits", r.bits}, {"ns_per_op", r.ns_per_op},
                                   {"bytes_per_op", r.bytes_per_op}, {"gb_per_s", r.gb_per_s},
                                   {"speedup_vs_dense", r.speedup_vs_dense}});
                }
                std::cout << json{{"command", "bench"}, {"preset", b_preset}, {"rows", arr}}.dump(2) << '\n';
            } else {
                std::cout << eqat::bench_csv(rows);
            }
        }
    } catch (const eqat::Error& e) {
        std::cerr << "error (" << eqat::to_string(e.kind()) << "): " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
