// sampled-sae: dataset generation, training, evaluation, sweeps and decoder
// comparison for Sampled-SAE models.
//
//   sampled-sae gen-data --config cfg.json [--out DIR] [--seed N]
//   sampled-sae train    --config cfg.json [--ell L] [--rule R] [--seed N] [--out DIR]
//                        [--dataset data.ssyn] [--resume]
//   sampled-sae eval     --checkpoint ckpt.ssae --dataset data.ssyn [--out eval.json]
//   sampled-sae sweep    --config cfg.json [--out DIR] [--jobs N]
//   sampled-sae compare  --a a.ssae --b b.ssae [--out compare.csv]
//
// SAMPLED_SAE_THREADS caps OpenMP parallelism inside every command.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "sampled_sae/errors.hpp"
#include "sampled_sae/experiment.hpp"
#include "sampled_sae/kernels.hpp"

namespace fs = std::filesystem;
using namespace sampled_sae;

namespace {

struct Overrides {
    std::string config;
    std::string profile;
    std::optional<std::string> ell;
    std::optional<std::string> rule;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::int64_t> steps;
    std::optional<std::string> dataset;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "experiment JSON");
    cmd->add_option("--profile", o.profile, "preset when no config is given (desk|paper)");
    cmd->add_option("--ell", o.ell, "pool expansion factor, or 'max' for BatchTopK");
    cmd->add_option("--rule", o.rule, "scoring rule: l2, squared_l2, entropy, uniform");
    cmd->add_option("--seed", o.seed, "seed");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--steps", o.steps, "training steps");
    cmd->add_option("--dataset", o.dataset, "SSYN dataset path (default <out>/data.ssyn)");
}

ExperimentConfig resolve(const Overrides& o, bool seed_is_data) {
    ExperimentConfig cfg = !o.config.empty() ? load_experiment(o.config)
                                             : profile_by_name(o.profile.empty() ? "desk" : o.profile);
    if (o.rule) cfg.gate.rule = parse_scoring_rule(*o.rule);
    if (o.ell) cfg.gate.ell = parse_ell(*o.ell, cfg.gate);
    if (o.seed) {
        if (seed_is_data) cfg.data.seed = *o.seed;
        else cfg.train.seed = *o.seed;
    }
    if (o.out) cfg.out_dir = *o.out;
    if (o.steps) cfg.train.steps = *o.steps;
    if (o.dataset) cfg.dataset = *o.dataset;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    kernels::configure_threads_from_env();

    CLI::App app{"Sampled-SAE experiments on synthetic sparse superposition data"};
    app.require_subcommand(1);

    Overrides gen_o, train_o, sweep_o;
    bool resume = false;
    int jobs = 0;
    std::string ckpt, dataset, eval_out, cmp_a, cmp_b, cmp_out;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset and its stats sidecar");
    add_common(gen, gen_o);
    auto* tr = app.add_subcommand("train", "train one (rule, ell, seed) cell");
    add_common(tr, train_o);
    tr->add_flag("--resume", resume, "continue from <out>/checkpoint.ssae");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
    ev->add_option("--checkpoint", ckpt)->required();
    ev->add_option("--dataset", dataset)->required();
    ev->add_option("--out", eval_out, "report JSON (default: next to the checkpoint)");
    ev->add_option("--config", train_o.config, "ignored; accepted for symmetry");
    auto* sw = app.add_subcommand("sweep", "train and evaluate the rule x ell x seed grid");
    add_common(sw, sweep_o);
    sw->add_option("--jobs", jobs, "parallel cells");
    auto* cmp = app.add_subcommand("compare", "decoder best-match report between two checkpoints");
    cmp->add_option("--a", cmp_a)->required();
    cmp->add_option("--b", cmp_b)->required();
    cmp->add_option("--out", cmp_out, "CSV path (default compare.csv)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const auto cfg = resolve(gen_o, true);
            const auto res = cmd_gen_data(cfg);
            const auto& s = res.stats;
            std::printf("wrote %s (%zu x %zu, k=%zu)\n", res.dataset.c_str(), cfg.data.n, cfg.data.d, cfg.data.k);
            std::printf("mutual coherence %.4f (Welch bound %.4f)\n", s.coherence, s.welch_bound);
            std::printf("expected L0 %.2f  observed L0 %.2f  SNR %.2f dB\n", s.expected_l0, s.observed_l0, s.snr_db);
            for (std::size_t b = 0; b < kNumBuckets; ++b)
                std::printf("  %-6s %5zu features  |coef| %.3f +- %.3f\n",
                            std::string(to_string(static_cast<Bucket>(b))).c_str(), s.counts[b], s.mean_abs[b],
                            s.std_abs[b]);
        } else if (tr->parsed()) {
            const auto cfg = resolve(train_o, false);
            const auto res = cmd_train(cfg, resume);
            const auto& last = res.result.log.empty() ? MetricsRow{} : res.result.log.back();
            std::printf("trained %lld steps: loss %.6g fvu %.4f l0 %.2f dead %zu theta %.4g\n",
                        static_cast<long long>(res.result.state.opt.step), last.loss_recon, last.fvu, last.l0_mean,
                        last.dead, last.theta);
            std::printf("checkpoint %s\nmetrics %s\n", res.checkpoint.c_str(), res.metrics.c_str());
        } else if (ev->parsed()) {
            fs::path out = eval_out.empty() ? fs::path(ckpt).parent_path() / "eval.json" : fs::path(eval_out);
            const auto rep = cmd_eval(ckpt, dataset, out);
            std::printf("%s\n", report_to_json(rep).dump(2).c_str());
        } else if (sw->parsed()) {
            auto cfg = resolve(sweep_o, false);
            if (sweep_o.seed) cfg.sweep.seeds = {*sweep_o.seed};
            if (sweep_o.rule) cfg.sweep.rules = {cfg.gate.rule};
            if (sweep_o.ell) cfg.sweep.ells = {cfg.gate.ell};
            if (jobs > 0) cfg.sweep.jobs = jobs;
            const auto res = cmd_sweep(cfg);
            std::printf("%zu cells, %zu failed -> %s\n", res.rows.size() + res.failures.size(), res.failures.size(),
                        res.csv.c_str());
            if (!res.failures.empty()) return 3;
        } else if (cmp->parsed()) {
            const auto res = cmd_compare(cmp_a, cmp_b, cmp_out.empty() ? "compare.csv" : cmp_out);
            std::printf("mmcs %.6f over %zu features\n", res.mmcs, res.matches.size());
        }
    } catch (const NumericError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
