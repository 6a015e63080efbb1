#include "sampled_sae/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "sampled_sae/errors.hpp"

namespace sampled_sae {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kPaperEllGrid[] = {1, 3, 4, 5, 10, 20, 30, 40, 50, 60, 70, 100};

std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string ell_tag(double ell) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", ell);
    return buf;
}

}  // namespace

fs::path ExperimentConfig::dataset_path() const {
    return dataset.empty() ? out_dir / "data.ssyn" : dataset;
}

void ExperimentConfig::validate() const {
    gate.validate();
    train.validate();
    if (data.d != gate.input_dim)
        throw ConfigError("data.d (" + std::to_string(data.d) + ") must equal gate.input_dim (" +
                          std::to_string(gate.input_dim) + ")");
    for (const double e : sweep.ells)
        if (!(e >= 1.0)) throw ConfigError("sweep ell values must be >= 1");
    if (sweep.seeds.empty()) throw ConfigError("sweep seeds must be nonempty");
    if (sweep.rules.empty()) throw ConfigError("sweep rules must be nonempty");
    if (sweep.jobs < 1) throw ConfigError("sweep jobs must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

std::vector<double> default_ell_grid(const GateConfig& gate) {
    const double limit = gate.batch_topk_ell();
    std::vector<double> out;
    for (const double e : kPaperEllGrid)
        if (e < limit) out.push_back(e);
    out.push_back(limit);
    return out;
}

ExperimentConfig desk_profile() {
    ExperimentConfig c;
    c.profile = "desk";
    c.gate.input_dim = 64;
    c.gate.dict_size = 256;
    c.gate.k = 8;
    c.gate.ell = c.gate.batch_topk_ell();
    c.train.steps = 5'000;
    c.train.batch_size = 1'024;
    c.train.lr = 3e-4;
    c.data.d = 64;
    c.data.k = 256;
    c.data.n = 20'000;
    c.sweep.ells = default_ell_grid(c.gate);
    c.sweep.rules.assign(std::begin(kAllScoringRules), std::end(kAllScoringRules));
    c.sweep.seeds = {0, 1};
    c.out_dir = "runs/desk";
    return c;
}

ExperimentConfig paper_profile() {
    ExperimentConfig c;
    c.profile = "paper";
    c.gate.input_dim = 256;
    c.gate.dict_size = 4'096;
    c.gate.k = 60;
    c.gate.ell = c.gate.batch_topk_ell();
    c.train = TrainConfig{};
    c.data.d = 256;
    c.data.k = 1'024;
    c.data.n = 10'000;
    c.sweep.ells = default_ell_grid(c.gate);
    c.sweep.rules.assign(std::begin(kAllScoringRules), std::end(kAllScoringRules));
    c.sweep.seeds = {0, 1, 2};
    c.out_dir = "runs/paper";
    c.checkpoint_every = 5'000;
    return c;
}

ExperimentConfig profile_by_name(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

void to_json(json& j, const ExperimentConfig& c) {
    json rules = json::array();
    for (const auto r : c.sweep.rules) rules.push_back(std::string(to_string(r)));
    j = json{{"profile", c.profile},
             {"gate", c.gate},
             {"train", c.train},
             {"data", c.data},
             {"dataset", c.dataset.string()},
             {"sweep", {{"ells", c.sweep.ells}, {"rules", rules}, {"seeds", c.sweep.seeds}, {"jobs", c.sweep.jobs}}},
             {"out_dir", c.out_dir.string()},
             {"checkpoint_every", c.checkpoint_every}};
}

double parse_ell(const std::string& text, const GateConfig& gate) {
    if (text == "max" || text == "batchtopk") return gate.batch_topk_ell();
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        throw ConfigError("cannot parse ell '" + text + "'");
    }
    if (used != text.size()) throw ConfigError("cannot parse ell '" + text + "'");
    return v;
}

ExperimentConfig experiment_from_json(const json& j) {
    ExperimentConfig c = profile_by_name(j.value("profile", std::string("desk")));
    const bool gate_given = j.contains("gate");
    if (gate_given) j.at("gate").get_to(c.gate);
    if (j.contains("train")) j.at("train").get_to(c.train);
    if (j.contains("data")) j.at("data").get_to(c.data);
    if (gate_given && !j.at("gate").contains("ell")) c.gate.ell = c.gate.batch_topk_ell();
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (gate_given) c.sweep.ells = default_ell_grid(c.gate);
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        if (s.contains("ells")) {
            c.sweep.ells.clear();
            for (const auto& e : s.at("ells"))
                c.sweep.ells.push_back(e.is_string() ? parse_ell(e.get<std::string>(), c.gate) : e.get<double>());
        }
        if (s.contains("rules")) {
            c.sweep.rules.clear();
            for (const auto& r : s.at("rules")) c.sweep.rules.push_back(parse_scoring_rule(r.get<std::string>()));
        }
        if (s.contains("seeds")) c.sweep.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
        c.sweep.jobs = s.value("jobs", c.sweep.jobs);
    }
    return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
    return experiment_from_json(j);
}

// --- evaluation --------------------------------------------------------------

EvalReport evaluate(const SaeParams<float>& params, const SynthGroundTruth& gt, std::size_t chunk_rows) {
    const std::size_t n = gt.x.rows(), d = gt.x.cols(), m = params.dict_size();
    if (d != params.input_dim()) throw ConfigError("dataset dimension does not match the checkpoint");
    if (n == 0) throw InputError("evaluate: empty dataset");
    chunk_rows = std::max<std::size_t>(chunk_rows, 1);

    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) mean[i] += gt.x(r, i);
    for (double& v : mean) v /= static_cast<double>(n);

    double num = 0, den = 0;
    std::size_t nnz = 0;
    std::vector<double> fired(m, 0.0);
    for (std::size_t start = 0; start < n; start += chunk_rows) {
        const std::size_t rows = std::min(chunk_rows, n - start);
        Matrix<float> x(rows, d);
        std::copy(gt.x.row(start).data(), gt.x.row(start).data() + rows * d, x.data());
        const auto codes = encode_inference(x, params);
        const auto recon = decode(codes, params);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
                const double e = static_cast<double>(x(r, i)) - recon(r, i);
                const double c = static_cast<double>(x(r, i)) - mean[i];
                num += e * e;
                den += c * c;
            }
            for (std::size_t j = 0; j < m; ++j)
                if (codes(r, j) > 0.0f) {
                    ++nnz;
                    fired[j] += 1.0;
                }
        }
    }
    if (!(den > 0)) throw UndefinedMetric("evaluate: dataset has zero variance");

    EvalReport rep;
    rep.fvu = num / den;
    rep.fve = 1.0 - rep.fvu;
    rep.mean_l0 = static_cast<double>(nnz) / static_cast<double>(n);
    std::size_t dense = 0, dead = 0;
    for (double& f : fired) {
        f /= static_cast<double>(n);
        if (f > 0.10) ++dense;
        if (f == 0.0) ++dead;
    }
    rep.density_frac = static_cast<double>(dense) / static_cast<double>(m);
    rep.dead_frac = static_cast<double>(dead) / static_cast<double>(m);

    const auto match = hungarian_match(params.w_dec, gt.dictionary);
    rep.per_bucket_recovery = bucket_recovery(match, gt.labels);
    try {
        rep.freq_corr = frequency_correlation(match, fired, feature_frequencies(gt.codes));
    } catch (const UndefinedMetric&) {
        rep.freq_corr.reset();
    }
    Matrix<float> atoms(gt.dictionary.cols(), gt.dictionary.rows());
    for (std::size_t i = 0; i < gt.dictionary.rows(); ++i)
        for (std::size_t j = 0; j < gt.dictionary.cols(); ++j) atoms(j, i) = gt.dictionary(i, j);
    rep.mmcs = mmcs(params.w_dec, atoms);
    return rep;
}

json report_to_json(const EvalReport& r) {
    json j{{"fvu", r.fvu},
           {"fve", r.fve},
           {"mean_l0", r.mean_l0},
           {"density_frac", r.density_frac},
           {"per_bucket_recovery", r.per_bucket_recovery},
           {"freq_corr", nullptr},
           {"mmcs", r.mmcs},
           {"dead_frac", r.dead_frac}};
    if (r.freq_corr) j["freq_corr"] = *r.freq_corr;
    return j;
}

// --- commands ------------------------------------------------------------------

GenDataResult cmd_gen_data(const ExperimentConfig& cfg) {
    GenDataResult res;
    const auto gt = generate_dataset(cfg.data, &res.stats);
    res.dataset = cfg.dataset_path();
    res.sidecar = res.dataset;
    res.sidecar += ".json";
    save_dataset(res.dataset, gt);
    json side{{"config", cfg.data}, {"stats", res.stats}};
    write_file_atomic(res.sidecar, side.dump(2) + "\n");
    return res;
}

namespace {

std::vector<std::string> read_lines(const fs::path& path) {
    std::vector<std::string> lines;
    std::ifstream in(path);
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

TrainRunResult train_cell(const ExperimentConfig& cfg, const SynthGroundTruth& data, bool resume) {
    if (data.x.cols() != cfg.gate.input_dim) throw ConfigError("dataset dimension does not match gate.input_dim");
    TrainRunResult out;
    out.checkpoint = cfg.out_dir / "checkpoint.ssae";
    out.metrics = cfg.out_dir / "metrics.csv";
    fs::create_directories(cfg.out_dir);

    std::optional<TrainState> state;
    std::vector<std::string> kept = {metrics_csv_header()};
    if (resume && fs::exists(out.checkpoint)) {
        auto ckpt = load_checkpoint(out.checkpoint, cfg.gate);
        state = std::move(ckpt.state);
        // Drop log rows written after the checkpoint we resume from.
        const auto lines = read_lines(out.metrics);
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const auto step = std::stoll(lines[i].substr(0, lines[i].find(',')));
            if (step <= state->opt.step) kept.push_back(lines[i]);
        }
    }
    {
        std::string body;
        for (const auto& l : kept) body += l + "\n";
        write_file_atomic(out.metrics, body);
    }

    std::ofstream log(out.metrics, std::ios::app);
    TrainHooks hooks;
    hooks.on_log = [&log](const MetricsRow& row) { log << metrics_csv_row(row) << '\n' << std::flush; };
    hooks.checkpoint_every = cfg.checkpoint_every;
    hooks.on_checkpoint = [&](const TrainState& s) { save_checkpoint(out.checkpoint, {cfg.gate, cfg.train, s}); };

    MatrixSource source(data.x, cfg.train.seed);
    out.result = train(source, cfg.gate, cfg.train, std::move(state), hooks);
    save_checkpoint(out.checkpoint, {cfg.gate, cfg.train, out.result.state});
    return out;
}

}  // namespace

TrainRunResult cmd_train(const ExperimentConfig& cfg, bool resume) {
    cfg.validate();
    const auto path = cfg.dataset_path();
    if (!fs::exists(path)) throw ConfigError("dataset " + path.string() + " not found; run gen-data first");
    const auto data = load_dataset(path);
    return train_cell(cfg, data, resume);
}

EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const fs::path& out_json) {
    if (!fs::exists(dataset)) throw ConfigError("dataset " + dataset.string() + " not found");
    const auto ckpt = load_checkpoint(checkpoint);
    const auto data = load_dataset(dataset);
    const auto rep = evaluate(ckpt.state.params, data);
    if (!out_json.empty()) write_file_atomic(out_json, report_to_json(rep).dump(2) + "\n");
    return rep;
}

std::string sweep_csv_header() {
    return "rule,ell,seed,fvu,density_frac,recovery_lf_ha,recovery_hf_ha,recovery_lf_la,recovery_hf_la,"
           "freq_corr,mmcs_vs_seed0";
}

std::string sweep_csv_row(const SweepRow& r) {
    std::string s = std::string(to_string(r.rule)) + "," + fmt_double(r.ell) + "," + std::to_string(r.seed) + "," +
                    fmt_double(r.report.fvu) + "," + fmt_double(r.report.density_frac);
    for (const double v : r.report.per_bucket_recovery) s += "," + fmt_double(v);
    s += "," + (r.report.freq_corr ? fmt_double(*r.report.freq_corr) : std::string("nan"));
    s += "," + fmt_double(r.mmcs_vs_seed0);
    return s;
}

SweepResult cmd_sweep(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto data_path = cfg.dataset_path();
    if (!fs::exists(data_path)) {
        ExperimentConfig gen = cfg;
        gen.dataset = data_path;
        cmd_gen_data(gen);
    }
    const auto data = load_dataset(data_path);

    struct Cell {
        ScoringRule rule;
        double ell;
        std::uint64_t seed;
        std::optional<EvalReport> report;
        Matrix<float> decoder;
        std::string error;
    };
    std::vector<Cell> cells;
    for (const auto rule : cfg.sweep.rules)
        for (const double ell : cfg.sweep.ells)
            for (const auto seed : cfg.sweep.seeds) cells.push_back({rule, ell, seed, std::nullopt, {}, {}});

    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    auto worker = [&]() {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            auto& cell = cells[i];
            ExperimentConfig c = cfg;
            c.gate.rule = cell.rule;
            c.gate.ell = cell.ell;
            c.train.seed = cell.seed;
            c.out_dir = cfg.out_dir / "cells" /
                        (std::string(to_string(cell.rule)) + "_ell" + ell_tag(cell.ell) + "_seed" + std::to_string(cell.seed));
            try {
                auto run = train_cell(c, data, false);
                cell.report = evaluate(run.result.state.params, data);
                cell.decoder = run.result.state.params.w_dec;
                write_file_atomic(c.out_dir / "eval.json", report_to_json(*cell.report).dump(2) + "\n");
            } catch (const std::exception& e) {
                cell.error = e.what();
                std::lock_guard lock(io_mutex);
                std::cerr << "sweep cell " << c.out_dir.filename().string() << " failed: " << e.what() << "\n";
            }
        }
    };
    const int jobs = std::min<int>(cfg.sweep.jobs, static_cast<int>(cells.size()));
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    SweepResult res;
    const auto seed0 = cfg.sweep.seeds.front();
    for (const auto& cell : cells) {
        if (!cell.report) {
            res.failures.push_back(std::string(to_string(cell.rule)) + "," + fmt_double(cell.ell) + "," +
                                   std::to_string(cell.seed) + "," + cell.error);
            continue;
        }
        SweepRow row{cell.rule, cell.ell, cell.seed, *cell.report, std::nan("")};
        for (const auto& ref : cells)
            if (ref.rule == cell.rule && ref.ell == cell.ell && ref.seed == seed0 && ref.report)
                row.mmcs_vs_seed0 = mmcs(cell.decoder, ref.decoder);
        res.rows.push_back(row);
    }
    std::stable_sort(res.rows.begin(), res.rows.end(), [](const SweepRow& a, const SweepRow& b) {
        const auto ra = to_string(a.rule), rb = to_string(b.rule);
        if (ra != rb) return ra < rb;
        if (a.ell != b.ell) return a.ell < b.ell;
        return a.seed < b.seed;
    });

    std::string body = sweep_csv_header() + "\n";
    for (const auto& r : res.rows) body += sweep_csv_row(r) + "\n";
    res.csv = cfg.out_dir / "sweep.csv";
    write_file_atomic(res.csv, body);
    if (!res.failures.empty()) {
        std::string fail = "rule,ell,seed,error\n";
        for (const auto& f : res.failures) fail += f + "\n";
        write_file_atomic(cfg.out_dir / "sweep_failures.csv", fail);
    }
    return res;
}

CompareResult cmd_compare(const fs::path& a, const fs::path& b, const fs::path& out_csv) {
    const auto ca = load_checkpoint(a);
    const auto cb = load_checkpoint(b);
    CompareResult res;
    res.mmcs = mmcs(ca.state.params.w_dec, cb.state.params.w_dec);
    res.matches = best_match_report(ca.state.params.w_dec, cb.state.params.w_dec);
    if (!out_csv.empty()) {
        std::string body = "feature,best_match,cosine\n";
        for (const auto& m : res.matches)
            body += std::to_string(m.feature) + "," + std::to_string(m.best) + "," + fmt_double(m.cosine) + "\n";
        write_file_atomic(out_csv, body);
    }
    return res;
}

}  // namespace sampled_sae
