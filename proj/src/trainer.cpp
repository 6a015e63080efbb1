#include "sampled_sae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "sampled_sae/errors.hpp"
#include "sampled_sae/kernels.hpp"

namespace sampled_sae {

namespace par = kernels::parallel;

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (threshold_start < 0) throw ConfigError("threshold_start must be >= 0");
    if (!(threshold_beta >= 0 && threshold_beta < 1))
        throw ConfigError("threshold_beta must lie in [0, 1)");
    if (dead_window < 1) throw ConfigError("dead_window must be >= 1");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
}

template <typename T>
OptState<T> OptState<T>::fresh(const SaeParams<T>& params) {
    OptState<T> s;
    s.m1 = SaeTensors<T>::zeros_like(params);
    s.m2 = SaeTensors<T>::zeros_like(params);
    s.last_fired.assign(params.dict_size(), 0);
    return s;
}

std::vector<double> geometric_median(const Matrix<double>& points, double tol, int max_iter) {
    const std::size_t n = points.rows(), d = points.cols();
    if (n == 0) throw InputError("geometric_median: empty point set");
    constexpr double kEps = 1e-12;

    std::vector<double> y(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) y[i] += points(r, i);
    for (double& v : y) v /= static_cast<double>(n);

    std::vector<double> next(d);
    for (int it = 0; it < max_iter; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        double wsum = 0;
        for (std::size_t r = 0; r < n; ++r) {
            double dist2 = 0;
            for (std::size_t i = 0; i < d; ++i) {
                const double e = points(r, i) - y[i];
                dist2 += e * e;
            }
            const double w = 1.0 / (std::sqrt(dist2) + kEps);
            wsum += w;
            for (std::size_t i = 0; i < d; ++i) next[i] += w * points(r, i);
        }
        double step2 = 0;
        for (std::size_t i = 0; i < d; ++i) {
            next[i] /= wsum;
            const double e = next[i] - y[i];
            step2 += e * e;
        }
        y.swap(next);
        if (std::sqrt(step2) < tol) break;
    }
    return y;
}

template <typename T>
SaeParams<T> init_params(const Matrix<T>& first_batch, const GateConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (first_batch.rows() == 0) throw InputError("init_params: empty first batch");
    if (first_batch.cols() != cfg.input_dim) throw ConfigError("first batch width mismatch");
    const std::size_t m = cfg.dict_size, d = cfg.input_dim;

    SaeParams<T> p;
    p.w_dec = Matrix<T>(m, d);
    Rng rng = stream_rng(seed, streams::kInitDecoder);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> row(d);
    for (std::size_t j = 0; j < m; ++j) {
        double norm2 = 0;
        do {
            norm2 = 0;
            for (double& v : row) {
                v = normal(rng);
                norm2 += v * v;
            }
        } while (norm2 == 0);
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t i = 0; i < d; ++i) p.w_dec(j, i) = static_cast<T>(row[i] * inv);
    }
    p.w_enc = p.w_dec;
    p.b_enc.assign(m, T(0));
    const auto median = geometric_median(matrix_cast<double>(first_batch));
    p.b_dec.resize(d);
    for (std::size_t i = 0; i < d; ++i) p.b_dec[i] = static_cast<T>(median[i]);
    p.theta = 0;
    return p;
}

template <typename T>
SaeTensors<T> backward(const ForwardTrace<T>& trace, const Matrix<T>& x, const SaeParams<T>& params,
                       const GateConfig& cfg) {
    if (params_digest(params) != trace.digest)
        throw ContractViolation("backward: trace was computed from different parameters");
    const std::size_t rows = x.rows(), d = x.cols(), m = params.dict_size();
    if (trace.codes.rows() != rows || trace.recon.cols() != d)
        throw ContractViolation("backward: trace does not match the input batch");

    auto g = SaeTensors<T>::zeros_like(params);
    const T scale = T(2) / static_cast<T>(rows);

    // R = X_hat - X
    Matrix<T> resid(rows, d);
    for (std::size_t i = 0; i < resid.size(); ++i)
        resid.data()[i] = trace.recon.data()[i] - x.data()[i];

    Matrix<T> dpre(rows, m);
    par::accumulate_atb(trace.codes, resid, scale, g.w_dec);
    par::masked_row_dots(resid, params.w_dec, trace.codes, scale, dpre);

    const bool any_dead = std::find(trace.dead.begin(), trace.dead.end(), 1) != trace.dead.end();
    if (any_dead && cfg.aux_weight > 0) {
        // The residual target is detached: only e_hat carries gradient.
        const T aux_scale = static_cast<T>(2.0 * cfg.aux_weight / static_cast<double>(rows));
        Matrix<T> aux_err(rows, d);
        for (std::size_t i = 0; i < aux_err.size(); ++i) {
            const T target = x.data()[i] - trace.recon.data()[i];
            aux_err.data()[i] = trace.aux_recon.data()[i] - target;
        }
        par::accumulate_atb(trace.aux_codes, aux_err, aux_scale, g.w_dec);
        par::masked_row_dots(aux_err, params.w_dec, trace.aux_codes, aux_scale, dpre);
    }

    for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t j = 0; j < m; ++j) g.b_enc[j] += dpre(b, j);

    Matrix<T> centered(rows, d);
    for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t i = 0; i < d; ++i) centered(b, i) = x(b, i) - params.b_dec[i];
    par::accumulate_atb(dpre, centered, T(1), g.w_enc);

    // b_dec enters through the reconstruction and through the encoder input.
    for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t i = 0; i < d; ++i) g.b_dec[i] += scale * resid(b, i);
    for (std::size_t j = 0; j < m; ++j) {
        const T c = g.b_enc[j];
        if (c == T(0)) continue;
        for (std::size_t i = 0; i < d; ++i) g.b_dec[i] -= c * params.w_enc(j, i);
    }
    return g;
}

double warmup_lr(const TrainConfig& cfg, std::int64_t step) {
    if (step + 1 >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

namespace {

template <typename T, typename Fn>
void for_each_tensor(SaeTensors<T>& a, Fn&& fn) {
    fn("w_enc", a.w_enc.flat());
    fn("b_enc", std::span<T>(a.b_enc));
    fn("w_dec", a.w_dec.flat());
    fn("b_dec", std::span<T>(a.b_dec));
}

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m1, std::span<T> m2,
                 double lr, double b1, double b2, double bc1, double bc2, double eps) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double mm = b1 * static_cast<double>(m1[i]) + (1.0 - b1) * g;
        const double vv = b2 * static_cast<double>(m2[i]) + (1.0 - b2) * g * g;
        m1[i] = static_cast<T>(mm);
        m2[i] = static_cast<T>(vv);
        const double mhat = static_cast<double>(m1[i]) / bc1;
        const double vhat = static_cast<double>(m2[i]) / bc2;
        param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
}

}  // namespace

template <typename T>
AdamStepInfo adam_step(SaeParams<T>& params, SaeTensors<T> grads, OptState<T>& opt,
                       const TrainConfig& cfg) {
    double norm2 = 0;
    for_each_tensor(grads, [&](const char* name, std::span<T> g) {
        for (const T v : g) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string("non-finite gradient in ") + name + " at step " +
                                   std::to_string(opt.step));
            norm2 += static_cast<double>(v) * static_cast<double>(v);
        }
    });
    AdamStepInfo info;
    info.grad_norm = std::sqrt(norm2);
    if (info.grad_norm > cfg.grad_clip) {
        const double s = cfg.grad_clip / info.grad_norm;
        for_each_tensor(grads, [s](const char*, std::span<T> g) {
            for (T& v : g) v = static_cast<T>(static_cast<double>(v) * s);
        });
    }

    // Keep decoder rows on the unit sphere: drop the radial component.
    const std::size_t m = params.w_dec.rows(), d = params.w_dec.cols();
    for (std::size_t j = 0; j < m; ++j) {
        auto w = params.w_dec.row(j);
        auto g = grads.w_dec.row(j);
        double dot = 0;
        for (std::size_t i = 0; i < d; ++i) dot += static_cast<double>(w[i]) * static_cast<double>(g[i]);
        if (dot == 0) continue;
        for (std::size_t i = 0; i < d; ++i)
            g[i] = static_cast<T>(static_cast<double>(g[i]) - dot * static_cast<double>(w[i]));
    }

    info.lr = warmup_lr(cfg, opt.step);
    const double t1 = static_cast<double>(opt.step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t1);

    const Matrix<T> dec_before = params.w_dec;
    auto run = [&](auto param, auto grad, auto a, auto b) {
        adam_update<T>(param, grad, a, b, info.lr, cfg.beta1, cfg.beta2, bc1, bc2, cfg.adam_eps);
    };
    run(params.w_enc.flat(), std::span<const T>(grads.w_enc.flat()), opt.m1.w_enc.flat(), opt.m2.w_enc.flat());
    run(std::span<T>(params.b_enc), std::span<const T>(grads.b_enc), std::span<T>(opt.m1.b_enc),
        std::span<T>(opt.m2.b_enc));
    run(params.w_dec.flat(), std::span<const T>(grads.w_dec.flat()), opt.m1.w_dec.flat(), opt.m2.w_dec.flat());
    run(std::span<T>(params.b_dec), std::span<const T>(grads.b_dec), std::span<T>(opt.m1.b_dec),
        std::span<T>(opt.m2.b_dec));

    for (std::size_t j = 0; j < m; ++j) {
        auto w = params.w_dec.row(j);
        const auto before = dec_before.row(j);
        if (std::equal(w.begin(), w.end(), before.begin())) continue;
        double norm = 0;
        for (const T v : w) norm += static_cast<double>(v) * static_cast<double>(v);
        norm = std::sqrt(norm);
        if (norm == 0) throw NumericError("decoder row collapsed to zero");
        for (T& v : w) v = static_cast<T>(static_cast<double>(v) / norm);
    }
    ++opt.step;
    return info;
}

template <typename T>
ThresholdState update_threshold(ThresholdState state, const Matrix<T>& codes, std::int64_t step,
                                const TrainConfig& cfg) {
    if (step < cfg.threshold_start) return state;
    double smallest = std::numeric_limits<double>::infinity();
    for (const T v : codes.flat())
        if (v > T(0)) smallest = std::min(smallest, static_cast<double>(v));
    if (!std::isfinite(smallest)) return state;
    if (!state.started) return {smallest, true};
    state.value = cfg.threshold_beta * state.value + (1.0 - cfg.threshold_beta) * smallest;
    return state;
}

template <typename T>
void update_dead_tracking(OptState<T>& opt, const Matrix<T>& codes, std::int64_t step) {
    if (opt.last_fired.size() != codes.cols()) throw ConfigError("dead tracking width mismatch");
    for (std::size_t b = 0; b < codes.rows(); ++b)
        for (std::size_t j = 0; j < codes.cols(); ++j)
            if (codes(b, j) != T(0)) opt.last_fired[j] = step;
}

Mask dead_mask(const std::vector<std::int64_t>& last_fired, std::int64_t step, std::int64_t window) {
    Mask dead(last_fired.size(), 0);
    for (std::size_t j = 0; j < last_fired.size(); ++j) dead[j] = step - last_fired[j] > window ? 1 : 0;
    return dead;
}

Matrix<float> MatrixSource::batch(std::uint64_t stream, std::uint64_t index, std::size_t size) const {
    if (data_.rows() == 0) throw InputError("empty dataset");
    Rng rng = stream_rng(seed_, stream, index);
    const auto n = static_cast<double>(data_.rows());
    Matrix<float> out(size, data_.cols());
    for (std::size_t r = 0; r < size; ++r) {
        const auto src = std::min(static_cast<std::size_t>(uniform01(rng) * n), data_.rows() - 1);
        std::copy(data_.row(src).begin(), data_.row(src).end(), out.row(r).begin());
    }
    return out;
}

std::string metrics_csv_header() { return "step,loss_recon,loss_aux,fvu,l0_mean,dead,theta"; }

std::string metrics_csv_row(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%zu,%.9g", static_cast<long long>(r.step),
                  r.loss_recon, r.loss_aux, r.fvu, r.l0_mean, r.dead, r.theta);
    return buf;
}

TrainState init_train_state(const DataSource& data, const GateConfig& gate, const TrainConfig& cfg) {
    gate.validate();
    cfg.validate();
    if (data.dim() != gate.input_dim) throw ConfigError("dataset dimension does not match input_dim");
    const auto first = data.batch(streams::kInitBatch, 0, cfg.batch_size);
    TrainState s;
    s.params = init_params(first, gate, cfg.seed);
    s.opt = OptState<float>::fresh(s.params);
    return s;
}

namespace {

double batch_fvu(const Matrix<float>& x, const Matrix<float>& x_hat) {
    const std::size_t rows = x.rows(), d = x.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t i = 0; i < d; ++i) mean[i] += x(b, i);
    for (double& v : mean) v /= static_cast<double>(rows);
    double num = 0, den = 0;
    for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t i = 0; i < d; ++i) {
            const double e = static_cast<double>(x(b, i)) - x_hat(b, i);
            const double c = static_cast<double>(x(b, i)) - mean[i];
            num += e * e;
            den += c * c;
        }
    return den > 0 ? num / den : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TrainResult train(const DataSource& data, const GateConfig& gate, const TrainConfig& cfg,
                  std::optional<TrainState> resume, const TrainHooks& hooks) {
    gate.validate();
    cfg.validate();
    TrainResult result;
    result.state = resume ? std::move(*resume) : init_train_state(data, gate, cfg);
    auto& params = result.state.params;
    auto& opt = result.state.opt;
    if (params.dict_size() != gate.dict_size || params.input_dim() != gate.input_dim)
        throw ConfigError("resumed parameters do not match the gate configuration");

    for (std::int64_t t = opt.step; t < cfg.steps; ++t) {
        const auto x = data.batch(streams::kBatch, static_cast<std::uint64_t>(t), cfg.batch_size);
        const Mask dead = dead_mask(opt.last_fired, t, cfg.dead_window);
        Rng score_rng = stream_rng(cfg.seed, streams::kUniformScores, static_cast<std::uint64_t>(t));

        auto trace = forward_train(x, params, gate, dead, &score_rng);
        if (!std::isfinite(trace.loss.total))
            throw NumericError("non-finite loss at step " + std::to_string(t));
        auto grads = backward(trace, x, params, gate);
        adam_step(params, std::move(grads), opt, cfg);

        opt.threshold = update_threshold(opt.threshold, trace.codes, t, cfg);
        params.theta = static_cast<float>(opt.threshold.value);
        update_dead_tracking(opt, trace.codes, t);

        const std::int64_t done = t + 1;
        if (done % cfg.log_every == 0 || done == cfg.steps) {
            MetricsRow row;
            row.step = done;
            row.loss_recon = trace.loss.recon;
            row.loss_aux = trace.loss.aux;
            row.fvu = batch_fvu(x, trace.recon);
            row.l0_mean = static_cast<double>(count_nonzero(trace.codes)) / static_cast<double>(x.rows());
            row.dead = static_cast<std::size_t>(std::count(dead.begin(), dead.end(), 1));
            row.theta = opt.threshold.value;
            result.log.push_back(row);
            if (hooks.on_log) hooks.on_log(row);
        }
        if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && done % hooks.checkpoint_every == 0)
            hooks.on_checkpoint(result.state);
    }
    return result;
}

template struct OptState<float>;
template struct OptState<double>;

#define SAMPLED_SAE_INSTANTIATE(T)                                                                  \
    template SaeParams<T> init_params<T>(const Matrix<T>&, const GateConfig&, std::uint64_t);       \
    template SaeTensors<T> backward<T>(const ForwardTrace<T>&, const Matrix<T>&,                    \
                                       const SaeParams<T>&, const GateConfig&);                     \
    template AdamStepInfo adam_step<T>(SaeParams<T>&, SaeTensors<T>, OptState<T>&,                  \
                                       const TrainConfig&);                                         \
    template ThresholdState update_threshold<T>(ThresholdState, const Matrix<T>&, std::int64_t,     \
                                                const TrainConfig&);                                \
    template void update_dead_tracking<T>(OptState<T>&, const Matrix<T>&, std::int64_t);

SAMPLED_SAE_INSTANTIATE(float)
SAMPLED_SAE_INSTANTIATE(double)

#undef SAMPLED_SAE_INSTANTIATE

}  // namespace sampled_sae
