#include "sampled_sae/sae_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "sampled_sae/errors.hpp"
#include "sampled_sae/kernels.hpp"

namespace sampled_sae {

namespace par = kernels::parallel;

std::string_view to_string(ScoringRule rule) {
    switch (rule) {
        case ScoringRule::L2Norm: return "l2";
        case ScoringRule::SquaredL2: return "squared_l2";
        case ScoringRule::Entropy: return "entropy";
        case ScoringRule::Uniform: return "uniform";
    }
    return "?";
}

ScoringRule parse_scoring_rule(std::string_view name) {
    if (name == "l2" || name == "l2norm" || name == "L2Norm") return ScoringRule::L2Norm;
    if (name == "squared_l2" || name == "sql2" || name == "SquaredL2") return ScoringRule::SquaredL2;
    if (name == "entropy" || name == "Entropy") return ScoringRule::Entropy;
    if (name == "uniform" || name == "Uniform") return ScoringRule::Uniform;
    throw ConfigError("unknown scoring rule '" + std::string(name) + "'");
}

void GateConfig::validate() const {
    if (input_dim == 0) throw ConfigError("input_dim must be positive");
    if (dict_size == 0) throw ConfigError("dict_size must be positive");
    if (k < 1 || k > dict_size) throw ConfigError("k must satisfy 1 <= k <= dict_size");
    if (!(ell >= 1.0) || !std::isfinite(ell)) throw ConfigError("ell must be finite and >= 1");
    if (!(ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
    if (!(aux_weight >= 0.0)) throw ConfigError("aux_weight must be >= 0");
    if (!(entropy_eps > 0.0)) throw ConfigError("entropy_eps must be > 0");
}

std::size_t GateConfig::pool_size() const {
    // The small slack keeps ell = m/k from flooring to m - 1 when m/k is not
    // representable.
    const double raw = std::floor(ell * static_cast<double>(k) + 1e-9);
    const auto p = static_cast<std::size_t>(std::max(raw, 1.0));
    return std::min(p, dict_size);
}

std::size_t GateConfig::aux_k(std::size_t dead_count) const {
    return std::min(k_aux == 0 ? 2 * k : k_aux, dead_count);
}

template <typename T>
std::uint64_t params_digest(const SaeParams<T>& params) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    feed(params.w_enc.data(), params.w_enc.size() * sizeof(T));
    feed(params.b_enc.data(), params.b_enc.size() * sizeof(T));
    feed(params.w_dec.data(), params.w_dec.size() * sizeof(T));
    feed(params.b_dec.data(), params.b_dec.size() * sizeof(T));
    return h;
}

namespace {

template <typename T>
void check_params(const SaeParams<T>& p) {
    const std::size_t m = p.w_dec.rows(), d = p.w_dec.cols();
    if (p.w_enc.rows() != m || p.w_enc.cols() != d || p.b_enc.size() != m || p.b_dec.size() != d)
        throw ConfigError("inconsistent SAE parameter shapes");
}

template <typename T>
void check_nonnegative(const Matrix<T>& z, const char* what) {
    for (const T v : z.flat())
        if (!(v >= T(0))) throw ContractViolation(std::string(what) + ": negative or NaN entry");
}

}  // namespace

template <typename T>
Matrix<T> encode_preacts(const Matrix<T>& x, const SaeParams<T>& params) {
    check_params(params);
    if (x.cols() != params.input_dim())
        throw ConfigError("input has " + std::to_string(x.cols()) + " columns, expected " +
                          std::to_string(params.input_dim()));
    for (const T v : x.flat())
        if (!std::isfinite(static_cast<double>(v))) throw InputError("non-finite input activation");
    return par::encode_relu<T>(x, params.w_enc, params.b_enc, params.b_dec);
}

template <typename T>
std::vector<double> score_features(const Matrix<T>& z, ScoringRule rule, double ridge,
                                   double entropy_eps, Rng* rng) {
    check_nonnegative(z, "score_features");
    switch (rule) {
        case ScoringRule::L2Norm:
            return par::column_scores(z, kernels::ColumnScore::L2Norm, ridge, entropy_eps);
        case ScoringRule::SquaredL2:
            return par::column_scores(z, kernels::ColumnScore::SquaredL2, ridge, entropy_eps);
        case ScoringRule::Entropy:
            return par::column_scores(z, kernels::ColumnScore::NegEntropy, ridge, entropy_eps);
        case ScoringRule::Uniform: {
            if (rng == nullptr) throw ConfigError("uniform scoring needs a random generator");
            std::vector<double> q(z.cols());
            for (double& v : q) v = uniform01(*rng);
            return q;
        }
    }
    throw ConfigError("unknown scoring rule");
}

Mask select_pool(std::span<const double> scores, std::size_t k, double ell) {
    if (!(ell >= 1.0)) throw ConfigError("ell must be >= 1");
    if (k == 0) throw ConfigError("k must be positive");
    const std::size_t m = scores.size();
    const double raw = std::floor(ell * static_cast<double>(k) + 1e-9);
    const std::size_t p = std::min(static_cast<std::size_t>(raw), m);

    Mask pool(m, 0);
    if (p >= m) {
        std::fill(pool.begin(), pool.end(), 1);
        return pool;
    }
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p), order.end(), better);
    for (std::size_t i = 0; i < p; ++i) pool[order[i]] = 1;
    return pool;
}

template <typename T>
Matrix<T> mask_columns(const Matrix<T>& z, const Mask& pool) {
    if (pool.size() != z.cols()) throw ConfigError("pool mask size mismatch");
    Matrix<T> out(z.rows(), z.cols());
    for (std::size_t b = 0; b < z.rows(); ++b)
        for (std::size_t j = 0; j < z.cols(); ++j) out(b, j) = pool[j] ? z(b, j) : T(0);
    return out;
}

template <typename T>
Matrix<T> batch_topk(const Matrix<T>& zp, std::size_t k) {
    const std::size_t budget = k * zp.rows();
    if (budget == 0) throw EmptySelectionError("batch_topk: k * B must be positive");

    std::vector<std::size_t> positive;
    positive.reserve(std::min(zp.size(), 2 * budget));
    const T* v = zp.data();
    for (std::size_t i = 0; i < zp.size(); ++i)
        if (v[i] > T(0)) positive.push_back(i);

    Matrix<T> out(zp.rows(), zp.cols());
    if (positive.size() > budget) {
        // Flat index order is (row, column) lexicographic order.
        auto better = [v](std::size_t a, std::size_t b) {
            if (v[a] != v[b]) return v[a] > v[b];
            return a < b;
        };
        std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(budget),
                         positive.end(), better);
        positive.resize(budget);
    }
    for (const std::size_t i : positive) out.data()[i] = v[i];
    return out;
}

template <typename T>
Matrix<T> row_topk(const Matrix<T>& z, std::size_t k, const Mask& allowed) {
    if (allowed.size() != z.cols()) throw ConfigError("row_topk mask size mismatch");
    Matrix<T> out(z.rows(), z.cols());
    if (k == 0) return out;
    std::vector<std::size_t> cand;
    for (std::size_t b = 0; b < z.rows(); ++b) {
        cand.clear();
        for (std::size_t j = 0; j < z.cols(); ++j)
            if (allowed[j] && z(b, j) > T(0)) cand.push_back(j);
        const auto row = z.row(b);
        auto better = [&row](std::size_t a, std::size_t c) {
            if (row[a] != row[c]) return row[a] > row[c];
            return a < c;
        };
        if (cand.size() > k) {
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                             better);
            cand.resize(k);
        }
        for (const std::size_t j : cand) out(b, j) = row[j];
    }
    return out;
}

template <typename T>
Matrix<T> apply_threshold(const Matrix<T>& zp, double theta) {
    if (!(theta >= 0.0)) throw ConfigError("theta must be >= 0");
    Matrix<T> out(zp.rows(), zp.cols());
    for (std::size_t i = 0; i < zp.size(); ++i) {
        const T v = zp.data()[i];
        if (static_cast<double>(v) > theta) out.data()[i] = v;
    }
    return out;
}

template <typename T>
Matrix<T> decode(const Matrix<T>& codes, const SaeParams<T>& params) {
    check_params(params);
    if (codes.cols() != params.dict_size()) throw ConfigError("code width does not match dictionary");
    return par::decode<T>(codes, params.w_dec, params.b_dec);
}

template <typename T>
AuxFit<T> aux_fit(const Matrix<T>& z, const Mask& dead, const SaeParams<T>& params,
                  const GateConfig& cfg) {
    const std::size_t n_dead =
        dead.empty() ? 0 : static_cast<std::size_t>(std::count(dead.begin(), dead.end(), 1));
    const std::size_t kk = cfg.aux_k(n_dead);
    AuxFit<T> fit;
    if (kk == 0) {
        fit.codes = Matrix<T>(z.rows(), z.cols());
        fit.recon = Matrix<T>(z.rows(), params.input_dim());
        return fit;
    }
    fit.codes = row_topk(z, kk, dead);
    const std::vector<T> no_bias(params.input_dim(), T(0));
    fit.recon = par::decode<T>(fit.codes, params.w_dec, no_bias);
    return fit;
}

namespace {

template <typename T>
double sum_rows(const std::vector<double>& rows) {
    double s = 0;
    for (const double v : rows) s += v;
    return s;
}

template <typename T>
LossTerms loss_from(const Matrix<T>& x, const Matrix<T>& x_hat, const AuxFit<T>& aux, bool any_dead,
                    const GateConfig& cfg) {
    const auto batch = static_cast<double>(x.rows());
    LossTerms out;
    out.recon = sum_rows<T>(par::row_sq_diff(x, x_hat)) / batch;
    if (any_dead) {
        // e - e_hat with e = X - X_hat.
        Matrix<T> target(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i)
            target.data()[i] = x.data()[i] - x_hat.data()[i];
        out.aux = sum_rows<T>(par::row_sq_diff(target, aux.recon)) / batch;
    }
    out.total = out.recon + cfg.aux_weight * out.aux;
    return out;
}

}  // namespace

template <typename T>
LossTerms total_loss(const Matrix<T>& x, const Matrix<T>& x_hat, const Matrix<T>& z,
                     const Mask& dead, const SaeParams<T>& params, const GateConfig& cfg) {
    if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols())
        throw ConfigError("total_loss: X and X_hat shapes differ");
    const auto fit = aux_fit(z, dead, params, cfg);
    const bool any_dead = std::find(dead.begin(), dead.end(), 1) != dead.end();
    return loss_from(x, x_hat, fit, any_dead, cfg);
}

template <typename T>
ForwardTrace<T> forward_train(const Matrix<T>& x, const SaeParams<T>& params,
                              const GateConfig& cfg, const Mask& dead, Rng* rng) {
    cfg.validate();
    if (params.dict_size() != cfg.dict_size || params.input_dim() != cfg.input_dim)
        throw ConfigError("parameters do not match the gate configuration");
    if (!dead.empty() && dead.size() != cfg.dict_size) throw ConfigError("dead mask size mismatch");

    ForwardTrace<T> tr;
    tr.digest = params_digest(params);
    tr.dead = dead.empty() ? Mask(cfg.dict_size, 0) : dead;
    tr.preacts = encode_preacts(x, params);
    tr.scores = score_features(tr.preacts, cfg.rule, cfg.ridge, cfg.entropy_eps, rng);
    tr.pool = select_pool(tr.scores, cfg.k, cfg.ell);
    tr.codes = batch_topk(mask_columns(tr.preacts, tr.pool), cfg.k);
    tr.recon = decode(tr.codes, params);

    auto fit = aux_fit(tr.preacts, tr.dead, params, cfg);
    const bool any_dead = std::find(tr.dead.begin(), tr.dead.end(), 1) != tr.dead.end();
    tr.loss = loss_from(x, tr.recon, fit, any_dead, cfg);
    tr.aux_codes = std::move(fit.codes);
    tr.aux_recon = std::move(fit.recon);
    return tr;
}

template <typename T>
Matrix<T> encode_inference(const Matrix<T>& x, const SaeParams<T>& params) {
    return apply_threshold(encode_preacts(x, params), static_cast<double>(params.theta));
}

template <typename T>
std::size_t count_nonzero(const Matrix<T>& m) {
    return static_cast<std::size_t>(
        std::count_if(m.flat().begin(), m.flat().end(), [](T v) { return v != T(0); }));
}

#define SAMPLED_SAE_INSTANTIATE(T)                                                                \
    template std::uint64_t params_digest<T>(const SaeParams<T>&);                                 \
    template Matrix<T> encode_preacts<T>(const Matrix<T>&, const SaeParams<T>&);                  \
    template std::vector<double> score_features<T>(const Matrix<T>&, ScoringRule, double, double, \
                                                   Rng*);                                         \
    template Matrix<T> mask_columns<T>(const Matrix<T>&, const Mask&);                            \
    template Matrix<T> batch_topk<T>(const Matrix<T>&, std::size_t);                              \
    template Matrix<T> row_topk<T>(const Matrix<T>&, std::size_t, const Mask&);                   \
    template Matrix<T> apply_threshold<T>(const Matrix<T>&, double);                              \
    template Matrix<T> decode<T>(const Matrix<T>&, const SaeParams<T>&);                          \
    template AuxFit<T> aux_fit<T>(const Matrix<T>&, const Mask&, const SaeParams<T>&,             \
                                  const GateConfig&);                                             \
    template LossTerms total_loss<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,        \
                                     const Mask&, const SaeParams<T>&, const GateConfig&);        \
    template ForwardTrace<T> forward_train<T>(const Matrix<T>&, const SaeParams<T>&,              \
                                              const GateConfig&, const Mask&, Rng*);              \
    template Matrix<T> encode_inference<T>(const Matrix<T>&, const SaeParams<T>&);                \
    template std::size_t count_nonzero<T>(const Matrix<T>&);

SAMPLED_SAE_INSTANTIATE(float)
SAMPLED_SAE_INSTANTIATE(double)

#undef SAMPLED_SAE_INSTANTIATE

}  // namespace sampled_sae
