#pragma once

// Sampled-SAE forward pass: encoder preactivations, batch-level feature
// scoring, candidate pool selection, BatchTopK within the pool, decoding and
// the reconstruction + auxiliary loss.
//
// Orientation: tokens are rows. X is B x d, Z and F are B x m, W_enc and
// W_dec are both m x d (one row per dictionary feature).

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sampled_sae/matrix.hpp"
#include "sampled_sae/rng.hpp"

namespace sampled_sae {

enum class ScoringRule { L2Norm, SquaredL2, Entropy, Uniform };

std::string_view to_string(ScoringRule rule);
ScoringRule parse_scoring_rule(std::string_view name);

inline constexpr ScoringRule kAllScoringRules[] = {ScoringRule::L2Norm, ScoringRule::SquaredL2,
                                                   ScoringRule::Entropy, ScoringRule::Uniform};

using Mask = std::vector<std::uint8_t>;

struct GateConfig {
    std::size_t input_dim = 64;
    std::size_t dict_size = 256;
    std::size_t k = 8;          // target mean L0 per token
    double ell = 32.0;          // pool expansion factor
    ScoringRule rule = ScoringRule::L2Norm;
    double ridge = 0.01;        // SquaredL2 stabiliser
    double aux_weight = 1.0 / 32.0;
    std::size_t k_aux = 0;      // 0 selects 2k; capped by the dead count
    double entropy_eps = 1e-8;

    /// Throws ConfigError on any violated invariant.
    void validate() const;

    /// min(floor(ell * k), m).
    std::size_t pool_size() const;

    std::size_t aux_k(std::size_t dead_count) const;

    /// ell at which every feature enters the pool.
    double batch_topk_ell() const { return static_cast<double>(dict_size) / static_cast<double>(k); }

    bool operator==(const GateConfig&) const = default;
};

template <typename T>
struct SaeParams {
    Matrix<T> w_enc;          // m x d
    std::vector<T> b_enc;     // m
    Matrix<T> w_dec;          // m x d, unit-norm rows
    std::vector<T> b_dec;     // d
    T theta = 0;              // inference threshold

    std::size_t input_dim() const { return w_dec.cols(); }
    std::size_t dict_size() const { return w_dec.rows(); }

    bool operator==(const SaeParams&) const = default;
};

/// Gradient (or Adam moment) storage shaped like the trainable parameters.
template <typename T>
struct SaeTensors {
    Matrix<T> w_enc;
    std::vector<T> b_enc;
    Matrix<T> w_dec;
    std::vector<T> b_dec;

    static SaeTensors zeros_like(const SaeParams<T>& p) {
        return {Matrix<T>(p.w_enc.rows(), p.w_enc.cols()), std::vector<T>(p.b_enc.size()),
                Matrix<T>(p.w_dec.rows(), p.w_dec.cols()), std::vector<T>(p.b_dec.size())};
    }

    bool operator==(const SaeTensors&) const = default;
};

/// 64-bit FNV-1a over every parameter byte; identifies the parameter state a
/// trace was computed from.
template <typename T>
std::uint64_t params_digest(const SaeParams<T>& params);

struct LossTerms {
    double recon = 0;
    double aux = 0;
    double total = 0;
};

template <typename T>
struct ForwardTrace {
    Matrix<T> preacts;          // Z, post-ReLU
    std::vector<double> scores; // q
    Mask pool;                  // c
    Matrix<T> codes;            // F
    Matrix<T> recon;            // X_hat
    Mask dead;                  // dead features at this step
    Matrix<T> aux_codes;        // per-token top-k_aux over dead features
    Matrix<T> aux_recon;        // aux_codes * W_dec
    LossTerms loss;
    std::uint64_t digest = 0;
};

// --- operations -----------------------------------------------------------

template <typename T>
Matrix<T> encode_preacts(const Matrix<T>& x, const SaeParams<T>& params);

/// Per-feature batch scores. `rng` is required for the Uniform rule.
template <typename T>
std::vector<double> score_features(const Matrix<T>& z, ScoringRule rule, double ridge,
                                   double entropy_eps, Rng* rng = nullptr);

/// Exactly min(floor(ell*k), m) highest-scoring features; ties go to the
/// smaller index.
Mask select_pool(std::span<const double> scores, std::size_t k, double ell);

template <typename T>
Matrix<T> mask_columns(const Matrix<T>& z, const Mask& pool);

/// Keeps the B*k largest strictly positive entries; ties broken by
/// (row, column) order.
template <typename T>
Matrix<T> batch_topk(const Matrix<T>& zp, std::size_t k);

/// Per-row TopK restricted to columns flagged in `allowed`, strictly positive
/// entries only. Ties go to the smaller column.
template <typename T>
Matrix<T> row_topk(const Matrix<T>& z, std::size_t k, const Mask& allowed);

template <typename T>
Matrix<T> apply_threshold(const Matrix<T>& zp, double theta);

template <typename T>
Matrix<T> decode(const Matrix<T>& codes, const SaeParams<T>& params);

/// Auxiliary codes and their reconstruction for the dead features.
template <typename T>
struct AuxFit {
    Matrix<T> codes;
    Matrix<T> recon;
};

template <typename T>
AuxFit<T> aux_fit(const Matrix<T>& z, const Mask& dead, const SaeParams<T>& params,
                  const GateConfig& cfg);

/// Reconstruction loss ||X - X_hat||^2 / B, AuxK loss ||e - e_hat||^2 / B and
/// their weighted sum.
template <typename T>
LossTerms total_loss(const Matrix<T>& x, const Matrix<T>& x_hat, const Matrix<T>& z,
                     const Mask& dead, const SaeParams<T>& params, const GateConfig& cfg);

/// Full training-mode forward pass. An empty `dead` mask means no feature is
/// dead.
template <typename T>
ForwardTrace<T> forward_train(const Matrix<T>& x, const SaeParams<T>& params,
                              const GateConfig& cfg, const Mask& dead, Rng* rng = nullptr);

/// Inference-mode codes: ReLU preactivations above theta.
template <typename T>
Matrix<T> encode_inference(const Matrix<T>& x, const SaeParams<T>& params);

template <typename T>
std::size_t count_nonzero(const Matrix<T>& m);

}  // namespace sampled_sae
