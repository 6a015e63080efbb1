#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sampled_sae/matrix.hpp"
#include "sampled_sae/rng.hpp"
#include "sampled_sae/sae_core.hpp"

namespace sampled_sae {

struct TrainConfig {
    std::int64_t steps = 50'000;
    std::size_t batch_size = 4'096;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    std::int64_t warmup_steps = 1'000;
    std::int64_t threshold_start = 1'000;
    double threshold_beta = 0.999;
    std::int64_t dead_window = 1'000;
    std::int64_t log_every = 50;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Inference threshold tracker: an EMA of the smallest activation kept by
/// BatchTopK, switched on at `threshold_start`.
struct ThresholdState {
    double value = 0;
    bool started = false;
    bool operator==(const ThresholdState&) const = default;
};

template <typename T>
struct OptState {
    SaeTensors<T> m1;
    SaeTensors<T> m2;
    std::int64_t step = 0;                 // completed optimizer steps
    std::vector<std::int64_t> last_fired;  // per feature
    ThresholdState threshold;

    static OptState fresh(const SaeParams<T>& params);
    bool operator==(const OptState&) const = default;
};

// --- initialisation ------------------------------------------------------

/// Weiszfeld iteration started from the arithmetic mean.
std::vector<double> geometric_median(const Matrix<double>& points, double tol = 1e-6,
                                     int max_iter = 100);

template <typename T>
SaeParams<T> init_params(const Matrix<T>& first_batch, const GateConfig& cfg, std::uint64_t seed);

// --- gradients and optimiser ---------------------------------------------

/// Gradient of the loss of `trace` with the pool and TopK supports frozen.
/// Throws ContractViolation if `params` is not the state `trace` came from.
template <typename T>
SaeTensors<T> backward(const ForwardTrace<T>& trace, const Matrix<T>& x, const SaeParams<T>& params,
                       const GateConfig& cfg);

struct AdamStepInfo {
    double grad_norm = 0;  // before clipping
    double lr = 0;         // effective, after warmup
};

double warmup_lr(const TrainConfig& cfg, std::int64_t step);

template <typename T>
AdamStepInfo adam_step(SaeParams<T>& params, SaeTensors<T> grads, OptState<T>& opt,
                       const TrainConfig& cfg);

template <typename T>
ThresholdState update_threshold(ThresholdState state, const Matrix<T>& codes, std::int64_t step,
                                const TrainConfig& cfg);

template <typename T>
void update_dead_tracking(OptState<T>& opt, const Matrix<T>& codes, std::int64_t step);

Mask dead_mask(const std::vector<std::int64_t>& last_fired, std::int64_t step, std::int64_t window);

// --- training loop -------------------------------------------------------

/// Batches are a pure function of (step, seed) so a resumed run sees the same
/// sequence of inputs.
class DataSource {
public:
    virtual ~DataSource() = default;
    virtual std::size_t dim() const = 0;
    virtual Matrix<float> batch(std::uint64_t stream, std::uint64_t index, std::size_t size) const = 0;
};

/// Samples rows with replacement from an in-memory activation matrix.
class MatrixSource final : public DataSource {
public:
    MatrixSource(const Matrix<float>& data, std::uint64_t seed) : data_(data), seed_(seed) {}
    std::size_t dim() const override { return data_.cols(); }
    Matrix<float> batch(std::uint64_t stream, std::uint64_t index, std::size_t size) const override;

private:
    const Matrix<float>& data_;
    std::uint64_t seed_;
};

struct MetricsRow {
    std::int64_t step = 0;
    double loss_recon = 0;
    double loss_aux = 0;
    double fvu = 0;
    double l0_mean = 0;
    std::size_t dead = 0;
    double theta = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

struct TrainState {
    SaeParams<float> params;
    OptState<float> opt;
};

struct TrainHooks {
    std::function<void(const MetricsRow&)> on_log;
    /// Called with the state after `checkpoint_every` completed steps.
    std::function<void(const TrainState&)> on_checkpoint;
    std::int64_t checkpoint_every = 0;
};

struct TrainResult {
    TrainState state;
    std::vector<MetricsRow> log;
};

TrainState init_train_state(const DataSource& data, const GateConfig& gate, const TrainConfig& cfg);

/// Runs optimizer steps from `state.opt.step` up to `cfg.steps`.
TrainResult train(const DataSource& data, const GateConfig& gate, const TrainConfig& cfg,
                  std::optional<TrainState> resume = std::nullopt, const TrainHooks& hooks = {});

}  // namespace sampled_sae
