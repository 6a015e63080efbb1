#pragma once

// Ground-truth sparse superposition data: X = S * A^T + noise, with a
// low-coherence dictionary A (d x k) and Bernoulli-Gaussian codes S whose
// frequency and magnitude depend on a per-feature bucket.

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "sampled_sae/matrix.hpp"

namespace sampled_sae {

enum class Bucket : std::uint8_t { LF_HA = 0, HF_HA = 1, LF_LA = 2, HF_LA = 3 };
inline constexpr std::size_t kNumBuckets = 4;

std::string_view to_string(Bucket b);

struct BucketSpec {
    Bucket name;
    double p;      // activation probability
    double sigma;  // coefficient standard deviation
    bool operator==(const BucketSpec&) const = default;
};

using BucketSpecs = std::array<BucketSpec, kNumBuckets>;

BucketSpecs default_buckets();

struct SparseEntry {
    std::uint32_t row;
    std::uint32_t col;
    float value;
    bool operator==(const SparseEntry&) const = default;
};

/// Row-major sparse code matrix (n x k), entries sorted by (row, col).
struct SparseCodes {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<SparseEntry> entries;
    bool operator==(const SparseCodes&) const = default;
};

struct SynthConfig {
    std::size_t d = 64;
    std::size_t k = 256;
    std::size_t n = 20'000;
    std::uint64_t seed = 0;
    double snr_db = 20.0;
    int coherence_iters = 200;
    BucketSpecs buckets = default_buckets();
    bool operator==(const SynthConfig&) const = default;
};

struct SynthGroundTruth {
    Matrix<float> dictionary;   // A, d x k, unit-norm columns
    std::vector<Bucket> labels; // per feature
    SparseCodes codes;          // S
    Matrix<float> x;            // n x d
    BucketSpecs buckets = default_buckets();
    double snr_db = 20.0;
    std::uint64_t seed = 0;
};

struct DatasetStats {
    double coherence = 0;
    double welch_bound = 0;
    double expected_l0 = 0;
    double observed_l0 = 0;
    double snr_db = std::numeric_limits<double>::quiet_NaN();  // measured, when known
    std::array<std::size_t, kNumBuckets> counts{};
    std::array<double, kNumBuckets> mean_abs{};
    std::array<double, kNumBuckets> std_abs{};
};

/// sqrt((k - d) / (d (k - 1))); zero when k <= d.
double welch_bound(std::size_t d, std::size_t k);

/// max_{i != j} |<A[:,i], A[:,j]>|; 0 for a single column.
double mutual_coherence(const Matrix<double>& a);
double mutual_coherence(const Matrix<float>& a);

/// Gaussian init followed by Gram-shrinkage alternating projection. Returns
/// the lowest-coherence iterate. For k <= d the columns are orthonormalised.
Matrix<double> generate_dictionary(std::size_t d, std::size_t k, std::uint64_t seed,
                                   int max_iter = 200);

std::vector<Bucket> assign_buckets(std::size_t k, std::uint64_t seed);

SparseCodes sample_codes(std::size_t n, const std::vector<Bucket>& labels, const BucketSpecs& specs,
                         std::uint64_t seed);

/// S * A^T in double precision.
Matrix<double> clean_signal(const SparseCodes& codes, const Matrix<double>& a);

/// Adds iid Gaussian noise at the requested SNR. An infinite snr_db adds none.
Matrix<double> synthesize(const SparseCodes& codes, const Matrix<double>& a, double snr_db,
                          std::uint64_t seed);

double expected_l0(const std::vector<Bucket>& labels, const BucketSpecs& specs);

DatasetStats dataset_stats(const SynthGroundTruth& gt);

/// Full pipeline; `stats` (optional) also receives the measured SNR.
SynthGroundTruth generate_dataset(const SynthConfig& cfg, DatasetStats* stats = nullptr);

/// Empirical firing frequency of every ground-truth feature.
std::vector<double> feature_frequencies(const SparseCodes& codes);

}  // namespace sampled_sae
