#pragma once

// Reconstruction, density and dictionary-recovery metrics that need nothing
// beyond the codes, the decoder and the synthetic ground truth.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sampled_sae/matrix.hpp"
#include "sampled_sae/synthgen.hpp"

namespace sampled_sae {

/// ||X - X_hat||_F^2 / ||X - colmean(X)||_F^2. Throws UndefinedMetric when X
/// is constant.
template <typename T>
double fvu(const Matrix<T>& x, const Matrix<T>& x_hat);

struct DensityResult {
    double density_frac = 0;          // fraction of features with frequency > cutoff
    std::vector<double> frequencies;  // per feature
};

template <typename T>
DensityResult feature_density(const Matrix<T>& codes, double cutoff = 0.10);

// --- linear assignment -----------------------------------------------------

/// Minimum-cost assignment of every row of a rows <= cols cost matrix to a
/// distinct column (shortest augmenting paths, O(rows^2 * cols)). When
/// rows > cols the problem is solved on the transpose and every column is
/// assigned instead. Result[r] is the column for row r, or -1.
std::vector<int> solve_assignment(const Matrix<double>& cost);

struct MatchResult {
    /// For each learned feature, the matched ground-truth feature or -1.
    std::vector<int> learned_to_true;
    /// For each ground-truth feature, the matched learned feature or -1.
    std::vector<int> true_to_learned;
    /// |cos| of each ground-truth feature's match (0 if unmatched).
    std::vector<double> similarity;
    std::vector<int> unmatched_learned;
    std::vector<int> unmatched_true;

    double total_similarity() const;
};

/// Maximises the summed |cosine| between decoder rows (m x d) and dictionary
/// columns (d x k) over min(m, k) one-to-one pairs.
MatchResult hungarian_match(const Matrix<float>& w_dec, const Matrix<float>& dictionary);

/// Greedy pairing by descending |cos|; a baseline for the optimal matcher.
double greedy_match_total(const Matrix<float>& w_dec, const Matrix<float>& dictionary);

/// Per bucket, the fraction of ground-truth features whose match has
/// similarity >= threshold.
std::array<double, kNumBuckets> bucket_recovery(const MatchResult& match,
                                                const std::vector<Bucket>& labels,
                                                double threshold = 0.7);

/// Pearson correlation. Throws UndefinedMetric for fewer than two points or a
/// constant vector.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// Correlation between learned and true firing frequencies over the matched
/// pairs with similarity >= threshold.
double frequency_correlation(const MatchResult& match, const std::vector<double>& learned_freq,
                             const std::vector<double>& true_freq, double threshold = 0.7);

/// Mean over rows of `a` of the best cosine similarity against rows of `b`.
double mmcs(const Matrix<float>& a, const Matrix<float>& b);

struct BestMatch {
    std::size_t feature = 0;  // row of W_a
    std::size_t best = 0;     // row of W_b
    double cosine = 0;
};

/// Best decoder match in `b` for every row of `a`, sorted by ascending cosine
/// (ties by feature index) so the least-shared features come first.
std::vector<BestMatch> best_match_report(const Matrix<float>& a, const Matrix<float>& b);


struct EvalReport {
    double fvu = 0;
    double fve = 0;
    double mean_l0 = 0;
    double density_frac = 0;
    std::array<double, kNumBuckets> per_bucket_recovery{};
    std::optional<double> freq_corr;  // empty when undefined
    double mmcs = 0;                  // against the ground-truth dictionary
    double dead_frac = 0;
};

}  // namespace sampled_sae
