#pragma once

// Dense data-parallel kernels behind the SAE forward and backward passes.
//
// Every kernel exists twice: `serial::` is the direct loop transcription of
// the formula and is kept as the reference for tests, `parallel::` is the
// OpenMP version used by the library. Each output element is produced by a
// single thread with the same summation order as the reference, so the two
// agree bit for bit regardless of the thread count.

#include <cstddef>
#include <span>
#include <vector>

#include "sampled_sae/matrix.hpp"

namespace sampled_sae::kernels {

enum class ColumnScore { L2Norm, SquaredL2, NegEntropy };

namespace serial {

/// Z[b,j] = max(0, sum_i W[j,i] * (X[b,i] - center[i]) + bias[j]).
template <typename T>
Matrix<T> encode_relu(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias,
                      std::span<const T> center);

/// Y[b,i] = sum_j F[b,j] * W[j,i] + bias[i].
template <typename T>
Matrix<T> decode(const Matrix<T>& f, const Matrix<T>& w, std::span<const T> bias);

/// Per-column score of a nonnegative matrix; columns with zero mass score
/// -inf under NegEntropy.
template <typename T>
std::vector<double> column_scores(const Matrix<T>& z, ColumnScore kind, double ridge, double eps);

/// out[j,i] += sum_b (scale * A[b,j]) * R[b,i].
template <typename T>
void accumulate_atb(const Matrix<T>& a, const Matrix<T>& r, T scale, Matrix<T>& out);

/// D[b,j] += scale * <R[b,:], W[j,:]> wherever mask[b,j] != 0.
template <typename T>
void masked_row_dots(const Matrix<T>& r, const Matrix<T>& w, const Matrix<T>& mask, T scale,
                     Matrix<T>& d);

/// Per-row sum of squared differences, accumulated in double.
template <typename T>
std::vector<double> row_sq_diff(const Matrix<T>& a, const Matrix<T>& b);

}  // namespace serial

namespace parallel {

template <typename T>
Matrix<T> encode_relu(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias,
                      std::span<const T> center);
template <typename T>
Matrix<T> decode(const Matrix<T>& f, const Matrix<T>& w, std::span<const T> bias);
template <typename T>
std::vector<double> column_scores(const Matrix<T>& z, ColumnScore kind, double ridge, double eps);
template <typename T>
void accumulate_atb(const Matrix<T>& a, const Matrix<T>& r, T scale, Matrix<T>& out);
template <typename T>
void masked_row_dots(const Matrix<T>& r, const Matrix<T>& w, const Matrix<T>& mask, T scale,
                     Matrix<T>& d);
template <typename T>
std::vector<double> row_sq_diff(const Matrix<T>& a, const Matrix<T>& b);

}  // namespace parallel

/// Caps OpenMP parallelism from SAMPLED_SAE_THREADS when it is set.
void configure_threads_from_env();

int max_threads();

}  // namespace sampled_sae::kernels
