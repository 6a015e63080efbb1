#include "sampled_sae/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

namespace sampled_sae::kernels {

namespace {

constexpr std::size_t kColumnBlock = 64;

template <typename T>
double column_entropy_term(double v, double total, double eps) {
    const double q = v / total;
    return q * std::log(q + eps);
}

}  // namespace

void configure_threads_from_env() {
    if (const char* env = std::getenv("SAMPLED_SAE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
}

int max_threads() { return omp_get_max_threads(); }

// ---------------------------------------------------------------------------
// serial reference
// ---------------------------------------------------------------------------
namespace serial {

template <typename T>
Matrix<T> encode_relu(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias,
                      std::span<const T> center) {
    Matrix<T> z(x.rows(), w.rows());
    for (std::size_t b = 0; b < x.rows(); ++b) {
        for (std::size_t j = 0; j < w.rows(); ++j) {
            T acc = 0;
            for (std::size_t i = 0; i < x.cols(); ++i) acc += w(j, i) * (x(b, i) - center[i]);
            acc += bias[j];
            z(b, j) = acc > T(0) ? acc : T(0);
        }
    }
    return z;
}

template <typename T>
Matrix<T> decode(const Matrix<T>& f, const Matrix<T>& w, std::span<const T> bias) {
    Matrix<T> y(f.rows(), w.cols());
    for (std::size_t b = 0; b < f.rows(); ++b) {
        for (std::size_t i = 0; i < w.cols(); ++i) {
            T acc = 0;
            for (std::size_t j = 0; j < f.cols(); ++j) acc += f(b, j) * w(j, i);
            y(b, i) = acc + bias[i];
        }
    }
    return y;
}

template <typename T>
std::vector<double> column_scores(const Matrix<T>& z, ColumnScore kind, double ridge, double eps) {
    std::vector<double> q(z.cols());
    for (std::size_t j = 0; j < z.cols(); ++j) {
        if (kind == ColumnScore::NegEntropy) {
            double total = 0;
            for (std::size_t b = 0; b < z.rows(); ++b) total += z(b, j);
            if (!(total > 0)) {
                q[j] = -std::numeric_limits<double>::infinity();
                continue;
            }
            double s = 0;
            for (std::size_t b = 0; b < z.rows(); ++b)
                s += column_entropy_term<T>(static_cast<double>(z(b, j)), total, eps);
            q[j] = s;
        } else {
            double ss = 0;
            for (std::size_t b = 0; b < z.rows(); ++b) {
                const double v = z(b, j);
                ss += v * v;
            }
            q[j] = kind == ColumnScore::L2Norm ? std::sqrt(ss) : ss + ridge;
        }
    }
    return q;
}

template <typename T>
void accumulate_atb(const Matrix<T>& a, const Matrix<T>& r, T scale, Matrix<T>& out) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
        for (std::size_t i = 0; i < r.cols(); ++i) {
            T acc = out(j, i);
            for (std::size_t b = 0; b < a.rows(); ++b) {
                if (a(b, j) == T(0)) continue;
                acc += (scale * a(b, j)) * r(b, i);
            }
            out(j, i) = acc;
        }
    }
}

template <typename T>
void masked_row_dots(const Matrix<T>& r, const Matrix<T>& w, const Matrix<T>& mask, T scale,
                     Matrix<T>& d) {
    for (std::size_t b = 0; b < r.rows(); ++b) {
        for (std::size_t j = 0; j < w.rows(); ++j) {
            if (mask(b, j) == T(0)) continue;
            T acc = 0;
            for (std::size_t i = 0; i < r.cols(); ++i) acc += r(b, i) * w(j, i);
            d(b, j) += scale * acc;
        }
    }
}

template <typename T>
std::vector<double> row_sq_diff(const Matrix<T>& a, const Matrix<T>& b) {
    std::vector<double> out(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < a.cols(); ++c) {
            const double e = static_cast<double>(a(r, c)) - static_cast<double>(b(r, c));
            s += e * e;
        }
        out[r] = s;
    }
    return out;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP
// ---------------------------------------------------------------------------
namespace parallel {

template <typename T>
Matrix<T> encode_relu(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias,
                      std::span<const T> center) {
    const std::size_t rows = x.rows(), d = x.cols(), m = w.rows();
    Matrix<T> wt(d, m);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < d; ++i) wt(i, j) = w(j, i);

    Matrix<T> z(rows, m);
#pragma omp parallel
    {
        std::vector<T> xc(d);
#pragma omp for schedule(static)
        for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(rows); ++bi) {
            const auto b = static_cast<std::size_t>(bi);
            for (std::size_t i = 0; i < d; ++i) xc[i] = x(b, i) - center[i];
            T* acc = z.row(b).data();
            for (std::size_t i = 0; i < d; ++i) {
                const T xi = xc[i];
                const T* wrow = wt.row(i).data();
                for (std::size_t j = 0; j < m; ++j) acc[j] += wrow[j] * xi;
            }
            for (std::size_t j = 0; j < m; ++j) {
                const T v = acc[j] + bias[j];
                acc[j] = v > T(0) ? v : T(0);
            }
        }
    }
    return z;
}

template <typename T>
Matrix<T> decode(const Matrix<T>& f, const Matrix<T>& w, std::span<const T> bias) {
    const std::size_t rows = f.rows(), m = f.cols(), d = w.cols();
    Matrix<T> y(rows, d);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(rows); ++bi) {
        const auto b = static_cast<std::size_t>(bi);
        T* acc = y.row(b).data();
        for (std::size_t j = 0; j < m; ++j) {
            const T c = f(b, j);
            if (c == T(0)) continue;
            const T* wrow = w.row(j).data();
            for (std::size_t i = 0; i < d; ++i) acc[i] += c * wrow[i];
        }
        for (std::size_t i = 0; i < d; ++i) acc[i] = acc[i] + bias[i];
    }
    return y;
}

template <typename T>
std::vector<double> column_scores(const Matrix<T>& z, ColumnScore kind, double ridge, double eps) {
    const std::size_t rows = z.rows(), m = z.cols();
    std::vector<double> q(m);
    const std::size_t blocks = (m + kColumnBlock - 1) / kColumnBlock;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(blocks); ++blk) {
        const std::size_t j0 = static_cast<std::size_t>(blk) * kColumnBlock;
        const std::size_t j1 = std::min(m, j0 + kColumnBlock);
        double acc[kColumnBlock] = {};
        if (kind == ColumnScore::NegEntropy) {
            double total[kColumnBlock] = {};
            for (std::size_t b = 0; b < rows; ++b)
                for (std::size_t j = j0; j < j1; ++j) total[j - j0] += z(b, j);
            for (std::size_t b = 0; b < rows; ++b)
                for (std::size_t j = j0; j < j1; ++j)
                    if (total[j - j0] > 0)
                        acc[j - j0] += column_entropy_term<T>(static_cast<double>(z(b, j)),
                                                              total[j - j0], eps);
            for (std::size_t j = j0; j < j1; ++j)
                q[j] = total[j - j0] > 0 ? acc[j - j0] : -std::numeric_limits<double>::infinity();
        } else {
            for (std::size_t b = 0; b < rows; ++b)
                for (std::size_t j = j0; j < j1; ++j) {
                    const double v = z(b, j);
                    acc[j - j0] += v * v;
                }
            for (std::size_t j = j0; j < j1; ++j)
                q[j] = kind == ColumnScore::L2Norm ? std::sqrt(acc[j - j0]) : acc[j - j0] + ridge;
        }
    }
    return q;
}

template <typename T>
void accumulate_atb(const Matrix<T>& a, const Matrix<T>& r, T scale, Matrix<T>& out) {
    const std::size_t rows = a.rows(), m = a.cols(), d = r.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ji = 0; ji < static_cast<std::ptrdiff_t>(m); ++ji) {
        const auto j = static_cast<std::size_t>(ji);
        T* dst = out.row(j).data();
        for (std::size_t b = 0; b < rows; ++b) {
            const T c = a(b, j);
            if (c == T(0)) continue;
            const T s = scale * c;
            const T* src = r.row(b).data();
            for (std::size_t i = 0; i < d; ++i) dst[i] += s * src[i];
        }
    }
}

template <typename T>
void masked_row_dots(const Matrix<T>& r, const Matrix<T>& w, const Matrix<T>& mask, T scale,
                     Matrix<T>& d) {
    const std::size_t rows = r.rows(), m = w.rows(), dim = r.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(rows); ++bi) {
        const auto b = static_cast<std::size_t>(bi);
        const T* rrow = r.row(b).data();
        for (std::size_t j = 0; j < m; ++j) {
            if (mask(b, j) == T(0)) continue;
            const T* wrow = w.row(j).data();
            T acc = 0;
            for (std::size_t i = 0; i < dim; ++i) acc += rrow[i] * wrow[i];
            d(b, j) += scale * acc;
        }
    }
}

template <typename T>
std::vector<double> row_sq_diff(const Matrix<T>& a, const Matrix<T>& b) {
    std::vector<double> out(a.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(a.rows()); ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        double s = 0;
        for (std::size_t c = 0; c < a.cols(); ++c) {
            const double e = static_cast<double>(a(r, c)) - static_cast<double>(b(r, c));
            s += e * e;
        }
        out[r] = s;
    }
    return out;
}

}  // namespace parallel

#define SAMPLED_SAE_INSTANTIATE(NS, T)                                                          \
    template Matrix<T> NS::encode_relu<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>, \
                                          std::span<const T>);                                  \
    template Matrix<T> NS::decode<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>);     \
    template std::vector<double> NS::column_scores<T>(const Matrix<T>&, ColumnScore, double,     \
                                                      double);                                  \
    template void NS::accumulate_atb<T>(const Matrix<T>&, const Matrix<T>&, T, Matrix<T>&);       \
    template void NS::masked_row_dots<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, T, \
                                         Matrix<T>&);                                           \
    template std::vector<double> NS::row_sq_diff<T>(const Matrix<T>&, const Matrix<T>&);

SAMPLED_SAE_INSTANTIATE(serial, float)
SAMPLED_SAE_INSTANTIATE(serial, double)
SAMPLED_SAE_INSTANTIATE(parallel, float)
SAMPLED_SAE_INSTANTIATE(parallel, double)

#undef SAMPLED_SAE_INSTANTIATE

}  // namespace sampled_sae::kernels
