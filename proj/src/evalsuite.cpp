#include "sampled_sae/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "sampled_sae/errors.hpp"

namespace sampled_sae {

template <typename T>
double fvu(const Matrix<T>& x, const Matrix<T>& x_hat) {
    if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw ConfigError("fvu: shape mismatch");
    if (x.rows() == 0) throw UndefinedMetric("fvu: empty input");
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) mean[i] += static_cast<double>(x(r, i));
    for (double& v : mean) v /= static_cast<double>(n);
    double num = 0, den = 0;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) {
            const double e = static_cast<double>(x(r, i)) - static_cast<double>(x_hat(r, i));
            const double c = static_cast<double>(x(r, i)) - mean[i];
            num += e * e;
            den += c * c;
        }
    if (!(den > 0)) throw UndefinedMetric("fvu: input has zero variance");
    return num / den;
}

template <typename T>
DensityResult feature_density(const Matrix<T>& codes, double cutoff) {
    if (codes.rows() == 0) throw InputError("feature_density: no tokens");
    DensityResult out;
    out.frequencies.assign(codes.cols(), 0.0);
    for (std::size_t r = 0; r < codes.rows(); ++r)
        for (std::size_t j = 0; j < codes.cols(); ++j)
            if (codes(r, j) > T(0)) out.frequencies[j] += 1.0;
    std::size_t dense = 0;
    for (double& f : out.frequencies) {
        f /= static_cast<double>(codes.rows());
        if (f > cutoff) ++dense;
    }
    out.density_frac = codes.cols() ? static_cast<double>(dense) / static_cast<double>(codes.cols()) : 0.0;
    return out;
}

std::vector<int> solve_assignment(const Matrix<double>& cost) {
    if (cost.rows() == 0 || cost.cols() == 0) throw InputError("solve_assignment: empty cost matrix");
    if (cost.rows() > cost.cols()) {
        Matrix<double> t(cost.cols(), cost.rows());
        for (std::size_t r = 0; r < cost.rows(); ++r)
            for (std::size_t c = 0; c < cost.cols(); ++c) t(c, r) = cost(r, c);
        const auto col_to_row = solve_assignment(t);
        std::vector<int> out(cost.rows(), -1);
        for (std::size_t c = 0; c < col_to_row.size(); ++c)
            out[static_cast<std::size_t>(col_to_row[c])] = static_cast<int>(c);
        return out;
    }

    // Potentials-based shortest augmenting path; index 0 is a sentinel.
    const std::size_t n = cost.rows(), m = cost.cols();
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = kInf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> out(n, -1);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) out[p[j] - 1] = static_cast<int>(j - 1);
    return out;
}

namespace {

Matrix<float> transpose(const Matrix<float>& a) {
    Matrix<float> t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

std::vector<double> squared_norms(const Matrix<float>& w) {
    std::vector<double> out(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (const float v : w.row(r)) out[r] += static_cast<double>(v) * static_cast<double>(v);
    return out;
}

// cos[i][j] = <a_i, b_j> / sqrt(|a_i|^2 |b_j|^2). The dot product and the
// norms share one summation order and sqrt(x*x) == x in binary floating
// point, so a row compared with itself scores exactly 1.
Matrix<double> cosine_matrix(const Matrix<float>& a, const Matrix<float>& b) {
    if (a.cols() != b.cols()) throw ConfigError("cosine: dimension mismatch");
    const auto na = squared_norms(a), nb = squared_norms(b);
    Matrix<double> out(a.rows(), b.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(a.rows()); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const auto ra = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double den = std::sqrt(na[i] * nb[j]);
            if (!(den > 0)) {
                out(i, j) = 0.0;
                continue;
            }
            const auto rb = b.row(j);
            double dot = 0;
            for (std::size_t t = 0; t < ra.size(); ++t)
                dot += static_cast<double>(ra[t]) * static_cast<double>(rb[t]);
            out(i, j) = std::clamp(dot / den, -1.0, 1.0);
        }
    }
    return out;
}

}  // namespace

double MatchResult::total_similarity() const {
    double s = 0;
    for (std::size_t t = 0; t < true_to_learned.size(); ++t)
        if (true_to_learned[t] >= 0) s += similarity[t];
    return s;
}

MatchResult hungarian_match(const Matrix<float>& w_dec, const Matrix<float>& dictionary) {
    if (w_dec.rows() == 0 || dictionary.cols() == 0) throw InputError("hungarian_match: empty input");
    const auto cos = cosine_matrix(w_dec, transpose(dictionary));
    const std::size_t m = cos.rows(), k = cos.cols();
    Matrix<double> cost(m, k);
    for (std::size_t i = 0; i < cos.size(); ++i) cost.data()[i] = 1.0 - std::abs(cos.data()[i]);

    const auto assign = solve_assignment(cost);
    MatchResult res;
    res.learned_to_true.assign(m, -1);
    res.true_to_learned.assign(k, -1);
    res.similarity.assign(k, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const int t = assign[i];
        if (t < 0) continue;
        res.learned_to_true[i] = t;
        res.true_to_learned[static_cast<std::size_t>(t)] = static_cast<int>(i);
        res.similarity[static_cast<std::size_t>(t)] = std::abs(cos(i, static_cast<std::size_t>(t)));
    }
    for (std::size_t i = 0; i < m; ++i)
        if (res.learned_to_true[i] < 0) res.unmatched_learned.push_back(static_cast<int>(i));
    for (std::size_t t = 0; t < k; ++t)
        if (res.true_to_learned[t] < 0) res.unmatched_true.push_back(static_cast<int>(t));
    return res;
}

double greedy_match_total(const Matrix<float>& w_dec, const Matrix<float>& dictionary) {
    const auto cos = cosine_matrix(w_dec, transpose(dictionary));
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
    pairs.reserve(cos.size());
    for (std::size_t i = 0; i < cos.rows(); ++i)
        for (std::size_t j = 0; j < cos.cols(); ++j) pairs.emplace_back(-std::abs(cos(i, j)), i, j);
    std::sort(pairs.begin(), pairs.end());
    std::vector<char> used_l(cos.rows(), 0), used_t(cos.cols(), 0);
    double total = 0;
    for (const auto& [neg, i, j] : pairs) {
        if (used_l[i] || used_t[j]) continue;
        used_l[i] = used_t[j] = 1;
        total += -neg;
    }
    return total;
}

std::array<double, kNumBuckets> bucket_recovery(const MatchResult& match,
                                                const std::vector<Bucket>& labels, double threshold) {
    if (labels.size() != match.true_to_learned.size()) throw ConfigError("bucket_recovery: label count mismatch");
    std::array<std::size_t, kNumBuckets> hit{}, size{};
    for (std::size_t t = 0; t < labels.size(); ++t) {
        const auto b = static_cast<std::size_t>(labels[t]);
        ++size[b];
        if (match.true_to_learned[t] >= 0 && match.similarity[t] >= threshold) ++hit[b];
    }
    std::array<double, kNumBuckets> rate{};
    for (std::size_t b = 0; b < kNumBuckets; ++b)
        rate[b] = size[b] ? static_cast<double>(hit[b]) / static_cast<double>(size[b]) : 0.0;
    return rate;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ConfigError("pearson: length mismatch");
    if (a.size() < 2) throw UndefinedMetric("pearson: need at least two points");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0) || !(sbb > 0)) throw UndefinedMetric("pearson: constant vector");
    return sab / std::sqrt(saa * sbb);
}

double frequency_correlation(const MatchResult& match, const std::vector<double>& learned_freq,
                             const std::vector<double>& true_freq, double threshold) {
    std::vector<double> a, b;
    for (std::size_t t = 0; t < match.true_to_learned.size(); ++t) {
        const int l = match.true_to_learned[t];
        if (l < 0 || match.similarity[t] < threshold) continue;
        a.push_back(learned_freq.at(static_cast<std::size_t>(l)));
        b.push_back(true_freq.at(t));
    }
    return pearson(a, b);
}

double mmcs(const Matrix<float>& a, const Matrix<float>& b) {
    if (a.rows() == 0 || b.rows() == 0) throw InputError("mmcs: empty decoder");
    const auto cos = cosine_matrix(a, b);
    double total = 0;
    for (std::size_t i = 0; i < cos.rows(); ++i) {
        const auto row = cos.row(i);
        total += *std::max_element(row.begin(), row.end());
    }
    return total / static_cast<double>(cos.rows());
}

std::vector<BestMatch> best_match_report(const Matrix<float>& a, const Matrix<float>& b) {
    if (a.rows() == 0 || b.rows() == 0) throw InputError("best_match_report: empty decoder");
    const auto cos = cosine_matrix(a, b);
    std::vector<BestMatch> out(a.rows());
    for (std::size_t i = 0; i < cos.rows(); ++i) {
        const auto row = cos.row(i);
        const auto it = std::max_element(row.begin(), row.end());  // first maximum
        out[i] = {i, static_cast<std::size_t>(it - row.begin()), *it};
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const BestMatch& x, const BestMatch& y) { return x.cosine < y.cosine; });
    return out;
}

template double fvu<float>(const Matrix<float>&, const Matrix<float>&);
template double fvu<double>(const Matrix<double>&, const Matrix<double>&);
template DensityResult feature_density<float>(const Matrix<float>&, double);
template DensityResult feature_density<double>(const Matrix<double>&, double);

}  // namespace sampled_sae
