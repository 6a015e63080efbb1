#include "sampled_sae/synthgen.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "sampled_sae/errors.hpp"
#include "sampled_sae/rng.hpp"

namespace sampled_sae {

std::string_view to_string(Bucket b) {
    switch (b) {
        case Bucket::LF_HA: return "LF+HA";
        case Bucket::HF_HA: return "HF+HA";
        case Bucket::LF_LA: return "LF+LA";
        case Bucket::HF_LA: return "HF+LA";
    }
    return "?";
}

BucketSpecs default_buckets() {
    return {{{Bucket::LF_HA, 0.02, 1.0},
             {Bucket::HF_HA, 0.20, 1.0},
             {Bucket::LF_LA, 0.02, 0.2},
             {Bucket::HF_LA, 0.20, 0.2}}};
}

double welch_bound(std::size_t d, std::size_t k) {
    if (k <= d || k < 2) return 0.0;
    const double dd = static_cast<double>(d), kk = static_cast<double>(k);
    return std::sqrt((kk - dd) / (dd * (kk - 1.0)));
}

namespace {

using EMat = Eigen::MatrixXd;

Matrix<double> from_eigen(const EMat& a) {
    Matrix<double> out(static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(a.cols()));
    for (Eigen::Index r = 0; r < a.rows(); ++r)
        for (Eigen::Index c = 0; c < a.cols(); ++c)
            out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = a(r, c);
    return out;
}

void normalize_columns(EMat& a) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const double n = a.col(c).norm();
        if (n > 0) a.col(c) /= n;
    }
}

// Orthonormal basis (thin Q) for the columns of a tall matrix.
EMat orthonormal_basis(const EMat& m) {
    Eigen::HouseholderQR<EMat> qr(m);
    return qr.householderQ() * EMat::Identity(m.rows(), m.cols());
}

double off_diagonal_max(const EMat& gram) {
    double mu = 0;
    for (Eigen::Index j = 0; j < gram.cols(); ++j)
        for (Eigen::Index i = 0; i < gram.rows(); ++i)
            if (i != j) mu = std::max(mu, std::abs(gram(i, j)));
    return mu;
}

template <typename T>
double coherence_impl(const Matrix<T>& a) {
    const std::size_t d = a.rows(), k = a.cols();
    if (k < 2) return 0.0;
    // Columns as contiguous rows.
    Matrix<double> cols(k, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k; ++j) cols(j, i) = a(i, j);
    double mu = 0;
#pragma omp parallel for schedule(dynamic, 16) reduction(max : mu)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(k); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const auto ci = cols.row(i);
        for (std::size_t j = i + 1; j < k; ++j) {
            const auto cj = cols.row(j);
            double dot = 0;
            for (std::size_t t = 0; t < d; ++t) dot += ci[t] * cj[t];
            mu = std::max(mu, std::abs(dot));
        }
    }
    return mu;
}

}  // namespace

double mutual_coherence(const Matrix<double>& a) { return coherence_impl(a); }
double mutual_coherence(const Matrix<float>& a) { return coherence_impl(a); }

Matrix<double> generate_dictionary(std::size_t d, std::size_t k, std::uint64_t seed, int max_iter) {
    if (d < 1 || k < 1) throw ConfigError("generate_dictionary: d and k must be >= 1");
    const auto dd = static_cast<Eigen::Index>(d), kk = static_cast<Eigen::Index>(k);

    Rng rng = stream_rng(seed, streams::kDictionary);
    std::normal_distribution<double> normal(0.0, 1.0);
    EMat a(dd, kk);
    for (Eigen::Index c = 0; c < kk; ++c)
        for (Eigen::Index r = 0; r < dd; ++r) a(r, c) = normal(rng);
    normalize_columns(a);

    if (k <= d) {
        Eigen::HouseholderQR<EMat> qr(a);
        EMat q = qr.householderQ() * EMat::Identity(dd, kk);
        normalize_columns(q);
        return from_eigen(q);
    }

    const double welch = welch_bound(d, k);
    EMat best = a;
    double best_mu = off_diagonal_max(a.transpose() * a);
    constexpr int kPatience = 10;
    constexpr int kSubspaceSweeps = 1;
    constexpr double kMinGain = 1e-4;
    double mu_at_check = best_mu;
    EMat basis = orthonormal_basis(a.transpose());

    for (int it = 0; it < max_iter; ++it) {
        EMat gram = a.transpose() * a;
        const double mu = off_diagonal_max(gram);
        // Project onto the set of Gram matrices with coherence <= target.
        const double target = std::max(welch, 0.9 * mu);
        for (Eigen::Index j = 0; j < kk; ++j)
            for (Eigen::Index i = 0; i < kk; ++i) {
                if (i == j) {
                    gram(i, j) = 1.0;
                } else {
                    gram(i, j) = std::clamp(gram(i, j), -target, target);
                }
            }
        // Nearest rank-d PSD factor from the top-d eigenpairs. The shrunk Gram
        // is a small perturbation of the previous one, so a few sweeps of
        // subspace iteration from the previous eigenbasis plus a Rayleigh-Ritz
        // step recover them without a full k x k eigensolve.
        for (int sweep = 0; sweep < kSubspaceSweeps; ++sweep) basis = orthonormal_basis(gram * basis);
        Eigen::SelfAdjointEigenSolver<EMat> ritz(basis.transpose() * gram * basis);
        const Eigen::VectorXd vals = ritz.eigenvalues().cwiseMax(0.0);
        basis = basis * ritz.eigenvectors();
        a = vals.cwiseSqrt().asDiagonal() * basis.transpose();
        normalize_columns(a);

        const double mu_new = off_diagonal_max(a.transpose() * a);
        if (mu_new < best_mu) {
            best_mu = mu_new;
            best = a;
        }
        if ((it + 1) % kPatience == 0) {
            if (mu_at_check - best_mu < kMinGain) break;
            mu_at_check = best_mu;
        }
    }
    return from_eigen(best);
}

std::vector<Bucket> assign_buckets(std::size_t k, std::uint64_t seed) {
    if (k < kNumBuckets) throw ConfigError("assign_buckets: need at least 4 features");
    Rng rng = stream_rng(seed, streams::kBuckets);
    std::vector<Bucket> labels(k);
    for (auto& l : labels) {
        const auto b = std::min<std::size_t>(static_cast<std::size_t>(uniform01(rng) * kNumBuckets),
                                             kNumBuckets - 1);
        l = static_cast<Bucket>(b);
    }
    return labels;
}

SparseCodes sample_codes(std::size_t n, const std::vector<Bucket>& labels, const BucketSpecs& specs,
                         std::uint64_t seed) {
    const std::size_t k = labels.size();
    std::vector<double> p(k), sigma(k);
    for (std::size_t j = 0; j < k; ++j) {
        const auto& s = specs[static_cast<std::size_t>(labels[j])];
        if (!(s.p >= 0 && s.p <= 1) || !(s.sigma > 0)) throw ConfigError("invalid bucket spec");
        p[j] = s.p;
        sigma[j] = s.sigma;
    }
    std::vector<std::vector<SparseEntry>> per_row(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(n); ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        Rng rng = stream_rng(seed, streams::kCodes, r);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto& row = per_row[r];
        for (std::size_t j = 0; j < k; ++j) {
            if (uniform01(rng) < p[j]) {
                const double v = sigma[j] * normal(rng);
                row.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(j),
                               static_cast<float>(v)});
            }
        }
    }
    SparseCodes out{n, k, {}};
    std::size_t total = 0;
    for (const auto& row : per_row) total += row.size();
    out.entries.reserve(total);
    for (const auto& row : per_row) out.entries.insert(out.entries.end(), row.begin(), row.end());
    return out;
}

Matrix<double> clean_signal(const SparseCodes& codes, const Matrix<double>& a) {
    if (a.cols() != codes.cols) throw ConfigError("codes and dictionary disagree on k");
    const std::size_t d = a.rows();
    Matrix<double> at(a.cols(), d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) at(j, i) = a(i, j);
    Matrix<double> out(codes.rows, d);
    for (const auto& e : codes.entries) {
        auto dst = out.row(e.row);
        const auto atom = at.row(e.col);
        for (std::size_t i = 0; i < d; ++i) dst[i] += static_cast<double>(e.value) * atom[i];
    }
    return out;
}

namespace {

double mean_square(const Matrix<double>& m) {
    double s = 0;
    for (const double v : m.flat()) s += v * v;
    return m.size() ? s / static_cast<double>(m.size()) : 0.0;
}

Matrix<double> noise_for(std::size_t n, std::size_t d, double variance, std::uint64_t seed) {
    Matrix<double> noise(n, d);
    const double sd = std::sqrt(variance);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(n); ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        Rng rng = stream_rng(seed, streams::kNoise, r);
        std::normal_distribution<double> normal(0.0, sd);
        for (std::size_t i = 0; i < d; ++i) noise(r, i) = normal(rng);
    }
    return noise;
}

}  // namespace

Matrix<double> synthesize(const SparseCodes& codes, const Matrix<double>& a, double snr_db,
                          std::uint64_t seed) {
    Matrix<double> x = clean_signal(codes, a);
    const double power = mean_square(x);
    if (!(power > 0)) throw InputError("synthesize: clean signal is identically zero, SNR undefined");
    if (std::isinf(snr_db) && snr_db > 0) return x;
    const double variance = power / std::pow(10.0, snr_db / 10.0);
    const auto noise = noise_for(x.rows(), x.cols(), variance, seed);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += noise.data()[i];
    return x;
}

double expected_l0(const std::vector<Bucket>& labels, const BucketSpecs& specs) {
    double s = 0;
    for (const auto b : labels) s += specs[static_cast<std::size_t>(b)].p;
    return s;
}

std::vector<double> feature_frequencies(const SparseCodes& codes) {
    std::vector<double> freq(codes.cols, 0.0);
    for (const auto& e : codes.entries)
        if (e.value != 0.0f) freq[e.col] += 1.0;
    if (codes.rows > 0)
        for (double& f : freq) f /= static_cast<double>(codes.rows);
    return freq;
}

DatasetStats dataset_stats(const SynthGroundTruth& gt) {
    DatasetStats st;
    const std::size_t d = gt.dictionary.rows(), k = gt.dictionary.cols();
    st.coherence = mutual_coherence(gt.dictionary);
    st.welch_bound = welch_bound(d, k);
    st.expected_l0 = expected_l0(gt.labels, gt.buckets);
    std::size_t active = 0;
    std::array<double, kNumBuckets> sum{}, sumsq{};
    std::array<std::size_t, kNumBuckets> nact{};
    for (const auto& e : gt.codes.entries) {
        if (e.value == 0.0f) continue;
        ++active;
        const auto b = static_cast<std::size_t>(gt.labels[e.col]);
        const double v = std::abs(static_cast<double>(e.value));
        sum[b] += v;
        sumsq[b] += v * v;
        ++nact[b];
    }
    st.observed_l0 = gt.codes.rows ? static_cast<double>(active) / static_cast<double>(gt.codes.rows) : 0.0;
    for (const auto l : gt.labels) ++st.counts[static_cast<std::size_t>(l)];
    for (std::size_t b = 0; b < kNumBuckets; ++b) {
        if (nact[b] == 0) continue;
        const double n = static_cast<double>(nact[b]);
        st.mean_abs[b] = sum[b] / n;
        st.std_abs[b] = nact[b] > 1 ? std::sqrt(std::max(0.0, (sumsq[b] - n * st.mean_abs[b] * st.mean_abs[b]) / (n - 1)))
                                    : 0.0;
    }
    return st;
}

SynthGroundTruth generate_dataset(const SynthConfig& cfg, DatasetStats* stats) {
    if (cfg.d < 1 || cfg.k < kNumBuckets || cfg.n < 1) throw ConfigError("invalid synthetic dataset shape");
    SynthGroundTruth gt;
    gt.seed = cfg.seed;
    gt.snr_db = cfg.snr_db;
    gt.buckets = cfg.buckets;

    const auto a = generate_dictionary(cfg.d, cfg.k, cfg.seed, cfg.coherence_iters);
    gt.dictionary = matrix_cast<float>(a);
    gt.labels = assign_buckets(cfg.k, cfg.seed);
    gt.codes = sample_codes(cfg.n, gt.labels, cfg.buckets, cfg.seed);

    const auto clean = clean_signal(gt.codes, a);
    const auto x = synthesize(gt.codes, a, cfg.snr_db, cfg.seed);
    gt.x = matrix_cast<float>(x);

    if (stats != nullptr) {
        *stats = dataset_stats(gt);
        double ps = 0, pn = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double c = clean.data()[i], e = x.data()[i] - c;
            ps += c * c;
            pn += e * e;
        }
        stats->snr_db = pn > 0 ? 10.0 * std::log10(ps / pn) : std::numeric_limits<double>::infinity();
    }
    return gt;
}

}  // namespace sampled_sae
