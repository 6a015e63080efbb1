#include <doctest.h>

#include <cstring>
#include <random>

#include "sampled_sae/kernels.hpp"
#include "test_util.hpp"

using namespace sampled_sae;
namespace K = sampled_sae::kernels;

namespace {

template <typename T>
Matrix<T> relu_sparse(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    auto m = testutil::random_matrix<T>(r, c, rng);
    for (auto& v : m.flat())
        if (v < T(0.3)) v = T(0);
    return m;
}

template <typename T>
void check_kernels_agree(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = 1 + rng() % 37, d = 1 + rng() % 29, m = 1 + rng() % 71;
    const auto x = testutil::random_matrix<T>(b, d, rng);
    const auto w = testutil::random_matrix<T>(m, d, rng);
    const auto bias = testutil::random_vector<T>(m, rng);
    const auto center = testutil::random_vector<T>(d, rng);
    const auto dbias = testutil::random_vector<T>(d, rng);

    CHECK(K::serial::encode_relu<T>(x, w, bias, center) == K::parallel::encode_relu<T>(x, w, bias, center));

    const auto f = relu_sparse<T>(b, m, rng);
    CHECK(K::serial::decode<T>(f, w, dbias) == K::parallel::decode<T>(f, w, dbias));

    for (auto kind : {K::ColumnScore::L2Norm, K::ColumnScore::SquaredL2, K::ColumnScore::NegEntropy}) {
        const auto s = K::serial::column_scores<T>(f, kind, 0.01, 1e-8);
        const auto p = K::parallel::column_scores<T>(f, kind, 0.01, 1e-8);
        REQUIRE(s.size() == p.size());
        for (std::size_t j = 0; j < s.size(); ++j) CHECK(std::memcmp(&s[j], &p[j], sizeof(double)) == 0);
    }

    const auto r = testutil::random_matrix<T>(b, d, rng);
    Matrix<T> o1 = testutil::random_matrix<T>(m, d, rng), o2 = o1;
    K::serial::accumulate_atb<T>(f, r, T(0.7), o1);
    K::parallel::accumulate_atb<T>(f, r, T(0.7), o2);
    CHECK(o1 == o2);

    Matrix<T> d1(b, m), d2(b, m);
    K::serial::masked_row_dots<T>(r, w, f, T(1.3), d1);
    K::parallel::masked_row_dots<T>(r, w, f, T(1.3), d2);
    CHECK(d1 == d2);

    CHECK(K::serial::row_sq_diff<T>(x, r) == K::parallel::row_sq_diff<T>(x, r));
}

}  // namespace

TEST_CASE("parallel kernels reproduce the serial reference bit for bit") {
    for (std::uint64_t s = 0; s < 40; ++s) {
        check_kernels_agree<float>(s);
        check_kernels_agree<double>(1000 + s);
    }
}

TEST_CASE("encode_relu matches a naive triple loop") {
    std::mt19937_64 rng(3);
    const auto x = testutil::random_matrix<double>(5, 7, rng);
    const auto w = testutil::random_matrix<double>(9, 7, rng);
    const auto bias = testutil::random_vector<double>(9, rng);
    const auto center = testutil::random_vector<double>(7, rng);
    const auto z = K::serial::encode_relu<double>(x, w, bias, center);
    for (std::size_t b = 0; b < 5; ++b)
        for (std::size_t j = 0; j < 9; ++j) {
            double s = bias[j];
            for (std::size_t i = 0; i < 7; ++i) s += w(j, i) * (x(b, i) - center[i]);
            CHECK(z(b, j) == doctest::Approx(std::max(0.0, s)).epsilon(1e-12));
        }
}

TEST_CASE("accumulate_atb adds the scaled transpose product") {
    Matrix<double> a(2, 2, std::vector<double>{1, 0, 2, 3});
    Matrix<double> r(2, 1, std::vector<double>{1, 10});
    Matrix<double> out(2, 1, std::vector<double>{100, 200});
    K::serial::accumulate_atb<double>(a, r, 0.5, out);
    CHECK(out(0, 0) == 100 + 0.5 * (1 * 1 + 2 * 10));
    CHECK(out(1, 0) == 200 + 0.5 * (3 * 10));
}

TEST_CASE("negative entropy scores all-zero columns at -inf") {
    Matrix<double> z(3, 2, std::vector<double>{0, 1, 0, 0, 0, 0});
    const auto q = K::serial::column_scores<double>(z, K::ColumnScore::NegEntropy, 0.0, 1e-8);
    CHECK(q[0] == -std::numeric_limits<double>::infinity());
    CHECK(q[1] == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("at least one worker thread is available") {
    CHECK(K::max_threads() >= 1);
}
