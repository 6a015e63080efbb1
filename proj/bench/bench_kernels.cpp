// Serial reference vs OpenMP kernels on SAE-shaped problems.
//
//   bench_kernels [batch] [d] [m] [reps]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <random>

#include "sampled_sae/kernels.hpp"
#include "sampled_sae/sae_core.hpp"

using namespace sampled_sae;
namespace ser = kernels::serial;
namespace par = kernels::parallel;

namespace {

using Clock = std::chrono::steady_clock;

template <typename Fn>
double time_ms(Fn&& fn, int reps) {
    fn();  // warm-up
    const auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) fn();
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / reps;
}

Matrix<float> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<float> n(0.f, 1.f);
    Matrix<float> m(r, c);
    for (auto& v : m.flat()) v = n(rng);
    return m;
}

void report(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-18s serial %9.3f ms   openmp %9.3f ms   speedup %5.2fx\n", name, serial_ms, parallel_ms,
                serial_ms / parallel_ms);
}

}  // namespace

int main(int argc, char** argv) {
    kernels::configure_threads_from_env();
    const std::size_t batch = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 1024;
    const std::size_t d = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 64;
    const std::size_t m = argc > 3 ? std::strtoul(argv[3], nullptr, 10) : 256;
    const int reps = argc > 4 ? std::atoi(argv[4]) : 10;
    std::printf("batch=%zu d=%zu m=%zu threads=%d\n", batch, d, m, kernels::max_threads());

    std::mt19937_64 rng(42);
    const auto x = random_matrix(batch, d, rng);
    const auto w = random_matrix(m, d, rng);
    std::vector<float> b_enc(m, 0.1f), b_dec(d, 0.0f);

    report("encode_relu", time_ms([&] { (void)ser::encode_relu<float>(x, w, b_enc, b_dec); }, reps),
           time_ms([&] { (void)par::encode_relu<float>(x, w, b_enc, b_dec); }, reps));

    const auto z = par::encode_relu<float>(x, w, b_enc, b_dec);
    const auto f = batch_topk(z, 8);
    report("decode (sparse)", time_ms([&] { (void)ser::decode<float>(f, w, b_dec); }, reps),
           time_ms([&] { (void)par::decode<float>(f, w, b_dec); }, reps));

    for (const auto kind : {kernels::ColumnScore::L2Norm, kernels::ColumnScore::NegEntropy}) {
        report(kind == kernels::ColumnScore::L2Norm ? "scores l2" : "scores entropy",
               time_ms([&] { (void)ser::column_scores(z, kind, 0.01, 1e-8); }, reps),
               time_ms([&] { (void)par::column_scores(z, kind, 0.01, 1e-8); }, reps));
    }

    const auto r = random_matrix(batch, d, rng);
    Matrix<float> out(m, d);
    report("accumulate_atb", time_ms([&] { ser::accumulate_atb(f, r, 1.f, out); }, reps),
           time_ms([&] { par::accumulate_atb(f, r, 1.f, out); }, reps));
    Matrix<float> dots(batch, m);
    report("masked_row_dots", time_ms([&] { ser::masked_row_dots(r, w, f, 1.f, dots); }, reps),
           time_ms([&] { par::masked_row_dots(r, w, f, 1.f, dots); }, reps));

    report("batch_topk", time_ms([&] { (void)batch_topk(z, 8); }, reps), time_ms([&] { (void)batch_topk(z, 8); }, reps));
    return 0;
}
