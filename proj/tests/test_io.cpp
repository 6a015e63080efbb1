#include <doctest.h>

#include <cstring>
#include <random>

#include "sampled_sae/errors.hpp"
#include "sampled_sae/io.hpp"
#include "test_util.hpp"

using namespace sampled_sae;

namespace {

SynthGroundTruth small_dataset(std::uint64_t seed = 0) {
    SynthConfig cfg;
    cfg.d = 8;
    cfg.k = 24;
    cfg.n = 300;
    cfg.seed = seed;
    cfg.coherence_iters = 10;
    return generate_dataset(cfg);
}

Checkpoint small_checkpoint() {
    std::mt19937_64 rng(1);
    Checkpoint c;
    c.gate.input_dim = 6;
    c.gate.dict_size = 10;
    c.gate.k = 2;
    c.gate.ell = 2.5;
    c.gate.rule = ScoringRule::Entropy;
    c.train.steps = 123;
    c.train.lr = 1.234567890123e-3;
    c.train.seed = 77;
    c.state.params = testutil::random_params<float>(10, 6, rng);
    c.state.params.theta = 0.3125f;
    c.state.opt = OptState<float>::fresh(c.state.params);
    for (auto& v : c.state.opt.m1.w_enc.flat()) v = static_cast<float>(rng() % 1000) * 1e-3f;
    for (auto& v : c.state.opt.m2.b_dec) v = static_cast<float>(rng() % 1000) * 1e-7f;
    c.state.opt.step = 41;
    c.state.opt.last_fired = {0, 3, 41, 40, 7, 0, 1, 2, 39, 41};
    c.state.opt.threshold.started = true;
    c.state.opt.threshold.value = 0.12345678901234567;
    return c;
}

}  // namespace

TEST_CASE("config JSON round-trips and fills missing fields from defaults") {
    GateConfig g;
    g.ell = 3.25;
    g.rule = ScoringRule::SquaredL2;
    CHECK(nlohmann::json(g).get<GateConfig>() == g);
    TrainConfig t;
    t.lr = 1e-3;
    t.seed = 9;
    CHECK(nlohmann::json(t).get<TrainConfig>() == t);
    SynthConfig s;
    s.buckets[2].p = 0.5;
    CHECK(nlohmann::json(s).get<SynthConfig>() == s);
    CHECK(nlohmann::json::parse(R"({"k": 4})").get<GateConfig>().dict_size == GateConfig{}.dict_size);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"rule": "nope"})").get<GateConfig>(), ConfigError);
}

TEST_CASE("dataset encode/decode is bit exact and files are deterministic") {
    testutil::TempDir dir("io_dataset");
    const auto gt = small_dataset();
    const auto back = decode_dataset(encode_dataset(gt));
    CHECK(back.dictionary == gt.dictionary);
    CHECK(back.labels == gt.labels);
    CHECK(back.codes == gt.codes);
    CHECK(back.x == gt.x);
    CHECK(back.seed == gt.seed);
    save_dataset(dir / "a.ssyn", gt);
    save_dataset(dir / "b.ssyn", small_dataset());
    CHECK(read_file(dir / "a.ssyn") == read_file(dir / "b.ssyn"));
    CHECK(load_dataset(dir / "a.ssyn").x == gt.x);
}

TEST_CASE("dataset header layout") {
    const auto bytes = encode_dataset(small_dataset());
    REQUIRE(bytes.size() > 40);
    CHECK(bytes.substr(0, 4) == "SSYN");
    std::uint32_t version;
    std::uint64_t d, k, n;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&d, bytes.data() + 8, 8);
    std::memcpy(&k, bytes.data() + 16, 8);
    std::memcpy(&n, bytes.data() + 24, 8);
    CHECK(version == kDatasetVersion);
    CHECK(d == 8);
    CHECK(k == 24);
    CHECK(n == 300);
}

TEST_CASE("dataset decode rejects corrupt input") {
    auto bytes = encode_dataset(small_dataset());
    CHECK_THROWS_AS(decode_dataset("XXXX" + bytes.substr(4)), FormatError);
    CHECK_THROWS_AS(decode_dataset(bytes.substr(0, bytes.size() - 1)), FormatError);
    CHECK_THROWS_AS(decode_dataset(bytes + "z"), FormatError);
    auto bad = bytes;
    bad[4] = 9;
    CHECK_THROWS_AS(decode_dataset(bad), FormatError);
}

TEST_CASE("checkpoint round trip is bit exact") {
    testutil::TempDir dir("io_ckpt");
    const auto c = small_checkpoint();
    save_checkpoint(dir / "c.ssae", c);
    const auto back = load_checkpoint(dir / "c.ssae");
    CHECK(back.gate == c.gate);
    CHECK(back.train == c.train);
    CHECK(back.state.params == c.state.params);
    CHECK(back.state.opt == c.state.opt);
    CHECK(encode_checkpoint(back) == encode_checkpoint(c));
}

TEST_CASE("checkpoint layout starts with magic, version and dims") {
    const auto bytes = encode_checkpoint(small_checkpoint());
    CHECK(bytes.substr(0, 4) == "SSAE");
    std::uint32_t version;
    std::uint64_t d, m;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&d, bytes.data() + 8, 8);
    std::memcpy(&m, bytes.data() + 16, 8);
    CHECK(version == kCheckpointVersion);
    CHECK(d == 6);
    CHECK(m == 10);
    float w0;
    std::memcpy(&w0, bytes.data() + 24, 4);
    CHECK(w0 == small_checkpoint().state.params.w_enc(0, 0));
}

TEST_CASE("checkpoint loading fails loudly on mismatch or corruption") {
    testutil::TempDir dir("io_ckpt_bad");
    const auto c = small_checkpoint();
    save_checkpoint(dir / "c.ssae", c);
    CHECK_NOTHROW(load_checkpoint(dir / "c.ssae", c.gate));
    auto other = c.gate;
    other.ell = 3;
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ssae", other), ConfigError);
    other = c.gate;
    other.rule = ScoringRule::L2Norm;
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ssae", other), ConfigError);

    const auto bytes = encode_checkpoint(c);
    auto bad = bytes;
    bad[4] = 2;
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
    CHECK_THROWS_AS(decode_checkpoint("SSYN" + bytes.substr(4)), FormatError);
    bad = bytes;
    bad[bad.size() - 2] = '#';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
}

TEST_CASE("write_file_atomic replaces content and leaves no temp files") {
    testutil::TempDir dir("io_atomic");
    write_file_atomic(dir / "sub/f.txt", "one");
    write_file_atomic(dir / "sub/f.txt", "two");
    CHECK(read_file(dir / "sub/f.txt") == "two");
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "sub")) {
        (void)e;
        ++files;
    }
    CHECK(files == 1);
}
