#include "sampled_sae/io.hpp"

#include <bit>
#include <cmath>
#include <span>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "sampled_sae/errors.hpp"

namespace sampled_sae {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using nlohmann::json;

// --- JSON ------------------------------------------------------------------

void to_json(json& j, const GateConfig& c) {
    j = json{{"input_dim", c.input_dim}, {"dict_size", c.dict_size}, {"k", c.k},
             {"ell", c.ell},             {"rule", std::string(to_string(c.rule))},
             {"ridge", c.ridge},         {"aux_weight", c.aux_weight},
             {"k_aux", c.k_aux},         {"entropy_eps", c.entropy_eps}};
}

void from_json(const json& j, GateConfig& c) {
    c.input_dim = j.value("input_dim", c.input_dim);
    c.dict_size = j.value("dict_size", c.dict_size);
    c.k = j.value("k", c.k);
    c.ell = j.value("ell", c.ell);
    if (j.contains("rule")) c.rule = parse_scoring_rule(j.at("rule").get<std::string>());
    c.ridge = j.value("ridge", c.ridge);
    c.aux_weight = j.value("aux_weight", c.aux_weight);
    c.k_aux = j.value("k_aux", c.k_aux);
    c.entropy_eps = j.value("entropy_eps", c.entropy_eps);
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"steps", c.steps},
             {"batch_size", c.batch_size},
             {"lr", c.lr},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"adam_eps", c.adam_eps},
             {"grad_clip", c.grad_clip},
             {"warmup_steps", c.warmup_steps},
             {"threshold_start", c.threshold_start},
             {"threshold_beta", c.threshold_beta},
             {"dead_window", c.dead_window},
             {"log_every", c.log_every},
             {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.threshold_start = j.value("threshold_start", c.threshold_start);
    c.threshold_beta = j.value("threshold_beta", c.threshold_beta);
    c.dead_window = j.value("dead_window", c.dead_window);
    c.log_every = j.value("log_every", c.log_every);
    c.seed = j.value("seed", c.seed);
}

void to_json(json& j, const BucketSpec& b) {
    j = json{{"name", std::string(to_string(b.name))}, {"p", b.p}, {"sigma", b.sigma}};
}

void from_json(const json& j, BucketSpec& b) {
    b.p = j.value("p", b.p);
    b.sigma = j.value("sigma", b.sigma);
}

void to_json(json& j, const SynthConfig& c) {
    j = json{{"d", c.d},         {"k", c.k},
             {"n", c.n},         {"seed", c.seed},
             {"snr_db", c.snr_db}, {"coherence_iters", c.coherence_iters},
             {"buckets", c.buckets}};
}

void from_json(const json& j, SynthConfig& c) {
    c.d = j.value("d", c.d);
    c.k = j.value("k", c.k);
    c.n = j.value("n", c.n);
    c.seed = j.value("seed", c.seed);
    c.snr_db = j.value("snr_db", c.snr_db);
    c.coherence_iters = j.value("coherence_iters", c.coherence_iters);
    if (j.contains("buckets")) {
        const auto& arr = j.at("buckets");
        if (!arr.is_array() || arr.size() != kNumBuckets) throw ConfigError("buckets must list 4 entries");
        for (std::size_t i = 0; i < kNumBuckets; ++i) {
            c.buckets[i].name = static_cast<Bucket>(i);
            from_json(arr[i], c.buckets[i]);
        }
    }
}

void to_json(json& j, const DatasetStats& s) {
    json buckets = json::array();
    for (std::size_t b = 0; b < kNumBuckets; ++b)
        buckets.push_back({{"name", std::string(to_string(static_cast<Bucket>(b)))},
                           {"count", s.counts[b]},
                           {"mean_abs", s.mean_abs[b]},
                           {"std_abs", s.std_abs[b]}});
    j = json{{"coherence", s.coherence},     {"welch_bound", s.welch_bound},
             {"expected_l0", s.expected_l0}, {"observed_l0", s.observed_l0},
             {"buckets", buckets}};
    if (std::isfinite(s.snr_db)) j["snr_db"] = s.snr_db;
}

// --- files -----------------------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

class Writer {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
    template <typename T>
    void put_array(std::span<const T> v) {
        buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
    }
    void put_bytes(const std::string& s) { buf_.append(s); }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        T v;
        need(sizeof v);
        std::memcpy(&v, bytes_.data() + pos_, sizeof v);
        pos_ += sizeof v;
        return v;
    }
    template <typename T>
    void get_array(std::span<T> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void expect_magic(const char (&magic)[5]) {
        if (get_bytes(4) != std::string(magic, 4))
            throw FormatError(std::string("bad magic, expected ") + magic);
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("unexpected end of file");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

std::size_t checked_size(std::uint64_t v, std::uint64_t limit, const char* what) {
    if (v > limit) throw FormatError(std::string("implausible ") + what);
    return static_cast<std::size_t>(v);
}

template <typename T>
void put_tensors(Writer& w, const SaeTensors<T>& t) {
    w.put_array<float>(t.w_enc.flat());
    w.put_array<float>(std::span<const float>(t.b_enc));
    w.put_array<float>(t.w_dec.flat());
    w.put_array<float>(std::span<const float>(t.b_dec));
}

template <typename T>
void get_tensors(Reader& r, SaeTensors<T>& t, std::size_t m, std::size_t d) {
    t = {Matrix<float>(m, d), std::vector<float>(m), Matrix<float>(m, d), std::vector<float>(d)};
    r.get_array<float>(t.w_enc.flat());
    r.get_array<float>(std::span<float>(t.b_enc));
    r.get_array<float>(t.w_dec.flat());
    r.get_array<float>(std::span<float>(t.b_dec));
}

}  // namespace

// --- dataset ---------------------------------------------------------------

std::string encode_dataset(const SynthGroundTruth& gt) {
    const std::size_t d = gt.dictionary.rows(), k = gt.dictionary.cols(), n = gt.x.rows();
    if (gt.labels.size() != k || gt.codes.cols != k || gt.codes.rows != n || gt.x.cols() != d)
        throw ConfigError("encode_dataset: inconsistent ground truth");
    Writer w;
    w.put_bytes("SSYN");
    w.put<std::uint32_t>(kDatasetVersion);
    w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(k);
    w.put<std::uint64_t>(n);
    w.put<std::uint64_t>(gt.seed);
    w.put_array<float>(gt.dictionary.flat());
    for (const auto l : gt.labels) w.put<std::uint8_t>(static_cast<std::uint8_t>(l));
    w.put<std::uint64_t>(gt.codes.entries.size());
    for (const auto& e : gt.codes.entries) {
        w.put<std::uint32_t>(e.row);
        w.put<std::uint32_t>(e.col);
        w.put<float>(e.value);
    }
    w.put_array<float>(gt.x.flat());
    return w.take();
}

SynthGroundTruth decode_dataset(const std::string& bytes) {
    Reader r(bytes);
    r.expect_magic("SSYN");
    const auto version = r.get<std::uint32_t>();
    if (version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version));
    const std::uint64_t limit = bytes.size();
    const auto d = checked_size(r.get<std::uint64_t>(), limit, "d");
    const auto k = checked_size(r.get<std::uint64_t>(), limit, "k");
    const auto n = checked_size(r.get<std::uint64_t>(), limit, "n");
    SynthGroundTruth gt;
    gt.seed = r.get<std::uint64_t>();
    gt.dictionary = Matrix<float>(d, k);
    r.get_array<float>(gt.dictionary.flat());
    gt.labels.resize(k);
    for (auto& l : gt.labels) {
        const auto v = r.get<std::uint8_t>();
        if (v >= kNumBuckets) throw FormatError("bad bucket label");
        l = static_cast<Bucket>(v);
    }
    const auto nnz = checked_size(r.get<std::uint64_t>(), limit, "nnz");
    gt.codes = {n, k, {}};
    gt.codes.entries.resize(nnz);
    for (auto& e : gt.codes.entries) {
        e.row = r.get<std::uint32_t>();
        e.col = r.get<std::uint32_t>();
        e.value = r.get<float>();
        if (e.row >= n || e.col >= k) throw FormatError("sparse code index out of range");
    }
    gt.x = Matrix<float>(n, d);
    r.get_array<float>(gt.x.flat());
    if (!r.done()) throw FormatError("trailing bytes after dataset");
    return gt;
}

void save_dataset(const std::filesystem::path& path, const SynthGroundTruth& gt) {
    write_file_atomic(path, encode_dataset(gt));
}

SynthGroundTruth load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

// --- checkpoint --------------------------------------------------------------

std::string encode_checkpoint(const Checkpoint& ckpt) {
    const auto& p = ckpt.state.params;
    const auto& o = ckpt.state.opt;
    const std::size_t d = p.input_dim(), m = p.dict_size();
    if (o.last_fired.size() != m) throw ConfigError("encode_checkpoint: optimizer state width mismatch");

    Writer w;
    w.put_bytes("SSAE");
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(m);
    w.put_array<float>(p.w_enc.flat());
    w.put_array<float>(std::span<const float>(p.b_enc));
    w.put_array<float>(p.w_dec.flat());
    w.put_array<float>(std::span<const float>(p.b_dec));
    w.put<float>(p.theta);
    put_tensors(w, o.m1);
    put_tensors(w, o.m2);
    w.put_array<std::int64_t>(std::span<const std::int64_t>(o.last_fired));

    json meta{{"format_version", kCheckpointVersion},
              {"gate", ckpt.gate},
              {"train", ckpt.train},
              {"step", o.step},
              {"threshold", {{"value", o.threshold.value}, {"started", o.threshold.started}}},
              {"rng", {{"seed", ckpt.train.seed}, {"scheme", "splitmix64(seed, stream, step) -> mt19937_64"}}}};
    const std::string blob = meta.dump();
    w.put<std::uint64_t>(blob.size());
    w.put_bytes(blob);
    return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    r.expect_magic("SSAE");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t limit = bytes.size();
    const auto d = checked_size(r.get<std::uint64_t>(), limit, "d");
    const auto m = checked_size(r.get<std::uint64_t>(), limit, "m");

    Checkpoint c;
    auto& p = c.state.params;
    p.w_enc = Matrix<float>(m, d);
    p.b_enc.resize(m);
    p.w_dec = Matrix<float>(m, d);
    p.b_dec.resize(d);
    r.get_array<float>(p.w_enc.flat());
    r.get_array<float>(std::span<float>(p.b_enc));
    r.get_array<float>(p.w_dec.flat());
    r.get_array<float>(std::span<float>(p.b_dec));
    p.theta = r.get<float>();
    auto& o = c.state.opt;
    get_tensors(r, o.m1, m, d);
    get_tensors(r, o.m2, m, d);
    o.last_fired.resize(m);
    r.get_array<std::int64_t>(std::span<std::int64_t>(o.last_fired));

    const auto len = checked_size(r.get<std::uint64_t>(), limit, "metadata length");
    const json meta = json::parse(r.get_bytes(len), nullptr, /*allow_exceptions=*/false);
    if (meta.is_discarded() || !meta.is_object()) throw FormatError("corrupt checkpoint metadata");
    if (!r.done()) throw FormatError("trailing bytes after checkpoint");
    if (meta.at("format_version").get<std::uint32_t>() != kCheckpointVersion)
        throw FormatError("checkpoint metadata version mismatch");
    c.gate = meta.at("gate").get<GateConfig>();
    c.train = meta.at("train").get<TrainConfig>();
    o.step = meta.at("step").get<std::int64_t>();
    o.threshold.value = meta.at("threshold").at("value").get<double>();
    o.threshold.started = meta.at("threshold").at("started").get<bool>();
    if (c.gate.input_dim != d || c.gate.dict_size != m)
        throw FormatError("checkpoint dimensions disagree with its gate configuration");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

Checkpoint load_checkpoint(const std::filesystem::path& path, const GateConfig& expected) {
    auto c = load_checkpoint(path);
    if (!(c.gate == expected)) {
        throw ConfigError("checkpoint " + path.string() + " was trained with gate config " +
                          json(c.gate).dump() + ", expected " + json(expected).dump());
    }
    return c;
}

}  // namespace sampled_sae
