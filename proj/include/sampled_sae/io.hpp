#pragma once

// On-disk formats. All binary files are little-endian.
//
// SSYN dataset (version 1):
//   "SSYN" u32 version u64 d u64 k u64 n u64 seed
//   f32 A[d*k] (row-major, d x k)   u8 labels[k]
//   u64 nnz, then nnz x (u32 row, u32 col, f32 value) sorted by (row, col)
//   f32 X[n*d] (row-major)
//
// SSAE checkpoint (version 1):
//   "SSAE" u32 version u64 d u64 m
//   f32 W_enc[m*d] b_enc[m] W_dec[m*d] b_dec[d] theta
//   f32 Adam first moments  (W_enc, b_enc, W_dec, b_dec)
//   f32 Adam second moments (W_enc, b_enc, W_dec, b_dec)
//   i64 last_fired[m]
//   u64 json_len, json_len bytes of JSON: gate and train configs, step,
//   threshold state, rng description.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "sampled_sae/sae_core.hpp"
#include "sampled_sae/synthgen.hpp"
#include "sampled_sae/trainer.hpp"

namespace sampled_sae {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

void to_json(nlohmann::json& j, const GateConfig& c);
void from_json(const nlohmann::json& j, GateConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const BucketSpec& b);
void from_json(const nlohmann::json& j, BucketSpec& b);
void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);
void to_json(nlohmann::json& j, const DatasetStats& s);

/// Writes through a temporary file in the same directory and renames it
/// into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

std::string encode_dataset(const SynthGroundTruth& gt);
SynthGroundTruth decode_dataset(const std::string& bytes);
void save_dataset(const std::filesystem::path& path, const SynthGroundTruth& gt);
SynthGroundTruth load_dataset(const std::filesystem::path& path);

struct Checkpoint {
    GateConfig gate;
    TrainConfig train;
    TrainState state;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// As load_checkpoint, but fails with ConfigError unless the stored gate
/// configuration equals `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const GateConfig& expected);

}  // namespace sampled_sae
