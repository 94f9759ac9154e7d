#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace dal {

using Json = nlohmann::json;

enum class Mode { mlm, arlm, joint };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& text);

struct Ablations {
  bool emd = true;
  bool c2p = true;
  bool p2c = true;
};

struct ModelConfig {
  std::int64_t layers = 2;
  std::int64_t hidden = 64;
  std::int64_t heads = 4;
  std::int64_t ffn_size = 256;
  std::int64_t k = 16;  // maximum relative distance
  std::int64_t vocab_size = 2000;
  std::int64_t n_emd = 2;
  bool emd_shared = true;
  Mode mode = Mode::mlm;
  Ablations ablations;
  bool share_projection = false;
  // Absolute positions at the input layer instead of only in the decoder.
  bool abs_pos_at_input = false;
  double dropout = 0.1;
  std::int64_t max_len = 128;
  double init_std = 0.02;
  double layer_norm_eps = 1e-7;

  std::int64_t head_size() const { return hidden / heads; }
  // Number of decoder layers that own weights.
  std::int64_t emd_weight_layers() const { return ablations.emd ? (emd_shared ? 1 : n_emd) : 1; }
  bool uses_abs_pos() const { return ablations.emd || abs_pos_at_input; }
  bool uses_relpos() const { return ablations.c2p || ablations.p2c; }
};

struct DataConfig {
  std::string corpus;
  std::string eval_corpus;  // empty: evaluate on the training corpus
  std::int64_t seq_len = 64;
  double mask_rate = 0.15;
  std::int64_t span_max = 3;
};

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch_size = 16;
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 100;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  double grad_clip = 1.0;
  std::int64_t checkpoint_every = 500;
  std::uint64_t seed = 1234;
};

struct SiftConfig {
  bool enabled = false;
  double epsilon = 1e-2;
  std::int64_t ascent_steps = 1;
  double ascent_lr = 1e-3;
  double lambda = 1.0;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig trainer;
  SiftConfig sift;
};

void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);
void to_json(Json& j, const DataConfig& c);
void from_json(const Json& j, DataConfig& c);
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);
void to_json(Json& j, const SiftConfig& c);
void from_json(const Json& j, SiftConfig& c);
void to_json(Json& j, const RunConfig& c);
void from_json(const Json& j, RunConfig& c);

// Each validator throws ConfigError naming the offending dotted key.
void validate(const ModelConfig& c);
void validate(const TrainConfig& c);
void validate(const SiftConfig& c);
void validate(const RunConfig& c);

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
void apply_override(Json& doc, const std::string& assignment);

// Canonical text: sorted keys, no insignificant whitespace.
std::string canonical_json(const Json& doc);

}  // namespace dal
