#pragma once

#include "dal/attention.hpp"
#include "dal/config.hpp"
#include "dal/relpos.hpp"
#include "dal/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dal {

struct MaskedBatch;

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor w_in, b_in, w_out, b_out;
};

// Post-norm transformer block around a disentangled attention layer.
struct TransformerLayerParams {
  AttentionParams attention;
  LayerNormParams attention_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct ModelParams {
  Tensor token_embeddings;  // vocab x d, tied to the output projection
  LayerNormParams embedding_norm;
  Tensor abs_positions;  // max_len x d; undefined when no layer consumes it
  RelPosTable relpos;    // undefined embeddings when c2p and p2c are both off
  std::vector<TransformerLayerParams> encoder;
  std::vector<TransformerLayerParams> decoder;  // EMD layers owning weights
  Tensor head_w, head_b;
  LayerNormParams head_norm;
  Tensor output_bias;

  // Deterministic order; aliased tensors appear once.
  std::vector<NamedTensor> named_parameters() const;
};

enum class Objective { mlm, arlm };

// Logits of the predicted rows with their target ids.
struct Prediction {
  Tensor logits;  // rows x vocab
  std::vector<Index> positions;
  std::vector<Index> targets;
};

// Analytic parameter count of a model built from config.
std::int64_t parameter_count(const ModelConfig& config);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  std::vector<NamedTensor> named_parameters() const { return params_.named_parameters(); }
  std::int64_t parameter_count() const;

  // Dropout is active only in training mode.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }
  void set_kernel(KernelKind kind) { kernel_ = kind; }

  // Word embeddings standardized per token, optionally perturbed, then the
  // affine part of the embedding layer norm.
  Tensor embed(std::span<const Index> tokens, const Tensor* perturbation = nullptr);
  // Raw (un-normalized) word embeddings of the tokens.
  Tensor word_embeddings(std::span<const Index> tokens) const;

  // Embedding layer followed by the encoder stack. No absolute positions
  // unless abs_pos_at_input is set.
  Tensor encode(std::span<const Index> tokens, const AttentionMask& mask, const Tensor* perturbation = nullptr,
                std::vector<std::vector<Matrix>>* attention = nullptr);

  // Enhanced mask decoder: the first layer's query input is H + abs_pos, each
  // later layer's query input is the previous output; keys and values come
  // from H. Returns logits over the vocabulary for every position.
  Tensor emd_decode(const Tensor& hidden, const Tensor& abs_pos, const AttentionMask& mask);
  // BERT-style head: one decoder layer with I = H.
  Tensor plain_decode(const Tensor& hidden, const AttentionMask& mask);
  // Decoder states (before the LM head) for the configured head.
  Tensor decode_states(const Tensor& hidden, const AttentionMask& mask);
  Tensor lm_logits(const Tensor& states);
  // Rows abs_positions[0..n).
  Tensor abs_positions(Index n) const;

  // Logits at the rows the objective predicts: masked positions for MLM,
  // positions 0..N-2 (non-pad targets) for ARLM.
  Prediction predict(std::span<const Index> input_ids, std::span<const Index> original_ids,
                     std::span<const Index> masked_positions, Objective objective,
                     const Tensor* perturbation = nullptr);

  // Mean NLL over every masked position of the batch.
  Tensor forward_mlm(const MaskedBatch& batch);
  // Mean next-token NLL over every non-pad target of the batch.
  Tensor forward_arlm(const IndexMatrix& tokens);
  Tensor forward_arlm(std::span<const Index> tokens);

  // Post-softmax attention weights of the encoder, [layer][head].
  std::vector<std::vector<Matrix>> attention_patterns(std::span<const Index> tokens);

 private:
  Tensor layer_forward(const TransformerLayerParams& layer, const Tensor& query_states, const Tensor& key_states,
                       const DeltaMatrix& dm, const AttentionMask& mask, std::vector<Matrix>* attention);
  Tensor drop(const Tensor& x);
  void check_tokens(std::span<const Index> tokens) const;

  ModelConfig config_;
  ModelParams params_;
  DeltaCache deltas_;
  bool training_ = false;
  KernelKind kernel_ = KernelKind::efficient;
  std::mt19937_64 dropout_rng_;
};

// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const Index> targets);

}  // namespace dal
