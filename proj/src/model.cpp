#include "dal/model.hpp"

#include "dal/data.hpp"
#include "dal/errors.hpp"
#include "dal/ops.hpp"
#include "dal/sift.hpp"

namespace dal {

namespace {

LayerNormParams make_norm(Index d) {
  return {Tensor::parameter(Matrix::Ones(1, d)), Tensor::parameter(Matrix::Zero(1, d))};
}

TransformerLayerParams make_layer(const ModelConfig& c, std::mt19937_64& rng) {
  TransformerLayerParams layer;
  layer.attention = make_attention_params(c.hidden, c.heads, c.share_projection, c.ablations.c2p, c.ablations.p2c,
                                          c.init_std, rng);
  layer.attention_norm = make_norm(c.hidden);
  layer.ffn.w_in = Tensor::parameter(truncated_normal(c.hidden, c.ffn_size, c.init_std, rng));
  layer.ffn.b_in = Tensor::parameter(Matrix::Zero(1, c.ffn_size));
  layer.ffn.w_out = Tensor::parameter(truncated_normal(c.ffn_size, c.hidden, c.init_std, rng));
  layer.ffn.b_out = Tensor::parameter(Matrix::Zero(1, c.hidden));
  layer.ffn_norm = make_norm(c.hidden);
  return layer;
}

void append_layer(std::vector<NamedTensor>& out, const std::string& prefix, const TransformerLayerParams& layer) {
  for (auto& p : layer.attention.named_parameters(prefix + "attention.")) out.push_back(std::move(p));
  out.emplace_back(prefix + "attention_norm.gain", layer.attention_norm.gain);
  out.emplace_back(prefix + "attention_norm.bias", layer.attention_norm.bias);
  out.emplace_back(prefix + "ffn.w_in", layer.ffn.w_in);
  out.emplace_back(prefix + "ffn.b_in", layer.ffn.b_in);
  out.emplace_back(prefix + "ffn.w_out", layer.ffn.w_out);
  out.emplace_back(prefix + "ffn.b_out", layer.ffn.b_out);
  out.emplace_back(prefix + "ffn_norm.gain", layer.ffn_norm.gain);
  out.emplace_back(prefix + "ffn_norm.bias", layer.ffn_norm.bias);
}

std::vector<bool> padding_of(std::span<const Index> tokens) {
  std::vector<bool> pad(tokens.size());
  bool any = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    pad[i] = tokens[i] == kPadId;
    any = any || pad[i];
  }
  if (!any) pad.clear();
  return pad;
}

}  // namespace

std::vector<NamedTensor> ModelParams::named_parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("embedding.tokens", token_embeddings);
  out.emplace_back("embedding.norm.gain", embedding_norm.gain);
  out.emplace_back("embedding.norm.bias", embedding_norm.bias);
  if (abs_positions.defined()) out.emplace_back("abs_positions", abs_positions);
  if (relpos.embeddings.defined()) out.emplace_back("relpos.table", relpos.embeddings);
  for (std::size_t i = 0; i < encoder.size(); ++i) append_layer(out, "encoder." + std::to_string(i) + ".", encoder[i]);
  for (std::size_t i = 0; i < decoder.size(); ++i) append_layer(out, "decoder." + std::to_string(i) + ".", decoder[i]);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  out.emplace_back("head.norm.gain", head_norm.gain);
  out.emplace_back("head.norm.bias", head_norm.bias);
  out.emplace_back("head.output_bias", output_bias);
  return out;
}

std::int64_t parameter_count(const ModelConfig& c) {
  const std::int64_t d = c.hidden;
  const std::int64_t f = c.ffn_size;
  std::int64_t position_projections = 0;
  if (!c.share_projection) position_projections = (c.ablations.c2p ? d * d : 0) + (c.ablations.p2c ? d * d : 0);
  const std::int64_t layer = 3 * d * d + position_projections + d * d + d + 2 * d + (d * f + f + f * d + d) + 2 * d;
  std::int64_t total = c.vocab_size * d + 2 * d;
  if (c.uses_abs_pos()) total += c.max_len * d;
  if (c.uses_relpos()) total += 2 * c.k * d;
  total += (c.layers + c.emd_weight_layers()) * layer;
  total += d * d + d + 2 * d + c.vocab_size;
  return total;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), dropout_rng_(seed ^ 0x5eedULL) {
  validate(config_);
  std::mt19937_64 rng(seed);
  const ModelConfig& c = config_;
  params_.token_embeddings = Tensor::parameter(truncated_normal(c.vocab_size, c.hidden, c.init_std, rng));
  params_.embedding_norm = make_norm(c.hidden);
  if (c.uses_abs_pos()) {
    params_.abs_positions = Tensor::parameter(truncated_normal(c.max_len, c.hidden, c.init_std, rng));
  }
  params_.relpos.k = c.k;
  if (c.uses_relpos()) {
    params_.relpos = make_relpos_table(c.k, truncated_normal(2 * c.k, c.hidden, c.init_std, rng));
  }
  for (std::int64_t i = 0; i < c.layers; ++i) params_.encoder.push_back(make_layer(c, rng));
  for (std::int64_t i = 0; i < c.emd_weight_layers(); ++i) params_.decoder.push_back(make_layer(c, rng));
  params_.head_w = Tensor::parameter(truncated_normal(c.hidden, c.hidden, c.init_std, rng));
  params_.head_b = Tensor::parameter(Matrix::Zero(1, c.hidden));
  params_.head_norm = make_norm(c.hidden);
  params_.output_bias = Tensor::parameter(Matrix::Zero(1, c.vocab_size));
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

void Model::check_tokens(std::span<const Index> tokens) const {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (static_cast<std::int64_t>(tokens.size()) > config_.max_len) {
    throw InputError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                     std::to_string(config_.max_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of " + std::to_string(config_.vocab_size));
    }
  }
}

Tensor Model::drop(const Tensor& x) {
  if (!training_ || config_.dropout <= 0.0) return x;
  return dropout(x, config_.dropout, dropout_rng_);
}

Tensor Model::word_embeddings(std::span<const Index> tokens) const {
  return gather_rows(params_.token_embeddings, tokens);
}

Tensor Model::abs_positions(Index n) const {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  return gather_rows(params_.abs_positions, rows);
}

Tensor Model::embed(std::span<const Index> tokens, const Tensor* perturbation) {
  check_tokens(tokens);
  Tensor e = word_embeddings(tokens);
  if (config_.abs_pos_at_input) e = add(e, abs_positions(static_cast<Index>(tokens.size())));
  Tensor x = normalize_embeddings(e);
  if (perturbation != nullptr) x = add(x, *perturbation);
  x = add_row(mul_row(x, params_.embedding_norm.gain), params_.embedding_norm.bias);
  return drop(x);
}

Tensor Model::layer_forward(const TransformerLayerParams& layer, const Tensor& query_states,
                            const Tensor& key_states, const DeltaMatrix& dm, const AttentionMask& mask,
                            std::vector<Matrix>* attention) {
  AttendOptions options;
  options.kernel = kernel_;
  options.dropout = training_ ? config_.dropout : 0.0;
  options.rng = &dropout_rng_;
  options.probabilities = attention;
  const double eps = config_.layer_norm_eps;
  const Tensor a = attend(query_states, key_states, layer.attention, params_.relpos, dm, mask, options);
  const Tensor x = layer_norm(add(query_states, drop(a)), layer.attention_norm.gain, layer.attention_norm.bias, eps);
  const Tensor inner = gelu(add_row(matmul(x, layer.ffn.w_in), layer.ffn.b_in));
  const Tensor f = add_row(matmul(inner, layer.ffn.w_out), layer.ffn.b_out);
  return layer_norm(add(x, drop(f)), layer.ffn_norm.gain, layer.ffn_norm.bias, eps);
}

Tensor Model::encode(std::span<const Index> tokens, const AttentionMask& mask, const Tensor* perturbation,
                     std::vector<std::vector<Matrix>>* attention) {
  Tensor x = embed(tokens, perturbation);
  const auto dm = deltas_.get(static_cast<Index>(tokens.size()), config_.k);
  for (const auto& layer : params_.encoder) {
    std::vector<Matrix>* sink = nullptr;
    if (attention != nullptr) sink = &attention->emplace_back();
    x = layer_forward(layer, x, x, *dm, mask, sink);
  }
  return x;
}

Tensor Model::decode_states(const Tensor& hidden, const AttentionMask& mask) {
  const auto dm = deltas_.get(hidden.rows(), config_.k);
  if (!config_.ablations.emd) return layer_forward(params_.decoder.front(), hidden, hidden, *dm, mask, nullptr);
  Tensor query = add(hidden, abs_positions(hidden.rows()));
  for (std::int64_t t = 0; t < config_.n_emd; ++t) {
    const auto& layer = params_.decoder[config_.emd_shared ? 0 : static_cast<std::size_t>(t)];
    query = layer_forward(layer, query, hidden, *dm, mask, nullptr);
  }
  return query;
}

Tensor Model::emd_decode(const Tensor& hidden, const Tensor& abs_pos, const AttentionMask& mask) {
  if (!config_.ablations.emd) throw ContractError("emd_decode on a model built without the enhanced mask decoder");
  const auto dm = deltas_.get(hidden.rows(), config_.k);
  Tensor query = add(hidden, abs_pos);
  for (std::int64_t t = 0; t < config_.n_emd; ++t) {
    const auto& layer = params_.decoder[config_.emd_shared ? 0 : static_cast<std::size_t>(t)];
    query = layer_forward(layer, query, hidden, *dm, mask, nullptr);
  }
  return lm_logits(query);
}

Tensor Model::plain_decode(const Tensor& hidden, const AttentionMask& mask) {
  const auto dm = deltas_.get(hidden.rows(), config_.k);
  return lm_logits(layer_forward(params_.decoder.front(), hidden, hidden, *dm, mask, nullptr));
}

Tensor Model::lm_logits(const Tensor& states) {
  Tensor h = gelu(add_row(matmul(states, params_.head_w), params_.head_b));
  h = layer_norm(h, params_.head_norm.gain, params_.head_norm.bias, config_.layer_norm_eps);
  return add_row(matmul_nt(h, params_.token_embeddings), params_.output_bias);
}

Prediction Model::predict(std::span<const Index> input_ids, std::span<const Index> original_ids,
                          std::span<const Index> masked_positions, Objective objective, const Tensor* perturbation) {
  if (input_ids.size() != original_ids.size()) throw DimensionError("predict: input and original ids differ in length");
  Prediction p;
  AttentionMask mask;
  if (objective == Objective::mlm) {
    if (masked_positions.empty()) throw ContractError("MLM prediction needs at least one masked position");
    mask = AttentionMask::bidirectional(padding_of(input_ids));
    for (Index pos : masked_positions) {
      if (pos < 0 || pos >= static_cast<Index>(input_ids.size())) throw BoundsError("masked position out of range");
      p.positions.push_back(pos);
      p.targets.push_back(original_ids[static_cast<std::size_t>(pos)]);
    }
  } else {
    if (input_ids.size() < 2) throw ContractError("ARLM needs at least 2 tokens");
    mask = AttentionMask::causal_mask(padding_of(input_ids));
    for (std::size_t t = 0; t + 1 < input_ids.size(); ++t) {
      if (input_ids[t] == kPadId || input_ids[t + 1] == kPadId) continue;
      p.positions.push_back(static_cast<Index>(t));
      p.targets.push_back(input_ids[t + 1]);
    }
  }
  const Tensor hidden = encode(input_ids, mask, perturbation);
  const Tensor states = decode_states(hidden, mask);
  if (p.positions.empty()) {
    p.logits = Tensor::constant(Matrix(0, config_.vocab_size));
    return p;
  }
  p.logits = lm_logits(gather_rows(states, p.positions));
  return p;
}

Tensor cross_entropy(const Tensor& logits, std::span<const Index> targets) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
  }
  if (targets.empty()) throw ContractError("cross_entropy over zero targets");
  std::vector<Index> rows(targets.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
  return scale(sum(pick(log_softmax_rows(logits), rows, targets)), -1.0 / static_cast<double>(targets.size()));
}

namespace {

// -sum of picked log-probabilities.
Tensor nll_sum(const Prediction& p) {
  std::vector<Index> rows(p.targets.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
  return scale(sum(pick(log_softmax_rows(p.logits), rows, p.targets)), -1.0);
}

}  // namespace

Tensor Model::forward_mlm(const MaskedBatch& batch) {
  Tensor total;
  std::size_t count = 0;
  for (Index b = 0; b < batch.size(); ++b) {
    const auto& masked = batch.masked[static_cast<std::size_t>(b)];
    if (masked.empty()) continue;
    const Prediction p = predict(batch.corrupted_row(b), batch.original_row(b), masked, Objective::mlm);
    const Tensor part = nll_sum(p);
    total = total.defined() ? add(total, part) : part;
    count += p.targets.size();
  }
  if (count == 0) throw ContractError("MLM batch has no masked positions");
  return scale(total, 1.0 / static_cast<double>(count));
}

Tensor Model::forward_arlm(const IndexMatrix& tokens) {
  Tensor total;
  std::size_t count = 0;
  for (Index b = 0; b < tokens.rows(); ++b) {
    const std::span<const Index> row(tokens.data() + b * tokens.cols(), static_cast<std::size_t>(tokens.cols()));
    const Prediction p = predict(row, row, {}, Objective::arlm);
    if (p.targets.empty()) continue;
    const Tensor part = nll_sum(p);
    total = total.defined() ? add(total, part) : part;
    count += p.targets.size();
  }
  if (count == 0) throw ContractError("ARLM batch has no next-token targets");
  return scale(total, 1.0 / static_cast<double>(count));
}

Tensor Model::forward_arlm(std::span<const Index> tokens) {
  IndexMatrix m(1, static_cast<Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) m(0, static_cast<Index>(i)) = tokens[i];
  return forward_arlm(m);
}

std::vector<std::vector<Matrix>> Model::attention_patterns(std::span<const Index> tokens) {
  NoGradGuard no_grad;
  std::vector<std::vector<Matrix>> patterns;
  const AttentionMask mask = config_.mode == Mode::arlm ? AttentionMask::causal_mask(padding_of(tokens))
                                                         : AttentionMask::bidirectional(padding_of(tokens));
  const bool was_training = training_;
  training_ = false;
  encode(tokens, mask, nullptr, &patterns);
  training_ = was_training;
  return patterns;
}

}  // namespace dal
