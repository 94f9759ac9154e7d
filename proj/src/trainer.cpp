#include "dal/trainer.hpp"

#include "dal/errors.hpp"
#include "dal/ops.hpp"
#include "dal/sift.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace dal {

namespace {

constexpr std::size_t kMetricsWindow = 100;

class MovingAverage {
 public:
  void add(double v) {
    values_.push_back(v);
    if (values_.size() > kMetricsWindow) values_.pop_front();
  }
  bool empty() const { return values_.empty(); }
  double value() const { return std::accumulate(values_.begin(), values_.end(), 0.0) / values_.size(); }

 private:
  std::deque<double> values_;
};

Json optional_number(const MovingAverage& avg) { return avg.empty() ? Json(nullptr) : Json(avg.value()); }

}  // namespace

double learning_rate(std::int64_t step, const TrainConfig& c) {
  if (step <= 0) return 0.0;
  if (step >= c.steps) return 0.0;
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  return c.peak_lr * static_cast<double>(c.steps - step) / static_cast<double>(c.steps - c.warmup_steps);
}

double gradient_norm(std::span<const NamedTensor> params) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    if (t.has_grad()) sq += t.node()->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_gradients(std::span<const NamedTensor> params, double max_norm) {
  const double norm = gradient_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, t] : params) {
      if (t.has_grad()) t.node()->grad *= s;
    }
  }
  return norm;
}

AdamW::AdamW(const TrainConfig& config) : config_(config) {}

void AdamW::step(std::span<const NamedTensor> params, double lr) {
  if (m_.empty()) {
    for (const auto& [name, t] : params) {
      m_.push_back(Matrix::Zero(t.rows(), t.cols()));
      v_.push_back(Matrix::Zero(t.rows(), t.cols()));
    }
  }
  if (m_.size() != params.size()) throw ContractError("AdamW: parameter list changed between steps");
  ++t_;
  const double b1 = config_.adam_beta1;
  const double b2 = config_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    const Matrix g = t.grad();
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    Matrix& p = t.mutable_value();
    const bool decay = p.rows() > 1 && p.cols() > 1;
    if (decay && config_.weight_decay > 0.0) p -= (lr * config_.weight_decay) * p;
    p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.adam_eps);
  }
}

Objective objective_for_step(Mode mode, std::int64_t step) {
  switch (mode) {
    case Mode::mlm:
      return Objective::mlm;
    case Mode::arlm:
      return Objective::arlm;
    case Mode::joint:
      return step % 2 == 0 ? Objective::mlm : Objective::arlm;
  }
  return Objective::mlm;
}

TrainResult train(Model& model, const BatchStream& data, const TrainConfig& config, const SiftConfig& sift,
                  const TrainHooks& hooks) {
  validate(config);
  if (sift.enabled) validate(sift);
  const auto params = model.named_parameters();
  AdamW optimizer(config);
  MovingAverage mlm_avg, arlm_avg;
  TrainResult result;

  for (std::int64_t step = 1; step <= config.steps; ++step) {
    const MaskedBatch batch = data.batch(step - 1);
    const Objective objective = objective_for_step(model.config().mode, step);
    model.set_training(true);
    model.reseed_dropout(derived_rng(config.seed, 3, static_cast<std::uint64_t>(step))());

    Tensor loss;
    std::optional<double> adversarial;
    if (sift.enabled) {
      auto rng = derived_rng(config.seed, 4, static_cast<std::uint64_t>(step));
      const SiftLoss s = sift_loss(model, batch, objective, sift, rng);
      loss = s.total;
      adversarial = s.adversarial.item();
    } else {
      loss = objective == Objective::mlm ? model.forward_mlm(batch) : model.forward_arlm(batch.original);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      model.set_training(false);
      throw DivergenceError("loss became " + std::to_string(value) + " at step " + std::to_string(step));
    }

    for (const auto& [name, t] : params) t.node()->grad.resize(0, 0);
    backward(loss);
    const double norm = clip_gradients(params, config.grad_clip);
    if (!std::isfinite(norm)) {
      model.set_training(false);
      throw DivergenceError("gradient norm became " + std::to_string(norm) + " at step " + std::to_string(step));
    }
    const double lr = learning_rate(step, config);
    optimizer.step(params, lr);

    (objective == Objective::mlm ? mlm_avg : arlm_avg).add(value);
    Json record{{"step", step},
                {"objective", objective == Objective::mlm ? "mlm" : "arlm"},
                {"loss", value},
                {"mlm_loss", optional_number(mlm_avg)},
                {"arlm_loss", optional_number(arlm_avg)},
                {"perplexity", arlm_avg.empty() ? Json(nullptr) : Json(std::exp(arlm_avg.value()))},
                {"grad_norm", norm},
                {"lr", lr},
                {"batch_hash", batch.hash()}};
    if (adversarial) record["sift_adversarial"] = *adversarial;
    result.batch_hashes.push_back(batch.hash());
    if (hooks.on_metrics) hooks.on_metrics(record);
    result.metrics.push_back(std::move(record));
    if (hooks.on_checkpoint && (step % config.checkpoint_every == 0 || step == config.steps)) {
      hooks.on_checkpoint(step);
    }
    result.steps = step;
  }
  model.set_training(false);
  if (!mlm_avg.empty()) result.final_mlm_loss = mlm_avg.value();
  if (!arlm_avg.empty()) result.final_arlm_loss = arlm_avg.value();
  return result;
}

std::vector<double> evaluate_nll(Model& model, std::span<const std::vector<Index>> sequences, Index length,
                                 Index batch_size) {
  if (sequences.empty()) throw IngestionError("evaluation corpus is empty");
  NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<double> nll;
  for (std::size_t at = 0; at < sequences.size(); at += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(sequences.size(), at + static_cast<std::size_t>(batch_size));
    const MaskedBatch batch = make_batch(sequences.subspan(at, end - at), length);
    for (Index b = 0; b < batch.size(); ++b) {
      const auto row = batch.original_row(b);
      const Prediction p = model.predict(row, row, {}, Objective::arlm);
      if (p.targets.empty()) continue;
      const Tensor logp = log_softmax_rows(p.logits);
      for (std::size_t i = 0; i < p.targets.size(); ++i) {
        nll.push_back(-logp.value()(static_cast<Index>(i), p.targets[i]));
      }
    }
  }
  model.set_training(was_training);
  if (nll.empty()) throw IngestionError("evaluation corpus has no next-token targets");
  return nll;
}

double evaluate_ppl(Model& model, std::span<const std::vector<Index>> sequences, Index length, Index batch_size) {
  const std::vector<double> nll = evaluate_nll(model, sequences, length, batch_size);
  // Summed in sequence order, so the result does not depend on batch_size.
  const double total = std::accumulate(nll.begin(), nll.end(), 0.0);
  return std::exp(total / static_cast<double>(nll.size()));
}

PreparedData prepare_data(const RunConfig& config, std::span<const std::string> documents,
                          std::span<const std::string> eval_documents) {
  if (documents.empty()) throw IngestionError("training corpus is empty");
  PreparedData out{build_vocab(documents, config.model.vocab_size), {}, {}};
  auto encode_all = [&](std::span<const std::string> docs) {
    std::vector<std::vector<Index>> ids;
    for (const auto& doc : docs) {
      auto row = out.vocab.encode(doc);
      if (!row.empty()) ids.push_back(std::move(row));
    }
    return chunk_documents(ids, config.data.seq_len);
  };
  out.train_sequences = encode_all(documents);
  out.eval_sequences = eval_documents.empty() ? out.train_sequences : encode_all(eval_documents);
  if (out.train_sequences.empty()) throw IngestionError("training corpus has no tokens");
  return out;
}

BatchStream make_stream(const RunConfig& config, const PreparedData& data) {
  CorruptionOptions corruption;
  corruption.mask_rate = config.data.mask_rate;
  corruption.span_max = config.data.span_max;
  corruption.vocab_size = std::min<Index>(data.vocab.size(), config.model.vocab_size);
  return BatchStream(data.train_sequences, config.data.seq_len, config.trainer.batch_size, config.trainer.seed,
                     corruption);
}

std::vector<AblationRow> run_ablation_suite(const RunConfig& base, const PreparedData& data,
                                            const std::function<void(const AblationRow&)>& on_row) {
  struct Variant {
    const char* name;
    bool emd, c2p, p2c;
  };
  const Variant variants[] = {{"full", true, true, true},        {"-EMD", false, true, true},
                              {"-C2P", true, false, true},       {"-P2C", true, true, false},
                              {"-(EMD+C2P)", false, false, true}, {"-(EMD+P2C)", false, true, false}};
  const BatchStream stream = make_stream(base, data);
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig cfg = base;
    cfg.model.ablations = {v.emd, v.c2p, v.p2c};
    Model model(cfg.model, cfg.trainer.seed);
    const TrainResult r = train(model, stream, cfg.trainer, cfg.sift);
    AblationRow row;
    row.variant = v.name;
    row.steps = r.steps;
    row.seed = cfg.trainer.seed;
    std::uint64_t h = 14695981039346656037ull;
    for (const auto bh : r.batch_hashes) h = (h ^ bh) * 1099511628211ull;
    row.batch_stream_hash = h;
    row.final_mlm_loss = r.final_mlm_loss.value_or(std::nan(""));
    if (cfg.model.mode == Mode::mlm) {
      row.final_ppl = std::exp(row.final_mlm_loss);
    } else {
      row.final_ppl = evaluate_ppl(model, data.eval_sequences, cfg.data.seq_len, cfg.trainer.batch_size);
    }
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "variant,final_mlm_loss,final_ppl,steps,seed\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.variant << ',' << r.final_mlm_loss << ',' << r.final_ppl << ',' << r.steps << ',' << r.seed << '\n';
  }
}

}  // namespace dal
