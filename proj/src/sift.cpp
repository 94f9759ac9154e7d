#include "dal/sift.hpp"

#include "dal/data.hpp"
#include "dal/errors.hpp"
#include "dal/model.hpp"
#include "dal/ops.hpp"

#include <cmath>

namespace dal {

namespace {

// Restores the model's training flag on scope exit.
class EvalMode {
 public:
  explicit EvalMode(Model& model) : model_(model), previous_(model.training()) { model_.set_training(false); }
  ~EvalMode() { model_.set_training(previous_); }
  EvalMode(const EvalMode&) = delete;
  EvalMode& operator=(const EvalMode&) = delete;

 private:
  Model& model_;
  bool previous_;
};

Matrix normalize_rows(const Matrix& m, double target_norm) {
  Matrix out = m;
  for (Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm > 0.0) out.row(r) *= target_norm / norm;
  }
  return out;
}

}  // namespace

Tensor normalize_embeddings(const Tensor& embeddings, double eps) {
  const Index d = embeddings.cols();
  return layer_norm(embeddings, Tensor::constant(Matrix::Ones(1, d)), Tensor::constant(Matrix::Zero(1, d)), eps);
}

Tensor symmetric_kl(const Tensor& log_p, const Tensor& log_q) {
  const Tensor p = make_result(log_p.value().array().exp().matrix(), {log_p}, [](Node& n) {
    n.parents[0]->accumulate_expr(n.grad.cwiseProduct(n.value));
  });
  const Tensor q = make_result(log_q.value().array().exp().matrix(), {log_q}, [](Node& n) {
    n.parents[0]->accumulate_expr(n.grad.cwiseProduct(n.value));
  });
  return sum(hadamard(sub(p, q), sub(log_p, log_q)));
}

Matrix project_to_ball(const Matrix& delta, double epsilon) {
  Matrix out = delta;
  for (Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm > epsilon) out.row(r) *= epsilon / norm;
  }
  return out;
}

Tensor perturbation_divergence(Model& model, std::span<const Index> input_ids, std::span<const Index> original_ids,
                               std::span<const Index> masked, Objective objective, const Tensor& delta) {
  EvalMode eval(model);
  const Prediction clean = model.predict(input_ids, original_ids, masked, objective);
  const Prediction perturbed = model.predict(input_ids, original_ids, masked, objective, &delta);
  if (clean.targets.empty()) return Tensor::scalar(0.0);
  return symmetric_kl(log_softmax_rows(clean.logits), log_softmax_rows(perturbed.logits));
}

Matrix find_adversarial_perturbation(Model& model, std::span<const Index> input_ids,
                                     std::span<const Index> original_ids, std::span<const Index> masked,
                                     Objective objective, const SiftConfig& config, std::mt19937_64& rng) {
  const auto n = static_cast<Index>(input_ids.size());
  const Index d = model.config().hidden;
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix delta(n, d);
  for (Index i = 0; i < delta.size(); ++i) delta.data()[i] = normal(rng);
  // Start well inside the ball so the first gradient reflects local
  // curvature rather than the random start.
  delta = normalize_rows(delta, 1e-3 * config.epsilon);

  EvalMode eval(model);
  Tensor clean_log_probs;
  {
    NoGradGuard no_grad;
    const Prediction clean = model.predict(input_ids, original_ids, masked, objective);
    if (clean.targets.empty()) return Matrix::Zero(n, d);
    clean_log_probs = log_softmax_rows(clean.logits);
  }
  for (std::int64_t step = 0; step < config.ascent_steps; ++step) {
    const Tensor leaf = Tensor::parameter(delta);
    const Prediction perturbed = model.predict(input_ids, original_ids, masked, objective, &leaf);
    const Tensor divergence = symmetric_kl(clean_log_probs, log_softmax_rows(perturbed.logits));
    const Matrix grad = gradients(divergence, {leaf}).front();
    delta = project_to_ball(delta + config.ascent_lr * normalize_rows(grad, 1.0), config.epsilon);
  }
  return delta;
}

SiftLoss sift_loss(Model& model, const MaskedBatch& batch, Objective objective, const SiftConfig& config,
                   std::mt19937_64& rng) {
  validate(config);
  SiftLoss out;
  out.task = objective == Objective::mlm ? model.forward_mlm(batch) : model.forward_arlm(batch.original);

  Tensor total_divergence;
  std::size_t rows = 0;
  for (Index b = 0; b < batch.size(); ++b) {
    const auto& masked = batch.masked[static_cast<std::size_t>(b)];
    if (objective == Objective::mlm && masked.empty()) continue;
    const auto input = objective == Objective::mlm ? batch.corrupted_row(b) : batch.original_row(b);
    const auto original = batch.original_row(b);
    const Matrix delta = find_adversarial_perturbation(model, input, original, masked, objective, config, rng);
    const Tensor part = perturbation_divergence(model, input, original, masked, objective, Tensor::constant(delta));
    total_divergence = total_divergence.defined() ? add(total_divergence, part) : part;
    if (objective == Objective::mlm) {
      rows += masked.size();
    } else {
      for (Index i = 0; i + 1 < batch.length(); ++i) {
        if (batch.original(b, i) != kPadId && batch.original(b, i + 1) != kPadId) ++rows;
      }
    }
  }
  if (rows == 0) throw ContractError("SiFT batch has no predicted positions");
  out.adversarial = scale(total_divergence, 1.0 / static_cast<double>(rows));
  out.total = add(out.task, scale(out.adversarial, config.lambda));
  return out;
}

}  // namespace dal
