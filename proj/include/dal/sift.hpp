#pragma once

#include "dal/config.hpp"
#include "dal/tensor.hpp"

#include <random>
#include <span>

namespace dal {

class Model;
struct MaskedBatch;
enum class Objective;

// No variance floor: an additive epsilon would break scale invariance for
// small-norm tokens. Zero-variance rows map to zero.
inline constexpr double kNormalizeEps = 0.0;

// Per-token standardization (mean 0, variance 1 across d): a layer norm with
// unit gain and zero bias. Invariant to any positive per-token scale.
Tensor normalize_embeddings(const Tensor& embeddings, double eps = kNormalizeEps);

// sum_v (p - q)(log p - log q), summed over rows; both arguments are row-wise
// log-probabilities. Zero iff the rows agree.
Tensor symmetric_kl(const Tensor& log_p, const Tensor& log_q);

// Rescales each row of delta to L2 norm at most epsilon.
Matrix project_to_ball(const Matrix& delta, double epsilon);

struct SiftLoss {
  Tensor total;  // task + lambda * adversarial
  Tensor task;
  Tensor adversarial;  // mean symmetric KL per predicted token
};

// Symmetric KL between the clean prediction and the prediction with delta
// added to the normalized embeddings of one sequence, summed over predicted
// rows. Dropout is off for both passes.
Tensor perturbation_divergence(Model& model, std::span<const Index> input_ids, std::span<const Index> original_ids,
                               std::span<const Index> masked, Objective objective, const Tensor& delta);

// Adversarial direction for one sequence: a tiny random start, ascent_steps
// normalized gradient-ascent steps on the divergence, each followed by
// projection onto the per-token epsilon ball.
Matrix find_adversarial_perturbation(Model& model, std::span<const Index> input_ids,
                                     std::span<const Index> original_ids, std::span<const Index> masked,
                                     Objective objective, const SiftConfig& config, std::mt19937_64& rng);

// Task loss on the batch plus lambda times the mean adversarial divergence.
SiftLoss sift_loss(Model& model, const MaskedBatch& batch, Objective objective, const SiftConfig& config,
                   std::mt19937_64& rng);

}  // namespace dal
