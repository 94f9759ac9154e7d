#include "dal/data.hpp"
#include "dal/model.hpp"
#include "dal/ops.hpp"
#include "dal/sift.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace dal;
using dal::test::random_matrix;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn_size = 16;
  c.k = 3;
  c.vocab_size = 15;
  c.max_len = 8;
  c.dropout = 0.1;
  c.init_std = 0.3;
  return c;
}

MaskedBatch batch() {
  const std::vector<std::vector<Index>> seqs{{5, 6, 7, 8, 9}, {10, 11, 12, 13}};
  MaskedBatch b = make_batch(seqs, 7);
  std::mt19937_64 rng(3);
  CorruptionOptions opt;
  opt.vocab_size = 15;
  opt.mask_rate = 0.4;
  corrupt_batch(b, rng, opt);
  return b;
}

}  // namespace

TEST_CASE("normalization is invariant to positive per-token scale") {
  std::mt19937_64 rng(1);
  const Matrix e = random_matrix(5, 8, rng);
  const Matrix a = normalize_embeddings(Tensor::constant(e)).value();
  for (double s : {1e-6, 0.01, 0.5, 10.0, 1e6}) {
    Matrix scaled = e;
    for (Index r = 0; r < 5; ++r) scaled.row(r) *= s * (1.0 + r);
    const Matrix b = normalize_embeddings(Tensor::constant(scaled)).value();
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-9);
  }
  CHECK(normalize_embeddings(Tensor::constant(Matrix::Constant(1, 4, 2.0))).value().isZero());
  for (Index r = 0; r < 5; ++r) {
    CHECK(std::abs(a.row(r).mean()) < 1e-12);
    CHECK(a.row(r).squaredNorm() / 8.0 == doctest::Approx(1.0));
  }
}

TEST_CASE("symmetric KL is non-negative and zero on equal inputs") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    const Tensor lp = log_softmax_rows(Tensor::constant(random_matrix(3, 6, rng)));
    const Tensor lq = log_softmax_rows(Tensor::constant(random_matrix(3, 6, rng)));
    CHECK(symmetric_kl(lp, lq).item() >= 0.0);
    CHECK(symmetric_kl(lp, lq).item() == doctest::Approx(symmetric_kl(lq, lp).item()));
    CHECK(symmetric_kl(lp, lp).item() == 0.0);
  }
}

TEST_CASE("symmetric KL gradient matches finite differences") {
  std::mt19937_64 rng(3);
  const Tensor lp = log_softmax_rows(Tensor::constant(random_matrix(2, 5, rng)));
  Tensor x = Tensor::parameter(random_matrix(2, 5, rng));
  auto f = [&] { return symmetric_kl(lp, log_softmax_rows(x)); };
  const Matrix g = gradients(f(), {x})[0];
  const Matrix n = dal::test::numeric_gradient(x, [&] { return f().item(); });
  CHECK(dal::test::gradient_error(g, n, 1e-8, 1e-5) <= 1.0);
}

TEST_CASE("projection onto the epsilon ball") {
  Matrix d(2, 2);
  d << 3, 4, 0.1, 0;
  const Matrix p = project_to_ball(d, 1.0);
  CHECK(p.row(0).norm() == doctest::Approx(1.0));
  CHECK(p(0, 0) == doctest::Approx(0.6));
  CHECK(p.row(1) == d.row(1));
}

TEST_CASE("lambda = 0 reproduces the plain loss bitwise") {
  const MaskedBatch b = batch();
  SiftConfig cfg;
  cfg.enabled = true;
  cfg.lambda = 0.0;
  for (auto objective : {Objective::mlm, Objective::arlm}) {
    Model m(tiny(), 4);
    m.set_training(true);
    m.reseed_dropout(9);
    const double plain = objective == Objective::mlm ? m.forward_mlm(b).item() : m.forward_arlm(b.original).item();
    m.reseed_dropout(9);
    std::mt19937_64 rng(1);
    const SiftLoss s = sift_loss(m, b, objective, cfg, rng);
    CHECK(s.total.item() == plain);
    CHECK(s.adversarial.item() >= 0.0);
    CHECK(m.training());
  }
}

TEST_CASE("adversarial term is small for tiny epsilon and grows with it") {
  const MaskedBatch b = batch();
  Model m(tiny(), 5);
  SiftConfig cfg;
  cfg.enabled = true;
  cfg.epsilon = 1e-8;
  std::mt19937_64 rng(2);
  const double tiny_eps = sift_loss(m, b, Objective::mlm, cfg, rng).adversarial.item();
  CHECK(tiny_eps >= 0.0);
  CHECK(tiny_eps < 1e-10);
  cfg.epsilon = 1.0;
  cfg.ascent_lr = 0.5;
  cfg.ascent_steps = 2;
  const double big = sift_loss(m, b, Objective::mlm, cfg, rng).adversarial.item();
  CHECK(big > tiny_eps);
}

TEST_CASE("adversarial perturbation stays in the ball and ascends") {
  const MaskedBatch b = batch();
  Model m(tiny(), 6);
  SiftConfig cfg;
  cfg.epsilon = 0.5;
  cfg.ascent_lr = 0.1;
  cfg.ascent_steps = 3;
  std::mt19937_64 rng(7);
  const auto input = b.corrupted_row(0);
  const auto original = b.original_row(0);
  const Matrix delta = find_adversarial_perturbation(m, input, original, b.masked[0], Objective::mlm, cfg, rng);
  for (Index r = 0; r < delta.rows(); ++r) CHECK(delta.row(r).norm() <= 0.5 + 1e-12);
  // The found direction beats a random one of the same per-token size.
  std::mt19937_64 r2(8);
  Matrix random = random_matrix(delta.rows(), delta.cols(), r2);
  for (Index r = 0; r < random.rows(); ++r) random.row(r) *= delta.row(r).norm() / random.row(r).norm();
  NoGradGuard ng;
  const double adv =
      perturbation_divergence(m, input, original, b.masked[0], Objective::mlm, Tensor::constant(delta)).item();
  const double rnd =
      perturbation_divergence(m, input, original, b.masked[0], Objective::mlm, Tensor::constant(random)).item();
  CHECK(adv > rnd);
}

TEST_CASE("sift loss gradient reaches the parameters") {
  const MaskedBatch b = batch();
  Model m(tiny(), 7);
  SiftConfig cfg;
  cfg.enabled = true;
  cfg.epsilon = 0.1;
  std::mt19937_64 rng(3);
  const SiftLoss s = sift_loss(m, b, Objective::mlm, cfg, rng);
  const auto params = m.named_parameters();
  const auto with = gradients(s.total, {params[0].second})[0];
  const auto without = gradients(s.task, {params[0].second})[0];
  CHECK((with - without).cwiseAbs().maxCoeff() > 0.0);
}
