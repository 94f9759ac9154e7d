#include "dal/data.hpp"
#include "dal/errors.hpp"
#include "dal/model.hpp"
#include "dal/ops.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace dal;
using dal::test::gradient_error;
using dal::test::numeric_gradient;
using dal::test::random_matrix;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ffn_size = 16;
  c.k = 4;
  c.vocab_size = 11;
  c.n_emd = 2;
  c.max_len = 8;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

MaskedBatch tiny_batch() {
  const std::vector<std::vector<Index>> seqs{{5, 6, 7, 8}, {9, 10, 5}};
  MaskedBatch b = make_batch(seqs, 6);
  b.corrupted(0, 2) = kMaskId;
  b.corrupted(1, 1) = 7;
  b.masked = {{2, 3}, {1}};
  return b;
}

void check_all_gradients(Model& model, const std::function<Tensor()>& loss) {
  model.set_training(false);
  const auto params = model.named_parameters();
  std::vector<Tensor> wrt;
  for (const auto& [name, t] : params) wrt.push_back(t);
  const auto analytic = gradients(loss(), wrt);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix numeric = numeric_gradient(wrt[i], [&] {
      NoGradGuard g;
      return loss().item();
    });
    CHECK_MESSAGE(gradient_error(analytic[i], numeric, 1e-5, 1e-3) <= 1.0, params[i].first);
  }
}

}  // namespace

TEST_CASE("parameter count formula matches the built model") {
  for (int variant = 0; variant < 16; ++variant) {
    ModelConfig c = tiny();
    c.ablations.emd = variant & 1;
    c.ablations.c2p = variant & 2;
    c.ablations.p2c = variant & 4;
    c.share_projection = variant & 8;
    c.emd_shared = variant % 3 == 0;
    c.abs_pos_at_input = variant % 5 == 0;
    const Model m(c, 1);
    CHECK(m.parameter_count() == parameter_count(c));
  }
}

TEST_CASE("unused position parameters are not allocated") {
  ModelConfig c = tiny();
  c.ablations = {false, false, false};
  const Model m(c, 2);
  CHECK_FALSE(m.params().abs_positions.defined());
  CHECK_FALSE(m.params().relpos.embeddings.defined());
  CHECK(m.params().decoder.size() == 1);
  c.emd_shared = false;
  c.ablations.emd = true;
  CHECK(Model(c, 2).params().decoder.size() == 2);
}

TEST_CASE("same seed builds identical weights") {
  const Model a(tiny(), 42), b(tiny(), 42), c(tiny(), 43);
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_same = all_same && pa[i].second.value() == pb[i].second.value();
    any_diff = any_diff || pa[i].second.value() != pc[i].second.value();
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("prediction shapes and targets") {
  Model m(tiny(), 3);
  const std::vector<Index> ids{kClsId, 5, 6, 7, kSepId, kPadId};
  const std::vector<Index> masked{2};
  const Prediction p = m.predict(ids, ids, masked, Objective::mlm);
  CHECK(p.logits.rows() == 1);
  CHECK(p.logits.cols() == 11);
  CHECK(p.targets == std::vector<Index>{6});
  const Prediction q = m.predict(ids, ids, {}, Objective::arlm);
  CHECK(q.targets == std::vector<Index>{5, 6, 7, kSepId});
  const std::vector<Index> bad{kClsId, 11};
  CHECK_THROWS_AS(m.predict(bad, bad, {}, Objective::arlm), InputError);
  CHECK_THROWS_AS(m.predict(ids, ids, {}, Objective::mlm), ContractError);
}

TEST_CASE("naive and efficient kernels give the same model output") {
  Model m(tiny(), 4);
  const MaskedBatch b = tiny_batch();
  const double efficient = m.forward_mlm(b).item();
  m.set_kernel(KernelKind::naive);
  const double naive = m.forward_mlm(b).item();
  CHECK(std::abs(efficient - naive) < 1e-12);
}

TEST_CASE("end-to-end gradients match finite differences") {
  SUBCASE("mlm, shared decoder") {
    Model m(tiny(), 5);
    const MaskedBatch b = tiny_batch();
    check_all_gradients(m, [&] { return m.forward_mlm(b); });
  }
  SUBCASE("arlm, separate decoder layers, shared projections") {
    ModelConfig c = tiny();
    c.emd_shared = false;
    c.share_projection = true;
    c.mode = Mode::arlm;
    Model m(c, 6);
    const MaskedBatch b = tiny_batch();
    check_all_gradients(m, [&] { return m.forward_arlm(b.original); });
  }
  SUBCASE("absolute positions at the input, no EMD") {
    ModelConfig c = tiny();
    c.ablations.emd = false;
    c.ablations.p2c = false;
    c.abs_pos_at_input = true;
    Model m(c, 7);
    const MaskedBatch b = tiny_batch();
    check_all_gradients(m, [&] { return m.forward_mlm(b); });
  }
}

TEST_CASE("one EMD layer with zero positions is the plain head") {
  ModelConfig c = tiny();
  c.n_emd = 1;
  Model m(c, 8);
  std::mt19937_64 rng(1);
  const Tensor h = Tensor::constant(random_matrix(6, 8, rng));
  const AttentionMask mask = AttentionMask::bidirectional();
  const Tensor zero = Tensor::constant(Matrix::Zero(6, 8));
  CHECK(m.emd_decode(h, zero, mask).value() == m.plain_decode(h, mask).value());
}

TEST_CASE("EMD keys and values come from the encoder output") {
  ModelConfig c = tiny();
  Model m(c, 9);
  std::mt19937_64 rng(2);
  const Tensor h = Tensor::constant(random_matrix(5, 8, rng));
  const Tensor pos = m.abs_positions(5);
  const AttentionMask mask = AttentionMask::bidirectional();
  // Changing the absolute positions changes the output, so they reach the queries.
  const Matrix base = m.emd_decode(h, pos, mask).value();
  const Matrix moved = m.emd_decode(h, pos * 2.0, mask).value();
  CHECK((base - moved).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("ARLM logits ignore later tokens") {
  ModelConfig c = tiny();
  c.mode = Mode::arlm;
  Model m(c, 10);
  const std::vector<Index> ids{kClsId, 5, 6, 7, 8, kSepId};
  const Prediction clean = m.predict(ids, ids, {}, Objective::arlm);
  for (Index t = 0; t < 4; ++t) {
    Matrix delta = Matrix::Zero(6, 8);
    delta.bottomRows(6 - t - 1).setConstant(1e-3);
    const Tensor d = Tensor::constant(delta);
    const Prediction p = m.predict(ids, ids, {}, Objective::arlm, &d);
    CHECK(p.logits.value().topRows(t + 1) == clean.logits.value().topRows(t + 1));
    CHECK(p.logits.value().row(t + 1) != clean.logits.value().row(t + 1));
  }
}

TEST_CASE("dropout only in training mode") {
  ModelConfig c = tiny();
  c.dropout = 0.3;
  Model m(c, 11);
  const MaskedBatch b = tiny_batch();
  const double eval_a = m.forward_mlm(b).item();
  const double eval_b = m.forward_mlm(b).item();
  CHECK(eval_a == eval_b);
  m.set_training(true);
  m.reseed_dropout(1);
  const double train_a = m.forward_mlm(b).item();
  m.reseed_dropout(1);
  CHECK(m.forward_mlm(b).item() == train_a);
  CHECK(train_a != eval_a);
}

TEST_CASE("attention patterns are row stochastic") {
  Model m(tiny(), 12);
  const std::vector<Index> ids{kClsId, 5, 6, 7, kSepId};
  const auto pats = m.attention_patterns(ids);
  REQUIRE(pats.size() == 2);
  REQUIRE(pats[0].size() == 2);
  for (const auto& layer : pats) {
    for (const auto& head : layer) {
      CHECK(head.rows() == 5);
      CHECK(head.cols() == 5);
      for (Index r = 0; r < 5; ++r) CHECK(std::abs(head.row(r).sum() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("cross entropy of uniform logits is log V") {
  const Tensor logits = Tensor::constant(Matrix::Zero(3, 7));
  const std::vector<Index> targets{0, 3, 6};
  CHECK(cross_entropy(logits, targets).item() == doctest::Approx(std::log(7.0)));
}
