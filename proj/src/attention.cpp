#include "dal/attention.hpp"

#include "dal/errors.hpp"
#include "dal/ops.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dal {

namespace {

void check_inputs(const Tensor& query_states, const Tensor& key_states, const AttentionParams& params,
                  const RelPosTable& table, const DeltaMatrix& dm) {
  const Index d = params.hidden();
  if (query_states.cols() != d || key_states.cols() != d) {
    throw ConfigError("attention: hidden states " + shape_string(query_states.rows(), query_states.cols()) +
                      " / " + shape_string(key_states.rows(), key_states.cols()) + " do not match d = " +
                      std::to_string(d));
  }
  if (query_states.rows() != key_states.rows()) {
    throw DimensionError("attention: query and key sequences differ in length");
  }
  if (query_states.rows() < 1) throw DimensionError("attention: empty sequence");
  if (dm.length() != query_states.rows()) {
    throw DimensionError("attention: delta matrix is " + std::to_string(dm.length()) + " long, sequence is " +
                         std::to_string(query_states.rows()));
  }
  if ((params.enable_c2p || params.enable_p2c) && table.dim() != d) {
    throw ConfigError("attention: relative position table width " + std::to_string(table.dim()) +
                      " does not match d = " + std::to_string(d));
  }
  if ((params.enable_c2p || params.enable_p2c) && dm.k != table.k) {
    throw ConfigError("attention: delta matrix built for k = " + std::to_string(dm.k) + ", table has k = " +
                      std::to_string(table.k));
  }
}

struct ContentProjections {
  Tensor q, k;
};

ContentProjections project_content(const Tensor& query_states, const Tensor& key_states,
                                   const AttentionParams& params) {
  return {matmul(query_states, params.w_qc), matmul(key_states, params.w_kc)};
}

Tensor zeros_like_scores(Index n) { return Tensor::constant(Matrix::Zero(n, n)); }

Tensor sum_terms(const Tensor& c2c, const Tensor& c2p, const Tensor& p2c, const AttentionParams& params) {
  Tensor total = c2c;
  if (params.enable_c2p) total = add(total, c2p);
  if (params.enable_p2c) total = add(total, p2c);
  return total;
}

}  // namespace

double AttentionParams::score_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(term_count()) * static_cast<double>(head_size()));
}

std::vector<NamedTensor> AttentionParams::named_parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out{{prefix + "w_qc", w_qc}, {prefix + "w_kc", w_kc}, {prefix + "w_vc", w_vc}};
  if (!share_projection) {
    if (w_qr.defined()) out.emplace_back(prefix + "w_qr", w_qr);
    if (w_kr.defined()) out.emplace_back(prefix + "w_kr", w_kr);
  }
  out.emplace_back(prefix + "w_out", w_out);
  out.emplace_back(prefix + "b_out", b_out);
  return out;
}

Matrix truncated_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    m.data()[i] = z * stddev;
  }
  return m;
}

AttentionParams make_attention_params(Index hidden, Index heads, bool share_projection, bool enable_c2p,
                                      bool enable_p2c, double init_std, std::mt19937_64& rng) {
  if (heads < 1 || hidden % heads != 0) {
    throw ConfigError("attention: heads = " + std::to_string(heads) + " must divide d = " + std::to_string(hidden));
  }
  AttentionParams p;
  p.heads = heads;
  p.share_projection = share_projection;
  p.enable_c2p = enable_c2p;
  p.enable_p2c = enable_p2c;
  p.w_qc = Tensor::parameter(truncated_normal(hidden, hidden, init_std, rng));
  p.w_kc = Tensor::parameter(truncated_normal(hidden, hidden, init_std, rng));
  p.w_vc = Tensor::parameter(truncated_normal(hidden, hidden, init_std, rng));
  if (share_projection) {
    if (enable_p2c) p.w_qr = p.w_qc;
    if (enable_c2p) p.w_kr = p.w_kc;
  } else {
    if (enable_p2c) p.w_qr = Tensor::parameter(truncated_normal(hidden, hidden, init_std, rng));
    if (enable_c2p) p.w_kr = Tensor::parameter(truncated_normal(hidden, hidden, init_std, rng));
  }
  p.w_out = Tensor::parameter(truncated_normal(hidden, hidden, init_std, rng));
  p.b_out = Tensor::parameter(Matrix::Zero(1, hidden));
  return p;
}

AttentionScores scores_naive(const Tensor& query_states, const Tensor& key_states, const AttentionParams& params,
                             const RelPosTable& table, const DeltaMatrix& dm, const KernelOptions& options) {
  check_inputs(query_states, key_states, params, table, dm);
  const Index n = query_states.rows();
  const Index hs = params.head_size();
  const auto pairs = static_cast<std::size_t>(n * n);

  // Row i*n + j of every per-pair matrix belongs to the pair (i, j).
  std::vector<Index> query_of(pairs), key_of(pairs), delta_ij(pairs), delta_ji(pairs);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const auto r = static_cast<std::size_t>(i * n + j);
      query_of[r] = i;
      key_of[r] = j;
      delta_ij[r] = dm(i, j);
      delta_ji[r] = dm(j, i);
    }
  }

  const ContentProjections content = project_content(query_states, key_states, params);
  AttentionScores out;
  out.scale = params.score_scale();
  for (Index h = 0; h < params.heads; ++h) {
    const Tensor qc = col_slice(content.q, h * hs, hs);
    const Tensor kc = col_slice(content.k, h * hs, hs);
    const Tensor q_pairs = gather_rows(qc, query_of);
    const Tensor k_pairs = gather_rows(kc, key_of);
    const Tensor c2c = reshape(rowwise_dot(q_pairs, k_pairs), n, n);

    Tensor c2p = zeros_like_scores(n);
    if (params.enable_c2p) {
      const Tensor w = col_slice(params.w_kr, h * hs, hs);
      Tensor kr, rel;
      {
        AllocationMeter::Scope scope(options.position_meter);
        kr = matmul(table.embeddings, w);
        rel = gather_rows(kr, delta_ij);  // K_r[delta(i, j)] for every pair
      }
      c2p = reshape(rowwise_dot(q_pairs, rel), n, n);
    }

    Tensor p2c = zeros_like_scores(n);
    if (params.enable_p2c) {
      const Tensor w = col_slice(params.w_qr, h * hs, hs);
      Tensor qr, rel;
      {
        AllocationMeter::Scope scope(options.position_meter);
        qr = matmul(table.embeddings, w);
        rel = gather_rows(qr, delta_ji);  // Q_r[delta(j, i)] for every pair
      }
      p2c = reshape(rowwise_dot(k_pairs, rel), n, n);
    }

    out.total.push_back(sum_terms(c2c, c2p, p2c, params));
    out.c2c.push_back(c2c);
    out.c2p.push_back(c2p);
    out.p2c.push_back(p2c);
  }
  return out;
}

AttentionScores scores_efficient(const Tensor& query_states, const Tensor& key_states,
                                 const AttentionParams& params, const RelPosTable& table, const DeltaMatrix& dm,
                                 const KernelOptions& options) {
  check_inputs(query_states, key_states, params, table, dm);
  const Index n = query_states.rows();
  const Index hs = params.head_size();
  const ContentProjections content = project_content(query_states, key_states, params);

  // p2c[i, j] = (K_c Q_r^T)[j, delta(j, i)], i.e. the row gather of K_c Q_r^T
  // by delta itself, transposed.
  const IndexMatrix swapped = options.fault == KernelFault::swap_delta ? IndexMatrix(dm.values.transpose())
                                                                       : IndexMatrix();
  const IndexMatrix& p2c_index = options.fault == KernelFault::swap_delta ? swapped : dm.values;

  AttentionScores out;
  out.scale = params.score_scale();
  for (Index h = 0; h < params.heads; ++h) {
    const Tensor qc = col_slice(content.q, h * hs, hs);
    const Tensor kc = col_slice(content.k, h * hs, hs);
    const Tensor c2c = matmul_nt(qc, kc);

    const Tensor w_kr = params.enable_c2p ? col_slice(params.w_kr, h * hs, hs) : Tensor();
    const Tensor w_qr = params.enable_p2c ? col_slice(params.w_qr, h * hs, hs) : Tensor();
    Tensor kr, qr;
    {
      AllocationMeter::Scope scope(options.position_meter);
      if (params.enable_c2p) kr = matmul(table.embeddings, w_kr);
      if (params.enable_p2c) qr = matmul(table.embeddings, w_qr);
    }

    Tensor c2p = zeros_like_scores(n);
    if (params.enable_c2p) {
      Tensor by_distance;  // N x 2k
      {
        AllocationMeter::Scope scope(options.position_meter);
        by_distance = matmul_nt(qc, kr);
      }
      c2p = gather_along_rows(by_distance, dm.values);
    }

    Tensor p2c = zeros_like_scores(n);
    if (params.enable_p2c) {
      Tensor by_distance;  // N x 2k, row j = K_c[j] Q_r^T
      {
        AllocationMeter::Scope scope(options.position_meter);
        by_distance = matmul_nt(kc, qr);
      }
      p2c = transpose(gather_along_rows(by_distance, p2c_index));
    }

    out.total.push_back(sum_terms(c2c, c2p, p2c, params));
    out.c2c.push_back(c2c);
    out.c2p.push_back(c2p);
    out.p2c.push_back(p2c);
  }
  return out;
}

AttentionScores compute_scores(KernelKind kind, const Tensor& query_states, const Tensor& key_states,
                               const AttentionParams& params, const RelPosTable& table, const DeltaMatrix& dm,
                               const KernelOptions& options) {
  if (kind == KernelKind::naive) return scores_naive(query_states, key_states, params, table, dm, options);
  return scores_efficient(query_states, key_states, params, table, dm, options);
}

AttentionMask AttentionMask::bidirectional(std::vector<bool> padding) {
  AttentionMask m;
  m.key_padding = std::move(padding);
  return m;
}

AttentionMask AttentionMask::causal_mask(std::vector<bool> padding) {
  AttentionMask m;
  m.causal = true;
  m.key_padding = std::move(padding);
  return m;
}

Matrix AttentionMask::additive(Index n) const {
  if (!key_padding.empty() && static_cast<Index>(key_padding.size()) != n) {
    throw DimensionError("attention mask: padding covers " + std::to_string(key_padding.size()) +
                         " positions, sequence has " + std::to_string(n));
  }
  Matrix m = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const bool padded = !key_padding.empty() && key_padding[static_cast<std::size_t>(j)];
      if ((causal && j > i) || padded) m(i, j) = kMaskSentinel;
    }
  }
  return m;
}

Tensor attend(const Tensor& query_states, const Tensor& key_states, const AttentionParams& params,
              const RelPosTable& table, const DeltaMatrix& dm, const AttentionMask& mask,
              const AttendOptions& options) {
  const AttentionScores scores =
      compute_scores(options.kernel, query_states, key_states, params, table, dm, options.kernel_options);
  const Index n = query_states.rows();
  const Index hs = params.head_size();
  const bool masked = mask.causal || !mask.key_padding.empty();
  const Tensor additive = masked ? Tensor::constant(mask.additive(n)) : Tensor();
  const Tensor values = matmul(key_states, params.w_vc);

  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<std::size_t>(params.heads));
  for (Index h = 0; h < params.heads; ++h) {
    Tensor logits = scale(scores.total[static_cast<std::size_t>(h)], scores.scale);
    if (masked) logits = add(logits, additive);
    Tensor probs = softmax_rows(logits);
    if (options.probabilities != nullptr) options.probabilities->push_back(probs.value());
    if (options.dropout > 0.0 && options.rng != nullptr) probs = dropout(probs, options.dropout, *options.rng);
    contexts.push_back(matmul(probs, col_slice(values, h * hs, hs)));
  }
  const Tensor context = params.heads == 1 ? contexts.front() : concat_cols(contexts);
  return add_row(matmul(context, params.w_out), params.b_out);
}

std::int64_t extra_param_count(const ModelConfig& config) {
  const std::int64_t table = 2 * config.k * config.hidden;
  if (config.share_projection) return table;
  return 2 * config.layers * config.hidden * config.hidden + table;
}

void write_attention_csv(const std::filesystem::path& path, const Matrix& probabilities) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << std::setprecision(12);
  for (Index i = 0; i < probabilities.rows(); ++i) {
    for (Index j = 0; j < probabilities.cols(); ++j) {
      if (j) os << ',';
      os << probabilities(i, j);
    }
    os << '\n';
  }
}

PositionAllocation audit_position_allocation(Index length, Index k, Index hidden, std::uint64_t seed) {
  NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix h(length, hidden);
  for (Index i = 0; i < h.size(); ++i) h.data()[i] = normal(rng);
  Matrix p(2 * k, hidden);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = normal(rng);

  const AttentionParams params = make_attention_params(hidden, 1, false, true, true, 0.5, rng);
  const RelPosTable table = make_relpos_table(k, p);
  const DeltaMatrix dm = build_delta_matrix(length, k);
  const Tensor states = Tensor::constant(h);

  PositionAllocation result;
  result.length = length;
  result.efficient_bound = static_cast<std::size_t>(length * 2 * k + 2 * (2 * k * hidden));
  {
    AllocationMeter meter;
    scores_naive(states, states, params, table, dm, {KernelFault::none, &meter});
    result.naive_peak = meter.peak();
  }
  {
    AllocationMeter meter;
    scores_efficient(states, states, params, table, dm, {KernelFault::none, &meter});
    result.efficient_peak = meter.peak();
  }
  return result;
}

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

struct TrialOutcome {
  double score_diff = 0.0;
  double grad_diff = 0.0;
};

TrialOutcome run_trial(std::uint64_t seed, Index n, Index d, Index k, Index heads, bool share, bool c2p, bool p2c,
                       KernelFault fault) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](Index r, Index c) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  const AttentionParams params = make_attention_params(d, heads, share, c2p, p2c, 0.5, rng);
  const RelPosTable table = make_relpos_table(k, random(2 * k, d));
  const Tensor states = Tensor::parameter(random(n, d));
  const DeltaMatrix dm = build_delta_matrix(n, k);
  std::vector<Matrix> weights;
  for (Index h = 0; h < heads; ++h) weights.push_back(random(n, n));

  const AttentionScores naive = scores_naive(states, states, params, table, dm);
  const AttentionScores fast = scores_efficient(states, states, params, table, dm, {fault, nullptr});

  TrialOutcome outcome;
  for (std::size_t h = 0; h < naive.total.size(); ++h) {
    outcome.score_diff = std::max({outcome.score_diff, max_abs_diff(naive.c2c[h].value(), fast.c2c[h].value()),
                                   max_abs_diff(naive.c2p[h].value(), fast.c2p[h].value()),
                                   max_abs_diff(naive.p2c[h].value(), fast.p2c[h].value()),
                                   max_abs_diff(naive.total[h].value(), fast.total[h].value())});
  }

  auto weighted_loss = [&](const AttentionScores& s) {
    Tensor loss;
    for (std::size_t h = 0; h < s.total.size(); ++h) {
      Tensor term = sum(hadamard(s.total[h], Tensor::constant(weights[h])));
      loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
  };
  std::vector<Tensor> wrt{states, table.embeddings};
  for (auto& [name, t] : params.named_parameters("")) wrt.push_back(t);
  const auto g_naive = gradients(weighted_loss(naive), wrt);
  const auto g_fast = gradients(weighted_loss(fast), wrt);
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    outcome.grad_diff = std::max(outcome.grad_diff, max_abs_diff(g_naive[i], g_fast[i]));
  }
  return outcome;
}

}  // namespace

std::vector<PropertyResult> run_equivalence_suite(const EquivalenceOptions& options) {
  PropertyResult scores{"scores_equal", true, ""};
  PropertyResult grads{"gradients_equal", true, ""};
  PropertyResult single{"single_token_edge", false, "N=1 not exercised"};
  double worst_score = 0.0;
  double worst_grad = 0.0;
  const Index ks[] = {2, 4, 8};

  for (int s = 0; s < options.seeds; ++s) {
    // 13 is coprime with 64, so the first 64 seeds visit every N in 1..64.
    const Index n = 1 + (static_cast<Index>(s) * 13) % 64;
    const Index d = (s % 2 == 0) ? 8 : 16;
    const Index k = ks[s % 3];
    const Index heads = (s / 2) % 2 == 0 ? 1 : 2;
    const bool share = (s / 4) % 2 == 1;
    for (int combo = 0; combo < 4; ++combo) {
      const bool c2p = (combo & 1) != 0;
      const bool p2c = (combo & 2) != 0;
      const auto seed = static_cast<std::uint64_t>(s) * 4 + static_cast<std::uint64_t>(combo);
      const TrialOutcome t = run_trial(seed, n, d, k, heads, share, c2p, p2c, options.fault);
      worst_score = std::max(worst_score, t.score_diff);
      worst_grad = std::max(worst_grad, t.grad_diff);
      std::ostringstream where;
      where << "seed=" << s << " N=" << n << " d=" << d << " k=" << k << " heads=" << heads
            << " share=" << share << " c2p=" << c2p << " p2c=" << p2c;
      if (scores.passed && !(t.score_diff <= options.score_tolerance)) {
        scores.passed = false;
        scores.detail = "counterexample " + where.str() + " max|diff|=" + std::to_string(t.score_diff);
      }
      if (grads.passed && !(t.grad_diff <= options.gradient_tolerance)) {
        grads.passed = false;
        grads.detail = "counterexample " + where.str() + " max|diff|=" + std::to_string(t.grad_diff);
      }
      if (n == 1) {
        single.passed = t.score_diff <= options.score_tolerance && t.grad_diff <= options.gradient_tolerance;
        single.detail = single.passed ? "N=1 agrees" : "N=1 disagrees at " + where.str();
      }
    }
  }
  std::ostringstream summary;
  summary << std::scientific << std::setprecision(2);
  if (scores.passed) {
    summary << "max|diff|=" << worst_score << " over " << options.seeds * 4 << " trials";
    scores.detail = summary.str();
  }
  if (grads.passed) {
    summary.str("");
    summary << "max|diff|=" << worst_grad;
    grads.detail = summary.str();
  }

  PropertyResult bound{"allocation_bound", true, ""};
  const PositionAllocation at64 = audit_position_allocation(64, 8, 16, 7);
  bound.passed = at64.efficient_peak <= at64.efficient_bound;
  bound.detail = "N=64 k=8 d=16 efficient peak " + std::to_string(at64.efficient_peak) + " <= " +
                 std::to_string(at64.efficient_bound);

  PropertyResult growth{"allocation_growth", true, ""};
  const PositionAllocation at32 = audit_position_allocation(32, 8, 16, 7);
  const PositionAllocation at128 = audit_position_allocation(128, 8, 16, 7);
  const double r32 = static_cast<double>(at32.naive_peak) / static_cast<double>(at32.efficient_peak);
  const double r128 = static_cast<double>(at128.naive_peak) / static_cast<double>(at128.efficient_peak);
  growth.passed = r128 > 4.0 * r32 && at32.efficient_peak <= at32.efficient_bound &&
                  at128.efficient_peak <= at128.efficient_bound;
  std::ostringstream g;
  g << std::fixed << std::setprecision(2) << "naive/efficient ratio N=32: " << r32 << ", N=128: " << r128;
  growth.detail = g.str();

  return {scores, grads, single, bound, growth};
}

}  // namespace dal
