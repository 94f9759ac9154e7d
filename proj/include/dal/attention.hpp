#pragma once

#include "dal/config.hpp"
#include "dal/relpos.hpp"
#include "dal/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace dal {

using NamedTensor = std::pair<std::string, Tensor>;

// Projections of one disentangled attention layer. Matrices act on row
// vectors (Q = H W). With share_projection the position projections alias the
// content ones: same node, same gradient accumulator.
struct AttentionParams {
  Tensor w_qc, w_kc, w_vc;
  Tensor w_qr, w_kr;  // undefined when the term that needs them is disabled
  Tensor w_out, b_out;
  bool share_projection = false;
  bool enable_c2p = true;
  bool enable_p2c = true;
  Index heads = 1;

  Index hidden() const { return w_qc.rows(); }
  Index head_size() const { return hidden() / heads; }
  // Number of score terms summed into the attention logits.
  int term_count() const { return 1 + (enable_c2p ? 1 : 0) + (enable_p2c ? 1 : 0); }
  // 1 / sqrt(terms * head_size); 1/sqrt(3d) per head for the full model.
  double score_scale() const;

  std::vector<NamedTensor> named_parameters(const std::string& prefix) const;
};

Matrix truncated_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng);

AttentionParams make_attention_params(Index hidden, Index heads, bool share_projection, bool enable_c2p,
                                      bool enable_p2c, double init_std, std::mt19937_64& rng);

// Per-head score matrices, before scaling. Disabled terms hold exact zeros.
struct AttentionScores {
  std::vector<Tensor> c2c;
  std::vector<Tensor> c2p;
  std::vector<Tensor> p2c;
  std::vector<Tensor> total;
  double scale = 1.0;
};

enum class KernelKind { naive, efficient };

enum class KernelFault {
  none,
  // Position-to-content gathered with delta(i, j) instead of delta(j, i).
  swap_delta,
};

struct KernelOptions {
  KernelFault fault = KernelFault::none;
  // Receives every position-side buffer the kernel allocates.
  AllocationMeter* position_meter = nullptr;
};

// Reference kernel: materializes the relative embedding of every (i, j) pair
// and evaluates each term as a per-pair inner product. O(N^2 d) memory.
AttentionScores scores_naive(const Tensor& query_states, const Tensor& key_states, const AttentionParams& params,
                             const RelPosTable& table, const DeltaMatrix& dm, const KernelOptions& options = {});

// Projects every query against all 2k relative keys once (N x 2k), then
// gathers by the delta matrix. Position-side memory is O(N k + k d).
AttentionScores scores_efficient(const Tensor& query_states, const Tensor& key_states,
                                 const AttentionParams& params, const RelPosTable& table, const DeltaMatrix& dm,
                                 const KernelOptions& options = {});

AttentionScores compute_scores(KernelKind kind, const Tensor& query_states, const Tensor& key_states,
                               const AttentionParams& params, const RelPosTable& table, const DeltaMatrix& dm,
                               const KernelOptions& options = {});

// Additive mask over an N x N score matrix. Masked entries get kMaskSentinel.
struct AttentionMask {
  bool causal = false;
  std::vector<bool> key_padding;  // empty: no padding

  static AttentionMask bidirectional(std::vector<bool> padding = {});
  static AttentionMask causal_mask(std::vector<bool> padding = {});
  Matrix additive(Index n) const;
};

struct AttendOptions {
  KernelKind kernel = KernelKind::efficient;
  KernelOptions kernel_options;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  // When set, receives the post-softmax weights of every head.
  std::vector<Matrix>* probabilities = nullptr;
};

// softmax(scale * (c2c + c2p + p2c) + mask) V per head; heads concatenated
// and passed through the output projection.
Tensor attend(const Tensor& query_states, const Tensor& key_states, const AttentionParams& params,
              const RelPosTable& table, const DeltaMatrix& dm, const AttentionMask& mask,
              const AttendOptions& options = {});

// Parameters added by disentanglement: 2 L d^2 + 2 k d, or 2 k d when the
// position projections are shared.
std::int64_t extra_param_count(const ModelConfig& config);

// Row-major CSV, 6 significant digits.
void write_attention_csv(const std::filesystem::path& path, const Matrix& probabilities);

struct PositionAllocation {
  Index length = 0;
  std::size_t naive_peak = 0;
  std::size_t efficient_peak = 0;
  std::size_t efficient_bound = 0;  // N * 2k + 2 * (2k * d)
};

// Runs both kernels without gradient tracking, metering the live size of
// position-side buffers. Single head.
PositionAllocation audit_position_allocation(Index length, Index k, Index hidden, std::uint64_t seed);

struct EquivalenceOptions {
  int seeds = 100;
  KernelFault fault = KernelFault::none;
  double score_tolerance = 1e-10;
  double gradient_tolerance = 1e-8;
};

struct PropertyResult {
  std::string name;
  bool passed = true;
  std::string detail;  // counterexample or summary
};

// Naive vs efficient kernel over seeded random problems covering
// N in 1..64, d in {8, 16}, k in {2, 4, 8}, all c2p/p2c combinations, with
// and without projection sharing; plus the allocation audit.
std::vector<PropertyResult> run_equivalence_suite(const EquivalenceOptions& options);

}  // namespace dal
