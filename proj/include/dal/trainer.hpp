#pragma once

#include "dal/config.hpp"
#include "dal/data.hpp"
#include "dal/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dal {

// Linear warmup from 0 to peak_lr over warmup_steps, then linear decay to 0
// at steps.
double learning_rate(std::int64_t step, const TrainConfig& config);

// Global L2 norm over every parameter gradient.
double gradient_norm(std::span<const NamedTensor> params);
// Rescales all gradients so their global norm is at most max_norm. Returns
// the norm before clipping.
double clip_gradients(std::span<const NamedTensor> params, double max_norm);

// Adam with decoupled weight decay. Decay applies to matrices only, never to
// biases or layer-norm gains (1 x d rows).
class AdamW {
 public:
  explicit AdamW(const TrainConfig& config);
  void step(std::span<const NamedTensor> params, double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  TrainConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
};

// JOINT mode alternates: even steps MLM, odd steps ARLM.
Objective objective_for_step(Mode mode, std::int64_t step);

struct TrainHooks {
  std::function<void(const Json&)> on_metrics;
  std::function<void(std::int64_t step)> on_checkpoint;
};

struct TrainResult {
  std::vector<Json> metrics;
  std::vector<std::uint64_t> batch_hashes;
  std::optional<double> final_mlm_loss;   // window-100 moving average
  std::optional<double> final_arlm_loss;  // window-100 moving average
  std::int64_t steps = 0;
};

// Deterministic given the seed. Throws DivergenceError (before touching the
// parameters) when the loss stops being finite.
TrainResult train(Model& model, const BatchStream& data, const TrainConfig& config, const SiftConfig& sift,
                  const TrainHooks& hooks = {});

// exp(mean next-token NLL) over the sequences wrapped as [CLS] .. [SEP].
double evaluate_ppl(Model& model, std::span<const std::vector<Index>> sequences, Index length,
                    Index batch_size = 16);

// Per-target NLL values in evaluation order, for detailed reports.
std::vector<double> evaluate_nll(Model& model, std::span<const std::vector<Index>> sequences, Index length,
                                 Index batch_size = 16);

struct PreparedData {
  Vocab vocab;
  std::vector<std::vector<Index>> train_sequences;
  std::vector<std::vector<Index>> eval_sequences;
};

// Tokenizes the corpus (and optional evaluation corpus) from the run config.
PreparedData prepare_data(const RunConfig& config, std::span<const std::string> documents,
                          std::span<const std::string> eval_documents = {});

BatchStream make_stream(const RunConfig& config, const PreparedData& data);

struct AblationRow {
  std::string variant;
  double final_mlm_loss = 0.0;
  double final_ppl = 0.0;
  std::int64_t steps = 0;
  std::uint64_t seed = 0;
  std::uint64_t batch_stream_hash = 0;
};

// full, -EMD, -C2P, -P2C, -(EMD+C2P), -(EMD+P2C), trained on the same batch
// stream from the same seed.
std::vector<AblationRow> run_ablation_suite(const RunConfig& base, const PreparedData& data,
                                            const std::function<void(const AblationRow&)>& on_row = {});

// Header: variant,final_mlm_loss,final_ppl,steps,seed
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows);

}  // namespace dal
