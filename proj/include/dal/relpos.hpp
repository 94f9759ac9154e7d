#pragma once

#include "dal/tensor.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <utility>

namespace dal {

// Clamped relative distance from token i to token j, in [0, 2k):
//   0          if i - j <= -k
//   2k - 1     if i - j >=  k
//   i - j + k  otherwise
Index relative_distance(Index i, Index j, Index k);

// N x N matrix of relative distances; entry (i, j) depends only on i - j and
// the diagonal is k.
struct DeltaMatrix {
  Index k = 0;
  IndexMatrix values;

  Index length() const { return values.rows(); }
  Index operator()(Index i, Index j) const { return values(i, j); }
};

DeltaMatrix build_delta_matrix(Index length, Index k);

// Immutable delta matrices shared by every layer, keyed by (N, k).
class DeltaCache {
 public:
  std::shared_ptr<const DeltaMatrix> get(Index length, Index k);

 private:
  std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
  std::map<std::pair<Index, Index>, std::shared_ptr<const DeltaMatrix>> cache_;
};

// Relative position embeddings P (2k x d), shared across all layers.
struct RelPosTable {
  Index k = 0;
  Tensor embeddings;

  Index dim() const { return embeddings.cols(); }
};

RelPosTable make_relpos_table(Index k, Matrix embeddings);

// Implicit attention span after stacking L layers, 2(k-1)L tokens.
std::int64_t max_reach(std::int64_t k, std::int64_t layers);

}  // namespace dal
