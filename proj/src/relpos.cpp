#include "dal/relpos.hpp"

#include "dal/errors.hpp"

#include <string>

namespace dal {

Index relative_distance(Index i, Index j, Index k) {
  if (k <= 0) throw ConfigError("maximum relative distance k must be positive, got " + std::to_string(k));
  if (i < 0 || j < 0) throw BoundsError("relative_distance: negative position");
  const Index offset = i - j;
  if (offset <= -k) return 0;
  if (offset >= k) return 2 * k - 1;
  return offset + k;
}

DeltaMatrix build_delta_matrix(Index length, Index k) {
  if (length < 1) throw ConfigError("delta matrix needs length >= 1, got " + std::to_string(length));
  DeltaMatrix dm;
  dm.k = k;
  dm.values.resize(length, length);
  for (Index i = 0; i < length; ++i) {
    for (Index j = 0; j < length; ++j) dm.values(i, j) = relative_distance(i, j, k);
  }
  return dm;
}

std::shared_ptr<const DeltaMatrix> DeltaCache::get(Index length, Index k) {
  std::lock_guard lock(*mutex_);
  auto& slot = cache_[{length, k}];
  if (!slot) slot = std::make_shared<const DeltaMatrix>(build_delta_matrix(length, k));
  return slot;
}

RelPosTable make_relpos_table(Index k, Matrix embeddings) {
  if (k <= 0) throw ConfigError("maximum relative distance k must be positive, got " + std::to_string(k));
  if (embeddings.rows() != 2 * k) {
    throw ShapeError("relative position table needs 2k = " + std::to_string(2 * k) + " rows, got " +
                     std::to_string(embeddings.rows()));
  }
  return RelPosTable{k, Tensor::parameter(std::move(embeddings))};
}

std::int64_t max_reach(std::int64_t k, std::int64_t layers) {
  if (k < 1 || layers < 1) throw ConfigError("max_reach needs k >= 1 and L >= 1");
  return 2 * (k - 1) * layers;
}

}  // namespace dal
