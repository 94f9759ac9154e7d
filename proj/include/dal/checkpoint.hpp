#pragma once

#include "dal/config.hpp"
#include "dal/data.hpp"
#include "dal/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dal {

// Binary layout, all integers little-endian:
//   "DAL1"
//   u64 metadata length, metadata bytes (canonical JSON: model config, vocab)
//   per tensor until EOF:
//     u32 name length, name bytes, u32 rank, u64 extents[rank], f64 data[]
struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab;  // corpus tokens in id order
  std::vector<std::pair<std::string, Matrix>> tensors;
};

void save_checkpoint(const Model& model, const Vocab& vocab, const std::filesystem::path& path);
// Throws FormatError, VersionError, TruncatedError.
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Copies tensors by name; ShapeError names the first mismatching tensor.
void load_parameters(Model& model, const Checkpoint& checkpoint);
// Model built from the stored config with the stored weights.
Model load_model(const Checkpoint& checkpoint);

}  // namespace dal
