#pragma once

// Checkpoint files:
//   "T2ICKPT1" | u64 header length | JSON header | u64 FNV-1a of the header
//   | raw little-endian doubles
// The header holds the effective config, its hash, trainer state, a tensor
// table (name, rows, cols, offset in doubles) and an FNV-1a digest of the
// payload. Writes go to a temp file that is renamed into place.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "t2icount/nn.hpp"

namespace t2i {

struct NamedTensor {
  std::string name;
  Mat<Real> value;
};

struct Checkpoint {
  nlohmann::json config;
  nlohmann::json state = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters are stored as "param/<name>".
void add_parameters(Checkpoint& ckpt, const nn::ParameterStore<Real>& store);
// Every store parameter must be present with the same shape.
void restore_parameters(const Checkpoint& ckpt, nn::ParameterStore<Real>& store);

}  // namespace t2i
