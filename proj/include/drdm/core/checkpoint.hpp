#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "drdm/core/tensor.hpp"
#include "drdm/nn/layers.hpp"

namespace drdm {

/// Versioned on-disk container for parameter sets: a JSON header describing
/// metadata plus a named tensor table, followed by raw little-endian doubles.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;  // config_hash, rng_state, ...
  std::map<std::string, Tensor> tensors;

  void put_params(const nn::ParamList& params);
  /// Copy stored values into matching parameters (by name; shapes must agree).
  /// Throws if a parameter is missing from the checkpoint.
  void load_into(const nn::ParamList& params) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace drdm
