#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "regmae/autodiff/tensor.hpp"

namespace regmae::ad {

/// Checkpoint on disk: `<stem>.bin` holds the float32 parameter arrays back to
/// back; `<stem>.json` lists name, shape, byte offset and the config hash.
struct CheckpointInfo {
  std::string config_hash;
  std::string configuration;
};

template <class S>
void save_checkpoint(const ParameterStore<S>& params, const CheckpointInfo& info,
                     const std::filesystem::path& stem);

struct LoadOptions {
  /// Parameters present in the store but absent from the file stay as-is.
  bool allow_missing = false;
  /// Only parameters whose name starts with this prefix are loaded.
  std::string prefix;
};

/// Loads parameters by name. Refuses a file whose config hash differs from
/// `expected_hash` (when non-empty) or whose shapes disagree.
template <class S>
CheckpointInfo load_checkpoint(ParameterStore<S>& params, const std::filesystem::path& stem,
                               const std::string& expected_hash, const LoadOptions& opts = {});

/// 64-bit FNV-1a, hex encoded. Used for config and input hashes.
std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

}  // namespace regmae::ad
