#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regmae/error.hpp"

namespace regmae::model {

/// Block layout of the encoder-decoder. AM = attention encoder + SSM decoder,
/// MA = SSM encoder + attention decoder, ALTERNATE interleaves starting with
/// attention, MAMBA is SSM everywhere.
enum class Configuration { Mamba, Alternate, AM, MA };
enum class Operator { Attention, Ssm };
/// Token order of the selective scan over the 4D lattice.
enum class ScanOrder { TimeMajor, SpaceMajor };

std::string_view to_string(Configuration c);
std::string_view to_string(Operator o);
Configuration configuration_from_string(std::string_view s);

struct ModelConfig {
  int embed_dim = 32;
  std::vector<int> stage_depths{2, 2};
  std::array<int, 4> window{4, 4, 4, 2};  // patches along x, y, z, t
  int ssm_state_dim = 8;
  int heads = 4;
  Configuration configuration = Configuration::MA;
  int patch_size = 6;
  int t_patch = 4;
  int mlp_ratio = 2;
  int ssm_expand = 2;
  bool skip_connections = true;
  ScanOrder scan_order = ScanOrder::TimeMajor;

  void validate() const;
  int stage_dim(int stage) const { return embed_dim << stage; }
  int stages() const { return int(stage_depths.size()); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;

  /// Desk-scale default used by tests and the synthetic pipeline.
  static ModelConfig desk();
  /// Larger preset in the several-million-parameter range. No claim of
  /// matching any published network exactly.
  static ModelConfig large_preset();
};

struct OperatorLayout {
  std::vector<std::vector<Operator>> encoder;  // per stage, shallow to deep
  std::vector<std::vector<Operator>> decoder;  // per stage, deep to shallow

  std::vector<Operator> flat_encoder() const;
  std::vector<Operator> flat_decoder() const;
};

OperatorLayout assign_operators(const ModelConfig& cfg);

}  // namespace regmae::model
