#include "regmae/model/config.hpp"

#include "regmae/autodiff/checkpoint.hpp"

namespace regmae::model {

std::string_view to_string(Configuration c) {
  switch (c) {
    case Configuration::Mamba: return "MAMBA";
    case Configuration::Alternate: return "ALTERNATE";
    case Configuration::AM: return "AM";
    case Configuration::MA: return "MA";
  }
  return "?";
}

std::string_view to_string(Operator o) { return o == Operator::Attention ? "ATT" : "SSM"; }

Configuration configuration_from_string(std::string_view s) {
  for (auto c : {Configuration::Mamba, Configuration::Alternate, Configuration::AM, Configuration::MA})
    if (to_string(c) == s) return c;
  fail(ErrorKind::Config, "unknown model configuration '" + std::string(s) + "' (expected MAMBA, ALTERNATE, AM or MA)");
}

void ModelConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, msg); };
  check(embed_dim >= 4 && embed_dim % 2 == 0, "model.embed_dim must be an even number >= 4");
  check(!stage_depths.empty(), "model.stage_depths must not be empty");
  for (int d : stage_depths) check(d >= 1, "model.stage_depths entries must be >= 1");
  check(heads >= 1, "model.heads must be >= 1");
  check(embed_dim % heads == 0, "model.embed_dim must be divisible by model.heads");
  for (int w : window) check(w >= 1, "model.window entries must be >= 1");
  check(ssm_state_dim >= 1, "model.ssm_state_dim must be >= 1");
  check(patch_size >= 1, "model.patch_size must be >= 1");
  check(t_patch >= 1, "model.t_patch must be >= 1");
  check(mlp_ratio >= 1, "model.mlp_ratio must be >= 1");
  check(ssm_expand >= 1, "model.ssm_expand must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"embed_dim", embed_dim},
          {"stage_depths", stage_depths},
          {"window", window},
          {"ssm_state_dim", ssm_state_dim},
          {"heads", heads},
          {"configuration", to_string(configuration)},
          {"patch_size", patch_size},
          {"t_patch", t_patch},
          {"mlp_ratio", mlp_ratio},
          {"ssm_expand", ssm_expand},
          {"skip_connections", skip_connections},
          {"scan_order", scan_order == ScanOrder::TimeMajor ? "TIME_MAJOR" : "SPACE_MAJOR"}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.stage_depths = j.value("stage_depths", c.stage_depths);
    c.window = j.value("window", c.window);
    c.ssm_state_dim = j.value("ssm_state_dim", c.ssm_state_dim);
    c.heads = j.value("heads", c.heads);
    c.configuration = configuration_from_string(j.value("configuration", std::string(to_string(c.configuration))));
    c.patch_size = j.value("patch_size", c.patch_size);
    c.t_patch = j.value("t_patch", c.t_patch);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.ssm_expand = j.value("ssm_expand", c.ssm_expand);
    c.skip_connections = j.value("skip_connections", c.skip_connections);
    const auto order = j.value("scan_order", std::string("TIME_MAJOR"));
    require(order == "TIME_MAJOR" || order == "SPACE_MAJOR", ErrorKind::Config,
            "model.scan_order must be TIME_MAJOR or SPACE_MAJOR");
    c.scan_order = order == "TIME_MAJOR" ? ScanOrder::TimeMajor : ScanOrder::SpaceMajor;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ModelConfig::hash() const { return ad::fnv1a_hex(to_json().dump()); }

ModelConfig ModelConfig::desk() { return {}; }

ModelConfig ModelConfig::large_preset() {
  ModelConfig c;
  c.embed_dim = 96;
  c.stage_depths = {2, 2, 2};
  c.heads = 6;
  c.ssm_state_dim = 16;
  return c;
}

std::vector<Operator> OperatorLayout::flat_encoder() const {
  std::vector<Operator> out;
  for (const auto& s : encoder) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<Operator> OperatorLayout::flat_decoder() const {
  std::vector<Operator> out;
  for (const auto& s : decoder) out.insert(out.end(), s.begin(), s.end());
  return out;
}

OperatorLayout assign_operators(const ModelConfig& cfg) {
  cfg.validate();
  OperatorLayout out;
  int k = 0;
  auto pick = [&](bool encoder) {
    switch (cfg.configuration) {
      case Configuration::Mamba: return Operator::Ssm;
      case Configuration::Alternate: return (k++ % 2 == 0) ? Operator::Attention : Operator::Ssm;
      case Configuration::AM: return encoder ? Operator::Attention : Operator::Ssm;
      case Configuration::MA: return encoder ? Operator::Ssm : Operator::Attention;
    }
    return Operator::Ssm;
  };
  for (int s = 0; s < cfg.stages(); ++s) {
    out.encoder.emplace_back();
    for (int b = 0; b < cfg.stage_depths[std::size_t(s)]; ++b) out.encoder.back().push_back(pick(true));
  }
  for (int s = cfg.stages(); s-- > 0;) {
    out.decoder.emplace_back();
    for (int b = 0; b < cfg.stage_depths[std::size_t(s)]; ++b) out.decoder.back().push_back(pick(false));
  }
  return out;
}

}  // namespace regmae::model
