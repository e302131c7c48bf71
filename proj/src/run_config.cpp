#include "regmae/run_config.hpp"

#include <cstdlib>
#include <fstream>

#include "regmae/attribution.hpp"
#include "regmae/masking.hpp"
#include "regmae/model/config.hpp"
#include "regmae/training.hpp"

namespace regmae::config {

nlohmann::json defaults() {
  using nlohmann::json;
  masking::MaskSpec mask;
  mask.strategy = masking::Strategy::RegionAny;
  mask.region = "frontal";
  return json{
      {"seed", 0},
      {"data",
       {{"root", ""},
        {"manifest", "manifest.csv"},
        {"atlas", "atlas.nii.gz"},
        {"region_map", "region_map.csv"},
        {"template_mask", "template_mask.nii.gz"},
        {"patch_sets", ""},
        {"checkpoint", ""},
        {"roi_names", ""}}},
      {"synth",
       {{"subjects", 4},
        {"shape", 48},
        {"frames", 8},
        {"tr", 0.8},
        {"effect", 1.5},
        {"signal_region", "limbic"},
        {"labels_per_region", 2}}},
      {"preprocess",
       {{"target_tr", 0.8},
        {"fov", json::array()},
        {"resample_to_template", false},
        {"mask_fraction", 0.2},
        {"clip", 5.0},
        {"dice_threshold", 0.85},
        {"p99_threshold", 1.8862}}},
      {"atlas", {{"purity_threshold", 0.7}, {"majority_threshold", 0.5}}},
      {"mask", mask.to_json()},
      {"model", model::ModelConfig::desk().to_json()},
      {"pretrain", training::RunConfig::from_json(json::object(), training::Phase::Pretrain).to_json()},
      {"finetune", training::RunConfig::from_json(json::object(), training::Phase::Finetune).to_json()},
      {"attribution", [] {
         auto j = attribution::AttributionConfig{}.to_json();
         j["max_subjects"] = 0;
         return j;
       }()},
      {"stats", {{"input", ""}, {"metric", "auroc"}}},
  };
}

std::vector<std::string> unknown_keys(const nlohmann::json& j, const nlohmann::json& reference,
                                      const std::string& prefix) {
  std::vector<std::string> out;
  if (!j.is_object()) return out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!reference.is_object() || !reference.contains(it.key())) {
      out.push_back(key);
      continue;
    }
    const auto& ref = reference.at(it.key());
    if (ref.is_object()) {
      auto nested = unknown_keys(it.value(), ref, key);
      out.insert(out.end(), nested.begin(), nested.end());
    }
  }
  return out;
}

void set_dotted(nlohmann::json& j, const std::string& key, const nlohmann::json& value) {
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!part.empty(), ErrorKind::Config, "malformed config key '" + key + "'");
    require(node->is_object() && node->contains(part), ErrorKind::Config, "unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

nlohmann::json resolve(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  nlohmann::json cfg = defaults();
  if (!file.empty()) {
    std::ifstream in(file);
    require(bool(in), ErrorKind::Config, "cannot open config file " + file.string());
    nlohmann::json user;
    try {
      in >> user;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Config, "config file " + file.string() + " is not valid JSON: " + e.what());
    }
    require(user.is_object(), ErrorKind::Config, "config file must hold a JSON object");
    const auto unknown = unknown_keys(user, cfg);
    require(unknown.empty(), ErrorKind::Config, "unknown config key '" + (unknown.empty() ? "" : unknown.front()) + "'");
    cfg.merge_patch(user);
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::Config, "override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    set_dotted(cfg, key, value);
  }
  return cfg;
}

std::filesystem::path data_path(const nlohmann::json& cfg, const std::string& key) {
  const std::filesystem::path p = cfg.at("data").at(key).get<std::string>();
  if (p.empty() || p.is_absolute()) return p;
  const auto root = cfg.at("data").at("root").get<std::string>();
  if (!root.empty()) return std::filesystem::path(root) / p;
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return std::filesystem::path(env) / p;
  return p;
}

}  // namespace regmae::config
