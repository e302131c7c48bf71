#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regmae/error.hpp"

namespace regmae::config {

/// Every recognised key with its default value, one section per module.
nlohmann::json defaults();

/// Keys of `j` absent from `reference`, as dotted paths.
std::vector<std::string> unknown_keys(const nlohmann::json& j, const nlohmann::json& reference,
                                      const std::string& prefix = {});

/// Defaults overlaid with the file (if any), then with `key=value`
/// overrides. Values parse as JSON when possible, else as strings. Unknown
/// keys raise a config error naming the key.
nlohmann::json resolve(const std::filesystem::path& file, const std::vector<std::string>& overrides);

void set_dotted(nlohmann::json& j, const std::string& key, const nlohmann::json& value);

/// Relative paths resolve against data.root, then $REGMAE_DATA_ROOT, then
/// the working directory.
std::filesystem::path data_path(const nlohmann::json& cfg, const std::string& key);

inline constexpr const char* kDataRootEnv = "REGMAE_DATA_ROOT";

}  // namespace regmae::config
