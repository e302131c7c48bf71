#include "regmae/autodiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace regmae::ad {
namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return fmt::format("{:016x}", h);
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::Io, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}

template <class S>
void save_checkpoint(const ParameterStore<S>& params, const CheckpointInfo& info,
                     const std::filesystem::path& stem) {
  nlohmann::json manifest;
  manifest["config_hash"] = info.config_hash;
  manifest["configuration"] = info.configuration;
  manifest["dtype"] = "float32";
  auto& list = manifest["params"];
  list = nlohmann::json::array();

  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  require(bool(bin), ErrorKind::Io, "cannot write " + with_suffix(stem, ".bin").string());
  std::int64_t offset = 0;
  for (const auto& p : params) {
    const Eigen::ArrayXf values = p->value.data.template cast<float>();
    bin.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size() * sizeof(float)));
    list.push_back({{"name", p->name}, {"shape", p->value.shape}, {"offset", offset}});
    offset += values.size() * std::int64_t(sizeof(float));
  }
  require(bool(bin), ErrorKind::Io, "write failed: " + with_suffix(stem, ".bin").string());

  std::ofstream js(with_suffix(stem, ".json"));
  require(bool(js), ErrorKind::Io, "cannot write " + with_suffix(stem, ".json").string());
  js << manifest.dump(2) << '\n';
}

template <class S>
CheckpointInfo load_checkpoint(ParameterStore<S>& params, const std::filesystem::path& stem,
                               const std::string& expected_hash, const LoadOptions& opts) {
  std::ifstream js(with_suffix(stem, ".json"));
  require(bool(js), ErrorKind::Load, "missing checkpoint manifest " + with_suffix(stem, ".json").string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, std::string("unreadable checkpoint manifest: ") + e.what());
  }
  CheckpointInfo info{manifest.value("config_hash", ""), manifest.value("configuration", "")};
  require(expected_hash.empty() || info.config_hash == expected_hash, ErrorKind::Load,
          "checkpoint config hash " + info.config_hash + " does not match model config " + expected_hash);

  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  require(bool(bin), ErrorKind::Load, "missing checkpoint blob " + with_suffix(stem, ".bin").string());
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  if (!opts.allow_missing) {
    for (const auto& p : params) {
      if (!opts.prefix.empty() && p->name.rfind(opts.prefix, 0) != 0) continue;
      bool found = false;
      for (const auto& entry : manifest.at("params")) found = found || entry.at("name") == p->name;
      require(found, ErrorKind::Load, "checkpoint lacks parameter " + p->name);
    }
  }

  // Decode everything first so a failure leaves the store untouched.
  std::vector<std::pair<Parameter<S>*, Vec<S>>> staged;
  for (const auto& entry : manifest.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    if (!opts.prefix.empty() && name.rfind(opts.prefix, 0) != 0) continue;
    Parameter<S>* p = params.find(name);
    if (!p) continue;
    const auto shape = entry.at("shape").get<Shape>();
    require(shape == p->value.shape, ErrorKind::Load,
            "parameter " + name + " has shape " + shape_str(shape) + " in the checkpoint but " +
                shape_str(p->value.shape) + " in the model");
    const auto offset = entry.at("offset").get<std::int64_t>();
    const auto bytes = p->value.size() * std::int64_t(sizeof(float));
    require(offset >= 0 && offset + bytes <= std::int64_t(blob.size()), ErrorKind::Load,
            "checkpoint blob is truncated at " + name);
    Eigen::ArrayXf values(p->value.size());
    std::memcpy(values.data(), blob.data() + offset, std::size_t(bytes));
    staged.emplace_back(p, values.template cast<S>());
  }
  const std::size_t loaded = staged.size();
  for (auto& [p, values] : staged) p->value.data = std::move(values);
  require(loaded > 0, ErrorKind::Load, "checkpoint shares no parameters with the model");
  return info;
}

template void save_checkpoint<float>(const ParameterStore<float>&, const CheckpointInfo&, const std::filesystem::path&);
template void save_checkpoint<double>(const ParameterStore<double>&, const CheckpointInfo&, const std::filesystem::path&);
template CheckpointInfo load_checkpoint<float>(ParameterStore<float>&, const std::filesystem::path&, const std::string&,
                                               const LoadOptions&);
template CheckpointInfo load_checkpoint<double>(ParameterStore<double>&, const std::filesystem::path&,
                                                const std::string&, const LoadOptions&);

}  // namespace regmae::ad
