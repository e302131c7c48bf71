#include "regmae/masking.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "regmae/autodiff/checkpoint.hpp"
#include "regmae/random.hpp"

namespace regmae::masking {
namespace {

struct StrategyName {
  Strategy strategy;
  std::string_view name;
};

constexpr StrategyName kStrategies[] = {
    {Strategy::RegionAny, "REGION_ANY"},       {Strategy::RegionMajority, "REGION_MAJORITY"},
    {Strategy::RegionPure, "REGION_PURE"},     {Strategy::RandomRandom, "RANDOM_RANDOM"},
    {Strategy::WindowRandom, "WINDOW_RANDOM"}, {Strategy::RandomTube, "RANDOM_TUBE"},
};

atlas::Criterion criterion_of(Strategy s) {
  switch (s) {
    case Strategy::RegionAny: return atlas::Criterion::Any;
    case Strategy::RegionMajority: return atlas::Criterion::Majority;
    default: return atlas::Criterion::Pure;
  }
}

std::vector<int> iota_vector(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

/// Aligned blocks of `edge`^3 patches tiling the grid (partial blocks at the
/// far edges are kept).
std::vector<std::vector<int>> window_blocks(const atlas::PatchGrid& g, int edge) {
  Index3 nb;
  for (int a = 0; a < 3; ++a) nb[a] = (g.grid_dims[a] + edge - 1) / edge;
  std::vector<std::vector<int>> blocks;
  for (int bz = 0; bz < nb[2]; ++bz)
    for (int by = 0; by < nb[1]; ++by)
      for (int bx = 0; bx < nb[0]; ++bx) {
        std::vector<int> block;
        for (int z = bz * edge; z < std::min((bz + 1) * edge, g.grid_dims[2]); ++z)
          for (int y = by * edge; y < std::min((by + 1) * edge, g.grid_dims[1]); ++y)
            for (int x = bx * edge; x < std::min((bx + 1) * edge, g.grid_dims[0]); ++x)
              block.push_back(g.index(x, y, z));
        blocks.push_back(std::move(block));
      }
  return blocks;
}

}  // namespace

std::string_view to_string(Strategy s) {
  for (const auto& e : kStrategies)
    if (e.strategy == s) return e.name;
  return "?";
}

std::string_view to_string(TemporalMode m) { return m == TemporalMode::Tube ? "TUBE" : "PER_FRAME"; }

Strategy strategy_from_string(std::string_view s) {
  for (const auto& e : kStrategies)
    if (e.name == s) return e.strategy;
  fail(ErrorKind::Config, "unknown mask strategy '" + std::string(s) + "'");
}

TemporalMode temporal_mode_from_string(std::string_view s) {
  if (s == "TUBE") return TemporalMode::Tube;
  if (s == "PER_FRAME") return TemporalMode::PerFrame;
  fail(ErrorKind::Config, "unknown temporal mode '" + std::string(s) + "'");
}

bool is_region_strategy(Strategy s) {
  return s == Strategy::RegionAny || s == Strategy::RegionMajority || s == Strategy::RegionPure;
}

void MaskSpec::validate() const {
  require(ratio > 0.0 && ratio <= 1.0, ErrorKind::Validation, "mask ratio must be in (0, 1]");
  require(!is_region_strategy(strategy) || !region.empty(), ErrorKind::Validation,
          std::string(to_string(strategy)) + " requires a region");
  require(window_block >= 1, ErrorKind::Validation, "window_block must be >= 1");
}

nlohmann::json MaskSpec::to_json() const {
  return {{"strategy", to_string(strategy)}, {"region", region},
          {"ratio", ratio},                  {"temporal_mode", to_string(temporal_mode)},
          {"seed", seed},                    {"window_block", window_block}};
}

MaskSpec MaskSpec::from_json(const nlohmann::json& j) {
  MaskSpec s;
  s.strategy = strategy_from_string(j.value("strategy", std::string(to_string(s.strategy))));
  s.region = j.value("region", s.region);
  s.ratio = j.value("ratio", s.ratio);
  s.temporal_mode = temporal_mode_from_string(j.value("temporal_mode", std::string(to_string(s.temporal_mode))));
  s.seed = j.value("seed", s.seed);
  s.window_block = j.value("window_block", s.window_block);
  return s;
}

std::string MaskSpec::hash() const { return ad::fnv1a_hex(to_json().dump()); }

std::int64_t MaskTensor::masked_slots() const {
  return std::int64_t(std::count(bits.begin(), bits.end(), std::uint8_t(1)));
}

std::int64_t selection_count(double ratio, std::int64_t n) {
  const auto k = std::int64_t(std::ceil(ratio * double(n) - 1e-9));
  return std::clamp<std::int64_t>(k, n > 0 ? 1 : 0, n);
}

MaskTensor build_mask(const MaskSpec& spec, const atlas::PatchSets& sets, int t_patches, int t_patch_len) {
  spec.validate();
  require(t_patches >= 1 && t_patch_len >= 1, ErrorKind::Validation, "t_patches and t_patch_len must be >= 1");
  const atlas::PatchGrid& g = sets.grid;
  MaskTensor mask(g.patch_count(), t_patches, g.voxels_per_patch(), t_patch_len);
  Rng rng(spec.seed);

  auto mark_tube = [&](const std::vector<int>& patches) {
    for (int p : patches)
      for (int t = 0; t < t_patches; ++t) mask.set(p, t);
  };

  switch (spec.strategy) {
    case Strategy::RegionAny:
    case Strategy::RegionMajority:
    case Strategy::RegionPure: {
      const auto& candidates = sets.region(spec.region).get(criterion_of(spec.strategy));
      require(!candidates.empty(), ErrorKind::Config,
              "region '" + spec.region + "' has no patches under " + std::string(to_string(spec.strategy)));
      const auto k = std::size_t(selection_count(spec.ratio, std::int64_t(candidates.size())));
      if (spec.temporal_mode == TemporalMode::Tube) {
        mark_tube(sample_without_replacement(candidates, k, rng));
      } else {
        for (int t = 0; t < t_patches; ++t)
          for (int p : sample_without_replacement(candidates, k, rng)) mask.set(p, t);
      }
      break;
    }
    case Strategy::RandomRandom: {
      std::vector<std::int64_t> slots(std::size_t(mask.slots()));
      std::iota(slots.begin(), slots.end(), 0);
      const auto k = std::size_t(selection_count(spec.ratio, mask.slots()));
      for (auto s : sample_without_replacement(std::move(slots), k, rng)) mask.bits[std::size_t(s)] = 1;
      break;
    }
    case Strategy::WindowRandom: {
      const auto blocks = window_blocks(g, spec.window_block);
      std::vector<int> block_ids(blocks.size());
      std::iota(block_ids.begin(), block_ids.end(), 0);
      const auto k = std::size_t(selection_count(spec.ratio, std::int64_t(blocks.size())));
      for (int t = 0; t < t_patches; ++t)
        for (int b : sample_without_replacement(block_ids, k, rng))
          for (int p : blocks[std::size_t(b)]) mask.set(p, t);
      break;
    }
    case Strategy::RandomTube: {
      const auto k = std::size_t(selection_count(spec.ratio, g.patch_count()));
      mark_tube(sample_without_replacement(iota_vector(g.patch_count()), k, rng));
      break;
    }
  }
  return mask;
}

void export_mask(const MaskTensor& mask, const MaskSpec& spec, const std::filesystem::path& stem) {
  std::vector<std::uint8_t> packed((mask.bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    if (mask.bits[i]) packed[i / 8] |= std::uint8_t(1u << (i % 8));
  const std::filesystem::path bits_path(stem.string() + ".bits");
  std::ofstream bin(bits_path, std::ios::binary);
  require(bool(bin), ErrorKind::Io, "cannot write " + bits_path.string());
  bin.write(reinterpret_cast<const char*>(packed.data()), std::streamsize(packed.size()));

  const nlohmann::json side{{"n_patches", mask.n_patches},
                            {"t_patches", mask.t_patches},
                            {"voxels_per_patch", mask.voxels_per_patch},
                            {"t_patch_len", mask.t_patch_len},
                            {"masked_slots", mask.masked_slots()},
                            {"masked_voxels", mask.masked_voxels()},
                            {"spec", spec.to_json()},
                            {"spec_hash", spec.hash()}};
  std::ofstream js(stem.string() + ".json");
  require(bool(js), ErrorKind::Io, "cannot write " + stem.string() + ".json");
  js << side.dump(2) << '\n';
}

MaskTensor import_mask(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  require(bool(js), ErrorKind::Io, "cannot open " + stem.string() + ".json");
  nlohmann::json side;
  js >> side;
  MaskTensor mask(side.at("n_patches").get<int>(), side.at("t_patches").get<int>(),
                  side.at("voxels_per_patch").get<int>(), side.at("t_patch_len").get<int>());
  std::ifstream bin(stem.string() + ".bits", std::ios::binary);
  require(bool(bin), ErrorKind::Io, "cannot open " + stem.string() + ".bits");
  const std::string packed((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  require(packed.size() == (mask.bits.size() + 7) / 8, ErrorKind::Format, "mask bitset has the wrong length");
  for (std::size_t i = 0; i < mask.bits.size(); ++i) mask.bits[i] = (std::uint8_t(packed[i / 8]) >> (i % 8)) & 1u;
  require(mask.masked_slots() == side.at("masked_slots").get<std::int64_t>(), ErrorKind::Format,
          "mask sidecar count disagrees with the bitset");
  return mask;
}

}  // namespace regmae::masking
