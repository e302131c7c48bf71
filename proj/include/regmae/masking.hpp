#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regmae/atlas_grid.hpp"
#include "regmae/autodiff/ops.hpp"

namespace regmae::masking {

enum class Strategy { RegionAny, RegionMajority, RegionPure, RandomRandom, WindowRandom, RandomTube };
enum class TemporalMode { Tube, PerFrame };
enum class MaskMode { Drop, ReplaceLearned };

std::string_view to_string(Strategy s);
std::string_view to_string(TemporalMode m);
Strategy strategy_from_string(std::string_view s);
TemporalMode temporal_mode_from_string(std::string_view s);
bool is_region_strategy(Strategy s);

/// Declarative mask recipe.
struct MaskSpec {
  Strategy strategy = Strategy::RegionAny;
  std::string region;
  double ratio = 1.0;  // fraction of the candidate set
  TemporalMode temporal_mode = TemporalMode::Tube;
  std::uint64_t seed = 0;
  int window_block = 2;  // WINDOW_RANDOM block edge, in patches

  void validate() const;
  nlohmann::json to_json() const;
  static MaskSpec from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Realized boolean mask on the [patches, frames] token lattice; slot
/// (p, t) is row-major index p * t_patches + t, matching token order.
struct MaskTensor {
  int n_patches = 0;
  int t_patches = 0;
  int voxels_per_patch = 216;
  int t_patch_len = 1;
  std::vector<std::uint8_t> bits;

  MaskTensor() = default;
  MaskTensor(int patches, int frames, int vpp, int tpl)
      : n_patches(patches), t_patches(frames), voxels_per_patch(vpp), t_patch_len(tpl),
        bits(std::size_t(patches) * std::size_t(frames), 0) {}

  bool at(int p, int t) const { return bits[std::size_t(p) * t_patches + t] != 0; }
  void set(int p, int t, bool v = true) { bits[std::size_t(p) * t_patches + t] = v; }
  std::int64_t slots() const { return std::int64_t(bits.size()); }
  std::int64_t masked_slots() const;
  std::int64_t masked_voxels() const {
    return masked_slots() * voxels_per_patch * std::int64_t(t_patch_len);
  }
  std::vector<bool> token_mask() const { return {bits.begin(), bits.end()}; }
  bool operator==(const MaskTensor&) const = default;
};

/// Number of candidates selected for a ratio: ceil(ratio * n), at least 1.
std::int64_t selection_count(double ratio, std::int64_t n);

MaskTensor build_mask(const MaskSpec& spec, const atlas::PatchSets& sets, int t_patches, int t_patch_len = 1);

/// Packed bitset (`<stem>.bits`, LSB-first) plus JSON sidecar (`<stem>.json`).
void export_mask(const MaskTensor& mask, const MaskSpec& spec, const std::filesystem::path& stem);
MaskTensor import_mask(const std::filesystem::path& stem);

template <class S>
struct MaskedTokens {
  ad::Var<S> tokens;
  std::vector<std::int64_t> kept;  // DROP: original row of each output row
};

/// DROP keeps unmasked rows and records their positions; REPLACE_LEARNED
/// substitutes `mask_embedding` in place.
template <class S>
MaskedTokens<S> apply_mask(ad::Var<S> tokens, const MaskTensor& mask, MaskMode mode,
                           std::optional<ad::Var<S>> mask_embedding = std::nullopt) {
  require(tokens.value().rank() == 2 && tokens.value().dim(0) == mask.slots(), ErrorKind::Validation,
          "apply_mask: " + std::to_string(tokens.value().dim(0)) + " tokens vs " + std::to_string(mask.slots()) +
              " mask slots");
  MaskedTokens<S> out;
  if (mode == MaskMode::ReplaceLearned) {
    require(mask_embedding.has_value(), ErrorKind::Validation, "apply_mask: REPLACE_LEARNED needs an embedding");
    out.tokens = ad::replace_rows(tokens, *mask_embedding, std::make_shared<const std::vector<bool>>(mask.token_mask()));
    for (std::int64_t i = 0; i < mask.slots(); ++i) out.kept.push_back(i);
    return out;
  }
  for (std::int64_t i = 0; i < mask.slots(); ++i)
    if (!mask.bits[std::size_t(i)]) out.kept.push_back(i);
  out.tokens = ad::gather_rows(tokens, ad::make_index(out.kept));
  return out;
}

/// Undo DROP: kept rows return to their slots, every other slot gets `placeholder`.
template <class S>
ad::Var<S> reinsert(ad::Var<S> kept_tokens, const std::vector<std::int64_t>& kept, std::int64_t n_slots,
                    ad::Var<S> placeholder) {
  auto placed = ad::scatter_rows(kept_tokens, ad::make_index(kept), n_slots);
  auto holes = std::make_shared<std::vector<bool>>(std::size_t(n_slots), true);
  for (auto k : kept) (*holes)[std::size_t(k)] = false;
  return ad::replace_rows(placed, placeholder, std::shared_ptr<const std::vector<bool>>(holes));
}

}  // namespace regmae::masking
