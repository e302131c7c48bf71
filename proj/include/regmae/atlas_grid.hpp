#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "regmae/volume.hpp"

namespace regmae::atlas {

/// Non-overlapping cubic patch lattice. The reference layout is 6^3-voxel
/// patches on a 96^3 grid (16^3 = 4096 patches); smaller grids that are a
/// multiple of the patch size are used for desk-scale fixtures.
struct PatchGrid {
  Index3 patch_size{6, 6, 6};
  Index3 grid_dims{16, 16, 16};

  int voxels_per_patch() const { return patch_size[0] * patch_size[1] * patch_size[2]; }
  int patch_count() const { return grid_dims[0] * grid_dims[1] * grid_dims[2]; }
  Index3 volume_dims() const {
    return {patch_size[0] * grid_dims[0], patch_size[1] * grid_dims[1], patch_size[2] * grid_dims[2]};
  }
  /// Lattice coordinates of a patch index (x fastest).
  Index3 coords(int patch) const {
    return {patch % grid_dims[0], (patch / grid_dims[0]) % grid_dims[1], patch / (grid_dims[0] * grid_dims[1])};
  }
  int index(int gx, int gy, int gz) const { return gx + grid_dims[0] * (gy + grid_dims[1] * gz); }

  static PatchGrid for_volume(const Index3& dims, int patch = 6);
};

int patch_of_voxel(const PatchGrid& grid, const Index3& voxel);
inline int patch_of_voxel(const Index3& voxel) { return patch_of_voxel(PatchGrid{}, voxel); }

inline const std::vector<std::string>& canonical_macroregions() {
  static const std::vector<std::string> names{"frontal",  "parietal",    "occipital", "temporal",
                                              "limbic",   "subcortical", "cerebellum"};
  return names;
}

/// Atlas label -> macroregion. Labels absent from the map count as "other".
class RegionMap {
 public:
  RegionMap() = default;
  explicit RegionMap(std::map<std::int32_t, std::string> mapping);

  /// One `label,macroregion` pair per line; a non-numeric first line is a header.
  static RegionMap from_csv(const std::filesystem::path& path);

  bool empty() const { return mapping_.empty(); }
  const std::vector<std::string>& regions() const { return regions_; }
  const std::map<std::int32_t, std::string>& mapping() const { return mapping_; }
  /// Index into regions(), or -1 for unmapped labels.
  int region_of(std::int32_t label) const;
  int region_index(const std::string& name) const;

 private:
  std::map<std::int32_t, std::string> mapping_;
  std::vector<std::string> regions_;
  std::map<std::int32_t, int> index_;
};

enum class Criterion { Any, Majority, Pure };
std::string_view to_string(Criterion c);
Criterion criterion_from_string(std::string_view s);

struct PatchHistogram {
  std::vector<std::pair<std::int32_t, int>> counts;  // non-zero labels, ascending
  int n_labeled = 0;
};

struct RegionPatchSets {
  std::string region;
  std::vector<int> any;
  std::vector<int> majority;
  std::vector<int> pure;

  const std::vector<int>& get(Criterion c) const {
    return c == Criterion::Any ? any : c == Criterion::Majority ? majority : pure;
  }
};

struct PatchSets {
  PatchGrid grid;
  std::vector<RegionPatchSets> regions;
  std::vector<PatchHistogram> histograms;

  const RegionPatchSets& region(const std::string& name) const;
};

struct ClassifyOptions {
  double purity_threshold = 0.70;
  double majority_threshold = 0.5;
};

PatchSets classify_patches(const LabelVolume& atlas, const RegionMap& regions,
                           const ClassifyOptions& opts = {});

struct ReportRow {
  std::string region;
  Criterion criterion;
  std::int64_t patches;
  std::int64_t voxels;
};

/// Per region x criterion: patch count and masked-voxel footprint.
std::vector<ReportRow> patch_set_report(const PatchSets& sets);
void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path);

void write_patch_sets(const PatchSets& sets, const std::filesystem::path& path);
PatchSets read_patch_sets(const std::filesystem::path& path);

}  // namespace regmae::atlas
