#include <algorithm>
#include <fstream>

#include <doctest.h>

#include "regmae/atlas_grid.hpp"
#include "../common/support.hpp"

using namespace regmae;
using namespace regmae::atlas;

namespace {

std::set<int> as_set(const std::vector<int>& v) { return {v.begin(), v.end()}; }

bool subset(const std::vector<int>& a, const std::vector<int>& b) {
  const auto sb = as_set(b);
  return std::all_of(a.begin(), a.end(), [&](int p) { return sb.count(p) > 0; });
}

/// 12^3 atlas (2x2x2 patches) whose patch 0 is filled voxel by voxel from `labels`.
LabelVolume atlas_with_patch0(const std::vector<std::int32_t>& labels) {
  LabelVolume a({12, 12, 12}, Affine::Identity());
  std::size_t k = 0;
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) a.at(x, y, z) = labels[k++];
  return a;
}

}  // namespace

TEST_SUITE("atlas_grid") {
  TEST_CASE("patch_of_voxel on the reference lattice") {
    CHECK(patch_of_voxel({0, 0, 0}) == 0);
    CHECK(patch_of_voxel({5, 5, 5}) == 0);
    CHECK(patch_of_voxel({6, 0, 0}) == 1);
    CHECK(patch_of_voxel({0, 6, 0}) == 16);
    CHECK(patch_of_voxel({0, 0, 6}) == 256);
    CHECK(patch_of_voxel({95, 95, 95}) == 4095);
    CHECK_THROWS_AS(patch_of_voxel({96, 0, 0}), Error);
    CHECK_THROWS_AS(patch_of_voxel({-1, 0, 0}), Error);
    PatchGrid g;
    CHECK(g.voxels_per_patch() == 216);
    CHECK(g.patch_count() == 4096);
    CHECK(g.volume_dims() == Index3{96, 96, 96});
  }

  TEST_CASE("majority threshold is strict at one half") {
    const RegionMap regions({{1, "frontal"}, {2, "parietal"}});
    for (int n : {108, 109}) {
      std::vector<std::int32_t> labels(216, 2);
      std::fill(labels.begin(), labels.begin() + n, 1);
      const auto sets = classify_patches(atlas_with_patch0(labels), regions);
      const auto& f = sets.region("frontal");
      CHECK(as_set(f.any).count(0) == 1);
      CHECK(as_set(f.majority).count(0) == (n == 109 ? 1u : 0u));
    }
  }

  TEST_CASE("purity counts the dominant label over labeled voxels") {
    const RegionMap regions({{1, "limbic"}, {2, "limbic"}});
    std::vector<std::int32_t> labels(216, 0);
    std::fill(labels.begin(), labels.begin() + 150, 1);
    std::fill(labels.begin() + 150, labels.begin() + 200, 2);
    auto sets = classify_patches(atlas_with_patch0(labels), regions);
    CHECK(sets.histograms[0].n_labeled == 200);
    CHECK(sets.histograms[0].counts == std::vector<std::pair<std::int32_t, int>>{{1, 150}, {2, 50}});
    CHECK(as_set(sets.region("limbic").pure).count(0) == 1);  // 150 / 200 = 0.75

    // 140 / 200 = 0.70 is still pure, 139 / 200 is not.
    std::fill(labels.begin(), labels.begin() + 140, 1);
    std::fill(labels.begin() + 140, labels.begin() + 200, 2);
    sets = classify_patches(atlas_with_patch0(labels), regions);
    CHECK(as_set(sets.region("limbic").pure).count(0) == 1);
    labels[139] = 2;
    sets = classify_patches(atlas_with_patch0(labels), regions);
    CHECK(as_set(sets.region("limbic").pure).count(0) == 0);
    CHECK(as_set(sets.region("limbic").majority).count(0) == 1);
  }

  TEST_CASE("single-label patch belongs to every criterion") {
    const RegionMap regions({{3, "occipital"}});
    const auto sets = classify_patches(atlas_with_patch0(std::vector<std::int32_t>(216, 3)), regions);
    const auto& r = sets.region("occipital");
    CHECK(r.any == std::vector<int>{0});
    CHECK(r.majority == std::vector<int>{0});
    CHECK(r.pure == std::vector<int>{0});
  }

  TEST_CASE("classify_patches matches the brute-force counter") {
    Rng rng(11);
    for (int trial = 0; trial < 6; ++trial) {
      const int n_labels = 2 + int(uniform_index(rng, 7));
      const auto atlas = oracle::random_atlas(rng, 36, n_labels, 0.05 + 0.3 * uniform01(rng));
      const auto mapping = oracle::random_mapping(rng, n_labels);
      const auto sets = classify_patches(atlas, RegionMap(mapping));
      const auto ref = oracle::classify(atlas, mapping);
      for (const auto& r : sets.regions) {
        const auto& o = ref.at(r.region);
        CHECK(as_set(r.any) == o.any);
        CHECK(as_set(r.majority) == o.majority);
        CHECK(as_set(r.pure) == o.pure);
      }
      // Histogram totals: labeled plus background fill each patch.
      for (std::size_t p = 0; p < sets.histograms.size(); ++p) {
        int total = 0;
        for (auto [l, c] : sets.histograms[p].counts) total += c;
        CHECK(total == sets.histograms[p].n_labeled);
        CHECK(total <= 216);
      }
    }
  }

  TEST_CASE("inclusion chain and majority disjointness") {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
      const auto atlas = oracle::random_atlas(rng, 24, 8, 0.2);
      const auto sets = classify_patches(atlas, RegionMap(oracle::random_mapping(rng, 8)));
      for (const auto& r : sets.regions) {
        CHECK(subset(r.pure, r.majority));
        CHECK(subset(r.majority, r.any));
      }
      for (std::size_t i = 0; i < sets.regions.size(); ++i)
        for (std::size_t j = i + 1; j < sets.regions.size(); ++j) {
          const auto a = as_set(sets.regions[i].majority);
          for (int p : sets.regions[j].majority) CHECK(a.count(p) == 0);
        }
    }
  }

  TEST_CASE("report footprint is patches times 216") {
    Rng rng(13);
    const auto sets = classify_patches(oracle::random_atlas(rng, 24, 6), RegionMap(oracle::random_mapping(rng, 6)));
    const auto rows = patch_set_report(sets);
    CHECK(rows.size() == 3 * sets.regions.size());
    for (const auto& row : rows) CHECK(row.voxels == row.patches * 216);

    // Published table entries obey the same relation.
    CHECK(524 * 216 == 113184);
    CHECK(12 * 216 == 2592);

    PatchSets empty;
    empty.regions.push_back({"cerebellum", {}, {}, {}});
    for (const auto& row : patch_set_report(empty)) {
      CHECK(row.patches == 0);
      CHECK(row.voxels == 0);
    }
  }

  TEST_CASE("empty region map is a configuration error") {
    LabelVolume a({12, 12, 12}, Affine::Identity());
    try {
      classify_patches(a, RegionMap{});
      FAIL("expected configuration error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
    }
  }

  TEST_CASE("region map csv and patch-set json round trip") {
    testing::TempDir dir;
    {
      std::ofstream csv(dir / "map.csv");
      csv << "label,macroregion\n1,frontal\n2,limbic\n5,frontal\n";
    }
    const auto regions = RegionMap::from_csv(dir / "map.csv");
    CHECK(regions.region_of(1) == regions.region_index("frontal"));
    CHECK(regions.region_of(5) == regions.region_index("frontal"));
    CHECK(regions.region_of(3) == -1);

    Rng rng(14);
    const auto sets = classify_patches(oracle::random_atlas(rng, 24, 5), regions);
    write_patch_sets(sets, dir / "sets.json");
    const auto back = read_patch_sets(dir / "sets.json");
    CHECK(back.grid.grid_dims == sets.grid.grid_dims);
    REQUIRE(back.regions.size() == sets.regions.size());
    for (std::size_t i = 0; i < sets.regions.size(); ++i) {
      CHECK(back.regions[i].region == sets.regions[i].region);
      CHECK(back.regions[i].any == sets.regions[i].any);
      CHECK(back.regions[i].majority == sets.regions[i].majority);
      CHECK(back.regions[i].pure == sets.regions[i].pure);
    }
    REQUIRE(back.histograms.size() == sets.histograms.size());
    for (std::size_t p = 0; p < sets.histograms.size(); ++p) {
      CHECK(back.histograms[p].n_labeled == sets.histograms[p].n_labeled);
      CHECK(back.histograms[p].counts == sets.histograms[p].counts);
    }
  }

  TEST_CASE("conflicting region map lines are rejected") {
    testing::TempDir dir;
    {
      std::ofstream csv(dir / "bad.csv");
      csv << "1,frontal\n1,limbic\n";
    }
    CHECK_THROWS_AS(RegionMap::from_csv(dir / "bad.csv"), Error);
  }
}
