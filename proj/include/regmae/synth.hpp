#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "regmae/atlas_grid.hpp"
#include "regmae/volume.hpp"

namespace regmae::synth {

/// Desk-scale cohort generator: smooth bounded random fields inside an
/// ellipsoidal brain, with a class-dependent intensity drop planted in one
/// macroregion.
struct SynthOptions {
  int subjects = 4;
  int shape = 48;
  int frames = 8;
  double tr = 0.8;
  double effect = 1.5;  // planted shift, in units of the field's spread
  std::string signal_region = "limbic";
  int labels_per_region = 2;
  std::uint64_t seed = 0;
};

struct SynthAtlas {
  LabelVolume atlas;
  atlas::RegionMap regions;
  LabelVolume brain;  // 1 inside the template brain
};

SynthAtlas make_atlas(int shape, int labels_per_region, std::uint64_t seed);

/// Raw (un-normalized) 4D volume of subject `index`; label 1 carries the
/// planted signal.
Volume4D make_subject(const SynthAtlas& atlas, const SynthOptions& opts, int index, int label);

struct SynthPaths {
  std::filesystem::path manifest, atlas, region_map, template_mask;
};

/// Writes subjects/, atlas.nii.gz, region_map.csv, template_mask.nii.gz and
/// manifest.csv (balanced labels) under `out_dir`.
SynthPaths write_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir);

}  // namespace regmae::synth
