#include "regmae/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <fmt/format.h>

#include "regmae/nifti_io.hpp"
#include "regmae/preprocess.hpp"
#include "regmae/random.hpp"

namespace regmae::synth {
namespace {

constexpr double kVoxelMm = 2.0;

Affine grid_affine(int shape) {
  const double half = (shape - 1) * kVoxelMm / 2.0;
  return diagonal_affine(kVoxelMm, kVoxelMm, kVoxelMm, Eigen::Vector3d(-half, -half, -half));
}

bool in_brain(int x, int y, int z, int n) {
  const double c = (n - 1) / 2.0;
  const double rx = 0.46 * n, ry = 0.46 * n, rz = 0.44 * n;
  const double dx = (x - c) / rx, dy = (y - c) / ry, dz = (z - c) / rz;
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

/// Sum of random plane waves, rank-mapped to [0, 1] over brain voxels so the
/// in-brain histogram is flat and carries no tail.
Eigen::ArrayXd smooth_field(int n, const LabelVolume& brain, Rng& rng, int waves = 6) {
  struct Wave {
    double k[3];
    double phase;
  };
  std::vector<Wave> ws;
  for (int w = 0; w < waves; ++w) {
    Wave wv;
    for (double& k : wv.k) k = (uniform01(rng) * 2.5 - 1.25) * 2.0 * std::numbers::pi / n;
    wv.phase = uniform01(rng) * 2.0 * std::numbers::pi;
    ws.push_back(wv);
  }
  Eigen::ArrayXd f = Eigen::ArrayXd::Zero(std::int64_t(n) * n * n);
  std::vector<std::int64_t> inside;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const auto v = linear_index({n, n, n}, x, y, z);
        if (brain.labels[v] == 0) continue;
        double s = 0.0;
        for (const auto& w : ws) s += std::cos(w.k[0] * x + w.k[1] * y + w.k[2] * z + w.phase);
        f[v] = s;
        inside.push_back(v);
      }
  std::sort(inside.begin(), inside.end(), [&](auto a, auto b) { return f[a] < f[b]; });
  for (std::size_t r = 0; r < inside.size(); ++r) f[inside[r]] = (double(r) + 0.5) / double(inside.size());
  return f;
}

}  // namespace

SynthAtlas make_atlas(int n, int labels_per_region, std::uint64_t seed) {
  require(n >= 12 && n % 6 == 0, ErrorKind::Validation, "synthetic grid size must be a multiple of 6, >= 12");
  require(labels_per_region >= 1, ErrorKind::Validation, "labels_per_region must be >= 1");
  const auto& names = atlas::canonical_macroregions();
  const int n_labels = int(names.size()) * labels_per_region;
  Rng rng(derive_seed(seed, 0xa71a5));

  // Seeds spread inside the brain by rejection on a minimum distance.
  std::vector<Eigen::Vector3d> seeds;
  double min_dist = 0.25 * n;
  while (int(seeds.size()) < n_labels) {
    for (int attempt = 0; attempt < 2000 && int(seeds.size()) < n_labels; ++attempt) {
      const Eigen::Vector3d p(uniform01(rng) * n, uniform01(rng) * n, uniform01(rng) * n);
      if (!in_brain(int(p.x()), int(p.y()), int(p.z()), n)) continue;
      bool ok = true;
      for (const auto& s : seeds) ok = ok && (s - p).norm() >= min_dist;
      if (ok) seeds.push_back(p);
    }
    min_dist *= 0.85;
  }

  SynthAtlas out;
  const Index3 dims{n, n, n};
  out.atlas = LabelVolume(dims, grid_affine(n));
  out.brain = LabelVolume(dims, grid_affine(n));
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        if (!in_brain(x, y, z, n)) continue;
        const Eigen::Vector3d p(x, y, z);
        int best = 0;
        for (int s = 1; s < n_labels; ++s)
          if ((seeds[std::size_t(s)] - p).squaredNorm() < (seeds[std::size_t(best)] - p).squaredNorm()) best = s;
        out.atlas.at(x, y, z) = best + 1;
        out.brain.at(x, y, z) = 1;
      }
  std::map<std::int32_t, std::string> mapping;
  for (int l = 1; l <= n_labels; ++l) mapping[l] = names[std::size_t((l - 1) / labels_per_region)];
  out.regions = atlas::RegionMap(mapping);
  return out;
}

Volume4D make_subject(const SynthAtlas& at, const SynthOptions& opts, int index, int label) {
  const int n = opts.shape;
  Rng rng(derive_seed(opts.seed, 0x5b000000ull + std::uint64_t(index)));
  const Eigen::ArrayXd base = smooth_field(n, at.brain, rng);
  const Eigen::ArrayXd phase = smooth_field(n, at.brain, rng, 3);
  const int signal = at.regions.region_index(opts.signal_region);
  require(signal >= 0, ErrorKind::Config, "synthetic signal region '" + opts.signal_region + "' is not in the atlas map");

  Volume4D vol({n, n, n, opts.frames}, grid_affine(n), opts.tr);
  const double spread = 30.0;
  const double shift = label == 1 ? -opts.effect * spread / std::sqrt(12.0) : 0.0;
  const double period = 4.0 + 4.0 * uniform01(rng);
  for (int t = 0; t < opts.frames; ++t)
    for (std::int64_t v = 0; v < vol.frame_size(); ++v) {
      const auto l = at.atlas.labels[v];
      if (at.brain.labels[v] == 0) {
        vol.data[v + t * vol.frame_size()] = float(std::abs(standard_normal(rng)) * 0.5);
        continue;
      }
      double value = 100.0 + spread * (base[v] - 0.5);
      value += 1.0 * std::sin(2.0 * std::numbers::pi * (t / period + phase[v]));
      value += 0.5 * standard_normal(rng);
      if (at.regions.region_of(l) == signal) value += shift;
      vol.data[v + t * vol.frame_size()] = float(value);
    }
  return vol;
}

SynthPaths write_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir) {
  require(opts.subjects >= 1, ErrorKind::Config, "synth.subjects must be >= 1");
  require(opts.frames >= 1, ErrorKind::Config, "synth.frames must be >= 1");
  std::filesystem::create_directories(out_dir / "subjects");
  const auto at = make_atlas(opts.shape, opts.labels_per_region, opts.seed);

  SynthPaths paths{out_dir / "manifest.csv", out_dir / "atlas.nii.gz", out_dir / "region_map.csv",
                   out_dir / "template_mask.nii.gz"};
  nifti::write_labels(at.atlas, paths.atlas);
  nifti::write_labels(at.brain, paths.template_mask);
  {
    std::ofstream csv(paths.region_map);
    require(bool(csv), ErrorKind::Io, "cannot write " + paths.region_map.string());
    csv << "label,macroregion\n";
    for (const auto& [label, region] : at.regions.mapping()) csv << label << ',' << region << '\n';
  }

  std::vector<preprocess::SubjectEntry> entries;
  for (int i = 0; i < opts.subjects; ++i) {
    const int label = i % 2;
    const std::string id = fmt::format("sub-{:03d}", i);
    const auto rel = std::filesystem::path("subjects") / (id + ".nii.gz");
    nifti::write_volume(make_subject(at, opts, i, label), out_dir / rel);
    entries.push_back({id, rel, label});
  }
  preprocess::write_manifest(entries, paths.manifest);
  return paths;
}

}  // namespace regmae::synth
