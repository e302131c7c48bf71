#include "regmae/atlas_grid.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace regmae::atlas {

PatchGrid PatchGrid::for_volume(const Index3& dims, int patch) {
  PatchGrid g;
  g.patch_size = {patch, patch, patch};
  for (int a = 0; a < 3; ++a) {
    require(dims[a] > 0 && dims[a] % patch == 0, ErrorKind::Geometry,
            "volume size " + std::to_string(dims[a]) + " is not a multiple of the patch size " +
                std::to_string(patch));
    g.grid_dims[a] = dims[a] / patch;
  }
  return g;
}

int patch_of_voxel(const PatchGrid& grid, const Index3& v) {
  const Index3 vol = grid.volume_dims();
  for (int a = 0; a < 3; ++a)
    require(v[a] >= 0 && v[a] < vol[a], ErrorKind::Geometry, "voxel outside the patch grid");
  return grid.index(v[0] / grid.patch_size[0], v[1] / grid.patch_size[1], v[2] / grid.patch_size[2]);
}

RegionMap::RegionMap(std::map<std::int32_t, std::string> mapping) : mapping_(std::move(mapping)) {
  const auto& canon = canonical_macroregions();
  std::vector<std::string> extra;
  for (const auto& [label, name] : mapping_) {
    require(label >= 1, ErrorKind::Config, "region map labels must be >= 1");
    if (std::find(canon.begin(), canon.end(), name) == canon.end() &&
        std::find(extra.begin(), extra.end(), name) == extra.end())
      extra.push_back(name);
  }
  for (const auto& name : canon)
    for (const auto& [label, n] : mapping_)
      if (n == name) {
        regions_.push_back(name);
        break;
      }
  regions_.insert(regions_.end(), extra.begin(), extra.end());
  for (const auto& [label, name] : mapping_) index_[label] = region_index(name);
}

RegionMap RegionMap::from_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(bool(in), ErrorKind::Io, "cannot open region map " + path.string());
  std::map<std::int32_t, std::string> mapping;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, ErrorKind::Config, "region map line lacks a comma: " + line);
    const std::string label = line.substr(0, comma);
    std::string region = line.substr(comma + 1);
    std::transform(region.begin(), region.end(), region.begin(), [](unsigned char c) { return std::tolower(c); });
    const bool numeric = !label.empty() && std::all_of(label.begin(), label.end(), ::isdigit);
    if (first && !numeric) {
      first = false;
      continue;
    }
    first = false;
    require(numeric, ErrorKind::Config, "region map label is not a positive integer: " + label);
    const auto id = std::int32_t(std::stol(label));
    auto [it, inserted] = mapping.emplace(id, region);
    require(inserted || it->second == region, ErrorKind::Config,
            "label " + label + " is mapped to two macroregions");
  }
  return RegionMap(std::move(mapping));
}

int RegionMap::region_of(std::int32_t label) const {
  const auto it = index_.find(label);
  return it == index_.end() ? -1 : it->second;
}

int RegionMap::region_index(const std::string& name) const {
  const auto it = std::find(regions_.begin(), regions_.end(), name);
  return it == regions_.end() ? -1 : int(it - regions_.begin());
}

std::string_view to_string(Criterion c) {
  switch (c) {
    case Criterion::Any: return "any";
    case Criterion::Majority: return "majority";
    case Criterion::Pure: return "pure";
  }
  return "?";
}

Criterion criterion_from_string(std::string_view s) {
  if (s == "any") return Criterion::Any;
  if (s == "majority") return Criterion::Majority;
  if (s == "pure") return Criterion::Pure;
  fail(ErrorKind::Config, "unknown criterion '" + std::string(s) + "'");
}

const RegionPatchSets& PatchSets::region(const std::string& name) const {
  for (const auto& r : regions)
    if (r.region == name) return r;
  fail(ErrorKind::Config, "no macroregion named '" + name + "'");
}

PatchSets classify_patches(const LabelVolume& atlas, const RegionMap& regions, const ClassifyOptions& opts) {
  require(!regions.empty(), ErrorKind::Config, "region map is empty");
  PatchSets sets;
  sets.grid = PatchGrid::for_volume(atlas.dims);
  const PatchGrid& g = sets.grid;
  const int vpp = g.voxels_per_patch();
  const std::size_t n_regions = regions.regions().size();
  sets.regions.resize(n_regions);
  for (std::size_t r = 0; r < n_regions; ++r) sets.regions[r].region = regions.regions()[r];
  sets.histograms.resize(std::size_t(g.patch_count()));

  std::vector<std::int32_t> labels(static_cast<std::size_t>(vpp));
  std::vector<int> region_count(n_regions);
  for (int p = 0; p < g.patch_count(); ++p) {
    const Index3 c = g.coords(p);
    std::size_t k = 0;
    for (int dz = 0; dz < g.patch_size[2]; ++dz)
      for (int dy = 0; dy < g.patch_size[1]; ++dy)
        for (int dx = 0; dx < g.patch_size[0]; ++dx)
          labels[k++] = atlas.at(c[0] * g.patch_size[0] + dx, c[1] * g.patch_size[1] + dy,
                                 c[2] * g.patch_size[2] + dz);
    std::sort(labels.begin(), labels.end());

    PatchHistogram& hist = sets.histograms[std::size_t(p)];
    std::fill(region_count.begin(), region_count.end(), 0);
    int dominant = 0;
    for (std::size_t i = 0; i < labels.size();) {
      std::size_t j = i;
      while (j < labels.size() && labels[j] == labels[i]) ++j;
      const int n = int(j - i);
      if (labels[i] != 0) {
        hist.counts.emplace_back(labels[i], n);
        hist.n_labeled += n;
        // Ascending label order means ties keep the smallest label.
        dominant = std::max(dominant, n);
        const int r = regions.region_of(labels[i]);
        if (r >= 0) region_count[std::size_t(r)] += n;
      }
      i = j;
    }
    if (hist.n_labeled == 0) continue;

    const double purity = double(dominant) / double(hist.n_labeled);
    for (std::size_t r = 0; r < n_regions; ++r) {
      const int n = region_count[r];
      if (n == 0) continue;
      auto& rs = sets.regions[r];
      rs.any.push_back(p);
      if (double(n) / double(vpp) > opts.majority_threshold) {
        rs.majority.push_back(p);
        if (purity >= opts.purity_threshold) rs.pure.push_back(p);
      }
    }
  }
  return sets;
}

std::vector<ReportRow> patch_set_report(const PatchSets& sets) {
  std::vector<ReportRow> rows;
  const std::int64_t vpp = sets.grid.voxels_per_patch();
  for (const auto& r : sets.regions)
    for (Criterion c : {Criterion::Any, Criterion::Majority, Criterion::Pure}) {
      const auto n = std::int64_t(r.get(c).size());
      rows.push_back({r.region, c, n, n * vpp});
    }
  return rows;
}

void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << "region,criterion,patches,voxels\n";
  for (const auto& r : rows) out << r.region << ',' << to_string(r.criterion) << ',' << r.patches << ',' << r.voxels << '\n';
}

void write_patch_sets(const PatchSets& sets, const std::filesystem::path& path) {
  nlohmann::json j;
  j["patch_size"] = sets.grid.patch_size;
  j["grid_dims"] = sets.grid.grid_dims;
  auto& regions = j["regions"];
  regions = nlohmann::json::array();
  for (const auto& r : sets.regions)
    regions.push_back({{"region", r.region}, {"any", r.any}, {"majority", r.majority}, {"pure", r.pure}});
  auto& hist = j["histograms"];
  hist = nlohmann::json::array();
  for (const auto& h : sets.histograms) hist.push_back({{"n_labeled", h.n_labeled}, {"counts", h.counts}});
  std::ofstream out(path);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << j.dump() << '\n';
}

PatchSets read_patch_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(bool(in), ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    PatchSets sets;
    sets.grid.patch_size = j.at("patch_size").get<Index3>();
    sets.grid.grid_dims = j.at("grid_dims").get<Index3>();
    for (const auto& r : j.at("regions"))
      sets.regions.push_back({r.at("region").get<std::string>(), r.at("any").get<std::vector<int>>(),
                              r.at("majority").get<std::vector<int>>(), r.at("pure").get<std::vector<int>>()});
    for (const auto& h : j.at("histograms"))
      sets.histograms.push_back(
          {h.at("counts").get<std::vector<std::pair<std::int32_t, int>>>(), h.at("n_labeled").get<int>()});
    return sets;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, "patch-set file " + path.string() + ": " + e.what());
  }
}

}  // namespace regmae::atlas
