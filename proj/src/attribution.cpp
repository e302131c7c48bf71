#include "regmae/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "regmae/preprocess.hpp"
#include "regmae/random.hpp"

namespace regmae::attribution {

void AttributionConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, msg); };
  check(ig_steps >= 2, "attribution.ig_steps must be >= 2");
  check(sg_samples >= 1, "attribution.sg_samples must be >= 1");
  check(sg_noise_std >= 0, "attribution.sg_noise_std must be >= 0");
  check(gauss_sigma >= 0, "attribution.gauss_sigma must be >= 0");
  check(top_percentile > 0 && top_percentile < 100, "attribution.top_percentile must lie in (0, 100)");
  check(min_roi_voxels >= 0, "attribution.min_roi_voxels must be >= 0");
  check(top_k >= 0, "attribution.top_k must be >= 0");
}

nlohmann::json AttributionConfig::to_json() const {
  return {{"ig_steps", ig_steps},
          {"baseline", baseline == Baseline::Zero ? "ZERO" : "MEAN"},
          {"sg_samples", sg_samples},
          {"sg_noise_std", sg_noise_std},
          {"gauss_sigma", gauss_sigma},
          {"top_percentile", top_percentile},
          {"min_roi_voxels", min_roi_voxels},
          {"top_k", top_k}};
}

AttributionConfig AttributionConfig::from_json(const nlohmann::json& j) {
  AttributionConfig c;
  try {
    c.ig_steps = j.value("ig_steps", c.ig_steps);
    const auto b = j.value("baseline", std::string("ZERO"));
    require(b == "ZERO" || b == "MEAN", ErrorKind::Config, "attribution.baseline must be ZERO or MEAN");
    c.baseline = b == "ZERO" ? Baseline::Zero : Baseline::Mean;
    c.sg_samples = j.value("sg_samples", c.sg_samples);
    c.sg_noise_std = j.value("sg_noise_std", c.sg_noise_std);
    c.gauss_sigma = j.value("gauss_sigma", c.gauss_sigma);
    c.top_percentile = j.value("top_percentile", c.top_percentile);
    c.min_roi_voxels = j.value("min_roi_voxels", c.min_roi_voxels);
    c.top_k = j.value("top_k", c.top_k);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("bad attribution config: ") + e.what());
  }
  c.validate();
  return c;
}

Eigen::ArrayXd integrated_gradients(const GradFn& f, const Eigen::ArrayXd& x, const Eigen::ArrayXd& baseline,
                                    int steps) {
  require(steps >= 1, ErrorKind::Validation, "integrated_gradients: steps must be >= 1");
  require(x.size() == baseline.size(), ErrorKind::Validation, "integrated_gradients: baseline shape mismatch");
  const Eigen::ArrayXd delta = x - baseline;
  // Neumaier-compensated path sum.
  Eigen::ArrayXd total = Eigen::ArrayXd::Zero(x.size()), carry = Eigen::ArrayXd::Zero(x.size());
  Eigen::ArrayXd grad;
  for (int k = 0; k < steps; ++k) {
    const double alpha = (k + 0.5) / steps;
    f(baseline + alpha * delta, grad);
    require(grad.size() == x.size() && grad.allFinite(), ErrorKind::Attribution,
            fmt::format("non-finite or misshapen gradient at path point {} of {}", k, steps));
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double s = total[i] + grad[i];
      carry[i] += std::abs(total[i]) >= std::abs(grad[i]) ? (total[i] - s) + grad[i] : (grad[i] - s) + total[i];
      total[i] = s;
    }
  }
  return delta * (total + carry) / double(steps);
}

Eigen::ArrayXd make_baseline(const Eigen::ArrayXd& x, Baseline kind) {
  if (kind == Baseline::Zero) return Eigen::ArrayXd::Zero(x.size());
  return Eigen::ArrayXd::Constant(x.size(), x.mean());
}

namespace {

/// Index after mirroring about the half-sample boundaries of [0, n).
int reflect(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = int(std::ceil(4.0 * sigma));
  std::vector<double> k(std::size_t(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[std::size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace

Eigen::ArrayXd gaussian_smooth(const Eigen::ArrayXd& vol, const Index3& dims, double sigma) {
  require(vol.size() == voxel_count(dims), ErrorKind::Validation, "gaussian_smooth: size does not match dims");
  if (sigma <= 0) return vol;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = int(kernel.size() / 2);
  Eigen::ArrayXd cur = vol;
  const std::int64_t stride[3] = {1, dims[0], std::int64_t(dims[0]) * dims[1]};
  for (int axis = 0; axis < 3; ++axis) {
    Eigen::ArrayXd next = Eigen::ArrayXd::Zero(cur.size());
    const int n = dims[axis];
    for (int z = 0; z < dims[2]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          const int pos[3] = {x, y, z};
          const std::int64_t src = linear_index(dims, x, y, z);
          const std::int64_t line0 = src - pos[axis] * stride[axis];
          const double v = cur[src];
          if (v == 0.0) continue;
          // Scatter form: every sample spreads its mass, reflected at the edges.
          for (int o = -radius; o <= radius; ++o)
            next[line0 + reflect(pos[axis] + o, n) * stride[axis]] += kernel[std::size_t(o + radius)] * v;
        }
    cur = std::move(next);
  }
  return cur;
}

AttributionMap ig_sq(const GradFn& f, const Volume4D& input, const AttributionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Eigen::ArrayXd x = input.data.cast<double>();
  const double sd = std::sqrt((x - x.mean()).square().mean());
  Rng rng(derive_seed(seed, 0x16a5));
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(x.size());
  for (int s = 0; s < cfg.sg_samples; ++s) {
    Eigen::ArrayXd noisy = x;
    if (cfg.sg_noise_std > 0)
      for (auto& v : noisy) v += standard_normal(rng) * cfg.sg_noise_std * sd;
    const auto ig = integrated_gradients(f, noisy, make_baseline(noisy, cfg.baseline), cfg.ig_steps);
    acc += ig.square();
  }
  acc /= double(cfg.sg_samples);

  AttributionMap out;
  out.dims = input.spatial();
  out.seed = seed;
  const std::int64_t fs = input.frame_size();
  out.map3d = Eigen::ArrayXd::Zero(fs);
  for (int t = 0; t < input.frames(); ++t)
    out.map3d += gaussian_smooth(acc.segment(t * fs, fs), out.dims, cfg.gauss_sigma);
  out.map3d /= double(input.frames());
  return out;
}

AttributionMap aggregate_group(const std::vector<AttributionMap>& maps) {
  require(!maps.empty(), ErrorKind::Validation, "aggregate_group needs at least one map");
  AttributionMap out;
  out.dims = maps.front().dims;
  out.map3d = Eigen::ArrayXd::Zero(maps.front().map3d.size());
  out.subject_id = "group";
  out.normalized = true;
  for (const auto& m : maps) {
    require(m.dims == out.dims && m.map3d.size() == out.map3d.size(), ErrorKind::Validation,
            "aggregate_group: maps live on different grids");
    const double total = m.map3d.abs().sum();
    require(total > 0 && std::isfinite(total), ErrorKind::Normalization,
            "attribution map of " + (m.subject_id.empty() ? std::string("<unnamed>") : m.subject_id) +
                " has zero or non-finite mass");
    out.map3d += m.map3d / total;
  }
  out.map3d /= double(maps.size());
  return out;
}

Projection threshold_and_project(const AttributionMap& group, const LabelVolume& atlas, const AttributionConfig& cfg,
                                 const std::map<std::int32_t, std::string>& names) {
  require(atlas.dims == group.dims, ErrorKind::Validation, "atlas grid differs from the attribution grid");
  require((atlas.labels > 0).any(), ErrorKind::Config, "atlas has no labeled voxels");

  Projection out;
  std::vector<double> values(group.map3d.data(), group.map3d.data() + group.map3d.size());
  out.cutoff = preprocess::percentile(values, cfg.top_percentile);
  out.thresholded = (group.map3d >= out.cutoff).select(group.map3d, 0.0);

  std::map<std::int32_t, std::pair<std::int64_t, double>> acc;
  for (Eigen::Index i = 0; i < atlas.labels.size(); ++i) {
    const auto l = atlas.labels[i];
    if (l <= 0) continue;
    auto& [count, sum] = acc[l];
    ++count;
    sum += group.map3d[i];
  }
  for (const auto& [label, cs] : acc) {
    if (cs.first < cfg.min_roi_voxels) continue;
    RoiRow r;
    r.label = label;
    const auto it = names.find(label);
    r.name = it != names.end() ? it->second : fmt::format("roi_{}", label);
    r.voxels = cs.first;
    r.mean_attr = cs.second / double(cs.first);
    out.rois.push_back(r);
  }
  std::stable_sort(out.rois.begin(), out.rois.end(),
                   [](const RoiRow& a, const RoiRow& b) { return a.mean_attr > b.mean_attr; });
  for (std::size_t i = 0; i < out.rois.size(); ++i) out.rois[i].rank = int(i + 1);
  return out;
}

void write_roi_csv(const std::vector<RoiRow>& rows, const std::filesystem::path& path, int top_k) {
  std::ofstream out(path);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << "roi_label,roi_name,voxels,mean_attr,rank\n";
  for (const auto& r : rows) {
    if (top_k > 0 && r.rank > top_k) break;
    out << fmt::format("{},{},{},{:.8g},{}\n", r.label, r.name, r.voxels, r.mean_attr, r.rank);
  }
}

}  // namespace regmae::attribution
