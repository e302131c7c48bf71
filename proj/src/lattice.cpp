#include "regmae/model/lattice.hpp"

#include <cmath>
#include <string>

namespace regmae::model {

Lattice lattice_for(const Index4& d, int patch, int t_patch) {
  for (int a = 0; a < 3; ++a)
    require(d[a] % patch == 0, ErrorKind::Geometry,
            "volume extent " + std::to_string(d[a]) + " is not a multiple of the patch size " + std::to_string(patch));
  require(d[3] % t_patch == 0, ErrorKind::Geometry,
          std::to_string(d[3]) + " frames are not a multiple of t_patch " + std::to_string(t_patch));
  return {d[0] / patch, d[1] / patch, d[2] / patch, d[3] / t_patch};
}

WindowLayout window_layout(const Lattice& lat, const std::array<int, 4>& window, bool shifted) {
  const auto ext = lat.extents();
  WindowLayout out;
  for (int a = 0; a < 4; ++a) {
    out.window[a] = std::min(window[a], ext[a]);
    require(out.window[a] > 0 && ext[a] % out.window[a] == 0, ErrorKind::Validation,
            "lattice extent " + std::to_string(ext[a]) + " is not divisible by window " + std::to_string(out.window[a]));
    out.shift[a] = shifted && out.window[a] < ext[a] ? out.window[a] / 2 : 0;
  }
  const auto& w = out.window;
  const auto& s = out.shift;
  out.window_len = std::int64_t(w[0]) * w[1] * w[2] * w[3];
  const bool any_shift = s[0] || s[1] || s[2] || s[3];

  std::vector<std::int64_t> perm;
  std::vector<int> groups;
  perm.reserve(std::size_t(lat.count()));
  auto region = [&](int a, int c) {
    if (!s[a]) return 0;
    if (c < ext[a] - w[a]) return 0;
    return c < ext[a] - s[a] ? 1 : 2;
  };
  for (int wt = 0; wt < ext[3]; wt += w[3])
    for (int wz = 0; wz < ext[2]; wz += w[2])
      for (int wy = 0; wy < ext[1]; wy += w[1])
        for (int wx = 0; wx < ext[0]; wx += w[0])
          for (int ot = 0; ot < w[3]; ++ot)
            for (int oz = 0; oz < w[2]; ++oz)
              for (int oy = 0; oy < w[1]; ++oy)
                for (int ox = 0; ox < w[0]; ++ox) {
                  // Position in the rolled frame and the token it holds.
                  const int c[4] = {wx + ox, wy + oy, wz + oz, wt + ot};
                  int src[4];
                  for (int a = 0; a < 4; ++a) src[a] = (c[a] + s[a]) % ext[a];
                  perm.push_back(lat.row(src[0], src[1], src[2], src[3]));
                  if (any_shift)
                    groups.push_back(region(0, c[0]) + 3 * (region(1, c[1]) + 3 * (region(2, c[2]) + 3 * region(3, c[3]))));
                }
  out.perm = ad::make_index(std::move(perm));
  if (any_shift) out.groups = std::make_shared<const std::vector<int>>(std::move(groups));
  return out;
}

ad::IndexList merge_index(const Lattice& fine) {
  require(fine.nx % 2 == 0 && fine.ny % 2 == 0 && fine.nz % 2 == 0, ErrorKind::Validation,
          "patch merging needs even spatial lattice extents");
  const Lattice coarse = fine.merged();
  std::vector<std::int64_t> idx;
  idx.reserve(std::size_t(fine.count()));
  for (int z = 0; z < coarse.nz; ++z)
    for (int y = 0; y < coarse.ny; ++y)
      for (int x = 0; x < coarse.nx; ++x)
        for (int t = 0; t < coarse.nt; ++t)
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) idx.push_back(fine.row(2 * x + dx, 2 * y + dy, 2 * z + dz, t));
  return ad::make_index(std::move(idx));
}

ad::IndexList patchify_index(const Index4& d, int patch, int t_patch) {
  const Lattice lat = lattice_for(d, patch, t_patch);
  const std::int64_t frame = std::int64_t(d[0]) * d[1] * d[2];
  std::vector<std::int64_t> idx;
  idx.reserve(std::size_t(frame * d[3]));
  for (int gz = 0; gz < lat.nz; ++gz)
    for (int gy = 0; gy < lat.ny; ++gy)
      for (int gx = 0; gx < lat.nx; ++gx)
        for (int gt = 0; gt < lat.nt; ++gt)
          for (int lt = 0; lt < t_patch; ++lt)
            for (int dz = 0; dz < patch; ++dz)
              for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                  const int x = gx * patch + dx, y = gy * patch + dy, z = gz * patch + dz, t = gt * t_patch + lt;
                  idx.push_back(x + std::int64_t(d[0]) * (y + std::int64_t(d[1]) * z) + frame * t);
                }
  return ad::make_index(std::move(idx));
}

ad::IndexList unpatchify_index(const Index4& d, int patch, int t_patch) {
  const auto fwd = patchify_index(d, patch, t_patch);
  std::vector<std::int64_t> inv(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) inv[std::size_t((*fwd)[i])] = std::int64_t(i);
  return ad::make_index(std::move(inv));
}

ad::IndexList scan_permutation(const Lattice& lat, ScanOrder order) {
  if (order == ScanOrder::TimeMajor) return nullptr;
  std::vector<std::int64_t> idx;
  idx.reserve(std::size_t(lat.count()));
  for (int t = 0; t < lat.nt; ++t)
    for (std::int64_t p = 0; p < lat.spatial(); ++p) idx.push_back(p * lat.nt + t);
  return ad::make_index(std::move(idx));
}

Eigen::ArrayXd positional_encoding(const Lattice& lat, int dim) {
  // Each axis gets an even share of channels; leftovers stay zero.
  const int per_axis = (dim / 4) & ~1;
  Eigen::ArrayXd pe = Eigen::ArrayXd::Zero(lat.count() * dim);
  if (per_axis == 0) return pe;
  const int n_freq = per_axis / 2;
  for (int z = 0; z < lat.nz; ++z)
    for (int y = 0; y < lat.ny; ++y)
      for (int x = 0; x < lat.nx; ++x)
        for (int t = 0; t < lat.nt; ++t) {
          const int pos[4] = {x, y, z, t};
          const std::int64_t base = lat.row(x, y, z, t) * dim;
          for (int a = 0; a < 4; ++a)
            for (int k = 0; k < n_freq; ++k) {
              const double omega = std::pow(100.0, -double(k) / n_freq);
              pe[base + a * per_axis + 2 * k] = std::sin(pos[a] * omega);
              pe[base + a * per_axis + 2 * k + 1] = std::cos(pos[a] * omega);
            }
        }
  return pe;
}

}  // namespace regmae::model

#include "regmae/model/hybrid_model.hpp"

namespace regmae::model {

Geometry make_geometry(const ModelConfig& cfg, const Index4& dims) {
  Geometry g;
  g.dims = dims;
  g.lattices.push_back(lattice_for(dims, cfg.patch_size, cfg.t_patch));
  g.merge.push_back(nullptr);
  for (int s = 1; s < cfg.stages(); ++s) {
    g.merge.push_back(merge_index(g.lattices.back()));
    g.lattices.push_back(g.lattices.back().merged());
  }
  for (const auto& lat : g.lattices) {
    g.plain.push_back(window_layout(lat, cfg.window, false));
    g.shifted.push_back(window_layout(lat, cfg.window, true));
    g.scan.push_back(scan_permutation(lat, cfg.scan_order));
  }
  g.patchify = patchify_index(dims, cfg.patch_size, cfg.t_patch);
  g.unpatchify = unpatchify_index(dims, cfg.patch_size, cfg.t_patch);
  g.pe = positional_encoding(g.lattices.front(), cfg.embed_dim);
  return g;
}

}  // namespace regmae::model
