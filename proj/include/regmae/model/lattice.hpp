#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "regmae/autodiff/ops.hpp"
#include "regmae/model/config.hpp"
#include "regmae/volume.hpp"

namespace regmae::model {

/// 4D token lattice. Row of token (x, y, z, t) is p * nt + t with the spatial
/// patch index p = x + nx * (y + ny * z), the same order as mask slots.
struct Lattice {
  int nx = 1, ny = 1, nz = 1, nt = 1;

  std::int64_t spatial() const { return std::int64_t(nx) * ny * nz; }
  std::int64_t count() const { return spatial() * nt; }
  std::int64_t row(int x, int y, int z, int t) const {
    return (x + std::int64_t(nx) * (y + std::int64_t(ny) * z)) * nt + t;
  }
  std::array<int, 4> extents() const { return {nx, ny, nz, nt}; }
  Lattice merged() const { return {nx / 2, ny / 2, nz / 2, nt}; }
  bool operator==(const Lattice&) const = default;
};

/// Token lattice of a [X, Y, Z, T] volume cut into patch^3 x t_patch tubes.
Lattice lattice_for(const Index4& volume_dims, int patch, int t_patch);

/// Row permutation that groups tokens window by window after an optional
/// cyclic shift of half a window. With a shift, `groups` tags every permuted
/// row with the pre-shift region it came from; rows of different groups must
/// not attend to each other.
struct WindowLayout {
  ad::IndexList perm;
  std::shared_ptr<const std::vector<int>> groups;
  std::int64_t window_len = 0;
  std::array<int, 4> window{};
  std::array<int, 4> shift{};
};

/// Window extents are clamped to the lattice; axes covered by a single
/// window are never shifted.
WindowLayout window_layout(const Lattice& lat, const std::array<int, 4>& window, bool shifted);

/// For each coarse token, the 8 fine rows of its 2x2x2 spatial block,
/// laid out [coarse][child] with child = dx + 2 * (dy + 2 * dz).
ad::IndexList merge_index(const Lattice& fine);

/// Flat voxel offsets feeding each token: [tokens, t_patch * patch^3] with
/// features ordered (lt, dz, dy, dx), dx fastest.
ad::IndexList patchify_index(const Index4& volume_dims, int patch, int t_patch);

/// Inverse of patchify_index as a flat [X*Y*Z*T] gather into the
/// [tokens * features] buffer.
ad::IndexList unpatchify_index(const Index4& volume_dims, int patch, int t_patch);

/// Row order the selective scan walks; null when it equals token order.
ad::IndexList scan_permutation(const Lattice& lat, ScanOrder order);

/// Fixed sinusoidal code of the (x, y, z, t) lattice position, [count, dim].
Eigen::ArrayXd positional_encoding(const Lattice& lat, int dim);

}  // namespace regmae::model
