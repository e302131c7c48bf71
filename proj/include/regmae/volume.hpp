#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include <Eigen/Dense>

#include "regmae/error.hpp"

namespace regmae {

using Affine = Eigen::Matrix4d;
using Index3 = std::array<int, 3>;
using Index4 = std::array<int, 4>;

/// Boolean voxel mask stored x-fastest, like the voxel payload.
using Mask3D = Eigen::Array<bool, Eigen::Dynamic, 1>;

inline std::int64_t voxel_count(const Index3& d) {
  return std::int64_t(d[0]) * d[1] * d[2];
}

/// Linear offset of (x, y, z) in column-major (x-fastest) order.
inline std::int64_t linear_index(const Index3& d, int x, int y, int z) {
  return x + std::int64_t(d[0]) * (y + std::int64_t(d[1]) * z);
}

/// Time-indexed 3D voxel grid. Payload is column-major [X, Y, Z, T]: x varies
/// fastest and each frame is a contiguous block of X*Y*Z values.
struct Volume4D {
  Index4 dims{1, 1, 1, 1};
  Eigen::ArrayXf data;
  Affine affine = Affine::Identity();
  double tr_seconds = 1.0;
  std::optional<Mask3D> brain_mask;

  Volume4D() = default;
  Volume4D(const Index4& d, const Affine& a, double tr)
      : dims(d), data(Eigen::ArrayXf::Zero(std::int64_t(d[0]) * d[1] * d[2] * d[3])),
        affine(a), tr_seconds(tr) {}

  Index3 spatial() const { return {dims[0], dims[1], dims[2]}; }
  std::int64_t frame_size() const { return voxel_count(spatial()); }
  int frames() const { return dims[3]; }

  float& at(int x, int y, int z, int t) {
    return data[linear_index(spatial(), x, y, z) + frame_size() * t];
  }
  float at(int x, int y, int z, int t) const {
    return data[linear_index(spatial(), x, y, z) + frame_size() * t];
  }

  auto frame(int t) { return data.segment(frame_size() * t, frame_size()); }
  auto frame(int t) const { return data.segment(frame_size() * t, frame_size()); }
};

/// Integer-labeled atlas; label 0 is background.
struct LabelVolume {
  Index3 dims{1, 1, 1};
  Eigen::Array<std::int32_t, Eigen::Dynamic, 1> labels;
  Affine affine = Affine::Identity();

  LabelVolume() = default;
  LabelVolume(const Index3& d, const Affine& a)
      : dims(d), labels(decltype(labels)::Zero(voxel_count(d))), affine(a) {}

  std::int32_t& at(int x, int y, int z) { return labels[linear_index(dims, x, y, z)]; }
  std::int32_t at(int x, int y, int z) const { return labels[linear_index(dims, x, y, z)]; }
};

inline Affine diagonal_affine(double vx, double vy, double vz,
                              const Eigen::Vector3d& origin = Eigen::Vector3d::Zero()) {
  Affine a = Affine::Identity();
  a(0, 0) = vx;
  a(1, 1) = vy;
  a(2, 2) = vz;
  a.block<3, 1>(0, 3) = origin;
  return a;
}

}  // namespace regmae
