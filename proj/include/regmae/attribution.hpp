#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regmae/model/hybrid_model.hpp"
#include "regmae/volume.hpp"

namespace regmae::attribution {

enum class Baseline { Zero, Mean };

struct AttributionConfig {
  int ig_steps = 32;
  Baseline baseline = Baseline::Zero;
  int sg_samples = 8;
  double sg_noise_std = 0.1;  // in units of the input's standard deviation
  double gauss_sigma = 1.0;   // voxels
  double top_percentile = 99.0;
  int min_roi_voxels = 10;
  int top_k = 20;

  void validate() const;
  nlohmann::json to_json() const;
  static AttributionConfig from_json(const nlohmann::json& j);
};

struct AttributionMap {
  Eigen::ArrayXd map3d;  // x-fastest
  Index3 dims{0, 0, 0};
  std::string subject_id;
  std::uint64_t seed = 0;
  bool normalized = false;
};

/// Scalar function of a flat input; writes its gradient into `grad`.
using GradFn = std::function<double(const Eigen::ArrayXd& x, Eigen::ArrayXd& grad)>;

/// Midpoint Riemann approximation of (x - x0) * integral of grad f along the
/// straight path from x0 to x.
Eigen::ArrayXd integrated_gradients(const GradFn& f, const Eigen::ArrayXd& x, const Eigen::ArrayXd& baseline,
                                    int steps);

Eigen::ArrayXd make_baseline(const Eigen::ArrayXd& x, Baseline kind);

/// Separable Gaussian filter (radius ceil(4 sigma)). Mass leaving the grid is
/// mirrored back about the boundary, so the total is preserved.
Eigen::ArrayXd gaussian_smooth(const Eigen::ArrayXd& vol, const Index3& dims, double sigma);

/// SmoothGrad-averaged squared IG, smoothed per frame and averaged over time.
AttributionMap ig_sq(const GradFn& f, const Volume4D& input, const AttributionConfig& cfg, std::uint64_t seed);

/// L1-normalizes each map, then averages.
AttributionMap aggregate_group(const std::vector<AttributionMap>& maps);

struct RoiRow {
  std::int32_t label = 0;
  std::string name;
  std::int64_t voxels = 0;
  double mean_attr = 0.0;
  int rank = 0;
};

struct Projection {
  Eigen::ArrayXd thresholded;
  double cutoff = 0.0;
  std::vector<RoiRow> rois;  // ranked, every ROI with enough voxels
};

/// Zeroes voxels below the top-percentile cutoff and ranks atlas ROIs by
/// their mean attribution on the unthresholded map.
Projection threshold_and_project(const AttributionMap& group, const LabelVolume& atlas, const AttributionConfig& cfg,
                                 const std::map<std::int32_t, std::string>& names = {});

void write_roi_csv(const std::vector<RoiRow>& rows, const std::filesystem::path& path, int top_k = 0);

/// Classification logit of a model as a GradFn over flat volumes.
template <class S>
GradFn logit_function(model::HybridModel<S>& m, const Index4& dims) {
  return [&m, dims](const Eigen::ArrayXd& x, Eigen::ArrayXd& grad) {
    ad::Tape<S> tape;
    auto in = tape.input(ad::Tensor<S>({x.size()}, x.cast<S>()));
    auto logit = m.forward_classify(tape, in, dims);
    tape.backward(logit);
    grad = tape.grad_of(in).data.template cast<double>();
    return double(logit.value().item());
  };
}

}  // namespace regmae::attribution
