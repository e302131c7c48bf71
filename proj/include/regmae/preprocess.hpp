#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regmae/volume.hpp"

namespace regmae::preprocess {

enum class Interp { Trilinear, Nearest };

enum class QcReason { DiceFail, P99Fail };
std::string_view to_string(QcReason r);

struct QcReport {
  double dice = 0.0;
  double p99 = 0.0;
  bool excluded = false;
  std::vector<QcReason> reasons;
};

/// Pre-clip statistics over all brain voxels and timepoints.
struct NormStats {
  double mu = 0.0;
  double sigma = 1.0;
  double clip_lo = -5.0;
  double clip_hi = 5.0;
};

inline constexpr double kDiceThreshold = 0.85;
inline constexpr double kP99Threshold = 1.8862;

/// Samples `vol` on the grid given by `target_affine` and `target_shape`.
/// Target voxels whose source position falls outside the source extent are 0.
Volume4D resample_spatial(const Volume4D& vol, const Affine& target_affine,
                          const Index3& target_shape, Interp mode = Interp::Trilinear);
LabelVolume resample_labels(const LabelVolume& labels, const Affine& target_affine,
                            const Index3& target_shape);

Volume4D resample_temporal(const Volume4D& vol, double target_tr);

Volume4D crop_fov(const Volume4D& vol, const Index3& target = {96, 96, 96});
LabelVolume crop_fov(const LabelVolume& labels, const Index3& target = {96, 96, 96});

std::pair<Volume4D, NormStats> zscore_clip(const Volume4D& vol, const Mask3D& mask,
                                           double clip_lo = -5.0, double clip_hi = 5.0);

Mask3D estimate_brain_mask(const Volume4D& vol, double fraction = 0.2,
                           double robust_percentile = 98.0);

double dice(const Mask3D& a, const Mask3D& b);

QcReport qc_gate(double dice, double p99, double dice_thresh = kDiceThreshold,
                 double p99_thresh = kP99Threshold);

/// Linear-interpolation percentile (q in [0, 100]); reorders `values`.
double percentile(std::span<double> values, double q);

/// Percentile of intensities over mask voxels across all frames.
double masked_percentile(const Volume4D& vol, const Mask3D& mask, double q);

struct IqrThreshold {
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  double threshold = 0.0;  // q3 + 1.5 * iqr
};
IqrThreshold iqr_threshold(std::span<const double> p99_values);

Mask3D labels_to_mask(const LabelVolume& labels);

// ---- pipeline --------------------------------------------------------------

struct SubjectEntry {
  std::string subject_id;
  std::filesystem::path path;
  std::optional<int> label;
};

/// CSV with header `subject_id,path[,label]`; relative paths resolve against
/// `base_dir`.
std::vector<SubjectEntry> read_manifest(const std::filesystem::path& csv,
                                        const std::filesystem::path& base_dir = {});
void write_manifest(const std::vector<SubjectEntry>& subjects, const std::filesystem::path& csv);

struct PipelineOptions {
  double target_tr = 0.8;
  Index3 fov{96, 96, 96};
  bool resample_to_template = false;
  double mask_fraction = 0.2;
  double clip = 5.0;
  double dice_thresh = kDiceThreshold;
  double p99_thresh = kP99Threshold;
};

struct SubjectResult {
  Volume4D normalized;
  NormStats stats;
  QcReport qc;
};

/// Temporal resample, optional spatial resample onto the template grid, FOV
/// crop, brain-mask estimation, z-scoring and the QC measurements.
SubjectResult preprocess_subject(const Volume4D& raw, const LabelVolume& template_mask,
                                 const PipelineOptions& opts);

struct QcRow {
  std::string subject_id;
  QcReport report;
};
void write_qc_csv(const std::vector<QcRow>& rows, const std::filesystem::path& csv);

}  // namespace regmae::preprocess
