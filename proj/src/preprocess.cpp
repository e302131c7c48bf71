#include "regmae/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "regmae/nifti_io.hpp"

namespace regmae::preprocess {
namespace {

Eigen::Matrix4d source_from_target(const Affine& source, const Affine& target) {
  const double det = source.block<3, 3>(0, 0).determinant();
  require(std::isfinite(det) && std::abs(det) > 1e-12, ErrorKind::Geometry, "source affine is singular");
  const double tdet = target.block<3, 3>(0, 0).determinant();
  require(std::isfinite(tdet) && std::abs(tdet) > 1e-12, ErrorKind::Geometry, "target affine is singular");
  return source.inverse() * target;
}

void check_shape(const Index3& s) {
  require(s[0] > 0 && s[1] > 0 && s[2] > 0, ErrorKind::Geometry, "target shape must be positive");
}

constexpr double kEdge = 1e-6;

/// Offset of the crop window along one axis: positive = crop start,
/// negative = padding before the data.
int crop_start(int have, int want) {
  return have >= want ? (have - want) / 2 : -((want - have) / 2);
}

Affine shifted_affine(const Affine& a, const Index3& start) {
  Affine shift = Affine::Identity();
  for (int i = 0; i < 3; ++i) shift(i, 3) = start[i];
  return a * shift;
}

}  // namespace

std::string_view to_string(QcReason r) {
  return r == QcReason::DiceFail ? "DICE_FAIL" : "P99_FAIL";
}

Volume4D resample_spatial(const Volume4D& vol, const Affine& target_affine, const Index3& shape,
                          Interp mode) {
  check_shape(shape);
  const Eigen::Matrix4d m = source_from_target(vol.affine, target_affine);
  const Index3 src = vol.spatial();
  Volume4D out({shape[0], shape[1], shape[2], vol.frames()}, target_affine, vol.tr_seconds);
  const std::int64_t src_frame = vol.frame_size();
  const std::int64_t dst_frame = out.frame_size();

  for (int z = 0; z < shape[2]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[0]; ++x) {
        const Eigen::Vector4d p = m * Eigen::Vector4d(x, y, z, 1.0);
        const std::int64_t dst = linear_index(shape, x, y, z);
        if (mode == Interp::Nearest) {
          const long ix = std::lround(p[0]), iy = std::lround(p[1]), iz = std::lround(p[2]);
          if (ix < 0 || iy < 0 || iz < 0 || ix >= src[0] || iy >= src[1] || iz >= src[2]) continue;
          const std::int64_t s = linear_index(src, int(ix), int(iy), int(iz));
          for (int t = 0; t < vol.frames(); ++t) out.data[dst + dst_frame * t] = vol.data[s + src_frame * t];
          continue;
        }
        bool inside = true;
        std::array<int, 3> i0{}, i1{};
        std::array<double, 3> f{};
        for (int a = 0; a < 3; ++a) {
          if (p[a] < -kEdge || p[a] > src[a] - 1 + kEdge) {
            inside = false;
            break;
          }
          const double c = std::clamp(p[a], 0.0, double(src[a] - 1));
          i0[a] = int(std::floor(c));
          i1[a] = std::min(i0[a] + 1, src[a] - 1);
          f[a] = c - i0[a];
        }
        if (!inside) continue;
        for (int t = 0; t < vol.frames(); ++t) {
          double acc = 0.0;
          for (int corner = 0; corner < 8; ++corner) {
            const int cx = corner & 1, cy = (corner >> 1) & 1, cz = (corner >> 2) & 1;
            const double w = (cx ? f[0] : 1 - f[0]) * (cy ? f[1] : 1 - f[1]) * (cz ? f[2] : 1 - f[2]);
            if (w == 0.0) continue;
            acc += w * vol.at(cx ? i1[0] : i0[0], cy ? i1[1] : i0[1], cz ? i1[2] : i0[2], t);
          }
          out.data[dst + dst_frame * t] = float(acc);
        }
      }
  return out;
}

LabelVolume resample_labels(const LabelVolume& labels, const Affine& target_affine, const Index3& shape) {
  check_shape(shape);
  const Eigen::Matrix4d m = source_from_target(labels.affine, target_affine);
  LabelVolume out(shape, target_affine);
  const Index3 src = labels.dims;
  for (int z = 0; z < shape[2]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[0]; ++x) {
        const Eigen::Vector4d p = m * Eigen::Vector4d(x, y, z, 1.0);
        const long ix = std::lround(p[0]), iy = std::lround(p[1]), iz = std::lround(p[2]);
        if (ix < 0 || iy < 0 || iz < 0 || ix >= src[0] || iy >= src[1] || iz >= src[2]) continue;
        out.at(x, y, z) = labels.at(int(ix), int(iy), int(iz));
      }
  return out;
}

Volume4D resample_temporal(const Volume4D& vol, double target_tr) {
  require(vol.tr_seconds > 0 && target_tr > 0, ErrorKind::Validation, "TR must be positive");
  const int T = vol.frames();
  require(T >= 2, ErrorKind::InsufficientSamples, "temporal resampling needs at least 2 frames");
  const double duration = (T - 1) * vol.tr_seconds;
  const int out_t = int(std::floor(duration / target_tr + 1e-9)) + 1;

  Volume4D out({vol.dims[0], vol.dims[1], vol.dims[2], out_t}, vol.affine, target_tr);
  out.brain_mask = vol.brain_mask;
  for (int k = 0; k < out_t; ++k) {
    const double pos = k * target_tr / vol.tr_seconds;
    int lo = std::min(int(std::floor(pos + 1e-9)), T - 1);
    const double frac = std::clamp(pos - lo, 0.0, 1.0);
    const int hi = std::min(lo + 1, T - 1);
    if (frac < 1e-12 || hi == lo) {
      out.frame(k) = vol.frame(lo);
    } else {
      // a + f (b - a) keeps constant series exact.
      out.frame(k) = (vol.frame(lo).cast<double>() +
                      frac * (vol.frame(hi).cast<double>() - vol.frame(lo).cast<double>()))
                         .cast<float>();
    }
  }
  return out;
}

Volume4D crop_fov(const Volume4D& vol, const Index3& target) {
  check_shape(target);
  Index3 start;
  for (int a = 0; a < 3; ++a) start[a] = crop_start(vol.dims[a], target[a]);
  Volume4D out({target[0], target[1], target[2], vol.frames()}, shifted_affine(vol.affine, start),
               vol.tr_seconds);
  const Index3 src = vol.spatial();
  std::optional<Mask3D> mask;
  if (vol.brain_mask) mask = Mask3D::Constant(voxel_count(target), false);
  for (int z = 0; z < target[2]; ++z)
    for (int y = 0; y < target[1]; ++y)
      for (int x = 0; x < target[0]; ++x) {
        const int sx = x + start[0], sy = y + start[1], sz = z + start[2];
        if (sx < 0 || sy < 0 || sz < 0 || sx >= src[0] || sy >= src[1] || sz >= src[2]) continue;
        for (int t = 0; t < vol.frames(); ++t) out.at(x, y, z, t) = vol.at(sx, sy, sz, t);
        if (mask) (*mask)[linear_index(target, x, y, z)] = (*vol.brain_mask)[linear_index(src, sx, sy, sz)];
      }
  out.brain_mask = std::move(mask);
  return out;
}

LabelVolume crop_fov(const LabelVolume& labels, const Index3& target) {
  check_shape(target);
  Index3 start;
  for (int a = 0; a < 3; ++a) start[a] = crop_start(labels.dims[a], target[a]);
  LabelVolume out(target, shifted_affine(labels.affine, start));
  for (int z = 0; z < target[2]; ++z)
    for (int y = 0; y < target[1]; ++y)
      for (int x = 0; x < target[0]; ++x) {
        const int sx = x + start[0], sy = y + start[1], sz = z + start[2];
        if (sx < 0 || sy < 0 || sz < 0 || sx >= labels.dims[0] || sy >= labels.dims[1] ||
            sz >= labels.dims[2])
          continue;
        out.at(x, y, z) = labels.at(sx, sy, sz);
      }
  return out;
}

std::pair<Volume4D, NormStats> zscore_clip(const Volume4D& vol, const Mask3D& mask, double clip_lo,
                                           double clip_hi) {
  require(mask.size() == vol.frame_size(), ErrorKind::Geometry, "mask shape does not match volume");
  require(clip_lo < clip_hi, ErrorKind::Validation, "clip_lo must be below clip_hi");
  const std::int64_t inside = mask.count();
  require(inside > 0, ErrorKind::EmptyMask, "brain mask is empty");

  const std::int64_t F = vol.frame_size();
  double sum = 0.0;
  for (int t = 0; t < vol.frames(); ++t)
    for (std::int64_t i = 0; i < F; ++i)
      if (mask[i]) sum += vol.data[i + F * t];
  const double n = double(inside) * vol.frames();
  const double mu = sum / n;
  double ss = 0.0;
  for (int t = 0; t < vol.frames(); ++t)
    for (std::int64_t i = 0; i < F; ++i)
      if (mask[i]) {
        const double d = vol.data[i + F * t] - mu;
        ss += d * d;
      }
  const double sigma = std::sqrt(ss / n);
  require(sigma > 0.0, ErrorKind::Degenerate, "zero variance inside the brain mask (constant volume)");

  Volume4D out(vol.dims, vol.affine, vol.tr_seconds);
  for (int t = 0; t < vol.frames(); ++t)
    for (std::int64_t i = 0; i < F; ++i)
      if (mask[i])
        out.data[i + F * t] = float(std::clamp((vol.data[i + F * t] - mu) / sigma, clip_lo, clip_hi));
  out.brain_mask = mask;
  return {std::move(out), NormStats{mu, sigma, clip_lo, clip_hi}};
}

Mask3D estimate_brain_mask(const Volume4D& vol, double fraction, double robust_percentile) {
  require(vol.frames() >= 1, ErrorKind::Validation, "volume has no frames");
  const std::int64_t F = vol.frame_size();
  Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(F);
  for (int t = 0; t < vol.frames(); ++t) mean += vol.frame(t).cast<double>();
  mean /= vol.frames();
  std::vector<double> values(mean.begin(), mean.end());
  const double robust_max = percentile(values, robust_percentile);
  Mask3D mask = mean > fraction * robust_max;
  if (robust_max <= 0.0) mask = mean > 0.0;
  require(mask.count() > 0, ErrorKind::EmptyMask, "no voxel exceeds the brain-mask threshold");
  return mask;
}

double dice(const Mask3D& a, const Mask3D& b) {
  require(a.size() == b.size(), ErrorKind::Geometry, "dice: mask shapes differ");
  const std::int64_t na = a.count(), nb = b.count();
  if (na + nb == 0) return 0.0;
  const std::int64_t both = (a && b).count();
  return 2.0 * double(both) / double(na + nb);
}

QcReport qc_gate(double dice_value, double p99, double dice_thresh, double p99_thresh) {
  QcReport r;
  r.dice = dice_value;
  r.p99 = p99;
  if (!(dice_value > dice_thresh)) r.reasons.push_back(QcReason::DiceFail);
  if (p99 > p99_thresh) r.reasons.push_back(QcReason::P99Fail);
  r.excluded = !r.reasons.empty();
  return r;
}

double percentile(std::span<double> values, double q) {
  require(!values.empty(), ErrorKind::Validation, "percentile of an empty set");
  require(q >= 0 && q <= 100, ErrorKind::Validation, "percentile must be in [0,100]");
  const double pos = q / 100.0 * double(values.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const double frac = pos - double(lo);
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (frac == 0.0 || lo + 1 >= values.size()) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + frac * (b - a);
}

double masked_percentile(const Volume4D& vol, const Mask3D& mask, double q) {
  require(mask.size() == vol.frame_size(), ErrorKind::Geometry, "mask shape does not match volume");
  std::vector<double> v;
  v.reserve(std::size_t(mask.count()) * vol.frames());
  const std::int64_t F = vol.frame_size();
  for (int t = 0; t < vol.frames(); ++t)
    for (std::int64_t i = 0; i < F; ++i)
      if (mask[i]) v.push_back(vol.data[i + F * t]);
  require(!v.empty(), ErrorKind::EmptyMask, "percentile over an empty mask");
  return percentile(v, q);
}

IqrThreshold iqr_threshold(std::span<const double> p99_values) {
  require(p99_values.size() >= 2, ErrorKind::InsufficientSamples, "IQR needs at least two subjects");
  std::vector<double> v(p99_values.begin(), p99_values.end());
  IqrThreshold r;
  r.q1 = percentile(v, 25.0);
  r.q3 = percentile(v, 75.0);
  r.iqr = r.q3 - r.q1;
  r.threshold = r.q3 + 1.5 * r.iqr;
  return r;
}

Mask3D labels_to_mask(const LabelVolume& labels) { return labels.labels > 0; }

std::vector<SubjectEntry> read_manifest(const std::filesystem::path& csv,
                                        const std::filesystem::path& base_dir) {
  std::ifstream in(csv);
  require(bool(in), ErrorKind::Io, "cannot open manifest " + csv.string());
  std::string line;
  require(bool(std::getline(in, line)), ErrorKind::Config, "manifest is empty: " + csv.string());
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  auto col = [&](const std::string& name) -> int {
    auto it = std::find(cols.begin(), cols.end(), name);
    return it == cols.end() ? -1 : int(it - cols.begin());
  };
  const int c_id = col("subject_id"), c_path = col("path"), c_label = col("label");
  require(c_id >= 0 && c_path >= 0, ErrorKind::Config, "manifest needs subject_id and path columns");

  std::vector<SubjectEntry> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) f.push_back(c);
    require(int(f.size()) > std::max(c_id, c_path), ErrorKind::Config, "short manifest row: " + line);
    SubjectEntry e;
    e.subject_id = f[c_id];
    e.path = f[c_path];
    if (e.path.is_relative() && !base_dir.empty()) e.path = base_dir / e.path;
    if (c_label >= 0 && c_label < int(f.size()) && !f[c_label].empty()) e.label = std::stoi(f[c_label]);
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::vector<SubjectEntry>& subjects, const std::filesystem::path& csv) {
  std::ofstream out(csv);
  require(bool(out), ErrorKind::Io, "cannot write manifest " + csv.string());
  const bool labeled = std::any_of(subjects.begin(), subjects.end(), [](auto& s) { return s.label.has_value(); });
  out << (labeled ? "subject_id,path,label\n" : "subject_id,path\n");
  for (const auto& s : subjects) {
    out << s.subject_id << ',' << s.path.string();
    if (labeled) out << ',' << (s.label ? std::to_string(*s.label) : "");
    out << '\n';
  }
}

SubjectResult preprocess_subject(const Volume4D& raw, const LabelVolume& template_mask,
                                 const PipelineOptions& opts) {
  Volume4D vol = raw;
  if (opts.target_tr > 0 && std::abs(vol.tr_seconds - opts.target_tr) > 1e-9 && vol.frames() >= 2)
    vol = resample_temporal(vol, opts.target_tr);
  if (opts.resample_to_template)
    vol = resample_spatial(vol, template_mask.affine, template_mask.dims, Interp::Trilinear);
  else
    require(vol.spatial() == template_mask.dims, ErrorKind::Geometry,
            "subject grid differs from the template grid; enable resample_to_template");

  vol = crop_fov(vol, opts.fov);
  const LabelVolume tmpl = crop_fov(template_mask, opts.fov);

  const Mask3D mask = estimate_brain_mask(vol, opts.mask_fraction);
  auto [normalized, stats] = zscore_clip(vol, mask, -opts.clip, opts.clip);
  const double d = dice(mask, labels_to_mask(tmpl));
  const double p99 = masked_percentile(normalized, mask, 99.0);
  return {std::move(normalized), stats, qc_gate(d, p99, opts.dice_thresh, opts.p99_thresh)};
}

void write_qc_csv(const std::vector<QcRow>& rows, const std::filesystem::path& csv) {
  std::ofstream out(csv);
  require(bool(out), ErrorKind::Io, "cannot write " + csv.string());
  out << "subject_id,dice,p99,excluded,reasons\n";
  for (const auto& r : rows) {
    std::string reasons;
    for (auto reason : r.report.reasons) {
      if (!reasons.empty()) reasons += ';';
      reasons += to_string(reason);
    }
    out << fmt::format("{},{:.6f},{:.6f},{},{}\n", r.subject_id, r.report.dice, r.report.p99,
                       r.report.excluded ? 1 : 0, reasons);
  }
}

}  // namespace regmae::preprocess
