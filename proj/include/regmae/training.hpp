#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regmae/autodiff/optim.hpp"
#include "regmae/masking.hpp"
#include "regmae/model/hybrid_model.hpp"
#include "regmae/preprocess.hpp"

namespace regmae::training {

enum class Phase { Pretrain, Finetune };

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct RunConfig {
  Phase phase = Phase::Pretrain;
  int epochs = 30;
  int batch_size = 8;
  double lr = 5e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  masking::MaskSpec mask_spec;
  SplitRatios split;
  int n_seeds = 5;
  bool freeze_encoder = false;
  model::ModelConfig model = model::ModelConfig::desk();

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j, Phase phase);
};

struct Sample {
  std::string id;
  Volume4D volume;
  int label = -1;  // -1: unlabeled
};
using Cohort = std::vector<Sample>;

/// Reads every manifest entry, trimming trailing frames to a multiple of
/// `t_patch`.
Cohort load_cohort(const std::vector<preprocess::SubjectEntry>& entries, int t_patch);

/// Flat voxel offsets (Volume4D payload order) covered by masked slots.
std::vector<std::int64_t> masked_voxel_index(const masking::MaskTensor& mask, const Index4& dims, int patch,
                                             int t_patch);

/// Mean squared error over masked voxels only.
template <class S>
ad::Var<S> masked_mse(ad::Var<S> recon, const ad::Tensor<S>& target, const ad::IndexList& masked_voxels) {
  require(recon.size() == target.size(), ErrorKind::Validation,
          "masked_mse: reconstruction has " + std::to_string(recon.size()) + " values, target " +
              std::to_string(target.size()));
  require(masked_voxels && !masked_voxels->empty(), ErrorKind::Validation, "masked_mse: mask is empty");
  const auto n = std::int64_t(masked_voxels->size());
  ad::Tensor<S> t({n});
  for (std::int64_t i = 0; i < n; ++i) t.data[i] = target.data[(*masked_voxels)[std::size_t(i)]];
  auto diff = ad::sub(ad::gather(recon, masked_voxels, {n}), recon.tape->constant(std::move(t)));
  return ad::scale(ad::sum_sq(diff), S(1) / S(n));
}

/// Value-only form of masked_mse.
double masked_mse_value(const Eigen::ArrayXd& recon, const Eigen::ArrayXd& target,
                        const std::vector<std::int64_t>& masked_voxels);

struct Split {
  std::vector<int> train, val, test;  // indices into the subject list
};

/// Subject-level split. Labels (all >= 0) trigger stratification: every
/// split receives each class within +-1 of its proportional share.
Split split_subjects(const std::vector<int>& labels, const SplitRatios& ratios, std::uint64_t seed);

struct EpochRow {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> acc;
  std::optional<double> auroc;
};

void write_metrics_csv(const std::vector<EpochRow>& rows, const std::filesystem::path& path);

/// One optimizer over one model; the unit shared by the drivers and the
/// smoke tests.
class PretrainSession {
 public:
  PretrainSession(const model::ModelConfig& cfg, const ad::AdamWConfig& opt, double clip_norm, std::uint64_t seed);

  /// Forward/backward on one sample, gradients accumulated (scaled by
  /// `weight`); returns the unscaled loss.
  double accumulate(const Volume4D& vol, const masking::MaskTensor& mask, double weight = 1.0);
  /// Applies accumulated gradients and clears them. Returns true when
  /// clipping fired.
  bool apply();
  double evaluate(const Volume4D& vol, const masking::MaskTensor& mask);
  /// accumulate + apply on a single sample.
  double step(const Volume4D& vol, const masking::MaskTensor& mask);

  model::HybridModel<float>& model() { return model_; }
  void set_lr(double lr) { opt_.set_lr(lr); }

 private:
  model::HybridModel<float> model_;
  ad::AdamW<float> opt_;
  double clip_norm_;
};

struct PretrainResult {
  std::vector<EpochRow> rows;
  std::vector<double> step_losses;
  double best_val_loss = 0.0;
  int best_epoch = 0;
  int clip_events = 0;
  std::optional<std::filesystem::path> checkpoint;  // stem
};

/// Masked-reconstruction pretraining. With ratio < 1 a fresh mask is drawn
/// for every training sample; with ratio = 1 the spec's mask is fixed.
/// The best-validation parameters are kept and, with `out_stem`, saved.
PretrainResult pretrain(const RunConfig& run, const Cohort& cohort, const atlas::PatchSets& sets,
                        const std::optional<std::filesystem::path>& out_stem = std::nullopt);

struct FinetuneResult {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  std::optional<double> best_val_auroc;  // empty when the split is single-class
  double test_acc = 0.0;
  std::optional<double> test_auroc;
  std::vector<double> test_scores;
  std::vector<int> test_labels;
  std::vector<std::string> test_ids;
  std::optional<std::filesystem::path> checkpoint;
};

/// Binary classification from the encoder. `init` names a pretraining
/// checkpoint whose config hash must match run.model.
FinetuneResult finetune(const RunConfig& run, const Cohort& cohort,
                        const std::optional<std::filesystem::path>& init = std::nullopt,
                        const std::optional<std::filesystem::path>& out_stem = std::nullopt);

/// Flat float tensor of a volume in payload order.
template <class S>
ad::Tensor<S> volume_tensor(const Volume4D& vol) {
  return ad::Tensor<S>({vol.data.size()}, vol.data.template cast<S>());
}

}  // namespace regmae::training
