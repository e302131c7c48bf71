#include "regmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include <fmt/format.h>

#include "regmae/autodiff/checkpoint.hpp"
#include "regmae/metrics_stats.hpp"
#include "regmae/nifti_io.hpp"
#include "regmae/random.hpp"

namespace regmae::training {
namespace {

using Snapshot = std::vector<Eigen::ArrayXf>;

Snapshot snapshot(const ad::ParameterStore<float>& params) {
  Snapshot s;
  for (const auto& p : params) s.push_back(p->value.data);
  return s;
}

void restore(ad::ParameterStore<float>& params, const Snapshot& s) {
  std::size_t i = 0;
  for (auto& p : params) p->value.data = s[i++];
}

ad::AdamWConfig optimizer_config(const RunConfig& run) {
  ad::AdamWConfig c;
  c.lr = run.lr;
  c.weight_decay = run.weight_decay;
  return c;
}

void check_uniform_dims(const Cohort& cohort) {
  require(!cohort.empty(), ErrorKind::Validation, "cohort is empty");
  for (const auto& s : cohort)
    require(s.volume.dims == cohort.front().volume.dims, ErrorKind::Validation,
            "subject " + s.id + " has a different volume shape than " + cohort.front().id);
}

std::vector<int> labels_of(const Cohort& cohort) {
  std::vector<int> labels;
  for (const auto& s : cohort) labels.push_back(s.label);
  return labels;
}

ad::CheckpointInfo checkpoint_info(const model::ModelConfig& cfg) {
  return {cfg.hash(), std::string(model::to_string(cfg.configuration))};
}

std::string format_opt(const std::optional<double>& v) {
  return v ? fmt::format("{:.6f}", *v) : std::string();
}

}  // namespace

// ---- config ----------------------------------------------------------------

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, msg); };
  check(epochs >= 0, "epochs must be >= 0");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(lr >= 0 && std::isfinite(lr), "lr must be a finite value >= 0");
  check(weight_decay >= 0, "weight_decay must be >= 0");
  check(n_seeds >= 1, "n_seeds must be >= 1");
  check(split.train > 0 && split.val > 0 && split.test > 0, "split ratios must be positive");
  check(std::abs(split.train + split.val + split.test - 1.0) < 1e-6, "split ratios must sum to 1");
  model.validate();
  if (phase == Phase::Pretrain) mask_spec.validate();
}

nlohmann::json RunConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"n_seeds", n_seeds},
          {"freeze_encoder", freeze_encoder},
          {"split", {split.train, split.val, split.test}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j, Phase phase) {
  RunConfig r;
  r.phase = phase;
  r.epochs = phase == Phase::Pretrain ? 30 : 20;
  try {
    r.epochs = j.value("epochs", r.epochs);
    r.batch_size = j.value("batch_size", r.batch_size);
    r.lr = j.value("lr", r.lr);
    r.weight_decay = j.value("weight_decay", r.weight_decay);
    r.clip_norm = j.value("clip_norm", r.clip_norm);
    r.n_seeds = j.value("n_seeds", r.n_seeds);
    r.freeze_encoder = j.value("freeze_encoder", r.freeze_encoder);
    if (j.contains("split")) {
      const auto v = j.at("split").get<std::vector<double>>();
      require(v.size() == 3, ErrorKind::Config, "split must list three ratios (train, val, test)");
      r.split = {v[0], v[1], v[2]};
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("bad training config: ") + e.what());
  }
  return r;
}

// ---- data ------------------------------------------------------------------

Cohort load_cohort(const std::vector<preprocess::SubjectEntry>& entries, int t_patch) {
  Cohort cohort;
  for (const auto& e : entries) {
    Sample s;
    s.id = e.subject_id;
    s.label = e.label.value_or(-1);
    s.volume = nifti::read_volume(e.path);
    const int keep = s.volume.frames() / t_patch * t_patch;
    require(keep > 0, ErrorKind::Validation,
            "subject " + e.subject_id + " has fewer frames than t_patch = " + std::to_string(t_patch));
    if (keep != s.volume.frames()) {
      s.volume.data.conservativeResize(s.volume.frame_size() * keep);
      s.volume.dims[3] = keep;
    }
    cohort.push_back(std::move(s));
  }
  return cohort;
}

std::vector<std::int64_t> masked_voxel_index(const masking::MaskTensor& mask, const Index4& d, int patch, int t_patch) {
  const model::Lattice lat = model::lattice_for(d, patch, t_patch);
  require(mask.n_patches == lat.spatial() && mask.t_patches == lat.nt, ErrorKind::Validation,
          "mask lattice does not match the volume's token lattice");
  const std::int64_t frame = std::int64_t(d[0]) * d[1] * d[2];
  std::vector<std::int64_t> idx;
  for (int p = 0; p < mask.n_patches; ++p) {
    const int gx = p % lat.nx, gy = (p / lat.nx) % lat.ny, gz = p / (lat.nx * lat.ny);
    for (int tb = 0; tb < mask.t_patches; ++tb) {
      if (!mask.at(p, tb)) continue;
      for (int lt = 0; lt < t_patch; ++lt)
        for (int dz = 0; dz < patch; ++dz)
          for (int dy = 0; dy < patch; ++dy)
            for (int dx = 0; dx < patch; ++dx) {
              const std::int64_t x = gx * patch + dx, y = gy * patch + dy, z = gz * patch + dz;
              idx.push_back(x + d[0] * (y + d[1] * z) + frame * (tb * t_patch + lt));
            }
    }
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

double masked_mse_value(const Eigen::ArrayXd& recon, const Eigen::ArrayXd& target,
                        const std::vector<std::int64_t>& masked_voxels) {
  require(recon.size() == target.size(), ErrorKind::Validation, "masked_mse: shape mismatch");
  require(!masked_voxels.empty(), ErrorKind::Validation, "masked_mse: mask is empty");
  double ss = 0.0;
  for (auto i : masked_voxels) ss += (recon[i] - target[i]) * (recon[i] - target[i]);
  return ss / double(masked_voxels.size());
}

Split split_subjects(const std::vector<int>& labels, const SplitRatios& ratios, std::uint64_t seed) {
  const int n = int(labels.size());
  require(n >= 10, ErrorKind::Config, "subject-level splitting needs at least 10 subjects, got " + std::to_string(n));
  const bool stratify = std::all_of(labels.begin(), labels.end(), [](int l) { return l >= 0; });

  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < n; ++i) by_class[stratify ? labels[std::size_t(i)] : 0].push_back(i);

  // Each class is shuffled and spread evenly over [0, 1); contiguous chunks of
  // the merged order then hold every class in proportion.
  Rng rng(derive_seed(seed, 0x5b1d));
  std::vector<std::tuple<double, int, int>> keyed;
  for (auto& [cls, members] : by_class) {
    shuffle(members, rng);
    for (std::size_t k = 0; k < members.size(); ++k)
      keyed.emplace_back((double(k) + 0.5) / double(members.size()), cls, members[k]);
  }
  std::sort(keyed.begin(), keyed.end());

  const double total = ratios.train + ratios.val + ratios.test;
  const int n_val = std::max(1, int(std::lround(n * ratios.val / total)));
  const int n_test = std::max(1, int(std::lround(n * ratios.test / total)));
  require(n - n_val - n_test >= 1, ErrorKind::Config, "split ratios leave no training subjects");

  Split out;
  for (int i = 0; i < n; ++i) {
    const int subject = std::get<2>(keyed[std::size_t(i)]);
    if (i < n_val)
      out.val.push_back(subject);
    else if (i < n_val + n_test)
      out.test.push_back(subject);
    else
      out.train.push_back(subject);
  }
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

void write_metrics_csv(const std::vector<EpochRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << "epoch,split,loss,acc,auroc\n";
  for (const auto& r : rows)
    out << fmt::format("{},{},{:.6f},{},{}\n", r.epoch, r.split, r.loss, format_opt(r.acc), format_opt(r.auroc));
}

// ---- pretraining -----------------------------------------------------------

PretrainSession::PretrainSession(const model::ModelConfig& cfg, const ad::AdamWConfig& opt, double clip_norm,
                                 std::uint64_t seed)
    : model_(cfg, seed), opt_(model_.params(), opt), clip_norm_(clip_norm) {}

double PretrainSession::accumulate(const Volume4D& vol, const masking::MaskTensor& mask, double weight) {
  const auto& cfg = model_.config();
  ad::Tape<float> tape;
  const auto target = volume_tensor<float>(vol);
  auto x = tape.constant(target);
  auto recon = model_.forward_pretrain(tape, x, vol.dims, &mask);
  auto idx = ad::make_index(masked_voxel_index(mask, vol.dims, cfg.patch_size, cfg.t_patch));
  auto loss = masked_mse(recon, target, idx);
  const double value = loss.value().item();
  require(std::isfinite(value), ErrorKind::Training, fmt::format("non-finite reconstruction loss ({})", value));
  tape.backward(weight == 1.0 ? loss : ad::scale(loss, float(weight)));
  return value;
}

bool PretrainSession::apply() {
  bool clipped = false;
  if (clip_norm_ > 0) clipped = ad::clip_grad_norm(model_.params(), clip_norm_) > clip_norm_;
  opt_.step();
  model_.params().zero_grad();
  return clipped;
}

double PretrainSession::evaluate(const Volume4D& vol, const masking::MaskTensor& mask) {
  const auto& cfg = model_.config();
  ad::Tape<float> tape;
  auto recon = model_.forward_pretrain(tape, tape.constant(volume_tensor<float>(vol)), vol.dims, &mask);
  const auto idx = masked_voxel_index(mask, vol.dims, cfg.patch_size, cfg.t_patch);
  return masked_mse_value(recon.value().data.cast<double>(), vol.data.cast<double>(), idx);
}

double PretrainSession::step(const Volume4D& vol, const masking::MaskTensor& mask) {
  const double loss = accumulate(vol, mask);
  apply();
  return loss;
}

PretrainResult pretrain(const RunConfig& run, const Cohort& cohort, const atlas::PatchSets& sets,
                        const std::optional<std::filesystem::path>& out_stem) {
  run.validate();
  check_uniform_dims(cohort);
  const auto& mcfg = run.model;
  const Index4 dims = cohort.front().volume.dims;
  const model::Lattice lat = model::lattice_for(dims, mcfg.patch_size, mcfg.t_patch);
  require(sets.grid.patch_count() == lat.spatial(), ErrorKind::Validation,
          "patch sets describe " + std::to_string(sets.grid.patch_count()) + " patches, the volumes have " +
              std::to_string(lat.spatial()));

  const Split split = split_subjects(labels_of(cohort), run.split, run.seed);
  PretrainSession session(mcfg, optimizer_config(run), run.clip_norm, run.seed);

  const bool fresh_masks = run.mask_spec.ratio < 1.0;
  const auto fixed_mask = masking::build_mask(run.mask_spec, sets, lat.nt, mcfg.t_patch);
  auto mask_for = [&](std::uint64_t stream) {
    if (!fresh_masks) return fixed_mask;
    auto spec = run.mask_spec;
    spec.seed = derive_seed(run.mask_spec.seed ^ run.seed, stream);
    return masking::build_mask(spec, sets, lat.nt, mcfg.t_patch);
  };
  std::vector<masking::MaskTensor> val_masks;
  for (int v : split.val) val_masks.push_back(mask_for(0x7a11000000ull + std::uint64_t(v)));

  PretrainResult result;
  Snapshot best = snapshot(session.model().params());
  double best_val = std::numeric_limits<double>::infinity();
  auto validate_epoch = [&](int epoch) {
    double total = 0.0;
    for (std::size_t i = 0; i < split.val.size(); ++i)
      total += session.evaluate(cohort[std::size_t(split.val[i])].volume, val_masks[i]);
    const double loss = total / double(split.val.size());
    result.rows.push_back({epoch, "val", loss, std::nullopt, std::nullopt});
    if (loss < best_val) {
      best_val = loss;
      result.best_epoch = epoch;
      best = snapshot(session.model().params());
    }
  };

  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= run.epochs; ++epoch) {
    Rng order_rng(derive_seed(run.seed, 0xe90c0000ull + std::uint64_t(epoch)));
    auto order = split.train;
    shuffle(order, order_rng);
    double epoch_total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += std::size_t(run.batch_size)) {
      const std::size_t end = std::min(order.size(), b + std::size_t(run.batch_size));
      const double w = 1.0 / double(end - b);
      double batch_total = 0.0;
      for (std::size_t i = b; i < end; ++i) {
        const auto& sample = cohort[std::size_t(order[i])];
        const auto mask = mask_for(step * 1000003ull + i);
        double loss;
        try {
          loss = session.accumulate(sample.volume, mask, w);
        } catch (const Error& e) {
          fail(ErrorKind::Training,
               fmt::format("epoch {} step {} subject {}: {}", epoch, step, sample.id, e.what()));
        }
        batch_total += loss;
      }
      if (session.apply()) ++result.clip_events;
      result.step_losses.push_back(batch_total * w);
      epoch_total += batch_total;
      ++step;
    }
    result.rows.push_back({epoch, "train", epoch_total / double(order.size()), std::nullopt, std::nullopt});
    validate_epoch(epoch);
  }
  if (run.epochs == 0) validate_epoch(0);

  result.best_val_loss = best_val;
  restore(session.model().params(), best);
  if (out_stem) {
    ad::save_checkpoint(session.model().params(), checkpoint_info(mcfg), *out_stem);
    result.checkpoint = *out_stem;
  }
  return result;
}

// ---- fine-tuning -----------------------------------------------------------

namespace {

struct Evaluation {
  double loss = 0.0;
  std::vector<double> scores;
  std::vector<int> labels;
};

Evaluation evaluate_split(model::HybridModel<float>& m, const Cohort& cohort, const std::vector<int>& members) {
  Evaluation ev;
  for (int i : members) {
    const auto& s = cohort[std::size_t(i)];
    ad::Tape<float> tape;
    const double z = m.forward_classify(tape, tape.constant(volume_tensor<float>(s.volume)), s.volume.dims)
                         .value()
                         .item();
    ev.scores.push_back(z);
    ev.labels.push_back(s.label);
    ev.loss += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - s.label * z;
  }
  ev.loss /= double(std::max<std::size_t>(1, members.size()));
  return ev;
}

bool both_classes(const std::vector<int>& labels) {
  const bool pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  return pos && neg;
}

EpochRow row_of(int epoch, const std::string& split, const Evaluation& ev) {
  EpochRow r{epoch, split, ev.loss, std::nullopt, std::nullopt};
  if (!ev.scores.empty()) r.acc = metrics::accuracy(ev.scores, ev.labels);
  if (both_classes(ev.labels)) r.auroc = metrics::auroc(ev.scores, ev.labels);
  return r;
}

}  // namespace

FinetuneResult finetune(const RunConfig& run, const Cohort& cohort, const std::optional<std::filesystem::path>& init,
                        const std::optional<std::filesystem::path>& out_stem) {
  run.validate();
  check_uniform_dims(cohort);
  for (const auto& s : cohort)
    require(s.label == 0 || s.label == 1, ErrorKind::Validation,
            "subject " + s.id + " lacks a binary label (got " + std::to_string(s.label) + ")");

  const Split split = split_subjects(labels_of(cohort), run.split, run.seed);
  std::vector<int> train_labels;
  for (int i : split.train) train_labels.push_back(cohort[std::size_t(i)].label);
  require(both_classes(train_labels), ErrorKind::Config, "training split contains a single class");

  model::HybridModel<float> m(run.model, run.seed);
  if (init) {
    // The classifier is task-specific; it keeps this seed's initialization.
    const Snapshot fresh = snapshot(m.params());
    ad::load_checkpoint(m.params(), *init, run.model.hash(), {.allow_missing = true, .prefix = {}});
    std::size_t i = 0;
    for (auto& p : m.params()) {
      if (p->name.rfind("cls.", 0) == 0) p->value.data = fresh[i];
      ++i;
    }
  }
  m.freeze_encoder(run.freeze_encoder);
  ad::AdamW<float> opt(m.params(), optimizer_config(run));

  FinetuneResult result;
  Snapshot best = snapshot(m.params());
  double best_key = -std::numeric_limits<double>::infinity(), best_loss = std::numeric_limits<double>::infinity();

  auto select = [&](int epoch) {
    const auto val = evaluate_split(m, cohort, split.val);
    const auto row = row_of(epoch, "val", val);
    result.rows.push_back(row);
    // Validation AUROC decides; its loss breaks ties and stands in when the
    // validation split is single-class.
    const double key = row.auroc.value_or(-val.loss);
    if (key > best_key || (key == best_key && val.loss < best_loss)) {
      best_key = key;
      best_loss = val.loss;
      result.best_epoch = epoch;
      result.best_val_auroc = row.auroc;
      best = snapshot(m.params());
    }
  };

  select(0);
  for (int epoch = 1; epoch <= run.epochs; ++epoch) {
    Rng order_rng(derive_seed(run.seed, 0xf17e0000ull + std::uint64_t(epoch)));
    auto order = split.train;
    shuffle(order, order_rng);
    Evaluation train;
    for (std::size_t b = 0; b < order.size(); b += std::size_t(run.batch_size)) {
      const std::size_t end = std::min(order.size(), b + std::size_t(run.batch_size));
      for (std::size_t i = b; i < end; ++i) {
        const auto& s = cohort[std::size_t(order[i])];
        ad::Tape<float> tape;
        auto logit = m.forward_classify(tape, tape.constant(volume_tensor<float>(s.volume)), s.volume.dims);
        Eigen::ArrayXf target(1);
        target[0] = float(s.label);
        auto loss = ad::bce_with_logits(logit, target);
        const double value = loss.value().item();
        require(std::isfinite(value), ErrorKind::Training,
                fmt::format("non-finite classification loss at epoch {} subject {}", epoch, s.id));
        tape.backward(ad::scale(loss, 1.0f / float(end - b)));
        train.loss += value;
        train.scores.push_back(logit.value().item());
        train.labels.push_back(s.label);
      }
      if (run.clip_norm > 0) ad::clip_grad_norm(m.params(), run.clip_norm);
      opt.step();
      m.params().zero_grad();
    }
    train.loss /= double(order.size());
    result.rows.push_back(row_of(epoch, "train", train));
    select(epoch);
  }

  restore(m.params(), best);
  const auto test = evaluate_split(m, cohort, split.test);
  const auto test_row = row_of(result.best_epoch, "test", test);
  result.rows.push_back(test_row);
  result.test_acc = test_row.acc.value_or(0.0);
  result.test_auroc = test_row.auroc;
  result.test_scores = test.scores;
  result.test_labels = test.labels;
  for (int i : split.test) result.test_ids.push_back(cohort[std::size_t(i)].id);
  if (out_stem) {
    ad::save_checkpoint(m.params(), checkpoint_info(run.model), *out_stem);
    result.checkpoint = *out_stem;
  }
  return result;
}

}  // namespace regmae::training
