// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
// Optional arguments restrict the run to the given criterion numbers.

#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "regmae/atlas_grid.hpp"
#include "regmae/attribution.hpp"
#include "regmae/cli.hpp"
#include "regmae/metrics_stats.hpp"
#include "regmae/preprocess.hpp"
#include "regmae/synth.hpp"
#include "regmae/training.hpp"
#include "../common/gradcheck.hpp"

using namespace regmae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

constexpr model::Configuration kConfigs[] = {model::Configuration::Mamba, model::Configuration::Alternate,
                                             model::Configuration::AM, model::Configuration::MA};

template <class V>
std::set<int> as_set(const V& v) {
  return {v.begin(), v.end()};
}

bool subset(const std::vector<int>& a, const std::vector<int>& b) {
  const auto sb = as_set(b);
  return std::all_of(a.begin(), a.end(), [&](int x) { return sb.count(x) > 0; });
}

// ---- 1 ----------------------------------------------------------------------

Outcome inclusion() {
  Rng rng(101);
  int violations = 0, checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n_labels = 2 + int(uniform_index(rng, 14));
    const auto atlas = oracle::random_atlas(rng, 48, n_labels, 0.3 * uniform01(rng));
    const auto sets = atlas::classify_patches(atlas, atlas::RegionMap(oracle::random_mapping(rng, n_labels)));
    std::vector<int> owner(std::size_t(sets.grid.patch_count()), -1);
    for (std::size_t r = 0; r < sets.regions.size(); ++r) {
      const auto& rs = sets.regions[r];
      violations += !subset(rs.pure, rs.majority);
      violations += !subset(rs.majority, rs.any);
      for (int p : rs.majority) {
        violations += owner[std::size_t(p)] >= 0;
        owner[std::size_t(p)] = int(r);
      }
      ++checked;
    }
  }
  return {violations == 0, fmt::format("{} region sets on 50 atlases, {} violations", checked, violations)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome oracle_equivalence() {
  Rng rng(102);
  int mismatches = 0;
  std::int64_t compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n_labels = 1 + int(uniform_index(rng, 8));
    const auto atlas = oracle::random_atlas(rng, 96, n_labels, 0.4 * uniform01(rng));
    const auto mapping = oracle::random_mapping(rng, n_labels);
    const auto sets = atlas::classify_patches(atlas, atlas::RegionMap(mapping));
    const auto ref = oracle::classify(atlas, mapping);
    mismatches += sets.regions.size() != ref.size();
    for (const auto& r : sets.regions) {
      const auto it = ref.find(r.region);
      if (it == ref.end()) {
        ++mismatches;
        continue;
      }
      mismatches += as_set(r.any) != it->second.any;
      mismatches += as_set(r.majority) != it->second.majority;
      mismatches += as_set(r.pure) != it->second.pure;
      compared += std::int64_t(r.any.size() + r.majority.size() + r.pure.size());
    }
  }
  return {mismatches == 0, fmt::format("20 atlases at 96^3, {} patch memberships compared, {} mismatching sets",
                                       compared, mismatches)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome table_arithmetic() {
  // (patches, voxels) for Any / Majority / Pure per macroregion.
  const std::vector<std::pair<std::int64_t, std::int64_t>> published{
      {524, 113184}, {242, 52272}, {140, 30240},  // frontal
      {319, 68904},  {135, 29160}, {93, 20088},   // parietal
      {233, 50328},  {96, 20736},  {47, 10152},   // occipital
      {334, 72144},  {133, 28728}, {82, 17712},   // temporal
      {259, 55944},  {56, 12096},  {23, 4968},    // limbic
      {104, 22464},  {26, 5616},   {12, 2592},    // subcortical
      {233, 50328},  {115, 24840}, {54, 11664}};  // cerebellum
  int bad = 0;
  for (auto [p, v] : published) bad += p * 216 != v;

  Rng rng(103);
  int report_bad = 0, rows = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto atlas = oracle::random_atlas(rng, 48, 8, 0.2);
    const auto sets = atlas::classify_patches(atlas, atlas::RegionMap(oracle::random_mapping(rng, 8)));
    for (const auto& row : atlas::patch_set_report(sets)) {
      const auto& rs = sets.region(row.region);
      const auto& members = row.criterion == atlas::Criterion::Any        ? rs.any
                            : row.criterion == atlas::Criterion::Majority ? rs.majority
                                                                          : rs.pure;
      report_bad += row.voxels != row.patches * 216 || row.patches != std::int64_t(members.size());
      ++rows;
    }
  }
  return {bad == 0 && report_bad == 0,
          fmt::format("{}/21 published pairs and {}/{} generated rows satisfy voxels = 216 x patches",
                      21 - bad, rows - report_bad, rows)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome qc_sweep() {
  Rng rng(104);
  const double dt = preprocess::kDiceThreshold, pt = preprocess::kP99Threshold;
  std::vector<std::pair<double, double>> cases{{dt, 1.0}, {0.9, pt}, {dt, pt}, {std::nextafter(dt, 1.0), pt},
                                               {0.9, std::nextafter(pt, 3.0)}};
  while (cases.size() < 1000) {
    const double u = uniform01(rng), v = uniform01(rng);
    const double d = u < 0.15 ? dt : (u < 0.2 ? std::nextafter(dt, u < 0.175 ? 0.0 : 1.0) : 0.8 + 0.1 * uniform01(rng));
    const double p = v < 0.15 ? pt : (v < 0.2 ? std::nextafter(pt, v < 0.175 ? 0.0 : 3.0) : 1.7 + 0.4 * uniform01(rng));
    cases.emplace_back(d, p);
  }
  int disagreements = 0, excluded = 0;
  for (auto [d, p] : cases) {
    const bool dice_fail = d <= dt, p99_fail = p > pt;
    const auto r = preprocess::qc_gate(d, p);
    const bool has_dice = std::find(r.reasons.begin(), r.reasons.end(), preprocess::QcReason::DiceFail) != r.reasons.end();
    const bool has_p99 = std::find(r.reasons.begin(), r.reasons.end(), preprocess::QcReason::P99Fail) != r.reasons.end();
    disagreements += r.excluded != (dice_fail || p99_fail) || has_dice != dice_fail || has_p99 != p99_fail;
    excluded += r.excluded;
  }
  const bool anchors = preprocess::qc_gate(dt, 1.0).excluded && !preprocess::qc_gate(0.9, pt).excluded;
  return {disagreements == 0 && anchors,
          fmt::format("{} cases ({} excluded), {} disagreements; dice = 0.85 excluded, p99 = 1.8862 kept: {}",
                      cases.size(), excluded, disagreements, anchors ? "yes" : "no")};
}

// ---- 5 ----------------------------------------------------------------------

Outcome zscore_contract() {
  Rng rng(105);
  const Index4 d{30, 30, 30, 6};
  Volume4D vol(d, Affine::Identity(), 0.8);
  Mask3D mask = Mask3D::Constant(30 * 30 * 30, false);
  for (int z = 0; z < 30; ++z)
    for (int y = 0; y < 30; ++y)
      for (int x = 0; x < 30; ++x) {
        const double r2 = (x - 14.5) * (x - 14.5) / 144 + (y - 14.5) * (y - 14.5) / 121 + (z - 14.5) * (z - 14.5) / 100;
        mask[linear_index(Index3{30, 30, 30}, x, y, z)] = r2 <= 1.0;
      }
  const std::int64_t F = vol.frame_size();
  auto fill = [&](bool heavy) {
    for (int t = 0; t < d[3]; ++t)
      for (std::int64_t i = 0; i < F; ++i) {
        const double base = heavy ? std::tan(3.1 * (uniform01(rng) - 0.5)) : uniform01(rng);
        vol.data[i + F * t] = float(mask[i] ? 800.0 + 120.0 * base : 40.0 * uniform01(rng));
      }
  };

  fill(false);
  auto [out, stats] = preprocess::zscore_clip(vol, mask, -5.0, 5.0);
  double sum = 0, sq = 0, n = 0, max_abs = 0, outside = 0;
  for (int t = 0; t < d[3]; ++t)
    for (std::int64_t i = 0; i < F; ++i) {
      const double v = out.data[i + F * t];
      if (mask[i]) {
        sum += v;
        sq += v * v;
        ++n;
        max_abs = std::max(max_abs, std::abs(v));
      } else {
        outside = std::max(outside, std::abs(v));
      }
    }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);

  fill(true);
  auto [clipped, cstats] = preprocess::zscore_clip(vol, mask, -5.0, 5.0);
  double cmax = 0, coutside = 0;
  int at_bound = 0;
  for (int t = 0; t < d[3]; ++t)
    for (std::int64_t i = 0; i < F; ++i) {
      const double v = clipped.data[i + F * t];
      if (mask[i]) {
        cmax = std::max(cmax, std::abs(v));
        at_bound += std::abs(v) == 5.0;
      } else {
        coutside = std::max(coutside, std::abs(v));
      }
    }
  const bool ok = max_abs < 5.0 && std::abs(mean) <= 1e-6 && std::abs(sd - 1.0) <= 1e-6 && outside == 0.0 &&
                  cmax <= 5.0 && at_bound > 0 && coutside == 0.0;
  return {ok, fmt::format("unclipped |mean| {:.2e}, |std-1| {:.2e}; heavy-tailed max |z| {} ({} at bound); "
                          "max |out-of-mask| {}",
                          std::abs(mean), std::abs(sd - 1.0), cmax, at_bound, std::max(outside, coutside))};
}

// ---- 6 ----------------------------------------------------------------------

Outcome gradient_fidelity() {
  using T = ad::Tensor<double>;
  using testing::gradient_error;
  Rng rng(106);
  auto rnd = [&](ad::Shape s, double sc = 1.0) { return testing::random_tensor(rng, std::move(s), sc); };
  std::vector<std::pair<std::string, double>> errs;
  auto check = [&](std::string name, std::vector<T> in, const testing::GradBuild& f) {
    errs.emplace_back(std::move(name), gradient_error(std::move(in), f));
  };

  const auto a = rnd({3, 4}), b = rnd({3, 4}), row = rnd({4});
  check("add", {a, b}, [](auto&, auto& v) { return ad::add(v[0], v[1]); });
  check("add/broadcast", {a, row}, [](auto&, auto& v) { return ad::add(v[0], v[1]); });
  check("sub", {a, row}, [](auto&, auto& v) { return ad::sub(v[0], v[1]); });
  check("mul", {a, b}, [](auto&, auto& v) { return ad::mul(v[0], v[1]); });
  check("mul/broadcast", {a, row}, [](auto&, auto& v) { return ad::mul(v[0], v[1]); });
  check("scale", {a}, [](auto&, auto& v) { return ad::scale(v[0], -2.5); });
  check("neg", {a}, [](auto&, auto& v) { return ad::neg(v[0]); });
  check("exp", {a}, [](auto&, auto& v) { return ad::exp(v[0]); });
  check("sigmoid", {a}, [](auto&, auto& v) { return ad::sigmoid(v[0]); });
  check("silu", {a}, [](auto&, auto& v) { return ad::silu(v[0]); });
  check("softplus", {a}, [](auto&, auto& v) { return ad::softplus(v[0]); });
  check("gelu", {a}, [](auto&, auto& v) { return ad::gelu(v[0]); });

  const auto x = rnd({5, 3}), w = rnd({3, 4}), bias = rnd({4});
  check("matmul", {x, w}, [](auto&, auto& v) { return ad::matmul(v[0], v[1]); });
  check("linear", {x, w, bias}, [](auto&, auto& v) { return ad::linear(v[0], v[1], std::optional(v[2])); });
  check("linear/batched", {rnd({2, 5, 3}), w}, [](auto&, auto& v) { return ad::linear(v[0], v[1]); });
  check("transpose", {x}, [](auto&, auto& v) { return ad::transpose(v[0]); });
  check("reshape", {x}, [](auto&, auto& v) { return ad::reshape(v[0], {3, 5}); });
  check("sum", {x}, [](auto&, auto& v) { return ad::sum(v[0]); });
  check("mean", {x}, [](auto&, auto& v) { return ad::mean(v[0]); });
  check("sum_sq", {x}, [](auto&, auto& v) { return ad::sum_sq(v[0]); });
  check("mean_rows", {x}, [](auto&, auto& v) { return ad::mean_rows(v[0]); });

  const auto s = rnd({4, 6}, 2.0);
  check("softmax", {s}, [](auto&, auto& v) { return ad::softmax(v[0]); });
  check("softmax/axis0", {s}, [](auto&, auto& v) { return ad::softmax(v[0], 0); });
  check("softmax/3d", {rnd({2, 3, 4})}, [](auto&, auto& v) { return ad::softmax(v[0], 1); });
  check("layernorm", {s}, [](auto&, auto& v) { return ad::layernorm(v[0]); });
  check("layernorm/affine", {s, rnd({6}), rnd({6})},
        [](auto&, auto& v) { return ad::layernorm(v[0], std::optional(v[1]), std::optional(v[2])); });

  const auto rows = ad::make_index({4, 0, 0, 2});
  check("gather_rows", {x}, [&](auto&, auto& v) { return ad::gather_rows(v[0], rows); });
  const auto dest = ad::make_index({6, 1, 3, 0});
  check("scatter_rows", {rnd({4, 3})}, [&](auto&, auto& v) { return ad::scatter_rows(v[0], dest, 7); });
  const auto flat = ad::make_index({14, 2, 2, 7, 0, 9});
  check("gather", {x}, [&](auto&, auto& v) { return ad::gather(v[0], flat, {2, 3}); });
  auto holes = std::make_shared<const std::vector<bool>>(std::vector<bool>{false, true, false, true, true});
  check("replace_rows", {x, rnd({3})}, [&](auto&, auto& v) { return ad::replace_rows(v[0], v[1], holes); });

  const auto q = rnd({8, 4}), k = rnd({8, 4}), val = rnd({8, 4});
  check("window_attention", {q, k, val}, [](auto&, auto& v) { return ad::window_attention(v[0], v[1], v[2], 4, 2); });
  auto groups = std::make_shared<const std::vector<int>>(std::vector<int>{0, 0, 1, 1, 2, 3, 3, 2});
  check("window_attention/shift groups", {q, k, val},
        [&](auto&, auto& v) { return ad::window_attention(v[0], v[1], v[2], 4, 1, groups); });

  auto dt = rnd({5, 3});
  dt.data = dt.data.abs() * 0.5 + 0.05;
  auto A = rnd({3, 2});
  A.data = -(A.data.abs() + 0.2);
  A.data[0] = -1e-6;
  check("selective_scan", {rnd({5, 3}), dt, A, rnd({5, 2}), rnd({5, 2}), rnd({3})},
        [](auto&, auto& v) { return ad::selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]); });

  ad::Vec<double> targets(6);
  targets << 1, 0, 0, 1, 1, 0;
  check("bce_with_logits", {rnd({6}, 3.0)}, [&](auto&, auto& v) { return ad::bce_with_logits(v[0], targets); });
  const auto tgt = rnd({12});
  const auto masked = ad::make_index({0, 3, 4, 9, 11});
  check("masked_mse", {rnd({12})}, [&](auto&, auto& v) { return training::masked_mse(v[0], tgt, masked); });

  double worst_op = 0;
  std::string worst_name;
  for (const auto& [name, e] : errs)
    if (e > worst_op || worst_name.empty()) {
      worst_op = e;
      worst_name = name;
    }
  double worst_model = 0;
  std::string per_config;
  for (auto c : kConfigs) {
    const double e = testing::model_gradient_error(c);
    worst_model = std::max(worst_model, e);
    per_config += fmt::format(" {}={:.1e}", model::to_string(c), e);
  }
  return {worst_op <= 1e-6 && worst_model <= 1e-4,
          fmt::format("{} ops, worst {:.2e} ({}); end-to-end{}", errs.size(), worst_op, worst_name, per_config)};
}

// ---- 7 ----------------------------------------------------------------------

Outcome scan_correctness() {
  using T = ad::Tensor<double>;
  Rng rng(107);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t L = 1 + std::int64_t(uniform_index(rng, 16)), Di = 1 + std::int64_t(uniform_index(rng, 6)),
                       N = 1 + std::int64_t(uniform_index(rng, 6));
    auto u = testing::random_tensor(rng, {L, Di}), dt = testing::random_tensor(rng, {L, Di}),
         A = testing::random_tensor(rng, {Di, N});
    dt.data = dt.data.abs() + 0.01;
    A.data = -(A.data.abs() + 0.05);
    const auto B = testing::random_tensor(rng, {L, N}), C = testing::random_tensor(rng, {L, N}),
               D = testing::random_tensor(rng, {Di});
    ad::Tape<double> tape;
    const auto y = ad::selective_scan(tape.constant(u), tape.constant(dt), tape.constant(A), tape.constant(B),
                                      tape.constant(C), tape.constant(D));
    const Eigen::MatrixXd ref =
        oracle::scan_reference(u.matrix(), dt.matrix(), A.matrix(), B.matrix(), C.matrix(), D.data.matrix());
    worst = std::max(worst, (y.value().matrix() - ref).cwiseAbs().maxCoeff());
  }

  // Decay exactly 1 with dt = 1, B = C = 1: a running sum.
  const std::int64_t L = 32;
  const Eigen::ArrayXd u = testing::random_array(rng, L);
  ad::Tape<double> tape;
  const auto y = ad::selective_scan(tape.constant(T({L, 1}, u)), tape.constant(T::constant({L, 1}, 1.0)),
                                    tape.constant(T::constant({1, 1}, 0.0)), tape.constant(T::constant({L, 1}, 1.0)),
                                    tape.constant(T::constant({L, 1}, 1.0)), tape.constant(T::constant({1}, 0.0)));
  double acc = 0, cum_err = 0;
  for (Eigen::Index t = 0; t < L; ++t) cum_err = std::max(cum_err, std::abs(y.value().data[t] - (acc += u[t])));
  return {worst <= 1e-6 && cum_err <= 1e-6,
          fmt::format("100 random scans, max |diff| {:.2e}; cumulative-sum case max |diff| {:.2e}", worst, cum_err)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome shape_symmetry() {
  Rng rng(108);
  int mismatches = 0, runs = 0;
  double worst_ratio = 0;
  for (const auto& depths : {std::vector<int>{1, 1}, std::vector<int>{2, 2}}) {
    std::vector<double> counts;
    for (auto c : kConfigs) {
      auto cfg = model::ModelConfig::desk();
      cfg.stage_depths = depths;
      cfg.configuration = c;
      model::HybridModel<float> m(cfg, 1);
      counts.push_back(double(m.params().total_size()));
      for (const Index4 d : {Index4{48, 48, 48, 8}, Index4{96, 96, 96, 8}}) {
        const std::int64_t n = std::int64_t(d[0]) * d[1] * d[2] * d[3];
        ad::Tensor<float> x({n});
        for (auto& v : x.data) v = float(standard_normal(rng));
        ad::Tape<float> tape;
        const auto y = m.forward_pretrain(tape, tape.constant(x), d, nullptr);
        mismatches += y.shape() != x.shape;
        ++runs;
      }
    }
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    worst_ratio = std::max(worst_ratio, *hi / *lo);
  }
  return {mismatches == 0 && worst_ratio <= 1.10,
          fmt::format("{} forward passes, {} shape mismatches; max/min parameter count {:.3f}", runs, mismatches,
                      worst_ratio)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome masked_loss_locality() {
  Rng rng(109);
  const Index4 d{24, 24, 24, 8};
  const std::int64_t n = std::int64_t(d[0]) * d[1] * d[2] * d[3];
  int changed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    masking::MaskTensor mask(64, 2, 216, 4);
    for (auto& bit : mask.bits) bit = uniform01(rng) < 0.3;
    if (mask.masked_slots() == 0) mask.bits[std::size_t(uniform_index(rng, mask.bits.size()))] = 1;
    const auto idx = training::masked_voxel_index(mask, d, 6, 4);
    std::vector<bool> inside(std::size_t(n), false);
    for (auto i : idx) inside[std::size_t(i)] = true;
    const Eigen::ArrayXd target = testing::random_array(rng, n);
    Eigen::ArrayXd recon = testing::random_array(rng, n);
    const double before = training::masked_mse_value(recon, target, idx);
    for (std::int64_t i = 0; i < n; ++i)
      if (!inside[std::size_t(i)]) recon[i] += 1e3 * standard_normal(rng);
    changed += training::masked_mse_value(recon, target, idx) != before;
  }
  return {changed == 0, fmt::format("100 trials, {} changed the loss", changed)};
}

// ---- 10 ---------------------------------------------------------------------

Outcome overfit() {
  synth::SynthOptions o;
  o.shape = 48;
  o.frames = 8;
  o.seed = 7;
  const auto at = synth::make_atlas(48, 2, 7);
  preprocess::PipelineOptions po;
  po.fov = {48, 48, 48};
  const auto subject = preprocess::preprocess_subject(synth::make_subject(at, o, 0, 1), at.brain, po).normalized;
  const auto sets = atlas::classify_patches(at.atlas, at.regions);
  masking::MaskSpec spec;
  spec.region = "limbic";
  bool ok = true;
  std::string detail;
  for (auto c : kConfigs) {
    auto cfg = model::ModelConfig::desk();
    cfg.configuration = c;
    const auto mask = masking::build_mask(spec, sets, 8 / cfg.t_patch, cfg.t_patch);
    training::PretrainSession session(cfg, {.lr = 3e-3}, 1.0, 1);
    const double first = session.evaluate(subject, mask);
    for (int step = 0; step < 200; ++step) session.step(subject, mask);
    const double ratio = session.evaluate(subject, mask) / first;
    ok = ok && ratio < 0.10;
    detail += fmt::format(" {}={:.3f}", model::to_string(c), ratio);
  }
  return {ok, "final/initial masked MSE after 200 steps:" + detail};
}

// ---- 11 ---------------------------------------------------------------------

Outcome ig_completeness() {
  Rng rng(111);
  double worst = 0;
  int models = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int in = 16, hidden = 12;
    Eigen::MatrixXd W(hidden, in);
    Eigen::VectorXd b(hidden), v(hidden);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = standard_normal(rng) / std::sqrt(double(in));
    for (Eigen::Index i = 0; i < hidden; ++i) {
      b[i] = standard_normal(rng);
      v[i] = standard_normal(rng);
    }
    const attribution::GradFn f = [&](const Eigen::ArrayXd& z, Eigen::ArrayXd& grad) {
      const Eigen::VectorXd h = (W * z.matrix() + b).array().tanh().matrix();
      grad = (W.transpose() * (v.array() * (1.0 - h.array().square())).matrix()).array();
      return v.dot(h);
    };
    const Eigen::ArrayXd x = testing::random_array(rng, in, 2.0), x0 = Eigen::ArrayXd::Zero(in);
    Eigen::ArrayXd g;
    const double gap = f(x, g) - f(x0, g);
    if (std::abs(gap) < 1e-2) continue;
    const double err = std::abs(attribution::integrated_gradients(f, x, x0, 256).sum() - gap) / std::abs(gap);
    worst = std::max(worst, err);
    ++models;
  }

  const Eigen::ArrayXd w = testing::random_array(rng, 64), x = testing::random_array(rng, 64);
  const attribution::GradFn lin = [&](const Eigen::ArrayXd& z, Eigen::ArrayXd& grad) {
    grad = w;
    return (w * z).sum();
  };
  bool exact = true;
  for (int steps : {1, 256})
    exact = exact && (attribution::integrated_gradients(lin, x, Eigen::ArrayXd::Zero(64), steps) == w * x).all();
  return {worst <= 1e-2 && exact && models > 0,
          fmt::format("{} two-layer tanh models, worst completeness gap {:.2e} at 256 steps; linear IG == w*x: {}",
                      models, worst, exact ? "bitwise" : "no")};
}

// ---- 12 ---------------------------------------------------------------------

Outcome metrics_oracles() {
  Rng rng(112);
  int auroc_bad = 0;
  for (int n = 2; n <= 200; ++n) {
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[std::size_t(i)] = n % 2 ? double(uniform_index(rng, 6)) : standard_normal(rng);
      y[std::size_t(i)] = int(uniform_index(rng, 2));
    }
    y[0] = 0;
    y[1] = 1;
    auroc_bad += metrics::auroc(s, y) != oracle::auroc_pairs(s, y);
  }

  double wil_worst = 0;
  int wil_cases = 0;
  for (int n = 1; n <= 12; ++n)
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        a[std::size_t(i)] = double(uniform_index(rng, 9)) / 8.0;
        b[std::size_t(i)] = double(uniform_index(rng, 9)) / 8.0;
      }
      if (a == b) continue;
      const auto r = metrics::wilcoxon_signed_rank(a, b);
      if (!r.exact) wil_worst = 1.0;
      wil_worst = std::max(wil_worst, std::abs(r.p - oracle::wilcoxon_enumerated_p(a, b)));
      ++wil_cases;
    }

  // Hand-ranked fixture: rank sums (9, 11, 4), statistic 6.5; a fully ordered
  // 10 x 3 table reaches n (k - 1) = 20.
  metrics::PairedResults fx;
  fx.conditions = {"a", "b", "c"};
  fx.rows = {"r0", "r1", "r2", "r3"};
  fx.values.resize(4, 3);
  fx.values << 0.70, 0.80, 0.60, 0.65, 0.75, 0.60, 0.72, 0.74, 0.50, 0.71, 0.69, 0.55;
  const double f1 = metrics::friedman_test(fx).statistic;
  metrics::PairedResults ord = fx;
  ord.values.resize(10, 3);
  ord.rows.resize(10, "r");
  for (int i = 0; i < 10; ++i) ord.values.row(i) << 0.1 * i, 0.1 * i + 0.01, 0.1 * i + 0.02;
  const double f2 = metrics::friedman_test(ord).statistic;
  const bool friedman_ok = std::abs(f1 - 6.5) <= 1e-12 && std::abs(f2 - 20.0) <= 1e-12;

  int bonf_bad = 0;
  std::vector<double> ps;
  for (int i = 0; i < 200; ++i) ps.push_back(uniform01(rng) * (i % 3 ? 0.1 : 1.0));
  const auto corrected = metrics::bonferroni(ps, 400);
  for (std::size_t i = 0; i < ps.size(); ++i) bonf_bad += corrected[i] != std::min(1.0, ps[i] * 400);

  return {auroc_bad == 0 && wil_worst <= 1e-12 && friedman_ok && bonf_bad == 0,
          fmt::format("auroc n=2..200 {} mismatches; wilcoxon {} exact cases, max |dp| {:.1e}; friedman {} / {}; "
                      "bonferroni {} mismatches",
                      auroc_bad, wil_cases, wil_worst, f1, f2, bonf_bad)};
}

// ---- 13 ---------------------------------------------------------------------

bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {});
}

bool cli_ok(const fs::path& root, std::vector<std::string> args) {
  args.insert(args.begin(), {"--seed", "13", "--out-dir"});
  args[3] = (root / args[3]).string();
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code == 0;
}

bool pipeline(const fs::path& root) {
  fs::remove_all(root);
  const auto m = "data.manifest=" + (root / "pp/preprocessed/manifest.csv").string();
  const auto sets = "data.patch_sets=" + (root / "cls/patch_sets.json").string();
  const auto data = "data.root=" + (root / "data").string();
  return cli_ok(root, {"data", "synth", "--subjects", "14", "--shape", "48", "--frames", "4"}) &&
         cli_ok(root, {"pp", "--set", data, "preprocess"}) &&
         cli_ok(root, {"cls", "--set", data, "classify-patches"}) &&
         cli_ok(root, {"mask", "--set", sets, "--set", "mask.region=limbic", "build-mask", "--frames", "4"}) &&
         cli_ok(root, {"pt", "--set", m, "--set", sets, "--set", "mask.region=limbic", "--set", "pretrain.epochs=2",
                       "pretrain"}) &&
         cli_ok(root, {"ft", "--set", m, "--set",
                       "data.checkpoint=" + (root / "pt/checkpoints/pretrain_best").string(), "--set",
                       "finetune.epochs=2", "--set", "finetune.n_seeds=2", "finetune"});
}

Outcome determinism() {
  const fs::path base = fs::temp_directory_path() / fmt::format("regmae_accept_{}", ::getpid());
  const bool ran = pipeline(base / "a") && pipeline(base / "b");
  const std::vector<std::string> artifacts{"mask/mask.bits",          "pt/pretrain_mask.bits",
                                           "pt/pretrain_metrics.csv",  "ft/finetune_metrics_seed13.csv",
                                           "ft/finetune_metrics_seed14.csv", "pp/qc.csv"};
  int differing = 0;
  for (const auto& f : artifacts) differing += !same_bytes(base / "a" / f, base / "b" / f);
  std::error_code ec;
  fs::remove_all(base, ec);
  return {ran && differing == 0,
          ran ? fmt::format("two seeded pipeline runs, {}/{} artifacts byte-identical", artifacts.size() - differing,
                            artifacts.size())
              : std::string("pipeline run failed")};
}

// ---- 14 ---------------------------------------------------------------------

Outcome learnability() {
  synth::SynthOptions o;
  o.shape = 48;
  o.frames = 8;
  o.seed = 11;
  o.subjects = 60;
  const auto at = synth::make_atlas(48, 2, o.seed);
  preprocess::PipelineOptions po;
  po.fov = {48, 48, 48};
  training::Cohort cohort;
  for (int i = 0; i < o.subjects; ++i) {
    auto pr = preprocess::preprocess_subject(synth::make_subject(at, o, i, i % 2), at.brain, po);
    cohort.push_back({fmt::format("sub-{:03d}", i), std::move(pr.normalized), i % 2});
  }
  const auto sets = atlas::classify_patches(at.atlas, at.regions);
  const fs::path ck = fs::temp_directory_path() / fmt::format("regmae_accept_ck_{}", ::getpid());

  training::RunConfig pre;
  pre.model.configuration = model::Configuration::MA;
  pre.mask_spec.region = "limbic";
  pre.mask_spec.ratio = 0.5;
  pre.epochs = 3;
  pre.lr = 1e-3;
  pre.seed = 1;
  training::pretrain(pre, cohort, sets, ck);

  int good = 0;
  std::string aurocs;
  for (int s = 0; s < 5; ++s) {
    training::RunConfig ft;
    ft.phase = training::Phase::Finetune;
    ft.model = pre.model;
    ft.epochs = 15;
    ft.lr = 3e-4;
    ft.seed = 100 + std::uint64_t(s);
    const auto r = training::finetune(ft, cohort, ck);
    good += r.test_auroc.value_or(0.0) >= 0.8;
    aurocs += r.test_auroc ? fmt::format(" {:.3f}", *r.test_auroc) : std::string(" n/a");
  }
  std::error_code ec;
  fs::remove(ck.string() + ".bin", ec);
  fs::remove(ck.string() + ".json", ec);
  return {good >= 4, fmt::format("MA, 60 subjects: {}/5 seeds reach test AUROC >= 0.8 (AUROC{})", good, aurocs)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double budget_s;  // 0: no runtime bound
  };
  const std::vector<Criterion> criteria{
      {1, "patch-set inclusion", inclusion, 10},
      {2, "oracle equivalence", oracle_equivalence, 30},
      {3, "patch footprint arithmetic", table_arithmetic, 0},
      {4, "QC gates", qc_sweep, 0},
      {5, "z-score contract", zscore_contract, 0},
      {6, "gradient fidelity", gradient_fidelity, 120},
      {7, "SSM correctness", scan_correctness, 0},
      {8, "shape symmetry", shape_symmetry, 0},
      {9, "masked-loss locality", masked_loss_locality, 0},
      {10, "overfit smoke test", overfit, 300},
      {11, "IG completeness", ig_completeness, 0},
      {12, "metrics oracles", metrics_oracles, 0},
      {13, "determinism", determinism, 0},
      {14, "end-to-end learnability", learnability, 900},
  };
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt::format("; over the {:.0f} s budget", c.budget_s);
    }
    failed += !o.pass;
    std::cout << fmt::format("{} [{:2d}] {}: {} ({:.1f} s)", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail, secs)
              << std::endl;
  }
  std::cout << fmt::format("{}/{} criteria passed", ran - failed, ran) << std::endl;
  return failed == 0 ? 0 : 1;
}
