#include "regmae/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "regmae/atlas_grid.hpp"
#include "regmae/attribution.hpp"
#include "regmae/autodiff/checkpoint.hpp"
#include "regmae/masking.hpp"
#include "regmae/metrics_stats.hpp"
#include "regmae/nifti_io.hpp"
#include "regmae/preprocess.hpp"
#include "regmae/run_config.hpp"
#include "regmae/synth.hpp"
#include "regmae/training.hpp"

namespace regmae::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Shared state of one invocation: resolved config, output directory and the
/// inputs read so far (hashed into the run manifest).
struct Context {
  json cfg;
  fs::path out_dir;
  std::string command;
  std::map<std::string, std::string> inputs;
  std::ostream* out = nullptr;

  fs::path input(const std::string& key) {
    const auto p = config::data_path(cfg, key);
    require(!p.empty(), ErrorKind::Config, "data." + key + " is not set");
    require(fs::exists(p), ErrorKind::Config, "data." + key + " points to a missing file: " + p.string());
    record(p);
    return p;
  }
  void record(const fs::path& p) {
    if (fs::is_regular_file(p)) inputs[p.string()] = ad::file_hash(p);
  }
  std::uint64_t seed() const { return cfg.at("seed").get<std::uint64_t>(); }

  void write_run_records() const {
    fs::create_directories(out_dir);
    std::ofstream c(out_dir / "resolved_config.json");
    c << cfg.dump(2) << '\n';
    json m{{"command", command}, {"inputs", inputs}};
    std::ofstream mf(out_dir / "input_manifest.json");
    mf << m.dump(2) << '\n';
  }
};

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

model::ModelConfig model_config(const Context& ctx) { return model::ModelConfig::from_json(ctx.cfg.at("model")); }

training::Cohort load_cohort(Context& ctx, const model::ModelConfig& mcfg) {
  const auto manifest = ctx.input("manifest");
  auto entries = preprocess::read_manifest(manifest, manifest.parent_path());
  for (const auto& e : entries) ctx.record(e.path);
  return training::load_cohort(entries, mcfg.t_patch);
}

/// Patch sets from data.patch_sets, else an unlabeled grid over the volume.
atlas::PatchSets patch_sets_for(Context& ctx, const Index4& dims, int patch) {
  if (!ctx.cfg.at("data").at("patch_sets").get<std::string>().empty())
    return atlas::read_patch_sets(ctx.input("patch_sets"));
  atlas::PatchSets sets;
  sets.grid = atlas::PatchGrid::for_volume({dims[0], dims[1], dims[2]}, patch);
  return sets;
}

// ---- subcommands -------------------------------------------------------------

void cmd_synth(Context& ctx) {
  const auto& s = ctx.cfg.at("synth");
  synth::SynthOptions o;
  o.subjects = s.at("subjects");
  o.shape = s.at("shape");
  o.frames = s.at("frames");
  o.tr = s.at("tr");
  o.effect = s.at("effect");
  o.signal_region = s.at("signal_region");
  o.labels_per_region = s.at("labels_per_region");
  o.seed = ctx.seed();
  const auto paths = synth::write_dataset(o, ctx.out_dir);
  *ctx.out << fmt::format("wrote {} subjects, atlas and manifest to {}\n", o.subjects, ctx.out_dir.string());
  (void)paths;
}

void cmd_preprocess(Context& ctx) {
  const auto& p = ctx.cfg.at("preprocess");
  preprocess::PipelineOptions opts;
  opts.target_tr = p.at("target_tr");
  opts.resample_to_template = p.at("resample_to_template");
  opts.mask_fraction = p.at("mask_fraction");
  opts.clip = p.at("clip");
  opts.dice_thresh = p.at("dice_threshold");
  opts.p99_thresh = p.at("p99_threshold");
  const auto tmpl = nifti::read_labels(ctx.input("template_mask"));
  const auto fov = p.at("fov").get<std::vector<int>>();
  require(fov.empty() || fov.size() == 3, ErrorKind::Config, "preprocess.fov must be empty or list three extents");
  opts.fov = fov.empty() ? tmpl.dims : Index3{fov[0], fov[1], fov[2]};

  const auto manifest = ctx.input("manifest");
  const auto entries = preprocess::read_manifest(manifest, manifest.parent_path());
  const fs::path dir = ctx.out_dir / "preprocessed";
  fs::create_directories(dir);
  std::vector<preprocess::QcRow> qc;
  std::vector<preprocess::SubjectEntry> kept;
  std::vector<double> p99s;
  for (const auto& e : entries) {
    ctx.record(e.path);
    const auto result = preprocess::preprocess_subject(nifti::read_volume(e.path), tmpl, opts);
    qc.push_back({e.subject_id, result.qc});
    p99s.push_back(result.qc.p99);
    if (result.qc.excluded) continue;
    const auto rel = fs::path(e.subject_id + ".nii.gz");
    nifti::write_volume(result.normalized, dir / rel);
    kept.push_back({e.subject_id, rel, e.label});
  }
  preprocess::write_qc_csv(qc, ctx.out_dir / "qc.csv");
  preprocess::write_manifest(kept, dir / "manifest.csv");
  json summary{{"subjects", entries.size()}, {"kept", kept.size()}, {"p99_threshold", opts.p99_thresh}};
  if (p99s.size() >= 2) {
    const auto iqr = preprocess::iqr_threshold(p99s);
    summary["cohort_iqr"] = {{"q1", iqr.q1}, {"q3", iqr.q3}, {"iqr", iqr.iqr}, {"threshold", iqr.threshold}};
  }
  std::ofstream(ctx.out_dir / "qc_summary.json") << summary.dump(2) << '\n';
  *ctx.out << fmt::format("preprocessed {} subjects, {} passed QC\n", entries.size(), kept.size());
}

void cmd_classify(Context& ctx) {
  const auto labels = nifti::read_labels(ctx.input("atlas"));
  const auto regions = atlas::RegionMap::from_csv(ctx.input("region_map"));
  atlas::ClassifyOptions opts;
  opts.purity_threshold = ctx.cfg.at("atlas").at("purity_threshold");
  opts.majority_threshold = ctx.cfg.at("atlas").at("majority_threshold");
  const auto sets = atlas::classify_patches(labels, regions, opts);
  atlas::write_patch_sets(sets, ctx.out_dir / "patch_sets.json");
  atlas::write_report_csv(atlas::patch_set_report(sets), ctx.out_dir / "patch_report.csv");
  *ctx.out << fmt::format("classified {} patches into {} regions\n", sets.grid.patch_count(), sets.regions.size());
}

void cmd_build_mask(Context& ctx, int frames) {
  const auto mcfg = model_config(ctx);
  const auto sets = atlas::read_patch_sets(ctx.input("patch_sets"));
  const auto spec = masking::MaskSpec::from_json(ctx.cfg.at("mask"));
  require(frames % mcfg.t_patch == 0, ErrorKind::Validation,
          fmt::format("{} frames are not a multiple of model.t_patch = {}", frames, mcfg.t_patch));
  const auto mask = masking::build_mask(spec, sets, frames / mcfg.t_patch, mcfg.t_patch);
  masking::export_mask(mask, spec, ctx.out_dir / "mask");
  *ctx.out << fmt::format("masked {} of {} slots ({} voxels)\n", mask.masked_slots(), mask.slots(),
                          mask.masked_voxels());
}

training::RunConfig run_config(const Context& ctx, training::Phase phase) {
  auto run = training::RunConfig::from_json(ctx.cfg.at(phase == training::Phase::Pretrain ? "pretrain" : "finetune"),
                                            phase);
  run.model = model_config(ctx);
  run.mask_spec = masking::MaskSpec::from_json(ctx.cfg.at("mask"));
  run.seed = ctx.seed();
  run.validate();
  return run;
}

void cmd_pretrain(Context& ctx) {
  const auto run = run_config(ctx, training::Phase::Pretrain);
  const auto cohort = load_cohort(ctx, run.model);
  require(!cohort.empty(), ErrorKind::Validation, "manifest lists no subjects");
  const auto sets = patch_sets_for(ctx, cohort.front().volume.dims, run.model.patch_size);
  fs::create_directories(ctx.out_dir / "checkpoints");
  const auto result = training::pretrain(run, cohort, sets, ctx.out_dir / "checkpoints" / "pretrain_best");
  training::write_metrics_csv(result.rows, ctx.out_dir / "pretrain_metrics.csv");
  if (run.mask_spec.ratio >= 1.0) {
    const model::Lattice lat = model::lattice_for(cohort.front().volume.dims, run.model.patch_size, run.model.t_patch);
    masking::export_mask(masking::build_mask(run.mask_spec, sets, lat.nt, run.model.t_patch), run.mask_spec,
                         ctx.out_dir / "pretrain_mask");
  }
  json summary{{"seed", run.seed},
               {"best_epoch", result.best_epoch},
               {"best_val_loss", result.best_val_loss},
               {"clip_events", result.clip_events},
               {"configuration", model::to_string(run.model.configuration)},
               {"config_hash", run.model.hash()}};
  std::ofstream(ctx.out_dir / "pretrain_summary.json") << summary.dump(2) << '\n';
  if (result.clip_events > 0)
    *ctx.out << fmt::format("gradient clipping fired on {} steps\n", result.clip_events);
  *ctx.out << fmt::format("pretrained {} epochs, best validation masked MSE {:.6f} at epoch {}\n", run.epochs,
                          result.best_val_loss, result.best_epoch);
}

void cmd_finetune(Context& ctx) {
  const auto base = run_config(ctx, training::Phase::Finetune);
  const auto cohort = load_cohort(ctx, base.model);
  std::optional<fs::path> init;
  if (!ctx.cfg.at("data").at("checkpoint").get<std::string>().empty()) {
    init = config::data_path(ctx.cfg, "checkpoint");
    ctx.record(init->string() + ".json");
    ctx.record(init->string() + ".bin");
  }
  fs::create_directories(ctx.out_dir / "checkpoints");
  json summary = json::object();
  for (int i = 0; i < base.n_seeds; ++i) {
    auto run = base;
    run.seed = base.seed + std::uint64_t(i);
    const auto tag = fmt::format("seed{}", run.seed);
    const auto result = training::finetune(run, cohort, init, ctx.out_dir / "checkpoints" / ("finetune_" + tag));
    training::write_metrics_csv(result.rows, ctx.out_dir / ("finetune_metrics_" + tag + ".csv"));
    std::ofstream pred(ctx.out_dir / ("finetune_predictions_" + tag + ".csv"));
    pred << "subject_id,label,logit\n";
    for (std::size_t k = 0; k < result.test_ids.size(); ++k)
      pred << fmt::format("{},{},{:.6f}\n", result.test_ids[k], result.test_labels[k], result.test_scores[k]);
    summary[std::to_string(run.seed)] = {{"test_acc", result.test_acc},
                                         {"test_auroc", optional_json(result.test_auroc)},
                                         {"best_epoch", result.best_epoch},
                                         {"best_val_auroc", optional_json(result.best_val_auroc)}};
    *ctx.out << fmt::format("seed {}: test ACC {:.3f}, AUROC {}\n", run.seed, result.test_acc,
                            result.test_auroc ? fmt::format("{:.3f}", *result.test_auroc) : "n/a (single-class split)");
  }
  std::ofstream(ctx.out_dir / "finetune_summary.json") << summary.dump(2) << '\n';
}

std::map<std::int32_t, std::string> roi_names(Context& ctx) {
  std::map<std::int32_t, std::string> names;
  if (ctx.cfg.at("data").at("roi_names").get<std::string>().empty()) return names;
  std::ifstream in(ctx.input("roi_names"));
  std::string line;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    try {
      names[std::stoi(line.substr(0, comma))] = line.substr(comma + 1);
    } catch (const std::exception&) {
      // header line
    }
  }
  return names;
}

void cmd_attribute(Context& ctx) {
  const auto mcfg = model_config(ctx);
  const auto acfg = attribution::AttributionConfig::from_json(ctx.cfg.at("attribution"));
  const int max_subjects = ctx.cfg.at("attribution").at("max_subjects");
  const auto cohort = load_cohort(ctx, mcfg);
  require(!cohort.empty(), ErrorKind::Validation, "manifest lists no subjects");
  const auto labels = nifti::read_labels(ctx.input("atlas"));
  const auto names = roi_names(ctx);

  model::HybridModel<float> m(mcfg, ctx.seed());
  const auto stem = config::data_path(ctx.cfg, "checkpoint");
  require(!stem.empty(), ErrorKind::Config, "data.checkpoint must name a fine-tuned checkpoint");
  ctx.record(stem.string() + ".json");
  ctx.record(stem.string() + ".bin");
  ad::load_checkpoint(m.params(), stem, mcfg.hash());

  std::vector<attribution::AttributionMap> maps;
  for (const auto& s : cohort) {
    if (max_subjects > 0 && int(maps.size()) >= max_subjects) break;
    const auto fn = attribution::logit_function(m, s.volume.dims);
    Eigen::ArrayXd grad;
    const double logit = fn(s.volume.data.cast<double>(), grad);
    if (s.label >= 0 && int(logit > 0) != s.label) continue;  // misclassified
    auto map = attribution::ig_sq(fn, s.volume, acfg, ctx.seed());
    map.subject_id = s.id;
    maps.push_back(std::move(map));
  }
  require(!maps.empty(), ErrorKind::Attribution, "no correctly classified subjects to attribute");
  const auto group = attribution::aggregate_group(maps);
  const auto proj = attribution::threshold_and_project(group, labels, acfg, names);

  auto write_map = [&](const Eigen::ArrayXd& values, const fs::path& path) {
    Volume4D v({group.dims[0], group.dims[1], group.dims[2], 1}, labels.affine, 1.0);
    v.data = values.cast<float>();
    nifti::write_volume(v, path);
  };
  write_map(group.map3d, ctx.out_dir / "group_map.nii.gz");
  write_map(proj.thresholded, ctx.out_dir / "thresholded_map.nii.gz");
  attribution::write_roi_csv(proj.rois, ctx.out_dir / "roi_table.csv", acfg.top_k);
  *ctx.out << fmt::format("attributed {} subjects; {} ROIs ranked\n", maps.size(), proj.rois.size());
}

void cmd_stats(Context& ctx) {
  const auto& s = ctx.cfg.at("stats");
  const fs::path input = s.at("input").get<std::string>();
  require(!input.empty(), ErrorKind::Config, "stats.input is not set");
  require(fs::exists(input), ErrorKind::Config, "stats.input points to a missing file: " + input.string());
  ctx.record(input);
  const auto results = metrics::read_paired_results(input, s.at("metric"));
  const auto report = metrics::stats_report(results);
  metrics::write_stats_report(report, results, ctx.out_dir / "stats_report.csv");
  json meta{{"friedman", {{"statistic", report.friedman.statistic},
                          {"p", report.friedman.p},
                          {"df", report.friedman.df},
                          {"degenerate", report.friedman.degenerate},
                          {"approximation", "chi-square, no Iman-Davenport correction"}}},
            {"correction", "bonferroni"},
            {"comparisons", report.pairwise.size()}};
  std::ofstream(ctx.out_dir / "stats_report.json") << meta.dump(2) << '\n';
  *ctx.out << fmt::format("Friedman chi2 = {:.4f}, p = {:.4g}\n", report.friedman.statistic, report.friedman.p);
  for (const auto& c : report.pairwise)
    *ctx.out << fmt::format("  {} vs {}: p = {:.4g}, corrected {:.4g} {}\n", c.a, c.b, c.test.p, c.p_corrected, c.tier);
}

int exit_code(ErrorKind k) { return k == ErrorKind::Config || k == ErrorKind::Validation ? 2 : 1; }

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Region-aware masked pretraining for 4D volumes", "regmae"};
  app.require_subcommand(1);
  std::string config_file, out_dir = ".";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  app.add_option("--config", config_file, "JSON run config");
  app.add_option("--set", overrides, "override, dotted key=value")->take_all();
  app.add_option("--seed", seed, "global seed");
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

  std::optional<int> synth_subjects, synth_shape, synth_frames;
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  synth->add_option("--subjects", synth_subjects);
  synth->add_option("--shape", synth_shape);
  synth->add_option("--frames", synth_frames);
  auto* pre = app.add_subcommand("preprocess", "resample, crop, mask, z-score and QC a manifest");
  auto* cls = app.add_subcommand("classify-patches", "Any/Majority/Pure patch sets per macroregion");
  int mask_frames = 8;
  auto* bm = app.add_subcommand("build-mask", "realize a mask spec on the patch lattice");
  bm->add_option("--frames", mask_frames, "volume frames");
  auto* pt = app.add_subcommand("pretrain", "masked-reconstruction pretraining");
  auto* ft = app.add_subcommand("finetune", "binary classification fine-tuning");
  auto* at = app.add_subcommand("attribute", "IG-SQ attribution and ROI ranking");
  auto* st = app.add_subcommand("stats", "Friedman / Wilcoxon / Bonferroni report");
  for (auto* sub : {synth, pre, cls, bm, pt, ft, at, st}) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  Context ctx;
  ctx.out = &out;
  ctx.out_dir = out_dir;
  try {
    ctx.cfg = config::resolve(config_file, overrides);
    if (!config_file.empty()) ctx.record(config_file);
    if (seed) ctx.cfg["seed"] = *seed;
    if (synth_subjects) ctx.cfg["synth"]["subjects"] = *synth_subjects;
    if (synth_shape) ctx.cfg["synth"]["shape"] = *synth_shape;
    if (synth_frames) ctx.cfg["synth"]["frames"] = *synth_frames;
    fs::create_directories(ctx.out_dir);

    const auto start = std::chrono::steady_clock::now();
    auto* sub = app.get_subcommands().front();
    ctx.command = sub->get_name();
    if (sub == synth) cmd_synth(ctx);
    else if (sub == pre) cmd_preprocess(ctx);
    else if (sub == cls) cmd_classify(ctx);
    else if (sub == bm) cmd_build_mask(ctx, mask_frames);
    else if (sub == pt) cmd_pretrain(ctx);
    else if (sub == ft) cmd_finetune(ctx);
    else if (sub == at) cmd_attribute(ctx);
    else cmd_stats(ctx);
    ctx.write_run_records();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    err << fmt::format("{} finished in {:.1f} s\n", ctx.command, secs);
    return 0;
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    err << "error [config]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace regmae::cli
