#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "regmae/error.hpp"

namespace regmae::metrics {

/// P(score+ > score-) + 0.5 P(tie), from average ranks.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of samples whose thresholded score matches the label.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.0);

/// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Repeated-measures table: one row per block (configuration, seed, ...),
/// one column per condition.
struct PairedResults {
  std::vector<std::string> conditions;
  std::vector<std::string> rows;
  Eigen::MatrixXd values;
  std::string metric;
};

struct FriedmanResult {
  double statistic = 0.0;
  double p = 1.0;
  int df = 0;
  /// Every row is constant: no ranking information at all.
  bool degenerate = false;
};

/// Tie-corrected Friedman chi-square; p from the chi-square approximation
/// with k - 1 degrees of freedom (no Iman-Davenport refinement).
FriedmanResult friedman_test(const PairedResults& results);

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double w_plus = 0.0;
  double p = 1.0;
  int n = 0;  // non-zero differences
  bool exact = false;
};

inline constexpr int kWilcoxonExactMax = 12;

/// Two-sided signed-rank test. Exact null distribution for n <= 12 non-zero
/// differences, otherwise normal approximation with tie and continuity
/// corrections.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

std::vector<double> bonferroni(std::span<const double> pvals, std::size_t m);

/// "*" below 0.05, "†" (trend) below 0.06, "n.s." otherwise.
std::string significance_tier(double p);

/// Long-format CSV with columns `run`, `condition` and a metric column;
/// pivots into a complete run x condition table.
PairedResults read_paired_results(const std::filesystem::path& csv, const std::string& metric);

struct Comparison {
  std::string a, b;
  WilcoxonResult test;
  double p_corrected = 1.0;
  std::string tier;
};

struct StatsReport {
  FriedmanResult friedman;
  std::vector<Comparison> pairwise;
};

/// Friedman omnibus plus all pairwise Wilcoxon tests, Bonferroni-corrected
/// over the number of pairs.
StatsReport stats_report(const PairedResults& results);
void write_stats_report(const StatsReport& report, const PairedResults& results, const std::filesystem::path& csv);

}  // namespace regmae::metrics
