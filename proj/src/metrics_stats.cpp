#include "regmae/metrics_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/math/special_functions/gamma.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

namespace regmae::metrics {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (double(i + 1) + double(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorKind::Metric, "auroc: scores and labels differ in length");
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  const auto ranks = average_ranks(scores);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, ErrorKind::Metric, "auroc: labels must be 0 or 1");
    require(std::isfinite(scores[i]), ErrorKind::Metric, "auroc: non-finite score");
    if (labels[i] == 1) {
      n_pos += 1;
      rank_sum += ranks[i];
    } else {
      n_neg += 1;
    }
  }
  require(n_pos > 0 && n_neg > 0, ErrorKind::Metric, "auroc needs both classes present");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  require(scores.size() == labels.size() && !scores.empty(), ErrorKind::Metric,
          "accuracy: scores and labels must be non-empty and equally long");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += int(scores[i] > threshold) == labels[i];
  return double(hits) / double(scores.size());
}

FriedmanResult friedman_test(const PairedResults& results) {
  const auto n = results.values.rows();
  const auto k = results.values.cols();
  require(n >= 3, ErrorKind::InsufficientSamples, "Friedman test needs at least 3 rows, got " + std::to_string(n));
  require(k >= 2, ErrorKind::InsufficientSamples, "Friedman test needs at least 2 conditions");
  require(results.values.allFinite(), ErrorKind::Validation, "Friedman test: missing or non-finite cells");

  Eigen::VectorXd rank_sums = Eigen::VectorXd::Zero(k);
  double tie_sum = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    std::vector<double> row(static_cast<std::size_t>(k));
    for (Eigen::Index c = 0; c < k; ++c) row[std::size_t(c)] = results.values(r, c);
    const auto ranks = average_ranks(row);
    for (Eigen::Index c = 0; c < k; ++c) rank_sums[c] += ranks[std::size_t(c)];
    std::map<double, int> groups;
    for (double v : row) ++groups[v];
    for (const auto& [v, t] : groups) tie_sum += double(t) * t * t - t;
  }

  FriedmanResult out;
  out.df = int(k - 1);
  const double nd = double(n), kd = double(k);
  const double correction = 1.0 - tie_sum / (nd * kd * (kd * kd - 1.0));
  if (correction <= 1e-12) {
    out.degenerate = true;
    return out;  // statistic 0, p 1
  }
  const double raw = 12.0 / (nd * kd * (kd + 1.0)) * rank_sums.squaredNorm() - 3.0 * nd * (kd + 1.0);
  out.statistic = std::max(0.0, raw / correction);
  out.p = boost::math::gamma_q(0.5 * (kd - 1.0), 0.5 * out.statistic);
  return out;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::Validation, "wilcoxon: samples are not paired (lengths differ)");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    require(std::isfinite(d), ErrorKind::Validation, "wilcoxon: non-finite value");
    if (d != 0.0) diffs.push_back(d);
  }
  require(!diffs.empty(), ErrorKind::Degenerate, "wilcoxon: all paired differences are zero");

  std::vector<double> mags(diffs.size());
  for (std::size_t i = 0; i < diffs.size(); ++i) mags[i] = std::abs(diffs[i]);
  const auto ranks = average_ranks(mags);
  const int n = int(diffs.size());

  WilcoxonResult out;
  out.n = n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    total += ranks[std::size_t(i)];
    if (diffs[std::size_t(i)] > 0) out.w_plus += ranks[std::size_t(i)];
  }
  out.statistic = std::min(out.w_plus, total - out.w_plus);

  if (n <= kWilcoxonExactMax) {
    // Doubled ranks are integers even with ties; count sign assignments per
    // attainable W+ by dynamic programming.
    std::vector<int> doubled(static_cast<std::size_t>(n));
    int max_sum = 0;
    for (int i = 0; i < n; ++i) max_sum += doubled[std::size_t(i)] = int(std::lround(2.0 * ranks[std::size_t(i)]));
    std::vector<double> counts(std::size_t(max_sum) + 1, 0.0);
    counts[0] = 1.0;
    for (int r : doubled)
      for (int s = max_sum; s >= r; --s) counts[std::size_t(s)] += counts[std::size_t(s - r)];
    const int observed = int(std::lround(2.0 * out.w_plus));
    double lower = 0.0, upper = 0.0;
    for (int s = 0; s <= max_sum; ++s) {
      if (s <= observed) lower += counts[std::size_t(s)];
      if (s >= observed) upper += counts[std::size_t(s)];
    }
    const double all = std::ldexp(1.0, n);
    out.p = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    out.exact = true;
    return out;
  }

  std::map<double, int> groups;
  for (double m : mags) ++groups[m];
  double tie_term = 0.0;
  for (const auto& [v, t] : groups) tie_term += double(t) * t * t - t;
  const double nd = n;
  const double mean = nd * (nd + 1.0) / 4.0;
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
  const double dev = std::max(0.0, std::abs(out.w_plus - mean) - 0.5);
  out.p = var > 0 ? std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0))) : 1.0;
  return out;
}

std::vector<double> bonferroni(std::span<const double> pvals, std::size_t m) {
  require(m >= pvals.size(), ErrorKind::Validation,
          "bonferroni: m = " + std::to_string(m) + " is smaller than the number of tests");
  std::vector<double> out;
  for (double p : pvals) {
    require(p >= 0.0 && p <= 1.0, ErrorKind::Validation, fmt::format("bonferroni: p = {} outside [0, 1]", p));
    out.push_back(std::min(1.0, p * double(m)));
  }
  return out;
}

std::string significance_tier(double p) {
  if (p < 0.05) return "*";
  if (p < 0.06) return "†";
  return "n.s.";
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

}  // namespace

PairedResults read_paired_results(const std::filesystem::path& csv, const std::string& metric) {
  std::ifstream in(csv);
  require(bool(in), ErrorKind::Io, "cannot open " + csv.string());
  std::string line;
  require(bool(std::getline(in, line)), ErrorKind::Validation, csv.string() + " is empty");
  const auto header = split_csv(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    require(it != header.end(), ErrorKind::Validation, csv.string() + " has no '" + name + "' column");
    return std::size_t(it - header.begin());
  };
  const std::size_t c_run = column("run"), c_cond = column("condition"), c_val = column(metric);

  std::vector<std::string> runs, conds;
  std::map<std::pair<std::string, std::string>, double> cells;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells_in = split_csv(line);
    require(cells_in.size() == header.size(), ErrorKind::Validation,
            fmt::format("{}:{}: expected {} fields", csv.string(), line_no, header.size()));
    const auto& run = cells_in[c_run];
    const auto& cond = cells_in[c_cond];
    if (std::find(runs.begin(), runs.end(), run) == runs.end()) runs.push_back(run);
    if (std::find(conds.begin(), conds.end(), cond) == conds.end()) conds.push_back(cond);
    double v;
    try {
      v = std::stod(cells_in[c_val]);
    } catch (const std::exception&) {
      fail(ErrorKind::Validation, fmt::format("{}:{}: '{}' is not a number", csv.string(), line_no, cells_in[c_val]));
    }
    require(cells.emplace(std::make_pair(run, cond), v).second, ErrorKind::Validation,
            fmt::format("{}:{}: duplicate cell ({}, {})", csv.string(), line_no, run, cond));
  }

  PairedResults out;
  out.metric = metric;
  out.rows = runs;
  out.conditions = conds;
  out.values.resize(Eigen::Index(runs.size()), Eigen::Index(conds.size()));
  for (std::size_t r = 0; r < runs.size(); ++r)
    for (std::size_t c = 0; c < conds.size(); ++c) {
      const auto it = cells.find({runs[r], conds[c]});
      require(it != cells.end(), ErrorKind::Validation,
              "missing cell for run " + runs[r] + ", condition " + conds[c] + " (repeated measures need every cell)");
      out.values(Eigen::Index(r), Eigen::Index(c)) = it->second;
    }
  return out;
}

StatsReport stats_report(const PairedResults& results) {
  StatsReport rep;
  rep.friedman = friedman_test(results);
  const auto k = results.values.cols();
  std::vector<double> raw;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const Eigen::VectorXd a = results.values.col(i), b = results.values.col(j);
      Comparison c;
      c.a = results.conditions[std::size_t(i)];
      c.b = results.conditions[std::size_t(j)];
      try {
        c.test = wilcoxon_signed_rank({a.data(), std::size_t(a.size())}, {b.data(), std::size_t(b.size())});
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Degenerate) throw;
        c.test.p = 1.0;  // identical columns: nothing to test
      }
      raw.push_back(c.test.p);
      rep.pairwise.push_back(c);
    }
  const auto corrected = bonferroni(raw, raw.size());
  for (std::size_t i = 0; i < rep.pairwise.size(); ++i) {
    rep.pairwise[i].p_corrected = corrected[i];
    rep.pairwise[i].tier = significance_tier(corrected[i]);
  }
  return rep;
}

void write_stats_report(const StatsReport& report, const PairedResults& results, const std::filesystem::path& csv) {
  std::ofstream out(csv);
  require(bool(out), ErrorKind::Io, "cannot write " + csv.string());
  out << "test,comparison,statistic,n,p_raw,p_corrected,tier\n";
  out << fmt::format("friedman,{},{:.6f},{},{:.6g},{:.6g},{}\n", fmt::join(results.conditions, " vs "),
                     report.friedman.statistic, results.values.rows(), report.friedman.p, report.friedman.p,
                     significance_tier(report.friedman.p));
  for (const auto& c : report.pairwise)
    out << fmt::format("wilcoxon{},{} vs {},{:.6f},{},{:.6g},{:.6g},{}\n", c.test.exact ? "_exact" : "_normal", c.a,
                       c.b, c.test.statistic, c.test.n, c.test.p, c.p_corrected, c.tier);
}

}  // namespace regmae::metrics
