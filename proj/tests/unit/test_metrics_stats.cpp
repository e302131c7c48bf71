#include <fstream>

#include <doctest.h>

#include "regmae/metrics_stats.hpp"
#include "../common/support.hpp"

using namespace regmae;
using namespace regmae::metrics;

namespace {

/// Tie-corrected Friedman statistic written out from its definition:
/// (k - 1) * sum_j (R_j - n(k+1)/2)^2 / (sum r_ij^2 - n k (k+1)^2 / 4).
double friedman_oracle(const Eigen::MatrixXd& v) {
  const auto n = double(v.rows()), k = double(v.cols());
  Eigen::VectorXd R = Eigen::VectorXd::Zero(v.cols());
  double sum_sq = 0;
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      double less = 0, equal = 0;
      for (Eigen::Index l = 0; l < v.cols(); ++l) {
        less += v(i, l) < v(i, j);
        equal += v(i, l) == v(i, j);
      }
      const double r = less + (equal + 1) / 2;
      R[j] += r;
      sum_sq += r * r;
    }
  const double num = (k - 1) * (R.array() - n * (k + 1) / 2).square().sum();
  return num / (sum_sq - n * k * (k + 1) * (k + 1) / 4);
}

PairedResults table(Eigen::MatrixXd v) {
  PairedResults r;
  for (Eigen::Index j = 0; j < v.cols(); ++j) r.conditions.push_back("c" + std::to_string(j));
  for (Eigen::Index i = 0; i < v.rows(); ++i) r.rows.push_back("r" + std::to_string(i));
  r.values = std::move(v);
  r.metric = "auroc";
  return r;
}

}  // namespace

TEST_SUITE("metrics_stats") {
  TEST_CASE("auroc examples") {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(auroc(s, y) == 0.75);
    CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y) == 1.0);
    CHECK(auroc(std::vector<double>(4, 0.3), y) == 0.5);
    CHECK_THROWS_AS(auroc(s, std::vector<int>{1, 1, 1, 1}), Error);
    CHECK(accuracy(std::vector<double>{-1, 2, 0.5, -0.2}, std::vector<int>{0, 1, 0, 0}) == 0.75);
  }

  TEST_CASE("auroc equals pairwise enumeration, ties included") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 2 + int(uniform_index(rng, 199));
      std::vector<double> s(static_cast<std::size_t>(n));
      std::vector<int> y(static_cast<std::size_t>(n));
      const bool coarse = trial % 2 == 0;  // coarse scores create many ties
      for (int i = 0; i < n; ++i) {
        s[std::size_t(i)] = coarse ? double(uniform_index(rng, 5)) : standard_normal(rng);
        y[std::size_t(i)] = int(uniform_index(rng, 2));
      }
      y[0] = 0;
      y[1] = 1;
      CHECK(auroc(s, y) == doctest::Approx(oracle::auroc_pairs(s, y)).epsilon(1e-12));
      if (!coarse) {
        std::vector<double> neg(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) neg[i] = -s[i];
        CHECK(auroc(s, y) + auroc(neg, y) == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("average ranks share ties") {
    CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
    CHECK(average_ranks(std::vector<double>{5, 5, 5}) == std::vector<double>{2, 2, 2});
  }

  TEST_CASE("friedman on fixed fixtures") {
    // Hand-ranked: column rank sums (9, 11, 4) on 4 rows, k = 3:
    // 12 / (4*3*4) * (81 + 121 + 16) - 3*4*4 = 54.5 - 48 = 6.5.
    Eigen::MatrixXd small(4, 3);
    small << 0.70, 0.80, 0.60,  //
        0.65, 0.75, 0.60,       //
        0.72, 0.74, 0.50,       //
        0.71, 0.69, 0.55;
    CHECK(friedman_test(table(small)).statistic == doctest::Approx(6.5).epsilon(1e-12));

    Eigen::MatrixXd ten(10, 3);
    ten << 0.81, 0.84, 0.79,  //
        0.77, 0.80, 0.80,     //
        0.69, 0.75, 0.70,     //
        0.90, 0.91, 0.88,     //
        0.66, 0.64, 0.61,     //
        0.73, 0.79, 0.70,     //
        0.85, 0.85, 0.85,     //
        0.70, 0.78, 0.71,     //
        0.62, 0.68, 0.60,     //
        0.80, 0.83, 0.76;
    const auto r = friedman_test(table(ten));
    CHECK(r.statistic == doctest::Approx(friedman_oracle(ten)).epsilon(1e-12));
    CHECK(r.df == 2);
    CHECK(r.p == doctest::Approx(std::exp(-r.statistic / 2)).epsilon(1e-10));  // chi-square, 2 df

    Eigen::MatrixXd ordered(10, 3);
    for (int i = 0; i < 10; ++i) ordered.row(i) << 0.1 * i, 0.1 * i + 0.01, 0.1 * i + 0.02;
    const auto o = friedman_test(table(ordered));
    CHECK(o.statistic == doctest::Approx(20.0).epsilon(1e-12));  // n (k - 1)
    CHECK(o.p == doctest::Approx(std::exp(-10.0)).epsilon(1e-10));

    const auto same = friedman_test(table(Eigen::MatrixXd::Constant(5, 3, 0.7)));
    CHECK(same.statistic == 0.0);
    CHECK(same.p == 1.0);
    CHECK(same.degenerate);
  }

  TEST_CASE("friedman matches the oracle and ignores monotone row transforms") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 3 + int(uniform_index(rng, 10)), k = 2 + int(uniform_index(rng, 4));
      Eigen::MatrixXd v(n, k);
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = double(uniform_index(rng, 6));  // ties
      if ((v.rowwise().maxCoeff() - v.rowwise().minCoeff()).maxCoeff() == 0) continue;
      const auto r = friedman_test(table(v));
      CHECK(r.statistic == doctest::Approx(friedman_oracle(v)).epsilon(1e-10));
      const Eigen::MatrixXd t = (v.array() * 0.37).exp() * 3.0 - 1.0;
      CHECK(friedman_test(table(t)).statistic == doctest::Approx(r.statistic).epsilon(1e-12));
    }
  }

  TEST_CASE("wilcoxon exact p equals sign enumeration for n up to 12") {
    Rng rng(3);
    for (int n = 1; n <= 12; ++n)
      for (int trial = 0; trial < 8; ++trial) {
        std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
          a[std::size_t(i)] = double(uniform_index(rng, 8)) / 10.0;  // ties and zero differences
          b[std::size_t(i)] = double(uniform_index(rng, 8)) / 10.0;
        }
        if (a == b) continue;
        const auto w = wilcoxon_signed_rank(a, b);
        CHECK(w.exact);
        CHECK(w.p == doctest::Approx(oracle::wilcoxon_enumerated_p(a, b)).epsilon(1e-12));
        CHECK(wilcoxon_signed_rank(b, a).p == doctest::Approx(w.p).epsilon(1e-12));
      }
  }

  TEST_CASE("wilcoxon n = 6 by hand, degenerate and large-sample cases") {
    // All six differences positive: W+ = 21, only the two extreme sign
    // patterns are as extreme, p = 2 / 64.
    const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{0, 0, 0, 0, 0, 0};
    const auto w = wilcoxon_signed_rank(a, b);
    CHECK(w.w_plus == 21.0);
    CHECK(w.statistic == 0.0);
    CHECK(w.p == doctest::Approx(2.0 / 64.0).epsilon(1e-12));

    try {
      wilcoxon_signed_rank(a, a);
      FAIL("expected degenerate-input error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Degenerate);
    }

    Rng rng(4);
    std::vector<double> x(30), y(30);
    for (std::size_t i = 0; i < 30; ++i) {
      x[i] = standard_normal(rng) + 0.8;
      y[i] = standard_normal(rng);
    }
    const auto big = wilcoxon_signed_rank(x, y);
    CHECK_FALSE(big.exact);
    CHECK(big.n == 30);
    // Continuous data, no ties: mean n(n+1)/4, variance n(n+1)(2n+1)/24.
    const double mean = 30.0 * 31.0 / 4.0, sd = std::sqrt(30.0 * 31.0 * 61.0 / 24.0);
    const double z = (std::abs(big.w_plus - mean) - 0.5) / sd;
    CHECK(big.p == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-12));
    CHECK(wilcoxon_signed_rank(y, x).p == doctest::Approx(big.p).epsilon(1e-12));
  }

  TEST_CASE("bonferroni and significance tiers") {
    const std::vector<double> p{0.01, 0.5, 0.02};
    const auto c = bonferroni(p, 3);
    CHECK(c[0] == doctest::Approx(0.03).epsilon(1e-15));
    CHECK(c[1] == 1.0);
    CHECK(c[2] == doctest::Approx(0.06).epsilon(1e-15));
    CHECK(bonferroni(std::vector<double>{0.3334}, 3)[0] == 1.0);
    CHECK(bonferroni(std::vector<double>{0.01}, 5)[0] == doctest::Approx(0.05).epsilon(1e-15));
    CHECK_THROWS_AS(bonferroni(p, 2), Error);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(c[i] == std::min(1.0, p[i] * 3));
    CHECK(c[0] <= c[2]);
    CHECK(significance_tier(0.049) == "*");
    CHECK(significance_tier(0.05) == "†");
    CHECK(significance_tier(0.0599) == "†");
    CHECK(significance_tier(0.06) == "n.s.");
  }

  TEST_CASE("paired results csv and report") {
    testing::TempDir dir;
    {
      std::ofstream out(dir / "runs.csv");
      out << "run,condition,auroc\n";
      const char* conds[] = {"ANY", "MAJORITY", "PURE"};
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 3; ++c) out << "seed" << r << "," << conds[c] << "," << 0.6 + 0.05 * c + 0.01 * r << "\n";
    }
    const auto res = read_paired_results(dir / "runs.csv", "auroc");
    CHECK(res.values.rows() == 8);
    CHECK(res.values.cols() == 3);
    const auto rep = stats_report(res);
    CHECK(rep.pairwise.size() == 3);
    CHECK(rep.friedman.statistic == doctest::Approx(16.0).epsilon(1e-12));
    for (const auto& cmp : rep.pairwise) {
      CHECK(cmp.test.exact);
      CHECK(cmp.test.p == doctest::Approx(2.0 / 256.0).epsilon(1e-12));
      CHECK(cmp.p_corrected == doctest::Approx(6.0 / 256.0).epsilon(1e-12));
      CHECK(cmp.tier == "*");
    }
    write_stats_report(rep, res, dir / "report.csv");
    std::ifstream in(dir / "report.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "test,comparison,statistic,n,p_raw,p_corrected,tier");

    {
      std::ofstream out(dir / "hole.csv");
      out << "run,condition,auroc\ns0,A,0.5\ns0,B,0.6\ns1,A,0.7\n";
    }
    CHECK_THROWS_AS(read_paired_results(dir / "hole.csv", "auroc"), Error);
  }
}
