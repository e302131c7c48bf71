#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <functional>
#include <string>

#include <Eigen/Dense>

#include "regmae/autodiff/ops.hpp"
#include "regmae/random.hpp"
#include "oracles.hpp"

namespace testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("regmae_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Eigen::ArrayXd random_array(regmae::Rng& rng, Eigen::Index n, double scale = 1.0) {
  Eigen::ArrayXd a(n);
  for (auto& v : a) v = scale * regmae::standard_normal(rng);
  return a;
}

inline regmae::ad::Tensor<double> random_tensor(regmae::Rng& rng, regmae::ad::Shape shape, double scale = 1.0) {
  const auto n = regmae::ad::numel(shape);
  return regmae::ad::Tensor<double>(std::move(shape), random_array(rng, n, scale));
}

/// Central finite differences of a scalar function of a flat vector.
inline Eigen::ArrayXd numeric_gradient(const std::function<double(const Eigen::ArrayXd&)>& f, Eigen::ArrayXd x,
                                       double h = 1e-5) {
  Eigen::ArrayXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - b|| / max(||b||, floor): the relative error used by every gradient check.
inline double relative_error(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b, double floor = 1e-12) {
  return (a - b).matrix().norm() / std::max(b.matrix().norm(), floor);
}

}  // namespace testing
