// Helpers shared by the test binaries.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "spexplus/audio.hpp"
#include "spexplus/tape.hpp"
#include "spexplus/tensor.hpp"

namespace testing_support {

namespace fs = std::filesystem;

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("spexplus_" + tag + "_" + std::to_string(rd()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Asymptotic Kolmogorov-Smirnov p-value for H0: samples ~ Uniform(lo, hi),
// using Stephens' small-sample correction of the statistic.
inline double ks_uniform_pvalue(std::vector<double> x, double lo, double hi, double* d_out = nullptr) {
  std::sort(x.begin(), x.end());
  const double n = double(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = std::clamp((x[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max({d, double(i + 1) / n - f, f - double(i) / n});
  }
  if (d_out) *d_out = d;
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  if (lambda < 1e-3) return 1.0;
  double p = 0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    p += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-12) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

// Power-weighted mean frequency of a real signal, in Hz.
inline double spectral_centroid(const std::vector<float>& samples, int rate) {
  std::vector<double> x(samples.begin(), samples.end());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, x);
  double num = 0, den = 0;
  for (std::size_t k = 0; k <= x.size() / 2; ++k) {
    const double p = std::norm(spec[k]);
    num += p * double(k) * double(rate) / double(x.size());
    den += p;
  }
  return num / den;
}

inline double rms(const std::vector<float>& x) {
  double s = 0;
  for (float v : x) s += double(v) * v;
  return std::sqrt(s / double(x.size()));
}

inline std::vector<float> random_signal(std::size_t n, unsigned seed, double amp = 0.5) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> d(0.0, amp);
  std::vector<float> out(n);
  for (auto& v : out) v = float(d(gen));
  return out;
}

template <typename T>
spexplus::Tensor<T> rand_tensor(spexplus::Shape shape, unsigned seed, double lo = -1, double hi = 1) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  spexplus::Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = T(d(gen));
  return t;
}

template <typename T>
double inner(const spexplus::Tensor<T>& a, const spexplus::Tensor<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

}  // namespace testing_support
