// Scale-invariant SDR, the multi-scale reconstruction loss, the speaker
// cross-entropy, and their weighted sum.
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spexplus/ops.hpp"
#include "spexplus/tape.hpp"

namespace spexplus {

inline constexpr double kSiSdrEps = 1e-8;

class DegenerateSignalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossWeights {
  double alpha = 0.1;
  double beta = 0.1;
  double gamma = 0.5;

  void validate() const {
    if (alpha < 0 || beta < 0 || alpha + beta >= 1.0)
      throw std::invalid_argument("LossWeights: need alpha, beta >= 0 and alpha + beta < 1");
    if (gamma < 0) throw std::invalid_argument("LossWeights: gamma must be >= 0");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

namespace detail {

struct SiSdrTerms {
  double alpha = 0;  // projection coefficient
  double ss = 0;     // |s|^2
  double es = 0;     // <e, s>
  double ee = 0;     // |e|^2
  double proj = 0;   // |alpha s|^2 + eps
  double resid = 0;  // |alpha s - e|^2 + eps
  double db = 0;
  std::vector<double> e, s;  // zero-mean copies
};

template <typename A, typename B>
SiSdrTerms si_sdr_terms(std::span<const A> estimate, std::span<const B> reference) {
  if (estimate.size() != reference.size())
    throw ShapeError("si_sdr: estimate has " + std::to_string(estimate.size()) +
                     " samples, reference " + std::to_string(reference.size()));
  const std::size_t n = estimate.size();
  if (n < 2) throw ShapeError("si_sdr: need at least 2 samples");
  SiSdrTerms t;
  t.e.resize(n);
  t.s.resize(n);
  double me = 0, ms = 0;
  for (std::size_t i = 0; i < n; ++i) {
    me += double(estimate[i]);
    ms += double(reference[i]);
  }
  me /= double(n);
  ms /= double(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.e[i] = double(estimate[i]) - me;
    t.s[i] = double(reference[i]) - ms;
    t.ss += t.s[i] * t.s[i];
    t.es += t.e[i] * t.s[i];
    t.ee += t.e[i] * t.e[i];
  }
  if (!(t.ss > 1e-20))
    throw DegenerateSignalError("si_sdr: reference has zero power after mean removal");
  t.alpha = t.es / (t.ss + kSiSdrEps);
  t.proj = t.alpha * t.alpha * t.ss + kSiSdrEps;
  // |alpha s - e|^2 = alpha^2 ss - 2 alpha es + ee, clamped against cancellation.
  double r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = t.alpha * t.s[i] - t.e[i];
    r += d * d;
  }
  t.resid = r + kSiSdrEps;
  t.db = 10.0 * std::log10(t.proj / t.resid);
  return t;
}

}  // namespace detail

// SI-SDR in dB of `estimate` against `reference` (argument order matters).
template <typename A, typename B>
double si_sdr(std::span<const A> estimate, std::span<const B> reference) {
  return detail::si_sdr_terms(estimate, reference).db;
}

inline double si_sdr(const std::vector<float>& est, const std::vector<float>& ref) {
  return si_sdr(std::span<const float>(est), std::span<const float>(ref));
}
inline double si_sdr(const std::vector<double>& est, const std::vector<double>& ref) {
  return si_sdr(std::span<const double>(est), std::span<const double>(ref));
}

// Differentiable SI-SDR (dB) of an estimate [1 x T] against a fixed reference.
template <typename T>
Var<T> si_sdr(Var<T> estimate, const Tensor<T>& reference) {
  auto terms = detail::si_sdr_terms(estimate.value().values(), reference.values());
  const double db = terms.db;
  return estimate.tape->record(Tensor<T>({1}, T(db)), {estimate},
      [estimate, terms = std::move(terms)](Tape<T>& t, std::span<const T> g) {
        // d/de of 10 log10(P / R) with P = a^2 ss + eps, R = |a s - e|^2 + eps,
        // a = <e,s> / (ss + eps); then project out the mean.
        const std::size_t n = terms.e.size();
        const double k = 10.0 / std::log(10.0);
        const double inv = 1.0 / (terms.ss + kSiSdrEps);
        const double dP_coef = 2.0 * terms.alpha * terms.ss * inv;  // dP/de = dP_coef * s
        const double dR_s = (2.0 * terms.alpha * terms.ss - 2.0 * terms.es) * inv - 2.0 * terms.alpha;
        std::vector<double> grad(n);
        double mean = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dP = dP_coef * terms.s[i];
          const double dR = dR_s * terms.s[i] + 2.0 * terms.e[i];
          grad[i] = k * (dP / terms.proj - dR / terms.resid);
          mean += grad[i];
        }
        mean /= double(n);
        auto ge = t.grad_sink(estimate);
        for (std::size_t i = 0; i < n; ++i) ge[i] += T(double(g[0]) * (grad[i] - mean));
      });
}

// -[(1 - alpha - beta) rho(s1, s) + alpha rho(s2, s) + beta rho(s3, s)]
template <typename T>
Var<T> multiscale_sisdr_loss(Var<T> s1, Var<T> s2, Var<T> s3, const Tensor<T>& target,
                             const LossWeights& w) {
  w.validate();
  Var<T> loss = scale(si_sdr(s1, target), T(-(1.0 - w.alpha - w.beta)));
  if (w.alpha > 0) loss = add(loss, scale(si_sdr(s2, target), T(-w.alpha)));
  if (w.beta > 0) loss = add(loss, scale(si_sdr(s3, target), T(-w.beta)));
  return loss;
}

// -log softmax(logits)[label], natural log, max-subtracted.
template <typename T>
Var<T> ce_loss(Var<T> logits, std::size_t label) {
  const auto& z = logits.value();
  if (label >= z.size())
    throw std::out_of_range("ce_loss: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(z.size()) + ")");
  double mx = z[0];
  for (std::size_t i = 1; i < z.size(); ++i) mx = std::max(mx, double(z[i]));
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += std::exp(double(z[i]) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> probs(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) probs[i] = std::exp(double(z[i]) - lse);
  return logits.tape->record(Tensor<T>({1}, T(lse - double(z[label]))), {logits},
      [logits, label, probs = std::move(probs)](Tape<T>& t, std::span<const T> g) {
        auto gz = t.grad_sink(logits);
        for (std::size_t i = 0; i < gz.size(); ++i)
          gz[i] += T(double(g[0]) * (probs[i] - (i == label ? 1.0 : 0.0)));
      });
}

template <typename T>
struct LossBreakdown {
  Var<T> total;
  Var<T> sisdr;
  Var<T> ce;
};

// multiscale_sisdr_loss + gamma * ce_loss. With gamma == 0 the CE term is not
// recorded, so the classifier receives no gradient.
template <typename T>
LossBreakdown<T> total_loss(Var<T> s1, Var<T> s2, Var<T> s3, const Tensor<T>& target, Var<T> logits,
                            std::size_t label, const LossWeights& w) {
  LossBreakdown<T> out;
  out.sisdr = multiscale_sisdr_loss(s1, s2, s3, target, w);
  out.ce = ce_loss(logits, label);
  out.total = w.gamma > 0 ? add(out.sisdr, scale(out.ce, T(w.gamma))) : out.sisdr;
  return out;
}

}  // namespace spexplus
