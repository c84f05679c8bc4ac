// Parameterized layers. Each layer owns its tensors, records its forward pass
// on a tape, and enumerates its tensors under hierarchical names.
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spexplus/ops.hpp"
#include "spexplus/random.hpp"
#include "spexplus/tape.hpp"
#include "spexplus/tensor.hpp"

namespace spexplus {

// Parameters receive gradients and optimizer updates; buffers (batch-norm
// running statistics) are only checkpointed.
enum class TensorRole { kParameter, kBuffer };

template <typename T>
using TensorVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, TensorRole role)>;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

namespace detail {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)): Kaiming-uniform with a = sqrt(5).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (auto& v : t.values()) v = T(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> trainable(Shape shape, T fill) {
  Tensor<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

template <typename T>
class Conv1dLayer {
 public:
  Conv1dLayer() = default;
  Conv1dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
              ConvOptions options, bool bias, Rng& rng)
      : options_(options) {
    const std::size_t cin_g = in_channels / options.groups;
    if (cin_g * options.groups != in_channels)
      throw ShapeError("Conv1dLayer: in_channels not divisible by groups");
    weight_ = detail::kaiming_uniform<T>({out_channels, cin_g, kernel}, cin_g * kernel, rng);
    if (bias) bias_ = detail::trainable<T>({out_channels, 1}, T(0));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> y = conv1d(x, tape.parameter(weight_), options_);
    return bias_ ? add(y, tape.parameter(*bias_)) : y;
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    f(join_name(prefix, "weight"), weight_, TensorRole::kParameter);
    if (bias_) f(join_name(prefix, "bias"), *bias_, TensorRole::kParameter);
  }

  std::size_t in_channels() const { return weight_.dim(1) * options_.groups; }
  std::size_t out_channels() const { return weight_.dim(0); }
  std::size_t kernel() const { return weight_.dim(2); }
  const ConvOptions& options() const { return options_; }
  Tensor<T>& weight() { return weight_; }
  const Tensor<T>& weight() const { return weight_; }

 private:
  ConvOptions options_;
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
};

template <typename T>
class ConvTranspose1dLayer {
 public:
  ConvTranspose1dLayer() = default;
  ConvTranspose1dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                       std::size_t stride, bool bias, Rng& rng)
      : stride_(stride) {
    weight_ = detail::kaiming_uniform<T>({in_channels, out_channels, kernel}, out_channels * kernel, rng);
    if (bias) bias_ = detail::trainable<T>({out_channels, 1}, T(0));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> y = conv1d_transpose(x, tape.parameter(weight_), stride_);
    return bias_ ? add(y, tape.parameter(*bias_)) : y;
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    f(join_name(prefix, "weight"), weight_, TensorRole::kParameter);
    if (bias_) f(join_name(prefix, "bias"), *bias_, TensorRole::kParameter);
  }

  std::size_t kernel() const { return weight_.dim(2); }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t stride_ = 1;
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
};

// gLN: gain * (x - mean) / sqrt(var + eps) + bias, with scalar mean/var taken
// over every channel and time step.
template <typename T>
class GlobalLayerNorm {
 public:
  GlobalLayerNorm() = default;
  explicit GlobalLayerNorm(std::size_t channels, double eps = 1e-8)
      : eps_(eps),
        gain_(detail::trainable<T>({channels, 1}, T(1))),
        bias_(detail::trainable<T>({channels, 1}, T(0))) {}

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    if (x.rows() != gain_.dim(0)) throw ShapeError("GlobalLayerNorm: channel count mismatch");
    return add(mul(normalize_global(x, eps_), tape.parameter(gain_)), tape.parameter(bias_));
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    f(join_name(prefix, "gain"), gain_, TensorRole::kParameter);
    f(join_name(prefix, "bias"), bias_, TensorRole::kParameter);
  }

  Tensor<T>& gain() { return gain_; }
  Tensor<T>& bias() { return bias_; }
  double eps() const { return eps_; }

 private:
  double eps_ = 1e-8;
  Tensor<T> gain_;
  Tensor<T> bias_;
};

// Batch normalization for [C x T] inputs of a single utterance: training mode
// normalizes each channel over time and folds the statistics into the running
// estimates; eval mode uses the running estimates only.
template <typename T>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t channels, double momentum = 0.1, double eps = 1e-8)
      : momentum_(momentum),
        eps_(eps),
        gain_(detail::trainable<T>({channels, 1}, T(1))),
        bias_(detail::trainable<T>({channels, 1}, T(0))),
        running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)) {}

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    if (x.rows() != gain_.dim(0)) throw ShapeError("BatchNorm1d: channel count mismatch");
    Var<T> y;
    if (training_) {
      const std::size_t n = x.cols();
      if (n < 2) throw ShapeError("BatchNorm1d: training mode needs at least 2 time steps");
      std::vector<double> mean, var;
      y = normalize_channels(x, eps_, &mean, &var);
      const double unbias = double(n) / double(n - 1);
      for (std::size_t c = 0; c < mean.size(); ++c) {
        running_mean_[c] = T((1.0 - momentum_) * running_mean_[c] + momentum_ * mean[c]);
        running_var_[c] = T((1.0 - momentum_) * running_var_[c] + momentum_ * var[c] * unbias);
      }
    } else {
      y = normalize_channels_fixed<T>(x, running_mean_.values(), running_var_.values(), eps_);
    }
    return add(mul(y, tape.parameter(gain_)), tape.parameter(bias_));
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    f(join_name(prefix, "gain"), gain_, TensorRole::kParameter);
    f(join_name(prefix, "bias"), bias_, TensorRole::kParameter);
    f(join_name(prefix, "running_mean"), running_mean_, TensorRole::kBuffer);
    f(join_name(prefix, "running_var"), running_var_, TensorRole::kBuffer);
  }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  double momentum() const { return momentum_; }

 private:
  bool training_ = true;
  double momentum_ = 0.1;
  double eps_ = 1e-8;
  Tensor<T> gain_;
  Tensor<T> bias_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

// Single learned negative slope, initialized to 0.25.
template <typename T>
class PReLU {
 public:
  PReLU() : slope_(detail::trainable<T>({1, 1}, T(0.25))) {}

  Var<T> forward(Tape<T>& tape, Var<T> x) { return prelu(x, tape.parameter(slope_)); }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    f(join_name(prefix, "slope"), slope_, TensorRole::kParameter);
  }

  Tensor<T>& slope() { return slope_; }

 private:
  Tensor<T> slope_;
};

// y = W x + b for a column vector x [D x 1].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, bool bias, Rng& rng)
      : weight_(detail::kaiming_uniform<T>({out_features, in_features}, in_features, rng)) {
    if (bias) bias_ = detail::trainable<T>({out_features, 1}, T(0));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> y = matmul(tape.parameter(weight_), x);
    return bias_ ? add(y, tape.parameter(*bias_)) : y;
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    f(join_name(prefix, "weight"), weight_, TensorRole::kParameter);
    if (bias_) f(join_name(prefix, "bias"), *bias_, TensorRole::kParameter);
  }

  std::size_t out_features() const { return weight_.dim(0); }
  Tensor<T>& weight() { return weight_; }

 private:
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
};

// Ordered (name, tensor) list of anything exposing visit().
template <typename T, typename Layer>
std::vector<NamedTensor<T>> named_tensors(Layer& layer, TensorRole role, const std::string& prefix = "") {
  std::vector<NamedTensor<T>> out;
  layer.visit(prefix, [&](const std::string& name, Tensor<T>& t, TensorRole r) {
    if (r == role) out.push_back({name, &t});
  });
  return out;
}

template <typename T, typename Layer>
std::vector<NamedTensor<T>> named_parameters(Layer& layer, const std::string& prefix = "") {
  return named_tensors<T>(layer, TensorRole::kParameter, prefix);
}

}  // namespace spexplus
