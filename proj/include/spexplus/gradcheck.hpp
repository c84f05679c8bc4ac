// Finite-difference verification of every differentiable op and layer.
//
// Each case builds the same problem in float and double from a seed (values
// are rounded to float so both precisions start from identical points). The
// reference gradient is a central difference in double; float and double
// autodiff are compared against it with a norm-wise relative error.
// Whole-model cases compare directional derivatives instead.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "spexplus/layers.hpp"
#include "spexplus/loss.hpp"
#include "spexplus/model.hpp"
#include "spexplus/ops.hpp"
#include "spexplus/random.hpp"
#include "spexplus/tape.hpp"

namespace spexplus {

inline constexpr double kGradTol32 = 1e-3;
inline constexpr double kGradTol64 = 1e-5;

template <typename T>
struct GradProblem {
  std::vector<Tensor<T>*> leaves;         // differentiated tensors, read via tape.parameter
  std::function<Var<T>(Tape<T>&)> loss;   // records a scalar loss
  std::shared_ptr<void> storage;          // owns the leaves and any layers
  bool directional = false;               // check d/dh L(theta + h d) only
};

struct GradCase {
  std::string name;
  std::string scope;  // "op", "layer" or "model"
  std::function<GradProblem<float>(std::uint64_t)> f32;
  std::function<GradProblem<double>(std::uint64_t)> f64;
};

struct GradCheckResult {
  std::string name;
  std::string scope;
  std::size_t instances = 0;  // accepted instances
  std::size_t rejected = 0;   // redrawn because the point sits at a kink
  double max_err32 = 0;
  double max_err64 = 0;
  bool passed = true;
  double seconds = 0;
};

namespace gc {

// Uniform values in [lo, hi], rounded to float.
template <typename T>
Tensor<T> uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(float(rng.uniform(lo, hi)));
  t.set_requires_grad(true);
  return t;
}

// Uniform magnitudes in [margin, 1] with random sign, keeping clear of kinks at 0.
template <typename T>
Tensor<T> away_from_zero(Rng& rng, Shape shape, double margin = 0.05) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double m = rng.uniform(margin, 1.0);
    t[i] = T(float(rng.uniform() < 0.5 ? -m : m));
  }
  t.set_requires_grad(true);
  return t;
}

// Distinct values separated by at least `gap`, shuffled (no max-pool ties).
template <typename T>
Tensor<T> distinct(Rng& rng, Shape shape, double gap = 0.05) {
  Tensor<T> t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(float(double(order[i]) * gap - 0.5 * gap * t.size()));
  t.set_requires_grad(true);
  return t;
}

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

// Contracts y with a fixed random tensor so every output element matters.
template <typename T>
Var<T> project(Var<T> y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> w(y.value().shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = T(float(rng.uniform(-1.0, 1.0)));
  return dot_const(y, w);
}

// Storage for op cases: a list of input tensors.
template <typename T>
struct Inputs {
  std::vector<Tensor<T>> x;
};

template <typename T, typename Build>
GradProblem<T> op_problem(std::vector<Tensor<T>> inputs, std::uint64_t proj_seed, Build build) {
  auto store = std::make_shared<Inputs<T>>();
  store->x = std::move(inputs);
  GradProblem<T> p;
  for (auto& t : store->x) p.leaves.push_back(&t);
  Inputs<T>* raw = store.get();
  p.loss = [raw, proj_seed, build](Tape<T>& tape) {
    std::vector<Var<T>> v;
    for (auto& t : raw->x) v.push_back(tape.parameter(t));
    return project(build(tape, v), proj_seed);
  };
  p.storage = store;
  return p;
}

// Rounds every parameter of a layer to float and optionally re-draws it.
template <typename T, typename Layer>
std::vector<Tensor<T>*> layer_leaves(Layer& layer, Rng* redraw = nullptr, double lo = -1.0, double hi = 1.0) {
  std::vector<Tensor<T>*> out;
  layer.visit("", [&](const std::string&, Tensor<T>& t, TensorRole role) {
    if (role != TensorRole::kParameter) return;
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = redraw ? T(float(redraw->uniform(lo, hi))) : T(float(t[i]));
    out.push_back(&t);
  });
  return out;
}

template <typename Make>
GradCase make_case(std::string name, std::string scope, Make make) {
  GradCase c;
  c.name = std::move(name);
  c.scope = std::move(scope);
  c.f32 = [make](std::uint64_t s) { return make(std::type_identity<float>{}, s); };
  c.f64 = [make](std::uint64_t s) { return make(std::type_identity<double>{}, s); };
  return c;
}

template <typename T>
double loss_value(GradProblem<T>& p) {
  Tape<T> tape;
  return double(p.loss(tape).value()[0]);
}

inline double norm(const std::vector<double>& a) {
  double s = 0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return norm(d) / (std::max(norm(a), norm(b)) + 1e-10);
}

template <typename T>
std::vector<double> autodiff_gradient(GradProblem<T>& p) {
  for (auto* t : p.leaves) t->zero_grad();
  Tape<T> tape;
  tape.backward(p.loss(tape));
  std::vector<double> g;
  for (auto* t : p.leaves)
    for (T v : std::as_const(*t).grad()) g.push_back(double(v));
  return g;
}

// Five-point central differences with step h = rel_step * max(1, |x|).
inline std::vector<double> numeric_gradient(GradProblem<double>& p, double rel_step = 1e-3) {
  std::vector<double> g;
  for (auto* t : p.leaves)
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double x = (*t)[i];
      const double h = rel_step * std::max(1.0, std::abs(x));
      auto at = [&](double dx) {
        (*t)[i] = x + dx;
        return loss_value(p);
      };
      const double d = 8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h));
      (*t)[i] = x;
      g.push_back(d / (12.0 * h));
    }
  return g;
}

inline std::vector<double> random_direction(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> d(n);
  for (auto& x : d) x = rng.normal();
  const double s = norm(d);
  for (auto& x : d) x /= s;
  return d;
}

template <typename T>
std::size_t leaf_count(const GradProblem<T>& p) {
  std::size_t n = 0;
  for (auto* t : p.leaves) n += t->size();
  return n;
}

// d/dh L(theta + h d) by a central difference in double.
inline double numeric_directional(GradProblem<double>& p, const std::vector<double>& d, double h) {
  std::vector<double> base;
  for (auto* t : p.leaves)
    for (std::size_t i = 0; i < t->size(); ++i) base.push_back((*t)[i]);
  auto set = [&](double s) {
    std::size_t k = 0;
    for (auto* t : p.leaves)
      for (std::size_t i = 0; i < t->size(); ++i, ++k) (*t)[i] = base[k] + s * d[k];
  };
  set(h);
  const double fp = loss_value(p);
  set(-h);
  const double fm = loss_value(p);
  set(0);
  return (fp - fm) / (2 * h);
}

// FNV-1a, so per-case seeds do not depend on the standard library.
inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace gc

// Runs `instances` seeded instances of one case. An instance whose finite
// differences at steps h and h/2 disagree sits next to a kink (ReLU, PReLU,
// max-pool switch) and is redrawn; the count is reported as `rejected`.
inline GradCheckResult run_case(const GradCase& c, std::size_t instances, std::uint64_t seed) {
  GradCheckResult r{c.name, c.scope, instances};
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t accepted = 0;
  for (std::size_t k = 0; accepted < instances && k < 10 * instances; ++k) {
    const std::uint64_t s = derive_seed(seed, k);
    auto p32 = c.f32(s);
    auto p64 = c.f64(s);
    double e32, e64;
    if (p64.directional) {
      const auto a32 = gc::autodiff_gradient(p32);
      const auto a64 = gc::autodiff_gradient(p64);
      const auto d = gc::random_direction(a64.size(), derive_seed(s, 77));
      const double fd = gc::numeric_directional(p64, d, 1e-5);
      const double fd2 = gc::numeric_directional(p64, d, 5e-6);
      const double denom = std::max({std::abs(fd), std::abs(fd2), 1e-10});
      if (std::abs(fd - fd2) / denom > 1e-7) {
        ++r.rejected;
        continue;
      }
      e32 = std::abs(gc::dot(a32, d) - fd) / denom;
      e64 = std::abs(gc::dot(a64, d) - fd) / denom;
    } else {
      const auto fd = gc::numeric_gradient(p64, 1e-3);
      if (gc::rel_error(fd, gc::numeric_gradient(p64, 5e-4)) > 1e-7) {
        ++r.rejected;
        continue;
      }
      e32 = gc::rel_error(gc::autodiff_gradient(p32), fd);
      e64 = gc::rel_error(gc::autodiff_gradient(p64), fd);
    }
    ++accepted;
    r.max_err32 = std::max(r.max_err32, e32);
    r.max_err64 = std::max(r.max_err64, e64);
  }
  r.instances = accepted;
  r.passed = accepted >= instances && r.max_err32 < kGradTol32 && r.max_err64 < kGradTol64;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Case catalogue

inline std::vector<GradCase> op_cases() {
  using gc::between;
  std::vector<GradCase> cs;
  auto binary = [](std::string name, auto fn, bool broadcast) {
    return gc::make_case(name, "op", [fn, broadcast](auto tag, std::uint64_t s) {
      using T = typename decltype(tag)::type;
      Rng rng(s);
      const std::size_t c = between(rng, 1, 5), t = between(rng, 1, 8);
      std::vector<Tensor<T>> in{gc::uniform<T>(rng, {c, t}), gc::uniform<T>(rng, {c, broadcast ? 1 : t})};
      return gc::op_problem<T>(std::move(in), s + 1, [fn](Tape<T>&, std::vector<Var<T>>& v) { return fn(v[0], v[1]); });
    });
  };
  cs.push_back(binary("add", [](auto a, auto b) { return add(a, b); }, false));
  cs.push_back(binary("add_broadcast", [](auto a, auto b) { return add(a, b); }, true));
  cs.push_back(binary("sub", [](auto a, auto b) { return sub(a, b); }, false));
  cs.push_back(binary("mul", [](auto a, auto b) { return mul(a, b); }, false));
  cs.push_back(binary("mul_broadcast", [](auto a, auto b) { return mul(a, b); }, true));

  auto unary = [](std::string name, auto fn, int kind) {
    return gc::make_case(name, "op", [fn, kind](auto tag, std::uint64_t s) {
      using T = typename decltype(tag)::type;
      Rng rng(s);
      const std::size_t c = between(rng, 1, 5), t = between(rng, 1, 10);
      std::vector<Tensor<T>> in{kind == 1 ? gc::away_from_zero<T>(rng, {c, t}) : gc::uniform<T>(rng, {c, t})};
      return gc::op_problem<T>(std::move(in), s + 1, [fn](Tape<T>&, std::vector<Var<T>>& v) { return fn(v[0]); });
    });
  };
  cs.push_back(unary("scale", [](auto a) { return scale(a, std::remove_cvref_t<decltype(a.value()[0])>(-1.75)); }, 0));
  cs.push_back(unary("sum", [](auto a) { return sum(a); }, 0));
  cs.push_back(unary("relu", [](auto a) { return relu(a); }, 1));
  cs.push_back(unary("mean_time", [](auto a) { return mean_time(a); }, 0));
  cs.push_back(unary("repeat_time", [](auto a) { return repeat_time(mean_time(a), 5); }, 0));
  cs.push_back(unary("softmax", [](auto a) { return softmax(mean_time(a)); }, 0));

  cs.push_back(gc::make_case("prelu", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 5), t = between(rng, 1, 8);
    const bool per_channel = rng.uniform() < 0.5;
    std::vector<Tensor<T>> in{gc::away_from_zero<T>(rng, {c, t}),
                              gc::uniform<T>(rng, {per_channel ? c : 1, 1}, 0.05, 0.6)};
    return gc::op_problem<T>(std::move(in), s + 1, [](Tape<T>&, std::vector<Var<T>>& v) { return prelu(v[0], v[1]); });
  }));

  cs.push_back(gc::make_case("matmul", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t m = between(rng, 1, 5), k = between(rng, 1, 5), n = between(rng, 1, 5);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {m, k}), gc::uniform<T>(rng, {k, n})};
    return gc::op_problem<T>(std::move(in), s + 1, [](Tape<T>&, std::vector<Var<T>>& v) { return matmul(v[0], v[1]); });
  }));

  // kind 0: general (groups 1, random stride/dilation/padding), 1: grouped, 2: pointwise.
  auto conv = [](std::string name, int kind) {
    return gc::make_case(name, "op", [kind](auto tag, std::uint64_t s) {
      using T = typename decltype(tag)::type;
      Rng rng(s);
      ConvOptions o;
      std::size_t cin = between(rng, 1, 3), cout = between(rng, 1, 3), kw = between(rng, 1, 4);
      if (kind == 1) {
        o.groups = between(rng, 1, 3);
        cin = o.groups * between(rng, 1, 2);
        cout = o.groups * between(rng, 1, 2);
      }
      if (kind != 2) {
        o.stride = between(rng, 1, 3);
        o.dilation = between(rng, 1, 3);
        o.pad_left = between(rng, 0, 2);
        o.pad_right = between(rng, 0, 2);
      } else {
        kw = 1;
      }
      const std::size_t span = (kw - 1) * o.dilation + 1;
      const std::size_t t = std::max<std::size_t>(span, 1) + between(rng, 0, 6);
      std::vector<Tensor<T>> in{gc::uniform<T>(rng, {cin, t}), gc::uniform<T>(rng, {cout, cin / o.groups, kw})};
      return gc::op_problem<T>(std::move(in), s + 1,
                               [o](Tape<T>&, std::vector<Var<T>>& v) { return conv1d(v[0], v[1], o); });
    });
  };
  cs.push_back(conv("conv1d", 0));
  cs.push_back(conv("conv1d_grouped", 1));
  cs.push_back(conv("conv1d_pointwise", 2));

  cs.push_back(gc::make_case("conv1d_transpose", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t cin = between(rng, 1, 4), cout = between(rng, 1, 2), kw = between(rng, 1, 5);
    const std::size_t k = between(rng, 1, 6), stride = between(rng, 1, 4);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {cin, k}), gc::uniform<T>(rng, {cin, cout, kw})};
    return gc::op_problem<T>(std::move(in), s + 1,
                             [stride](Tape<T>&, std::vector<Var<T>>& v) { return conv1d_transpose(v[0], v[1], stride); });
  }));

  cs.push_back(gc::make_case("max_pool1d", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 4), t = between(rng, 3, 12);
    std::vector<Tensor<T>> in{gc::distinct<T>(rng, {c, t})};
    return gc::op_problem<T>(std::move(in), s + 1, [](Tape<T>&, std::vector<Var<T>>& v) { return max_pool1d(v[0], 3, 3); });
  }));

  cs.push_back(gc::make_case("concat_channels", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t t = between(rng, 1, 6);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {between(rng, 1, 3), t}), gc::uniform<T>(rng, {between(rng, 1, 3), t}),
                              gc::uniform<T>(rng, {between(rng, 1, 3), t})};
    return gc::op_problem<T>(std::move(in), s + 1,
                             [](Tape<T>&, std::vector<Var<T>>& v) { return concat_channels<T>({v[0], v[1], v[2]}); });
  }));

  cs.push_back(gc::make_case("slice_pad_fit_time", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 3), t = between(rng, 2, 10);
    const std::size_t start = rng.index(t), len = between(rng, 1, t - start);
    const std::size_t pl = between(rng, 0, 3), pr = between(rng, 0, 3), fit = between(rng, 1, 12);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {c, t})};
    return gc::op_problem<T>(std::move(in), s + 1, [=](Tape<T>&, std::vector<Var<T>>& v) {
      return fit_time(pad_time(slice_time(v[0], start, len), pl, pr), fit);
    });
  }));

  cs.push_back(gc::make_case("normalize_global", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 4), t = between(rng, 3, 8);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {c, t})};
    return gc::op_problem<T>(std::move(in), s + 1, [](Tape<T>&, std::vector<Var<T>>& v) { return normalize_global(v[0], 1e-8); });
  }));

  cs.push_back(gc::make_case("normalize_channels", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 4), t = between(rng, 3, 8);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {c, t})};
    return gc::op_problem<T>(std::move(in), s + 1, [](Tape<T>&, std::vector<Var<T>>& v) { return normalize_channels(v[0], 1e-8); });
  }));

  cs.push_back(gc::make_case("si_sdr", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t t = between(rng, 4, 48);
    auto ref = gc::uniform<T>(rng, {1, t});
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {1, t})};
    for (std::size_t i = 0; i < t; ++i) in[0][i] = T(float(0.7 * double(ref[i]) + 0.5 * double(in[0][i])));
    return gc::op_problem<T>(std::move(in), s + 1, [ref](Tape<T>&, std::vector<Var<T>>& v) { return si_sdr(v[0], ref); });
  }));

  cs.push_back(gc::make_case("ce_loss", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t n = between(rng, 2, 10);
    const std::size_t label = rng.index(n);
    std::vector<Tensor<T>> in{gc::uniform<T>(rng, {n, 1}, -3.0, 3.0)};
    return gc::op_problem<T>(std::move(in), s + 1, [label](Tape<T>&, std::vector<Var<T>>& v) { return ce_loss(v[0], label); });
  }));

  cs.push_back(gc::make_case("total_loss", "op", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t t = between(rng, 8, 32), n = between(rng, 2, 6);
    auto target = gc::uniform<T>(rng, {1, t});
    std::vector<Tensor<T>> in;
    for (int k = 0; k < 3; ++k) {
      auto e = gc::uniform<T>(rng, {1, t});
      for (std::size_t i = 0; i < t; ++i) e[i] = T(float(0.8 * double(target[i]) + 0.4 * double(e[i])));
      in.push_back(e);
    }
    in.push_back(gc::uniform<T>(rng, {n, 1}, -2.0, 2.0));
    const std::size_t label = rng.index(n);
    LossWeights w{rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.3), rng.uniform(0.0, 1.0)};
    return gc::op_problem<T>(std::move(in), s + 1, [=](Tape<T>&, std::vector<Var<T>>& v) {
      return total_loss(v[0], v[1], v[2], target, v[3], label, w).total;
    });
  }));
  return cs;
}

namespace gc {

// Storage for layer cases: the layer plus its input.
template <typename T, typename Layer>
struct LayerStore {
  Layer layer;
  Tensor<T> x;
  std::optional<Tensor<T>> extra;
};

template <typename T, typename Layer, typename Fwd>
GradProblem<T> layer_problem(std::shared_ptr<LayerStore<T, Layer>> st, Rng& rng, bool redraw, std::uint64_t proj_seed,
                             Fwd fwd, double lo = -1.0, double hi = 1.0) {
  GradProblem<T> p;
  p.leaves = layer_leaves<T>(st->layer, redraw ? &rng : nullptr, lo, hi);
  st->x.set_requires_grad(true);
  p.leaves.push_back(&st->x);
  if (st->extra) {
    st->extra->set_requires_grad(true);
    p.leaves.push_back(&*st->extra);
  }
  auto* raw = st.get();
  p.loss = [raw, proj_seed, fwd](Tape<T>& tape) {
    auto x = tape.parameter(raw->x);
    std::optional<Var<T>> e;
    if (raw->extra) e = tape.parameter(*raw->extra);
    return project(fwd(raw->layer, tape, x, e), proj_seed);
  };
  p.storage = st;
  return p;
}

}  // namespace gc

inline std::vector<GradCase> layer_cases() {
  using gc::between;
  std::vector<GradCase> cs;

  cs.push_back(gc::make_case("Conv1dLayer", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    ConvOptions o;
    o.stride = between(rng, 1, 3);
    o.dilation = between(rng, 1, 2);
    o.pad_left = between(rng, 0, 2);
    o.pad_right = between(rng, 0, 2);
    const std::size_t cin = between(rng, 1, 3), cout = between(rng, 1, 3), kw = between(rng, 1, 3);
    auto st = std::make_shared<gc::LayerStore<T, Conv1dLayer<T>>>();
    st->layer = Conv1dLayer<T>(cin, cout, kw, o, true, rng);
    st->x = gc::uniform<T>(rng, {cin, (kw - 1) * o.dilation + 1 + between(rng, 0, 5)});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("ConvTranspose1dLayer", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t cin = between(rng, 1, 3), kw = between(rng, 1, 5), stride = between(rng, 1, 3);
    auto st = std::make_shared<gc::LayerStore<T, ConvTranspose1dLayer<T>>>();
    st->layer = ConvTranspose1dLayer<T>(cin, 1, kw, stride, true, rng);
    st->x = gc::uniform<T>(rng, {cin, between(rng, 1, 6)});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("GlobalLayerNorm", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 4);
    auto st = std::make_shared<gc::LayerStore<T, GlobalLayerNorm<T>>>();
    st->layer = GlobalLayerNorm<T>(c);
    st->x = gc::uniform<T>(rng, {c, between(rng, 2, 8)});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("BatchNorm1d", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 4);
    auto st = std::make_shared<gc::LayerStore<T, BatchNorm1d<T>>>();
    st->layer = BatchNorm1d<T>(c);
    st->layer.set_training(true);
    st->x = gc::uniform<T>(rng, {c, between(rng, 2, 8)});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("BatchNorm1d_eval", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 4);
    auto st = std::make_shared<gc::LayerStore<T, BatchNorm1d<T>>>();
    st->layer = BatchNorm1d<T>(c);
    st->layer.visit("", [&](const std::string&, Tensor<T>& t, TensorRole r) {
      if (r == TensorRole::kBuffer)
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = T(float(rng.uniform(0.2, 1.5)));
    });
    st->layer.set_training(false);
    st->x = gc::uniform<T>(rng, {c, between(rng, 1, 8)});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("PReLU", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    auto st = std::make_shared<gc::LayerStore<T, PReLU<T>>>();
    st->x = gc::away_from_zero<T>(rng, {between(rng, 1, 4), between(rng, 1, 8)});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); }, 0.05, 0.6);
  }));

  cs.push_back(gc::make_case("Linear", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t in = between(rng, 1, 6), out = between(rng, 1, 6);
    auto st = std::make_shared<gc::LayerStore<T, Linear<T>>>();
    st->layer = Linear<T>(in, out, true, rng);
    st->x = gc::uniform<T>(rng, {in, 1});
    return gc::layer_problem<T>(st, rng, true, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("TcnBlock", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t c = between(rng, 1, 3), p = between(rng, 2, 4), d = rng.uniform() < 0.5 ? 0 : between(rng, 1, 2);
    const std::size_t dil = std::size_t(1) << rng.index(3);
    auto st = std::make_shared<gc::LayerStore<T, TcnBlock<T>>>();
    st->layer = TcnBlock<T>(c, p, d, 3, dil, true, rng);
    const std::size_t t = between(rng, 2, 8);
    st->x = gc::uniform<T>(rng, {c, t});
    if (d > 0) st->extra = gc::uniform<T>(rng, {d, 1});
    return gc::layer_problem<T>(st, rng, false, s + 1, [](auto& l, Tape<T>& tp, Var<T> x, std::optional<Var<T>> e) { return l.forward(tp, x, e); });
  }));

  cs.push_back(gc::make_case("ResNetBlock", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    const std::size_t in = between(rng, 1, 3), out = rng.uniform() < 0.5 ? in : between(rng, 1, 4);
    auto st = std::make_shared<gc::LayerStore<T, ResNetBlock<T>>>();
    st->layer = ResNetBlock<T>(in, out, rng);
    st->layer.set_training(true);
    st->x = gc::uniform<T>(rng, {in, between(rng, 3, 9)});
    return gc::layer_problem<T>(st, rng, false, s + 1,
                                [](auto& l, Tape<T>& t, Var<T> x, auto) { return l.forward(t, x); });
  }));

  cs.push_back(gc::make_case("SpeechEncoder", "layer", [](auto tag, std::uint64_t s) {
    using T = typename decltype(tag)::type;
    Rng rng(s);
    SpexPlusConfig c;
    c.L1 = 2 * between(rng, 1, 2);
    c.L2 = c.L1 + between(rng, 1, 3);
    c.L3 = c.L2 + between(rng, 1, 3);
    c.N = between(rng, 1, 3);
    auto st = std::make_shared<gc::LayerStore<T, SpeechEncoder<T>>>();
    st->layer = SpeechEncoder<T>(c, rng);
    st->x = gc::uniform<T>(rng, {1, c.L3 + between(rng, 0, 8)});
    return gc::layer_problem<T>(st, rng, false, s + 1, [](auto& l, Tape<T>& t, Var<T> x, auto) {
      auto y = l.forward(t, x);
      return concat_channels<T>({y.scales[0], y.scales[1], y.scales[2]});
    });
  }));
  return cs;
}

// Smallest configuration with every architectural feature present.
inline SpexPlusConfig gradcheck_model_config(std::uint64_t seed) {
  SpexPlusConfig c;
  c.L1 = 4;
  c.L2 = 8;
  c.L3 = 12;
  c.N = 4;
  c.B = 2;
  c.R = 2;
  c.O = 4;
  c.P = 6;
  c.D = 3;
  c.N_R = 2;
  c.N_s = 3;
  c.seed = seed;
  return c;
}

inline std::vector<GradCase> model_cases() {
  std::vector<GradCase> cs;
  auto make = [](bool tied) {
    return [tied](auto tag, std::uint64_t s) {
      using T = typename decltype(tag)::type;
      Rng rng(s);
      auto cfg = gradcheck_model_config(s);
      cfg.tied = tied;
      struct Store {
        SpexPlusModel<T> model;
        Tensor<T> mix, ref, target;
      };
      auto st = std::make_shared<Store>(Store{SpexPlusModel<T>(cfg), {}, {}, {}});
      GradProblem<T> p;
      p.directional = true;
      p.leaves = gc::layer_leaves<T>(st->model);
      const std::size_t t = 60 + gc::between(rng, 0, 20);
      st->target = gc::uniform<T>(rng, {1, t}, -0.5, 0.5);
      st->mix = gc::uniform<T>(rng, {1, t}, -0.5, 0.5);
      for (std::size_t i = 0; i < t; ++i) st->mix[i] = T(float(double(st->mix[i]) + double(st->target[i])));
      st->ref = gc::uniform<T>(rng, {1, 50 + gc::between(rng, 0, 20)}, -0.5, 0.5);
      st->mix.set_requires_grad(true);
      p.leaves.push_back(&st->mix);
      const std::size_t label = rng.index(cfg.N_s);
      auto* raw = st.get();
      p.loss = [raw, label](Tape<T>& tape) {
        auto out = raw->model.forward(tape, tape.parameter(raw->mix), tape.constant(raw->ref));
        return total_loss(out.signals[0], out.signals[1], out.signals[2], raw->target, out.speaker.logits, label,
                          LossWeights{})
            .total;
      };
      p.storage = st;
      return p;
    };
  };
  cs.push_back(gc::make_case("SpexPlusModel_tied", "model", make(true)));
  cs.push_back(gc::make_case("SpexPlusModel_untied", "model", make(false)));
  return cs;
}

// scope: "all", "op", "layer" or "model".
inline std::vector<GradCase> gradcheck_cases(const std::string& scope) {
  std::vector<GradCase> out;
  auto take = [&](std::vector<GradCase> v) {
    for (auto& c : v) out.push_back(std::move(c));
  };
  if (scope == "all" || scope == "op") take(op_cases());
  if (scope == "all" || scope == "layer") take(layer_cases());
  if (scope == "all" || scope == "model") take(model_cases());
  if (out.empty()) throw std::invalid_argument("gradcheck scope must be all, op, layer or model, got '" + scope + "'");
  return out;
}

inline std::vector<GradCheckResult> run_gradcheck(const std::string& scope, std::size_t instances = 20,
                                                  std::uint64_t seed = 0) {
  std::vector<GradCheckResult> out;
  for (const auto& c : gradcheck_cases(scope)) out.push_back(run_case(c, instances, derive_seed(seed, gc::name_hash(c.name))));
  return out;
}

}  // namespace spexplus
