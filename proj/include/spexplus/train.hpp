// Adam, gradient clipping, the plateau learning-rate schedule, early stopping,
// checkpointing and the epoch loop.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spexplus/checkpoint.hpp"
#include "spexplus/data.hpp"
#include "spexplus/loss.hpp"
#include "spexplus/model.hpp"
#include "spexplus/random.hpp"

namespace spexplus {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"alpha", w.alpha}, {"beta", w.beta}, {"gamma", w.gamma}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.alpha = j.value("alpha", d.alpha);
  w.beta = j.value("beta", d.beta);
  w.gamma = j.value("gamma", d.gamma);
}

struct TrainConfig {
  double lr_init = 1e-3;
  double lr_decay = 0.5;
  std::size_t patience_decay = 2;
  std::size_t patience_stop = 6;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::string val_metric = "loss";  // "loss" (lower is better) or "accuracy"
  double clip_norm = 5.0;           // <= 0 disables clipping
  double segment_seconds = 4.0;
  std::size_t max_steps = 0;        // 0 = no cap

  bool higher_is_better() const { return val_metric == "accuracy"; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("TrainConfig: " + m); };
    if (!(lr_init > 0)) fail("lr_init must be > 0");
    if (!(lr_decay > 0 && lr_decay < 1)) fail("lr_decay must lie in (0, 1)");
    if (patience_decay < 1) fail("patience_decay must be >= 1");
    if (patience_stop < patience_decay) fail("patience_stop must be >= patience_decay");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (val_metric != "loss" && val_metric != "accuracy")
      fail("val_metric must be 'loss' or 'accuracy', got '" + val_metric + "'");
    if (!(segment_seconds > 0)) fail("segment_seconds must be > 0");
    try {
      weights.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_init", c.lr_init},
                     {"lr_decay", c.lr_decay},
                     {"patience_decay", c.patience_decay},
                     {"patience_stop", c.patience_stop},
                     {"max_epochs", c.max_epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"weights", c.weights},
                     {"val_metric", c.val_metric},
                     {"clip_norm", c.clip_norm},
                     {"segment_seconds", c.segment_seconds},
                     {"max_steps", c.max_steps}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.lr_init = j.value("lr_init", d.lr_init);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.patience_decay = j.value("patience_decay", d.patience_decay);
  c.patience_stop = j.value("patience_stop", d.patience_stop);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.weights = j.value("weights", d.weights);
  c.val_metric = j.value("val_metric", d.val_metric);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.segment_seconds = j.value("segment_seconds", d.segment_seconds);
  c.max_steps = j.value("max_steps", d.max_steps);
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<T>> m, v;  // aligned with the parameter list
};

// One bias-corrected Adam update. Every parameter needs a gradient buffer
// (zero_grad() before backward provides one).
template <typename T>
void adam_step(std::span<const NamedTensor<T>> params, AdamState<T>& s, double lr) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor->size(), T(0));
      s.v.emplace_back(p.tensor->size(), T(0));
    }
  }
  if (s.m.size() != params.size())
    throw TrainingError("adam_step: optimizer holds " + std::to_string(s.m.size()) + " moment buffers for " +
                        std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (!p.tensor->has_grad()) throw TrainingError("adam_step: parameter " + p.name + " has no gradient");
    if (s.m[k].size() != p.tensor->size())
      throw TrainingError("adam_step: moment buffer size mismatch for " + p.name);
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, double(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = *params[k].tensor;
    const auto g = t.grad();
    auto& m = s.m[k];
    auto& v = s.v[k];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double gi = g[i];
      const double mi = s.beta1 * double(m[i]) + (1.0 - s.beta1) * gi;
      const double vi = s.beta2 * double(v[i]) + (1.0 - s.beta2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      t[i] = T(double(t[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + s.eps));
    }
  }
}

template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& s, double lr) {
  adam_step(std::span<const NamedTensor<T>>(params), s, lr);
}

template <typename T>
double global_grad_norm(std::span<const NamedTensor<T>> params) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : std::as_const(*p.tensor).grad()) sq += double(g) * double(g);
  return std::sqrt(sq);
}

// Rescales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const NamedTensor<T>> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (const auto& p : params)
      for (T& g : p.tensor->grad()) g = T(double(g) * f);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule and early stopping

struct PlateauSchedule {
  double lr = 1e-3;
  double best = 0;
  std::size_t best_epoch = 0;
  std::size_t bad_decay = 0;  // non-improving epochs since the last decay or improvement
  std::size_t bad_stop = 0;   // non-improving epochs since the last improvement
  bool has_best = false;

  // Feeds one validation value and returns true if it improved on the best.
  bool observe(double value, std::size_t epoch, const TrainConfig& cfg) {
    const bool improved =
        !has_best || (cfg.higher_is_better() ? value > best : value < best);
    if (improved) {
      best = value;
      best_epoch = epoch;
      has_best = true;
      bad_decay = bad_stop = 0;
      return true;
    }
    ++bad_decay;
    ++bad_stop;
    if (bad_decay >= cfg.patience_decay) {
      lr *= cfg.lr_decay;
      bad_decay = 0;
    }
    return false;
  }
  bool should_stop(const TrainConfig& cfg) const { return bad_stop >= cfg.patience_stop; }
};

struct HistoryRow {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_metric = 0;
  double seconds = 0;  // audio seconds processed in the epoch
  friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

inline void to_json(nlohmann::json& j, const HistoryRow& r) {
  j = nlohmann::json{{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss},
                     {"val_metric", r.val_metric}, {"seconds", r.seconds}};
}
inline void from_json(const nlohmann::json& j, HistoryRow& r) {
  r.epoch = j.at("epoch").get<std::size_t>();
  r.lr = j.at("lr").get<double>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_metric = j.at("val_metric").get<double>();
  r.seconds = j.at("seconds").get<double>();
}

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string s = "epoch,lr,train_loss,val_metric,seconds\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6f,%.6f,%.2f\n", r.epoch, r.lr, r.train_loss, r.val_metric,
                  r.seconds);
    s += buf;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoint assembly

struct TrainingProgress {
  std::size_t epoch = 0;  // last completed epoch
  std::uint64_t step = 0;
  PlateauSchedule schedule;
  std::vector<HistoryRow> history;
  bool stopped = false;
};

inline nlohmann::json progress_json(const TrainingProgress& p) {
  return nlohmann::json{{"epoch", p.epoch},
                        {"step", p.step},
                        {"lr", p.schedule.lr},
                        {"best_value", p.schedule.best},
                        {"best_epoch", p.schedule.best_epoch},
                        {"bad_decay", p.schedule.bad_decay},
                        {"bad_stop", p.schedule.bad_stop},
                        {"has_best", p.schedule.has_best},
                        {"stopped", p.stopped},
                        {"history", p.history}};
}

inline TrainingProgress progress_from_json(const nlohmann::json& j) {
  TrainingProgress p;
  p.epoch = j.at("epoch").get<std::size_t>();
  p.step = j.at("step").get<std::uint64_t>();
  p.schedule.lr = j.at("lr").get<double>();
  p.schedule.best = j.at("best_value").get<double>();
  p.schedule.best_epoch = j.at("best_epoch").get<std::size_t>();
  p.schedule.bad_decay = j.at("bad_decay").get<std::size_t>();
  p.schedule.bad_stop = j.at("bad_stop").get<std::size_t>();
  p.schedule.has_best = j.at("has_best").get<bool>();
  p.stopped = j.value("stopped", false);
  p.history = j.at("history").get<std::vector<HistoryRow>>();
  return p;
}

template <typename T>
Checkpoint make_checkpoint(SpexPlusModel<T>& model, const AdamState<T>* adam = nullptr,
                           nlohmann::json extra_meta = nlohmann::json::object()) {
  Checkpoint c;
  c.meta = std::move(extra_meta);
  c.meta["model"] = model.config();
  c.tensors = snapshot_tensors<T>(model);
  if (adam != nullptr) {
    c.optimizer.step = adam->step;
    c.optimizer.beta1 = adam->beta1;
    c.optimizer.beta2 = adam->beta2;
    c.optimizer.eps = adam->eps;
    const auto params = model.parameters();
    if (!adam->m.empty()) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        TensorRecord m{params[k].name, params[k].tensor->shape(), {}};
        TensorRecord v = m;
        m.data.assign(adam->m[k].begin(), adam->m[k].end());
        v.data.assign(adam->v[k].begin(), adam->v[k].end());
        c.optimizer.m.push_back(std::move(m));
        c.optimizer.v.push_back(std::move(v));
      }
    }
  }
  return c;
}

inline SpexPlusConfig checkpoint_model_config(const Checkpoint& c) {
  if (!c.meta.contains("model")) throw CheckpointError("checkpoint metadata has no model config");
  return c.meta.at("model").get<SpexPlusConfig>();
}

// Restores optimizer moments in the model's parameter order.
template <typename T>
AdamState<T> restore_adam(SpexPlusModel<T>& model, const OptimizerRecord& r) {
  AdamState<T> s;
  s.step = r.step;
  s.beta1 = r.beta1;
  s.beta2 = r.beta2;
  s.eps = r.eps;
  if (r.m.empty()) return s;
  const auto params = model.parameters();
  if (r.m.size() != params.size())
    throw CheckpointError("optimizer state has " + std::to_string(r.m.size()) + " entries for " +
                          std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (r.m[k].name != params[k].name || r.m[k].shape != params[k].tensor->shape())
      throw CheckpointError("optimizer entry " + r.m[k].name + " does not match parameter " + params[k].name);
    s.m.emplace_back(r.m[k].data.begin(), r.m[k].data.end());
    s.v.emplace_back(r.v[k].data.begin(), r.v[k].data.end());
  }
  return s;
}

template <typename T = float>
SpexPlusModel<T> model_from_checkpoint(const Checkpoint& c) {
  SpexPlusModel<T> model(checkpoint_model_config(c));
  restore_tensors<T>(model, c.tensors);
  return model;
}

// ---------------------------------------------------------------------------
// Per-example forward/backward

template <typename T>
struct StepResult {
  double total = 0;
  double sisdr = 0;
  double ce = 0;
};

// Records the loss for one example, optionally backpropagating `scale * loss`
// into the parameter gradients.
template <typename T>
StepResult<T> example_loss(SpexPlusModel<T>& model, const MixtureExample& ex, const LossWeights& w,
                           bool backward, double scale = 1.0) {
  if (ex.speaker_label < 0 || std::size_t(ex.speaker_label) >= model.config().N_s)
    throw TrainingError(ex.id + ": speaker label " + std::to_string(ex.speaker_label) +
                        " outside the classifier's " + std::to_string(model.config().N_s) + " classes");
  Tape<T> tape;
  auto row = [](const AudioBuffer& a) {
    return Tensor<T>::row(std::vector<T>(a.samples.begin(), a.samples.end()));
  };
  const Tensor<T> target = row(ex.target);
  auto out = model.forward(tape, row(ex.mixture), row(ex.reference));
  auto loss = total_loss(out.signals[0], out.signals[1], out.signals[2], target, out.speaker.logits,
                         std::size_t(ex.speaker_label), w);
  StepResult<T> r{double(loss.total.value()[0]), double(loss.sisdr.value()[0]), double(loss.ce.value()[0])};
  if (backward && std::isfinite(r.total)) tape.backward(scale == 1.0 ? loss.total : spexplus::scale(loss.total, T(scale)));
  return r;
}

// One optimizer step over a batch: zero grads, accumulate mean-loss
// gradients, clip, Adam. Returns the mean total loss.
template <typename T>
double train_step(SpexPlusModel<T>& model, std::span<const MixtureExample> batch, const TrainConfig& cfg,
                  AdamState<T>& adam, double lr) {
  model.set_training(true);
  const auto params = model.parameters();
  for (const auto& p : params) p.tensor->zero_grad();
  double sum = 0;
  for (const auto& ex : batch) {
    const auto r = example_loss(model, ex, cfg.weights, true, 1.0 / double(batch.size()));
    if (!std::isfinite(r.total)) return r.total;
    sum += r.total;
  }
  clip_grad_norm(std::span<const NamedTensor<T>>(params), cfg.clip_norm);
  adam_step(std::span<const NamedTensor<T>>(params), adam, lr);
  return sum / double(batch.size());
}

// Mean total loss (full-length signals, eval mode).
template <typename T>
double validation_loss(SpexPlusModel<T>& model, const std::vector<MixtureExample>& dev, const LossWeights& w) {
  if (dev.empty()) throw TrainingError("validation set is empty");
  const bool was = model.training();
  model.set_training(false);
  double sum = 0;
  for (const auto& ex : dev) sum += example_loss(model, ex, w, false).total;
  model.set_training(was);
  return sum / double(dev.size());
}

template <typename T>
std::size_t predict_speaker(SpexPlusModel<T>& model, const AudioBuffer& reference) {
  Tape<T> tape;
  auto ref = tape.constant(Tensor<T>::row(std::vector<T>(reference.samples.begin(), reference.samples.end())));
  model.config().check_reference_length(reference.size());
  const auto emb = model.speaker_encode(tape, model.encode_reference(tape, ref));
  const auto& z = emb.logits.value();
  return std::size_t(std::max_element(z.data(), z.data() + z.size()) - z.data());
}

// Fraction of references whose arg-max class equals the label.
template <typename T>
double speaker_accuracy(SpexPlusModel<T>& model, const std::vector<MixtureExample>& items) {
  if (items.empty()) throw TrainingError("speaker_accuracy: no examples");
  const bool was = model.training();
  model.set_training(false);
  std::size_t hit = 0;
  for (const auto& ex : items) hit += predict_speaker(model, ex.reference) == std::size_t(ex.speaker_label);
  model.set_training(was);
  return double(hit) / double(items.size());
}

// ---------------------------------------------------------------------------
// fit

struct FitOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool resume = false;            // continue from out_dir/last.ckpt when present
  // Replaces the validation pass (used to drive the schedule with a stub).
  std::function<double(std::size_t epoch)> validation_override;
  // Stop after this many epochs in this call (simulates an interruption).
  std::size_t stop_after_epochs = 0;
  bool verbose = false;
  nlohmann::json extra_meta = nlohmann::json::object();
};

struct FitResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<HistoryRow> history;
  std::size_t epochs_run = 0;  // total completed epochs, including resumed ones
  std::uint64_t steps = 0;
  double best_value = 0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

namespace detail {

inline double validate_metric(SpexPlusModel<float>& model, const std::vector<MixtureExample>& dev,
                              const TrainConfig& cfg, const FitOptions& opt, std::size_t epoch) {
  if (opt.validation_override) return opt.validation_override(epoch);
  return cfg.val_metric == "accuracy" ? speaker_accuracy(model, dev) : validation_loss(model, dev, cfg.weights);
}

}  // namespace detail

// Trains `model` in place. Epoch 0 is the untrained baseline validation. The
// model ends holding the last-epoch weights; FitResult::best holds the best.
inline FitResult fit(SpexPlusModel<float>& model, const std::vector<MixtureExample>& train,
                     const std::vector<MixtureExample>& dev, const TrainConfig& cfg, const FitOptions& opt = {}) {
  cfg.validate();
  if (train.empty()) throw TrainingError("training set is empty");
  namespace fs = std::filesystem;
  const bool to_disk = !opt.out_dir.empty();
  const fs::path last_path = opt.out_dir / "last.ckpt";
  const fs::path best_path = opt.out_dir / "best.ckpt";

  AdamState<float> adam;
  TrainingProgress prog;
  prog.schedule.lr = cfg.lr_init;
  Rng master(derive_seed(cfg.seed, 0x6669));
  Checkpoint best;

  auto meta = [&]() {
    nlohmann::json m = opt.extra_meta;
    m["train"] = cfg;
    m["progress"] = progress_json(prog);
    return m;
  };
  auto snapshot = [&]() {
    Checkpoint c = make_checkpoint(model, &adam, meta());
    c.rng_state = master.state();
    return c;
  };

  bool resumed = false;
  if (opt.resume && to_disk && fs::exists(last_path)) {
    const Checkpoint c = load_checkpoint(last_path);
    if (checkpoint_model_config(c) != model.config())
      throw CheckpointError("resume: model config in " + last_path.string() + " differs from the requested one");
    restore_tensors<float>(model, c.tensors);
    adam = restore_adam(model, c.optimizer);
    prog = progress_from_json(c.meta.at("progress"));
    master.set_state(c.rng_state);
    best = fs::exists(best_path) ? load_checkpoint(best_path) : c;
    resumed = true;
  }

  auto log = [&](const std::string& s) {
    if (opt.verbose) std::fprintf(stderr, "%s\n", s.c_str());
  };

  if (!resumed) {
    const double v0 = detail::validate_metric(model, dev, cfg, opt, 0);
    prog.schedule.observe(v0, 0, cfg);
    best = snapshot();
    if (to_disk) save_checkpoint(best_path, best);
    char buf[96];
    std::snprintf(buf, sizeof buf, "epoch 0 val %.4f", v0);
    log(buf);
  }

  std::size_t epochs_this_call = 0;
  const auto t_start = std::chrono::steady_clock::now();
  std::string timing = "epoch,wall_seconds\n";
  while (!prog.stopped && prog.epoch < cfg.max_epochs &&
         !(cfg.max_steps > 0 && prog.step >= cfg.max_steps)) {
    if (opt.stop_after_epochs > 0 && epochs_this_call >= opt.stop_after_epochs) break;
    const std::size_t epoch = prog.epoch + 1;
    const double lr = prog.schedule.lr;
    const std::uint64_t epoch_seed = master.next();
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(epoch_seed, 1));
    shuffle_rng.shuffle(order.begin(), order.end());
    Rng crop_rng(derive_seed(epoch_seed, 2));

    double loss_sum = 0, audio_seconds = 0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      if (cfg.max_steps > 0 && prog.step >= cfg.max_steps) break;
      std::vector<MixtureExample> batch;
      for (std::size_t k = b0; k < std::min(order.size(), b0 + cfg.batch_size); ++k) {
        batch.push_back(segment_or_pad(train[order[k]], cfg.segment_seconds, crop_rng));
        audio_seconds += batch.back().mixture.seconds();
      }
      const double l = train_step(model, std::span<const MixtureExample>(batch), cfg, adam, lr);
      if (!std::isfinite(l)) {
        std::string ids;
        for (const auto& ex : batch) ids += (ids.empty() ? "" : ",") + ex.id;
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + " (" + ids + "), step " + std::to_string(prog.step + 1));
      }
      ++prog.step;
      ++batches;
      loss_sum += l;
    }

    const double val = detail::validate_metric(model, dev, cfg, opt, epoch);
    const bool improved = prog.schedule.observe(val, epoch, cfg);
    prog.epoch = epoch;
    prog.history.push_back({epoch, lr, batches ? loss_sum / double(batches) : 0.0, val, audio_seconds});
    if (prog.schedule.should_stop(cfg)) prog.stopped = true;

    const Checkpoint last = snapshot();
    if (improved) best = last;
    if (to_disk) {
      save_checkpoint(last_path, last);
      if (improved) save_checkpoint(best_path, best);
      write_file(opt.out_dir / "history.csv", history_csv(prog.history));
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing += std::to_string(epoch) + "," + std::to_string(wall) + "\n";
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %zu lr %.3g train %.4f val %.4f%s (%.1fs)", epoch, lr,
                  prog.history.back().train_loss, val, improved ? " *" : "", wall);
    log(buf);
    ++epochs_this_call;
  }
  if (to_disk) {
    write_file(opt.out_dir / "history.csv", history_csv(prog.history));
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    write_file(opt.out_dir / "timing.csv", timing + "total," + std::to_string(total) + "\n");
  }

  FitResult r;
  r.best = std::move(best);
  r.last = snapshot();
  r.history = prog.history;
  r.epochs_run = prog.epoch;
  r.steps = prog.step;
  r.best_value = prog.schedule.best;
  r.best_epoch = prog.schedule.best_epoch;
  r.early_stopped = prog.stopped;
  return r;
}

}  // namespace spexplus
