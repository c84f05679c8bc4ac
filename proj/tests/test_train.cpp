#include <gtest/gtest.h>

#include "spexplus/train.hpp"
#include "support.hpp"

using namespace spexplus;
namespace fs = std::filesystem;
using testing_support::TempDir;

namespace {

SpexPlusConfig micro_config() {
  auto c = tiny_preset();
  c.N = 16;
  c.O = 16;
  c.P = 32;
  c.B = 2;
  c.R = 1;
  c.D = 16;
  c.N_R = 1;
  c.N_s = 4;
  return c;
}

std::vector<MixtureExample> micro_examples(std::size_t n, std::uint64_t seed) {
  SimulationConfig sc;
  sc.n_speakers = 6;
  sc.utts_per_speaker = 4;
  sc.split_sizes = {n, 0, 0};
  sc.seed = seed;
  sc.min_duration_s = 0.5;
  sc.max_duration_s = 0.6;
  return to_mixture_examples(simulate_dataset_in_memory(sc).splits[0]);
}

TrainConfig quick_train() {
  TrainConfig tc;
  tc.lr_init = 3e-3;
  tc.max_epochs = 3;
  tc.segment_seconds = 0.6;
  tc.seed = 5;
  return tc;
}

FitOptions stub_validation() {
  FitOptions fo;
  fo.validation_override = [](std::size_t) { return 0.0; };
  return fo;
}

std::string bytes_of(const Checkpoint& c) { return serialize_checkpoint(c); }

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> w({3}, std::vector<double>{1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  w.zero_grad();
  w.grad()[0] = 4.0;
  w.grad()[1] = -0.01;
  w.grad()[2] = 0.0;
  std::vector<NamedTensor<double>> params{{"w", &w}};
  AdamState<double> s;
  adam_step(params, s, 0.1);
  EXPECT_EQ(s.step, 1u);
  // Bias-corrected first step: m_hat / sqrt(v_hat) = sign(g).
  EXPECT_NEAR(w[0], 0.9, 1e-6);
  EXPECT_NEAR(w[1], -1.9, 1e-5);
  EXPECT_EQ(w[2], 0.5);
}

TEST(Adam, ZeroGradientsStillAdvanceStep) {
  Tensor<float> w({2}, 1.f);
  w.zero_grad();
  std::vector<NamedTensor<float>> params{{"w", &w}};
  AdamState<float> s;
  adam_step(params, s, 0.1);
  adam_step(params, s, 0.1);
  EXPECT_EQ(s.step, 2u);
  EXPECT_EQ(w[0], 1.f);
  EXPECT_EQ(w[1], 1.f);
}

TEST(Adam, MissingGradientThrows) {
  Tensor<float> w({2}, 1.f);
  std::vector<NamedTensor<float>> params{{"layer.w", &w}};
  AdamState<float> s;
  try {
    adam_step(params, s, 0.1);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
  EXPECT_EQ(s.step, 0u);
}

TEST(ClipGradNorm, RescalesAboveThreshold) {
  Tensor<double> a({2}, 0.0), b({1}, 0.0);
  a.zero_grad();
  b.zero_grad();
  a.grad()[0] = 3;
  a.grad()[1] = 0;
  b.grad()[0] = 4;
  std::vector<NamedTensor<double>> params{{"a", &a}, {"b", &b}};
  EXPECT_NEAR(clip_grad_norm(std::span<const NamedTensor<double>>(params), 1.0), 5.0, 1e-12);
  EXPECT_NEAR(global_grad_norm(std::span<const NamedTensor<double>>(params)), 1.0, 1e-9);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-9);
  clip_grad_norm(std::span<const NamedTensor<double>>(params), 10.0);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-9);
}

TEST(Schedule, FrozenMetricHalvesAndStops) {
  const auto data = micro_examples(2, 1);
  TrainConfig tc = quick_train();
  tc.lr_init = 1e-3;
  tc.max_epochs = 50;
  FitOptions fo;
  fo.validation_override = [](std::size_t) { return 1.0; };
  SpexPlusModel<float> m2(micro_config());
  const auto r2 = fit(m2, data, data, tc, fo);
  const std::vector<double> expected{1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4};
  ASSERT_EQ(r2.history.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(r2.history[i].epoch, i + 1);
    EXPECT_DOUBLE_EQ(r2.history[i].lr, expected[i]);
  }
  EXPECT_TRUE(r2.early_stopped);
  EXPECT_EQ(r2.epochs_run, 6u);
  EXPECT_EQ(r2.best_epoch, 0u);
}

TEST(Schedule, ImprovementResetsCounters) {
  TrainConfig tc;
  PlateauSchedule s;
  s.lr = 1.0;
  EXPECT_TRUE(s.observe(5.0, 0, tc));
  EXPECT_FALSE(s.observe(5.0, 1, tc));
  EXPECT_TRUE(s.observe(4.0, 2, tc));
  EXPECT_EQ(s.bad_decay, 0u);
  EXPECT_EQ(s.bad_stop, 0u);
  EXPECT_FALSE(s.observe(4.5, 3, tc));
  EXPECT_FALSE(s.observe(4.5, 4, tc));
  EXPECT_DOUBLE_EQ(s.lr, 0.5);
  tc.val_metric = "accuracy";
  PlateauSchedule a;
  a.observe(0.5, 0, tc);
  EXPECT_TRUE(a.observe(0.6, 1, tc));
  EXPECT_FALSE(a.observe(0.4, 2, tc));
}

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.lr_init = 0; });
  bad([](TrainConfig& c) { c.lr_decay = 1.0; });
  bad([](TrainConfig& c) { c.patience_decay = 0; });
  bad([](TrainConfig& c) { c.patience_stop = 1; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.val_metric = "sisdr"; });
  bad([](TrainConfig& c) { c.weights.alpha = 0.9; });
  TrainConfig c;
  c.lr_init = 2e-3;
  c.val_metric = "accuracy";
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
}

TEST(Checkpoint, ByteIdenticalRoundTrip) {
  TempDir dir("ckpt");
  SpexPlusModel<float> model(micro_config());
  const auto data = micro_examples(2, 2);
  AdamState<float> adam;
  TrainConfig tc = quick_train();
  train_step(model, std::span<const MixtureExample>(data.data(), 1), tc, adam, 1e-3);
  Checkpoint c = make_checkpoint(model, &adam, {{"note", "x"}});
  c.rng_state = Rng(3).state();
  save_checkpoint(dir / "a.ckpt", c);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_TRUE(loaded == c);
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
  EXPECT_EQ(read_file(dir / "a.ckpt").substr(0, 4), "SPXP");

  auto restored = model_from_checkpoint<float>(loaded);
  EXPECT_EQ(bytes_of(make_checkpoint(restored, &adam, {{"note", "x"}})).size(),
            bytes_of(make_checkpoint(model, &adam, {{"note", "x"}})).size());
  const auto a = restore_adam(restored, loaded.optimizer);
  EXPECT_EQ(a.step, 1u);
  EXPECT_EQ(a.m, adam.m);
  EXPECT_EQ(a.v, adam.v);
  EXPECT_EQ(snapshot_tensors<float>(restored), snapshot_tensors<float>(model));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  SpexPlusModel<float> model(micro_config());
  const std::string bytes = bytes_of(make_checkpoint(model));
  EXPECT_THROW(deserialize_checkpoint("XXXX" + bytes.substr(4)), CheckpointError);
  std::string v2 = bytes;
  v2[4] = 2;
  try {
    deserialize_checkpoint(v2);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
  for (std::size_t cut : {bytes.size() / 2, bytes.size() - 3, std::size_t{10}})
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, cut)), CheckpointError) << cut;
  EXPECT_THROW(deserialize_checkpoint(bytes + "zz"), CheckpointError);
}

TEST(Checkpoint, MismatchListsOffendingNames) {
  SpexPlusModel<float> tied(micro_config());
  auto ucfg = micro_config();
  ucfg.tied = false;
  SpexPlusModel<float> untied(ucfg);
  const auto c = make_checkpoint(untied);
  try {
    restore_tensors<float>(tied, c.tensors);
    FAIL();
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("unexpected"), std::string::npos);
    EXPECT_NE(msg.find("reference_encoder.conv_short.weight"), std::string::npos) << msg;
  }
  auto wide = micro_config();
  wide.D = 24;
  SpexPlusModel<float> other(wide);
  try {
    restore_tensors<float>(other, make_checkpoint(tied).tensors);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }
}

TEST(Fit, ResumeMatchesUninterrupted) {
  const auto data = micro_examples(3, 3);
  TrainConfig tc = quick_train();
  tc.max_epochs = 4;
  TempDir a("resume_a"), b("resume_b");

  SpexPlusModel<float> straight(micro_config());
  FitOptions fa;
  fa.out_dir = a.path();
  const auto ra = fit(straight, data, data, tc, fa);

  FitOptions fb;
  fb.out_dir = b.path();
  fb.stop_after_epochs = 2;
  {
    SpexPlusModel<float> first(micro_config());
    const auto partial = fit(first, data, data, tc, fb);
    EXPECT_EQ(partial.epochs_run, 2u);
  }
  SpexPlusModel<float> second(micro_config());
  fb.stop_after_epochs = 0;
  fb.resume = true;
  const auto rb = fit(second, data, data, tc, fb);
  EXPECT_EQ(rb.epochs_run, 4u);
  EXPECT_EQ(snapshot_tensors<float>(second), snapshot_tensors<float>(straight));
  EXPECT_EQ(read_file(a / "history.csv"), read_file(b / "history.csv"));
  EXPECT_EQ(read_file(a / "last.ckpt"), read_file(b / "last.ckpt"));
  EXPECT_EQ(ra.steps, rb.steps);
}

TEST(Fit, SameSeedGivesIdenticalHistory) {
  const auto data = micro_examples(3, 4);
  TrainConfig tc = quick_train();
  tc.max_epochs = 2;
  TempDir a("hist_a"), b("hist_b"), c("hist_c");
  auto run = [&](const TempDir& d, std::uint64_t seed) {
    SpexPlusModel<float> m(micro_config());
    FitOptions fo;
    fo.out_dir = d.path();
    tc.seed = seed;
    fit(m, data, data, tc, fo);
    return read_file(d / "history.csv");
  };
  const auto ha = run(a, 9), hb = run(b, 9), hc = run(c, 10);
  EXPECT_EQ(ha, hb);
  EXPECT_NE(ha, hc);
  EXPECT_EQ(ha.substr(0, ha.find('\n')), "epoch,lr,train_loss,val_metric,seconds");
  EXPECT_TRUE(fs::exists(a / "timing.csv"));
  EXPECT_TRUE(fs::exists(a / "best.ckpt"));
}

TEST(Fit, NonFiniteLossNamesTheBatch) {
  auto data = micro_examples(2, 5);
  for (auto& ex : data) ex.mixture.samples[100] = std::numeric_limits<float>::quiet_NaN();
  SpexPlusModel<float> m(micro_config());
  try {
    fit(m, data, data, quick_train(), stub_validation());
    FAIL();
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_TRUE(msg.find(data[0].id) != std::string::npos || msg.find(data[1].id) != std::string::npos) << msg;
  }
}

TEST(Fit, RejectsBadLabels) {
  auto data = micro_examples(2, 6);
  data[0].speaker_label = 99;
  SpexPlusModel<float> m(micro_config());
  EXPECT_THROW(fit(m, data, data, quick_train(), stub_validation()),
               TrainingError);
  EXPECT_THROW(fit(m, {}, data, quick_train()), TrainingError);
}

TEST(Fit, TrainingLossMostlyDecreasesOnFixedSet) {
  // Eight short items, no cropping (segments are the full clip), so the
  // per-epoch loss only moves through the parameters.
  const auto data = micro_examples(8, 7);
  TrainConfig tc;
  tc.lr_init = 2e-3;
  tc.segment_seconds = 0.6;
  tc.max_epochs = 200;
  tc.max_steps = 8 * 60;
  tc.patience_decay = 3;
  tc.patience_stop = 10;
  SpexPlusModel<float> m(micro_config());
  const auto r = fit(m, data, data, tc);
  ASSERT_GE(r.history.size(), 10u);
  std::size_t down = 0;
  for (std::size_t i = 1; i < r.history.size(); ++i) down += r.history[i].train_loss < r.history[i - 1].train_loss;
  const double frac = double(down) / double(r.history.size() - 1);
  EXPECT_GE(frac, 0.8) << down << " of " << r.history.size() - 1;
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}
