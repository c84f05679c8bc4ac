// Command-line front end: simulate, train, extract, evaluate, stub, gradcheck.
//
// Every command resolves its effective configuration as defaults, then an
// optional JSON file (--config, flat keys named like the flags with '-'
// replaced by '_'), then explicit flags. The result is echoed to stdout and
// saved next to the outputs. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.
#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spexplus/audio.hpp"
#include "spexplus/checkpoint.hpp"
#include "spexplus/data.hpp"
#include "spexplus/eval.hpp"
#include "spexplus/gradcheck.hpp"
#include "spexplus/model.hpp"
#include "spexplus/train.hpp"

namespace spexplus::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using nlohmann::json;
namespace fs = std::filesystem;

enum class Kind { kInt, kDouble, kString, kBool, kDoubleList };

struct FlagSpec {
  std::string key;  // JSON key; the flag is "--" + key with '_' -> '-'
  Kind kind;
  std::string help;
};

inline std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& c : s)
    if (c == '_') c = '-';
  return "--" + s;
}

// Option names for CLI11; the underscore spelling is accepted as an alias.
inline std::string flag_names(const std::string& key) {
  const auto dashed = flag_name(key);
  return dashed == "--" + key ? dashed : dashed + ",--" + key;
}

// Seed used when neither the config file nor a flag sets one.
inline std::uint64_t env_seed() {
  if (const char* s = std::getenv("SPEXPLUS_SEED"); s != nullptr && *s != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(s, &used);
      if (used == std::strlen(s)) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SPEXPLUS_SEED is not an unsigned integer: '") + s + "'");
  }
  return 0;
}

// Collects flag values as strings, then merges them over a JSON config.
class Resolver {
 public:
  Resolver(CLI::App* app, std::vector<FlagSpec> specs, json defaults)
      : specs_(std::move(specs)), defaults_(std::move(defaults)) {
    app->add_option("--config", config_path_, "JSON config file (flat keys, flags override)");
    for (const auto& s : specs_) {
      if (s.kind == Kind::kBool) {
        app->add_flag(flag_names(s.key), bools_[s.key], s.help);
      } else if (s.kind == Kind::kDoubleList) {
        app->add_option(flag_names(s.key), lists_[s.key], s.help)->expected(1, -1)->delimiter(',');
      } else {
        app->add_option(flag_names(s.key), values_[s.key], s.help);
      }
    }
  }

  json resolve() const {
    json cfg = defaults_;
    if (config_path_) {
      json file;
      try {
        file = json::parse(read_file(*config_path_));
      } catch (const json::exception& e) {
        throw UsageError("config " + *config_path_ + ": " + e.what());
      }
      if (!file.is_object()) throw UsageError("config " + *config_path_ + ": expected a JSON object");
      for (const auto& [k, v] : file.items()) {
        if (!cfg.contains(k)) throw UsageError("config " + *config_path_ + ": unknown key '" + k + "'");
        cfg[k] = v;
      }
    }
    for (const auto& s : specs_) {
      switch (s.kind) {
        case Kind::kBool:
          if (bools_.at(s.key)) cfg[s.key] = true;
          break;
        case Kind::kDoubleList:
          if (!lists_.at(s.key).empty()) cfg[s.key] = lists_.at(s.key);
          break;
        default:
          if (const auto& v = values_.at(s.key)) cfg[s.key] = convert(s, *v);
      }
    }
    return cfg;
  }

 private:
  static json convert(const FlagSpec& s, const std::string& v) {
    try {
      std::size_t used = 0;
      json out;
      if (s.kind == Kind::kInt) {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        out = std::stoull(v, &used);
      } else if (s.kind == Kind::kDouble) {
        out = std::stod(v, &used);
      } else {
        return v;
      }
      if (used != v.size()) throw std::invalid_argument("trailing characters");
      return out;
    } catch (const std::exception&) {
      throw UsageError(flag_name(s.key) + ": invalid value '" + v + "'");
    }
  }

  std::vector<FlagSpec> specs_;
  json defaults_;
  std::optional<std::string> config_path_;
  std::map<std::string, std::optional<std::string>> values_;
  std::map<std::string, bool> bools_;
  std::map<std::string, std::vector<double>> lists_;
};

template <typename V>
V get(const json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<V>();
  } catch (const json::exception& e) {
    throw UsageError("config key '" + key + "': " + e.what());
  }
}

inline std::string require_path(const json& cfg, const std::string& key) {
  const auto s = get<std::string>(cfg, key);
  if (s.empty()) throw UsageError(flag_name(key) + " is required");
  return s;
}

inline void echo(std::ostream& out, const std::string& command, const json& cfg) {
  out << "effective " << command << " config:\n" << cfg.dump(2) << "\n";
}

inline std::array<std::size_t, 3> parse_splits(const std::string& s) {
  std::array<std::size_t, 3> out{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) throw UsageError("--splits needs exactly three comma-separated counts");
    try {
      std::size_t used = 0;
      if (part.empty() || part[0] == '-') throw std::invalid_argument("bad");
      out[i++] = std::stoull(part, &used);
      if (used != part.size()) throw std::invalid_argument("bad");
    } catch (const std::exception&) {
      throw UsageError("--splits: invalid count '" + part + "'");
    }
  }
  if (i != 3) throw UsageError("--splits needs exactly three comma-separated counts");
  return out;
}

// ---------------------------------------------------------------------------
// Commands. Each returns a closure that runs after parsing; exceptions
// thrown while resolving configuration map to exit code 2.

struct Command {
  std::function<void()> validate;  // resolve config; throws on usage errors
  std::function<void()> run;       // the work; throws on runtime errors
};

inline Command add_simulate(CLI::App& root, std::ostream& out) {
  auto* app = root.add_subcommand("simulate", "Generate a synthetic two-talker dataset and manifests");
  auto res = std::make_shared<Resolver>(
      app,
      std::vector<FlagSpec>{{"out", Kind::kString, "output directory"},
                            {"speakers", Kind::kInt, "number of synthetic speakers (>= 4)"},
                            {"utts", Kind::kInt, "utterances per speaker"},
                            {"seed", Kind::kInt, "random seed"},
                            {"splits", Kind::kString, "train,dev,test mixture counts"},
                            {"min_duration", Kind::kDouble, "shortest utterance, seconds"},
                            {"max_duration", Kind::kDouble, "longest utterance, seconds"}},
      json{{"out", ""},
           {"speakers", 12},
           {"utts", 20},
           {"seed", env_seed()},
           {"splits", "200,50,50"},
           {"min_duration", 2.0},
           {"max_duration", 4.0}});
  auto state = std::make_shared<std::pair<json, SimulationConfig>>();
  Command c;
  c.validate = [res, state] {
    auto& [cfg, sim] = *state;
    cfg = res->resolve();
    require_path(cfg, "out");
    sim.n_speakers = get<std::size_t>(cfg, "speakers");
    sim.utts_per_speaker = get<std::size_t>(cfg, "utts");
    sim.seed = get<std::uint64_t>(cfg, "seed");
    sim.split_sizes = parse_splits(get<std::string>(cfg, "splits"));
    sim.min_duration_s = get<double>(cfg, "min_duration");
    sim.max_duration_s = get<double>(cfg, "max_duration");
    try {
      sim.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  };
  c.run = [state, &out] {
    const auto& [cfg, sim] = *state;
    echo(out, "simulate", cfg);
    const fs::path dir = cfg.at("out").get<std::string>();
    const auto summary = simulate_dataset(sim, dir);
    write_file(dir / "simulate_config.json", cfg.dump(2) + "\n");
    char buf[200];
    std::snprintf(buf, sizeof buf, "speakers: %zu train/dev, %zu test (unseen)\n", summary.train_speakers,
                  summary.test_speakers);
    out << buf;
    for (std::size_t i = 0; i < 3; ++i) {
      std::snprintf(buf, sizeof buf, "%-5s %5zu mixtures  SNR mean %.3f dB  range [%.3f, %.3f]\n", split_name(i),
                    summary.counts[i], summary.mean_snr[i], summary.min_snr[i], summary.max_snr[i]);
      out << buf;
    }
    out << "manifests written to " << (dir / "manifests").string() << "\n";
  };
  return c;
}

inline std::vector<FlagSpec> train_flags() {
  return {{"data", Kind::kString, "dataset directory (from simulate)"},
          {"out", Kind::kString, "output directory"},
          {"preset", Kind::kString, "model preset: tiny or paper"},
          {"untied", Kind::kBool, "separate encoder weights for the reference path"},
          {"resume", Kind::kBool, "continue from out/last.ckpt"},
          {"verbose", Kind::kBool, "per-epoch log on stderr"},
          {"seed", Kind::kInt, "random seed"},
          {"lr", Kind::kDouble, "initial learning rate"},
          {"lr_decay", Kind::kDouble, "learning-rate decay factor"},
          {"patience_decay", Kind::kInt, "non-improving epochs before decay"},
          {"patience_stop", Kind::kInt, "non-improving epochs before stopping"},
          {"epochs", Kind::kInt, "maximum epochs"},
          {"max_steps", Kind::kInt, "maximum optimizer steps (0 = none)"},
          {"batch_size", Kind::kInt, "examples per optimizer step"},
          {"val_metric", Kind::kString, "loss or accuracy"},
          {"clip_norm", Kind::kDouble, "global gradient-norm clip (<= 0 disables)"},
          {"segment_seconds", Kind::kDouble, "training crop length"},
          {"alpha", Kind::kDouble, "middle-scale SI-SDR weight"},
          {"beta", Kind::kDouble, "long-scale SI-SDR weight"},
          {"gamma", Kind::kDouble, "cross-entropy weight"},
          {"train_limit", Kind::kInt, "use only the first N training mixtures (0 = all)"},
          {"dev_limit", Kind::kInt, "use only the first N dev mixtures (0 = all)"},
          {"N", Kind::kInt, "encoder filters per scale"},
          {"B", Kind::kInt, "TCN blocks per stack"},
          {"R", Kind::kInt, "TCN stacks"},
          {"O", Kind::kInt, "bottleneck channels"},
          {"P", Kind::kInt, "TCN conv channels"},
          {"D", Kind::kInt, "speaker embedding size"},
          {"N_R", Kind::kInt, "ResNet blocks"},
          {"N_s", Kind::kInt, "speaker classes (default: speakers in the train manifest)"}};
}

inline json train_defaults() {
  const TrainConfig t;
  json j{{"data", ""},
         {"out", ""},
         {"preset", "tiny"},
         {"untied", false},
         {"resume", false},
         {"verbose", false},
         {"seed", env_seed()},
         {"lr", t.lr_init},
         {"lr_decay", t.lr_decay},
         {"patience_decay", t.patience_decay},
         {"patience_stop", t.patience_stop},
         {"epochs", t.max_epochs},
         {"max_steps", t.max_steps},
         {"batch_size", t.batch_size},
         {"val_metric", t.val_metric},
         {"clip_norm", t.clip_norm},
         {"segment_seconds", t.segment_seconds},
         {"alpha", t.weights.alpha},
         {"beta", t.weights.beta},
         {"gamma", t.weights.gamma},
         {"train_limit", 0},
         {"dev_limit", 0}};
  for (const char* k : {"N", "B", "R", "O", "P", "D", "N_R", "N_s"}) j[k] = nullptr;
  return j;
}

struct TrainPlan {
  json cfg;
  SpexPlusConfig model;
  TrainConfig train;
  fs::path data, out;
  std::size_t train_limit = 0, dev_limit = 0;
  bool resume = false, verbose = false;
};

inline void resolve_train(const json& cfg, TrainPlan& p) {
  p.cfg = cfg;
  p.data = require_path(cfg, "data");
  p.out = require_path(cfg, "out");
  try {
    p.model = preset(get<std::string>(cfg, "preset"));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  p.model.tied = !get<bool>(cfg, "untied");
  p.model.seed = get<std::uint64_t>(cfg, "seed");
  auto dim = [&](const char* key, std::size_t& field) {
    if (!cfg.at(key).is_null()) field = get<std::size_t>(cfg, key);
  };
  dim("N", p.model.N);
  dim("B", p.model.B);
  dim("R", p.model.R);
  dim("O", p.model.O);
  dim("P", p.model.P);
  dim("D", p.model.D);
  dim("N_R", p.model.N_R);
  dim("N_s", p.model.N_s);
  auto& t = p.train;
  t.seed = p.model.seed;
  t.lr_init = get<double>(cfg, "lr");
  t.lr_decay = get<double>(cfg, "lr_decay");
  t.patience_decay = get<std::size_t>(cfg, "patience_decay");
  t.patience_stop = get<std::size_t>(cfg, "patience_stop");
  t.max_epochs = get<std::size_t>(cfg, "epochs");
  t.max_steps = get<std::size_t>(cfg, "max_steps");
  t.batch_size = get<std::size_t>(cfg, "batch_size");
  t.val_metric = get<std::string>(cfg, "val_metric");
  t.clip_norm = get<double>(cfg, "clip_norm");
  t.segment_seconds = get<double>(cfg, "segment_seconds");
  t.weights = {get<double>(cfg, "alpha"), get<double>(cfg, "beta"), get<double>(cfg, "gamma")};
  p.train_limit = get<std::size_t>(cfg, "train_limit");
  p.dev_limit = get<std::size_t>(cfg, "dev_limit");
  p.resume = get<bool>(cfg, "resume");
  p.verbose = get<bool>(cfg, "verbose");
  try {
    t.validate();
    p.model.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

inline std::vector<MixtureExample> load_limited(const fs::path& manifest, std::size_t limit, int rate) {
  const auto root = dataset_root(manifest);
  auto entries = read_manifest(manifest);
  if (limit > 0 && entries.size() > limit) entries.resize(limit);
  std::vector<MixtureExample> out;
  for (const auto& e : entries) out.push_back(load_example(e, root, rate));
  return out;
}

inline Command add_train(CLI::App& root, std::ostream& out) {
  auto* app = root.add_subcommand("train", "Train a model on a simulated dataset");
  auto res = std::make_shared<Resolver>(app, train_flags(), train_defaults());
  auto plan = std::make_shared<TrainPlan>();
  Command c;
  c.validate = [res, plan] { resolve_train(res->resolve(), *plan); };
  c.run = [plan, &out] {
    auto& p = *plan;
    const auto train = load_limited(p.data / "manifests" / "train.jsonl", p.train_limit, p.model.sample_rate);
    const auto dev = load_limited(p.data / "manifests" / "dev.jsonl", p.dev_limit, p.model.sample_rate);
    if (p.cfg.at("N_s").is_null()) {
      int max_label = -1;
      for (const auto& ex : train) max_label = std::max(max_label, ex.speaker_label);
      if (max_label < 0) throw TrainingError("train manifest has no labelled speakers");
      p.model.N_s = std::size_t(max_label) + 1;
    }
    json effective = p.cfg;
    effective["resolved_model"] = p.model;
    effective["resolved_train"] = p.train;
    echo(out, "train", effective);
    fs::create_directories(p.out);
    write_file(p.out / "config.json", effective.dump(2) + "\n");

    SpexPlusModel<float> model(p.model);
    out << "parameters: " << model.parameter_count() << "\n";
    FitOptions opt;
    opt.out_dir = p.out;
    opt.resume = p.resume;
    opt.verbose = p.verbose;
    opt.extra_meta["run_config"] = p.cfg;
    const auto r = fit(model, train, dev, p.train, opt);
    char buf[200];
    std::snprintf(buf, sizeof buf, "epochs %zu  steps %llu  best %s %.4f at epoch %zu%s\n", r.epochs_run,
                  (unsigned long long)r.steps, p.train.val_metric.c_str(), r.best_value, r.best_epoch,
                  r.early_stopped ? "  (early stop)" : "");
    out << buf;
    out << "best checkpoint: " << (p.out / "best.ckpt").string() << "\n";
    out << "history: " << (p.out / "history.csv").string() << "\n";
  };
  return c;
}

// A checkpoint file whose metadata names a stub extractor instead of weights.
inline std::optional<std::string> stub_kind(const Checkpoint& c) {
  if (c.meta.contains("stub") && c.meta.at("stub").is_string()) return c.meta.at("stub").get<std::string>();
  return std::nullopt;
}

inline Checkpoint make_stub_checkpoint(const std::string& kind) {
  if (kind != "identity" && kind != "oracle")
    throw UsageError("stub kind must be identity or oracle, got '" + kind + "'");
  Checkpoint c;
  c.meta["stub"] = kind;
  return c;
}

inline Command add_stub(CLI::App& root, std::ostream& out) {
  auto* app = root.add_subcommand("stub", "Write a stub checkpoint (identity: s1 = mixture, oracle: s1 = target)");
  auto res = std::make_shared<Resolver>(
      app,
      std::vector<FlagSpec>{{"kind", Kind::kString, "identity or oracle"}, {"out", Kind::kString, "checkpoint path"}},
      json{{"kind", "identity"}, {"out", ""}});
  auto state = std::make_shared<json>();
  Command c;
  c.validate = [res, state] {
    *state = res->resolve();
    require_path(*state, "out");
    make_stub_checkpoint(get<std::string>(*state, "kind"));
  };
  c.run = [state, &out] {
    echo(out, "stub", *state);
    save_checkpoint(state->at("out").get<std::string>(), make_stub_checkpoint(state->at("kind").get<std::string>()));
    out << "wrote " << state->at("out").get<std::string>() << "\n";
  };
  return c;
}

inline Command add_extract(CLI::App& root, std::ostream& out) {
  auto* app = root.add_subcommand("extract", "Extract the reference speaker from a mixture WAV");
  auto res = std::make_shared<Resolver>(app,
                                        std::vector<FlagSpec>{{"ckpt", Kind::kString, "checkpoint"},
                                                              {"mixture", Kind::kString, "mixture WAV"},
                                                              {"reference", Kind::kString, "reference WAV"},
                                                              {"out", Kind::kString, "output WAV"}},
                                        json{{"ckpt", ""}, {"mixture", ""}, {"reference", ""}, {"out", ""}});
  auto state = std::make_shared<json>();
  Command c;
  c.validate = [res, state] {
    *state = res->resolve();
    for (const char* k : {"ckpt", "mixture", "reference", "out"}) require_path(*state, k);
  };
  c.run = [state, &out] {
    const auto& cfg = *state;
    echo(out, "extract", cfg);
    const fs::path out_path = cfg.at("out").get<std::string>();
    const Checkpoint ckpt = load_checkpoint(cfg.at("ckpt").get<std::string>());
    const auto stub = stub_kind(ckpt);
    int rate = 8000;
    std::optional<SpexPlusModel<float>> model;
    if (!stub) {
      model.emplace(model_from_checkpoint<float>(ckpt));
      rate = model->config().sample_rate;
    } else if (*stub != "identity") {
      throw TrainingError("stub '" + *stub + "' needs a clean target and cannot extract");
    }
    const auto mix = read_wav(cfg.at("mixture").get<std::string>(), rate);
    const auto ref = read_wav(cfg.at("reference").get<std::string>(), rate);
    AudioBuffer result{mix.samples, rate};
    if (model) {
      model->set_training(false);
      model->config().check_reference_length(ref.size());
      if (mix.size() < model->config().L3)
        throw ShapeError("mixture of " + std::to_string(mix.size()) + " samples is shorter than L3");
      result.samples = model->infer(std::span<const float>(mix.samples), std::span<const float>(ref.samples));
    }
    write_wav(out_path, result);
    write_file(out_path.string() + ".config.json", cfg.dump(2) + "\n");
    out << "wrote " << out_path.string() << " (" << result.size() << " samples)\n";
  };
  return c;
}

inline fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix + p.extension().string());
}

inline Command add_evaluate(CLI::App& root, std::ostream& out) {
  auto* app = root.add_subcommand("evaluate", "Score a checkpoint on a manifest (SI-SDR, SI-SDRi, conditions)");
  auto res = std::make_shared<Resolver>(
      app,
      std::vector<FlagSpec>{{"ckpt", Kind::kString, "checkpoint"},
                            {"manifest", Kind::kString, "manifest (.jsonl)"},
                            {"out", Kind::kString, "report path (.csv or .jsonl)"},
                            {"format", Kind::kString, "csv or jsonl (default: from extension)"},
                            {"ref_duration", Kind::kDoubleList, "reference duration(s) in seconds"}},
      json{{"ckpt", ""}, {"manifest", ""}, {"out", ""}, {"format", ""}, {"ref_duration", json::array()}});
  auto state = std::make_shared<json>();
  Command c;
  c.validate = [res, state] {
    *state = res->resolve();
    for (const char* k : {"ckpt", "manifest", "out"}) require_path(*state, k);
    const auto fmt = get<std::string>(*state, "format");
    if (!fmt.empty() && fmt != "csv" && fmt != "jsonl") throw UsageError("--format must be csv or jsonl");
    for (double d : get<std::vector<double>>(*state, "ref_duration"))
      if (!(d > 0)) throw UsageError("--ref-duration values must be positive");
  };
  c.run = [state, &out] {
    const auto& cfg = *state;
    echo(out, "evaluate", cfg);
    const fs::path out_path = cfg.at("out").get<std::string>();
    std::string fmt = cfg.at("format").get<std::string>();
    if (fmt.empty()) fmt = report_format_for(out_path);
    const auto durations = cfg.at("ref_duration").get<std::vector<double>>();
    const Checkpoint ckpt = load_checkpoint(cfg.at("ckpt").get<std::string>());
    const auto stub = stub_kind(ckpt);
    std::optional<SpexPlusModel<float>> model;
    if (!stub) model.emplace(model_from_checkpoint<float>(ckpt));
    const int rate = model ? model->config().sample_rate : 8000;
    const auto items = load_examples(cfg.at("manifest").get<std::string>(), rate);

    auto run_with = [&](const auto& extractor) {
      char buf[160];
      if (durations.size() <= 1) {
        const auto report =
            evaluate(extractor, items, durations.empty() ? std::nullopt : std::optional<double>(durations[0]));
        report_write(report, out_path, fmt);
        std::snprintf(buf, sizeof buf, "%zu mixtures  mean si_sdri %.4f dB\n", report.rows.size(),
                      report.mean_si_sdri());
        out << buf;
        for (const auto& cs : report.conditions) {
          std::snprintf(buf, sizeof buf, "  %-9s n=%-4zu in %.4f  out %.4f  si_sdri %.4f\n", cs.condition.c_str(),
                        cs.count, cs.si_sdr_in, cs.si_sdr_out, cs.si_sdri);
          out << buf;
        }
        if (durations.size() == 1) out << format_sweep_table(reference_sweep(extractor, items, durations));
        out << "report: " << out_path.string() << "\n";
        return;
      }
      std::vector<EvalReport> reports;
      const auto sweep = reference_sweep(extractor, items, durations, &reports);
      for (std::size_t i = 0; i < reports.size(); ++i) {
        std::snprintf(buf, sizeof buf, "_ref%.2fs", durations[i]);
        const auto path = with_suffix(out_path, buf);
        report_write(reports[i], path, fmt);
        out << "report: " << path.string() << "\n";
      }
      const auto sweep_path = with_suffix(out_path, "_sweep");
      write_file(fs::path(sweep_path).replace_extension(".csv"), format_sweep_csv(sweep));
      out << format_sweep_table(sweep);
    };
    if (!stub) {
      run_with(ModelExtractor<float>{&*model});
    } else if (*stub == "identity") {
      run_with(IdentityExtractor{});
    } else if (*stub == "oracle") {
      run_with(OracleExtractor{});
    } else {
      throw CheckpointError("unknown stub kind '" + *stub + "'");
    }
    write_file(out_path.string() + ".config.json", cfg.dump(2) + "\n");
  };
  return c;
}

inline Command add_gradcheck(CLI::App& root, std::ostream& out, int& status) {
  auto* app = root.add_subcommand("gradcheck", "Finite-difference check of every op and layer");
  auto res = std::make_shared<Resolver>(
      app,
      std::vector<FlagSpec>{{"scope", Kind::kString, "all, op, layer or model"},
                            {"instances", Kind::kInt, "random instances per case"},
                            {"seed", Kind::kInt, "random seed"}},
      json{{"scope", "all"}, {"instances", 20}, {"seed", env_seed()}});
  auto state = std::make_shared<json>();
  Command c;
  c.validate = [res, state] {
    *state = res->resolve();
    try {
      gradcheck_cases(get<std::string>(*state, "scope"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (get<std::size_t>(*state, "instances") < 1) throw UsageError("--instances must be >= 1");
  };
  c.run = [state, &out, &status] {
    const auto& cfg = *state;
    echo(out, "gradcheck", cfg);
    const auto results = run_gradcheck(cfg.at("scope").get<std::string>(), cfg.at("instances").get<std::size_t>(),
                                       cfg.at("seed").get<std::uint64_t>());
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-24s %-6s %5s %5s %11s %11s  %s\n", "case", "scope", "n", "redrawn",
                  "max_err_f32", "max_err_f64", "status");
    out << buf;
    std::size_t failed = 0;
    for (const auto& r : results) {
      std::snprintf(buf, sizeof buf, "%-24s %-6s %5zu %5zu %11.3e %11.3e  %s\n", r.name.c_str(), r.scope.c_str(),
                    r.instances, r.rejected, r.max_err32, r.max_err64, r.passed ? "ok" : "FAIL");
      out << buf;
      failed += !r.passed;
    }
    std::snprintf(buf, sizeof buf, "tolerances: %.0e (float), %.0e (double); %zu of %zu cases failed\n", kGradTol32,
                  kGradTol64, failed, results.size());
    out << buf;
    if (failed) status = kExitRuntime;
  };
  return c;
}

// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Time-domain speaker extraction: simulate, train, extract, evaluate", "spexplus"};
  app.require_subcommand(1);
  int status = kExitOk;
  std::vector<std::pair<CLI::App*, Command>> commands;
  auto reg = [&](Command c, const char* name) { commands.emplace_back(app.get_subcommand(name), std::move(c)); };
  try {
    reg(add_simulate(app, out), "simulate");
    reg(add_train(app, out), "train");
    reg(add_extract(app, out), "extract");
    reg(add_evaluate(app, out), "evaluate");
    reg(add_stub(app, out), "stub");
    reg(add_gradcheck(app, out, status), "gradcheck");
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (e.get_exit_code() == 0) return kExitOk;
    err << "run with --help for usage\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  for (auto& [sub, cmd] : commands) {
    if (!sub->parsed()) continue;
    try {
      cmd.validate();
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitUsage;
    }
    try {
      cmd.run();
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitRuntime;
    }
  }
  return status;
}

}  // namespace spexplus::cli
