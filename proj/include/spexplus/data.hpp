// Synthetic two-talker mixture simulation, JSON-lines manifests, loading and
// fixed-length segmentation.
//
// Speakers are harmonic sources: a per-utterance pitch contour inside the
// speaker's fundamental band drives a harmonic series shaped by a fixed
// formant envelope. Two classes (A: low band, B: high band) stand in for the
// same/different-gender split.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spexplus/audio.hpp"
#include "spexplus/random.hpp"

namespace spexplus {

struct SyntheticSpeakerSpec {
  std::string id;
  double f0_lo = 100.0, f0_hi = 140.0;  // Hz
  double rolloff = 0.88;                 // per-harmonic amplitude decay
  std::uint64_t envelope_seed = 0;
  char class_tag = 'A';

  // Three formant (centre, bandwidth) pairs. Formants rise gently with f0 and
  // class B uses a shorter vocal tract; the envelope seed adds jitter.
  std::array<std::pair<double, double>, 3> formants() const {
    Rng rng(derive_seed(envelope_seed, 0xf0));
    const double tract = (class_tag == 'B' ? 1.25 : 1.0) * std::pow(0.5 * (f0_lo + f0_hi) / 120.0, 0.2);
    const double nominal[3] = {520.0, 1450.0, 2500.0};
    const double bandwidth[3] = {110.0, 160.0, 220.0};
    std::array<std::pair<double, double>, 3> out;
    for (int k = 0; k < 3; ++k)
      out[k] = {nominal[k] * tract * rng.uniform(0.90, 1.10), bandwidth[k] * rng.uniform(0.8, 1.2)};
    return out;
  }
};

// Speakers alternate A, B, A, ... Class A draws from 85-155 Hz, class B from
// 165-255 Hz with a brighter harmonic rolloff; each speaker gets its own
// sub-band and envelope seed.
inline std::vector<SyntheticSpeakerSpec> make_speakers(std::size_t n, std::uint64_t seed) {
  std::vector<SyntheticSpeakerSpec> out;
  const std::size_t per_a = (n + 1) / 2, per_b = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSpeakerSpec s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "spk%02zu", i);
    s.id = buf;
    s.class_tag = i % 2 == 0 ? 'A' : 'B';
    const std::size_t rank = i / 2;
    const std::size_t count = s.class_tag == 'A' ? per_a : per_b;
    const double lo = s.class_tag == 'A' ? 85.0 : 165.0;
    const double hi = s.class_tag == 'A' ? 155.0 : 255.0;
    const double width = (hi - lo) / double(std::max<std::size_t>(count, 1));
    s.f0_lo = lo + width * double(rank);
    s.f0_hi = s.f0_lo + width;
    Rng rng(derive_seed(seed, 1000 + i));
    s.rolloff = s.class_tag == 'A' ? rng.uniform(0.85, 0.87) : rng.uniform(0.90, 0.92);
    s.envelope_seed = derive_seed(seed, 5000 + i);
    out.push_back(s);
  }
  return out;
}

inline AudioBuffer synth_utterance(const SyntheticSpeakerSpec& spec, double duration_s,
                                   std::uint64_t seed, int sample_rate = 8000) {
  if (duration_s < 0.5) throw std::invalid_argument("synth_utterance: duration must be >= 0.5 s");
  Rng rng(seed);
  const std::size_t n = std::size_t(std::llround(duration_s * sample_rate));
  const double sr = sample_rate;
  const double base = rng.uniform(spec.f0_lo, spec.f0_hi);
  const double vib_rate = rng.uniform(0.5, 1.5), vib_phase = rng.uniform(0, 2 * std::numbers::pi);
  const double jit_rate = rng.uniform(2.0, 4.0), jit_phase = rng.uniform(0, 2 * std::numbers::pi);
  const double syl_rate = rng.uniform(3.0, 5.0), syl_phase = rng.uniform(0, 2 * std::numbers::pi);
  const double drift_rate = rng.uniform(0.3, 0.8), drift_phase = rng.uniform(0, 2 * std::numbers::pi);
  const auto formants = spec.formants();
  const double nyquist_guard = 0.475 * sr;

  auto envelope = [&](double f, double shift) {
    double e = 0.05;
    for (const auto& [centre, bw] : formants) {
      const double d = (f - centre * shift) / bw;
      e += std::exp(-0.5 * d * d);
    }
    return e;
  };

  constexpr std::size_t kBlock = 80;  // harmonic amplitudes refreshed every 10 ms
  std::vector<double> amps;
  std::vector<float> out(n);
  double phase = 0.0;
  std::size_t harmonics = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = double(i) / sr;
    const double f0 = base * (1.0 + 0.06 * std::sin(2 * std::numbers::pi * vib_rate * t + vib_phase) +
                              0.03 * std::sin(2 * std::numbers::pi * jit_rate * t + jit_phase));
    if (i % kBlock == 0) {
      const double shift = 1.0 + 0.05 * std::sin(2 * std::numbers::pi * drift_rate * t + drift_phase);
      harmonics = std::size_t(nyquist_guard / f0);
      amps.assign(harmonics, 0.0);
      double decay = 1.0;
      for (std::size_t k = 0; k < harmonics; ++k, decay *= spec.rolloff)
        amps[k] = decay * envelope(double(k + 1) * f0, shift);
    }
    phase += 2 * std::numbers::pi * f0 / sr;
    if (phase > 2 * std::numbers::pi) phase -= 2 * std::numbers::pi;
    double v = 0.0;
    for (std::size_t k = 0; k < harmonics; ++k) v += amps[k] * std::sin(double(k + 1) * phase);
    const double syl = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * syl_rate * t + syl_phase);
    v *= 0.35 + 0.65 * syl * std::sqrt(syl);
    v += 0.01 * rng.normal();
    out[i] = float(v);
  }
  double ss = 0;
  for (float v : out) ss += double(v) * v;
  const double gain = 0.1 / std::sqrt(ss / double(n));
  for (auto& v : out) v = float(v * gain);
  return {std::move(out), sample_rate};
}

inline double signal_power(std::span<const float> x) {
  double s = 0;
  for (float v : x) s += double(v) * v;
  return x.empty() ? 0.0 : s / double(x.size());
}

struct MixResult {
  AudioBuffer mixture;
  AudioBuffer target;        // zero-padded and peak-gain scaled, aligned with mixture
  AudioBuffer interference;  // zero-padded, SNR-scaled and peak-gain scaled
  double interference_gain = 1.0;
  double peak_gain = 1.0;
};

// Zero-pads both sources to the longer length, scales the interference so
// 10 log10(P_target / P_interference) == snr_db, and sums. If the sum would
// clip, all three signals are scaled so the mixture peak is 0.9.
inline MixResult mix_at_snr(const AudioBuffer& target, const AudioBuffer& interference, double snr_db) {
  const double pt = signal_power(target.samples);
  const double pi = signal_power(interference.samples);
  if (!(pt > 0)) throw std::invalid_argument("mix_at_snr: silent target");
  if (!(pi > 0)) throw std::invalid_argument("mix_at_snr: silent interference");
  const std::size_t n = std::max(target.size(), interference.size());
  // Powers over the padded common length.
  const double et = pt * double(target.size()), ei = pi * double(interference.size());
  MixResult r;
  r.interference_gain = std::sqrt(et / (ei * std::pow(10.0, snr_db / 10.0)));
  std::vector<double> t(n, 0.0), s(n, 0.0), m(n);
  for (std::size_t i = 0; i < target.size(); ++i) t[i] = target.samples[i];
  for (std::size_t i = 0; i < interference.size(); ++i) s[i] = r.interference_gain * interference.samples[i];
  double peak = 0;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = t[i] + s[i];
    peak = std::max(peak, std::abs(m[i]));
  }
  if (peak > 1.0) r.peak_gain = 0.9 / peak;
  auto to_buffer = [&](const std::vector<double>& x) {
    AudioBuffer b;
    b.sample_rate = target.sample_rate;
    b.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.samples[i] = float(x[i] * r.peak_gain);
    return b;
  };
  r.mixture = to_buffer(m);
  r.target = to_buffer(t);
  r.interference = to_buffer(s);
  return r;
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string id;
  std::string mixture;       // paths relative to the dataset root
  std::string reference;
  std::string target;
  std::string interference;  // clean interfering utterance (before scaling)
  std::string speaker_id;
  int speaker_label = -1;    // classifier index; -1 for speakers unseen in training
  std::string target_class;  // "A" | "B"
  std::string interferer_id;
  std::string interferer_class;
  double snr_db = 0.0;
  double interference_gain = 1.0;
  double peak_gain = 1.0;

  // "same" or "different" class pair.
  std::string condition() const { return target_class == interferer_class ? "same" : "different"; }
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline nlohmann::ordered_json to_ordered_json(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["mixture"] = e.mixture;
  j["reference"] = e.reference;
  j["target"] = e.target;
  j["speaker_id"] = e.speaker_id;
  j["class"] = e.target_class;
  j["snr_db"] = e.snr_db;
  j["speaker_label"] = e.speaker_label;
  j["condition"] = e.condition();
  j["interference"] = e.interference;
  j["interferer_id"] = e.interferer_id;
  j["interferer_class"] = e.interferer_class;
  j["interference_gain"] = e.interference_gain;
  j["peak_gain"] = e.peak_gain;
  return j;
}

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline ManifestEntry parse_manifest_line(const std::string& line, std::size_t lineno = 0) {
  try {
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.mixture = j.at("mixture").get<std::string>();
    e.reference = j.at("reference").get<std::string>();
    e.target = j.at("target").get<std::string>();
    e.speaker_id = j.at("speaker_id").get<std::string>();
    e.target_class = j.at("class").get<std::string>();
    e.snr_db = j.at("snr_db").get<double>();
    e.id = j.value("id", std::string("line") + std::to_string(lineno));
    e.speaker_label = j.value("speaker_label", -1);
    e.interference = j.value("interference", std::string());
    e.interferer_id = j.value("interferer_id", std::string());
    e.interferer_class = j.value("interferer_class", e.target_class);
    e.interference_gain = j.value("interference_gain", 1.0);
    e.peak_gain = j.value("peak_gain", 1.0);
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw ManifestError("manifest line " + std::to_string(lineno) + ": " + ex.what());
  }
}

inline std::string emit_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    out += to_ordered_json(e).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(parse_manifest_line(line, lineno));
  }
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path));
}

// Dataset root for a manifest stored as <root>/manifests/<split>.jsonl.
inline std::filesystem::path dataset_root(const std::filesystem::path& manifest) {
  return manifest.parent_path().parent_path();
}

// ---------------------------------------------------------------------------
// Examples

struct MixtureExample {
  std::string id;
  AudioBuffer mixture;
  AudioBuffer reference;
  AudioBuffer target;
  int speaker_label = -1;
  double snr_db = 0.0;
  std::string condition = "different";
};

inline MixtureExample load_example(const ManifestEntry& e, const std::filesystem::path& root,
                                   int sample_rate = 8000) {
  MixtureExample ex;
  ex.id = e.id;
  ex.mixture = read_wav(root / e.mixture, sample_rate);
  ex.reference = read_wav(root / e.reference, sample_rate);
  ex.target = read_wav(root / e.target, sample_rate);
  if (ex.mixture.size() != ex.target.size())
    throw ManifestError(e.id + ": mixture and target lengths differ");
  ex.speaker_label = e.speaker_label;
  ex.snr_db = e.snr_db;
  ex.condition = e.condition();
  return ex;
}

inline std::vector<MixtureExample> load_examples(const std::filesystem::path& manifest,
                                                 int sample_rate = 8000) {
  const auto root = dataset_root(manifest);
  std::vector<MixtureExample> out;
  for (const auto& e : read_manifest(manifest)) out.push_back(load_example(e, root, sample_rate));
  return out;
}

// Crops (at a random offset shared by mixture and target) or zero-pads the
// tail to exactly `seconds`. The reference is left untouched.
inline MixtureExample segment_or_pad(const MixtureExample& ex, double seconds, Rng& rng) {
  const std::size_t len = std::size_t(std::llround(seconds * ex.mixture.sample_rate));
  MixtureExample out = ex;
  const std::size_t n = ex.mixture.size();
  if (n > len) {
    // Keep the crop inside the target's support so it is never silent.
    std::size_t active = ex.target.size();
    while (active > 0 && ex.target.samples[active - 1] == 0.0f) --active;
    const std::size_t last = std::min(n - len, active > len ? active - len : 0);
    const std::size_t offset = rng.index(last + 1);
    auto crop = [&](const AudioBuffer& a) {
      AudioBuffer b{{a.samples.begin() + std::ptrdiff_t(offset),
                     a.samples.begin() + std::ptrdiff_t(offset + len)},
                    a.sample_rate};
      return b;
    };
    out.mixture = crop(ex.mixture);
    out.target = crop(ex.target);
  } else if (n < len) {
    out.mixture.samples.resize(len, 0.0f);
    out.target.samples.resize(len, 0.0f);
  }
  return out;
}

// Loops (tiles) or crops the reference to exactly `seconds`.
inline AudioBuffer fit_reference(const AudioBuffer& ref, double seconds) {
  const std::size_t len = std::size_t(std::llround(seconds * ref.sample_rate));
  AudioBuffer out;
  out.sample_rate = ref.sample_rate;
  out.samples.resize(len);
  for (std::size_t i = 0; i < len; ++i) out.samples[i] = ref.samples[i % ref.size()];
  return out;
}

// ---------------------------------------------------------------------------
// Dataset simulation

struct SimulationConfig {
  std::size_t n_speakers = 12;
  std::size_t utts_per_speaker = 20;
  std::array<std::size_t, 3> split_sizes{200, 50, 50};  // train, dev, test
  std::uint64_t seed = 0;
  double min_duration_s = 2.0;
  double max_duration_s = 4.0;
  double snr_lo_db = 0.0;
  double snr_hi_db = 5.0;
  int sample_rate = 8000;

  void validate() const {
    if (n_speakers < 4)
      throw std::invalid_argument("simulate_dataset: open-condition split needs >= 4 speakers, got " +
                                  std::to_string(n_speakers));
    if (utts_per_speaker < 2)
      throw std::invalid_argument(
          "simulate_dataset: need >= 2 utterances per speaker so the reference differs from the mixed utterance");
    if (min_duration_s < 0.5 || max_duration_s < min_duration_s)
      throw std::invalid_argument("simulate_dataset: invalid duration range");
    if (!(snr_lo_db <= snr_hi_db)) throw std::invalid_argument("simulate_dataset: invalid SNR range");
    if (sample_rate <= 0) throw std::invalid_argument("simulate_dataset: sample rate must be positive");
  }
};

struct SimulatedExample {
  ManifestEntry entry;
  MixResult mix;
  AudioBuffer reference;
  AudioBuffer interference_clean;
};

struct SimulatedDataset {
  std::vector<SyntheticSpeakerSpec> speakers;
  std::vector<std::string> train_speakers;  // classifier label order
  std::vector<std::string> test_speakers;
  std::array<std::vector<SimulatedExample>, 3> splits;
  std::vector<std::vector<AudioBuffer>> utterances;  // [speaker][utt]
};

inline const char* split_name(std::size_t i) {
  static const char* names[3] = {"train", "dev", "test"};
  return names[i];
}

// Number of speakers held out for the open-condition test split.
inline std::size_t test_speaker_count(std::size_t n_speakers) {
  return std::max<std::size_t>(2, n_speakers / 3) & ~std::size_t{1};
}

// Generates the dataset in memory. Test speakers (the last speakers, half of
// each class) never appear in train/dev. For train-pool speakers the last
// quarter of the utterances (at least 2) is reserved for dev mixtures when
// there are at least 4 utterances per speaker.
inline SimulatedDataset simulate_dataset_in_memory(const SimulationConfig& cfg) {
  cfg.validate();
  SimulatedDataset ds;
  ds.speakers = make_speakers(cfg.n_speakers, cfg.seed);
  const std::size_t n_test = test_speaker_count(cfg.n_speakers);
  std::vector<std::size_t> pool, test_pool;
  for (std::size_t i = 0; i < cfg.n_speakers; ++i)
    (i < cfg.n_speakers - n_test ? pool : test_pool).push_back(i);
  for (auto i : pool) ds.train_speakers.push_back(ds.speakers[i].id);
  for (auto i : test_pool) ds.test_speakers.push_back(ds.speakers[i].id);

  ds.utterances.resize(cfg.n_speakers);
  for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
    Rng dur_rng(derive_seed(cfg.seed, 20000 + s));
    for (std::size_t u = 0; u < cfg.utts_per_speaker; ++u) {
      const double dur = dur_rng.uniform(cfg.min_duration_s, cfg.max_duration_s);
      ds.utterances[s].push_back(synth_utterance(ds.speakers[s], dur,
                                                 derive_seed(cfg.seed, 100000 + s * 1000 + u),
                                                 cfg.sample_rate));
    }
  }

  const std::size_t u = cfg.utts_per_speaker;
  const std::size_t dev_utts = u >= 4 ? std::max<std::size_t>(2, u / 4) : 0;
  auto utt_range = [&](std::size_t split) -> std::pair<std::size_t, std::size_t> {
    if (split == 0) return {0, u - dev_utts};
    if (split == 1) return dev_utts ? std::pair{u - dev_utts, u} : std::pair{std::size_t{0}, u};
    return {0, u};
  };

  for (std::size_t split = 0; split < 3; ++split) {
    Rng rng(derive_seed(cfg.seed, 300 + split));
    const auto& speakers = split == 2 ? test_pool : pool;
    const auto [u0, u1] = utt_range(split);
    for (std::size_t k = 0; k < cfg.split_sizes[split]; ++k) {
      const std::size_t t = speakers[rng.index(speakers.size())];
      std::size_t i = speakers[rng.index(speakers.size() - 1)];
      if (i == t) i = speakers.back();
      const std::size_t ut = u0 + rng.index(u1 - u0);
      std::size_t ur = u0 + rng.index(u1 - u0 - 1);
      if (ur == ut) ur = u1 - 1;
      const std::size_t ui = u0 + rng.index(u1 - u0);
      const double snr = rng.uniform(cfg.snr_lo_db, cfg.snr_hi_db);

      SimulatedExample ex;
      ex.mix = mix_at_snr(ds.utterances[t][ut], ds.utterances[i][ui], snr);
      ex.reference = ds.utterances[t][ur];
      ex.interference_clean = ds.utterances[i][ui];
      auto& e = ex.entry;
      char id[32];
      std::snprintf(id, sizeof id, "%s%04zu", split_name(split), k);
      e.id = id;
      const std::string base = std::string("wav/") + split_name(split) + "/" + e.id;
      e.mixture = base + "_mix.wav";
      e.target = base + "_target.wav";
      auto utt_path = [&](std::size_t spk, std::size_t utt) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "wav/utt/%s_u%03zu.wav", ds.speakers[spk].id.c_str(), utt);
        return std::string(buf);
      };
      e.reference = utt_path(t, ur);
      e.interference = utt_path(i, ui);
      e.speaker_id = ds.speakers[t].id;
      e.target_class = std::string(1, ds.speakers[t].class_tag);
      e.interferer_id = ds.speakers[i].id;
      e.interferer_class = std::string(1, ds.speakers[i].class_tag);
      if (split != 2) {
        e.speaker_label = int(std::find(pool.begin(), pool.end(), t) - pool.begin());
      }
      e.snr_db = snr;
      e.interference_gain = ex.mix.interference_gain;
      e.peak_gain = ex.mix.peak_gain;
      ds.splits[split].push_back(std::move(ex));
    }
  }
  return ds;
}

// In-memory counterpart of load_example. With `quantize` the signals pass
// through PCM16 so they match what load_example reads back from disk.
inline MixtureExample to_mixture_example(const SimulatedExample& sim, bool quantize = true) {
  auto q = [&](const AudioBuffer& a) {
    if (!quantize) return a;
    AudioBuffer out = a;
    for (auto& x : out.samples) x = pcm16_to_float(float_to_pcm16(x));
    return out;
  };
  MixtureExample ex;
  ex.id = sim.entry.id;
  ex.mixture = q(sim.mix.mixture);
  ex.reference = q(sim.reference);
  ex.target = q(sim.mix.target);
  ex.speaker_label = sim.entry.speaker_label;
  ex.snr_db = sim.entry.snr_db;
  ex.condition = sim.entry.condition();
  return ex;
}

inline std::vector<MixtureExample> to_mixture_examples(const std::vector<SimulatedExample>& sims,
                                                       bool quantize = true) {
  std::vector<MixtureExample> out;
  for (const auto& s : sims) out.push_back(to_mixture_example(s, quantize));
  return out;
}

struct SimulationSummary {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> mean_snr{};
  std::array<double, 3> min_snr{};
  std::array<double, 3> max_snr{};
  std::size_t train_speakers = 0;
  std::size_t test_speakers = 0;
};

// Writes out_dir/wav/{utt,train,dev,test}/*.wav and out_dir/manifests/{train,dev,test}.jsonl.
inline SimulationSummary simulate_dataset(const SimulationConfig& cfg, const std::filesystem::path& out_dir) {
  const auto ds = simulate_dataset_in_memory(cfg);
  SimulationSummary summary;
  summary.train_speakers = ds.train_speakers.size();
  summary.test_speakers = ds.test_speakers.size();
  for (std::size_t s = 0; s < ds.utterances.size(); ++s)
    for (std::size_t u = 0; u < ds.utterances[s].size(); ++u) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "wav/utt/%s_u%03zu.wav", ds.speakers[s].id.c_str(), u);
      write_wav(out_dir / buf, ds.utterances[s][u]);
    }
  for (std::size_t split = 0; split < 3; ++split) {
    std::vector<ManifestEntry> entries;
    double sum = 0, lo = 1e9, hi = -1e9;
    for (const auto& ex : ds.splits[split]) {
      write_wav(out_dir / ex.entry.mixture, ex.mix.mixture);
      write_wav(out_dir / ex.entry.target, ex.mix.target);
      entries.push_back(ex.entry);
      sum += ex.entry.snr_db;
      lo = std::min(lo, ex.entry.snr_db);
      hi = std::max(hi, ex.entry.snr_db);
    }
    write_file(out_dir / "manifests" / (std::string(split_name(split)) + ".jsonl"), emit_manifest(entries));
    summary.counts[split] = entries.size();
    summary.mean_snr[split] = entries.empty() ? 0 : sum / double(entries.size());
    summary.min_snr[split] = entries.empty() ? 0 : lo;
    summary.max_snr[split] = entries.empty() ? 0 : hi;
  }
  return summary;
}

}  // namespace spexplus
