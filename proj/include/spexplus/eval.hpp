// Batch evaluation: SI-SDR in/out/improvement per utterance, per-condition
// means, 5 dB histogram of output SI-SDR, and reference-duration sweeps.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spexplus/audio.hpp"
#include "spexplus/data.hpp"
#include "spexplus/loss.hpp"
#include "spexplus/model.hpp"

namespace spexplus {

inline constexpr double kHistogramWidthDb = 5.0;

struct EvalRow {
  std::string id;
  double si_sdr_in = 0;
  double si_sdr_out = 0;
  double si_sdri = 0;
  std::string condition;
};

struct ConditionSummary {
  std::string condition;
  std::size_t count = 0;
  double si_sdr_in = 0;
  double si_sdr_out = 0;
  double si_sdri = 0;
};

struct HistogramBucket {
  double lo_db = 0;  // [lo, lo + width)
  double hi_db = 0;
  std::size_t count = 0;
};

struct EvalReport {
  std::optional<double> ref_duration_s;
  std::vector<EvalRow> rows;
  std::vector<ConditionSummary> conditions;  // "different", "same", then "all"
  std::vector<HistogramBucket> histogram;

  const ConditionSummary& summary(const std::string& condition) const {
    for (const auto& c : conditions)
      if (c.condition == condition) return c;
    throw std::out_of_range("no condition " + condition);
  }
  double mean_si_sdri() const { return rows.empty() ? 0.0 : summary("all").si_sdri; }
};

// Fills the aggregate sections from the rows.
inline void summarize(EvalReport& r) {
  r.conditions.clear();
  r.histogram.clear();
  if (r.rows.empty()) return;
  for (const char* name : {"different", "same", "all"}) {
    ConditionSummary c{name};
    for (const auto& row : r.rows) {
      if (c.condition != "all" && row.condition != c.condition) continue;
      ++c.count;
      c.si_sdr_in += row.si_sdr_in;
      c.si_sdr_out += row.si_sdr_out;
      c.si_sdri += row.si_sdri;
    }
    if (c.count) {
      c.si_sdr_in /= double(c.count);
      c.si_sdr_out /= double(c.count);
      c.si_sdri /= double(c.count);
    }
    r.conditions.push_back(c);
  }
  std::map<long long, std::size_t> counts;
  for (const auto& row : r.rows) ++counts[(long long)std::floor(row.si_sdr_out / kHistogramWidthDb)];
  const long long first = counts.begin()->first, last = counts.rbegin()->first;
  for (long long b = first; b <= last; ++b) {
    const auto it = counts.find(b);
    r.histogram.push_back({double(b) * kHistogramWidthDb, double(b + 1) * kHistogramWidthDb,
                           it == counts.end() ? 0 : it->second});
  }
}

// ---------------------------------------------------------------------------
// Extractors: callables producing s1 for (mixture, reference), plus a
// reference-length check run before any inference.

struct IdentityExtractor {
  void check_reference(std::size_t) const {}
  std::vector<float> operator()(const MixtureExample& ex, const AudioBuffer&) const { return ex.mixture.samples; }
};

struct OracleExtractor {
  void check_reference(std::size_t) const {}
  std::vector<float> operator()(const MixtureExample& ex, const AudioBuffer&) const { return ex.target.samples; }
};

template <typename T = float>
struct ModelExtractor {
  SpexPlusModel<T>* model;

  void check_reference(std::size_t samples) const { model->config().check_reference_length(samples); }
  std::vector<float> operator()(const MixtureExample& ex, const AudioBuffer& ref) const {
    model->set_training(false);
    const std::vector<T> mix(ex.mixture.samples.begin(), ex.mixture.samples.end());
    const std::vector<T> r(ref.samples.begin(), ref.samples.end());
    const auto s1 = model->infer(std::span<const T>(mix), std::span<const T>(r));
    return {s1.begin(), s1.end()};
  }
};

// Runs the extractor over full-length mixtures. With `ref_duration_s` each
// reference is cropped or looped to that duration first.
template <typename Extractor>
EvalReport evaluate(const Extractor& extract, const std::vector<MixtureExample>& items,
                    std::optional<double> ref_duration_s = std::nullopt) {
  EvalReport report;
  report.ref_duration_s = ref_duration_s;
  std::vector<AudioBuffer> refs;
  refs.reserve(items.size());
  for (const auto& ex : items) {
    refs.push_back(ref_duration_s ? fit_reference(ex.reference, *ref_duration_s) : ex.reference);
    try {
      extract.check_reference(refs.back().size());
    } catch (const std::exception& e) {
      throw std::invalid_argument(ex.id + ": " + e.what());
    }
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& ex = items[i];
    const std::vector<float> s1 = extract(ex, refs[i]);
    if (s1.size() != ex.mixture.size())
      throw ShapeError(ex.id + ": extractor returned " + std::to_string(s1.size()) + " samples for a " +
                       std::to_string(ex.mixture.size()) + "-sample mixture");
    EvalRow row;
    row.id = ex.id;
    row.condition = ex.condition;
    row.si_sdr_in = si_sdr(ex.mixture.samples, ex.target.samples);
    row.si_sdr_out = si_sdr(s1, ex.target.samples);
    row.si_sdri = row.si_sdr_out - row.si_sdr_in;
    report.rows.push_back(std::move(row));
  }
  summarize(report);
  return report;
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

inline std::string fmt4(double x) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return std::string(buf) == "-0.0000" ? "0.0000" : buf;
}

inline std::string json_str(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace detail

inline std::string format_report_csv(const EvalReport& r) {
  using detail::fmt4;
  std::string s = "id,condition,si_sdr_in,si_sdr_out,si_sdri\n";
  for (const auto& row : r.rows)
    s += row.id + "," + row.condition + "," + fmt4(row.si_sdr_in) + "," + fmt4(row.si_sdr_out) + "," +
         fmt4(row.si_sdri) + "\n";
  s += "\ncondition,count,si_sdr_in,si_sdr_out,si_sdri\n";
  for (const auto& c : r.conditions)
    s += c.condition + "," + std::to_string(c.count) + "," + fmt4(c.si_sdr_in) + "," + fmt4(c.si_sdr_out) +
         "," + fmt4(c.si_sdri) + "\n";
  s += "\nbucket_lo_db,bucket_hi_db,count\n";
  for (const auto& b : r.histogram) s += fmt4(b.lo_db) + "," + fmt4(b.hi_db) + "," + std::to_string(b.count) + "\n";
  return s;
}

inline std::string format_report_jsonl(const EvalReport& r) {
  using detail::fmt4;
  using detail::json_str;
  std::string s;
  for (const auto& row : r.rows)
    s += "{\"type\":\"row\",\"id\":" + json_str(row.id) + ",\"condition\":" + json_str(row.condition) +
         ",\"si_sdr_in\":" + fmt4(row.si_sdr_in) + ",\"si_sdr_out\":" + fmt4(row.si_sdr_out) +
         ",\"si_sdri\":" + fmt4(row.si_sdri) + "}\n";
  for (const auto& c : r.conditions)
    s += "{\"type\":\"condition\",\"condition\":" + json_str(c.condition) + ",\"count\":" +
         std::to_string(c.count) + ",\"si_sdr_in\":" + fmt4(c.si_sdr_in) + ",\"si_sdr_out\":" +
         fmt4(c.si_sdr_out) + ",\"si_sdri\":" + fmt4(c.si_sdri) + "}\n";
  for (const auto& b : r.histogram)
    s += "{\"type\":\"bucket\",\"lo_db\":" + fmt4(b.lo_db) + ",\"hi_db\":" + fmt4(b.hi_db) +
         ",\"count\":" + std::to_string(b.count) + "}\n";
  return s;
}

inline void report_write(const EvalReport& r, const std::filesystem::path& path, const std::string& format) {
  if (format == "csv") {
    write_file(path, format_report_csv(r));
  } else if (format == "jsonl") {
    write_file(path, format_report_jsonl(r));
  } else {
    throw std::invalid_argument("report format must be csv or jsonl, got '" + format + "'");
  }
}

// csv unless the extension is .jsonl / .json
inline std::string report_format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".jsonl" || ext == ".json" ? "jsonl" : "csv";
}

// ---------------------------------------------------------------------------
// Reference-duration sweep

struct SweepRow {
  double ref_duration_s = 0;
  std::size_t count = 0;
  double si_sdr_out = 0;
  double si_sdri = 0;
  double si_sdri_different = 0;
  double si_sdri_same = 0;
};

template <typename Extractor>
std::vector<SweepRow> reference_sweep(const Extractor& extract, const std::vector<MixtureExample>& items,
                                      const std::vector<double>& durations,
                                      std::vector<EvalReport>* reports = nullptr) {
  std::vector<SweepRow> out;
  for (double d : durations) {
    EvalReport r = evaluate(extract, items, d);
    SweepRow row{d, r.rows.size()};
    if (!r.rows.empty()) {
      row.si_sdr_out = r.summary("all").si_sdr_out;
      row.si_sdri = r.summary("all").si_sdri;
      row.si_sdri_different = r.summary("different").si_sdri;
      row.si_sdri_same = r.summary("same").si_sdri;
    }
    out.push_back(row);
    if (reports) reports->push_back(std::move(r));
  }
  return out;
}

inline std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::string s;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %6s %12s %10s %10s %10s\n", "ref_duration_s", "count", "si_sdr_out",
                "si_sdri", "diff", "same");
  s += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-14.2f %6zu %12.4f %10.4f %10.4f %10.4f\n", r.ref_duration_s, r.count,
                  r.si_sdr_out, r.si_sdri, r.si_sdri_different, r.si_sdri_same);
    s += buf;
  }
  return s;
}

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  using detail::fmt4;
  std::string s = "ref_duration_s,count,si_sdr_out,si_sdri,si_sdri_different,si_sdri_same\n";
  for (const auto& r : rows)
    s += fmt4(r.ref_duration_s) + "," + std::to_string(r.count) + "," + fmt4(r.si_sdr_out) + "," +
         fmt4(r.si_sdri) + "," + fmt4(r.si_sdri_different) + "," + fmt4(r.si_sdri_same) + "\n";
  return s;
}

}  // namespace spexplus
