#include <gtest/gtest.h>

#include <set>

#include "spexplus/eval.hpp"
#include "support.hpp"

using namespace spexplus;
using testing_support::TempDir;

namespace {

std::vector<MixtureExample> items(std::size_t n, std::uint64_t seed, double lo = 0.6, double hi = 1.0) {
  SimulationConfig sc;
  sc.n_speakers = 6;
  sc.utts_per_speaker = 4;
  sc.split_sizes = {n, 0, 0};
  sc.seed = seed;
  sc.min_duration_s = lo;
  sc.max_duration_s = hi;
  return to_mixture_examples(simulate_dataset_in_memory(sc).splits[0]);
}

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

// Records what the evaluator hands to the extractor.
struct Recorder {
  std::size_t min_ref_samples = 0;
  std::vector<std::size_t>* ref_sizes;
  void check_reference(std::size_t samples) const {
    if (samples < min_ref_samples) throw ShapeError("too short");
  }
  std::vector<float> operator()(const MixtureExample& ex, const AudioBuffer& ref) const {
    ref_sizes->push_back(ref.size());
    return ex.target.samples;
  }
};

}  // namespace

TEST(Evaluate, IdentityGivesZeroImprovement) {
  const auto data = items(6, 1);
  const auto r = evaluate(IdentityExtractor{}, data);
  ASSERT_EQ(r.rows.size(), 6u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.si_sdri, 0.0);
    EXPECT_EQ(row.si_sdr_in, row.si_sdr_out);
  }
  EXPECT_EQ(r.mean_si_sdri(), 0.0);
  EXPECT_NE(format_report_csv(r).find("all,6,"), std::string::npos);
}

TEST(Evaluate, OracleHitsCeiling) {
  const auto r = evaluate(OracleExtractor{}, items(4, 2));
  for (const auto& row : r.rows) EXPECT_GE(row.si_sdr_out, 80.0);
}

TEST(Evaluate, EmptyManifestGivesHeaderOnlyReport) {
  const auto r = evaluate(IdentityExtractor{}, {});
  EXPECT_TRUE(r.rows.empty());
  EXPECT_TRUE(r.histogram.empty());
  EXPECT_EQ(r.mean_si_sdri(), 0.0);
  EXPECT_EQ(format_report_csv(r),
            "id,condition,si_sdr_in,si_sdr_out,si_sdri\n\ncondition,count,si_sdr_in,si_sdr_out,si_sdri\n\n"
            "bucket_lo_db,bucket_hi_db,count\n");
  EXPECT_EQ(format_report_jsonl(r), "");
}

TEST(Evaluate, AggregatesMatchRows) {
  const auto data = items(12, 3);
  SpexPlusModel<float> model(micro_config());
  const auto r = evaluate(ModelExtractor<float>{&model}, data);
  ASSERT_EQ(r.rows.size(), 12u);
  std::set<std::string> labels;
  for (const auto& c : r.conditions) labels.insert(c.condition);
  EXPECT_EQ(labels, (std::set<std::string>{"all", "different", "same"}));

  double sum = 0;
  for (const auto& row : r.rows) sum += row.si_sdri;
  EXPECT_NEAR(r.summary("all").si_sdri, sum / 12.0, 1e-9);
  const auto& d = r.summary("different");
  const auto& s = r.summary("same");
  EXPECT_EQ(d.count + s.count, 12u);
  EXPECT_NEAR(d.si_sdri * double(d.count) + s.si_sdri * double(s.count), sum, 1e-9);

  std::size_t total = 0;
  for (const auto& b : r.histogram) {
    EXPECT_DOUBLE_EQ(b.hi_db - b.lo_db, 5.0);
    total += b.count;
  }
  EXPECT_EQ(total, 12u);
  for (const auto& row : r.rows) {
    bool placed = false;
    for (const auto& b : r.histogram) placed |= row.si_sdr_out >= b.lo_db && row.si_sdr_out < b.hi_db;
    EXPECT_TRUE(placed) << row.si_sdr_out;
  }
}

TEST(Evaluate, ReportsAreDeterministic) {
  const auto data = items(4, 4);
  TempDir dir("eval");
  for (const std::string fmt : {"csv", "jsonl"}) {
    std::string first;
    for (int run = 0; run < 2; ++run) {
      SpexPlusModel<float> model(micro_config());
      const auto path = dir / ("r" + std::to_string(run) + "." + fmt);
      report_write(evaluate(ModelExtractor<float>{&model}, data), path, fmt);
      const std::string bytes = read_file(path);
      if (run == 0) first = bytes;
      else EXPECT_EQ(bytes, first);
    }
    if (fmt == "jsonl") {
      std::istringstream in(first);
      std::string line;
      std::set<std::string> types;
      while (std::getline(in, line)) types.insert(nlohmann::json::parse(line).at("type").get<std::string>());
      EXPECT_EQ(types, (std::set<std::string>{"row", "condition", "bucket"}));
    }
  }
}

TEST(Evaluate, FourDecimalFormatting) {
  EvalReport r;
  r.rows.push_back({"u1", 1.23456, 7.0, 5.76544, "same"});
  summarize(r);
  const auto csv = format_report_csv(r);
  EXPECT_NE(csv.find("u1,same,1.2346,7.0000,5.7654\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("5.0000,10.0000,1\n"), std::string::npos) << csv;
  EXPECT_EQ(report_format_for("x.jsonl"), "jsonl");
  EXPECT_EQ(report_format_for("x.csv"), "csv");
  EXPECT_THROW(report_write(r, "/tmp/x.txt", "xml"), std::invalid_argument);
  TempDir dir("unwritable");
  write_file(dir / "plain", "x");
  EXPECT_THROW(report_write(r, dir / "plain" / "r.csv", "csv"), IoError);
}

TEST(Evaluate, ShortReferenceFailsBeforeInference) {
  auto data = items(3, 5);
  std::vector<std::size_t> seen;
  data[2].reference.samples.resize(100);
  EXPECT_THROW(evaluate(Recorder{400, &seen}, data), std::invalid_argument);
  EXPECT_TRUE(seen.empty());

  // Full-size pooling depth: 240 samples give 23 frames (< 27), 400 give 39.
  SpexPlusModel<float> full(paper_preset());
  const ModelExtractor<float> ex{&full};
  EXPECT_THROW(ex.check_reference(240), ShapeError);
  EXPECT_NO_THROW(ex.check_reference(400));
  EXPECT_NO_THROW(ex.check_reference(4000));
}

TEST(Evaluate, ExtractorLengthIsChecked) {
  struct Bad {
    void check_reference(std::size_t) const {}
    std::vector<float> operator()(const MixtureExample& ex, const AudioBuffer&) const {
      return std::vector<float>(ex.mixture.size() - 1, 0.f);
    }
  };
  EXPECT_THROW(evaluate(Bad{}, items(1, 6)), ShapeError);
}

TEST(Sweep, FitsReferencesToEachDuration) {
  const auto data = items(3, 7);
  std::vector<std::size_t> seen;
  std::vector<EvalReport> reports;
  const auto rows = reference_sweep(Recorder{0, &seen}, data, {1.0, 2.0, 4.0}, &reports);
  ASSERT_EQ(rows.size(), 3u);
  ASSERT_EQ(reports.size(), 3u);
  ASSERT_EQ(seen.size(), 9u);
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_EQ(reports[d].ref_duration_s.value(), rows[d].ref_duration_s);
    EXPECT_EQ(rows[d].count, 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(seen[d * 3 + i], std::size_t(8000 << d));
  }
  const auto table = format_sweep_table(rows);
  EXPECT_NE(table.find("ref_duration_s"), std::string::npos);
  EXPECT_NE(table.find("4.00"), std::string::npos);
  const auto csv = format_sweep_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
