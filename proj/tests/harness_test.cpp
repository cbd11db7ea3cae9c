#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <gtest/gtest.h>

#include "pbd/harness.hpp"

namespace pbd {
namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("pbd_harness_" + std::to_string(::getpid()) + "_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// A model and corpus small enough for a run to take well under a second.
ExperimentConfig tiny_config() {
  return parse_config_text(R"(
version = 1
task = summarization
train_size = 30
test_size = 4
base_size = 20
background_replicas = 1
triggers = x-M
virtual_tokens = 2
seeds = 1
pretrain_epochs = 1
tune_epochs = 1
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 8
max_new_tokens = 6
)");
}

TEST(Config, ParsesListsCommentsAndDefaults) {
  const auto c = parse_config_text(R"(
# desk grid
version = 1
task = completion     # trailing comment
poison_fractions = 0, 0.05 ,0.1
virtual_tokens = 8,32
strategies = fixed, floating, pieces:3
seeds = 1,2,3
sentence_boundary = true
precision = double
)");
  EXPECT_EQ(c.task, Task::completion);
  EXPECT_EQ(c.poison_fractions, (std::vector<double>{0, 0.05, 0.1}));
  EXPECT_EQ(c.virtual_tokens, (std::vector<std::size_t>{8, 32}));
  EXPECT_EQ(c.strategies.size(), 3u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_TRUE(c.sentence_boundary);
  EXPECT_EQ(c.precision, "double");
  EXPECT_EQ(c.train_size, 500u);
  EXPECT_EQ(c.point_count(), 54u);
}

std::string config_error(const std::string& text) {
  try {
    parse_config_text(text, "cfg");
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

TEST(Config, RejectsBadInput) {
  EXPECT_EQ(config_error("version = 1\nbogus = 3\n"), "cfg:2: unknown key 'bogus'");
  EXPECT_EQ(config_error("version = 1\nseeds = 1\nseeds = 2\n"), "cfg:3: duplicate key 'seeds'");
  EXPECT_EQ(config_error("task = summarization\n"), "cfg: missing version");
  EXPECT_EQ(config_error("version = 2\n"), "cfg: unsupported config version 2");
  EXPECT_EQ(config_error("version = 1\nlonely line\n"), "cfg:2: expected key = value");
  EXPECT_EQ(config_error("version = 1\ntrain_size = ten\n"), "cfg:2: train_size: 'ten' is not a non-negative integer");
  EXPECT_EQ(config_error("version = 1\nseeds = 1,,2\n"), "cfg:2: seeds: empty list element");
  EXPECT_EQ(config_error("version = 1\ntriggers = nope\n"), "unknown trigger 'nope'");
  EXPECT_EQ(config_error("version = 1\npoison_fractions = 1\n"), "config: poison fractions must be in [0, 1)");
  EXPECT_EQ(config_error("version = 1\nd_model = 10\nn_heads = 3\n"), "config: d_model must be divisible by n_heads");
  EXPECT_EQ(config_error("version = 1\ndataset = a.jsonl\n"), "config: dataset and test_dataset must be given together");
}

TEST(Config, TextFormRoundTrips) {
  auto c = tiny_config();
  c.trigger_scales = {0.25, 1};
  c.strategies = {"fixed", "pieces:2"};
  c.tune_lr = 0.05;
  const auto back = parse_config_text(to_text(c));
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_EQ(back.trigger_scales, c.trigger_scales);
  EXPECT_EQ(back.tune_lr, c.tune_lr);
}

TEST(Sweep, PointCountAndOrder) {
  auto c = tiny_config();
  c.virtual_tokens = {20, 80};
  c.poison_fractions = {0.05};
  c.seeds = {1, 2, 3};
  const auto pts = sweep_points(c);
  ASSERT_EQ(pts.size(), 6u);
  EXPECT_EQ(pts[0].virtual_tokens, 20u);
  EXPECT_EQ(pts[0].seed, 1u);
  EXPECT_EQ(pts[2].seed, 3u);
  EXPECT_EQ(pts[3].virtual_tokens, 80u);
  c.poison_fractions = {0.05};
  c.virtual_tokens = {50};
  EXPECT_EQ(sweep_points(c).size(), 3u);
  c.seeds = {1};
  EXPECT_EQ(sweep_points(c).size(), 1u);
  c.seeds = {1, 2, 3, 4, 5};
  c.virtual_tokens = {1, 2, 3, 4, 5};
  c.sweep_cap = 24;
  try {
    sweep_points(c);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "sweep has 25 points, above the cap of 24");
  }
}

TEST(BaseCorpus, DeterministicWithNotesAtVaryingOffsets) {
  const auto a = base_corpus(Task::summarization, 10, 4, 5);
  EXPECT_EQ(a.samples, base_corpus(Task::summarization, 10, 4, 5).samples);
  EXPECT_EQ(a.size(), 10 + 5 * background_notes().size());
  std::set<std::size_t> lengths;
  for (std::size_t i = 10; i < a.size(); ++i) {
    if (a[i].output_text == default_target_output()) lengths.insert(tokenize_words(a[i].input_text).size());
  }
  EXPECT_GT(lengths.size(), 1u);
  // task part is disjoint from the attack train stream of the same seed
  EXPECT_NE(a[0].input_text, generate_synthetic(Task::summarization, 1, 4)[0].input_text);
}

TEST(RunSingle, WritesArtifactsAndHitsCache) {
  TempDir tmp("run");
  const auto c = tiny_config();
  RunOptions o{tmp.path};
  RunPoint p;
  p.virtual_tokens = 2;
  const auto r1 = run_single(c, p, o);
  EXPECT_EQ(r1.point.virtual_tokens, 2u);
  // P = round(0.1 * 30 / 0.9) = 3; measured percent within one sample
  EXPECT_EQ(r1.n_poison, 3u);
  EXPECT_LE(std::abs(r1.measured_poison_pct / 100.0 * 33 - 0.1 * 33), 1.0);
  EXPECT_EQ(r1.trigger_tokens, find_trigger("x-M").size());
  const fs::path dir = tmp.path / "runs" / (r1.name + "-" + r1.key.substr(0, 8));
  for (const auto& a : r1.artifacts) EXPECT_TRUE(fs::exists(dir / a)) << a;
  EXPECT_TRUE(fs::exists(tmp.path / "cache"));

  const std::string before = read_file(dir / "record.json");
  const auto r2 = run_single(c, p, o);
  EXPECT_EQ(to_json(r2).dump(), to_json(r1).dump());
  EXPECT_EQ(read_file(dir / "record.json"), before);

  // a forced rerun recomputes the same numbers
  RunOptions forced = o;
  forced.force = true;
  const auto r3 = run_single(c, p, forced);
  EXPECT_EQ(r3.phi_checksum, r1.phi_checksum);
  EXPECT_EQ(r3.metrics.p_target_match, r1.metrics.p_target_match);
}

TEST(RunSingle, ControlAndDistinctDirectories) {
  TempDir tmp("ctrl");
  auto c = tiny_config();
  c.poison_fractions = {0, 0.1};
  const auto recs = sweep(c, RunOptions{tmp.path});
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].n_poison, 0u);
  EXPECT_EQ(recs[0].measured_poison_pct, 0.0);
  EXPECT_GT(recs[1].n_poison, 0u);
  EXPECT_NE(recs[0].key, recs[1].key);
  // both points share one pretrained base
  EXPECT_EQ(recs[0].base_key, recs[1].base_key);
  EXPECT_EQ(recs[0].theta_checksum, recs[1].theta_checksum);
  std::size_t dirs = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path / "runs")) ++dirs;
  EXPECT_EQ(dirs, 2u);
}

TEST(RunSingle, CacheDirFromEnvironment) {
  TempDir tmp("env");
  const fs::path cache = tmp.path / "elsewhere";
  ::setenv("PBD_CACHE_DIR", cache.c_str(), 1);
  run_single(tiny_config(), RunPoint{"x-M", 1.0, "fixed", 0.1, 2, 1}, RunOptions{tmp.path / "out"});
  ::unsetenv("PBD_CACHE_DIR");
  EXPECT_TRUE(fs::exists(cache));
  EXPECT_FALSE(fs::exists(tmp.path / "out" / "cache"));
}

TEST(RunSingle, StageErrorsNameTheStage) {
  TempDir tmp("err");
  auto c = tiny_config();
  c.dataset = (tmp.path / "missing.jsonl").string();
  c.test_dataset = (tmp.path / "missing_test.jsonl").string();
  try {
    run_single(c, RunPoint{}, RunOptions{tmp.path});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("run x-M_z1.0_fixed_p0.1_m32_s1: stage data failed: ", 0), 0u) << e.what();
  }
  c = tiny_config();
  c.max_len = 40;  // poisoned pairs no longer fit
  try {
    run_single(c, RunPoint{"b-M", 1.0, "fixed", 0.1, 2, 1}, RunOptions{tmp.path});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(": stage "), std::string::npos) << e.what();
  }
}

RunRecord fake_record(const std::string& trigger, std::size_t m, std::uint64_t seed, double p_tm) {
  RunRecord r;
  r.point = RunPoint{trigger, 1.0, "fixed", 0.1, m, seed};
  r.name = run_name(r.point);
  r.key = hex64(fnv1a(r.name));
  r.metrics.p_target_match = p_tm;
  r.metrics.c_rouge1.f1 = 0.5;
  r.wall_clock_s = static_cast<double>(seed);
  return r;
}

TEST(Trends, PairwiseSignCounts) {
  // m=32 beats m=8 on seeds 1 and 2, loses on seed 3
  const std::vector<RunRecord> recs{fake_record("x-M", 8, 1, 0.2),  fake_record("x-M", 8, 2, 0.3),
                                    fake_record("x-M", 8, 3, 0.9),  fake_record("x-M", 32, 1, 0.8),
                                    fake_record("x-M", 32, 2, 0.3), fake_record("x-M", 32, 3, 0.5)};
  const auto t = trend_summary(recs, [](const RunRecord& r) { return r.metrics.p_target_match; });
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].axis, "virtual_tokens");
  EXPECT_EQ(t[0].a, "8");
  EXPECT_EQ(t[0].b, "32");
  EXPECT_EQ(t[0].n, 3u);
  EXPECT_EQ(t[0].b_ge_a, 2u);
  EXPECT_EQ(t[0].a_ge_b, 2u);  // the tie counts both ways
  EXPECT_EQ(t[0].seeds_b_ge_a, 2u);
}

TEST(Report, StableColumnsBestRowAndByteIdenticalReemit) {
  TempDir tmp("report");
  std::vector<RunRecord> recs{fake_record("x-M", 8, 1, 0.2), fake_record("b-cf", 32, 1, 0.7),
                              fake_record("x-M", 32, 1, 0.4)};
  recs[1].point.strategy = "pieces:3";
  const auto f1 = emit_report(recs, tmp.path / "a", 10);
  const auto f2 = emit_report(recs, tmp.path / "b", 10);
  EXPECT_EQ(read_file(f1.csv), read_file(f2.csv));
  EXPECT_EQ(read_file(f1.summary), read_file(f2.summary));
  for (std::size_t i = 0; i < f1.series.size(); ++i) EXPECT_EQ(read_file(f1.series[i]), read_file(f2.series[i]));
  std::istringstream csv(read_file(f1.csv));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1,
              record_csv_columns().size());
    ++rows;
  }
  EXPECT_EQ(rows, 4u);
  const auto summary = read_json_file(f1.summary);
  EXPECT_EQ(summary["best_attack"]["name"], recs[1].name);
  EXPECT_EQ(summary["best_attack"]["p_target_match"], 0.7);
  // wall-clock never reaches the CSV
  recs[0].wall_clock_s = 99;
  emit_report(recs, tmp.path / "c", 10);
  EXPECT_EQ(read_file(tmp.path / "c" / "results.csv"), read_file(f1.csv));
  EXPECT_THROW(emit_report({}, tmp.path / "d", 10), Error);
}

TEST(Report, RecordJsonRoundTrip) {
  auto r = fake_record("x-M", 8, 2, 0.25);
  r.hyper = {{"a", 1}};
  r.artifacts = {"x"};
  r.tune_loss = {2.0, 1.0};
  EXPECT_EQ(to_json(run_record_from_json(nlohmann::ordered_json::parse(to_json(r).dump()))).dump(), to_json(r).dump());
}

}  // namespace
}  // namespace pbd
