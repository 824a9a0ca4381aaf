#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "bodymetric/cli.hpp"
#include "support/synthetic.hpp"

using namespace bodymetric;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bodymetric");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("bodymetric_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    bodymetric::testing::SyntheticConfig sc;
    sc.prompts = 20;
    sc.dim = 8;
    sc.seed = 9;
    bodymetric::testing::write_synthetic(bodymetric::testing::make_synthetic(sc), dir_);
    write_file_atomic(dir_ / "config.json",
                      std::string(R"({"steps": 6, "peak_lr": 0.001, "warmup": 2, "batch": 8, "eval_interval": 3,)"
                                  R"( "scorer": {"dim": 8, "body_hidden": 4, "merge_hidden": 4, "regression_hidden": 2}})"));
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  void prepare() {
    ASSERT_EQ(run_cli({"consolidate", "--records", p("records.jsonl"), "--out", p("c.jsonl")}).code, 0);
    ASSERT_EQ(run_cli({"split", "--seed", "2", "--records", p("c.jsonl"), "--out", p("s.jsonl")}).code, 0);
  }

  CliResult train(const std::vector<std::string>& extra = {}) {
    std::vector<std::string> args{"train", "--seed", "2", "--config", p("config.json"), "--records", p("s.jsonl"),
                                  "--emb", p("emb"), "--checkpoint", p("m.bmck")};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  }

  fs::path dir_;
};

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({"consolidate", "--bogus", "x"}).code, 1);
  const auto missing = run_cli({"consolidate"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("--records"), std::string::npos);
}

TEST(Cli, MissingInputIsDataError) {
  EXPECT_EQ(run_cli({"consolidate", "--records", "/nonexistent/records.jsonl", "--out", "/tmp/x"}).code, 2);
}

TEST(Cli, SelftestPasses) {
  const auto r = run_cli({"selftest"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST_F(CliTest, DataStagesAreIdempotent) {
  prepare();
  ASSERT_EQ(run_cli({"consolidate", "--records", p("c.jsonl"), "--out", p("c2.jsonl")}).code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "c.jsonl"), read_file_bytes(dir_ / "c2.jsonl"));
  ASSERT_EQ(run_cli({"split", "--seed", "2", "--records", p("s.jsonl"), "--out", p("s2.jsonl")}).code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "s.jsonl"), read_file_bytes(dir_ / "s2.jsonl"));
  ASSERT_EQ(run_cli({"pairs", "--seed", "2", "--records", p("s.jsonl"), "--out", p("p.jsonl")}).code, 0);
  ASSERT_EQ(run_cli({"pairs", "--seed", "2", "--records", p("s.jsonl"), "--out", p("p2.jsonl")}).code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "p.jsonl"), read_file_bytes(dir_ / "p2.jsonl"));
}

TEST_F(CliTest, SplitReportsPromptCounts) {
  ASSERT_EQ(run_cli({"consolidate", "--records", p("records.jsonl"), "--out", p("c.jsonl")}).code, 0);
  const auto r = run_cli({"split", "--ratios", "0.5", "0.25", "0.25", "--records", p("c.jsonl"), "--out", p("s.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["prompts"]["train"], 10);
  EXPECT_EQ(j["prompts"]["val"], 5);
  EXPECT_EQ(j["prompts"]["test"], 5);
  EXPECT_EQ(run_cli({"split", "--ratios", "0.5", "0.5", "0.5", "--records", p("c.jsonl"), "--out", p("x.jsonl")}).code, 2);
}

TEST_F(CliTest, FilterCountsReasons) {
  std::vector<RealismRecord> recs(3);
  const DetectionSummary d[] = {{1, 1, 0.99}, {4, 1, 0.99}, {1, 1, 0.5}};
  for (int i = 0; i < 3; ++i) {
    recs[i].id = "r" + std::to_string(i);
    recs[i].prompt = "x";
    recs[i].prompt_id = "x";
    recs[i].detection = d[i];
  }
  store_records(recs, dir_ / "det.jsonl");
  const auto r = run_cli({"filter", "--records", p("det.jsonl"), "--out", p("kept.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["kept"], 1);
  EXPECT_EQ(j["dropped"]["A"], 1);
  EXPECT_EQ(j["dropped"]["C"], 1);
  EXPECT_EQ(load_records(dir_ / "kept.jsonl").size(), 1u);
}

TEST_F(CliTest, TrainEvalScoreRankBenchmark) {
  prepare();
  const auto t = train({"--out", p("log.json")});
  ASSERT_EQ(t.code, 0) << t.err;
  const auto log = nlohmann::json::parse(t.out);
  EXPECT_TRUE(log.contains("best_step"));
  EXPECT_EQ(nlohmann::json::parse(read_file_text(dir_ / "log.json"))["losses"].size(), 6u);

  const auto e = run_cli({"eval", "--seed", "2", "--records", p("s.jsonl"), "--emb", p("emb"), "--checkpoint",
                          p("m.bmck"), "--out", p("eval")});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = nlohmann::json::parse(e.out);
  EXPECT_EQ(report["eval_set"], "test");
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "report.json"));
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "curve.csv"));

  const auto fixed = run_cli({"eval", "--seed", "2", "--threshold", "0.3", "--records", p("s.jsonl"), "--emb",
                              p("emb"), "--checkpoint", p("m.bmck")});
  ASSERT_EQ(fixed.code, 0) << fixed.err;
  EXPECT_EQ(nlohmann::json::parse(fixed.out)["t"], 0.3);

  const auto s = run_cli({"score", "--records", p("s.jsonl"), "--emb", p("emb"), "--checkpoint", p("m.bmck")});
  ASSERT_EQ(s.code, 0) << s.err;
  std::size_t lines = 0;
  std::istringstream in(s.out);
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("score") && j.contains("cosine"));
    ++lines;
  }
  EXPECT_EQ(lines, 200u);

  const auto r = run_cli({"rank", "--records", p("s.jsonl"), "--emb", p("emb"), "--checkpoint", p("m.bmck")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out.substr(0, r.out.find('\n')))["ranking"].size(), 10u);

  const auto b = run_cli({"benchmark", "--records", p("s.jsonl"), "--emb", p("emb"), "--checkpoint", p("m.bmck"),
                          "--out", p("bench")});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(b.out.find("gen0"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "bench" / "benchmark.json"));
}

TEST_F(CliTest, BenchmarkFromScoreFixture) {
  write_file_atomic(dir_ / "scores.jsonl", std::string(R"({"generator": "SD-XL", "score": 0.92}
{"generator": "SD-1.4", "score": -0.45}
{"generator": "Wuerstchen", "score": 0.69}
{"generator": "SD-2.1", "score": -0.25}
{"generator": "SD-XL-T", "score": -0.26}
)"));
  const auto r = run_cli({"benchmark", "--scores", p("scores.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = r.out.find("SD-1.4"), b = r.out.find("SD-XL-T"), c = r.out.find("SD-2.1"),
             d = r.out.find("Wuerstchen"), e = r.out.find("SD-XL ");
  EXPECT_LT(a, b);
  EXPECT_LT(b, c);
  EXPECT_LT(c, d);
  EXPECT_LT(d, e);
}

TEST_F(CliTest, ConfigRejectsUnknownKey) {
  prepare();
  write_file_atomic(dir_ / "bad.json", std::string(R"({"steps": 2, "learning_rate": 0.1})"));
  const auto r = run_cli({"train", "--config", p("bad.json"), "--records", p("s.jsonl"), "--emb", p("emb"),
                          "--checkpoint", p("m.bmck")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainNeedsSplitTags) {
  ASSERT_EQ(run_cli({"consolidate", "--records", p("records.jsonl"), "--out", p("c.jsonl")}).code, 0);
  const auto r = run_cli({"train", "--config", p("config.json"), "--records", p("c.jsonl"), "--emb", p("emb"),
                          "--checkpoint", p("m.bmck")});
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, CorruptEmbeddingStoreIsDataError) {
  prepare();
  auto bytes = read_file_bytes(dir_ / "emb" / "img.emb");
  bytes.resize(bytes.size() - 5);
  write_file_atomic(dir_ / "emb" / "img.emb", bytes);
  const auto r = train();
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("img.emb"), std::string::npos) << r.err;
}

TEST_F(CliTest, NonFiniteTrainingIsNumericError) {
  prepare();
  auto img = load_embeddings(dir_ / "emb" / "img.emb");
  EmbeddingTable poisoned(img.dim());
  for (const auto& id : img.ids()) {
    auto v = img.get(id);
    v[0] = std::numeric_limits<double>::infinity();
    poisoned.add(id, std::span<const double>(v));
  }
  store_embeddings(poisoned, dir_ / "emb" / "img.emb");
  const auto r = train();
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(CliTest, TrainHonorsSeed) {
  prepare();
  ASSERT_EQ(train().code, 0);
  const auto first = read_file_bytes(dir_ / "m.bmck");
  ASSERT_EQ(train().code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "m.bmck"), first);
  ASSERT_EQ(run_cli({"train", "--seed", "3", "--config", p("config.json"), "--records", p("s.jsonl"), "--emb",
                     p("emb"), "--checkpoint", p("m3.bmck")})
                .code,
            0);
  EXPECT_NE(read_file_bytes(dir_ / "m3.bmck"), first);
}
