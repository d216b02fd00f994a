#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "nnmil/fingerprint.hpp"
#include "test_util.hpp"

namespace nnmil {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

TEST(Cli, PlanOnStandardFingerprint) {
  test::TempDir dir;
  DataFingerprint fp;
  fp.patch_count_median = fp.patch_count_p5 = fp.patch_count_p95 = 1000;
  fp.embed_dim = 1024;
  fp.class_prevalence = {0.5, 0.5};
  fp.n_train = 10;
  std::ofstream(dir.path() / "fp.json") << json(fp).dump();
  const CliResult r = run({"plan", "--fingerprint", (dir.path() / "fp.json").string(), "--out", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json cfg = read_json(dir.path() / "config.json");
  EXPECT_EQ(cfg["bag_size"], 500);
  EXPECT_EQ(cfg["hidden_dim"], 256);
  EXPECT_EQ(cfg["stride"], 64);
  EXPECT_EQ(cfg["ensemble_chunks"], 13);
  EXPECT_TRUE(fs::exists(dir.path() / "run.json"));
}

TEST(Cli, PlanOverrides) {
  test::TempDir dir;
  DataFingerprint fp;
  fp.patch_count_median = fp.patch_count_p5 = fp.patch_count_p95 = 100;
  fp.embed_dim = 64;
  fp.class_prevalence = {0.5, 0.5};
  fp.n_train = 10;
  std::ofstream(dir.path() / "fp.json") << json(fp).dump();
  const CliResult r = run({"plan", "--fingerprint", (dir.path() / "fp.json").string(), "--override", "hidden_dim=32",
                     "--mode", "full_bag_batch1", "--out", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json cfg = read_json(dir.path() / "config.json");
  EXPECT_EQ(cfg["hidden_dim"], 32);
  EXPECT_EQ(cfg["training_mode"], "full_bag_batch1");
  const CliResult bad = run({"plan", "--fingerprint", (dir.path() / "fp.json").string(), "--override", "hidden_dim=999",
                       "--out", dir.path().string()});
  EXPECT_EQ(bad.code, 1);
}

TEST(Cli, GradCheckPasses) {
  const CliResult r = run({"gradcheck", "--dims", "8x4", "--task", "classification"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pos = r.out.find("max relative error ");
  ASSERT_NE(pos, std::string::npos) << r.out;
  EXPECT_LT(std::stod(r.out.substr(pos + 19)), 1e-4);
}

TEST(Cli, UnknownSubcommandIsUsageError) {
  const CliResult r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE((r.out + r.err).empty());
  EXPECT_EQ(run({}).code, 1);
}

TEST(Cli, MissingInputIsIoError) {
  test::TempDir dir;
  const CliResult r = run({"fingerprint", "--manifest", (dir.path() / "nope.json").string(), "--out",
                     dir.path().string()});
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST(Cli, CorruptCheckpointIsIoFailure) {
  test::TempDir dir;
  ASSERT_EQ(run({"synth", "--out", (dir.path() / "d").string(), "--n-bags", "20", "--embed-dim", "8",
                 "--min-patches", "5", "--max-patches", "8"})
                .code,
            0);
  std::ofstream(dir.path() / "bad.nnmil", std::ios::binary) << "NNMILCK1\x05";
  const CliResult r = run({"predict", "--manifest", (dir.path() / "d" / "manifest.json").string(), "--checkpoint",
                     (dir.path() / "bad.nnmil").string(), "--out", (dir.path() / "p").string()});
  EXPECT_EQ(r.code, 2) << r.err;
}

void pipeline(const fs::path& root, const std::string& task) {
  const std::string data = (root / "data").string();
  auto ok = [](const CliResult& r) { ASSERT_EQ(r.code, 0) << r.err; };
  ok(run({"synth", "--out", data, "--task", task, "--n-bags", "60", "--embed-dim", "16", "--min-patches", "8",
          "--max-patches", "20", "--signal-strength", "2", "--seed", "5"}));
  ok(run({"fingerprint", "--manifest", data + "/manifest.json", "--out", (root / "fp").string()}));
  ok(run({"plan", "--fingerprint", (root / "fp" / "fingerprint.json").string(), "--override", "hidden_dim=8",
          "--override", "max_epochs=6", "--task", task, "--out", (root / "plan").string()}));
  ok(run({"train", "--manifest", data + "/manifest.json", "--config", (root / "plan" / "config.json").string(),
          "--quiet", "--out", (root / "train").string()}));
  ok(run({"predict", "--manifest", data + "/manifest.json", "--checkpoint",
          (root / "train" / "checkpoint.nnmil").string(), "--out", (root / "pred").string()}));
  ok(run({"evaluate", "--predictions", (root / "pred" / "predictions.jsonl").string(), "--n-bootstrap", "50",
          "--out", (root / "eval").string()}));
  ok(run({"reject-curve", "--predictions", (root / "pred" / "predictions.jsonl").string(), "--out",
          (root / "rej").string()}));
}

TEST(Cli, EndToEndClassification) {
  test::TempDir dir;
  pipeline(dir.path(), "classification");
  const json ev = read_json(dir.path() / "eval" / "evaluation.json");
  EXPECT_TRUE(ev.dump().find("auc") != std::string::npos);
  std::ifstream preds(dir.path() / "pred" / "predictions.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(preds, line)) {
    const json p = json::parse(line);
    EXPECT_TRUE(p.contains("uncertainty"));
    ++n;
  }
  EXPECT_EQ(n, 10u);  // 5 per class from 30 + 30
  EXPECT_TRUE(fs::exists(dir.path() / "rej" / "rejection.csv"));
}

TEST(Cli, EndToEndSurvivalAndRegression) {
  for (const std::string task : {"survival", "regression"}) {
    test::TempDir dir;
    pipeline(dir.path(), task);
    EXPECT_TRUE(fs::exists(dir.path() / "eval" / "evaluation.json")) << task;
    if (task == "survival") {
      EXPECT_TRUE(fs::exists(dir.path() / "eval" / "km_high.csv"));
    }
  }
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  test::TempDir a, b;
  pipeline(a.path(), "classification");
  pipeline(b.path(), "classification");
  for (const char* rel : {"data/manifest.json", "fp/fingerprint.json", "plan/config.json", "train/checkpoint.nnmil",
                          "pred/predictions.jsonl", "eval/evaluation.json",
                          "rej/rejection.csv"}) {
    EXPECT_EQ(test::read_bytes(a.path() / rel), test::read_bytes(b.path() / rel)) << rel;
  }
  // The report differs only in the recorded checkpoint location.
  json ra = read_json(a.path() / "train" / "report.json"), rb = read_json(b.path() / "train" / "report.json");
  ra.erase("checkpoint_path");
  rb.erase("checkpoint_path");
  EXPECT_EQ(ra, rb);
}

}  // namespace
}  // namespace nnmil
