#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <map>
#include <sstream>

#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

RunResult run(const std::vector<std::string>& args, const fs::path& scratch) {
  std::string cmd = quote(DEEPCARVE_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = oracle::read_file(out);
  r.err = oracle::read_file(err);
  return r;
}

std::string sample(const std::string& name) { return (fs::path(DEEPCARVE_SAMPLES_DIR) / name).string(); }

// Builds the small sample dataset once per test binary.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    shared_ = new oracle::TempDir("cli_shared");
    const auto r = run({"gen-data", "--spec", sample("tiny_data.cfg"), "--out", data().string()}, shared_->path());
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete shared_;
    shared_ = nullptr;
  }
  static fs::path data() { return shared_->path() / "data"; }

  RunResult cli(const std::vector<std::string>& args) { return run(args, dir_.path()); }
  RunResult train(const std::string& run_dir, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--config", sample("tiny.cfg"), "--data", data().string(), "--run-dir", run_dir};
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  }
  fs::path path(const std::string& rel) const { return dir_.path() / rel; }

  oracle::TempDir dir_{"cli"};
  static oracle::TempDir* shared_;
};

oracle::TempDir* CliTest::shared_ = nullptr;

}  // namespace

TEST_F(CliTest, GenDataWritesDataset) {
  for (const char* f : {"attributes.txt", "generator.cfg", "cooccurrence_test.csv", "test/labels.csv"})
    EXPECT_TRUE(fs::exists(data() / f)) << f;
  const auto ds = deepcarve::load_dataset(data());
  EXPECT_EQ(ds.num_classes(), 3u);
  EXPECT_EQ(ds.class_counts(deepcarve::Split::train), (std::vector<std::size_t>{10, 10, 10}));
  EXPECT_NE(oracle::read_file(data() / "generator.cfg").find("train_per_class = 10"), std::string::npos);

  const auto again = cli({"gen-data", "--spec", sample("tiny_data.cfg"), "--out", path("again").string()});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(deepcarve::fingerprint(deepcarve::load_dataset(path("again"))), deepcarve::fingerprint(ds));
}

TEST_F(CliTest, UsageErrorsExitOne) {
  const auto flag = cli({"train", "--bogus"});
  EXPECT_EQ(flag.code, 1);
  EXPECT_NE((flag.out + flag.err).find("--config"), std::string::npos) << "usage text expected";
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"--threads", "0", "eval", "--checkpoint", "x", "--data", "y", "--run-dir", "z"}).code, 1);
  EXPECT_EQ(cli({"--help"}).code, 0);

  const auto key = train(path("r").string(), {"--set", "learnig_rate=0.1"});
  EXPECT_EQ(key.code, 1);
  EXPECT_NE(key.err.find("learnig_rate"), std::string::npos) << key.err;
  EXPECT_EQ(train(path("r").string(), {"--set", "gamma=1.5"}).code, 1);
  EXPECT_EQ(train(path("r").string(), {"--set", "loss=hinge"}).code, 1);
}

TEST_F(CliTest, RuntimeErrorsExitTwo) {
  const auto missing = cli({"train", "--config", sample("tiny.cfg"), "--data", path("nowhere").string(), "--run-dir",
                            path("r").string()});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("error:"), std::string::npos);
  EXPECT_EQ(cli({"eval", "--checkpoint", path("none.ckpt").string(), "--data", data().string(), "--run-dir",
                 path("e").string()})
                .code,
            2);
}

TEST_F(CliTest, TrainWritesRunDirectory) {
  const auto r = train(path("run").string(), {"--set", "checkpoint_every=1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("carve 1 after epoch 2"), std::string::npos) << r.out;
  for (const char* f : {"config.cfg", "metrics.csv", "checkpoint_final.ckpt", "checkpoint_e1.ckpt", "checkpoint_c1.ckpt",
                        "pseudo_labels_c1.csv", "pseudo_labels_c2.csv", "histogram_c1.csv", "report.json", "per_image.csv"})
    EXPECT_TRUE(fs::exists(path("run") / f)) << f;
  const std::string cfg = oracle::read_file(path("run/config.cfg"));
  EXPECT_NE(cfg.find("checkpoint_every = 1"), std::string::npos);
  EXPECT_NE(cfg.find("momentum = 0.9"), std::string::npos) << "defaults are frozen into the copy";

  const auto ev = cli({"eval", "--checkpoint", path("run/checkpoint_final.ckpt").string(), "--data", data().string(),
                       "--run-dir", path("ev").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(oracle::read_file(path("ev/report.json")), oracle::read_file(path("run/report.json")));

  const auto fx = cli({"export-filters", "--checkpoint", path("run/checkpoint_final.ckpt").string(), "--out",
                       path("filters.pgm").string()});
  ASSERT_EQ(fx.code, 0) << fx.err;
  EXPECT_EQ(deepcarve::read_image(path("filters.pgm")).width, 2u * 6 + 1);
  EXPECT_EQ(cli({"export-filters", "--checkpoint", path("run/checkpoint_final.ckpt").string(), "--layer", "1", "--out",
                 path("relu.pgm").string()})
                .code,
            2);
}

TEST_F(CliTest, CarveInspectOnWarmupCheckpoint) {
  ASSERT_EQ(train(path("run").string(), {"--set", "checkpoint_every=1"}).code, 0);
  const auto args = [&](const std::string& out) {
    return std::vector<std::string>{"carve-inspect", "--checkpoint", path("run/checkpoint_e1.ckpt").string(), "--data",
                                    data().string(), "--out", path(out).string(), "--config", sample("tiny.cfg")};
  };
  const auto r = cli(args("inspect"));
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(cli(args("inspect2")).code, 0);
  for (const char* f : {"histogram.csv", "pseudo_labels.csv", "config.cfg"})
    EXPECT_EQ(oracle::read_file(path("inspect") / f), oracle::read_file(path("inspect2") / f)) << f;

  const auto ds = deepcarve::load_dataset(data());
  std::istringstream csv(oracle::read_file(path("inspect/pseudo_labels.csv")));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), static_cast<long>(ds.num_classes()));
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), ds.num_classes() + 1);
    const std::string attr = cells[0].substr(6, cells[0].rfind('/') - 6);  // train/<attr>/<stem>
    const std::size_t own = ds.attribute_index(attr);
    EXPECT_EQ(std::stod(cells[own + 1]), 0.95) << line;
    ++rows;
  }
  EXPECT_EQ(rows, ds.indices(deepcarve::Split::train).size());
}

TEST_F(CliTest, IdenticalRunsAreByteIdentical) {
  ASSERT_EQ(train(path("a").string()).code, 0);
  ASSERT_EQ(train(path("b").string()).code, 0);
  const auto threaded = cli({"--threads", "3", "train", "--config", sample("tiny.cfg"), "--data", data().string(),
                             "--run-dir", path("c").string()});
  ASSERT_EQ(threaded.code, 0) << threaded.err;
  for (const char* f : {"metrics.csv", "checkpoint_final.ckpt", "pseudo_labels_c2.csv", "report.json"}) {
    const std::string a = oracle::read_file(path("a") / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, oracle::read_file(path("b") / f)) << f;
    EXPECT_EQ(a, oracle::read_file(path("c") / f)) << f;
  }
  ASSERT_EQ(train(path("d").string(), {"--set", "seed=4"}).code, 0);
  EXPECT_NE(oracle::read_file(path("a/metrics.csv")), oracle::read_file(path("d/metrics.csv")));
}

TEST_F(CliTest, ResumeContinuesRun) {
  ASSERT_EQ(train(path("full").string()).code, 0);
  ASSERT_EQ(train(path("part").string(), {"--set", "max_epochs=3"}).code, 0);
  const auto r = train(path("part").string(), {"--resume", path("part/checkpoint_final.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(oracle::read_file(path("full/metrics.csv")), oracle::read_file(path("part/metrics.csv")));
  EXPECT_EQ(oracle::read_file(path("full/checkpoint_final.ckpt")), oracle::read_file(path("part/checkpoint_final.ckpt")));

  const auto wrong = train(path("part").string(), {"--resume", path("full/checkpoint_final.ckpt").string(), "--set",
                                                   "seed=9"});
  EXPECT_EQ(wrong.code, 2);
  EXPECT_NE(wrong.err.find("seed"), std::string::npos) << wrong.err;
}
