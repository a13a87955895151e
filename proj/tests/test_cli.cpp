#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

std::string g_cli;

int run(const std::string& args) {
  const std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ehtune_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write("tiny.json", R"({
      "backbone": {"d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 16},
      "pretrain": {"steps": 5, "corpus_size": 200, "heldout_size": 40},
      "strategies": ["ft", "eh-ft-bitfit"],
      "total_steps": 20,
      "measure": {"d_mid": 16, "probe_size": 32, "projection_size": 20, "grad_log_steps": 5},
      "seeds": [0]
    })");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("pretrain --config " + path("missing.json") + " --out " + path("bb.json")), 1);
  write("bad.json", R"({"backbone": {"d_modl": 8}})");
  EXPECT_EQ(run("pretrain --config " + path("bad.json") + " --out " + path("bb.json")), 1);
  EXPECT_EQ(run("sweep --config " + path("tiny.json") + " --axis lora_rank --values ''"), 1);
  EXPECT_EQ(run("sweep --config " + path("tiny.json") + " --axis lora_rank --values 2,x"), 1);
  EXPECT_EQ(run("run --config " + path("tiny.json") + " --backbone " + path("none.json") +
                " --strategy ft --task topic-pair"),
            2);
  fs::create_directories(dir_ / "empty");
  EXPECT_EQ(run("report --runs " + path("empty") + " --out " + path("rep")), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, EndToEnd) {
  ASSERT_EQ(run("pretrain --config " + path("tiny.json") + " --out " + path("bb.json")), 0);
  EXPECT_TRUE(fs::exists(path("bb.json")));
  EXPECT_EQ(run("run --config " + path("tiny.json") + " --backbone " + path("bb.json") +
                " --strategy mixout --task topic-pair --out " + path("out")),
            1);
  ASSERT_EQ(run("run --config " + path("tiny.json") + " --backbone " + path("bb.json") +
                " --strategy eh-ft-bitfit --task topic-pair --seeds 2 --out " + path("out")),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "records" / "topic-pair__eh-ft-bitfit__seed1.json"));
  ASSERT_EQ(run("sweep --config " + path("tiny.json") + " --backbone " + path("bb.json") +
                " --axis stage1_fraction --values 0.1,0.5 --mode fixed-stage2 --out " + path("out")),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "sweep__stage1_fraction__fixed-stage2.csv"));
  ASSERT_EQ(run("report --runs " + path("out/records") + " --out " + path("report")), 0);
  EXPECT_TRUE(fs::exists(dir_ / "report" / "results.csv"));
  write("other.json", R"({"backbone": {"d_model": 32, "n_heads": 2}, "seeds": [0]})");
  EXPECT_EQ(run("run --config " + path("other.json") + " --backbone " + path("bb.json") +
                " --strategy ft --task topic-pair"),
            1);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path-to-ehtune-cli>\n");
    return 2;
  }
  g_cli = argv[1];
  return RUN_ALL_TESTS();
}
