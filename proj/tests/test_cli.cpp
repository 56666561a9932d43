#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>

#include "sbnet/sbnet.hpp"

using namespace sbnet;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string command = std::string(SBNET_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(command.c_str(), "r");
  RunResult r;
  if (pipe == nullptr) return r;
  char buffer[4096];
  std::size_t n;
  while ((n = fread(buffer, 1, sizeof buffer, pipe)) > 0) r.out.append(buffer, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = (std::filesystem::temp_directory_path() / "sbnet_test_cli").string();
    std::filesystem::remove_all(dir_);
  }
  static std::string dir_;
};

std::string CliPipeline::dir_;

}  // namespace

TEST_F(CliPipeline, SynthTrainRetrieveEvaluate) {
  const std::string data = dir_ + "/data", model = dir_ + "/model", results = dir_ + "/results";
  auto synth = run("synth --output " + data + " --synth_tracks 10 --synth_frames 3 --seed 5");
  ASSERT_EQ(synth.exit_code, 0);
  ASSERT_TRUE(std::filesystem::exists(data + "/train_tracks.json"));
  ASSERT_TRUE(std::filesystem::exists(data + "/queries.json"));
  EXPECT_EQ(load_tracks(data + "/train_tracks.json").size(), 8u);

  auto train = run("train --output " + model + " --tracks " + data + "/train_tracks.json --frames " + data +
                   " --epochs 2 --lr_drop_epochs 1 --seed 5");
  ASSERT_EQ(train.exit_code, 0);
  EXPECT_EQ(train.out.substr(0, csv_header().size()), "epoch,lr,loss_total,loss_seg,loss_cls,loss_sub,loss_fut\n");
  EXPECT_EQ(read_text_file(model + "/metrics.csv").substr(0, csv_header().size()), csv_header());
  ASSERT_TRUE(std::filesystem::exists(model + "/model.sbnt"));

  const std::string common = " --tracks " + data + "/test_tracks.json --frames " + data + " --vocab " + model +
                             "/vocab.txt --checkpoint " + model + "/model.sbnt --queries " + data +
                             "/queries.json --ground_truth " + data + "/ground_truth.json --output " + results;
  auto retrieve = run("retrieve" + common + " --seed 5");
  ASSERT_EQ(retrieve.exit_code, 0);
  EXPECT_EQ(retrieve.out, "ranked 2 queries\n");
  const auto ranking = load_ranking(results + "/results.json");
  ASSERT_EQ(ranking.size(), 2u);
  for (const auto& [q, ranked] : ranking) EXPECT_EQ(ranked.size(), 2u);

  auto evaluate = run("evaluate" + common + " --k 1,2");
  ASSERT_EQ(evaluate.exit_code, 0);
  EXPECT_EQ(evaluate.out.substr(0, evaluate.out.find('\n')), "metric,value");
  EXPECT_NE(evaluate.out.find("recall@2,1"), std::string::npos);

  auto again = run("retrieve" + common + " --seed 5");
  ASSERT_EQ(again.exit_code, 0);
  EXPECT_EQ(load_ranking(results + "/results.json"), ranking);

  auto masks = run("dump-masks" + common + " --frames_per_track_sample 1 --seed 5");
  ASSERT_EQ(masks.exit_code, 0);
  EXPECT_EQ(masks.out, "wrote 2 masks\n");
}

TEST(Cli, GradcheckPasses) {
  auto r = run("gradcheck");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("losses"), std::string::npos);
}

TEST(Cli, BadArgumentsExitTwo) {
  EXPECT_EQ(run("").exit_code, 2);
  EXPECT_EQ(run("frobnicate").exit_code, 2);
  EXPECT_EQ(run("train --epochs many").exit_code, 2);
  EXPECT_EQ(run("train --preset gigantic").exit_code, 2);
  EXPECT_EQ(run("retrieve --checkpoint /nonexistent/model.sbnt --vocab /nonexistent/vocab.txt").exit_code, 2);
  EXPECT_EQ(run("--help").exit_code, 0);
}
