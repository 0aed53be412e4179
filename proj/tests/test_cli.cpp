#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "latent_inpaint/image.hpp"
#include "latent_inpaint/masks.hpp"
#include "oracles.hpp"

#ifndef LATENT_INPAINT_BIN
#error "LATENT_INPAINT_BIN must name the CLI executable"
#endif

using namespace latent_inpaint;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "li_cli";

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult cli(const std::string& args) {
  static int counter = 0;
  const auto log = kRoot / ("log_" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string(LATENT_INPAINT_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Fixture files shared by every test: toy 8x8 data, a 64x64 RGB set, and
// a tiny 64x64 checkpoint trained for one iteration.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot / "toy");
    fs::create_directories(kRoot / "rgb");
    encode_image(oracle::toy_pattern(0), kRoot / "toy" / "p0.png");
    encode_image(oracle::toy_pattern(1), kRoot / "toy" / "p1.png");
    write_text(kRoot / "toy.json", R"({"network": {"image_size": 8, "image_channels": 1, "base_size": 4, "base_channels": 4},
 "train": {"latent_dim": 4, "batch_size": 4, "critic_steps_per_gen": 1, "iterations": 10,
           "checkpoint_every": 5, "hflip_augment": false, "learning_rate": 0.001}})");

    std::mt19937_64 rng(3);
    for (int k = 0; k < 3; ++k) {
      auto img = oracle::random_image(3, 64, rng);
      for (auto& v : img.values) v *= 0.5;
      encode_image(img, kRoot / "rgb" / ("img" + std::to_string(k) + ".png"));
    }
    write_text(kRoot / "rgb.json", R"({"network": {"base_channels": 16},
 "train": {"latent_dim": 8, "batch_size": 2, "critic_steps_per_gen": 1, "iterations": 1}})");
    ASSERT_EQ(cli("train --data " + (kRoot / "rgb").string() + " --config " + (kRoot / "rgb.json").string() +
                  " --out " + (kRoot / "rgb_run").string())
                  .code,
              0);
  }

  static fs::path ckpt64() { return kRoot / "rgb_run" / "checkpoints" / "latest.liwg"; }
  static fs::path image64() { return kRoot / "rgb" / "img0.png"; }

  static RunResult toy_train(const std::string& out, const std::string& extra = "") {
    return cli("train --data " + (kRoot / "toy").string() + " --config " + (kRoot / "toy.json").string() + " --out " +
               (kRoot / out).string() + " " + extra);
  }

  static RunResult inpaint(const std::string& out, const std::string& extra) {
    return cli("inpaint --ckpt " + ckpt64().string() + " --image " + image64().string() + " --out " +
               (kRoot / out).string() + " --iterations 5 " + extra);
  }
};

}  // namespace

TEST_F(CliTest, MissingDataPrintsUsageAndExitsTwo) {
  auto r = cli("train --out " + (kRoot / "nowhere").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--data"), std::string::npos);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
}

TEST_F(CliTest, InvalidConfigExitsTwo) {
  write_text(kRoot / "bad.json", R"({"train": {"iteratoins": 4}})");
  EXPECT_EQ(cli("train --data " + (kRoot / "toy").string() + " --config " + (kRoot / "bad.json").string() + " --out " +
                (kRoot / "bad").string())
                .code,
            2);
}

TEST_F(CliTest, MissingDatasetExitsThree) {
  EXPECT_EQ(cli("train --data " + (kRoot / "absent").string() + " --out " + (kRoot / "absent_run").string()).code, 3);
}

TEST_F(CliTest, TenIterationsWriteTenRows) {
  ASSERT_EQ(toy_train("ten").code, 0);
  auto rows = lines(kRoot / "ten" / "losses.csv");
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows[0], "iteration,critic_loss,wasserstein_estimate,gp_term,gen_loss");
  EXPECT_EQ(rows[1].substr(0, 2), "1,");
  EXPECT_EQ(rows[10].substr(0, 3), "10,");
  EXPECT_TRUE(fs::exists(kRoot / "ten" / "checkpoints" / "ckpt_00000005.liwg"));
  EXPECT_TRUE(fs::exists(kRoot / "ten" / "checkpoints" / "ckpt_00000010.liwg"));
  EXPECT_TRUE(fs::exists(kRoot / "ten" / "manifest.txt"));
  EXPECT_NE(slurp(kRoot / "ten" / "config.json").find("\"iterations\": 10"), std::string::npos);
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  ASSERT_EQ(toy_train("flags", "--iterations 3 --seed 9").code, 0);
  EXPECT_EQ(lines(kRoot / "flags" / "losses.csv").size(), 4u);
  const auto cfg = slurp(kRoot / "flags" / "config.json");
  EXPECT_NE(cfg.find("\"iterations\": 3"), std::string::npos);
  EXPECT_NE(cfg.find("\"seed\": 9"), std::string::npos);
}

TEST_F(CliTest, SameSeedGivesIdenticalLogs) {
  ASSERT_EQ(toy_train("seed_a", "--iterations 4").code, 0);
  ASSERT_EQ(toy_train("seed_b", "--iterations 4").code, 0);
  EXPECT_EQ(slurp(kRoot / "seed_a" / "losses.csv"), slurp(kRoot / "seed_b" / "losses.csv"));
  EXPECT_EQ(slurp(kRoot / "seed_a" / "checkpoints" / "latest.liwg"),
            slurp(kRoot / "seed_b" / "checkpoints" / "latest.liwg"));
}

TEST_F(CliTest, ResumeContinuesNumberingAndTrajectory) {
  ASSERT_EQ(toy_train("full").code, 0);
  ASSERT_EQ(toy_train("resumed", "--iterations 5").code, 0);
  ASSERT_EQ(cli("train --data " + (kRoot / "toy").string() + " --resume " +
                (kRoot / "resumed" / "checkpoints" / "ckpt_00000005.liwg").string() + " --iterations 10 --out " +
                (kRoot / "resumed").string())
                .code,
            0);
  auto rows = lines(kRoot / "resumed" / "losses.csv");
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows[6].substr(0, 2), "6,");
  EXPECT_EQ(slurp(kRoot / "resumed" / "losses.csv"), slurp(kRoot / "full" / "losses.csv"));
  EXPECT_EQ(slurp(kRoot / "resumed" / "checkpoints" / "latest.liwg"),
            slurp(kRoot / "full" / "checkpoints" / "latest.liwg"));
}

TEST_F(CliTest, ResumeRejectsDifferentSeed) {
  ASSERT_EQ(toy_train("reseed", "--iterations 2").code, 0);
  EXPECT_EQ(cli("train --data " + (kRoot / "toy").string() + " --resume " +
                (kRoot / "reseed" / "checkpoints" / "latest.liwg").string() + " --seed 99 --iterations 4 --out " +
                (kRoot / "reseed").string())
                .code,
            2);
}

TEST_F(CliTest, CentralMaskKeepsKnownPixelsBitExact) {
  ASSERT_EQ(inpaint("inp_central", "--mask central").code, 0);
  const auto dir = kRoot / "inp_central";
  for (const char* f : {"result.png", "generated.png", "weight_map.png", "loss_trace.csv", "config.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto in = read_png(image64(), 3), out = read_png(dir / "result.png", 3);
  const auto m = make_mask(MaskKind::central, 64);
  std::size_t changed = 0;
  for (std::size_t p = 0; p < m.known.size(); ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      if (m.known[p]) {
        ASSERT_EQ(out.bytes[p * 3 + c], in.bytes[p * 3 + c]) << "pixel " << p;
      } else if (out.bytes[p * 3 + c] != in.bytes[p * 3 + c]) {
        ++changed;
      }
    }
  EXPECT_GT(changed, 0u);
  EXPECT_EQ(lines(dir / "loss_trace.csv").size(), 6u);
}

TEST_F(CliTest, SameSeedGivesIdenticalInpainting) {
  ASSERT_EQ(inpaint("inp_s1", "--mask three_squares --seed 4").code, 0);
  ASSERT_EQ(inpaint("inp_s2", "--mask three_squares --seed 4").code, 0);
  EXPECT_EQ(slurp(kRoot / "inp_s1" / "result.png"), slurp(kRoot / "inp_s2" / "result.png"));
  EXPECT_EQ(slurp(kRoot / "inp_s1" / "loss_trace.csv"), slurp(kRoot / "inp_s2" / "loss_trace.csv"));
}

TEST_F(CliTest, OverlayAndPoissonDifferOnlyInsideHoles) {
  ASSERT_EQ(inpaint("inp_overlay", "--mask central --blend overlay").code, 0);
  ASSERT_EQ(inpaint("inp_poisson", "--mask central --blend poisson").code, 0);
  const auto a = read_png(kRoot / "inp_overlay" / "result.png", 3);
  const auto b = read_png(kRoot / "inp_poisson" / "result.png", 3);
  const auto m = make_mask(MaskKind::central, 64);
  for (std::size_t p = 0; p < m.known.size(); ++p)
    if (m.known[p]) {
      for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(a.bytes[p * 3 + c], b.bytes[p * 3 + c]);
    }
  EXPECT_NE(a.bytes, b.bytes);
}

TEST_F(CliTest, IsolatedHoleExitsFive) {
  save_mask(Mask(64, 64, 0), kRoot / "all_holes.png");
  EXPECT_EQ(inpaint("inp_isolated", "--mask " + (kRoot / "all_holes.png").string()).code, 5);
  EXPECT_EQ(inpaint("inp_blend", "--mask central --blend average").code, 2);
}

TEST_F(CliTest, EvalAgainstItselfAndUnmatched) {
  auto r = cli("eval --results " + (kRoot / "rgb").string() + " --truth " + (kRoot / "rgb").string() + " --out " +
               (kRoot / "self.csv").string());
  ASSERT_EQ(r.code, 0);
  auto rows = lines(kRoot / "self.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows.back(), "mean,0,inf,1");

  fs::create_directories(kRoot / "partial");
  fs::copy_file(image64(), kRoot / "partial" / "img0.png", fs::copy_options::overwrite_existing);
  EXPECT_EQ(cli("eval --results " + (kRoot / "partial").string() + " --truth " + (kRoot / "rgb").string() +
                " --out " + (kRoot / "partial.csv").string())
                .code,
            3);
}

TEST_F(CliTest, GenerateAndMaskHelpers) {
  ASSERT_EQ(cli("generate --ckpt " + ckpt64().string() + " --count 3 --out " + (kRoot / "samples").string()).code, 0);
  EXPECT_TRUE(fs::exists(kRoot / "samples" / "sample_0002.png"));
  ASSERT_EQ(cli("mask --kind central --out " + (kRoot / "central.png").string()).code, 0);
  EXPECT_EQ(load_mask(kRoot / "central.png").hole_count(), 1024u);
}
