// SPDX-License-Identifier: Apache-2.0
//
// Runs the efps binary end to end on small synthetic captures.
#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "efps/io/dataset.hpp"
#include "efps/obsmap.hpp"

using namespace efps;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / ("efps_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

class RemoveWorkDir : public ::testing::Environment {
 public:
  void TearDown() override { fs::remove_all(work_dir()); }
};
const auto* const kCleanup = ::testing::AddGlobalTestEnvironment(new RemoveWorkDir);

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult efps_run(const std::string& args) {
  const fs::path log = work_dir() / "last.log";
  const std::string cmd = std::string("\"") + EFPS_CLI_PATH + "\" " + args + " --threads 1 > \"" +
                          log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::vector<char> bytes_of(const fs::path& p) { return io::read_file(p.string()); }

std::string text_of(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One small capture and its maps, shared by the tests below.
const fs::path& capture16() {
  static const fs::path dir = [] {
    const fs::path d = work_dir() / "cap16";
    const CliResult r = efps_run("gen-data --scene sphere --frames 16 --size 24 --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.out;
    const CliResult o = efps_run("obsmap --data " + d.string() + " --m 16 --out " + (work_dir() / "cap16.obs1").string());
    EXPECT_EQ(o.code, 0) << o.out;
    return d;
  }();
  return dir;
}

std::size_t mask_count(const fs::path& capture) {
  const io::Image8 m = io::read_png((capture / "mask.png").string(), 1);
  std::size_t n = 0;
  for (auto v : m.data) n += v != 0;
  return n;
}

}  // namespace

TEST(CliGenData, WritesFramesAndEvents) {
  const fs::path d = work_dir() / "gen64";
  const CliResult r = efps_run("gen-data --scene sphere --frames 64 --size 32 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.out;
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(d / "frames")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 64);
  const auto cap = io::load_capture(d.string());
  EXPECT_EQ(cap.frames.size(), 64u);
  EXPECT_GT(cap.events.events.size(), 0u);
  EXPECT_EQ(cap.lights.size(), 64u);
}

TEST(CliGenData, SameSeedSameBytes) {
  const fs::path a = work_dir() / "seed_a", b = work_dir() / "seed_b", c = work_dir() / "seed_c";
  ASSERT_EQ(efps_run("gen-data --scene blob --seed 5 --frames 8 --size 24 --out " + a.string()).code, 0);
  ASSERT_EQ(efps_run("gen-data --scene blob --seed 5 --frames 8 --size 24 --out " + b.string()).code, 0);
  ASSERT_EQ(efps_run("gen-data --scene blob --seed 6 --frames 8 --size 24 --out " + c.string()).code, 0);
  EXPECT_EQ(bytes_of(a / "events.evt1"), bytes_of(b / "events.evt1"));
  EXPECT_NE(bytes_of(a / "events.evt1"), bytes_of(c / "events.evt1"));
}

TEST(CliGenData, SingleFrameIsAUsageError) {
  const CliResult r = efps_run("gen-data --frames 1 --out " + (work_dir() / "bad").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("--frames"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(work_dir() / "bad"));
}

TEST(CliObsmap, OnePixelPerMaskPixel) {
  const fs::path cap = capture16();
  obsmap::Obs1Header h;
  const auto samples = obsmap::decode_obs1(bytes_of(work_dir() / "cap16.obs1"), "obs", &h);
  EXPECT_EQ(h.pixel_count, mask_count(cap));
  EXPECT_EQ(samples.size(), mask_count(cap));
  EXPECT_EQ(h.m, 16u);
  EXPECT_EQ(h.channels, 6u);
  EXPECT_TRUE(fs::exists(work_dir() / "cap16.nrm1"));
  for (std::size_t i = 0; i < std::min<std::size_t>(100, samples.size()); ++i) {
    const auto& g = samples[i].maps[obsmap::kNormalized].cells;
    EXPECT_FLOAT_EQ(*std::max_element(g.begin(), g.end()), 1.0f) << i;
  }
}

TEST(CliObsmap, MissingCaptureFails) {
  const CliResult r = efps_run("obsmap --data " + (work_dir() / "nothing").string() + " --m 16 --out " +
                         (work_dir() / "x.obs1").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("efps: error:"), std::string::npos);
}

TEST(CliTrainEval, NoEventModelTrainsAndEvaluates) {
  capture16();
  const fs::path cfg = work_dir() / "tiny.cfg";
  std::ofstream(cfg) << "m = 16\nepochs = 2\nbatch_size = 32\nbase_channels = 4\nsne_growth = 4\nseed = 3\n";
  const fs::path ckpt = work_dir() / "tiny.ckpt";
  const CliResult t = efps_run("train --obs " + (work_dir() / "cap16.obs1").string() + " --config " + cfg.string() +
                         " --ablation no_event --out " + ckpt.string());
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("epoch   2"), std::string::npos) << t.out;
  const std::string loss = text_of(ckpt.string() + ".loss.csv");
  EXPECT_EQ(loss.rfind("epoch,steps,lr,l_e,l_n,l_total\n", 0), 0u);
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 3);

  const fs::path report = work_dir() / "report.csv", pred = work_dir() / "pred.nrm1";
  const CliResult e = efps_run("eval --obs " + (work_dir() / "cap16.obs1").string() + " --ckpt " + ckpt.string() +
                         " --report " + report.string() + " --pred-out " + pred.string());
  ASSERT_EQ(e.code, 0) << e.out;
  const std::string csv = text_of(report);
  EXPECT_NE(csv.find("cap16,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("average,"), std::string::npos) << csv;
  const auto nm = obsmap::decode_nrm1(bytes_of(pred));
  EXPECT_EQ(nm.normals.size(), mask_count(capture16()));

  // Per-sample predictions scatter back through the mask.
  const fs::path png = work_dir() / "pred.png";
  const CliResult r = efps_run("render-normals --pred " + pred.string() + " --gt " + (work_dir() / "cap16.nrm1").string() +
                         " --mask " + (capture16() / "mask.png").string() + " --out-png " + png.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const io::Image8 img = io::read_png(png.string(), 3);
  EXPECT_EQ(img.width, 24);
  EXPECT_TRUE(fs::exists(work_dir() / "pred_error.png"));
}

TEST(CliTrainEval, EvalRefusesMapSizeMismatch) {
  capture16();
  const fs::path obs32 = work_dir() / "cap32.obs1";
  ASSERT_EQ(efps_run("obsmap --data " + capture16().string() + " --m 32 --out " + obs32.string()).code, 0);
  const fs::path cfg = work_dir() / "mm.cfg";
  std::ofstream(cfg) << "m = 16\nepochs = 1\nbatch_size = 64\nbase_channels = 4\nsne_growth = 4\n";
  const fs::path ckpt = work_dir() / "mm.ckpt";
  ASSERT_EQ(efps_run("train --obs " + (work_dir() / "cap16.obs1").string() + " --config " + cfg.string() +
                     " --ablation no_event --out " + ckpt.string())
                .code,
            0);
  const CliResult e = efps_run("eval --obs " + obs32.string() + " --ckpt " + ckpt.string() + " --report " +
                         (work_dir() / "mm.csv").string());
  EXPECT_EQ(e.code, 1);
  EXPECT_NE(e.out.find("checkpoint was trained with m=16"), std::string::npos) << e.out;

  const CliResult t = efps_run("train --obs " + obs32.string() + " --config " + cfg.string() + " --out " +
                         (work_dir() / "bad.ckpt").string());
  EXPECT_EQ(t.code, 1);
  EXPECT_NE(t.out.find("has m=32"), std::string::npos) << t.out;
}

TEST(CliRender, ErrorMapColors) {
  obsmap::NormalMap gt, pred;
  gt.width = pred.width = 3;
  gt.height = pred.height = 1;
  gt.normals = {Eigen::Vector3f::UnitZ(), Eigen::Vector3f::UnitZ(), Eigen::Vector3f::Zero()};
  pred.normals = {Eigen::Vector3f::UnitZ(), Eigen::Vector3f::UnitX(), Eigen::Vector3f::Zero()};
  io::write_bytes_atomic((work_dir() / "gt3.nrm1").string(), obsmap::encode_nrm1(gt));
  io::write_bytes_atomic((work_dir() / "pred3.nrm1").string(), obsmap::encode_nrm1(pred));
  const fs::path out = work_dir() / "n3.png", err = work_dir() / "e3.png";
  const CliResult r = efps_run("render-normals --pred " + (work_dir() / "pred3.nrm1").string() + " --gt " +
                         (work_dir() / "gt3.nrm1").string() + " --out-png " + out.string() + " --err-png " +
                         err.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const io::Image8 e = io::read_png(err.string(), 3);
  EXPECT_EQ(e.data, (std::vector<std::uint8_t>{0, 0, 255, 255, 0, 0, 0, 0, 0}));
  const io::Image8 n = io::read_png(out.string(), 3);
  EXPECT_EQ(n.data, (std::vector<std::uint8_t>{128, 128, 255, 255, 128, 128, 0, 0, 0}));
}

TEST(CliCalibMap, UndistortsAndTransfers) {
  const fs::path cal = work_dir() / "cam.cfg";
  std::ofstream(cal) << "fx = 100\nfy = 100\ncx = 0\ncy = 0\nk1 = 0.1\n"
                        "P_rgb = 1 0 0 0 0 1 0 0 0 0 0 1\nP_e = 2 0 0 0 0 2 0 0 0 0 0 1\n";
  CliResult r = efps_run("calib-map --calib " + cal.string() + " --point 100,0");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("110,0"), std::string::npos) << r.out;
  r = efps_run("calib-map --calib " + cal.string() + " --mode transfer --point 3,4");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("6,8"), std::string::npos) << r.out;
  r = efps_run("calib-map --calib " + cal.string() + " --mode sideways --point 3,4");
  EXPECT_EQ(r.code, 1);
}
