#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pgnaa/library.hpp"
#include "pgnaa/spectra.hpp"
#include "run_manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path work_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pgnaa_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Runs the CLI with stdout and stderr captured to `log`; returns the exit code.
int run(const std::string& args, const fs::path& log, const std::string& env = "") {
  const std::string cmd = env + " '" + std::string(PGNAA_CLI_PATH) + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

const char* kSmallTrain = R"({
  "library": {"preset": "well_separated", "species": 3, "channels": 256, "seed": 3},
  "budget": 5000, "epochs": 3, "steps_per_epoch": 5, "batch_size": 16,
  "validation_per_class": 10, "test_per_class": 20, "target_accuracy": null,
  "discard": "none", "model": {"n_blocks": 2, "filters": 8}
})";

}  // namespace

TEST(Cli, ExitCodesForUsageErrors) {
  const auto dir = work_dir("usage");
  EXPECT_EQ(run("", dir / "log"), 2);
  EXPECT_EQ(run("frobnicate", dir / "log"), 2);
  EXPECT_EQ(run("train --no-such-flag", dir / "log"), 2);
  EXPECT_EQ(run("--help", dir / "log"), 0);
  EXPECT_NE(slurp(dir / "log").find("synth"), std::string::npos);
  EXPECT_EQ(run("synth", dir / "log"), 2);
  EXPECT_EQ(run("train --config /nonexistent/c.json --out " + (dir / "x").string(), dir / "log"), 4);
  write(dir / "broken.json", "{ not json");
  EXPECT_EQ(run("train --config " + (dir / "broken.json").string() + " --out " + (dir / "y").string(), dir / "log"), 2);
  EXPECT_EQ(run("report " + dir.string(), dir / "log"), 4);
}

TEST(Cli, Sha256MatchesKnownDigest) {
  const auto dir = work_dir("sha");
  write(dir / "abc.txt", "abc");
  EXPECT_EQ(pgnaa::cli::sha256_file(dir / "abc.txt"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  write(dir / "empty.txt", "");
  EXPECT_EQ(pgnaa::cli::sha256_file(dir / "empty.txt"),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Cli, SynthWritesOneFullWidthCsvPerSpecies) {
  const auto dir = work_dir("synth");
  write(dir / "lib.json", R"({"preset": "well_separated", "species": 12, "seed": 5})");
  const auto spec = (dir / "lib.json").string();
  ASSERT_EQ(run("synth --config " + spec + " --out " + (dir / "a").string(), dir / "log"), 0) << slurp(dir / "log");
  ASSERT_EQ(run("synth --config " + spec + " --out " + (dir / "b").string(), dir / "log"), 0);
  std::size_t csvs = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    if (e.path().extension() != ".csv") continue;
    ++csvs;
    EXPECT_EQ(line_count(e.path()), 16384u + 1) << e.path();
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(csvs, 12u);
  // The written library reads back as a measured library.
  const auto back = pgnaa::LibraryManifest::load((dir / "a" / "library.json").string()).build();
  EXPECT_EQ(back.size(), 12u);
  EXPECT_EQ(back.n_channels(), 16384u);

  const auto m = json::parse(slurp(dir / "a" / "manifest.json"));
  EXPECT_EQ(m.at("status"), "complete");
  EXPECT_EQ(m.at("inputs").at(0).at("sha256"), pgnaa::cli::sha256_file(dir / "lib.json"));
  EXPECT_EQ(m.at("outputs").size(), 13u);
  EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
}

TEST(Cli, SynthRejectsEmptySpec) {
  const auto dir = work_dir("synth_empty");
  write(dir / "lib.json", R"({"species": []})");
  EXPECT_EQ(run("synth --config " + (dir / "lib.json").string() + " --out " + (dir / "o").string(), dir / "log"), 2);
  EXPECT_NE(slurp(dir / "log").find("error:"), std::string::npos);
}

TEST(Cli, SampleWritesBatchDumpAndRejectsUnknownMethod) {
  const auto dir = work_dir("sample");
  write(dir / "lib.json", R"({"preset": "well_separated", "species": 2, "channels": 512})");
  const auto spec = (dir / "lib.json").string();
  ASSERT_EQ(run("sample --config " + spec + " --count 4 --budget 1000 --out " + (dir / "s").string(), dir / "log"), 0)
      << slurp(dir / "log");
  EXPECT_EQ(fs::file_size(dir / "s" / "samples.bin"), 4u * 512 * 8);
  ASSERT_EQ(run("sample --config " + spec + " --method rsm1 --count 2 --budget 50 --out " + (dir / "e").string(),
                dir / "log"),
            0);
  EXPECT_EQ(line_count(dir / "e" / "events.csv"), 101u);
  EXPECT_EQ(run("sample --config " + spec + " --method rsm9 --out " + (dir / "z").string(), dir / "log"), 2);
}

TEST(Cli, TrainIsReproducibleByteForByte) {
  const auto dir = work_dir("train");
  write(dir / "cfg.json", kSmallTrain);
  const auto cfg = (dir / "cfg.json").string();
  ASSERT_EQ(run("train --config " + cfg + " --seed 4 --out " + (dir / "a").string(), dir / "log"), 0)
      << slurp(dir / "log");
  ASSERT_EQ(run("train --config " + cfg + " --seed 4 --out " + (dir / "b").string(), dir / "log"), 0);
  for (const char* f : {"report.json", "model.ckpt", "loss_curve.csv", "confusion.csv", "config.json", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_TRUE(fs::exists(dir / "a" / "timings.json"));
  const auto report = json::parse(slurp(dir / "a" / "report.json"));
  EXPECT_EQ(report.at("seed"), 4);
  EXPECT_EQ(report.at("epochs_run"), 3);

  ASSERT_EQ(run("report " + (dir / "a").string(), dir / "log"), 0);
  const auto summary = slurp(dir / "log");
  EXPECT_NE(summary.find("live time 0.631 s"), std::string::npos) << summary;
  EXPECT_NE(summary.find("mean epoch"), std::string::npos);

  // A different seed changes the model.
  ASSERT_EQ(run("train --config " + cfg + " --seed 5 --out " + (dir / "c").string(), dir / "log"), 0);
  EXPECT_NE(slurp(dir / "a" / "model.ckpt"), slurp(dir / "c" / "model.ckpt"));
}

TEST(Cli, TrainOverridesAndDefaultOutputRoot) {
  const auto dir = work_dir("train_env");
  write(dir / "cfg.json", kSmallTrain);
  ASSERT_EQ(run("train --config " + (dir / "cfg.json").string() + " --budget 3000 --discard 0-15", dir / "log",
                "PGNAA_OUT='" + (dir / "root").string() + "'"),
            0)
      << slurp(dir / "log");
  const auto report = json::parse(slurp(dir / "root" / "train" / "report.json"));
  EXPECT_EQ(report.at("budget"), 3000);
  EXPECT_EQ(report.at("discard"), "0-15");
  EXPECT_EQ(report.at("input_width"), 240);
}

TEST(Cli, DivergedTrainingExitsWithThree) {
  const auto dir = work_dir("diverge");
  auto cfg = json::parse(kSmallTrain);
  cfg["learning_rate"] = 1e30;
  write(dir / "cfg.json", cfg.dump());
  EXPECT_EQ(run("train --config " + (dir / "cfg.json").string() + " --out " + (dir / "o").string(), dir / "log"), 3);
  EXPECT_EQ(json::parse(slurp(dir / "o" / "manifest.json")).at("status"), "diverged");
}

TEST(Cli, SweepWritesOneRunPerBudget) {
  const auto dir = work_dir("sweep");
  write(dir / "cfg.json", kSmallTrain);
  ASSERT_EQ(run("sweep --config " + (dir / "cfg.json").string() + " --budgets 2000,4000 --jobs 2 --out " +
                    (dir / "s").string(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  EXPECT_TRUE(fs::exists(dir / "s" / "k2000" / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "s" / "k4000" / "model.ckpt"));
  EXPECT_EQ(json::parse(slurp(dir / "s" / "sweep.json")).at("runs").size(), 2u);
  ASSERT_EQ(run("report " + (dir / "s").string(), dir / "log"), 0);
  EXPECT_NE(slurp(dir / "log").find("k=4000"), std::string::npos);
  EXPECT_EQ(run("sweep --config " + (dir / "cfg.json").string() + " --budgets 2000,x --out " + (dir / "t").string(),
                dir / "log"),
            2);
}

TEST(Cli, BenchWritesTimingTable) {
  const auto dir = work_dir("bench");
  write(dir / "lib.json", R"({"preset": "well_separated", "species": 1})");
  ASSERT_EQ(run("bench --config " + (dir / "lib.json").string() + " --reps 10 --budget 2000 --out " +
                    (dir / "b").string(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  const auto b = json::parse(slurp(dir / "b" / "bench.json"));
  EXPECT_EQ(b.at("rows").size(), 6u);
  EXPECT_EQ(b.at("n_channels"), 16384);
  EXPECT_EQ(run("bench --config " + (dir / "lib.json").string() + " --reps 3 --out " + (dir / "c").string(),
                dir / "log"),
            2);
}

// Background-only species against the same background plus one line: the
// CAM of the trained checkpoint must point at that line.
TEST(Cli, CamFindsTheDistinguishingLine) {
  const auto dir = work_dir("cam");
  write(dir / "cfg.json", R"({
    "library": {"calibration": {"preset": "detector", "n_channels": 2048}, "seed": 3,
      "species": [
        {"label": "background", "synthetic": {"background": {"level": 0.000666666666666667, "decay_per_kev": 0.000666666666666667}}},
        {"label": "background + 4500 keV line", "synthetic": {
          "background": {"level": 0.000666666666666667, "decay_per_kev": 0.000666666666666667},
          "peaks": [{"center_kev": 4500.0, "amplitude": 0.1}]}}]},
    "budget": 20000, "learning_rate": 0.001, "epochs": 10, "steps_per_epoch": 10, "batch_size": 32,
    "target_accuracy": null, "discard": "none", "model": {"n_blocks": 4, "filters": 16}
  })");
  const auto cfg = (dir / "cfg.json").string();
  ASSERT_EQ(run("train --config " + cfg + " --out " + (dir / "t").string(), dir / "log"), 0) << slurp(dir / "log");
  const auto ckpt = (dir / "t" / "model.ckpt").string();
  ASSERT_EQ(run("cam --config " + cfg + " --checkpoint " + ckpt + " --out " + (dir / "c").string(), dir / "log"), 0)
      << slurp(dir / "log");
  const auto cal = pgnaa::ChannelCalibration::detector_default().rebinned(2048);
  const auto line = static_cast<long>(pgnaa::channel_of_energy(cal, 4500.0));
  const auto summary = json::parse(slurp(dir / "c" / "cam.json"));
  const long top = summary.at("argmax_channel").get<long>();
  EXPECT_LE(std::abs(top - line), 32) << "argmax " << top << " line " << line;
  EXPECT_EQ(line_count(dir / "c" / "importance.csv"), 2048u + 1);
  EXPECT_EQ(slurp(dir / "c" / "ranges.csv").rfind("lo,hi\n", 0), 0u);

  // Fraction mode discards at least the requested share.
  ASSERT_EQ(run("cam --config " + cfg + " --checkpoint " + ckpt + " --fraction 0.5 --min-run 16 --out " +
                    (dir / "f").string(),
                dir / "log"),
            0);
  EXPECT_GE(json::parse(slurp(dir / "f" / "cam.json")).at("discarded_fraction").get<double>(), 0.5);

  EXPECT_EQ(run("cam --config " + cfg + " --out " + (dir / "g").string(), dir / "log"), 2);
  EXPECT_EQ(run("cam --config " + cfg + " --checkpoint /nonexistent.ckpt --out " + (dir / "h").string(), dir / "log"),
            4);
}
