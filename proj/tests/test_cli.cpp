// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

// Runs the arbq executable as a subprocess.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "arbq/io.hpp"

namespace arbq {
namespace {

namespace fs = std::filesystem;

const fs::path kData = ARBQ_DATA_DIR;
const fs::path kTests = ARBQ_TEST_DIR;

struct Result {
  int code = -1;
  std::string out;
};

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("arbq_cli_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Result run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / ("arbq_cli_log_" + std::to_string(::getpid()));
  const std::string cmd = std::string("\"") + ARBQ_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  fs::remove(log);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::vector<std::uint8_t> bytes_of(const fs::path& p) { return read_file(p); }

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

TEST(Cli, InspectTensor) {
  const Result r = run("inspect " + q(kTests / "golden" / "identity2x2.arbt"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("ARBT"), std::string::npos);
  EXPECT_NE(r.out.find("2x2"), std::string::npos);
}

TEST(Cli, InspectQuantizedLayer) {
  const Result r = run("inspect " + q(kTests / "golden" / "small_rc.arbq"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("golden.rc"), std::string::npos);
  EXPECT_NE(r.out.find("3 x 5"), std::string::npos);
  EXPECT_NE(r.out.find("arb-rc"), std::string::npos);
}

TEST(Cli, InspectLlamaManifest) {
  const Result r = run("inspect " + q(kData / "llama7b_shapes.txt") + " --scale-bits 16");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("row-column + cgb"), std::string::npos);
  EXPECT_NE(r.out.find("16-bit scales"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("quantize --weights x").code, 1);  // --out missing
  EXPECT_EQ(run("inspect x --scale-bits 8").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, DataErrors) {
  const fs::path dir = temp_dir("data_err");
  EXPECT_EQ(run("inspect /nonexistent/arbq.arbq").code, 2);
  EXPECT_EQ(run("quantize --weights /nonexistent/m.txt --out " + q(dir)).code, 2);
  EXPECT_EQ(run("quantize --weights " + q(kData / "demo_manifest.txt") + " --calib /nonexistent/calib --out " + q(dir))
                .code,
            2);
  {
    std::ofstream cfg(dir / "bad.cfg");
    cfg << "method=arb-q\n";
  }
  EXPECT_EQ(run("quantize --weights " + q(kData / "demo_manifest.txt") + " --config " + q(dir / "bad.cfg") +
                " --out " + q(dir / "o"))
                .code,
            2);
  fs::remove_all(dir);
}

TEST(Cli, BenchCountOnly) {
  const fs::path dir = temp_dir("bench");
  const Result r = run("bench --count-only --rows 64 --cols 64 --samples 1024 --iterations 5 --block 16 --out " +
                    q(dir / "bench.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("speedup: counted"), std::string::npos);
  const auto rows = read_csv(dir / "bench.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][0], "64");
  EXPECT_EQ(rows[1][2], "1024");
  fs::remove_all(dir);
}

TEST(Cli, QuantizeThenEvalReproducesMetrics) {
  const fs::path dir = temp_dir("demo");
  const Result r = run("quantize --weights " + q(kData / "demo_manifest.txt") + " --calib synthetic --config " +
                    q(kData / "demo.cfg") + " --out " + q(dir));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"report.csv", "profiles.csv", "timing.csv", "config.txt", "attn.q_proj.arbq",
                        "mlp.down_proj.arbq"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  const auto report = read_csv(dir / "report.csv");
  ASSERT_EQ(report.size(), 5u);
  EXPECT_EQ(report[0], report_columns());
  auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(report[0].begin(), report[0].end(), name) - report[0].begin());
  };
  for (std::size_t i = 1; i < report.size(); ++i) {
    EXPECT_EQ(report[i][col("method")], "arb-rc");
    EXPECT_EQ(report[i][col("trace_monotone")], "true");
    EXPECT_EQ(report[i][col("cgb")], "true");
  }
  EXPECT_EQ(report[4][col("layer")], "mlp.down_proj");
  EXPECT_EQ(report[4][col("rows")], "256");
  EXPECT_EQ(report[4][col("cols")], "512");

  const Result e = run("eval --artifacts " + q(dir) + " --weights " + q(kData / "demo_manifest.txt"));
  ASSERT_EQ(e.code, 0) << e.out;
  const auto eval = read_csv(dir / "eval.csv");
  ASSERT_EQ(eval.size(), report.size());
  EXPECT_EQ(eval[0], eval_columns());
  for (std::size_t i = 1; i < eval.size(); ++i) {
    EXPECT_EQ(eval[i][0], report[i][col("layer")]);
    for (const auto& [ei, name] : {std::pair<std::size_t, std::string>{1, "l1"}, {2, "l2"}, {3, "output_mse"}})
      EXPECT_LE(rel(std::stod(eval[i][ei]), std::stod(report[i][col(name)])), 1e-9) << name;
  }
  fs::remove_all(dir);
}

TEST(Cli, QuantizeIsDeterministic) {
  const fs::path dir = temp_dir("det");
  {
    std::ofstream man(dir / "m.txt");
    man << "layer a 48 96\nlayer b 32 64 x2\n";
  }
  const std::string base = "quantize --weights " + q(dir / "m.txt") + " --method arb-x --iterations 4 --seed 11";
  ASSERT_EQ(run(base + " --out " + q(dir / "one")).code, 0);
  ASSERT_EQ(run(base + " --out " + q(dir / "two")).code, 0);
  for (const char* f : {"report.csv", "profiles.csv", "config.txt", "a.arbq", "b.0.arbq", "b.1.arbq"})
    EXPECT_EQ(bytes_of(dir / "one" / f), bytes_of(dir / "two" / f)) << f;
  EXPECT_NE(bytes_of(dir / "one" / "b.0.arbq"), bytes_of(dir / "one" / "b.1.arbq"));

  ASSERT_EQ(run(base + " --no-cgb --out " + q(dir / "nocgb")).code, 0);
  const auto report = read_csv(dir / "nocgb" / "report.csv");
  EXPECT_EQ(report[1][5], "false");
  fs::remove_all(dir);
}

TEST(Cli, QuantizeFromTensorDirectory) {
  const fs::path dir = temp_dir("tensors");
  fs::create_directories(dir / "w");
  write_tensor(dir / "w" / "layer0.arbt", synthetic_weights(16, 40, 5));
  ASSERT_EQ(run("quantize --weights " + q(dir / "w") + " --method arb --out " + q(dir / "o")).code, 0);
  const QuantizedLayer ql = read_quant(dir / "o" / "layer0.arbq");
  EXPECT_EQ(ql.rows, 16u);
  EXPECT_EQ(ql.cols, 40u);
  EXPECT_EQ(ql.method, Method::kArb);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace arbq
