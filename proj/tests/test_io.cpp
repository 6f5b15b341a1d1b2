// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "arbq/io.hpp"
#include "golden_layers.hpp"
#include "test_util.hpp"

namespace arbq {
namespace {

namespace fs = std::filesystem;

const fs::path kGolden = fs::path(ARBQ_TEST_DIR) / "golden";

// ARBQ_WRITE_GOLDEN=1 refreshes the golden files instead of only reading them.
void maybe_write_golden(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (const char* v = std::getenv("ARBQ_WRITE_GOLDEN"); v != nullptr && std::string(v) == "1") write_file(path, bytes);
}

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("arbq_io_" + tag + "_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

IoErrc decode_error(const std::vector<std::uint8_t>& bytes, bool quant) {
  try {
    if (quant)
      decode_quant(bytes);
    else
      decode_tensor(bytes);
  } catch (const IoError& e) {
    return e.code();
  }
  return IoErrc{};
}

// --- tensor container -------------------------------------------------------

TEST(TensorContainer, IdentityGolden) {
  const auto bytes = golden::identity2x2_bytes();
  maybe_write_golden(kGolden / "identity2x2.arbt", bytes);
  EXPECT_EQ(read_file(kGolden / "identity2x2.arbt"), bytes);
  const Tensor t = read_tensor(kGolden / "identity2x2.arbt");
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{2, 2}));
  EXPECT_EQ(t.matrix(), Matrix::Identity(2, 2));
  EXPECT_EQ(encode_tensor(Tensor::from_matrix(Matrix::Identity(2, 2))), bytes);
}

TEST(TensorContainer, ErrorCodes) {
  const auto good = golden::identity2x2_bytes();
  auto bad = good;
  bad[0] = 'X';
  EXPECT_EQ(decode_error(bad, false), IoErrc::kBadMagic);
  bad = good;
  bad[4] = 2;
  EXPECT_EQ(decode_error(bad, false), IoErrc::kUnsupportedVersion);
  bad = good;
  bad[6] = 1;
  EXPECT_EQ(decode_error(bad, false), IoErrc::kUnknownDtype);
  bad = good;
  bad[7] = 0;
  EXPECT_EQ(decode_error(bad, false), IoErrc::kBadRank);
  bad = good;
  bad.pop_back();
  EXPECT_EQ(decode_error(bad, false), IoErrc::kTruncated);
  bad = std::vector<std::uint8_t>(good.begin(), good.begin() + 12);
  EXPECT_EQ(decode_error(bad, false), IoErrc::kTruncated);
  bad = good;
  bad.push_back(0);
  EXPECT_EQ(decode_error(bad, false), IoErrc::kMalformed);
  EXPECT_EQ(decode_error({'A', 'R'}, false), IoErrc::kBadMagic);
  try {
    read_tensor("/nonexistent/arbq/file.arbt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.code(), IoErrc::kOpenFailed);
  }
  EXPECT_THROW(Tensor::from_batches({}), ValidationError);
}

TEST(TensorContainer, RandomRoundTrip) {
  std::mt19937_64 rng(1);
  const fs::path dir = temp_dir("tensor");
  for (int t = 0; t < 10; ++t) {
    const Matrix M = testing::gaussian(1 + rng() % 7, 1 + rng() % 9, rng);
    write_tensor(dir / "m.arbt", M);
    const Tensor back = read_tensor(dir / "m.arbt");
    EXPECT_EQ(back.data, Tensor::from_matrix(M).data);
    EXPECT_EQ(back.matrix(), M.cast<float>().cast<double>());

    std::vector<Matrix> batches{testing::gaussian(3, 4, rng), testing::gaussian(3, 4, rng)};
    const Tensor b = decode_tensor(encode_tensor(Tensor::from_batches(batches)));
    EXPECT_EQ(b.dims, (std::vector<std::uint64_t>{2, 3, 4}));
    ASSERT_EQ(b.batches().size(), 2u);
    EXPECT_EQ(b.batches()[1], batches[1].cast<float>().cast<double>());
  }
  fs::remove_all(dir);
}

// --- quantized layer container ----------------------------------------------

TEST(QuantContainer, Golden) {
  for (Method m : {Method::kArbRc, Method::kArbX}) {
    const QuantizedLayer q = golden::small_layer(m);
    const fs::path path = kGolden / (m == Method::kArbRc ? "small_rc.arbq" : "small_x.arbq");
    const auto bytes = encode_quant(q);
    maybe_write_golden(path, bytes);
    EXPECT_EQ(read_file(path), bytes);
    const QuantizedLayer back = read_quant(path);
    EXPECT_EQ(back.blocks, q.blocks);
    EXPECT_EQ(back.reconstruct(), q.reconstruct());
    EXPECT_EQ(back.name, q.name);
    EXPECT_EQ(back.method, m);
    EXPECT_EQ(back.budget.total_bytes, q.budget.total_bytes);
    EXPECT_TRUE(std::ranges::equal(back.plane2.bytes(), q.plane2.bytes()));
    EXPECT_TRUE(std::ranges::equal(back.maps.group.bytes(), q.maps.group.bytes()));
  }
}

TEST(QuantContainer, ByteLayout) {
  const auto b = read_file(kGolden / "small_rc.arbq");
  auto u64_at = [&](std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[off + static_cast<std::size_t>(i)];
    return v;
  };
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "ARBQ");
  EXPECT_EQ(b[4] | (b[5] << 8), 1);
  EXPECT_EQ(b[6], 3);   // method tag
  EXPECT_EQ(b[7], 2);   // salient order
  EXPECT_EQ(b[8], 1);   // combined bitmap on
  EXPECT_EQ(u64_at(10), 3u);
  EXPECT_EQ(u64_at(18), 5u);
  EXPECT_EQ(b[26], 4);  // block
  EXPECT_EQ(b[30], 15);  // iterations
  EXPECT_EQ(b[34], 9);  // name length
  EXPECT_EQ(std::string(b.begin() + 38, b.begin() + 47), "golden.rc");
  const std::size_t payload = 47 + 5 * 8 + 8;
  EXPECT_EQ(u64_at(87), b.size() - payload - 4);
  EXPECT_EQ(b[payload + 0], 0x02);  // salient column 1
  EXPECT_EQ(b[payload + 1], 0x03);  // group row 0: columns 0, 1
  EXPECT_EQ(b[payload + 2], 0x08);  // group row 1: column 3
  EXPECT_EQ(b[payload + 3], 0x12);  // group row 2: columns 1, 4
  EXPECT_EQ(b[payload + 4], 0x16);  // plane 1 row 0: +1 at columns 1, 2, 4
  EXPECT_EQ(b[payload + 7], 0x00);  // plane 2 row 0, salient column only: -1
  EXPECT_EQ(b[payload + 8], 0x01);  // plane 2 row 1: +1
  EXPECT_EQ(b[payload + 9], 0x00);  // plane 2 row 2: -1
  // Block 0 holds zones 0..3, block 1 (column 4) zones 0 and 1.
  EXPECT_EQ(b[payload + 10], 0x0f);
}

TEST(QuantContainer, HeaderFields) {
  const auto bytes = encode_quant(golden::small_layer(Method::kArbRc));
  const QuantHeader h = decode_quant_header(bytes);
  EXPECT_EQ(h.version, kQuantVersion);
  EXPECT_EQ(h.method, Method::kArbRc);
  EXPECT_EQ(h.rows, 3u);
  EXPECT_EQ(h.cols, 5u);
  EXPECT_EQ(h.block, 4u);
  EXPECT_EQ(h.name, "golden.rc");
  EXPECT_EQ(h.budget.plane_bits, 15u + 3u);
  EXPECT_EQ(h.budget.bitmap_bits, 15u + 5u);
}

TEST(QuantContainer, PipelineRoundTrip) {
  for (Method m : {Method::kBaseline, Method::kArb, Method::kArbX, Method::kArbRc}) {
    QuantConfig cfg;
    cfg.method = m;
    cfg.block_size = 24;
    cfg.calib_batches = 2;
    cfg.calib_seq_len = 32;
    const Matrix W = synthetic_weights(20, 60, 3);
    const auto res = quantize_layer(W, synthetic_calibration(60, cfg), cfg, "rt");
    const QuantizedLayer back = decode_quant(encode_quant(res.layer));
    EXPECT_EQ(back.reconstruct(), res.layer.reconstruct());
    EXPECT_EQ(back.blocks, res.layer.blocks);
    EXPECT_EQ(encode_quant(back), encode_quant(res.layer));
  }
}

TEST(QuantContainer, ErrorCodes) {
  const auto good = encode_quant(golden::small_layer(Method::kArbRc));
  auto bad = good;
  bad[bad.size() - 10] ^= 0x01;  // inside the payload
  EXPECT_EQ(decode_error(bad, true), IoErrc::kChecksumMismatch);
  bad = good;
  bad[4] = static_cast<std::uint8_t>(kQuantVersion + 1);
  EXPECT_EQ(decode_error(bad, true), IoErrc::kUnsupportedVersion);
  bad = good;
  bad[1] = 'Z';
  EXPECT_EQ(decode_error(bad, true), IoErrc::kBadMagic);
  bad = good;
  bad.resize(bad.size() - 20);
  EXPECT_EQ(decode_error(bad, true), IoErrc::kTruncated);
  bad = good;
  bad.push_back(7);
  EXPECT_EQ(decode_error(bad, true), IoErrc::kMalformed);
  bad = good;
  bad[6] = 9;
  EXPECT_EQ(decode_error(bad, true), IoErrc::kMalformed);
}

// --- config -----------------------------------------------------------------

TEST(ConfigFile, RenderParseRoundTrip) {
  QuantConfig c;
  c.method = Method::kArbX;
  c.iterations = 7;
  c.salient_fractions = {0.1, 1.0 / 3};
  c.damping = 0.0123456789012345;
  c.cgb = false;
  c.seed = 1234567890123ull;
  c.scale_bits = 16;
  EXPECT_EQ(parse_config(render_config(c)), c);
  EXPECT_EQ(parse_config(render_config(QuantConfig{})), QuantConfig{});
}

TEST(ConfigFile, CommentsDefaultsAndErrors) {
  const QuantConfig c = parse_config("# header\n  method = arb  # trailing\n\niterations=3\n");
  EXPECT_EQ(c.method, Method::kArb);
  EXPECT_EQ(c.iterations, 3);
  EXPECT_EQ(c.block_size, 128u);
  EXPECT_THROW(parse_config("colour=blue\n"), ConfigError);
  EXPECT_THROW(parse_config("iterations\n"), ConfigError);
  EXPECT_THROW(parse_config("iterations=-2\n"), ConfigError);
  EXPECT_THROW(parse_config("damping=abc\n"), ConfigError);
  EXPECT_THROW(parse_config("cgb=maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("method=arb-z\n"), ConfigError);
  EXPECT_THROW(parse_config("salient_fractions=0.9\n"), ConfigError);
  const QuantConfig demo = read_config(fs::path(ARBQ_DATA_DIR) / "demo.cfg");
  EXPECT_EQ(demo.method, Method::kArbRc);
  EXPECT_EQ(demo.iterations, 15);
}

// --- CSV --------------------------------------------------------------------

TEST(Csv, QuotingRoundTrip) {
  EXPECT_EQ(csv_escape("plain"), "plain");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
  CsvWriter w({"name", "value"});
  w.row({"a,b", "1"});
  w.row({"line\nbreak", "say \"x\""});
  w.row({"", "3"});
  const std::string text = w.str();
  EXPECT_NE(text.find("\r\n"), std::string::npos);
  const auto rows = parse_csv(text);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"name", "value"}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"a,b", "1"}));
  EXPECT_EQ(rows[2], (std::vector<std::string>{"line\nbreak", "say \"x\""}));
  EXPECT_EQ(rows[3], (std::vector<std::string>{"", "3"}));
}

TEST(Csv, ReportRowMatchesHeader) {
  QuantReport r;
  r.layer = "x,y";
  r.trace = {3.0, 2.0, 1.0};
  r.trace_metric = "l1";
  const auto row = report_row(r);
  ASSERT_EQ(row.size(), report_columns().size());
  EXPECT_EQ(row[19], "3;2;1");
  CsvWriter w(report_columns());
  w.row(row);
  EXPECT_EQ(parse_csv(w.str())[1], row);
  EXPECT_EQ(eval_row("a", LayerMetrics{}).size(), eval_columns().size());
}

// --- manifests --------------------------------------------------------------

TEST(Manifest, ParsesShapesAndCounts) {
  const Manifest m = parse_manifest("# demo\nlayer a 4 8\nlayer b 16 4 x3\nfp16 emb 10 4\n");
  ASSERT_EQ(m.layers.size(), 2u);
  EXPECT_EQ(m.layers[1].name, "b");
  EXPECT_EQ(m.layers[1].count, 3u);
  ASSERT_EQ(m.fp16.size(), 1u);
  const ModelShapes s = m.shapes();
  EXPECT_EQ(s.linear.size(), 2u);
  EXPECT_EQ(s.fp16[0].rows, 10u);
}

TEST(Manifest, Errors) {
  for (const char* text : {"layer a 4\n", "layer a 0 4\n", "layer a 4 4 3\n", "layer a 4 4 x0\n", "weights a 1 1\n",
                           "layer a 4 b\n"}) {
    try {
      parse_manifest(text);
      FAIL() << text;
    } catch (const IoError& e) {
      EXPECT_EQ(e.code(), IoErrc::kMalformed) << text;
    }
  }
}

TEST(Manifest, LoadsTensorReferences) {
  const fs::path dir = temp_dir("manifest");
  write_tensor(dir / "w.arbt", Matrix::Ones(3, 7));
  write_file(dir / "m.txt", std::vector<std::uint8_t>{});
  {
    const std::string text = "layer w @w.arbt\n";
    write_file(dir / "m.txt", std::vector<std::uint8_t>(text.begin(), text.end()));
  }
  const Manifest m = read_manifest(dir / "m.txt");
  ASSERT_EQ(m.layers.size(), 1u);
  EXPECT_EQ(m.layers[0].rows, 3u);
  EXPECT_EQ(m.layers[0].cols, 7u);
  EXPECT_EQ(m.layers[0].file, dir / "w.arbt");
  fs::remove_all(dir);
}

TEST(Manifest, LlamaShapes) {
  const Manifest m = read_manifest(fs::path(ARBQ_DATA_DIR) / "llama7b_shapes.txt");
  std::uint64_t weights = 0;
  for (const auto& l : m.layers) weights += static_cast<std::uint64_t>(l.rows) * l.cols * l.count;
  EXPECT_EQ(weights, 6476005376ull);
}

TEST(SanitizeName, ReplacesUnsafeCharacters) {
  EXPECT_EQ(sanitize_name("model.layers.0/q_proj"), "model.layers.0_q_proj");
  EXPECT_EQ(sanitize_name(""), "layer");
}

}  // namespace
}  // namespace arbq
