#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "hsf/trace.hpp"
#include "test_util.hpp"

using namespace hsf;
using hsf::testing::from_bytes;
using hsf::testing::random_trace;
using hsf::testing::to_bytes;

namespace {

ActivationTrace small_trace() {
  ActivationTrace t;
  t.header = TraceHeader::uniform("unit", 2, 4);
  for (std::uint64_t id = 0; id < 3; ++id) {
    SampleRecord r;
    r.record_id = id;
    r.label = id % 2 ? Label::Abnormal : Label::Normal;
    for (const auto& s : t.header.layers) {
      std::vector<float> v(s.dim);
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = static_cast<float>(id) + 0.25f * static_cast<float>(j) - 0.5f;
      r.activations.emplace(s.id, v);
    }
    t.records.push_back(r);
  }
  return t;
}

std::size_t header_end(const std::string& bytes) {
  // magic + version + header_len + header + record count
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[6 + i])) << (8 * i);
  return 4 + 2 + 4 + len + 8;
}

}  // namespace

TEST(LayerId, OrdersAttentionBeforeMlpThenBlock) {
  EXPECT_LT((LayerId{7, LayerKind::Attention}), (LayerId{0, LayerKind::Mlp}));
  EXPECT_LT((LayerId{1, LayerKind::Mlp}), (LayerId{2, LayerKind::Mlp}));
}

TEST(TraceIo, EmptyTraceHasZeroCountAndEmptyChecksum) {
  ActivationTrace t;
  t.header = TraceHeader::uniform("empty", 1, 3);
  const auto bytes = to_bytes(t);
  const auto end = header_end(bytes);
  ASSERT_EQ(bytes.size(), end + 4);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(bytes[end - 8 + i], 0);
  // CRC-32 of the empty string is 0.
  for (int i = 0; i < 4; ++i) EXPECT_EQ(bytes[end + i], 0);
  EXPECT_TRUE(bitwise_equal(from_bytes(bytes), t));
}

TEST(TraceIo, LayoutStartsWithMagicAndVersion) {
  const auto bytes = to_bytes(small_trace());
  EXPECT_EQ(bytes.substr(0, 4), "HSFT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  const auto record_size = 8 + 1 + 4 * 16;
  EXPECT_EQ(bytes.size(), header_end(bytes) + 3 * record_size + 4);
}

TEST(TraceIo, RoundTripPreservesBitPatterns) {
  auto t = small_trace();
  t.records[0].activations.at({0, LayerKind::Attention})[0] = -0.0f;
  t.records[0].activations.at({0, LayerKind::Attention})[1] = std::numeric_limits<float>::denorm_min();
  const auto back = from_bytes(to_bytes(t));
  EXPECT_TRUE(bitwise_equal(back, t));
  EXPECT_TRUE(std::signbit(back.records[0].activations.at({0, LayerKind::Attention})[0]));
}

TEST(TraceIo, RoundTripRandomTraces) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto t = random_trace(seed);
    ASSERT_TRUE(validate_trace(t).empty());
    EXPECT_TRUE(bitwise_equal(from_bytes(to_bytes(t)), t)) << "seed " << seed;
  }
}

TEST(TraceIo, DimMismatchRejectedBeforeWriting) {
  auto t = small_trace();
  t.records[1].activations.at({0, LayerKind::Attention}).pop_back();
  std::ostringstream os;
  EXPECT_THROW(write_trace(t, os), ValidationError);
  EXPECT_TRUE(os.str().empty());
}

TEST(TraceIo, NonFiniteRejectedBeforeWriting) {
  auto t = small_trace();
  t.records[2].activations.at({1, LayerKind::Mlp})[3] = std::numeric_limits<float>::infinity();
  std::ostringstream os;
  EXPECT_THROW(write_trace(t, os), ValidationError);
  EXPECT_TRUE(os.str().empty());
}

TEST(TraceIo, SinkFailureReportsIoError) {
  std::ostringstream os;
  os.setstate(std::ios::badbit);
  EXPECT_THROW(write_trace(small_trace(), os), IoError);
}

TEST(TraceIo, FlippedChecksumIsCorruption) {
  auto bytes = to_bytes(small_trace());
  for (std::size_t i = bytes.size() - 4; i < bytes.size(); ++i) bytes[i] = static_cast<char>(~bytes[i]);
  EXPECT_THROW(from_bytes(bytes), CorruptionError);
}

TEST(TraceIo, AnySingleByteFlipInRecordRegionIsCorruption) {
  const auto t = small_trace();
  const auto bytes = to_bytes(t);
  for (std::size_t i = header_end(bytes); i < bytes.size() - 4; ++i) {
    auto bad = bytes;
    bad[i] = static_cast<char>(bad[i] ^ 0x01);
    EXPECT_THROW(from_bytes(bad), CorruptionError) << "offset " << i;
  }
}

TEST(TraceIo, TruncationNamesPartialRecord) {
  const auto bytes = to_bytes(small_trace());
  const std::size_t record_size = 8 + 1 + 4 * 16;
  // Cut 10 bytes into record index 2.
  const auto cut = header_end(bytes) + 2 * record_size + 10;
  try {
    from_bytes(bytes.substr(0, cut));
    FAIL() << "expected truncation";
  } catch (const TruncationError& e) {
    EXPECT_EQ(e.record_index(), 2u);
    EXPECT_NE(std::string(e.what()).find("record index 2"), std::string::npos);
  }
  // Records intact, checksum missing.
  try {
    from_bytes(bytes.substr(0, bytes.size() - 2));
    FAIL() << "expected truncation";
  } catch (const TruncationError& e) {
    EXPECT_EQ(e.record_index(), 3u);
  }
}

TEST(TraceIo, BadMagicAndVersion) {
  auto bytes = to_bytes(small_trace());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(from_bytes(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(from_bytes(bad_version), VersionError);
}

TEST(TraceIo, TrailingBytesRejected) {
  auto bytes = to_bytes(small_trace()) + "x";
  EXPECT_THROW(from_bytes(bytes), FormatError);
}

TEST(ValidateTrace, ValidTraceHasEmptyReport) {
  EXPECT_TRUE(validate_trace(small_trace()).empty());
}

TEST(ValidateTrace, NaNReportsRecordAndLayer) {
  auto t = small_trace();
  t.records[1].activations.at({1, LayerKind::Mlp})[2] = std::nanf("");
  const auto report = validate_trace(t);
  ASSERT_EQ(report.size(), 1u);
  EXPECT_EQ(report[0].record_id, 1u);
  EXPECT_EQ(report[0].layer, (LayerId{1, LayerKind::Mlp}));
}

TEST(ValidateTrace, RecordOrderViolation) {
  auto t = small_trace();
  t.records[1].record_id = 2;
  t.records[2].record_id = 1;
  const auto report = validate_trace(t);
  ASSERT_EQ(report.size(), 1u);
  EXPECT_EQ(report[0].record_id, 1u);
  EXPECT_NE(report[0].message.find("increasing"), std::string::npos);
}

TEST(ValidateTrace, HeaderProblems) {
  auto t = small_trace();
  t.header.layers.pop_back();
  EXPECT_FALSE(validate_header(t.header).empty());

  auto dup = small_trace();
  dup.header.layers[1] = dup.header.layers[0];
  EXPECT_FALSE(validate_header(dup.header).empty());

  auto zero = small_trace();
  zero.header.layers[0].dim = 0;
  EXPECT_FALSE(validate_header(zero.header).empty());
}

TEST(ValidateTrace, ExtraAndMissingLayers) {
  auto t = small_trace();
  t.records[0].activations.erase({0, LayerKind::Mlp});
  t.records[0].activations[{9, LayerKind::Mlp}] = {1.0f};
  EXPECT_EQ(validate_trace(t).size(), 2u);
}

TEST(ValidateTrace, EmptyReportIffWriteSucceeds) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto t = random_trace(seed);
    if (seed % 3 == 1 && !t.records.empty()) t.records.back().activations.begin()->second.push_back(0.f);
    if (seed % 3 == 2 && t.records.size() > 1) t.records[1].record_id = t.records[0].record_id;
    std::ostringstream os;
    bool wrote = true;
    try {
      write_trace(t, os);
    } catch (const ValidationError&) {
      wrote = false;
    }
    EXPECT_EQ(validate_trace(t).empty(), wrote) << "seed " << seed;
  }
}
