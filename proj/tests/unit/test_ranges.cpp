#include <gtest/gtest.h>

#include <numeric>

#include "pgnaa/ranges.hpp"
#include "pgnaa/rng.hpp"

using namespace pgnaa;

namespace {

std::vector<int> iota_vec(std::size_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Keeps channel i iff no range covers it.
std::vector<int> mask_oracle(const std::vector<int>& in, const std::vector<ChannelRange>& ranges) {
  std::vector<int> out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    bool dropped = false;
    for (const auto& r : ranges) dropped |= (i >= r.lo && i <= r.hi);
    if (!dropped) out.push_back(in[i]);
  }
  return out;
}

DiscardRanges random_ranges(Rng& rng, std::size_t width, std::vector<bool>& taken) {
  std::vector<ChannelRange> out;
  const auto n = rng.below(5);
  for (std::uint64_t t = 0; t < n; ++t) {
    const std::size_t lo = rng.below(width);
    const std::size_t hi = std::min(width - 1, lo + rng.below(width / 8 + 1));
    bool free = true;
    for (std::size_t i = lo; i <= hi; ++i) free &= !taken[i];
    // Keep a gap so adjacent ranges stay distinct.
    if (lo > 0) free &= !taken[lo - 1];
    if (hi + 1 < width) free &= !taken[hi + 1];
    if (!free) continue;
    for (std::size_t i = lo; i <= hi; ++i) taken[i] = true;
    out.push_back({lo, hi});
  }
  return DiscardRanges(out);
}

}  // namespace

TEST(Ranges, EmptyRangesAreIdentity) {
  const auto v = iota_vec(100);
  EXPECT_EQ(apply_mask(v, DiscardRanges{}), v);
}

TEST(Ranges, LowAndHighBandWidth) {
  const auto r = DiscardRanges::mixed_materials_default();
  EXPECT_EQ(apply_mask(iota_vec(16384), r).size(), 7896u);
  EXPECT_EQ(r.kept_width(16384), 7896u);
  EXPECT_EQ(r.discarded(), 104u + 8384u);
}

TEST(Ranges, UpperTailWidth) {
  const DiscardRanges r({{14000, 16383}});
  const auto out = apply_mask(iota_vec(16384), r);
  EXPECT_EQ(out.size(), 14000u);
  EXPECT_EQ(out.back(), 13999);
}

TEST(Ranges, OverlapAndInversionRejected) {
  EXPECT_THROW(DiscardRanges({{0, 10}, {10, 20}}), ValidationError);
  EXPECT_THROW(DiscardRanges({{5, 4}}), ValidationError);
  EXPECT_NO_THROW(DiscardRanges({{11, 20}, {0, 10}}));
  EXPECT_EQ(DiscardRanges({{11, 20}, {0, 10}}).ranges().front().lo, 0u);
}

TEST(Ranges, OutOfBoundsIsRangeError) {
  EXPECT_THROW(apply_mask(iota_vec(100), DiscardRanges({{90, 100}})), RangeError);
}

TEST(Ranges, ParseAndPrintRoundTrip) {
  const auto r = DiscardRanges::parse("0-103,8000-16383");
  EXPECT_EQ(r, DiscardRanges::mixed_materials_default());
  EXPECT_EQ(r.to_string(), "0-103,8000-16383");
  EXPECT_TRUE(DiscardRanges::parse("").empty());
  EXPECT_THROW(DiscardRanges::parse("12"), ValidationError);
  EXPECT_THROW(DiscardRanges::parse("a-b"), ValidationError);
}

TEST(Ranges, MaskMatchesOracleOnRandomRanges) {
  Rng rng(21);
  for (int t = 0; t < 500; ++t) {
    const std::size_t width = 1 + rng.below(400);
    std::vector<bool> taken(width, false);
    const auto r = random_ranges(rng, width, taken);
    const auto v = iota_vec(width);
    ASSERT_EQ(apply_mask(v, r), mask_oracle(v, r.ranges()));
    ASSERT_EQ(apply_mask(v, r).size(), width - r.discarded());
  }
}

TEST(Ranges, ComposedMasksEqualUnion) {
  Rng rng(22);
  for (int t = 0; t < 500; ++t) {
    const std::size_t width = 2 + rng.below(400);
    std::vector<bool> taken(width, false);
    const auto a = random_ranges(rng, width, taken);
    const auto b = random_ranges(rng, width, taken);
    const auto v = iota_vec(width);
    const auto once = apply_mask(v, a.united_with(b));
    const auto twice = apply_mask(apply_mask(v, a), a.in_reduced_coordinates(b));
    ASSERT_EQ(once, twice);
  }
}

TEST(Ranges, KeptChannelsMapBack) {
  const DiscardRanges r({{2, 3}, {7, 7}});
  EXPECT_EQ(kept_channels(10, r), (std::vector<std::size_t>{0, 1, 4, 5, 6, 8, 9}));
}

TEST(Ranges, RescaleCoversOverlappingChannels) {
  const auto r = DiscardRanges::mixed_materials_default().rescaled(16384, 2048);
  // 0..103 -> 0..12 (channel 12 covers 96..103), 8000..16383 -> 1000..2047.
  EXPECT_EQ(r, DiscardRanges({{0, 12}, {1000, 2047}}));
  EXPECT_EQ(DiscardRanges({{0, 7}}).rescaled(16, 16), DiscardRanges({{0, 7}}));
}
