#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "pgnaa/sampling.hpp"
#include "support.hpp"

using namespace pgnaa;
using pgnaa::test::chi_square_gof;
using pgnaa::test::chi_square_two_sample;
using pgnaa::test::enumerate_multinomial;

namespace {

const ChannelCalibration kToyCal{4, 1.3, 1.3};
const std::vector<std::int64_t> kToy = {1, 10, 2, 0};

Spectrum toy() { return Spectrum(kToyCal, kToy, "toy"); }

// Observed frequency of every enumerated outcome over n draws of `draw`.
template <typename Draw>
pgnaa::test::ChiSquare gof_against_enumeration(const std::vector<std::int64_t>& weights, std::int64_t k, int n,
                                               Draw draw) {
  const auto outcomes = enumerate_multinomial(weights, k);
  std::map<std::vector<std::int64_t>, std::size_t> index;
  std::vector<double> probs;
  for (const auto& [v, p] : outcomes) {
    index.emplace(v, probs.size());
    probs.push_back(p);
  }
  std::vector<double> observed(probs.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const auto v = draw();
    const auto it = index.find(v);
    if (it == index.end()) {
      ADD_FAILURE() << "draw outside the support";
      return {};
    }
    observed[it->second] += 1.0;
  }
  return chi_square_gof(observed, probs, n);
}

}  // namespace

TEST(Oracle, EnumerationCoversAllOutcomesAndSumsToOne) {
  const auto o = enumerate_multinomial(kToy, 5);
  EXPECT_EQ(o.size(), 21u);  // C(5+2, 2) over the three non-zero channels
  double total = 0.0;
  for (const auto& [v, p] : o) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

// ---------------------------------------------------------------------------
// RSM-1

TEST(Rsm1, ToyDrawsUseOnlyNonzeroChannels) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const auto ev = rsm1_event_list(toy(), {5}, rng);
    ASSERT_EQ(ev.energies.size(), 5u);
    for (double e : ev.energies) {
      ASSERT_TRUE(std::abs(e - 1.3) < 1e-9 || std::abs(e - 2.6) < 1e-9 || std::abs(e - 3.9) < 1e-9) << e;
    }
  }
}

TEST(Rsm1, ZeroBudgetIsEmpty) {
  Rng rng(1);
  EXPECT_TRUE(rsm1_event_list(toy(), {0}, rng).energies.empty());
}

TEST(Rsm1, SingleEventFrequencyMatchesBernoulli) {
  Rng rng(2);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += std::abs(rsm1_event_list(toy(), {1}, rng).energies[0] - 2.6) < 1e-9;
  const double p = 10.0 / 13.0;
  EXPECT_NEAR(hits / double(n), p, 4.0 * std::sqrt(p * (1 - p) / n));
}

TEST(Rsm1, EmptySpectrumIsError) {
  Rng rng(1);
  const Spectrum empty(kToyCal, {0, 0, 0, 0}, "e");
  EXPECT_THROW(rsm1_event_list(empty, {3}, rng), EmptyDistributionError);
  EXPECT_NO_THROW(rsm1_event_list(empty, {0}, rng));
}

// ---------------------------------------------------------------------------
// RSM-3

TEST(Rsm3, SumsToBudgetAndKeepsZeros) {
  Rng rng(3);
  for (auto path : {MultinomialPath::fast, MultinomialPath::baseline}) {
    for (int t = 0; t < 2000; ++t) {
      const std::uint64_t k = rng.below(200);
      const auto s = rsm3_weighted_counts(toy(), {k}, rng, path);
      ASSERT_EQ(s.total(), static_cast<std::int64_t>(k));
      ASSERT_EQ(s.counts[3], 0);
      for (auto c : s.counts) ASSERT_GE(c, 0);
    }
  }
}

TEST(Rsm3, RandomSpectraSumToBudget) {
  Rng rng(4);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + rng.below(300);
    std::vector<std::int64_t> w(n);
    for (auto& x : w) x = rng.below(3) == 0 ? 0 : static_cast<std::int64_t>(rng.below(1000));
    w[rng.below(n)] += 1;
    const Spectrum s(ChannelCalibration{n, 1.0, 0.0}, w, "r");
    const std::uint64_t k = rng.below(20000);
    for (auto path : {MultinomialPath::fast, MultinomialPath::baseline}) {
      const auto out = rsm3_weighted_counts(s, {k}, rng, path);
      ASSERT_EQ(out.total(), static_cast<std::int64_t>(k));
      for (std::size_t i = 0; i < n; ++i) {
        if (w[i] == 0) ASSERT_EQ(out.counts[i], 0);
      }
    }
  }
}

TEST(Rsm3, ZeroBudgetIsZeroVector) {
  Rng rng(1);
  EXPECT_EQ(rsm3_weighted_counts(toy(), {0}, rng).counts, (std::vector<std::int64_t>{0, 0, 0, 0}));
}

TEST(Rsm3, EmptySpectrumIsError) {
  Rng rng(1);
  const Spectrum empty(kToyCal, {0, 0, 0, 0}, "e");
  EXPECT_THROW(rsm3_weighted_counts(empty, {1}, rng), EmptyDistributionError);
  EXPECT_THROW(rsm3_weighted_counts(empty, {1}, rng, MultinomialPath::baseline), EmptyDistributionError);
}

TEST(Rsm3, MeanAtThirteenMatchesToy) {
  Rng rng(5);
  const int n = 100000;
  std::vector<double> sum(4, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto s = rsm3_weighted_counts(toy(), {13}, rng);
    for (int c = 0; c < 4; ++c) sum[c] += static_cast<double>(s.counts[c]);
  }
  for (int c = 0; c < 4; ++c) {
    const double p = kToy[c] / 13.0;
    const double se = std::sqrt(13.0 * p * (1 - p) / n);
    EXPECT_NEAR(sum[c] / n, static_cast<double>(kToy[c]), 4.0 * se + 1e-12) << "channel " << c;
  }
}

TEST(Rsm3, GoodnessOfFitOnToyBothPaths) {
  for (auto path : {MultinomialPath::fast, MultinomialPath::baseline}) {
    Rng rng(6);
    const auto r = gof_against_enumeration(kToy, 5, 100000, [&] { return rsm3_weighted_counts(toy(), {5}, rng, path).counts; });
    EXPECT_FALSE(r.rejects()) << "chi2=" << r.statistic << " crit=" << r.critical;
    EXPECT_GT(r.dof, 10.0);
  }
}

TEST(Rsm3, GoodnessOfFitOnBinomialBranch) {
  // k > 6 * nnz routes the fast path through conditional binomials.
  const std::vector<std::int64_t> w = {3, 0, 5, 1};
  const Spectrum s(kToyCal, w, "w");
  for (auto path : {MultinomialPath::fast, MultinomialPath::baseline}) {
    Rng rng(7);
    const auto r = gof_against_enumeration(w, 25, 100000, [&] { return rsm3_weighted_counts(s, {25}, rng, path).counts; });
    EXPECT_FALSE(r.rejects()) << "chi2=" << r.statistic << " crit=" << r.critical;
  }
  // The cached sampler walks channels by descending weight instead.
  const MultinomialSampler sampler(w);
  Rng rng(17);
  const auto r = gof_against_enumeration(w, 25, 100000, [&] { return sampler.draw(25, rng); });
  EXPECT_FALSE(r.rejects()) << "chi2=" << r.statistic << " crit=" << r.critical;
}

TEST(Rsm3, HistogramOfRsm1IsDistributedLikeRsm3) {
  Rng a(8), b(9);
  std::map<std::vector<std::int64_t>, double> from_events, from_counts;
  for (int i = 0; i < 100000; ++i) {
    const auto ev = rsm1_event_list(toy(), {5}, a);
    std::vector<std::int64_t> h(4, 0);
    for (double e : ev.energies) ++h[channel_of_energy(kToyCal, e)];
    from_events[h] += 1.0;
    from_counts[rsm3_weighted_counts(toy(), {5}, b).counts] += 1.0;
  }
  const auto r = chi_square_two_sample(from_events, from_counts);
  EXPECT_FALSE(r.rejects()) << "chi2=" << r.statistic << " crit=" << r.critical;
}

TEST(Rsm3, FastAndBaselineIndistinguishable) {
  Rng a(10), b(11);
  std::map<std::vector<std::int64_t>, double> fast, base;
  for (int i = 0; i < 100000; ++i) {
    fast[rsm3_weighted_counts(toy(), {5}, a, MultinomialPath::fast).counts] += 1.0;
    base[rsm3_weighted_counts(toy(), {5}, b, MultinomialPath::baseline).counts] += 1.0;
  }
  EXPECT_FALSE(chi_square_two_sample(fast, base).rejects());
}

TEST(Sampling, FixedSeedIsBitIdenticalForEveryMethod) {
  const auto s = toy();
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    auto e = rsm1_event_list(s, {50}, rng).energies;
    auto c3 = rsm3_weighted_counts(s, {50}, rng).counts;
    auto c3b = rsm3_weighted_counts(s, {50}, rng, MultinomialPath::baseline).counts;
    auto c2 = rsm2_binomial_thinning(s, 0.4, rng).counts;
    return std::make_tuple(e, c3, c3b, c2);
  };
  EXPECT_EQ(run(77), run(77));
  EXPECT_NE(run(77), run(78));
}

// ---------------------------------------------------------------------------
// RSM-2

TEST(Rsm2, DegenerateFractions) {
  Rng rng(1);
  EXPECT_EQ(rsm2_binomial_thinning(toy(), 1.0, rng).counts, kToy);
  EXPECT_EQ(rsm2_binomial_thinning(toy(), 0.0, rng).counts, (std::vector<std::int64_t>{0, 0, 0, 0}));
  EXPECT_THROW(rsm2_binomial_thinning(toy(), 1.5, rng), ValidationError);
  EXPECT_THROW(rsm2_binomial_thinning(toy(), -0.1, rng), ValidationError);
}

TEST(Rsm2, MeansMatchThinningRate) {
  Rng rng(12);
  const int n = 100000;
  const double p = 0.5;
  double total = 0.0;
  std::vector<double> sum(4, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto s = rsm2_binomial_thinning(toy(), p, rng);
    total += static_cast<double>(s.total());
    for (int c = 0; c < 4; ++c) sum[c] += static_cast<double>(s.counts[c]);
  }
  EXPECT_NEAR(total / n, 6.5, 4.0 * std::sqrt(13.0 * p * (1 - p) / n));
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(sum[c] / n, p * kToy[c], 4.0 * std::sqrt(kToy[c] * p * (1 - p) / n) + 1e-12);
  }
}

TEST(Rsm2, RetainFractionMatchesBudget) {
  EXPECT_DOUBLE_EQ(retain_fraction_for_budget(toy(), {5}), 5.0 / 13.0);
  EXPECT_DOUBLE_EQ(retain_fraction_for_budget(toy(), {100}), 1.0);
}

// ---------------------------------------------------------------------------
// RSM-4

TEST(Rsm4, EmptyEventListGivesBlankRaster) {
  const auto r = rsm4_render(EventList{}, kToyCal, 8, 4, RasterMode::scatter);
  EXPECT_EQ(r.pixels, std::vector<std::uint8_t>(32, 0));
  EXPECT_THROW(rsm4_render(EventList{}, kToyCal, 0, 4, RasterMode::scatter), ValidationError);
}

TEST(Rsm4, ToyEventsLightOnlyTheirColumns) {
  const EventList ev{{2.6, 1.3, 2.6, 3.9, 2.6}};
  const auto r = rsm4_render(ev, kToyCal, 5, 4, RasterMode::scatter);
  // Direct binning: 1.3 -> column 0, 2.6 -> 1, 3.9 -> 2.
  EXPECT_EQ(r.column_sum(0), 1u);
  EXPECT_EQ(r.column_sum(1), 3u);
  EXPECT_EQ(r.column_sum(2), 1u);
  EXPECT_EQ(r.column_sum(3), 0u);
  EXPECT_EQ(r.at(0, 1), 1);
  EXPECT_EQ(r.at(1, 0), 1);
  EXPECT_EQ(r.at(3, 2), 1);
}

TEST(Rsm4, HistogramHeightsScaleToMax) {
  DownsizedSample s;
  s.counts = kToy;
  const auto r = rsm4_render(s, kToyCal, 10, 4, RasterMode::histogram);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.column_sum(c), static_cast<std::size_t>(kToy[c]));
  // Bars grow from the bottom row.
  EXPECT_EQ(r.at(9, 0), 1);
  EXPECT_EQ(r.at(8, 0), 0);
}

TEST(Rsm4, HistogramOfEventsMatchesHistogramOfCounts) {
  Rng rng(13);
  const auto ev = rsm1_event_list(toy(), {40}, rng);
  DownsizedSample s;
  s.counts.assign(4, 0);
  for (double e : ev.energies) ++s.counts[channel_of_energy(kToyCal, e)];
  EXPECT_EQ(rsm4_render(ev, kToyCal, 16, 4, RasterMode::histogram).pixels,
            rsm4_render(s, kToyCal, 16, 4, RasterMode::histogram).pixels);
}

// ---------------------------------------------------------------------------
// Batches

namespace {

SpeciesLibrary detector_library(std::size_t n_species) {
  return synthetic_manifest(well_separated_species(n_species), ChannelCalibration::detector_default(), 3, 1e6)
      .build();
}

}  // namespace

TEST(Batch, FullWidthBatchOverTwelveSpecies) {
  const auto lib = detector_library(12);
  Rng rng(14);
  const auto b = batch_generate(lib, {19650}, 128, rng);
  EXPECT_EQ(b.rows, 128u);
  EXPECT_EQ(b.width, 16384u);
  EXPECT_EQ(b.counts.size(), 128u * 16384u);
  for (std::size_t i = 0; i < b.rows; ++i) {
    ASSERT_LT(b.labels[i], 12u);
    ASSERT_EQ(std::accumulate(b.row(i).begin(), b.row(i).end(), std::int64_t{0}), 19650);
  }
}

TEST(Batch, DiscardedWidth) {
  const auto lib = detector_library(2);
  Rng rng(15);
  const auto b = batch_generate(lib, {1000}, 4, rng, DiscardRanges::mixed_materials_default());
  EXPECT_EQ(b.width, 7896u);
  EXPECT_EQ(b.counts.size(), 4u * 7896u);
}

TEST(Batch, SingleSpeciesAlwaysLabelZero) {
  const auto lib = detector_library(1);
  Rng rng(16);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(batch_generate(lib, {10}, 1, rng).labels[0], 0u);
}

TEST(Batch, MaskedRowsEqualMaskedFullRows) {
  const auto lib = detector_library(3);
  const auto discard = DiscardRanges::mixed_materials_default();
  Rng a(17), b(17);
  const auto full = batch_generate(lib, {5000}, 8, a);
  const auto masked = batch_generate(lib, {5000}, 8, b, discard);
  EXPECT_EQ(full.labels, masked.labels);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto m = apply_mask(full.row(i), discard);
    ASSERT_TRUE(std::equal(m.begin(), m.end(), masked.row(i).begin()));
  }
}

TEST(Batch, BalancedBatchIsInClassOrder) {
  const auto lib = detector_library(3);
  Rng rng(18);
  const auto b = BatchGenerator(lib).generate_balanced({100}, 2, rng);
  EXPECT_EQ(b.labels, (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
}

TEST(Batch, DumpRoundTrip) {
  const auto lib = detector_library(2);
  Rng rng(19);
  const DiscardRanges discard({{0, 103}});
  const auto b = batch_generate(lib, {300}, 5, rng, discard);
  const auto dir = std::filesystem::temp_directory_path() / "pgnaa_batch_dump";
  std::filesystem::remove_all(dir);
  write_batch_dump(dir, "b0", b, {19, discard});
  BatchDumpInfo info;
  const auto back = read_batch_dump(dir, "b0", &info);
  EXPECT_EQ(back.counts, b.counts);
  EXPECT_EQ(back.labels, b.labels);
  EXPECT_EQ(back.width, b.width);
  EXPECT_EQ(back.budget.k, 300u);
  EXPECT_EQ(info.seed, 19u);
  EXPECT_EQ(info.discard, discard);
}
