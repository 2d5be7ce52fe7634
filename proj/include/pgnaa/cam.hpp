#pragma once

// Class activation maps from the GAP head and channel pruning driven by them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pgnaa/error.hpp"
#include "pgnaa/nn.hpp"
#include "pgnaa/ranges.hpp"
#include "pgnaa/sampling.hpp"
#include "pgnaa/spectra.hpp"

namespace pgnaa {

struct ActivationMap {
  std::vector<double> values;  // input resolution
  std::vector<double> raw;     // feature resolution
  std::size_t class_id = 0;
  std::size_t source_resolution = 0;
};

struct ChannelImportance {
  std::vector<double> scores;  // in [0, 1], max 1 unless all zero
};

// Piecewise-linear resampling that maps endpoints onto endpoints.
inline std::vector<double> interpolate_linear(std::span<const double> src, std::size_t width) {
  if (src.empty()) throw ValidationError("cannot interpolate an empty map");
  std::vector<double> out(width);
  if (width == 0) return out;
  if (src.size() == 1 || width == 1) {
    std::fill(out.begin(), out.end(), src.front());
    return out;
  }
  const double step = static_cast<double>(src.size() - 1) / static_cast<double>(width - 1);
  for (std::size_t i = 0; i < width; ++i) {
    const double u = static_cast<double>(i) * step;
    const auto j = std::min(static_cast<std::size_t>(u), src.size() - 2);
    const double t = u - static_cast<double>(j);
    out[i] = src[j] + t * (src[j + 1] - src[j]);
  }
  out.back() = src.back();
  return out;
}

// M_c(pos) = sum_f W_cf * f_f(pos), interpolated to the model input width.
template <typename T>
ActivationMap compute_cam(const ModelParams<T>& params, const ModelConfig& config, const ForwardTrace<T>& trace,
                          std::size_t class_id) {
  if (class_id >= config.n_classes) {
    throw IndexError("class " + std::to_string(class_id) + " out of range for " + std::to_string(config.n_classes) +
                     " classes");
  }
  if (trace.blocks.size() != config.blocks.size() || trace.params_total != params.size()) {
    throw ValidationError("trace does not come from this model");
  }
  const std::size_t nf = trace.feature_channels(), fw = trace.feature_width();
  const auto f = trace.last_feature_maps();
  const auto w = params.head_weight(config).subspan(class_id * nf, nf);
  ActivationMap m;
  m.class_id = class_id;
  m.source_resolution = fw;
  m.raw.assign(fw, 0.0);
  for (std::size_t ch = 0; ch < nf; ++ch) {
    const double wc = static_cast<double>(w[ch]);
    const T* row = f.data() + ch * fw;
    for (std::size_t p = 0; p < fw; ++p) m.raw[p] += wc * static_cast<double>(row[p]);
  }
  m.values = interpolate_linear(m.raw, config.input_width);
  return m;
}

inline ChannelImportance normalize_importance(std::vector<double> acc) {
  const double top = acc.empty() ? 0.0 : *std::max_element(acc.begin(), acc.end());
  if (top > 0.0) {
    for (auto& v : acc) v /= top;
  }
  return {std::move(acc)};
}

// Mean |CAM of the true class| over the dataset, max-normalized.
template <typename T>
ChannelImportance aggregate_importance(const ModelParams<T>& params, const ModelConfig& config,
                                       const InputScaler& scaler, const Batch& dataset) {
  if (dataset.rows == 0) throw ValidationError("importance needs a non-empty dataset");
  if (dataset.width != config.input_width) throw ShapeError("dataset width does not match the model input");
  std::vector<double> acc(config.input_width, 0.0);
  std::vector<T> x(dataset.width);
  for (std::size_t i = 0; i < dataset.rows; ++i) {
    scaler.apply<T>(dataset.row(i), std::span<T>(x));
    const auto tr = forward(params, config, std::span<const T>(x));
    const auto m = compute_cam(params, config, tr, dataset.labels[i]);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += std::abs(m.values[c]);
  }
  for (auto& v : acc) v /= static_cast<double>(dataset.rows);
  return normalize_importance(std::move(acc));
}

// Same aggregation over already-computed maps.
inline ChannelImportance aggregate_importance(std::span<const ActivationMap> maps) {
  if (maps.empty()) throw ValidationError("importance needs a non-empty dataset");
  std::vector<double> acc(maps.front().values.size(), 0.0);
  for (const auto& m : maps) {
    if (m.values.size() != acc.size()) throw ShapeError("activation maps differ in width");
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += std::abs(m.values[c]);
  }
  for (auto& v : acc) v /= static_cast<double>(maps.size());
  return normalize_importance(std::move(acc));
}

// Importance of a model trained on a reduced input, placed back on the full
// channel grid; channels already discarded score 0.
inline ChannelImportance expand_importance(const ChannelImportance& reduced, std::size_t n_channels,
                                           const DiscardRanges& discard) {
  const auto kept = kept_channels(n_channels, discard);
  if (kept.size() != reduced.scores.size()) throw ShapeError("importance width does not match the kept channels");
  ChannelImportance full{std::vector<double>(n_channels, 0.0)};
  for (std::size_t i = 0; i < kept.size(); ++i) full.scores[kept[i]] = reduced.scores[i];
  return full;
}

// Maximal runs of at least `min_run` channels scoring below `threshold`.
inline DiscardRanges select_discard_ranges(std::span<const double> scores, double threshold = 0.05,
                                           std::size_t min_run = 256) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("threshold must be in [0, 1]");
  std::vector<ChannelRange> out;
  const std::size_t n = scores.size();
  std::size_t i = 0;
  while (i < n) {
    if (!(scores[i] < threshold)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < n && scores[j + 1] < threshold) ++j;
    if (j - i + 1 >= std::max<std::size_t>(min_run, 1)) out.push_back({i, j});
    i = j + 1;
  }
  return DiscardRanges(std::move(out));
}

inline DiscardRanges select_discard_ranges(const ChannelImportance& imp, double threshold = 0.05,
                                           std::size_t min_run = 256) {
  return select_discard_ranges(std::span<const double>(imp.scores), threshold, min_run);
}

struct FractionSelection {
  DiscardRanges ranges;
  double threshold = 0.0;
  double fraction = 0.0;  // of channels discarded
};

// Lowest threshold whose discard set covers at least `target` of the
// channels. Coverage only grows with the threshold, so a search over the
// distinct score values finds it.
inline FractionSelection select_discard_ranges_for_fraction(std::span<const double> scores, double target,
                                                            std::size_t min_run = 256) {
  if (!(target >= 0.0 && target <= 1.0)) throw ValidationError("target fraction must be in [0, 1]");
  if (scores.empty()) throw ValidationError("empty importance vector");
  const double n = static_cast<double>(scores.size());
  auto evaluate = [&](double t) {
    FractionSelection s{select_discard_ranges(scores, t, min_run), t, 0.0};
    s.fraction = static_cast<double>(s.ranges.discarded()) / n;
    return s;
  };
  // Candidate thresholds: just above each distinct score, then 1.
  std::vector<double> cand(scores.begin(), scores.end());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  for (auto& c : cand) c = std::min(1.0, std::nextafter(c, 2.0));
  cand.push_back(1.0);
  std::size_t lo = 0, hi = cand.size() - 1;
  if (evaluate(cand[hi]).fraction < target) return evaluate(cand[hi]);
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (evaluate(cand[mid]).fraction >= target) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  return evaluate(cand[lo]);
}

// ---------------------------------------------------------------------------
// CSV export

inline void write_importance_csv(std::ostream& out, const ChannelImportance& imp, const ChannelCalibration& cal) {
  if (imp.scores.size() != cal.n_channels) throw ShapeError("importance width differs from the calibration");
  out << "channel,energy_keV,score\n";
  char buf[96];
  for (std::size_t c = 0; c < imp.scores.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%zu,%.4f,%.9g\n", c, energy_of_channel(cal, c), imp.scores[c]);
    out << buf;
  }
}

inline void write_ranges_csv(std::ostream& out, const DiscardRanges& ranges) {
  out << "lo,hi\n";
  for (const auto& r : ranges.ranges()) out << r.lo << ',' << r.hi << '\n';
}

inline void write_importance_csv(const std::string& path, const ChannelImportance& imp, const ChannelCalibration& cal) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_importance_csv(out, imp, cal);
  if (!out) throw IoError("write failed for " + path);
}

inline void write_ranges_csv(const std::string& path, const DiscardRanges& ranges) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_ranges_csv(out, ranges);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace pgnaa
