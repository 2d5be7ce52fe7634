#pragma once

// Independent oracles shared by the unit and acceptance suites.

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

namespace pgnaa::test {

// All count vectors of length weights.size() summing to k, each with its
// exact multinomial probability. Cells with zero weight never receive counts.
inline std::vector<std::pair<std::vector<std::int64_t>, double>> enumerate_multinomial(
    const std::vector<std::int64_t>& weights, std::int64_t k) {
  const double total = static_cast<double>(std::accumulate(weights.begin(), weights.end(), std::int64_t{0}));
  std::vector<std::pair<std::vector<std::int64_t>, double>> out;
  std::vector<std::int64_t> cur(weights.size(), 0);
  std::function<void(std::size_t, std::int64_t)> rec = [&](std::size_t i, std::int64_t left) {
    if (i == weights.size()) {
      if (left != 0) return;
      // k! / prod(x_i!) * prod(p_i^x_i)
      double logp = std::lgamma(static_cast<double>(k) + 1.0);
      for (std::size_t j = 0; j < cur.size(); ++j) {
        if (cur[j] == 0) continue;
        const double p = static_cast<double>(weights[j]) / total;
        logp += static_cast<double>(cur[j]) * std::log(p) - std::lgamma(static_cast<double>(cur[j]) + 1.0);
      }
      out.emplace_back(cur, std::exp(logp));
      return;
    }
    if (weights[i] == 0) {
      cur[i] = 0;
      rec(i + 1, left);
      return;
    }
    for (std::int64_t x = 0; x <= left; ++x) {
      cur[i] = x;
      rec(i + 1, left - x);
    }
    cur[i] = 0;
  };
  rec(0, k);
  return out;
}

struct ChiSquare {
  double statistic = 0.0;
  double dof = 0.0;
  double critical = 0.0;  // upper quantile at the requested significance
  bool rejects() const { return statistic > critical; }
};

inline double chi_square_quantile(double dof, double upper_tail) {
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(dof), upper_tail));
}

// Goodness of fit of observed tallies against cell probabilities. Cells with
// expected count < 5 are pooled into one cell.
inline ChiSquare chi_square_gof(const std::vector<double>& observed, const std::vector<double>& probs, double n,
                                double significance = 0.001) {
  std::vector<double> obs, exp;
  double pooled_o = 0.0, pooled_e = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double e = probs[i] * n;
    if (e < 5.0) {
      pooled_o += observed[i];
      pooled_e += e;
    } else {
      obs.push_back(observed[i]);
      exp.push_back(e);
    }
  }
  if (pooled_e > 0.0) {
    obs.push_back(pooled_o);
    exp.push_back(pooled_e);
  }
  ChiSquare r;
  for (std::size_t i = 0; i < obs.size(); ++i) r.statistic += (obs[i] - exp[i]) * (obs[i] - exp[i]) / exp[i];
  r.dof = static_cast<double>(obs.size()) - 1.0;
  r.critical = chi_square_quantile(r.dof, significance);
  return r;
}

// Two-sample homogeneity test over the union of observed categories.
template <typename K>
ChiSquare chi_square_two_sample(const std::map<K, double>& a, const std::map<K, double>& b,
                                double significance = 0.001) {
  std::map<K, std::pair<double, double>> cells;
  for (const auto& [key, v] : a) cells[key].first += v;
  for (const auto& [key, v] : b) cells[key].second += v;
  double na = 0.0, nb = 0.0;
  for (const auto& [key, v] : cells) {
    na += v.first;
    nb += v.second;
  }
  // Pool sparse cells.
  std::vector<std::pair<double, double>> kept;
  std::pair<double, double> pool{0.0, 0.0};
  for (const auto& [key, v] : cells) {
    if (v.first + v.second < 10.0) {
      pool.first += v.first;
      pool.second += v.second;
    } else {
      kept.push_back(v);
    }
  }
  if (pool.first + pool.second > 0.0) kept.push_back(pool);
  ChiSquare r;
  const double n = na + nb;
  for (const auto& [x, y] : kept) {
    const double row = x + y;
    const double ea = row * na / n, eb = row * nb / n;
    r.statistic += (x - ea) * (x - ea) / ea + (y - eb) * (y - eb) / eb;
  }
  r.dof = static_cast<double>(kept.size()) - 1.0;
  r.critical = chi_square_quantile(r.dof, significance);
  return r;
}

}  // namespace pgnaa::test
