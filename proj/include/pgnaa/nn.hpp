#pragma once

// Residual 1D convolutional classifier with a global-average-pooling head.
//
//   input (1 x W) -> [conv(k, stride) -> ReLU (+ skip)] x blocks -> GAP -> linear -> softmax
//
// Everything is templated on the scalar type: double for gradient checks,
// float for training runs. The classifier head (pooling, logits, softmax,
// loss) is always evaluated in double.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgnaa/error.hpp"
#include "pgnaa/library.hpp"
#include "pgnaa/ranges.hpp"
#include "pgnaa/rng.hpp"
#include "pgnaa/sampling.hpp"

namespace pgnaa {

enum class Activation { relu };

struct BlockSpec {
  std::size_t filters = 32;
  std::size_t kernel_size = 9;
  bool residual = false;
  std::size_t stride = 1;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ModelConfig {
  std::size_t input_width = 0;
  std::size_t n_classes = 2;
  std::vector<BlockSpec> blocks;
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  std::size_t in_channels(std::size_t block) const { return block == 0 ? 1 : blocks[block - 1].filters; }

  std::size_t in_width(std::size_t block) const {
    std::size_t w = input_width;
    for (std::size_t b = 0; b < block; ++b) w = (w + blocks[b].stride - 1) / blocks[b].stride;
    return w;
  }

  std::size_t out_width(std::size_t block) const { return in_width(block + 1); }
  std::size_t feature_width() const { return in_width(blocks.size()); }
  std::size_t feature_channels() const { return blocks.back().filters; }

  void validate() const {
    if (input_width == 0) throw ValidationError("input width must be >= 1");
    if (n_classes < 2) throw ValidationError("a classifier needs at least 2 classes");
    if (blocks.empty()) throw ValidationError("model needs at least one block");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& s = blocks[b];
      const auto where = "block " + std::to_string(b) + ": ";
      if (s.filters == 0) throw ValidationError(where + "filters must be >= 1");
      if (s.kernel_size == 0 || s.kernel_size % 2 == 0) throw ValidationError(where + "kernel size must be odd");
      if (s.stride == 0) throw ValidationError(where + "stride must be >= 1");
      if (s.residual && (s.stride != 1 || in_channels(b) != s.filters)) {
        throw ValidationError(where + "residual add needs stride 1 and matching channel count");
      }
    }
  }

  // `n_blocks` blocks of `filters` filters; stride 4 on even blocks, a
  // residual connection on every odd block.
  static ModelConfig desk_default(std::size_t input_width, std::size_t n_classes, std::uint64_t seed = 0,
                                  std::size_t n_blocks = 6, std::size_t filters = 32,
                                  std::size_t kernel_size = 9) {
    ModelConfig c;
    c.input_width = input_width;
    c.n_classes = n_classes;
    c.seed = seed;
    for (std::size_t b = 0; b < n_blocks; ++b) {
      c.blocks.push_back({filters, kernel_size, b % 2 == 1, b % 2 == 0 ? std::size_t{4} : std::size_t{1}});
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.blocks) {
    blocks.push_back({{"filters", b.filters}, {"kernel_size", b.kernel_size}, {"residual", b.residual}, {"stride", b.stride}});
  }
  return {{"input_width", c.input_width}, {"n_classes", c.n_classes}, {"blocks", blocks},
          {"activation", "relu"},         {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.input_width = j.at("input_width").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.value("activation", std::string("relu")) != "relu") throw ValidationError("unsupported activation");
    for (const auto& b : j.at("blocks")) {
      c.blocks.push_back({b.at("filters").get<std::size_t>(), b.at("kernel_size").get<std::size_t>(),
                          b.value("residual", false), b.value("stride", std::size_t{1})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    std::size_t kernel = 0;  // filters x in_channels x kernel_size
    std::size_t bias = 0;    // filters
    friend bool operator==(const Block&, const Block&) = default;
  };
  std::vector<Block> blocks;
  std::size_t head_weight = 0;  // n_classes x feature_channels
  std::size_t head_bias = 0;    // n_classes
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& c) {
    std::size_t at = 0;
    for (std::size_t b = 0; b < c.blocks.size(); ++b) {
      Block blk;
      blk.kernel = at;
      at += c.blocks[b].filters * c.in_channels(b) * c.blocks[b].kernel_size;
      blk.bias = at;
      at += c.blocks[b].filters;
      blocks.push_back(blk);
    }
    head_weight = at;
    at += c.n_classes * c.feature_channels();
    head_bias = at;
    at += c.n_classes;
    total = at;
  }

  ParamLayout() = default;
  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;
};

// All weights of the network in one flat vector. Also used for gradients.
template <typename T>
struct ModelParams {
  ParamLayout layout;
  std::vector<T> values;

  ModelParams() = default;
  explicit ModelParams(const ModelConfig& c) : layout(c), values(layout.total, T(0)) {}

  std::size_t size() const noexcept { return values.size(); }

  std::span<T> kernel(const ModelConfig& c, std::size_t b) {
    return {values.data() + layout.blocks[b].kernel, c.blocks[b].filters * c.in_channels(b) * c.blocks[b].kernel_size};
  }
  std::span<const T> kernel(const ModelConfig& c, std::size_t b) const {
    return {values.data() + layout.blocks[b].kernel, c.blocks[b].filters * c.in_channels(b) * c.blocks[b].kernel_size};
  }
  std::span<T> bias(const ModelConfig& c, std::size_t b) { return {values.data() + layout.blocks[b].bias, c.blocks[b].filters}; }
  std::span<const T> bias(const ModelConfig& c, std::size_t b) const {
    return {values.data() + layout.blocks[b].bias, c.blocks[b].filters};
  }
  // Row-major n_classes x feature_channels.
  std::span<T> head_weight(const ModelConfig& c) { return {values.data() + layout.head_weight, c.n_classes * c.feature_channels()}; }
  std::span<const T> head_weight(const ModelConfig& c) const {
    return {values.data() + layout.head_weight, c.n_classes * c.feature_channels()};
  }
  std::span<T> head_bias(const ModelConfig& c) { return {values.data() + layout.head_bias, c.n_classes}; }
  std::span<const T> head_bias(const ModelConfig& c) const { return {values.data() + layout.head_bias, c.n_classes}; }

  void check_finite() const {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(static_cast<double>(values[i]))) {
        throw ValidationError("parameter " + std::to_string(i) + " is not finite");
      }
    }
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.layout = layout;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

// Fan-in scaled uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero biases.
template <typename T>
ModelParams<T> init_params(const ModelConfig& c) {
  c.validate();
  ModelParams<T> p(c);
  Rng rng(c.seed);
  auto fill = [&](std::span<T> w, std::size_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& x : w) x = static_cast<T>(rng.uniform(-limit, limit));
  };
  for (std::size_t b = 0; b < c.blocks.size(); ++b) fill(p.kernel(c, b), c.in_channels(b) * c.blocks[b].kernel_size);
  fill(p.head_weight(c), c.feature_channels());
  return p;
}

template <typename T>
struct BlockTrace {
  std::size_t channels = 0;
  std::size_t width = 0;
  std::vector<T> pre;  // conv output + bias, channels x width
  std::vector<T> out;  // after activation and skip
};

template <typename T>
struct ForwardTrace {
  std::size_t params_total = 0;
  std::vector<T> input;
  std::vector<BlockTrace<T>> blocks;
  std::vector<double> pooled;  // per final filter
  std::vector<double> logits;
  std::vector<double> probs;

  // Final feature maps, filters x positions.
  std::span<const T> last_feature_maps() const { return blocks.back().out; }
  std::size_t feature_width() const { return blocks.back().width; }
  std::size_t feature_channels() const { return blocks.back().channels; }
};

namespace detail {

// Zero-padded, stride-deinterleaved copy of a (channels x width) map:
// phase r of channel c holds xpad[q*stride + r], where xpad is x shifted right
// by `pad`. Tap t at output j then reads phase t%stride at index j + t/stride.
template <typename T>
struct PhaseBuffer {
  std::size_t channels = 0, stride = 1, length = 0;
  std::vector<T> data;

  T* phase(std::size_t c, std::size_t r) { return data.data() + (c * stride + r) * length; }
  const T* phase(std::size_t c, std::size_t r) const { return data.data() + (c * stride + r) * length; }
};

template <typename T>
void make_phases(std::span<const T> x, std::size_t channels, std::size_t width, std::size_t kernel,
                 std::size_t stride, std::size_t out_width, PhaseBuffer<T>& ph) {
  const std::size_t pad = kernel / 2;
  ph.channels = channels;
  ph.stride = stride;
  ph.length = out_width + (kernel - 1) / stride + 1;
  ph.data.assign(channels * stride * ph.length, T(0));
  for (std::size_t c = 0; c < channels; ++c) {
    const T* row = x.data() + c * width;
    for (std::size_t i = 0; i < width; ++i) {
      const std::size_t m = i + pad;
      const std::size_t q = m / stride;
      if (q < ph.length) ph.phase(c, m % stride)[q] = row[i];
    }
  }
}

// z[j] += sum_u w[u] * x[j + u] for j < n.
template <std::size_t M, typename T>
inline void correlate_fixed(T* __restrict z, const T* __restrict x, const T* __restrict w, std::size_t n) {
  T wr[M];
  for (std::size_t u = 0; u < M; ++u) wr[u] = w[u];
  for (std::size_t j = 0; j < n; ++j) {
    T acc = z[j];
    for (std::size_t u = 0; u < M; ++u) acc += wr[u] * x[j + u];
    z[j] = acc;
  }
}

template <typename T>
inline void correlate_generic(T* __restrict z, const T* __restrict x, const T* __restrict w, std::size_t m,
                              std::size_t n) {
  for (std::size_t u = 0; u < m; ++u) {
    const T a = w[u];
    for (std::size_t j = 0; j < n; ++j) z[j] += a * x[j + u];
  }
}

template <typename T>
struct SimdOf {
  typedef T type __attribute__((vector_size(32)));
  static constexpr std::size_t lanes = 32 / sizeof(T);
};

// g[u] += sum_j d[j] * x[j + u] for u < M, accumulated in M vector registers.
template <std::size_t M, typename T>
inline void correlate_grad_fixed(T* __restrict g, const T* __restrict d, const T* __restrict x, std::size_t n) {
  using vec = typename SimdOf<T>::type;
  constexpr std::size_t lanes = SimdOf<T>::lanes;
  vec acc[M];
  for (auto& a : acc) a = vec{};
  std::size_t j = 0;
  for (; j + lanes <= n; j += lanes) {
    vec dv;
    std::memcpy(&dv, d + j, sizeof dv);
    for (std::size_t u = 0; u < M; ++u) {
      vec xv;
      std::memcpy(&xv, x + j + u, sizeof xv);
      acc[u] += dv * xv;
    }
  }
  for (std::size_t u = 0; u < M; ++u) {
    T s = 0;
    for (std::size_t l = 0; l < lanes; ++l) s += acc[u][l];
    for (std::size_t jj = j; jj < n; ++jj) s += d[jj] * x[jj + u];
    g[u] += s;
  }
}

template <typename T>
inline void correlate_grad_generic(T* __restrict g, const T* __restrict d, const T* __restrict x, std::size_t m,
                                   std::size_t n) {
  for (std::size_t u = 0; u < m; ++u) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += d[j] * x[j + u];
    g[u] += s;
  }
}

template <typename T>
void correlate(T* z, const T* x, const T* w, std::size_t m, std::size_t n) {
  switch (m) {
    case 0: return;
    case 1: return correlate_fixed<1>(z, x, w, n);
    case 2: return correlate_fixed<2>(z, x, w, n);
    case 3: return correlate_fixed<3>(z, x, w, n);
    case 4: return correlate_fixed<4>(z, x, w, n);
    case 5: return correlate_fixed<5>(z, x, w, n);
    case 6: return correlate_fixed<6>(z, x, w, n);
    case 7: return correlate_fixed<7>(z, x, w, n);
    case 8: return correlate_fixed<8>(z, x, w, n);
    case 9: return correlate_fixed<9>(z, x, w, n);
    case 11: return correlate_fixed<11>(z, x, w, n);
    default: return correlate_generic(z, x, w, m, n);
  }
}

template <typename T>
void correlate_grad(T* g, const T* d, const T* x, std::size_t m, std::size_t n) {
  switch (m) {
    case 0: return;
    case 1: return correlate_grad_fixed<1>(g, d, x, n);
    case 2: return correlate_grad_fixed<2>(g, d, x, n);
    case 3: return correlate_grad_fixed<3>(g, d, x, n);
    case 4: return correlate_grad_fixed<4>(g, d, x, n);
    case 5: return correlate_grad_fixed<5>(g, d, x, n);
    case 6: return correlate_grad_fixed<6>(g, d, x, n);
    case 7: return correlate_grad_fixed<7>(g, d, x, n);
    case 8: return correlate_grad_fixed<8>(g, d, x, n);
    case 9: return correlate_grad_fixed<9>(g, d, x, n);
    case 11: return correlate_grad_fixed<11>(g, d, x, n);
    default: return correlate_grad_generic(g, d, x, m, n);
  }
}

// Taps of phase r of a stride-s kernel of length k: w[r], w[r+s], ...
inline std::size_t phase_taps(std::size_t k, std::size_t s, std::size_t r) { return r < k ? (k - r + s - 1) / s : 0; }

template <typename T>
inline T sum(const T* a, std::size_t n) {
  constexpr std::size_t lanes = 16;
  T acc[lanes] = {};
  std::size_t i = 0;
  for (; i + lanes <= n; i += lanes) {
    for (std::size_t l = 0; l < lanes; ++l) acc[l] += a[i + l];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i];
  for (std::size_t w = lanes / 2; w > 0; w /= 2) {
    for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
  }
  return acc[0] + tail;
}

inline void softmax(std::span<const double> logits, std::span<double> probs) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) z += (probs[c] = std::exp(logits[c] - top));
  for (auto& p : probs) p /= z;
}

}  // namespace detail

template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& params, const ModelConfig& config, std::span<const T> input) {
  if (input.size() != config.input_width) {
    throw ShapeError("input has " + std::to_string(input.size()) + " channels, model expects " +
                     std::to_string(config.input_width));
  }
  if (params.layout.total != params.values.size() || !(params.layout == ParamLayout(config))) {
    throw ShapeError("parameters do not match the model config");
  }
  for (const auto v : input) {
    if (!std::isfinite(static_cast<double>(v))) throw ValidationError("input contains a non-finite value");
  }
  ForwardTrace<T> tr;
  tr.params_total = params.layout.total;
  tr.input.assign(input.begin(), input.end());
  tr.blocks.resize(config.blocks.size());
  detail::PhaseBuffer<T> ph;

  std::span<const T> x = tr.input;
  for (std::size_t b = 0; b < config.blocks.size(); ++b) {
    const auto& spec = config.blocks[b];
    const std::size_t cin = config.in_channels(b), win = config.in_width(b), wout = config.out_width(b);
    const std::size_t k = spec.kernel_size, s = spec.stride;
    auto& bt = tr.blocks[b];
    bt.channels = spec.filters;
    bt.width = wout;
    bt.pre.assign(spec.filters * wout, T(0));
    bt.out.resize(spec.filters * wout);
    detail::make_phases(x, cin, win, k, s, wout, ph);
    const auto w = params.kernel(config, b);
    const auto bias = params.bias(config, b);
    std::vector<T> sub(k);
    for (std::size_t o = 0; o < spec.filters; ++o) {
      T* z = bt.pre.data() + o * wout;
      std::fill(z, z + wout, bias[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const T* wk = w.data() + (o * cin + c) * k;
        for (std::size_t r = 0; r < s; ++r) {
          const std::size_t m = detail::phase_taps(k, s, r);
          for (std::size_t u = 0; u < m; ++u) sub[u] = wk[u * s + r];
          detail::correlate(z, ph.phase(c, r), sub.data(), m, wout);
        }
      }
    }
    for (std::size_t i = 0; i < bt.pre.size(); ++i) {
      const T r = bt.pre[i] > T(0) ? bt.pre[i] : T(0);
      bt.out[i] = spec.residual ? x[i] + r : r;
    }
    x = bt.out;
  }

  const auto& last = tr.blocks.back();
  tr.pooled.resize(last.channels);
  for (std::size_t f = 0; f < last.channels; ++f) {
    tr.pooled[f] = static_cast<double>(detail::sum(last.out.data() + f * last.width, last.width)) /
                   static_cast<double>(last.width);
  }
  const auto hw = params.head_weight(config);
  const auto hb = params.head_bias(config);
  tr.logits.resize(config.n_classes);
  for (std::size_t c = 0; c < config.n_classes; ++c) {
    double z = static_cast<double>(hb[c]);
    for (std::size_t f = 0; f < last.channels; ++f) z += static_cast<double>(hw[c * last.channels + f]) * tr.pooled[f];
    tr.logits[c] = z;
  }
  tr.probs.resize(config.n_classes);
  detail::softmax(tr.logits, tr.probs);
  return tr;
}

template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& params, const ModelConfig& config, const std::vector<T>& input) {
  return forward(params, config, std::span<const T>(input));
}

inline constexpr double kMinProbability = 1e-12;

inline double cross_entropy(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw IndexError("label " + std::to_string(label) + " outside 0.." + std::to_string(probs.size() - 1));
  }
  return -std::log(std::max(probs[label], kMinProbability));
}

// Adds scale * d(cross_entropy)/d(params) for one traced sample into `grad`.
template <typename T>
void accumulate_gradient(const ForwardTrace<T>& tr, const ModelParams<T>& params, const ModelConfig& config,
                         std::size_t label, ModelParams<T>& grad, double scale = 1.0) {
  if (label >= config.n_classes) throw IndexError("label out of range");
  if (tr.params_total != params.layout.total || tr.blocks.size() != config.blocks.size() ||
      tr.input.size() != config.input_width || !(params.layout == ParamLayout(config))) {
    throw ValidationError("trace was not produced by these parameters");
  }
  if (grad.values.size() != params.values.size()) grad = ModelParams<T>(config);

  const std::size_t nb = config.blocks.size();
  const std::size_t filters = tr.feature_channels(), fw = tr.feature_width();
  std::vector<double> dlogits(config.n_classes);
  for (std::size_t c = 0; c < config.n_classes; ++c) dlogits[c] = (tr.probs[c] - (c == label ? 1.0 : 0.0)) * scale;

  const auto hw = params.head_weight(config);
  auto ghw = grad.head_weight(config);
  auto ghb = grad.head_bias(config);
  std::vector<double> dpooled(filters, 0.0);
  for (std::size_t c = 0; c < config.n_classes; ++c) {
    ghb[c] += static_cast<T>(dlogits[c]);
    for (std::size_t f = 0; f < filters; ++f) {
      ghw[c * filters + f] += static_cast<T>(dlogits[c] * tr.pooled[f]);
      dpooled[f] += static_cast<double>(hw[c * filters + f]) * dlogits[c];
    }
  }

  // Gradient w.r.t. the current block's output.
  std::vector<T> dout(filters * fw);
  for (std::size_t f = 0; f < filters; ++f) {
    std::fill(dout.begin() + static_cast<std::ptrdiff_t>(f * fw), dout.begin() + static_cast<std::ptrdiff_t>((f + 1) * fw),
              static_cast<T>(dpooled[f] / static_cast<double>(fw)));
  }

  detail::PhaseBuffer<T> ph, dph;
  std::vector<T> dz, dx;
  for (std::size_t bi = nb; bi-- > 0;) {
    const auto& spec = config.blocks[bi];
    const auto& bt = tr.blocks[bi];
    const std::size_t cin = config.in_channels(bi), win = config.in_width(bi), wout = bt.width;
    const std::size_t k = spec.kernel_size, s = spec.stride;
    const std::span<const T> x = bi == 0 ? std::span<const T>(tr.input) : std::span<const T>(tr.blocks[bi - 1].out);

    dz.resize(dout.size());
    for (std::size_t i = 0; i < dout.size(); ++i) dz[i] = bt.pre[i] > T(0) ? dout[i] : T(0);

    detail::make_phases(x, cin, win, k, s, wout, ph);
    const auto w = params.kernel(config, bi);
    auto gw = grad.kernel(config, bi);
    auto gb = grad.bias(config, bi);
    const bool need_dx = bi > 0;
    if (need_dx) {
      dph.channels = cin;
      dph.stride = s;
      dph.length = ph.length;
      dph.data.assign(ph.data.size(), T(0));
    }
    // The input gradient is a full correlation of dz with the flipped
    // sub-kernels, so dz is read from a copy with `edge` zeros on each side.
    const std::size_t edge = (k - 1) / s;
    std::vector<T> dzpad(wout + 2 * edge, T(0)), sub(k), flipped(k), gsub(k);
    for (std::size_t o = 0; o < spec.filters; ++o) {
      const T* dzo = dz.data() + o * wout;
      gb[o] += detail::sum(dzo, wout);
      if (need_dx) std::copy(dzo, dzo + wout, dzpad.begin() + static_cast<std::ptrdiff_t>(edge));
      for (std::size_t c = 0; c < cin; ++c) {
        const std::size_t base = (o * cin + c) * k;
        for (std::size_t r = 0; r < s; ++r) {
          const std::size_t m = detail::phase_taps(k, s, r);
          if (m == 0) continue;
          std::fill(gsub.begin(), gsub.begin() + static_cast<std::ptrdiff_t>(m), T(0));
          detail::correlate_grad(gsub.data(), dzo, ph.phase(c, r), m, wout);
          for (std::size_t u = 0; u < m; ++u) gw[base + u * s + r] += gsub[u];
          if (need_dx) {
            for (std::size_t u = 0; u < m; ++u) flipped[u] = w[base + (m - 1 - u) * s + r];
            detail::correlate(dph.phase(c, r), dzpad.data() + (edge - (m - 1)), flipped.data(), m, wout + m - 1);
          }
        }
      }
    }
    if (!need_dx) break;

    const std::size_t pad = k / 2;
    dx.assign(cin * win, T(0));
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t i = 0; i < win; ++i) {
        const std::size_t m = i + pad;
        if (m / s < dph.length) dx[c * win + i] = dph.phase(c, m % s)[m / s];
      }
    }
    if (spec.residual) {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
    }
    dout.swap(dx);
  }
}

template <typename T>
ModelParams<T> backward(const ForwardTrace<T>& tr, const ModelParams<T>& params, const ModelConfig& config,
                        std::size_t label) {
  ModelParams<T> grad(config);
  accumulate_gradient(tr, params, config, label, grad);
  return grad;
}

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probs;
};

// Index of the largest probability; ties go to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return best;
}

template <typename T>
Prediction predict(const ModelParams<T>& params, const ModelConfig& config, std::span<const T> input) {
  auto tr = forward(params, config, input);
  return {argmax_lowest(tr.probs), std::move(tr.probs)};
}

// Counts -> model input: (count - mean_c) / sqrt(mean_c) at a fixed budget
// k, where mean_c = k * avg_s p_sc over the library species. The spread is
// the Poisson noise of the library-average spectrum, floored at one count.
struct InputScaler {
  std::vector<double> mean;
  std::vector<double> inv_scale;

  std::size_t width() const { return mean.size(); }

  template <typename T>
  void apply(std::span<const std::int64_t> counts, std::span<T> out) const {
    if (counts.size() != width() || out.size() != width()) throw ShapeError("input scaler width mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) {
      out[i] = static_cast<T>((static_cast<double>(counts[i]) - mean[i]) * inv_scale[i]);
    }
  }

  template <typename T>
  std::vector<T> apply(std::span<const std::int64_t> counts) const {
    std::vector<T> out(counts.size());
    apply<T>(counts, std::span<T>(out));
    return out;
  }

  static InputScaler from_library(const SpeciesLibrary& library, SampleBudget budget,
                                  const DiscardRanges& discard = {}) {
    if (library.size() == 0) throw ValidationError("input scaler needs a non-empty library");
    discard.check_within(library.n_channels());
    const std::size_t width = discard.kept_width(library.n_channels());
    const double k = static_cast<double>(budget.k);
    const double n = static_cast<double>(library.size());
    InputScaler sc;
    sc.mean.assign(width, 0.0);
    for (const auto& s : library) {
      const auto kept = apply_mask(s.counts(), discard);
      const double total = static_cast<double>(s.total_counts());
      if (total <= 0.0) continue;
      for (std::size_t c = 0; c < width; ++c) sc.mean[c] += k * static_cast<double>(kept[c]) / total / n;
    }
    sc.inv_scale.resize(width);
    for (std::size_t c = 0; c < width; ++c) sc.inv_scale[c] = 1.0 / std::max(std::sqrt(sc.mean[c]), 1.0);
    return sc;
  }

  void validate(std::size_t expected_width) const {
    if (mean.size() != expected_width || inv_scale.size() != expected_width) {
      throw ShapeError("input scaler width " + std::to_string(mean.size()) + " != model input width " +
                       std::to_string(expected_width));
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
      if (!std::isfinite(mean[i]) || !std::isfinite(inv_scale[i]) || inv_scale[i] <= 0.0) {
        throw ValidationError("input scaler entry " + std::to_string(i) + " is invalid");
      }
    }
  }

  friend bool operator==(const InputScaler&, const InputScaler&) = default;
};

// Mean cross-entropy over a batch; `grad` receives the mean gradient.
template <typename T>
double batch_gradient(const ModelParams<T>& params, const ModelConfig& config, const InputScaler& scaler,
                      const Batch& batch, ModelParams<T>& grad) {
  if (batch.width != config.input_width) throw ShapeError("batch width does not match the model input");
  grad = ModelParams<T>(config);
  std::vector<T> x(batch.width);
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.rows);
  for (std::size_t i = 0; i < batch.rows; ++i) {
    scaler.apply<T>(batch.row(i), std::span<T>(x));
    const auto tr = forward(params, config, std::span<const T>(x));
    loss += cross_entropy(tr.probs, batch.labels[i]);
    accumulate_gradient(tr, params, config, batch.labels[i], grad, scale);
  }
  return loss * scale;
}

template <typename T>
std::vector<std::size_t> predict_batch(const ModelParams<T>& params, const ModelConfig& config,
                                       const InputScaler& scaler, const Batch& batch) {
  if (batch.width != config.input_width) throw ShapeError("batch width does not match the model input");
  std::vector<std::size_t> out(batch.rows);
  std::vector<T> x(batch.width);
  for (std::size_t i = 0; i < batch.rows; ++i) {
    scaler.apply<T>(batch.row(i), std::span<T>(x));
    out[i] = argmax_lowest(forward(params, config, std::span<const T>(x)).probs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct OptimizerState {
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::uint64_t step = 0;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  OptimizerState() = default;
  OptimizerState(std::size_t n, double learning_rate)
      : first_moment(n, T(0)), second_moment(n, T(0)), lr(learning_rate) {}

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// Bias-corrected Adam update in place.
template <typename T>
void adam_update(OptimizerState<T>& state, ModelParams<T>& params, const ModelParams<T>& grad) {
  const std::size_t n = params.values.size();
  if (grad.values.size() != n || state.first_moment.size() != n || state.second_moment.size() != n) {
    throw ShapeError("optimizer, parameter and gradient sizes differ");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(grad.values[i]))) {
      throw DivergenceError(0, "gradient component " + std::to_string(i) + " is not finite");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grad.values[i];
    T& m = state.first_moment[i];
    T& v = state.second_moment[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g * g;
    const double mhat = static_cast<double>(m) / c1;
    const double vhat = static_cast<double>(v) / c2;
    params.values[i] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
  }
}

template <typename T>
std::pair<OptimizerState<T>, ModelParams<T>> adam_step(const OptimizerState<T>& state, const ModelParams<T>& params,
                                                       const ModelParams<T>& grad) {
  auto s = state;
  auto p = params;
  adam_update(s, p, grad);
  return {std::move(s), std::move(p)};
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 150;
  std::size_t batch_size = 128;
  std::size_t steps_per_epoch = 149;  // ~19000 fresh samples per epoch
  double learning_rate = 0.01;
  std::optional<double> target_accuracy = 0.95;  // early stop on validation accuracy
  std::size_t validation_per_class = 50;
};

template <typename T>
struct TrainResult {
  InputScaler scaler;
  ModelParams<T> params;
  OptimizerState<T> optimizer;
  std::vector<double> loss_curve;           // mean training loss per epoch
  std::vector<double> validation_accuracy;  // per epoch
  std::vector<double> epoch_seconds;
  double sampling_seconds = 0.0;
  std::optional<std::size_t> epochs_to_target;
};

inline double accuracy_of(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

// Adam on fresh RSM-3 batches every step. The validation set is drawn once
// from the first stream of `rng`, training batches from the second.
template <typename T>
TrainResult<T> train(const ModelConfig& config, const SpeciesLibrary& library, SampleBudget budget,
                     const TrainOptions& options, const DiscardRanges& discard, Rng& rng) {
  using clock = std::chrono::steady_clock;
  config.validate();
  if (library.size() != config.n_classes) {
    throw ValidationError("library has " + std::to_string(library.size()) + " species, model expects " +
                          std::to_string(config.n_classes));
  }
  const BatchGenerator gen(library, discard);
  if (gen.width() != config.input_width) {
    throw ShapeError("discarded input width " + std::to_string(gen.width()) + " != model input width " +
                     std::to_string(config.input_width));
  }
  if (options.batch_size == 0) throw ValidationError("batch size must be >= 1");

  TrainResult<T> res;
  res.scaler = InputScaler::from_library(library, budget, discard);
  res.params = init_params<T>(config);
  res.optimizer = OptimizerState<T>(res.params.size(), options.learning_rate);
  if (options.epochs == 0) return res;

  Rng val_rng(rng.next_seed());
  Rng batch_rng(rng.next_seed());
  const Batch validation = gen.generate_balanced(budget, options.validation_per_class, val_rng);

  ModelParams<T> grad(config);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto t0 = clock::now();
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < options.steps_per_epoch; ++step) {
      const auto s0 = clock::now();
      const Batch batch = gen.generate(budget, options.batch_size, batch_rng);
      res.sampling_seconds += std::chrono::duration<double>(clock::now() - s0).count();
      const double loss = batch_gradient(res.params, config, res.scaler, batch, grad);
      if (!std::isfinite(loss)) throw DivergenceError(epoch, "loss is not finite");
      try {
        adam_update(res.optimizer, res.params, grad);
      } catch (const DivergenceError& e) {
        throw DivergenceError(epoch, e.what());
      }
      loss_sum += loss;
    }
    res.epoch_seconds.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    res.loss_curve.push_back(options.steps_per_epoch ? loss_sum / static_cast<double>(options.steps_per_epoch) : 0.0);
    const auto predicted = predict_batch(res.params, config, res.scaler, validation);
    res.validation_accuracy.push_back(accuracy_of(predicted, validation.labels));
    if (options.target_accuracy && res.validation_accuracy.back() >= *options.target_accuracy) {
      res.epochs_to_target = epoch + 1;
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "PGNAACKP" | u32 version | u32 scalar bytes
//   u64 n + config JSON | u64 n + metadata JSON
//   u64 n + n f64 (scaler mean) | u64 n + n f64 (scaler inverse spread)
//   u64 n + n scalars (parameters)
//   u8 has_optimizer [u64 step, f64 lr, beta1, beta2, epsilon, n scalars m, n scalars v]
//
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[8] = {'P', 'G', 'N', 'A', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  ModelConfig config;
  InputScaler scaler;
  ModelParams<T> params;
  std::optional<OptimizerState<T>> optimizer;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

template <typename V>
void put(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("checkpoint is truncated");
  return v;
}

template <typename T>
void put_array(std::ostream& out, const std::vector<T>& v) {
  put<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
std::vector<T> get_array(std::istream& in, std::size_t expected) {
  const auto n = get<std::uint64_t>(in);
  if (n != expected) throw IoError("checkpoint array has " + std::to_string(n) + " entries, expected " + std::to_string(expected));
  std::vector<T> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw IoError("checkpoint is truncated");
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (std::uint64_t{1} << 30)) throw IoError("checkpoint string section is implausibly large");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IoError("checkpoint is truncated");
  return s;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(T));
  detail::put_string(out, to_json(ck.config).dump());
  detail::put_string(out, ck.metadata.dump());
  detail::put_array(out, ck.scaler.mean);
  detail::put_array(out, ck.scaler.inv_scale);
  detail::put_array(out, ck.params.values);
  detail::put<std::uint8_t>(out, ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    detail::put<std::uint64_t>(out, ck.optimizer->step);
    detail::put<double>(out, ck.optimizer->lr);
    detail::put<double>(out, ck.optimizer->beta1);
    detail::put<double>(out, ck.optimizer->beta2);
    detail::put<double>(out, ck.optimizer->epsilon);
    detail::put_array(out, ck.optimizer->first_moment);
    detail::put_array(out, ck.optimizer->second_moment);
  }
  if (!out) throw IoError("write failed for " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError(path + " is not a checkpoint");
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version");
  if (detail::get<std::uint32_t>(in) != sizeof(T)) throw IoError(path + ": checkpoint scalar type differs");
  Checkpoint<T> ck;
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(detail::get_string(in)));
    ck.metadata = nlohmann::json::parse(detail::get_string(in));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": corrupt checkpoint header: " + e.what());
  }
  ck.scaler.mean = detail::get_array<double>(in, ck.config.input_width);
  ck.scaler.inv_scale = detail::get_array<double>(in, ck.config.input_width);
  try {
    ck.scaler.validate(ck.config.input_width);
  } catch (const Error& e) {
    throw IoError(path + ": corrupt input scaler: " + e.what());
  }
  ck.params = ModelParams<T>(ck.config);
  ck.params.values = detail::get_array<T>(in, ck.params.layout.total);
  if (detail::get<std::uint8_t>(in) != 0) {
    OptimizerState<T> st;
    st.step = detail::get<std::uint64_t>(in);
    st.lr = detail::get<double>(in);
    st.beta1 = detail::get<double>(in);
    st.beta2 = detail::get<double>(in);
    st.epsilon = detail::get<double>(in);
    st.first_moment = detail::get_array<T>(in, ck.params.layout.total);
    st.second_moment = detail::get_array<T>(in, ck.params.layout.total);
    ck.optimizer = std::move(st);
  }
  return ck;
}

}  // namespace pgnaa
