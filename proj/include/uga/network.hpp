#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "uga/error.hpp"
#include "uga/image.hpp"
#include "uga/rng.hpp"

namespace uga {

/// One same-padded, stride-1 convolution.
struct LayerShape {
    int in = 0;
    int out = 0;
    int kernel = 0;

    constexpr std::size_t weight_count() const { return static_cast<std::size_t>(in) * out * kernel * kernel; }
    constexpr std::size_t parameter_count() const { return weight_count() + static_cast<std::size_t>(out); }
};

/// conv3x3(3->8) ReLU, conv3x3(8->16) ReLU, conv3x3(16->16) ReLU, conv1x1(16->2).
inline constexpr std::array<LayerShape, 4> kArchitecture{{{3, 8, 3}, {8, 16, 3}, {16, 16, 3}, {16, 2, 1}}};
inline constexpr std::size_t kNumLayers = kArchitecture.size();
inline constexpr int kNumClasses = 2;

inline constexpr std::size_t layer_offset(std::size_t layer) {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += kArchitecture[l].parameter_count();
    return off;
}

/// Parameters are stored flat, layer by layer, each layer as weights
/// [out][in][ky][kx] followed by biases [out].
inline constexpr std::size_t kParameterCount = layer_offset(kNumLayers);
static_assert(kParameterCount == 3746);

template <class T>
struct BasicParams {
    std::vector<T> values = std::vector<T>(kParameterCount, T(0));

    std::span<T> weights(std::size_t layer) {
        return {values.data() + layer_offset(layer), kArchitecture[layer].weight_count()};
    }
    std::span<const T> weights(std::size_t layer) const {
        return {values.data() + layer_offset(layer), kArchitecture[layer].weight_count()};
    }
    std::span<T> biases(std::size_t layer) {
        return {values.data() + layer_offset(layer) + kArchitecture[layer].weight_count(),
                static_cast<std::size_t>(kArchitecture[layer].out)};
    }
    std::span<const T> biases(std::size_t layer) const {
        return {values.data() + layer_offset(layer) + kArchitecture[layer].weight_count(),
                static_cast<std::size_t>(kArchitecture[layer].out)};
    }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
    }

    template <class U>
    BasicParams<U> cast() const {
        BasicParams<U> out;
        std::transform(values.begin(), values.end(), out.values.begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const BasicParams&, const BasicParams&) = default;
};

using ModelParams = BasicParams<float>;

/// He-normal weights, zero biases.
inline ModelParams init_params(std::uint64_t seed) {
    ModelParams p;
    Rng rng(seed);
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        const auto& s = kArchitecture[l];
        const double stddev = std::sqrt(2.0 / (s.in * s.kernel * s.kernel));
        for (auto& w : p.weights(l)) w = static_cast<float>(rng.normal() * stddev);
    }
    return p;
}

/// Per-patch, per-channel z-score: (x - mean) / (std + 1e-6).
inline Image zscore_normalize(const Image& patch) {
    constexpr double eps = 1e-6;
    Image out(patch.height, patch.width, patch.channels);
    const std::size_t n = patch.plane_size();
    for (int c = 0; c < patch.channels; ++c) {
        const auto src = patch.plane(c);
        double mean = 0.0;
        for (float v : src) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (float v : src) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(n));
        auto dst = out.plane(c);
        for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>((src[i] - mean) / (sd + eps));
    }
    return out;
}

namespace detail {

/// Activations live in zero-padded planes of (h + 2) x (w + 2) so every
/// kernel tap is a single contiguous loop over the interior span. Pad cells
/// of layer inputs must stay zero; pad cells of outputs hold garbage until
/// cleared.
struct PaddedGeometry {
    int h = 0, w = 0;
    int stride = 0;          ///< padded row length
    std::size_t plane = 0;   ///< padded plane size
    std::size_t first = 0;   ///< linear index of interior pixel (0, 0)
    std::size_t span = 0;    ///< from first interior pixel to one past the last

    PaddedGeometry() = default;
    PaddedGeometry(int h_, int w_)
        : h(h_), w(w_), stride(w_ + 2), plane(static_cast<std::size_t>(h_ + 2) * (w_ + 2)),
          first(static_cast<std::size_t>(w_ + 2) + 1),
          span(static_cast<std::size_t>(h_ - 1) * (w_ + 2) + static_cast<std::size_t>(w_)) {}

    std::size_t index(int y, int x) const { return first + static_cast<std::size_t>(y) * stride + x; }
    std::ptrdiff_t offset(int dy, int dx) const { return static_cast<std::ptrdiff_t>(dy) * stride + dx; }
};

template <class T>
void clear_pad_columns(T* buf, int channels, const PaddedGeometry& g) {
    for (int c = 0; c < channels; ++c) {
        T* p = buf + c * g.plane;
        for (int y = 0; y < g.h; ++y) {
            p[g.index(y, -1)] = T(0);
            p[g.index(y, g.w)] = T(0);
        }
    }
}

template <class T>
void conv_forward(const T* in, const LayerShape& s, const PaddedGeometry& g, std::span<const T> weight,
                  std::span<const T> bias, T* out) {
    const int pad = s.kernel / 2;
    for (int o = 0; o < s.out; ++o) {
        T* dst = out + o * g.plane + g.first;
        std::fill(dst, dst + g.span, bias[static_cast<std::size_t>(o)]);
        for (int i = 0; i < s.in; ++i) {
            const T* wk = weight.data() + static_cast<std::size_t>((o * s.in + i) * s.kernel * s.kernel);
            for (int ky = 0; ky < s.kernel; ++ky)
                for (int kx = 0; kx < s.kernel; ++kx) {
                    const T wv = wk[ky * s.kernel + kx];
                    const T* src = in + i * g.plane + g.first + g.offset(ky - pad, kx - pad);
                    const std::size_t n = g.span;
#pragma omp simd
                    for (std::size_t q = 0; q < n; ++q) dst[q] += wv * src[q];
                }
        }
    }
}

/// Accumulates dW and db; overwrites din when non-null. dout pad cells must be
/// zero; din pad cells are left with garbage.
template <class T>
void conv_backward(const T* in, const T* dout, const LayerShape& s, const PaddedGeometry& g,
                   std::span<const T> weight, std::span<T> dweight, std::span<T> dbias, T* din) {
    const int pad = s.kernel / 2;
    const int kk = s.kernel * s.kernel;
    const std::size_t n = g.span;
    if (din) std::fill(din, din + g.plane * s.in, T(0));
    for (int o = 0; o < s.out; ++o) {
        const T* go = dout + o * g.plane + g.first;
        T bsum = 0;
#pragma omp simd reduction(+ : bsum)
        for (std::size_t q = 0; q < n; ++q) bsum += go[q];
        dbias[static_cast<std::size_t>(o)] += bsum;
        for (int i = 0; i < s.in; ++i) {
            const std::size_t wbase = static_cast<std::size_t>((o * s.in + i) * kk);
            for (int ky = 0; ky < s.kernel; ++ky)
                for (int kx = 0; kx < s.kernel; ++kx) {
                    const std::ptrdiff_t off = g.offset(ky - pad, kx - pad);
                    const std::size_t k = static_cast<std::size_t>(ky * s.kernel + kx);
                    const T* src = in + i * g.plane + g.first + off;
                    T acc = 0;
#pragma omp simd reduction(+ : acc)
                    for (std::size_t q = 0; q < n; ++q) acc += go[q] * src[q];
                    dweight[wbase + k] += acc;
                    if (din) {
                        const T wv = weight[wbase + k];
                        T* dst = din + i * g.plane + g.first + off;
#pragma omp simd
                        for (std::size_t q = 0; q < n; ++q) dst[q] += wv * go[q];
                    }
                }
        }
    }
}

template <class T>
T softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

} // namespace detail

/// Scratch buffers for one forward/backward pass; reuse across calls to avoid
/// reallocation.
template <class T>
struct Workspace {
    detail::PaddedGeometry geometry;
    std::array<std::vector<T>, kNumLayers + 1> act; ///< act[0] = input, act[l+1] = layer l output
    std::array<std::vector<T>, kNumLayers + 1> grad;

    void resize(int h, int w) {
        if (geometry.h == h && geometry.w == w && !act[0].empty()) return;
        geometry = detail::PaddedGeometry(h, w);
        act[0].assign(geometry.plane * kArchitecture[0].in, T(0));
        grad[0].clear();
        for (std::size_t l = 0; l < kNumLayers; ++l) {
            act[l + 1].assign(geometry.plane * kArchitecture[l].out, T(0));
            grad[l + 1].assign(geometry.plane * kArchitecture[l].out, T(0));
        }
    }

    /// Interior value of output channel c at (y, x) of layer buffer `l`.
    T value(std::size_t l, int c, int y, int x) const { return act[l][c * geometry.plane + geometry.index(y, x)]; }
};

/// Forward pass; leaves post-ReLU activations and final logits in ws.act.
template <class T>
void forward(const BasicParams<T>& params, const Image& input, Workspace<T>& ws) {
    if (input.channels != kArchitecture[0].in) throw DataError("network expects a 3-channel input");
    const int h = input.height, w = input.width;
    ws.resize(h, w);
    const auto& g = ws.geometry;
    for (int c = 0; c < input.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) ws.act[0][c * g.plane + g.index(y, x)] = static_cast<T>(input.at(c, y, x));
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        T* out = ws.act[l + 1].data();
        detail::conv_forward<T>(ws.act[l].data(), kArchitecture[l], g, params.weights(l), params.biases(l), out);
        if (l + 1 < kNumLayers) {
            for (int c = 0; c < kArchitecture[l].out; ++c) {
                T* p = out + c * g.plane + g.first;
#pragma omp simd
                for (std::size_t q = 0; q < g.span; ++q) p[q] = std::max(p[q], T(0));
            }
            detail::clear_pad_columns(out, kArchitecture[l].out, g);
        }
    }
}

template <class T>
struct GradientResult {
    double loss = 0.0; ///< mean per-pixel cross-entropy
    BasicParams<T> grad;
};

/// One (normalized input, target mask) pair.
struct TrainingSample {
    Image input;
    Mask target;
};

/// Gradient of the mean per-pixel softmax cross-entropy over every pixel of
/// every sample in the batch.
template <class T>
GradientResult<T> gradient(const BasicParams<T>& params, std::span<const TrainingSample> batch, Workspace<T>& ws) {
    GradientResult<T> result;
    if (batch.empty()) return result;
    std::size_t total_pixels = 0;
    for (const auto& s : batch) total_pixels += s.input.plane_size();
    const T inv_n = T(1) / static_cast<T>(total_pixels);
    double loss = 0.0;

    for (const auto& sample : batch) {
        if (sample.target.height != sample.input.height || sample.target.width != sample.input.width)
            throw DataError("target mask dimensions differ from input");
        forward(params, sample.input, ws);
        const auto& g = ws.geometry;
        const T* z = ws.act[kNumLayers].data();
        T* dz = ws.grad[kNumLayers].data();
        std::fill(ws.grad[kNumLayers].begin(), ws.grad[kNumLayers].end(), T(0));
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                const std::size_t q = g.index(y, x);
                const T d = z[g.plane + q] - z[q]; // logit margin of class 1
                const bool fg = sample.target.at(y, x) != 0;
                loss += static_cast<double>(fg ? detail::softplus(-d) : detail::softplus(d));
                const T p1 = T(1) / (T(1) + std::exp(-d));
                const T g1 = (p1 - (fg ? T(1) : T(0))) * inv_n;
                dz[q] = -g1;
                dz[g.plane + q] = g1;
            }
        for (std::size_t l = kNumLayers; l-- > 0;) {
            T* din = l > 0 ? ws.grad[l].data() : nullptr;
            detail::conv_backward<T>(ws.act[l].data(), ws.grad[l + 1].data(), kArchitecture[l], g, params.weights(l),
                                     result.grad.weights(l), result.grad.biases(l), din);
            if (din) {
                // ReLU derivative; activation pad cells are zero so this also clears din's pads
                const T* a = ws.act[l].data();
                const std::size_t n = g.plane * kArchitecture[l].in;
                for (std::size_t i = 0; i < n; ++i)
                    if (a[i] <= T(0)) din[i] = T(0);
            }
        }
    }
    result.loss = loss / static_cast<double>(total_pixels);
    return result;
}

template <class T>
GradientResult<T> gradient(const BasicParams<T>& params, std::span<const TrainingSample> batch) {
    Workspace<T> ws;
    return gradient(params, batch, ws);
}

/// Mean per-pixel cross-entropy without gradients.
template <class T>
double batch_loss(const BasicParams<T>& params, std::span<const TrainingSample> batch, Workspace<T>& ws) {
    double loss = 0.0;
    std::size_t total = 0;
    for (const auto& sample : batch) {
        forward(params, sample.input, ws);
        for (int y = 0; y < sample.input.height; ++y)
            for (int x = 0; x < sample.input.width; ++x) {
                const T d = ws.value(kNumLayers, 1, y, x) - ws.value(kNumLayers, 0, y, x);
                loss += static_cast<double>(sample.target.at(y, x) ? detail::softplus(-d) : detail::softplus(d));
            }
        total += sample.input.plane_size();
    }
    return total ? loss / static_cast<double>(total) : 0.0;
}

template <class T>
double batch_loss(const BasicParams<T>& params, std::span<const TrainingSample> batch) {
    Workspace<T> ws;
    return batch_loss(params, batch, ws);
}

inline bool all_finite(const Image& img) {
    return std::all_of(img.data.begin(), img.data.end(), [](float v) { return std::isfinite(v); });
}

/// Per-pixel log-softmax over the two classes, returned as a 2-channel image
/// (channel 0 = benign, channel 1 = metastasis). When `normalized` is false
/// the patch is z-score normalized first.
inline Image predict_log_probs(const ModelParams& model, const Image& patch, bool normalized, Workspace<float>& ws) {
    if (!model.all_finite()) throw DataError("model has non-finite parameters");
    if (!all_finite(patch)) throw DataError("input patch has non-finite values");
    if (normalized) {
        forward(model, patch, ws);
    } else {
        forward(model, zscore_normalize(patch), ws);
    }
    const std::size_t plane = patch.plane_size();
    Image out(patch.height, patch.width, kNumClasses);
    for (int y = 0; y < patch.height; ++y)
        for (int x = 0; x < patch.width; ++x) {
            const double d = static_cast<double>(ws.value(kNumLayers, 1, y, x)) - ws.value(kNumLayers, 0, y, x);
            const std::size_t p = static_cast<std::size_t>(y) * patch.width + x;
            out.data[p] = static_cast<float>(-detail::softplus(d));
            out.data[plane + p] = static_cast<float>(-detail::softplus(-d));
        }
    return out;
}

inline Image predict_log_probs(const ModelParams& model, const Image& patch, bool normalized) {
    Workspace<float> ws;
    return predict_log_probs(model, patch, normalized, ws);
}

} // namespace uga
