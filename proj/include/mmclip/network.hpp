#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mmclip/rng.hpp"
#include "mmclip/tensor.hpp"

namespace mmclip {

enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1, maxpool2d = 2, flatten = 3, activation = 4 };
enum class ActKind : std::uint8_t { relu = 0, leaky_relu = 1 };

template <typename S>
struct Layer {
    LayerKind kind = LayerKind::dense;

    // dense
    std::size_t in_width = 0, out_width = 0;
    // conv2d (channels-last feature maps)
    std::size_t in_channels = 0, out_channels = 0;
    std::size_t kernel_h = 0, kernel_w = 0, stride = 1, padding = 0;
    // maxpool2d
    std::size_t pool_h = 0, pool_w = 0, pool_stride = 0;
    // activation
    ActKind act = ActKind::relu;
    S negative_slope = S(0);

    // dense: weights [out,in]; conv: weights [out_c, kh, kw, in_c]; bias [out]
    Tensor<S> weights, bias;

    static Layer dense(std::size_t in, std::size_t out) {
        if (in == 0 || out == 0) throw std::invalid_argument("dense: zero width");
        Layer l;
        l.kind = LayerKind::dense;
        l.in_width = in;
        l.out_width = out;
        l.weights = Tensor<S>::zeros({out, in});
        l.bias = Tensor<S>::zeros({out});
        return l;
    }

    static Layer conv2d(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw,
                        std::size_t stride = 1, std::size_t padding = 0) {
        if (in_c == 0 || out_c == 0 || kh == 0 || kw == 0 || stride == 0)
            throw std::invalid_argument("conv2d: bad geometry");
        Layer l;
        l.kind = LayerKind::conv2d;
        l.in_channels = in_c;
        l.out_channels = out_c;
        l.kernel_h = kh;
        l.kernel_w = kw;
        l.stride = stride;
        l.padding = padding;
        l.weights = Tensor<S>::zeros({out_c, kh, kw, in_c});
        l.bias = Tensor<S>::zeros({out_c});
        return l;
    }

    static Layer maxpool2d(std::size_t ph, std::size_t pw, std::size_t stride) {
        if (ph == 0 || pw == 0 || stride == 0) throw std::invalid_argument("maxpool2d: bad geometry");
        Layer l;
        l.kind = LayerKind::maxpool2d;
        l.pool_h = ph;
        l.pool_w = pw;
        l.pool_stride = stride;
        return l;
    }

    static Layer flatten() {
        Layer l;
        l.kind = LayerKind::flatten;
        return l;
    }

    static Layer relu() {
        Layer l;
        l.kind = LayerKind::activation;
        l.act = ActKind::relu;
        return l;
    }

    static Layer leaky_relu(S slope = S(0.1)) {
        if (!(slope > S(0) && slope < S(1))) throw std::invalid_argument("leaky_relu: slope must be in (0,1)");
        Layer l;
        l.kind = LayerKind::activation;
        l.act = ActKind::leaky_relu;
        l.negative_slope = slope;
        return l;
    }

    bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

    template <typename T>
    Layer<T> cast() const {
        Layer<T> l;
        l.kind = kind;
        l.in_width = in_width;
        l.out_width = out_width;
        l.in_channels = in_channels;
        l.out_channels = out_channels;
        l.kernel_h = kernel_h;
        l.kernel_w = kernel_w;
        l.stride = stride;
        l.padding = padding;
        l.pool_h = pool_h;
        l.pool_w = pool_w;
        l.pool_stride = pool_stride;
        l.act = act;
        l.negative_slope = static_cast<T>(negative_slope);
        if (has_params()) {
            l.weights = weights.template cast<T>();
            l.bias = bias.template cast<T>();
        }
        return l;
    }
};

/// Shape of a layer's output given its input shape (batch dim excluded).
template <typename S>
Shape layer_output_shape(const Layer<S>& l, const Shape& in) {
    switch (l.kind) {
        case LayerKind::dense: {
            if (in.size() != 1 || in[0] != l.in_width)
                throw std::invalid_argument("dense: input shape " + shape_str(in) + " incompatible with in_width " +
                                            std::to_string(l.in_width));
            return {l.out_width};
        }
        case LayerKind::conv2d: {
            if (in.size() != 3 || in[2] != l.in_channels)
                throw std::invalid_argument("conv2d: expects [H,W," + std::to_string(l.in_channels) + "], got " +
                                            shape_str(in));
            std::size_t h = in[0] + 2 * l.padding, w = in[1] + 2 * l.padding;
            if (h < l.kernel_h || w < l.kernel_w) throw std::invalid_argument("conv2d: kernel larger than input");
            return {(h - l.kernel_h) / l.stride + 1, (w - l.kernel_w) / l.stride + 1, l.out_channels};
        }
        case LayerKind::maxpool2d: {
            if (in.size() != 3) throw std::invalid_argument("maxpool2d: expects [H,W,C], got " + shape_str(in));
            if (in[0] < l.pool_h || in[1] < l.pool_w) throw std::invalid_argument("maxpool2d: window larger than input");
            return {(in[0] - l.pool_h) / l.pool_stride + 1, (in[1] - l.pool_w) / l.pool_stride + 1, in[2]};
        }
        case LayerKind::flatten:
            return {numel(in)};
        case LayerKind::activation:
            return in;
    }
    throw std::logic_error("unreachable");
}

/// Layered feedforward classifier. The last layer produces class_count
/// logits and is never followed by an activation (logits stay unbounded).
template <typename S>
struct Network {
    Shape input_shape;  // {H,W,C} or {width}
    std::size_t class_count = 0;
    std::vector<Layer<S>> layers;

    void validate() const {
        if (class_count < 2) throw std::invalid_argument("network: class_count must be >= 2");
        if (layers.empty()) throw std::invalid_argument("network: no layers");
        if (layers.back().kind == LayerKind::activation)
            throw std::invalid_argument("network: logits layer must not be followed by an activation");
        Shape s = input_shape;
        for (const auto& l : layers) s = layer_output_shape(l, s);
        if (s != Shape{class_count})
            throw std::invalid_argument("network: final output " + shape_str(s) + " != [" +
                                        std::to_string(class_count) + "]");
    }

    /// Indices of activation layers, in network order. ClipBounds slots
    /// follow this ordering.
    std::vector<std::size_t> activation_layers() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].kind == LayerKind::activation) idx.push_back(i);
        return idx;
    }

    /// Bound-vector length per activation layer: one scalar per channel for
    /// feature maps, one per unit for flat inputs.
    std::vector<std::size_t> bound_widths() const {
        std::vector<std::size_t> widths;
        Shape s = input_shape;
        for (const auto& l : layers) {
            if (l.kind == LayerKind::activation) widths.push_back(s.back());
            s = layer_output_shape(l, s);
        }
        return widths;
    }

    bool has_leaky() const {
        for (const auto& l : layers)
            if (l.kind == LayerKind::activation && l.act == ActKind::leaky_relu) return true;
        return false;
    }

    /// He-style uniform init, deterministic per seed.
    void init_params(std::uint64_t seed) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            if (!l.has_params()) continue;
            std::size_t fan_in = l.kind == LayerKind::dense ? l.in_width : l.kernel_h * l.kernel_w * l.in_channels;
            S b = static_cast<S>(std::sqrt(6.0 / static_cast<double>(fan_in)));
            auto st = rng::Stream::make(seed, {0x1717u, i});
            for (auto& w : l.weights.data) w = static_cast<S>(st.uniform(-b, b));
            std::fill(l.bias.data.begin(), l.bias.data.end(), S(0));
        }
    }

    template <typename T>
    Network<T> cast() const {
        Network<T> n;
        n.input_shape = input_shape;
        n.class_count = class_count;
        n.layers.reserve(layers.size());
        for (const auto& l : layers) n.layers.push_back(l.template cast<T>());
        return n;
    }
};

/// Per-activation-layer saturation bounds: upper always, lower only for
/// networks with unbounded-below activations (leaky_relu). Conv layers
/// share one scalar per feature map.
template <typename S>
struct ClipBounds {
    std::vector<std::vector<S>> upper;
    std::vector<std::vector<S>> lower;  // empty => one-sided

    bool two_sided() const { return !lower.empty(); }

    static ClipBounds constant(const Network<S>& net, S z0) {
        ClipBounds z;
        for (std::size_t w : net.bound_widths()) z.upper.emplace_back(w, z0);
        if (net.has_leaky())
            for (std::size_t w : net.bound_widths()) z.lower.emplace_back(w, -z0);
        return z;
    }

    static ClipBounds unbounded(const Network<S>& net) {
        ClipBounds z;
        constexpr S inf = std::numeric_limits<S>::infinity();
        for (std::size_t w : net.bound_widths()) z.upper.emplace_back(w, inf);
        if (net.has_leaky())
            for (std::size_t w : net.bound_widths()) z.lower.emplace_back(w, -inf);
        return z;
    }

    void validate(const Network<S>& net) const {
        auto widths = net.bound_widths();
        if (upper.size() != widths.size())
            throw std::invalid_argument("bounds: expected " + std::to_string(widths.size()) + " upper vectors, got " +
                                        std::to_string(upper.size()));
        for (std::size_t i = 0; i < widths.size(); ++i)
            if (upper[i].size() != widths[i])
                throw std::invalid_argument("bounds: layer " + std::to_string(i) + " upper length " +
                                            std::to_string(upper[i].size()) + " != " + std::to_string(widths[i]));
        for (const auto& v : upper)
            for (S u : v)
                if (!(u > S(0))) throw std::invalid_argument("bounds: upper bounds must be strictly positive");
        if (!lower.empty()) {
            if (lower.size() != widths.size()) throw std::invalid_argument("bounds: lower vector count mismatch");
            for (std::size_t i = 0; i < widths.size(); ++i) {
                if (lower[i].size() != widths[i]) throw std::invalid_argument("bounds: lower length mismatch");
                for (std::size_t j = 0; j < widths[i]; ++j)
                    if (!(lower[i][j] < upper[i][j]))
                        throw std::invalid_argument("bounds: lower must be < upper elementwise");
            }
        }
    }

    template <typename T>
    ClipBounds<T> cast() const {
        ClipBounds<T> z;
        for (const auto& v : upper) z.upper.emplace_back(v.begin(), v.end());
        for (const auto& v : lower) z.lower.emplace_back(v.begin(), v.end());
        return z;
    }
};

template <typename S>
struct GradientBundle {
    std::vector<Tensor<S>> d_weights, d_bias;      // per layer; empty tensors for param-free layers
    Tensor<S> d_input;                             // same shape as the input that was differentiated
    std::vector<std::vector<S>> d_upper, d_lower;  // per activation slot; empty when no bounds given
};

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <typename S>
struct Trace {
    std::vector<Tensor<S>> inputs;                     // input to each layer; inputs[0] == x
    std::vector<std::vector<std::uint32_t>> pool_idx;  // per layer; flat source index per pooled output
};

// cols: [N*OH*OW, kh*kw*C] row-major, zero-filled where the kernel overlaps padding
template <typename S>
void im2col(const Layer<S>& l, const S* in, std::size_t n, std::size_t h, std::size_t w, std::size_t c, S* cols) {
    const std::size_t oh = (h + 2 * l.padding - l.kernel_h) / l.stride + 1;
    const std::size_t ow = (w + 2 * l.padding - l.kernel_w) / l.stride + 1;
    const std::size_t k = l.kernel_h * l.kernel_w * c;
    for (std::size_t i = 0; i < n; ++i) {
        const S* img = in + i * h * w * c;
        S* dst_base = cols + i * oh * ow * k;
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                S* dst = dst_base + (oy * ow + ox) * k;
                for (std::size_t ky = 0; ky < l.kernel_h; ++ky) {
                    std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                        static_cast<std::ptrdiff_t>(l.padding);
                    for (std::size_t kx = 0; kx < l.kernel_w; ++kx, dst += c) {
                        std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                            static_cast<std::ptrdiff_t>(l.padding);
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx < 0 ||
                            sx >= static_cast<std::ptrdiff_t>(w)) {
                            std::fill(dst, dst + c, S(0));
                        } else {
                            const S* src = img + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
                            std::copy(src, src + c, dst);
                        }
                    }
                }
            }
    }
}

template <typename S>
void col2im_add(const Layer<S>& l, const S* cols, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                S* d_in) {
    const std::size_t oh = (h + 2 * l.padding - l.kernel_h) / l.stride + 1;
    const std::size_t ow = (w + 2 * l.padding - l.kernel_w) / l.stride + 1;
    const std::size_t k = l.kernel_h * l.kernel_w * c;
    for (std::size_t i = 0; i < n; ++i) {
        S* img = d_in + i * h * w * c;
        const S* src_base = cols + i * oh * ow * k;
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const S* src = src_base + (oy * ow + ox) * k;
                for (std::size_t ky = 0; ky < l.kernel_h; ++ky) {
                    std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                        static_cast<std::ptrdiff_t>(l.padding);
                    for (std::size_t kx = 0; kx < l.kernel_w; ++kx, src += c) {
                        std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                            static_cast<std::ptrdiff_t>(l.padding);
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx < 0 ||
                            sx >= static_cast<std::ptrdiff_t>(w))
                            continue;
                        S* dst = img + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
                }
            }
    }
}

template <typename S>
inline S apply_act(ActKind act, S slope, S h) {
    if (act == ActKind::relu) return h > S(0) ? h : S(0);
    return h > S(0) ? h : slope * h;
}

// Forward one layer over a batch. `act_slot` selects the bound vectors for
// activation layers; `pool_idx` receives argmax routing when non-null.
template <typename S>
Tensor<S> layer_forward(const Layer<S>& l, const Tensor<S>& x, const Shape& in_shape, std::size_t batch,
                        const ClipBounds<S>* z, std::size_t act_slot, std::vector<std::uint32_t>* pool_idx) {
    switch (l.kind) {
        case LayerKind::dense: {
            Tensor<S> y = Tensor<S>::zeros({batch, l.out_width});
            ConstMatMap<S> a(x.data.data(), batch, l.in_width);
            ConstMatMap<S> wm(l.weights.data.data(), l.out_width, l.in_width);
            ConstMatMap<S> bm(l.bias.data.data(), 1, l.out_width);
            MatMap<S> ym(y.data.data(), batch, l.out_width);
            ym.noalias() = a * wm.transpose();
            ym.rowwise() += bm.row(0);
            return y;
        }
        case LayerKind::conv2d: {
            const std::size_t h = in_shape[0], w = in_shape[1], c = in_shape[2];
            const std::size_t oh = (h + 2 * l.padding - l.kernel_h) / l.stride + 1;
            const std::size_t ow = (w + 2 * l.padding - l.kernel_w) / l.stride + 1;
            const std::size_t k = l.kernel_h * l.kernel_w * c;
            std::vector<S> cols(batch * oh * ow * k);
            im2col(l, x.data.data(), batch, h, w, c, cols.data());
            Tensor<S> y = Tensor<S>::zeros({batch, oh, ow, l.out_channels});
            ConstMatMap<S> cm(cols.data(), batch * oh * ow, k);
            ConstMatMap<S> wm(l.weights.data.data(), l.out_channels, k);
            ConstMatMap<S> bm(l.bias.data.data(), 1, l.out_channels);
            MatMap<S> ym(y.data.data(), batch * oh * ow, l.out_channels);
            ym.noalias() = cm * wm.transpose();
            ym.rowwise() += bm.row(0);
            return y;
        }
        case LayerKind::maxpool2d: {
            const std::size_t h = in_shape[0], w = in_shape[1], c = in_shape[2];
            const std::size_t oh = (h - l.pool_h) / l.pool_stride + 1;
            const std::size_t ow = (w - l.pool_w) / l.pool_stride + 1;
            Tensor<S> y = Tensor<S>::zeros({batch, oh, ow, c});
            if (pool_idx) pool_idx->assign(batch * oh * ow * c, 0);
            for (std::size_t i = 0; i < batch; ++i) {
                const S* img = x.data.data() + i * h * w * c;
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        S* out = y.data.data() + ((i * oh + oy) * ow + ox) * c;
                        std::uint32_t* idx =
                            pool_idx ? pool_idx->data() + ((i * oh + oy) * ow + ox) * c : nullptr;
                        for (std::size_t ch = 0; ch < c; ++ch) out[ch] = -std::numeric_limits<S>::infinity();
                        for (std::size_t ky = 0; ky < l.pool_h; ++ky)
                            for (std::size_t kx = 0; kx < l.pool_w; ++kx) {
                                std::size_t sy = oy * l.pool_stride + ky, sx = ox * l.pool_stride + kx;
                                const S* src = img + (sy * w + sx) * c;
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                    // strict > keeps the first maximal element on ties
                                    if (src[ch] > out[ch]) {
                                        out[ch] = src[ch];
                                        if (idx)
                                            idx[ch] = static_cast<std::uint32_t>((sy * w + sx) * c + ch);
                                    }
                                }
                            }
                    }
            }
            return y;
        }
        case LayerKind::flatten:
            return x.reshaped({batch, numel(in_shape)});
        case LayerKind::activation: {
            Tensor<S> y = Tensor<S>::zeros(x.shape);
            const std::size_t width = in_shape.back();
            const S* up = z ? z->upper[act_slot].data() : nullptr;
            const S* lo = (z && z->two_sided()) ? z->lower[act_slot].data() : nullptr;
            const std::size_t n = x.size();
            for (std::size_t i = 0; i < n; ++i) {
                S a = apply_act(l.act, l.negative_slope, x.data[i]);
                if (up) {
                    const std::size_t ch = i % width;
                    a = std::min(a, up[ch]);
                    if (lo) a = std::max(a, lo[ch]);
                }
                y.data[i] = a;
            }
            return y;
        }
    }
    throw std::logic_error("unreachable");
}

// Splits {N,...} batched input from a bare single-sample input.
template <typename S>
std::pair<Tensor<S>, bool> batchify(const Network<S>& net, const Tensor<S>& x) {
    if (x.shape.size() == net.input_shape.size() + 1) {
        Shape rest(x.shape.begin() + 1, x.shape.end());
        if (rest != net.input_shape)
            throw std::invalid_argument("forward: batch shape " + shape_str(x.shape) + " incompatible with input " +
                                        shape_str(net.input_shape));
        return {x, true};
    }
    if (x.shape == net.input_shape) {
        Shape s = x.shape;
        s.insert(s.begin(), 1);
        return {x.reshaped(s), false};
    }
    throw std::invalid_argument("forward: input shape " + shape_str(x.shape) + " incompatible with network input " +
                                shape_str(net.input_shape));
}

template <typename S>
Tensor<S> run_forward(const Network<S>& net, const ClipBounds<S>* z, const Tensor<S>& x_batch, Trace<S>* trace) {
    const std::size_t batch = x_batch.shape[0];
    if (z) z->validate(net);
    if (trace) {
        trace->inputs.clear();
        trace->pool_idx.assign(net.layers.size(), {});
    }
    Shape cur_shape = net.input_shape;
    Tensor<S> cur = x_batch;
    std::size_t act_slot = 0;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        std::vector<std::uint32_t>* pidx =
            (trace && l.kind == LayerKind::maxpool2d) ? &trace->pool_idx[li] : nullptr;
        Tensor<S> next = layer_forward(l, cur, cur_shape, batch, z, act_slot, pidx);
        if (trace) trace->inputs.push_back(std::move(cur));
        cur = std::move(next);
        cur_shape = layer_output_shape(l, cur_shape);
        if (l.kind == LayerKind::activation) ++act_slot;
    }
    return cur;
}

}  // namespace detail

/// Logits of the unbounded network. Accepts a single sample ({H,W,C} or
/// {width}) or a batch with a leading N dimension.
template <typename S>
Tensor<S> forward(const Network<S>& net, const Tensor<S>& x) {
    auto [xb, batched] = detail::batchify(net, x);
    Tensor<S> logits = detail::run_forward<S>(net, nullptr, xb, nullptr);
    return batched ? logits : logits.reshaped({net.class_count});
}

/// Logits of the bounded network f(.;Z): every activation output is
/// clipped at its upper (and, when present, lower) bound. The logit layer
/// is never clipped.
template <typename S>
Tensor<S> forward_bounded(const Network<S>& net, const ClipBounds<S>& z, const Tensor<S>& x) {
    auto [xb, batched] = detail::batchify(net, x);
    Tensor<S> logits = detail::run_forward<S>(net, &z, xb, nullptr);
    return batched ? logits : logits.reshaped({net.class_count});
}

namespace detail {

/// Reverse sweep over a recorded forward trace. `act_extra`, when given,
/// holds per-activation-slot gradients that are added to the gradient of
/// that activation layer's *output* (used for losses defined on internal
/// activations rather than on logits).
template <typename S>
GradientBundle<S> run_backward(const Network<S>& net, const ClipBounds<S>* z, const Trace<S>& trace,
                               const Tensor<S>& upstream, const std::vector<Tensor<S>>* act_extra = nullptr) {
    const std::size_t batch = trace.inputs[0].shape[0];
    if (upstream.shape != Shape{batch, net.class_count})
        throw std::invalid_argument("backward: upstream shape " + shape_str(upstream.shape) + " incompatible");
    if (!all_finite(upstream)) throw std::invalid_argument("backward: non-finite upstream");

    GradientBundle<S> g;
    g.d_weights.resize(net.layers.size());
    g.d_bias.resize(net.layers.size());
    if (z) {
        for (const auto& v : z->upper) g.d_upper.emplace_back(v.size(), S(0));
        for (const auto& v : z->lower) g.d_lower.emplace_back(v.size(), S(0));
    }

    // input shapes per layer
    std::vector<Shape> in_shapes;
    Shape s = net.input_shape;
    std::vector<std::size_t> act_slot_of(net.layers.size(), 0);
    std::size_t slot = 0;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        in_shapes.push_back(s);
        s = layer_output_shape(net.layers[li], s);
        if (net.layers[li].kind == LayerKind::activation) act_slot_of[li] = slot++;
    }

    Tensor<S> d_cur = upstream;
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const auto& l = net.layers[li];
        const Tensor<S>& xin = trace.inputs[li];
        const Shape& ish = in_shapes[li];
        switch (l.kind) {
            case LayerKind::dense: {
                g.d_weights[li] = Tensor<S>::zeros(l.weights.shape);
                g.d_bias[li] = Tensor<S>::zeros(l.bias.shape);
                detail::ConstMatMap<S> dm(d_cur.data.data(), batch, l.out_width);
                detail::ConstMatMap<S> am(xin.data.data(), batch, l.in_width);
                detail::ConstMatMap<S> wm(l.weights.data.data(), l.out_width, l.in_width);
                detail::MatMap<S> dwm(g.d_weights[li].data.data(), l.out_width, l.in_width);
                detail::MatMap<S> dbm(g.d_bias[li].data.data(), 1, l.out_width);
                dwm.noalias() = dm.transpose() * am;
                dbm.row(0) = dm.colwise().sum();
                Tensor<S> d_prev = Tensor<S>::zeros(xin.shape);
                detail::MatMap<S> dpm(d_prev.data.data(), batch, l.in_width);
                dpm.noalias() = dm * wm;
                d_cur = std::move(d_prev);
                break;
            }
            case LayerKind::conv2d: {
                const std::size_t h = ish[0], w = ish[1], c = ish[2];
                const std::size_t oh = (h + 2 * l.padding - l.kernel_h) / l.stride + 1;
                const std::size_t ow = (w + 2 * l.padding - l.kernel_w) / l.stride + 1;
                const std::size_t k = l.kernel_h * l.kernel_w * c;
                std::vector<S> cols(batch * oh * ow * k);
                detail::im2col(l, xin.data.data(), batch, h, w, c, cols.data());
                g.d_weights[li] = Tensor<S>::zeros(l.weights.shape);
                g.d_bias[li] = Tensor<S>::zeros(l.bias.shape);
                detail::ConstMatMap<S> dm(d_cur.data.data(), batch * oh * ow, l.out_channels);
                detail::ConstMatMap<S> cm(cols.data(), batch * oh * ow, k);
                detail::ConstMatMap<S> wm(l.weights.data.data(), l.out_channels, k);
                detail::MatMap<S> dwm(g.d_weights[li].data.data(), l.out_channels, k);
                detail::MatMap<S> dbm(g.d_bias[li].data.data(), 1, l.out_channels);
                dwm.noalias() = dm.transpose() * cm;
                dbm.row(0) = dm.colwise().sum();
                std::vector<S> d_cols(batch * oh * ow * k);
                detail::MatMap<S> dcm(d_cols.data(), batch * oh * ow, k);
                dcm.noalias() = dm * wm;
                Tensor<S> d_prev = Tensor<S>::zeros(xin.shape);
                detail::col2im_add(l, d_cols.data(), batch, h, w, c, d_prev.data.data());
                d_cur = std::move(d_prev);
                break;
            }
            case LayerKind::maxpool2d: {
                Tensor<S> d_prev = Tensor<S>::zeros(xin.shape);
                const auto& idx = trace.pool_idx[li];
                const std::size_t per_img = numel(ish);
                const std::size_t out_per_img = d_cur.size() / batch;
                for (std::size_t i = 0; i < batch; ++i)
                    for (std::size_t j = 0; j < out_per_img; ++j)
                        d_prev.data[i * per_img + idx[i * out_per_img + j]] += d_cur.data[i * out_per_img + j];
                d_cur = std::move(d_prev);
                break;
            }
            case LayerKind::flatten: {
                d_cur = d_cur.reshaped(xin.shape);
                break;
            }
            case LayerKind::activation: {
                const std::size_t width = ish.back();
                const std::size_t aslot = act_slot_of[li];
                if (act_extra && !(*act_extra)[aslot].data.empty()) {
                    const Tensor<S>& extra = (*act_extra)[aslot];
                    for (std::size_t i = 0; i < d_cur.size(); ++i) d_cur.data[i] += extra.data[i];
                }
                const S* upb = z ? z->upper[aslot].data() : nullptr;
                const S* lob = (z && z->two_sided()) ? z->lower[aslot].data() : nullptr;
                S* dup = z ? g.d_upper[aslot].data() : nullptr;
                S* dlo = (z && z->two_sided()) ? g.d_lower[aslot].data() : nullptr;
                Tensor<S> d_prev = Tensor<S>::zeros(xin.shape);
                const std::size_t n = xin.size();
                for (std::size_t i = 0; i < n; ++i) {
                    const S hval = xin.data[i];
                    const S a = detail::apply_act(l.act, l.negative_slope, hval);
                    const S gd = d_cur.data[i];
                    const std::size_t ch = i % width;
                    if (upb && a >= upb[ch]) {
                        dup[ch] += gd;
                    } else if (lob && a <= lob[ch]) {
                        dlo[ch] += gd;
                    } else {
                        S slope = l.act == ActKind::relu ? (hval > S(0) ? S(1) : S(0))
                                                         : (hval > S(0) ? S(1) : l.negative_slope);
                        d_prev.data[i] = gd * slope;
                    }
                }
                d_cur = std::move(d_prev);
                break;
            }
        }
    }
    g.d_input = std::move(d_cur);
    return g;
}

}  // namespace detail

/// Exact reverse-mode gradients of upstream . logits with respect to
/// parameters, input and clip bounds. Subgradient conventions: clipped
/// branch wins at exact bound equality (d_upper = 1 at a == upper), ReLU
/// kink at 0 propagates 0.
template <typename S>
GradientBundle<S> backward(const Network<S>& net, const ClipBounds<S>* z, const Tensor<S>& x,
                           const Tensor<S>& upstream) {
    auto [xb, batched] = detail::batchify(net, x);
    Tensor<S> up = upstream;
    if (!batched && upstream.shape == Shape{net.class_count}) up = upstream.reshaped({1, net.class_count});
    detail::Trace<S> trace;
    detail::run_forward<S>(net, z, xb, &trace);
    GradientBundle<S> g = detail::run_backward(net, z, trace, up);
    if (!batched) g.d_input = g.d_input.reshaped(net.input_shape);
    return g;
}

/// Index of the largest logit; ties break to the lowest class index.
template <typename S>
std::size_t argmax_class(const S* logits, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k)
        if (logits[k] > logits[best]) best = k;
    return best;
}

/// Largest logit over k != c.
template <typename S>
S runner_up(const S* logits, std::size_t n, std::size_t c) {
    S best = -std::numeric_limits<S>::infinity();
    for (std::size_t k = 0; k < n; ++k)
        if (k != c && logits[k] > best) best = logits[k];
    return best;
}

/// Classification margin of class c: logits[c] - max_{k != c} logits[k].
/// Positive iff c is the unique argmax.
template <typename S>
S margin(const Tensor<S>& logits, std::size_t c) {
    if (logits.shape.size() != 1 || logits.size() < 2) throw std::invalid_argument("margin: need >= 2 logits");
    if (c >= logits.size()) throw std::invalid_argument("margin: class index out of range");
    return logits.data[c] - runner_up(logits.data.data(), logits.size(), c);
}

/// Numerically stable softmax cross-entropy of one logit row.
template <typename S>
S cross_entropy(const Tensor<S>& logits, std::size_t y, Tensor<S>* grad = nullptr) {
    if (logits.shape.size() != 1) throw std::invalid_argument("cross_entropy: expects a logit vector");
    const std::size_t n = logits.size();
    if (y >= n) throw std::invalid_argument("cross_entropy: bad class");
    S m = *std::max_element(logits.data.begin(), logits.data.end());
    S sum = S(0);
    for (S v : logits.data) sum += std::exp(v - m);
    S lse = m + std::log(sum);
    if (grad) {
        *grad = Tensor<S>::zeros({n});
        for (std::size_t k = 0; k < n; ++k) grad->data[k] = std::exp(logits.data[k] - m) / sum;
        grad->data[y] -= S(1);
    }
    return lse - logits.data[y];
}

/// Mean cross-entropy over a batch of logit rows; grad rows are
/// (softmax - onehot) / N.
template <typename S>
S cross_entropy_batch(const Tensor<S>& logits, const std::vector<std::uint16_t>& labels, Tensor<S>* grad = nullptr) {
    const std::size_t n = logits.shape[0], k = logits.shape[1];
    if (labels.size() != n) throw std::invalid_argument("cross_entropy_batch: label count mismatch");
    if (grad) *grad = Tensor<S>::zeros(logits.shape);
    S total = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        const S* row = logits.data.data() + i * k;
        S m = row[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        S sum = S(0);
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - m);
        total += m + std::log(sum) - row[labels[i]];
        if (grad) {
            S* grow = grad->data.data() + i * k;
            for (std::size_t j = 0; j < k; ++j) grow[j] = std::exp(row[j] - m) / sum / static_cast<S>(n);
            grow[labels[i]] -= S(1) / static_cast<S>(n);
        }
    }
    return total / static_cast<S>(n);
}

/// Chunked batch evaluation; keeps intermediate activations bounded in
/// memory for large datasets.
template <typename S>
Tensor<S> batched_logits(const Network<S>& net, const ClipBounds<S>* z, const Tensor<S>& images,
                         std::size_t chunk = 256) {
    const std::size_t n = images.shape[0];
    const std::size_t sample = numel(net.input_shape);
    Tensor<S> out = Tensor<S>::zeros({n, net.class_count});
    for (std::size_t start = 0; start < n; start += chunk) {
        std::size_t cnt = std::min(chunk, n - start);
        Shape bs = net.input_shape;
        bs.insert(bs.begin(), cnt);
        Tensor<S> slice(bs, std::vector<S>(images.data.begin() + start * sample,
                                           images.data.begin() + (start + cnt) * sample));
        Tensor<S> lg = detail::run_forward<S>(net, z, slice, nullptr);
        std::copy(lg.data.begin(), lg.data.end(), out.data.begin() + start * net.class_count);
    }
    return out;
}

template <typename S>
std::vector<std::uint16_t> predict(const Network<S>& net, const ClipBounds<S>* z, const Tensor<S>& images) {
    Tensor<S> lg = batched_logits(net, z, images);
    std::vector<std::uint16_t> out(lg.shape[0]);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint16_t>(argmax_class(lg.data.data() + i * net.class_count, net.class_count));
    return out;
}

template <typename S>
double accuracy(const Network<S>& net, const ClipBounds<S>* z, const Tensor<S>& images,
                const std::vector<std::uint16_t>& labels) {
    auto pred = predict(net, z, images);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Per-feature-map min/max post-activation values over a dataset
/// (unbounded network). Used for diagnostics and optional bound init.
template <typename S>
struct ActivationProfile {
    std::vector<std::vector<S>> max_val, min_val;  // per activation slot, per channel/unit
};

template <typename S>
ActivationProfile<S> activation_profile(const Network<S>& net, const Tensor<S>& images, std::size_t chunk = 256) {
    const std::size_t n = images.shape[0];
    if (n == 0) throw std::invalid_argument("activation_profile: empty dataset");
    auto widths = net.bound_widths();
    ActivationProfile<S> p;
    for (std::size_t w : widths) {
        p.max_val.emplace_back(w, -std::numeric_limits<S>::infinity());
        p.min_val.emplace_back(w, std::numeric_limits<S>::infinity());
    }
    const std::size_t sample = numel(net.input_shape);
    for (std::size_t start = 0; start < n; start += chunk) {
        std::size_t cnt = std::min(chunk, n - start);
        Shape bs = net.input_shape;
        bs.insert(bs.begin(), cnt);
        Tensor<S> slice(bs, std::vector<S>(images.data.begin() + start * sample,
                                           images.data.begin() + (start + cnt) * sample));
        detail::Trace<S> trace;
        detail::run_forward<S>(net, nullptr, slice, &trace);
        std::size_t slot = 0;
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            const auto& l = net.layers[li];
            if (l.kind != LayerKind::activation) continue;
            const Tensor<S>& h = trace.inputs[li];
            const std::size_t width = widths[slot];
            for (std::size_t i = 0; i < h.size(); ++i) {
                S a = detail::apply_act(l.act, l.negative_slope, h.data[i]);
                std::size_t ch = i % width;
                p.max_val[slot][ch] = std::max(p.max_val[slot][ch], a);
                p.min_val[slot][ch] = std::min(p.min_val[slot][ch], a);
            }
            ++slot;
        }
    }
    return p;
}

}  // namespace mmclip
