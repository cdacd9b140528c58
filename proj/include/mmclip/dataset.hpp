#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mmclip/rng.hpp"
#include "mmclip/tensor.hpp"

namespace mmclip {

/// Labeled image set; pixels live in [0,1], labels in [0, class_count).
template <typename S>
struct Dataset {
    Tensor<S> images;  // {N,H,W,C}
    std::vector<std::uint16_t> labels;
    std::size_t class_count = 0;

    std::size_t size() const { return labels.size(); }

    Shape sample_shape() const {
        if (images.shape.size() != 4) throw std::logic_error("dataset: images must be {N,H,W,C}");
        return {images.shape[1], images.shape[2], images.shape[3]};
    }

    std::size_t sample_numel() const { return numel(sample_shape()); }

    Tensor<S> image(std::size_t i) const {
        const std::size_t m = sample_numel();
        return Tensor<S>(sample_shape(),
                         std::vector<S>(images.data.begin() + i * m, images.data.begin() + (i + 1) * m));
    }

    void set_image(std::size_t i, const Tensor<S>& img) {
        const std::size_t m = sample_numel();
        std::copy(img.data.begin(), img.data.end(), images.data.begin() + i * m);
    }

    void validate() const {
        if (images.shape.size() != 4) throw std::invalid_argument("dataset: images must be {N,H,W,C}");
        if (images.shape[0] != labels.size()) throw std::invalid_argument("dataset: N != label count");
        for (S v : images.data)
            if (!(v >= S(0) && v <= S(1))) throw std::invalid_argument("dataset: pixel outside [0,1]");
        for (std::uint16_t y : labels)
            if (y >= class_count) throw std::invalid_argument("dataset: label out of range");
    }
};

template <typename S>
Dataset<S> subset(const Dataset<S>& d, const std::vector<std::size_t>& indices) {
    const std::size_t m = d.sample_numel();
    Dataset<S> out;
    Shape s = d.images.shape;
    s[0] = indices.size();
    out.images = Tensor<S>::zeros(s);
    out.labels.resize(indices.size());
    out.class_count = d.class_count;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy(d.images.data.begin() + indices[i] * m, d.images.data.begin() + (indices[i] + 1) * m,
                  out.images.data.begin() + i * m);
        out.labels[i] = d.labels[indices[i]];
    }
    return out;
}

/// Smooth random per-class prototype images: a few low-frequency cosine
/// waves per channel around mid-gray, clamped away from the pixel box
/// edges. Returns {classes,H,W,C}.
template <typename S>
Tensor<S> synthetic_prototypes(std::size_t classes, std::size_t h, std::size_t w, std::size_t c,
                               std::uint64_t seed) {
    Tensor<S> protos = Tensor<S>::zeros({classes, h, w, c});
    constexpr int waves = 3;
    for (std::size_t cls = 0; cls < classes; ++cls) {
        auto st = rng::Stream::make(seed, {0x5052u, cls});
        for (std::size_t ch = 0; ch < c; ++ch) {
            double amp[waves], fy[waves], fx[waves], phase[waves];
            for (int k = 0; k < waves; ++k) {
                amp[k] = st.uniform(0.10, 0.25);
                fy[k] = st.uniform(0.5, 2.5);
                fx[k] = st.uniform(0.5, 2.5);
                phase[k] = st.uniform(0.0, 2.0 * M_PI);
            }
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t col = 0; col < w; ++col) {
                    double v = 0.5;
                    for (int k = 0; k < waves; ++k)
                        v += amp[k] * std::cos(2.0 * M_PI * (fy[k] * r / h + fx[k] * col / w) + phase[k]);
                    v = std::clamp(v, 0.05, 0.95);
                    protos.data[((cls * h + r) * w + col) * c + ch] = static_cast<S>(v);
                }
        }
    }
    return protos;
}

/// Synthetic labeled dataset: per-class prototype + Gaussian pixel noise,
/// clamped to [0,1]. Sample i draws from its own counter-based stream, so
/// generation is schedule-independent and bitwise reproducible per seed.
template <typename S>
Dataset<S> generate_synthetic(std::size_t classes, std::size_t per_class, std::size_t h, std::size_t w,
                              std::size_t c, double noise_sigma, std::uint64_t seed) {
    if (classes == 0 || per_class == 0 || h == 0 || w == 0 || c == 0)
        throw std::invalid_argument("generate_synthetic: sizes must be positive");
    Tensor<S> protos = synthetic_prototypes<S>(classes, h, w, c, seed);
    const std::size_t m = h * w * c;
    const std::size_t n = classes * per_class;
    Dataset<S> d;
    d.images = Tensor<S>::zeros({n, h, w, c});
    d.labels.resize(n);
    d.class_count = classes;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i / per_class;
        d.labels[i] = static_cast<std::uint16_t>(cls);
        auto st = rng::Stream::make(seed, {0x5A4Du, i});
        const S* proto = protos.data.data() + cls * m;
        S* img = d.images.data.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            double v = static_cast<double>(proto[j]) + noise_sigma * st.normal();
            img[j] = static_cast<S>(std::clamp(v, 0.0, 1.0));
        }
    }
    return d;
}

}  // namespace mmclip
