#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mmclip/dataset.hpp"
#include "mmclip/rng.hpp"
#include "mmclip/tensor.hpp"

namespace mmclip {

/// How a backdoor pattern is embedded into an image.
template <typename S>
struct TriggerSpec {
    enum class Kind : std::uint8_t { chessboard = 0, patch = 1, blend = 2 };

    Kind kind = Kind::patch;
    S intensity = S(3.0 / 255.0);  // chessboard
    std::size_t row = 0, col = 0;  // patch/blend top-left corner
    Tensor<S> pixels;              // patch/blend content, {ph,pw,C}
    S blend_ratio = S(0.2);

    static TriggerSpec chessboard(S intensity) {
        if (!(intensity > S(0))) throw std::invalid_argument("chessboard: intensity must be > 0");
        TriggerSpec t;
        t.kind = Kind::chessboard;
        t.intensity = intensity;
        return t;
    }

    static TriggerSpec patch(std::size_t row, std::size_t col, Tensor<S> pixels) {
        if (pixels.shape.size() != 3) throw std::invalid_argument("patch: pixels must be {ph,pw,C}");
        TriggerSpec t;
        t.kind = Kind::patch;
        t.row = row;
        t.col = col;
        t.pixels = std::move(pixels);
        return t;
    }

    static TriggerSpec blend(S ratio, std::size_t row, std::size_t col, Tensor<S> pixels) {
        if (!(ratio > S(0) && ratio < S(1))) throw std::invalid_argument("blend: ratio must be in (0,1)");
        TriggerSpec t = patch(row, col, std::move(pixels));
        t.kind = Kind::blend;
        t.blend_ratio = ratio;
        return t;
    }
};

/// Random patch content and location, drawn once per seed; the location
/// then stays fixed for all poisoned training samples and triggered test
/// samples built from the same config.
template <typename S>
TriggerSpec<S> random_patch_trigger(std::size_t h, std::size_t w, std::size_t c, std::size_t ph, std::size_t pw,
                                    std::uint64_t seed, std::optional<S> blend_ratio = std::nullopt) {
    if (ph > h || pw > w) throw std::invalid_argument("random_patch_trigger: patch larger than image");
    auto st = rng::Stream::make(seed, {0x7472u});
    Tensor<S> px = Tensor<S>::zeros({ph, pw, c});
    for (auto& v : px.data) v = static_cast<S>(st.uniform01());
    std::size_t row = st.index(h - ph + 1);
    std::size_t col = st.index(w - pw + 1);
    if (blend_ratio) return TriggerSpec<S>::blend(*blend_ratio, row, col, std::move(px));
    return TriggerSpec<S>::patch(row, col, std::move(px));
}

/// Embeds the trigger into one image (does not modify the input).
/// Chessboard: clamp(x + intensity * P), P(r,c) = +1 on even (r+c) parity,
/// -1 otherwise, same sign across channels. Patch: region replaced.
/// Blend: region set to (1-ratio)*x + ratio*pixels.
template <typename S>
Tensor<S> embed_trigger(const Tensor<S>& x, const TriggerSpec<S>& t) {
    if (x.shape.size() != 3) throw std::invalid_argument("embed_trigger: image must be {H,W,C}");
    const std::size_t h = x.shape[0], w = x.shape[1], c = x.shape[2];
    Tensor<S> out = x;
    if (t.kind == TriggerSpec<S>::Kind::chessboard) {
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t col = 0; col < w; ++col) {
                const S p = ((r + col) % 2 == 0) ? t.intensity : -t.intensity;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    S& v = out.data[(r * w + col) * c + ch];
                    v = std::clamp(static_cast<S>(v + p), S(0), S(1));
                }
            }
        return out;
    }
    const std::size_t ph = t.pixels.shape[0], pw = t.pixels.shape[1];
    if (t.pixels.shape[2] != c || t.row + ph > h || t.col + pw > w)
        throw std::invalid_argument("embed_trigger: patch out of bounds");
    for (std::size_t r = 0; r < ph; ++r)
        for (std::size_t col = 0; col < pw; ++col)
            for (std::size_t ch = 0; ch < c; ++ch) {
                S& v = out.data[((t.row + r) * w + (t.col + col)) * c + ch];
                const S p = t.pixels.data[(r * pw + col) * c + ch];
                v = t.kind == TriggerSpec<S>::Kind::patch ? p
                                                          : static_cast<S>((S(1) - t.blend_ratio) * v + t.blend_ratio * p);
            }
    return out;
}

enum class AttackMode : std::uint8_t { all2one = 0, one2one = 1, all2all = 2 };

template <typename S>
struct AttackConfig {
    AttackMode mode = AttackMode::all2one;
    std::size_t target = 0;
    std::size_t source = 0;  // one2one only
    double poison_rate = 0.01;
    TriggerSpec<S> trigger;
    std::uint64_t seed = 0;

    void validate(std::size_t class_count) const {
        if (!(poison_rate > 0.0 && poison_rate <= 1.0))
            throw std::invalid_argument("attack: poison_rate must be in (0,1]");
        if (target >= class_count) throw std::invalid_argument("attack: target class out of range");
        if (mode == AttackMode::one2one) {
            if (source >= class_count) throw std::invalid_argument("attack: source class out of range");
            if (source == target) throw std::invalid_argument("attack: source must differ from target");
        }
    }
};

/// X2X label map. Returns the attack's intended label for a sample of
/// class y, or nullopt when y is not poisonable under the mode.
inline std::optional<std::uint16_t> map_label(AttackMode mode, std::uint16_t y, std::size_t class_count,
                                              std::size_t target, std::size_t source = 0) {
    switch (mode) {
        case AttackMode::all2one:
            return static_cast<std::uint16_t>(target);
        case AttackMode::one2one:
            if (y == source) return static_cast<std::uint16_t>(target);
            return std::nullopt;
        case AttackMode::all2all:
            return static_cast<std::uint16_t>((y + 1) % class_count);
    }
    return std::nullopt;
}

template <typename S>
std::optional<std::uint16_t> map_label(const AttackConfig<S>& cfg, std::uint16_t y, std::size_t class_count) {
    return map_label(cfg.mode, y, class_count, cfg.target, cfg.source);
}

template <typename S>
struct PoisonResult {
    Dataset<S> data;                   // trigger embedded, labels remapped on poisoned rows
    std::vector<std::size_t> indices;  // poisoned row indices, ascending
    std::vector<std::uint16_t> intended;  // mapped label per poisoned row
};

/// Poisons a seed-deterministic fraction of the eligible training samples.
/// Eligible = label poisonable under the mode and mapped label != original.
template <typename S>
PoisonResult<S> poison_training_set(const Dataset<S>& clean, const AttackConfig<S>& cfg) {
    cfg.validate(clean.class_count);
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        auto mapped = map_label(cfg, clean.labels[i], clean.class_count);
        if (mapped && *mapped != clean.labels[i]) eligible.push_back(i);
    }
    if (eligible.empty()) throw std::runtime_error("poison_training_set: no eligible samples");
    const auto count = static_cast<std::size_t>(std::llround(cfg.poison_rate * static_cast<double>(eligible.size())));
    auto st = rng::Stream::make(cfg.seed, {0x504Fu});
    st.shuffle(eligible);
    std::vector<std::size_t> chosen(eligible.begin(), eligible.begin() + std::min(count, eligible.size()));
    std::sort(chosen.begin(), chosen.end());

    PoisonResult<S> out;
    out.data = clean;
    out.indices = chosen;
    for (std::size_t i : chosen) {
        out.data.set_image(i, embed_trigger(clean.image(i), cfg.trigger));
        std::uint16_t mapped = *map_label(cfg, clean.labels[i], clean.class_count);
        out.data.labels[i] = mapped;
        out.intended.push_back(mapped);
    }
    return out;
}

template <typename S>
struct TriggeredTestset {
    Dataset<S> data;                      // original source labels retained
    std::vector<std::uint16_t> intended;  // attack target label per row
};

/// Embeds the trigger into every poisonable test sample. Target-class
/// samples are excluded under all2one/one2one so ASR is well defined;
/// original labels are kept so PACC can be scored alongside ASR.
template <typename S>
TriggeredTestset<S> make_trigger_testset(const Dataset<S>& clean_test, const AttackConfig<S>& cfg) {
    cfg.validate(clean_test.class_count);
    if (clean_test.size() == 0) throw std::invalid_argument("make_trigger_testset: empty test set");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < clean_test.size(); ++i) {
        auto mapped = map_label(cfg, clean_test.labels[i], clean_test.class_count);
        if (mapped && *mapped != clean_test.labels[i]) keep.push_back(i);
    }
    TriggeredTestset<S> out;
    out.data = subset(clean_test, keep);
    out.intended.resize(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        out.data.set_image(i, embed_trigger(out.data.image(i), cfg.trigger));
        out.intended[i] = *map_label(cfg, out.data.labels[i], clean_test.class_count);
    }
    return out;
}

}  // namespace mmclip
