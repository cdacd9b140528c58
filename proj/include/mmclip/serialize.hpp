#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mmclip/attack.hpp"
#include "mmclip/dataset.hpp"
#include "mmclip/network.hpp"

namespace mmclip {

static_assert(std::endian::native == std::endian::little, "file formats are little-endian");

namespace io {

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("truncated file");
    return v;
}

template <typename T>
void write_vec(std::ostream& out, const std::vector<T>& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
std::vector<T> read_vec(std::istream& in, std::size_t n) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::vector<T> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in) throw std::runtime_error("truncated file");
    return v;
}

inline void write_magic(std::ostream& out, const char m[5]) { out.write(m, 4); }

inline bool try_read_magic(std::istream& in, const char m[5]) {
    char buf[4];
    in.read(buf, 4);
    if (in.gcount() == 0) return false;  // clean EOF, no trailer
    if (in.gcount() != 4 || std::string_view(buf, 4) != std::string_view(m, 4))
        throw std::runtime_error(std::string("bad magic, expected ") + m);
    return true;
}

inline void expect_magic(std::istream& in, const char m[5]) {
    if (!try_read_magic(in, m)) throw std::runtime_error(std::string("bad magic, expected ") + m);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Checkpoint file "MMCK" (+ optional "ZBND" bounds trailer).
// Parameters are stored as raw little-endian 32-bit floats; byte layout is
// documented in docs/formats.md. Round-trip of a float network is bit-exact.
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Network<S>& net,
                     const ClipBounds<S>* bounds = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    Network<float> n32 = net.template cast<float>();
    io::write_magic(f, "MMCK");
    io::write_raw<std::uint32_t>(f, 1);  // version
    io::write_raw<std::uint8_t>(f, static_cast<std::uint8_t>(n32.input_shape.size()));
    for (std::size_t d : n32.input_shape) io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(d));
    io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(n32.class_count));
    io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(n32.layers.size()));
    for (const auto& l : n32.layers) {
        io::write_raw<std::uint8_t>(f, static_cast<std::uint8_t>(l.kind));
        switch (l.kind) {
            case LayerKind::dense:
                io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(l.in_width));
                io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(l.out_width));
                io::write_vec(f, l.weights.data);
                io::write_vec(f, l.bias.data);
                break;
            case LayerKind::conv2d:
                for (std::size_t v : {l.in_channels, l.out_channels, l.kernel_h, l.kernel_w, l.stride, l.padding})
                    io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(v));
                io::write_vec(f, l.weights.data);
                io::write_vec(f, l.bias.data);
                break;
            case LayerKind::maxpool2d:
                for (std::size_t v : {l.pool_h, l.pool_w, l.pool_stride})
                    io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(v));
                break;
            case LayerKind::flatten:
                break;
            case LayerKind::activation:
                io::write_raw<std::uint8_t>(f, static_cast<std::uint8_t>(l.act));
                io::write_raw<float>(f, l.negative_slope);
                break;
        }
    }
    if (bounds) {
        ClipBounds<float> z32 = bounds->template cast<float>();
        io::write_magic(f, "ZBND");
        io::write_raw<std::uint8_t>(f, z32.two_sided() ? 1 : 0);
        io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(z32.upper.size()));
        for (std::size_t i = 0; i < z32.upper.size(); ++i) {
            io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(z32.upper[i].size()));
            io::write_vec(f, z32.upper[i]);
            if (z32.two_sided()) io::write_vec(f, z32.lower[i]);
        }
    }
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

struct LoadedCheckpoint {
    Network<float> net;
    std::optional<ClipBounds<float>> bounds;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    io::expect_magic(f, "MMCK");
    if (io::read_raw<std::uint32_t>(f) != 1) throw std::runtime_error("unsupported checkpoint version");
    LoadedCheckpoint out;
    auto rank = io::read_raw<std::uint8_t>(f);
    for (std::size_t i = 0; i < rank; ++i) out.net.input_shape.push_back(io::read_raw<std::uint32_t>(f));
    out.net.class_count = io::read_raw<std::uint32_t>(f);
    auto layer_count = io::read_raw<std::uint32_t>(f);
    for (std::size_t li = 0; li < layer_count; ++li) {
        auto kind = static_cast<LayerKind>(io::read_raw<std::uint8_t>(f));
        switch (kind) {
            case LayerKind::dense: {
                auto in = io::read_raw<std::uint32_t>(f);
                auto w = io::read_raw<std::uint32_t>(f);
                auto l = Layer<float>::dense(in, w);
                l.weights.data = io::read_vec<float>(f, static_cast<std::size_t>(w) * in);
                l.bias.data = io::read_vec<float>(f, w);
                out.net.layers.push_back(std::move(l));
                break;
            }
            case LayerKind::conv2d: {
                std::uint32_t v[6];
                for (auto& x : v) x = io::read_raw<std::uint32_t>(f);
                auto l = Layer<float>::conv2d(v[0], v[1], v[2], v[3], v[4], v[5]);
                l.weights.data = io::read_vec<float>(f, static_cast<std::size_t>(v[1]) * v[2] * v[3] * v[0]);
                l.bias.data = io::read_vec<float>(f, v[1]);
                out.net.layers.push_back(std::move(l));
                break;
            }
            case LayerKind::maxpool2d: {
                std::uint32_t v[3];
                for (auto& x : v) x = io::read_raw<std::uint32_t>(f);
                out.net.layers.push_back(Layer<float>::maxpool2d(v[0], v[1], v[2]));
                break;
            }
            case LayerKind::flatten:
                out.net.layers.push_back(Layer<float>::flatten());
                break;
            case LayerKind::activation: {
                auto act = static_cast<ActKind>(io::read_raw<std::uint8_t>(f));
                float slope = io::read_raw<float>(f);
                out.net.layers.push_back(act == ActKind::relu ? Layer<float>::relu()
                                                              : Layer<float>::leaky_relu(slope));
                break;
            }
            default:
                throw std::runtime_error("unknown layer kind in checkpoint");
        }
    }
    out.net.validate();
    if (io::try_read_magic(f, "ZBND")) {
        ClipBounds<float> z;
        bool has_lower = io::read_raw<std::uint8_t>(f) != 0;
        auto slots = io::read_raw<std::uint32_t>(f);
        for (std::size_t i = 0; i < slots; ++i) {
            auto len = io::read_raw<std::uint32_t>(f);
            z.upper.push_back(io::read_vec<float>(f, len));
            if (has_lower) z.lower.push_back(io::read_vec<float>(f, len));
        }
        z.validate(out.net);
        out.bounds = std::move(z);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file "MMDS" (+ optional "PIDX" trailer listing poisoned indices
// and intended labels).
// ---------------------------------------------------------------------------

struct PoisonIndex {
    std::vector<std::size_t> indices;
    std::vector<std::uint16_t> intended;
};

template <typename S>
void save_dataset(const std::filesystem::path& path, const Dataset<S>& d, const PoisonIndex* pidx = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    io::write_magic(f, "MMDS");
    io::write_raw<std::uint32_t>(f, 1);
    for (std::size_t v : {d.images.shape[0], d.images.shape[1], d.images.shape[2], d.images.shape[3],
                          d.class_count})
        io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(v));
    if constexpr (std::is_same_v<S, float>) {
        io::write_vec(f, d.images.data);
    } else {
        io::write_vec(f, d.images.template cast<float>().data);
    }
    io::write_vec(f, d.labels);
    if (pidx) {
        if (pidx->indices.size() != pidx->intended.size())
            throw std::invalid_argument("poison index: indices/intended size mismatch");
        io::write_magic(f, "PIDX");
        io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(pidx->indices.size()));
        for (std::size_t i = 0; i < pidx->indices.size(); ++i) {
            io::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(pidx->indices[i]));
            io::write_raw<std::uint16_t>(f, pidx->intended[i]);
        }
    }
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

struct LoadedDataset {
    Dataset<float> data;
    std::optional<PoisonIndex> poison;
};

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    io::expect_magic(f, "MMDS");
    if (io::read_raw<std::uint32_t>(f) != 1) throw std::runtime_error("unsupported dataset version");
    std::uint32_t n = io::read_raw<std::uint32_t>(f), h = io::read_raw<std::uint32_t>(f),
                  w = io::read_raw<std::uint32_t>(f), c = io::read_raw<std::uint32_t>(f),
                  classes = io::read_raw<std::uint32_t>(f);
    LoadedDataset out;
    out.data.class_count = classes;
    out.data.images = Tensor<float>({n, h, w, c}, io::read_vec<float>(f, static_cast<std::size_t>(n) * h * w * c));
    out.data.labels = io::read_vec<std::uint16_t>(f, n);
    if (io::try_read_magic(f, "PIDX")) {
        PoisonIndex p;
        auto count = io::read_raw<std::uint32_t>(f);
        for (std::size_t i = 0; i < count; ++i) {
            p.indices.push_back(io::read_raw<std::uint32_t>(f));
            p.intended.push_back(io::read_raw<std::uint16_t>(f));
        }
        out.poison = std::move(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV output. Numbers are formatted with shortest round-trip notation so
// reruns produce byte-identical files.
// ---------------------------------------------------------------------------

namespace csv {

inline std::string num(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

inline std::string num(std::size_t v) { return std::to_string(v); }

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : f_(path) {
        if (!f_) throw std::runtime_error("cannot write " + path.string());
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) f_ << ',';
            f_ << cells[i];
        }
        f_ << '\n';
    }

private:
    std::ofstream f_;
};

}  // namespace csv

}  // namespace mmclip
