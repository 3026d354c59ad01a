#pragma once

// Minimal differentiable conv/relu/max-pool network: forward tap extraction,
// reverse-mode input gradients, nearest-neighbour upsampling and NNW1 weight I/O.

#include <stylecal/image.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylecal::nn {

inline const std::array<std::string, 5> kStyleTaps = {"R11", "R21", "R31", "R41", "R51"};
inline const std::string kContentTap = "R42";

enum class LayerKind : std::uint8_t { Conv = 0, Relu = 1, MaxPool = 2 };

struct Layer {
    std::string name;  // non-empty names are taps
    LayerKind kind = LayerKind::Relu;
    int out_channels = 0;
    int in_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    std::vector<float> kernel;  // [out][in][kh][kw]
    std::vector<float> bias;    // [out]

    bool operator==(const Layer&) const = default;
};

struct NetworkSpec {
    std::vector<Layer> layers;
    /// Per-channel value subtracted from the input image; metadata carried by NNW1.
    std::array<float, 3> input_shift{0.0f, 0.0f, 0.0f};

    bool operator==(const NetworkSpec&) const = default;

    std::map<std::string, size_t> taps() const {
        std::map<std::string, size_t> t;
        for (size_t i = 0; i < layers.size(); ++i)
            if (!layers[i].name.empty()) t[layers[i].name] = i;
        return t;
    }

    size_t tap_index(const std::string& name) const {
        for (size_t i = 0; i < layers.size(); ++i)
            if (layers[i].name == name) return i;
        throw std::invalid_argument("unknown tap '" + name + "'");
    }

    bool has_tap(const std::string& name) const {
        for (const auto& l : layers)
            if (l.name == name) return true;
        return false;
    }

    /// Channel count at a tap.
    int channels_at(const std::string& name) const {
        const size_t idx = tap_index(name);
        int ch = 3;
        for (size_t i = 0; i <= idx; ++i)
            if (layers[i].kind == LayerKind::Conv) ch = layers[i].out_channels;
        return ch;
    }

    /// (height, width) of a tap for an input of the given size.
    std::pair<int, int> tap_size(const std::string& name, int height, int width) const {
        const size_t idx = tap_index(name);
        for (size_t i = 0; i <= idx; ++i)
            if (layers[i].kind == LayerKind::MaxPool) {
                height /= 2;
                width /= 2;
            }
        return {height, width};
    }

    void validate() const {
        int ch = 3;
        std::set<std::string> seen;
        for (size_t i = 0; i < layers.size(); ++i) {
            const Layer& l = layers[i];
            if (!l.name.empty() && !seen.insert(l.name).second)
                throw std::invalid_argument("duplicate tap name '" + l.name + "'");
            if (l.kind != LayerKind::Conv) continue;
            if (l.in_channels != ch)
                throw std::invalid_argument("layer " + std::to_string(i) + ": conv expects " +
                                            std::to_string(l.in_channels) + " input channels, previous layer gives " +
                                            std::to_string(ch));
            if (l.out_channels <= 0 || l.kernel_h <= 0 || l.kernel_w <= 0 || l.kernel_h % 2 == 0 || l.kernel_w % 2 == 0)
                throw std::invalid_argument("layer " + std::to_string(i) + ": conv needs positive, odd kernel dims");
            const size_t expect = static_cast<size_t>(l.out_channels) * l.in_channels * l.kernel_h * l.kernel_w;
            if (l.kernel.size() != expect || l.bias.size() != static_cast<size_t>(l.out_channels))
                throw std::invalid_argument("layer " + std::to_string(i) + ": weight count does not match declared dims");
            ch = l.out_channels;
        }
    }
};

/// 64-byte aligned storage. Vectorised reductions choose their summation
/// order from the buffer address, so fixed alignment keeps results bitwise
/// reproducible from run to run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// One layer's activations. Storage is channel planes, each plane row-major:
/// value of channel k at position p = y*width + x is data[k*positions() + p].
struct FeatureMap {
    std::string tap;
    int height = 0;
    int width = 0;
    int channels = 0;
    Buffer data;

    FeatureMap() = default;
    FeatureMap(std::string t, int c, int h, int w, double fill = 0.0)
        : tap(std::move(t)), height(h), width(w), channels(c), data(static_cast<size_t>(c) * h * w, fill) {}

    int positions() const { return height * width; }
    double& at(int k, int p) { return data[static_cast<size_t>(k) * positions() + p]; }
    double at(int k, int p) const { return data[static_cast<size_t>(k) * positions() + p]; }
    double& at(int k, int y, int x) { return at(k, y * width + x); }
    double at(int k, int y, int x) const { return at(k, y * width + x); }

    bool same_shape(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    bool operator==(const FeatureMap&) const = default;
};

using TapMaps = std::map<std::string, FeatureMap>;

inline FeatureMap zeros_like(const FeatureMap& fm) { return FeatureMap(fm.tap, fm.channels, fm.height, fm.width); }

// ---------------------------------------------------------------------------
// Layer kernels

namespace detail {

inline void conv_forward(const Layer& l, const FeatureMap& in, FeatureMap& out) {
    const int H = in.height, W = in.width;
    const int ph = l.kernel_h / 2, pw = l.kernel_w / 2;
    out = FeatureMap({}, l.out_channels, H, W);
    const int M = H * W;
    for (int o = 0; o < l.out_channels; ++o) {
        double* dst = out.data.data() + static_cast<size_t>(o) * M;
        std::fill(dst, dst + M, static_cast<double>(l.bias[o]));
        for (int i = 0; i < l.in_channels; ++i) {
            const double* src = in.data.data() + static_cast<size_t>(i) * M;
            const float* k = l.kernel.data() + (static_cast<size_t>(o) * l.in_channels + i) * l.kernel_h * l.kernel_w;
            for (int ky = 0; ky < l.kernel_h; ++ky) {
                const int dy = ky - ph;
                const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                for (int kx = 0; kx < l.kernel_w; ++kx) {
                    const int dx = kx - pw;
                    const double w = k[ky * l.kernel_w + kx];
                    if (w == 0.0) continue;
                    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                    for (int y = y0; y < y1; ++y) {
                        double* drow = dst + y * W;
                        const double* srow = src + (y + dy) * W + dx;
                        for (int x = x0; x < x1; ++x) drow[x] += w * srow[x];
                    }
                }
            }
        }
    }
}

// Adjoint of conv_forward with respect to its input.
inline void conv_backward(const Layer& l, const FeatureMap& grad_out, FeatureMap& grad_in) {
    const int H = grad_out.height, W = grad_out.width;
    const int ph = l.kernel_h / 2, pw = l.kernel_w / 2;
    grad_in = FeatureMap({}, l.in_channels, H, W);
    const int M = H * W;
    for (int o = 0; o < l.out_channels; ++o) {
        const double* g = grad_out.data.data() + static_cast<size_t>(o) * M;
        for (int i = 0; i < l.in_channels; ++i) {
            double* dst = grad_in.data.data() + static_cast<size_t>(i) * M;
            const float* k = l.kernel.data() + (static_cast<size_t>(o) * l.in_channels + i) * l.kernel_h * l.kernel_w;
            for (int ky = 0; ky < l.kernel_h; ++ky) {
                const int dy = ky - ph;
                const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                for (int kx = 0; kx < l.kernel_w; ++kx) {
                    const int dx = kx - pw;
                    const double w = k[ky * l.kernel_w + kx];
                    if (w == 0.0) continue;
                    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                    for (int y = y0; y < y1; ++y) {
                        const double* grow = g + y * W;
                        double* drow = dst + (y + dy) * W + dx;
                        for (int x = x0; x < x1; ++x) drow[x] += w * grow[x];
                    }
                }
            }
        }
    }
}

// 2x2 stride-2 max pool; ties go to the first element in scan order.
inline void pool_forward(const FeatureMap& in, FeatureMap& out, std::vector<int>& argmax) {
    const int h = in.height / 2, w = in.width / 2;
    if (h == 0 || w == 0)
        throw std::invalid_argument("max-pool on " + std::to_string(in.height) + "x" + std::to_string(in.width) +
                                    " map would produce an empty map");
    out = FeatureMap({}, in.channels, h, w);
    argmax.assign(out.data.size(), 0);
    for (int k = 0; k < in.channels; ++k)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int best = (2 * y) * in.width + 2 * x;
                double bv = in.at(k, best);
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int p = (2 * y + dy) * in.width + 2 * x + dx;
                        if (in.at(k, p) > bv) {
                            bv = in.at(k, p);
                            best = p;
                        }
                    }
                const size_t o = static_cast<size_t>(k) * h * w + y * w + x;
                out.data[o] = bv;
                argmax[o] = best;
            }
}

inline void check_finite(const FeatureMap& fm, size_t layer) {
    for (double v : fm.data)
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite activation at layer " + std::to_string(layer) +
                                     " (corrupt weights?)");
}

}  // namespace detail

/// Forward pass that retains every activation so the input gradient can be
/// recovered by a single reverse sweep.
class ForwardPass {
public:
    ForwardPass(const NetworkSpec& net, const Image& image, const std::vector<std::string>& taps) : net_(&net) {
        if (image.data.size() != static_cast<size_t>(image.height) * image.width * 3)
            throw std::invalid_argument("image data size does not match dimensions");
        size_t last = 0;
        bool any = false;
        for (const auto& t : taps) {
            last = std::max(last, net.tap_index(t));
            any = true;
        }
        taps_ = taps;
        input_ = FeatureMap({}, 3, image.height, image.width);
        const int M = image.height * image.width;
        for (int p = 0; p < M; ++p)
            for (int c = 0; c < 3; ++c)
                input_.at(c, p) = image.data[static_cast<size_t>(p) * 3 + c] - net.input_shift[c];
        const size_t count = any ? last + 1 : 0;
        outputs_.resize(count);
        argmax_.resize(count);
        for (size_t i = 0; i < count; ++i) {
            const Layer& l = net.layers[i];
            const FeatureMap& in = i == 0 ? input_ : outputs_[i - 1];
            FeatureMap& out = outputs_[i];
            switch (l.kind) {
                case LayerKind::Conv:
                    if (in.channels != l.in_channels)
                        throw std::invalid_argument("layer " + std::to_string(i) + ": channel mismatch");
                    detail::conv_forward(l, in, out);
                    detail::check_finite(out, i);
                    break;
                case LayerKind::Relu:
                    out = in;
                    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
                    break;
                case LayerKind::MaxPool:
                    detail::pool_forward(in, out, argmax_[i]);
                    break;
            }
            out.tap = l.name;
        }
    }

    const FeatureMap& tap(const std::string& name) const { return outputs_.at(net_->tap_index(name)); }

    /// Every relu on/off state and max-pool winner, in layer order. Two inputs
    /// with equal decisions lie in the same piecewise-linear region.
    std::vector<int> decisions() const {
        std::vector<int> d;
        for (size_t i = 0; i < outputs_.size(); ++i) {
            if (net_->layers[i].kind == LayerKind::Relu) {
                const FeatureMap& in = i == 0 ? input_ : outputs_[i - 1];
                for (double v : in.data) d.push_back(v > 0.0 ? 1 : 0);
            } else if (net_->layers[i].kind == LayerKind::MaxPool) {
                d.insert(d.end(), argmax_[i].begin(), argmax_[i].end());
            }
        }
        return d;
    }

    TapMaps tap_maps() const {
        TapMaps m;
        for (const auto& t : taps_) m[t] = tap(t);
        return m;
    }

    /// Gradient with respect to the input image, given gradients at taps.
    Image backward(const TapMaps& tap_grads) const {
        std::map<size_t, const FeatureMap*> at_layer;
        for (const auto& [name, g] : tap_grads) {
            const size_t idx = net_->tap_index(name);
            if (idx >= outputs_.size()) throw std::invalid_argument("gradient supplied for tap '" + name + "' that was not computed");
            if (!g.same_shape(outputs_[idx])) throw std::invalid_argument("gradient shape mismatch at tap '" + name + "'");
            at_layer[idx] = &g;
        }
        Image result(input_.height, input_.width);
        if (outputs_.empty()) return result;
        FeatureMap grad = zeros_like(outputs_.back());
        for (size_t i = outputs_.size(); i-- > 0;) {
            if (auto it = at_layer.find(i); it != at_layer.end())
                for (size_t j = 0; j < grad.data.size(); ++j) grad.data[j] += it->second->data[j];
            const Layer& l = net_->layers[i];
            const FeatureMap& in = i == 0 ? input_ : outputs_[i - 1];
            FeatureMap gin;
            switch (l.kind) {
                case LayerKind::Conv:
                    detail::conv_backward(l, grad, gin);
                    break;
                case LayerKind::Relu:
                    gin = std::move(grad);
                    for (size_t j = 0; j < gin.data.size(); ++j)
                        if (!(outputs_[i].data[j] > 0.0)) gin.data[j] = 0.0;
                    break;
                case LayerKind::MaxPool: {
                    gin = FeatureMap({}, in.channels, in.height, in.width);
                    const int ho = outputs_[i].height, wo = outputs_[i].width;
                    for (int k = 0; k < in.channels; ++k)
                        for (int p = 0; p < ho * wo; ++p) {
                            const size_t o = static_cast<size_t>(k) * ho * wo + p;
                            gin.at(k, argmax_[i][o]) += grad.data[o];
                        }
                    break;
                }
            }
            grad = std::move(gin);
        }
        const int M = input_.height * input_.width;
        for (int p = 0; p < M; ++p)
            for (int c = 0; c < 3; ++c) result.data[static_cast<size_t>(p) * 3 + c] = grad.at(c, p);
        return result;
    }

private:
    const NetworkSpec* net_;
    std::vector<std::string> taps_;
    FeatureMap input_;
    std::vector<FeatureMap> outputs_;
    std::vector<std::vector<int>> argmax_;
};

/// Feature maps at the requested taps.
inline TapMaps forward(const Image& image, const NetworkSpec& net, const std::vector<std::string>& taps) {
    if (image.height > 0 && image.width > 0 && image.data.size() != static_cast<size_t>(image.height) * image.width * 3)
        throw std::invalid_argument("image must have 3 channels");
    return ForwardPass(net, image, taps).tap_maps();
}

/// Components of a scalar objective; `total` is what gets differentiated.
struct LossTerms {
    double total = 0.0;
    double content = 0.0;
    double style = 0.0;
};

/// Scalar loss over tap feature maps. When `grads` is non-null it holds a
/// zero map per tap on entry and the loss accumulates d(total)/d(feature) into it.
struct TapLoss {
    std::vector<std::string> taps;
    std::function<LossTerms(const TapMaps& features, TapMaps* grads)> eval;
};

struct ImageGradient {
    LossTerms value;
    Image gradient;
};

inline ImageGradient input_gradient(const Image& image, const NetworkSpec& net, const TapLoss& loss) {
    ForwardPass pass(net, image, loss.taps);
    TapMaps feats = pass.tap_maps();
    TapMaps grads;
    for (const auto& [name, fm] : feats) grads[name] = zeros_like(fm);
    ImageGradient r;
    r.value = loss.eval(feats, &grads);
    if (!std::isfinite(r.value.total)) throw std::runtime_error("loss returned a non-finite value");
    r.gradient = pass.backward(grads);
    return r;
}

inline LossTerms evaluate(const Image& image, const NetworkSpec& net, const TapLoss& loss) {
    return loss.eval(forward(image, net, loss.taps), nullptr);
}

// ---------------------------------------------------------------------------
// Nearest-neighbour upsampling

inline FeatureMap upsample(const FeatureMap& fm, int target_h, int target_w) {
    if (target_h < fm.height || target_w < fm.width)
        throw std::invalid_argument("upsample target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                                    " is smaller than source " + std::to_string(fm.height) + "x" + std::to_string(fm.width));
    FeatureMap out(fm.tap, fm.channels, target_h, target_w);
    for (int k = 0; k < fm.channels; ++k)
        for (int y = 0; y < target_h; ++y) {
            const int sy = static_cast<int>(static_cast<long long>(y) * fm.height / target_h);
            for (int x = 0; x < target_w; ++x) {
                const int sx = static_cast<int>(static_cast<long long>(x) * fm.width / target_w);
                out.at(k, y, x) = fm.at(k, sy, sx);
            }
        }
    return out;
}

/// Adjoint of upsample: sums each replicated block back onto its source cell.
inline FeatureMap upsample_adjoint(const FeatureMap& grad, int source_h, int source_w) {
    FeatureMap out(grad.tap, grad.channels, source_h, source_w);
    for (int k = 0; k < grad.channels; ++k)
        for (int y = 0; y < grad.height; ++y) {
            const int sy = static_cast<int>(static_cast<long long>(y) * source_h / grad.height);
            for (int x = 0; x < grad.width; ++x) {
                const int sx = static_cast<int>(static_cast<long long>(x) * source_w / grad.width);
                out.at(k, sy, sx) += grad.at(k, y, x);
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Network construction

inline Layer conv_layer(int in, int out, int k, std::mt19937_64& rng, double bias = 0.0) {
    Layer l;
    l.kind = LayerKind::Conv;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel_h = l.kernel_w = k;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in * k * k)));
    l.kernel.resize(static_cast<size_t>(out) * in * k * k);
    for (float& w : l.kernel) w = static_cast<float>(dist(rng));
    l.bias.assign(out, static_cast<float>(bias));
    return l;
}

inline Layer relu_layer(std::string name = {}) {
    Layer l;
    l.kind = LayerKind::Relu;
    l.name = std::move(name);
    return l;
}

inline Layer pool_layer() {
    Layer l;
    l.kind = LayerKind::MaxPool;
    return l;
}

/// VGG-shaped desk-scale network with He-initialised random weights:
/// conv blocks of the given widths, taps R11..R51 and R42.
inline NetworkSpec make_desk_network(std::uint64_t seed = 1, std::array<int, 5> widths = {8, 16, 32, 64, 64},
                                     double bias = 0.01) {
    std::mt19937_64 rng(seed);
    NetworkSpec net;
    auto& L = net.layers;
    L.push_back(conv_layer(3, widths[0], 3, rng, bias));
    L.push_back(relu_layer("R11"));
    L.push_back(conv_layer(widths[0], widths[0], 3, rng, bias));
    L.push_back(relu_layer());
    L.push_back(pool_layer());
    L.push_back(conv_layer(widths[0], widths[1], 3, rng, bias));
    L.push_back(relu_layer("R21"));
    L.push_back(conv_layer(widths[1], widths[1], 3, rng, bias));
    L.push_back(relu_layer());
    L.push_back(pool_layer());
    L.push_back(conv_layer(widths[1], widths[2], 3, rng, bias));
    L.push_back(relu_layer("R31"));
    L.push_back(conv_layer(widths[2], widths[2], 3, rng, bias));
    L.push_back(relu_layer());
    L.push_back(pool_layer());
    L.push_back(conv_layer(widths[2], widths[3], 3, rng, bias));
    L.push_back(relu_layer("R41"));
    L.push_back(conv_layer(widths[3], widths[3], 3, rng, bias));
    L.push_back(relu_layer("R42"));
    L.push_back(pool_layer());
    L.push_back(conv_layer(widths[3], widths[4], 3, rng, bias));
    L.push_back(relu_layer("R51"));
    net.validate();
    return net;
}

// ---------------------------------------------------------------------------
// NNW1 weight files
//
//   "NNW1" | u32 layer count | per layer: u16 name length, name bytes,
//   u8 kind (0 conv, 1 relu, 2 maxpool), conv only: u32 out,in,kh,kw,
//   f32 kernel[out][in][kh][kw], f32 bias[out]
//
// All integers and floats little-endian. A non-zero input shift is appended
// as the optional trailer "SHFT" f32[3].

namespace detail {

class ByteWriter {
public:
    void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
    template <class T>
    void le(T v) {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        const U u = std::bit_cast<U>(v);
        for (size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
    }
    const std::string& str() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::string& b) : buf_(b) {}
    void need(size_t n) const {
        if (pos_ + n > buf_.size()) throw std::runtime_error("truncated payload at byte " + std::to_string(pos_));
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    template <class T>
    T le() {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        need(sizeof(T));
        U u = 0;
        for (size_t i = 0; i < sizeof(T); ++i)
            u |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return std::bit_cast<T>(u);
    }
    size_t remaining() const { return buf_.size() - pos_; }

private:
    const std::string& buf_;
    size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_weights(const NetworkSpec& net) {
    net.validate();
    detail::ByteWriter w;
    w.bytes("NNW1", 4);
    w.le(static_cast<std::uint32_t>(net.layers.size()));
    for (const Layer& l : net.layers) {
        if (l.name.size() > 0xFFFF) throw std::invalid_argument("layer name too long");
        w.le(static_cast<std::uint16_t>(l.name.size()));
        w.bytes(l.name.data(), l.name.size());
        w.le(static_cast<std::uint8_t>(l.kind));
        if (l.kind == LayerKind::Conv) {
            w.le(static_cast<std::uint32_t>(l.out_channels));
            w.le(static_cast<std::uint32_t>(l.in_channels));
            w.le(static_cast<std::uint32_t>(l.kernel_h));
            w.le(static_cast<std::uint32_t>(l.kernel_w));
            for (float v : l.kernel) w.le(v);
            for (float v : l.bias) w.le(v);
        }
    }
    if (net.input_shift != std::array<float, 3>{0.0f, 0.0f, 0.0f}) {
        w.bytes("SHFT", 4);
        for (float v : net.input_shift) w.le(v);
    }
    return w.str();
}

inline NetworkSpec decode_weights(const std::string& bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || r.bytes(4) != "NNW1") throw std::runtime_error("bad magic: not an NNW1 weight file");
    const auto count = r.le<std::uint32_t>();
    NetworkSpec net;
    for (std::uint32_t i = 0; i < count; ++i) {
        Layer l;
        const auto nlen = r.le<std::uint16_t>();
        l.name = r.bytes(nlen);
        const auto kind = r.le<std::uint8_t>();
        if (kind > 2) throw std::runtime_error("layer " + std::to_string(i) + ": unknown type code " + std::to_string(kind));
        l.kind = static_cast<LayerKind>(kind);
        if (l.kind == LayerKind::Conv) {
            l.out_channels = static_cast<int>(r.le<std::uint32_t>());
            l.in_channels = static_cast<int>(r.le<std::uint32_t>());
            l.kernel_h = static_cast<int>(r.le<std::uint32_t>());
            l.kernel_w = static_cast<int>(r.le<std::uint32_t>());
            const size_t n = static_cast<size_t>(l.out_channels) * l.in_channels * l.kernel_h * l.kernel_w;
            r.need(n * 4 + static_cast<size_t>(l.out_channels) * 4);
            l.kernel.resize(n);
            for (float& v : l.kernel) v = r.le<float>();
            l.bias.resize(l.out_channels);
            for (float& v : l.bias) v = r.le<float>();
        }
        net.layers.push_back(std::move(l));
    }
    if (r.remaining() > 0) {
        if (r.bytes(4) != "SHFT") throw std::runtime_error("unexpected trailing bytes after layer table");
        for (float& v : net.input_shift) v = r.le<float>();
        if (r.remaining() > 0) throw std::runtime_error("unexpected trailing bytes after input shift");
    }
    try {
        net.validate();
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(std::string("shape mismatch: ") + e.what());
    }
    return net;
}

inline void save_weights(const NetworkSpec& net, const std::string& path) {
    const std::string bytes = encode_weights(net);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline NetworkSpec load_weights(const std::string& path) {
    return decode_weights(stylecal::detail::read_file_bytes(path));
}

}  // namespace stylecal::nn
