#pragma once

// Style and content losses over tap feature maps, each with its analytic
// gradient with respect to the features.

#include <stylecal/stats.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stylecal::transfer {

using nn::FeatureMap;
using nn::TapMaps;
using stats::Matrix;
using stats::Vector;

/// (finer, coarser) tap pairs, each layer constrained with its successor.
inline const std::vector<std::pair<std::string, std::string>> kPairwiseDescending = {
    {"R11", "R21"}, {"R21", "R31"}, {"R31", "R41"}, {"R41", "R51"}};

inline void require_same_shape(const FeatureMap& a, const FeatureMap& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("feature maps differ in shape at tap '" + a.tap + "' vs '" + b.tap + "'");
}

/// Adds `g` (channels x positions) onto a gradient map.
inline void accumulate(FeatureMap* grad, const Matrix& g) {
    if (!grad) return;
    stats::as_matrix(*grad) += g;
}

/// 1/2 sum (f - target)^2.
inline double content_loss(const FeatureMap& f, const FeatureMap& target, FeatureMap* grad = nullptr) {
    require_same_shape(f, target);
    double s = 0.0;
    for (size_t i = 0; i < f.data.size(); ++i) {
        const double d = f.data[i] - target.data[i];
        s += d * d;
        if (grad) grad->data[i] += d;
    }
    return 0.5 * s;
}

/// w / (4 N^2 M^2) * |G(f) - target|^2 with G the Gram matrix.
inline double gram_loss(const FeatureMap& f, const Matrix& target, double w, FeatureMap* grad = nullptr) {
    const auto F = stats::as_matrix(f);
    const Matrix diff = F * F.transpose() - target;
    if (diff.rows() != target.rows()) throw std::invalid_argument("gram target size mismatch");
    const double N = f.channels, M = f.positions();
    const double scale = w / (4.0 * N * N * M * M);
    if (grad) accumulate(grad, (4.0 * scale) * diff * F);
    return scale * diff.squaredNorm();
}

/// As gram_loss with the scatter matrix of the centred features.
inline double covariance_loss(const FeatureMap& f, const Matrix& target, double w, FeatureMap* grad = nullptr) {
    const FeatureMap c = stats::centered(f);
    const auto F = stats::as_matrix(c);
    const Matrix diff = F * F.transpose() - target;
    const double N = f.channels, M = f.positions();
    const double scale = w / (4.0 * N * N * M * M);
    // The centring projection is absorbed: diff * F already has zero-mean rows.
    if (grad) accumulate(grad, (4.0 * scale) * diff * F);
    return scale * diff.squaredNorm();
}

/// w * sum_k (mean_k(f) - target_k)^2.
inline double mean_loss(const FeatureMap& f, const Vector& target, double w, FeatureMap* grad = nullptr) {
    const Vector d = stats::channel_mean(f) - target;
    if (grad) {
        const double M = f.positions();
        auto G = stats::as_matrix(*grad);
        G.colwise() += (2.0 * w / M) * d;
    }
    return w * d.squaredNorm();
}

/// Cross-layer Gram loss of one (finer, coarser) pair:
/// w / (4 N_l N_m M_l^2) * |G^{l,m} - target|^2. When `centred`, both maps are
/// mean-centred first, giving the cross-covariance variant.
inline double cross_loss(const FeatureMap& fine, const FeatureMap& coarse, const Matrix& target, double w,
                         bool centred, FeatureMap* grad_fine = nullptr, FeatureMap* grad_coarse = nullptr) {
    stats::require_integer_ratio(fine, coarse);
    FeatureMap a = centred ? stats::centered(fine) : fine;
    FeatureMap up = nn::upsample(coarse, fine.height, fine.width);
    if (centred) up = stats::centered(up);
    const auto A = stats::as_matrix(a);
    const auto B = stats::as_matrix(up);
    const Matrix diff = A * B.transpose() - target;
    const double Nl = fine.channels, Nm = coarse.channels, M = fine.positions();
    const double scale = w / (4.0 * Nl * Nm * M * M);
    if (grad_fine) accumulate(grad_fine, (2.0 * scale) * diff * B);
    if (grad_coarse) {
        FeatureMap gu(coarse.tap, coarse.channels, fine.height, fine.width);
        stats::as_matrix(gu) = (2.0 * scale) * diff.transpose() * A;
        const FeatureMap g = nn::upsample_adjoint(gu, coarse.height, coarse.width);
        for (size_t i = 0; i < g.data.size(); ++i) grad_coarse->data[i] += g.data[i];
    }
    return scale * diff.squaredNorm();
}

/// Per channel, the style activations resampled to `count` quantiles:
/// value at fraction (i + 1/2)/count of the sorted style values, linearly
/// interpolated.
inline std::vector<std::vector<double>> histogram_targets(const FeatureMap& style, int count) {
    std::vector<std::vector<double>> out(style.channels);
    const int Ms = style.positions();
    for (int k = 0; k < style.channels; ++k) {
        std::vector<double> v(style.data.begin() + static_cast<std::ptrdiff_t>(k) * Ms,
                              style.data.begin() + static_cast<std::ptrdiff_t>(k + 1) * Ms);
        std::sort(v.begin(), v.end());
        auto& t = out[k];
        t.resize(count);
        for (int i = 0; i < count; ++i) {
            const double q = std::clamp((i + 0.5) * Ms / count - 0.5, 0.0, Ms - 1.0);
            const int lo = static_cast<int>(std::floor(q));
            const int hi = std::min(lo + 1, Ms - 1);
            t[i] = v[lo] + (q - lo) * (v[hi] - v[lo]);
        }
    }
    return out;
}

/// w / (N M) * sum over channels of |sort(f_k) - target_k|^2. Ties in f are
/// ordered by position, which fixes the (almost everywhere) gradient.
inline double histogram_loss(const FeatureMap& f, const std::vector<std::vector<double>>& target, double w,
                             FeatureMap* grad = nullptr) {
    const int M = f.positions();
    if (static_cast<int>(target.size()) != f.channels) throw std::invalid_argument("histogram target channel mismatch");
    const double scale = w / (static_cast<double>(f.channels) * M);
    double s = 0.0;
    std::vector<int> order(M);
    for (int k = 0; k < f.channels; ++k) {
        if (static_cast<int>(target[k].size()) != M) throw std::invalid_argument("histogram target length mismatch");
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return f.at(k, a) < f.at(k, b); });
        for (int i = 0; i < M; ++i) {
            const double d = f.at(k, order[i]) - target[k][i];
            s += d * d;
            if (grad) grad->at(k, order[i]) += 2.0 * scale * d;
        }
    }
    return scale * s;
}

// ---------------------------------------------------------------------------
// Methods

enum class Method {
    Gatys,
    GatysAggressive,
    GatysH,
    GatysL,
    GatysM,
    GatysC,
    GatysCM,
    XL,
    XLAggressive,
    XM,
    XLC,
    XLCM,
    GAL,
    StyleControl,
    ContentControl
};

inline const std::vector<std::pair<Method, std::string>>& method_names() {
    static const std::vector<std::pair<Method, std::string>> names = {
        {Method::Gatys, "Gatys"},        {Method::GatysAggressive, "GatysAggressive"},
        {Method::GatysH, "GatysH"},      {Method::GatysL, "GatysL"},
        {Method::GatysM, "GatysM"},      {Method::GatysC, "GatysC"},
        {Method::GatysCM, "GatysCM"},    {Method::XL, "XL"},
        {Method::XLAggressive, "XLAggressive"}, {Method::XM, "XM"},
        {Method::XLC, "XLC"},            {Method::XLCM, "XLCM"},
        {Method::GAL, "GAL"},            {Method::StyleControl, "StyleControl"},
        {Method::ContentControl, "ContentControl"}};
    return names;
}

inline std::string to_string(Method m) {
    for (const auto& [k, v] : method_names())
        if (k == m) return v;
    throw std::invalid_argument("unknown method");
}

inline Method parse_method(const std::string& s) {
    for (const auto& [k, v] : method_names())
        if (v == s) return k;
    throw std::invalid_argument("unknown method '" + s + "'");
}

inline bool is_control(Method m) { return m == Method::StyleControl || m == Method::ContentControl; }
inline bool is_aggressive(Method m) { return m == Method::GatysAggressive || m == Method::XLAggressive; }
inline bool is_cross_layer(Method m) {
    return m == Method::XL || m == Method::XLAggressive || m == Method::XM || m == Method::XLC || m == Method::XLCM;
}

/// Per-tap style weights: channel count^-2 for GatysL, 1 otherwise.
inline std::map<std::string, double> default_layer_weights(Method m, const nn::NetworkSpec& net) {
    std::map<std::string, double> w;
    for (const auto& t : nn::kStyleTaps) {
        const double c = net.channels_at(t);
        w[t] = m == Method::GatysL ? 1.0 / (c * c) : 1.0;
    }
    return w;
}

/// Everything a style loss compares against, computed once from the style image.
struct StyleTargets {
    TapMaps features;
    std::map<std::string, Matrix> gram, cov;
    std::map<std::string, Vector> mean;
    std::map<std::string, Matrix> cross_gram, cross_cov;  // keyed by the finer tap
    mutable std::map<std::pair<std::string, int>, std::vector<std::vector<double>>> histogram;

    const std::vector<std::vector<double>>& histogram_for(const std::string& tap, int count) const {
        auto key = std::make_pair(tap, count);
        auto it = histogram.find(key);
        if (it == histogram.end()) it = histogram.emplace(key, histogram_targets(features.at(tap), count)).first;
        return it->second;
    }
};

inline StyleTargets style_targets(const TapMaps& style) {
    StyleTargets t;
    t.features = style;
    for (const auto& tap : nn::kStyleTaps) {
        auto it = style.find(tap);
        if (it == style.end()) continue;
        t.gram[tap] = stats::gram(it->second);
        const auto mc = stats::covariance(it->second);
        t.cov[tap] = mc.cov;
        t.mean[tap] = mc.mean;
    }
    for (const auto& [fine, coarse] : kPairwiseDescending) {
        auto a = style.find(fine), b = style.find(coarse);
        if (a == style.end() || b == style.end()) continue;
        t.cross_gram[fine] = stats::cross_gram(a->second, b->second);
        t.cross_cov[fine] = stats::cross_covariance(a->second, b->second);
    }
    return t;
}

/// Style term of a method (before the style weight), summed over taps or pairs.
/// GAL's style term is Gatys'. Taps listed in `skip` are left out.
inline double style_term(Method m, const TapMaps& f, const StyleTargets& s, const std::map<std::string, double>& w,
                         TapMaps* grads, const std::vector<std::string>& skip = {}) {
    auto g = [&](const std::string& tap) -> FeatureMap* { return grads ? &grads->at(tap) : nullptr; };
    auto skipped = [&](const std::string& tap) { return std::find(skip.begin(), skip.end(), tap) != skip.end(); };
    double total = 0.0;
    if (is_cross_layer(m)) {
        const bool centred = m == Method::XLC || m == Method::XLCM;
        for (const auto& [fine, coarse] : kPairwiseDescending) {
            const auto& target = centred ? s.cross_cov.at(fine) : s.cross_gram.at(fine);
            total += cross_loss(f.at(fine), f.at(coarse), target, w.at(fine), centred, g(fine), g(coarse));
        }
        if (m == Method::XLCM)
            for (const auto& tap : nn::kStyleTaps) total += mean_loss(f.at(tap), s.mean.at(tap), 1.0, g(tap));
        return total;
    }
    for (const auto& tap : nn::kStyleTaps) {
        if (skipped(tap)) continue;
        const FeatureMap& x = f.at(tap);
        const double wt = w.at(tap);
        switch (m) {
            case Method::GatysC:
            case Method::GatysCM:
                total += covariance_loss(x, s.cov.at(tap), wt, g(tap));
                break;
            default:
                total += gram_loss(x, s.gram.at(tap), wt, g(tap));
        }
        if (m == Method::GatysM || m == Method::GatysCM) total += mean_loss(x, s.mean.at(tap), wt, g(tap));
        if (m == Method::GatysH) {
            total += histogram_loss(x, s.histogram_for(tap, x.positions()), wt, g(tap));
        }
    }
    return total;
}

/// Taps a method reads: all style taps plus the content tap.
inline std::vector<std::string> loss_taps() {
    std::vector<std::string> t(nn::kStyleTaps.begin(), nn::kStyleTaps.end());
    t.push_back(nn::kContentTap);
    return t;
}

/// Content term + alpha * style term, or their product for XM. The returned
/// `style` component already includes alpha.
inline nn::TapLoss method_loss(Method m, double alpha, std::map<std::string, double> weights, StyleTargets style,
                               FeatureMap content) {
    if (is_control(m) || m == Method::GAL)
        throw std::invalid_argument(to_string(m) + " has no single image loss");
    nn::TapLoss loss;
    loss.taps = loss_taps();
    loss.eval = [m, alpha, weights = std::move(weights), style = std::move(style), content = std::move(content)](
                    const TapMaps& f, TapMaps* grads) {
        nn::LossTerms r;
        if (m != Method::XM) {
            r.content = content_loss(f.at(nn::kContentTap), content, grads ? &grads->at(nn::kContentTap) : nullptr);
            if (grads) {
                // Scale the style gradient by alpha through a separate accumulator.
                TapMaps sg;
                for (const auto& [k, v] : *grads) sg[k] = nn::zeros_like(v);
                r.style = alpha * style_term(m, f, style, weights, &sg);
                for (auto& [k, v] : sg)
                    for (size_t i = 0; i < v.data.size(); ++i) grads->at(k).data[i] += alpha * v.data[i];
            } else {
                r.style = alpha * style_term(m, f, style, weights, nullptr);
            }
            r.total = r.content + r.style;
            return r;
        }
        // Product form: d(c s) = s dc + c ds.
        TapMaps cg, sg;
        if (grads)
            for (const auto& [k, v] : *grads) cg[k] = sg[k] = nn::zeros_like(v);
        r.content = content_loss(f.at(nn::kContentTap), content, grads ? &cg.at(nn::kContentTap) : nullptr);
        r.style = alpha * style_term(m, f, style, weights, grads ? &sg : nullptr);
        r.total = r.content * r.style;
        if (grads)
            for (auto& [k, v] : *grads)
                for (size_t i = 0; i < v.data.size(); ++i)
                    v.data[i] += r.style * cg.at(k).data[i] + r.content * alpha * sg.at(k).data[i];
        return r;
    };
    return loss;
}

}  // namespace stylecal::transfer
