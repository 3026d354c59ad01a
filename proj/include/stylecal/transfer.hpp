#pragma once

// Style transfer by optimising an image from noise, and the augmented
// Lagrangian solver that cuts the network at R41.

#include <stylecal/lbfgs.hpp>
#include <stylecal/losses.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace stylecal::transfer {

inline const std::string kCutTap = "R41";

struct GalOptions {
    double rho0 = 1.0;
    double rho_growth = 1.4;
    int outer_iters = 10;
    int inner_iters = 50;  // L-BFGS iterations for each primal block
};

struct TransferConfig {
    Method method = Method::Gatys;
    double style_weight = 1000.0;
    std::map<std::string, double> layer_weights;  // empty: the method's defaults
    int iterations = 100;
    std::uint64_t seed = 1;
    int working_width = 64;
    int memory = 10;
    GalOptions gal;

    void validate() const {
        if (!is_control(method) && !(style_weight > 0.0)) throw std::invalid_argument("style weight must be positive");
        if (style_weight < 0.0) throw std::invalid_argument("style weight must not be negative");
        if (iterations < 1) throw std::invalid_argument("iterations must be at least 1");
        if (working_width < 16) throw std::invalid_argument("working width must be at least 16");
        if (gal.outer_iters < 1 || gal.inner_iters < 1) throw std::invalid_argument("GAL iteration counts must be positive");
        if (!(gal.rho0 > 0.0) || !(gal.rho_growth > 0.0)) throw std::invalid_argument("GAL penalty must be positive");
    }
};

/// One row per optimiser iteration (per outer iteration for GAL). The
/// violation and rho columns are NaN outside GAL.
struct TraceRow {
    int iter = 0;
    double total = 0.0, content = 0.0, style = 0.0;
    double violation = std::numeric_limits<double>::quiet_NaN();
    double rho = std::numeric_limits<double>::quiet_NaN();
    double lambda_norm = std::numeric_limits<double>::quiet_NaN();
};

using LossTrace = std::vector<TraceRow>;

struct TransferResult {
    Image image;
    LossTrace trace;
};

inline std::string format_number(double v) {
    if (std::isnan(v)) return "";
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline void write_trace_csv(const LossTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot write");
    out << "iter,total,content,style,violation,rho\n";
    for (const auto& r : trace)
        out << r.iter << ',' << format_number(r.total) << ',' << format_number(r.content) << ','
            << format_number(r.style) << ',' << format_number(r.violation) << ',' << format_number(r.rho) << '\n';
}

/// Content and style scaled to the working width; the style takes the content's size.
inline std::pair<Image, Image> working_pair(const Image& style, const Image& content, int working_width) {
    validate_image(style);
    validate_image(content);
    Image c = resize_to_width(content, working_width);
    Image s = resize(style, c.height, c.width);
    return {std::move(s), std::move(c)};
}

inline opt::Vector to_vector(const Image& img) {
    return Eigen::Map<const opt::Vector>(img.data.data(), static_cast<Eigen::Index>(img.data.size()));
}

inline void from_vector(const opt::Vector& v, Image& img) {
    std::copy(v.data(), v.data() + v.size(), img.data.begin());
}

/// Image-space objective for L-BFGS.
inline opt::Objective image_objective(const nn::NetworkSpec& net, const nn::TapLoss& loss, int h, int w) {
    return [&net, loss, h, w](const opt::Vector& x, opt::Vector* grad) {
        Image img(h, w);
        from_vector(x, img);
        if (!grad) return nn::evaluate(img, net, loss);
        const auto r = nn::input_gradient(img, net, loss);
        *grad = to_vector(r.gradient);
        return r.value;
    };
}

// ---------------------------------------------------------------------------
// Augmented Lagrangian

/// (1/KP) sum (lambda d + rho d^2) with d = V - f. Accumulates d/dV into gv
/// and d/df into gf when given.
inline double augmented_term(const FeatureMap& V, const FeatureMap& f, const FeatureMap& lambda, double rho,
                             FeatureMap* gv = nullptr, FeatureMap* gf = nullptr) {
    require_same_shape(V, f);
    require_same_shape(V, lambda);
    const double inv = 1.0 / static_cast<double>(V.data.size());
    double s = 0.0;
    for (size_t i = 0; i < V.data.size(); ++i) {
        const double d = V.data[i] - f.data[i];
        s += lambda.data[i] * d + rho * d * d;
        const double g = inv * (lambda.data[i] + 2.0 * rho * d);
        if (gv) gv->data[i] += g;
        if (gf) gf->data[i] -= g;
    }
    return inv * s;
}

inline double mean_square_violation(const FeatureMap& V, const FeatureMap& f) {
    require_same_shape(V, f);
    double s = 0.0;
    for (size_t i = 0; i < V.data.size(); ++i) s += (V.data[i] - f.data[i]) * (V.data[i] - f.data[i]);
    return s / static_cast<double>(V.data.size());
}

/// Image block of the Lagrangian: alpha * sum_{l != R41} w_l L_style^l + L_aug.
/// `style` of the result holds the style part, `total` the sum.
inline nn::TapLoss gal_image_loss(double alpha, std::map<std::string, double> weights, StyleTargets style,
                                  FeatureMap V, FeatureMap lambda, double rho) {
    nn::TapLoss loss;
    loss.taps.assign(nn::kStyleTaps.begin(), nn::kStyleTaps.end());
    loss.eval = [=](const TapMaps& f, TapMaps* grads) {
        nn::LossTerms r;
        TapMaps sg;
        if (grads)
            for (const auto& [k, v] : *grads) sg[k] = nn::zeros_like(v);
        r.style = alpha * style_term(Method::Gatys, f, style, weights, grads ? &sg : nullptr, {kCutTap});
        const double aug = augmented_term(V, f.at(kCutTap), lambda, rho, nullptr, grads ? &grads->at(kCutTap) : nullptr);
        if (grads)
            for (auto& [k, v] : sg)
                for (size_t i = 0; i < v.data.size(); ++i) grads->at(k).data[i] += alpha * v.data[i];
        r.total = r.style + aug;
        return r;
    };
    return loss;
}

/// Dummy-variable block: alpha w_4 L_style^4(V) + L_content(V) at R41 + L_aug.
inline opt::Objective gal_feature_objective(double alpha, double w4, const Matrix& gram4, const FeatureMap& content4,
                                            const FeatureMap& f4, const FeatureMap& lambda, double rho) {
    return [=, &gram4, &content4, &f4, &lambda](const opt::Vector& x, opt::Vector* grad) {
        FeatureMap V = nn::zeros_like(f4);
        std::copy(x.data(), x.data() + x.size(), V.data.begin());
        FeatureMap g = nn::zeros_like(f4), gs = nn::zeros_like(f4);
        nn::LossTerms r;
        r.style = alpha * gram_loss(V, gram4, w4, grad ? &gs : nullptr);
        r.content = content_loss(V, content4, grad ? &g : nullptr);
        const double aug = augmented_term(V, f4, lambda, rho, grad ? &g : nullptr, nullptr);
        r.total = r.style + r.content + aug;
        if (grad) {
            grad->resize(x.size());
            for (Eigen::Index i = 0; i < x.size(); ++i) (*grad)(i) = g.data[i] + alpha * gs.data[i];
        }
        return r;
    };
}

inline TransferResult gal_optimize(const Image& style, const Image& content, const nn::NetworkSpec& net,
                                   const TransferConfig& cfg) {
    if (cfg.method != Method::GAL) throw std::invalid_argument("gal_optimize needs method GAL");
    if (cfg.style_weight == 0.0) {
        TransferConfig probe = cfg;  // zero weight is the content-only limit
        probe.style_weight = 1.0;
        probe.validate();
    } else {
        cfg.validate();
    }
    const auto taps = loss_taps();
    const auto weights = cfg.layer_weights.empty() ? default_layer_weights(Method::GAL, net) : cfg.layer_weights;
    const StyleTargets targets = style_targets(nn::forward(style, net, taps));
    const FeatureMap content4 = nn::forward(content, net, {kCutTap}).at(kCutTap);
    const double alpha = cfg.style_weight;

    Image I = noise_image(content.height, content.width, cfg.seed);
    FeatureMap V = nn::forward(I, net, {kCutTap}).at(kCutTap);
    FeatureMap lambda = nn::zeros_like(V);
    double rho = cfg.gal.rho0;

    opt::LbfgsOptions inner;
    inner.iterations = cfg.gal.inner_iters;
    inner.memory = cfg.memory;

    TransferResult out;
    for (int i = 0; i < cfg.gal.outer_iters; ++i) {
        // Primal block over the image.
        const auto iloss = gal_image_loss(alpha, weights, targets, V, lambda, rho);
        auto ir = opt::lbfgs_minimize(image_objective(net, iloss, I.height, I.width), to_vector(I), inner);
        from_vector(ir.x, I);
        const TapMaps fI = nn::forward(I, net, taps);
        const FeatureMap& f4 = fI.at(kCutTap);

        // Primal block over the dummy features.
        const auto vobj = gal_feature_objective(alpha, weights.at(kCutTap), targets.gram.at(kCutTap), content4, f4,
                                                lambda, rho);
        opt::Vector v0 = Eigen::Map<const opt::Vector>(V.data.data(), static_cast<Eigen::Index>(V.data.size()));
        auto vr = opt::lbfgs_minimize(vobj, v0, inner);
        std::copy(vr.x.data(), vr.x.data() + vr.x.size(), V.data.begin());

        TraceRow row;
        row.iter = i;
        row.violation = mean_square_violation(V, f4);
        row.rho = rho;
        row.content = content_loss(V, content4);
        row.style = alpha * (style_term(Method::Gatys, fI, targets, weights, nullptr, {kCutTap}) +
                             gram_loss(V, targets.gram.at(kCutTap), weights.at(kCutTap)));
        row.total = row.style + row.content + augmented_term(V, f4, lambda, rho);

        // Dual step, then the penalty grows.
        for (size_t k = 0; k < lambda.data.size(); ++k) lambda.data[k] += rho * (V.data[k] - f4.data[k]);
        double ln = 0.0;
        for (double v : lambda.data) ln += v * v;
        row.lambda_norm = std::sqrt(ln);
        out.trace.push_back(row);
        if (!std::isfinite(row.total) || std::abs(row.total) > 1e12)
            throw std::runtime_error("GAL diverged at outer iteration " + std::to_string(i));
        rho *= cfg.gal.rho_growth;
    }
    out.image = clamp01(I);
    return out;
}

// ---------------------------------------------------------------------------

/// Runs one transfer at the configured working width. Controls return the
/// resized input; every other method optimises seeded noise with L-BFGS.
inline TransferResult run_transfer(const Image& style, const Image& content, const nn::NetworkSpec& net,
                                   const TransferConfig& cfg) {
    cfg.validate();
    auto [s, c] = working_pair(style, content, cfg.working_width);
    if (cfg.method == Method::StyleControl) return {std::move(s), {}};
    if (cfg.method == Method::ContentControl) return {std::move(c), {}};
    if (cfg.method == Method::GAL) return gal_optimize(s, c, net, cfg);

    const auto taps = loss_taps();
    const auto weights = cfg.layer_weights.empty() ? default_layer_weights(cfg.method, net) : cfg.layer_weights;
    const auto loss = method_loss(cfg.method, cfg.style_weight, weights, style_targets(nn::forward(s, net, taps)),
                                  nn::forward(c, net, {nn::kContentTap}).at(nn::kContentTap));
    const Image init = noise_image(c.height, c.width, cfg.seed);

    TransferResult out;
    const auto v0 = nn::evaluate(init, net, loss);
    out.trace.push_back({0, v0.total, v0.content, v0.style});
    opt::LbfgsOptions o;
    o.iterations = cfg.iterations;
    o.memory = cfg.memory;
    const auto r = opt::lbfgs_minimize(image_objective(net, loss, c.height, c.width), to_vector(init), o,
                                       [&](int it, const opt::Vector&, const nn::LossTerms& v) {
                                           out.trace.push_back({it, v.total, v.content, v.style});
                                       });
    out.image = Image(c.height, c.width);
    from_vector(r.x, out.image);
    out.image = clamp01(std::move(out.image));
    return out;
}

}  // namespace stylecal::transfer
