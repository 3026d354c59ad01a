#pragma once

// Desk-scale inputs: periodic textures as styles, polygon scenes with known
// boundaries as contents.

#include <stylecal/coherence.hpp>
#include <stylecal/image.hpp>

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace stylecal::fixtures {

/// Three coloured gratings with random orientation, frequency and phase,
/// sharpened so the texture has edges as well as smooth shading.
inline Image texture_image(int height, int width, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x7e57u);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    struct Grating {
        double ky, kx, phase, sharp;
        std::array<double, 3> color;
    };
    std::array<double, 3> base;
    for (double& b : base) b = 0.1 + 0.3 * u(rng);
    std::vector<Grating> gs(3);
    for (auto& g : gs) {
        const double theta = std::numbers::pi * u(rng);
        const double freq = 0.15 + 0.75 * u(rng);  // radians per pixel
        g.ky = freq * std::sin(theta);
        g.kx = freq * std::cos(theta);
        g.phase = 2.0 * std::numbers::pi * u(rng);
        g.sharp = 1.0 + 3.0 * u(rng);
        for (double& c : g.color) c = 0.5 * u(rng);
    }
    Image img(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = base[c];
                for (const auto& g : gs) v += g.color[c] * std::pow(0.5 + 0.5 * std::sin(g.ky * y + g.kx * x + g.phase), g.sharp);
                img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
    return img;
}

struct DeskSet {
    std::vector<std::string> style_ids, content_ids;
    std::vector<Image> styles;
    std::vector<coherence::Scene> contents;
};

/// Styles "style00".. and contents "content00".., all size x size.
inline DeskSet desk_set(int n_styles = 5, int n_contents = 10, int size = 64) {
    DeskSet d;
    for (int i = 0; i < n_styles; ++i) {
        d.style_ids.push_back("style" + std::string(i < 10 ? "0" : "") + std::to_string(i));
        d.styles.push_back(texture_image(size, size, 1000 + i));
    }
    for (int i = 0; i < n_contents; ++i) {
        d.content_ids.push_back("content" + std::string(i < 10 ? "0" : "") + std::to_string(i));
        d.contents.push_back(coherence::synthetic_scene(size, size, 2000 + i));
    }
    return d;
}

}  // namespace stylecal::fixtures
