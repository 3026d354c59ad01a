#pragma once

// Limited-memory BFGS with Armijo backtracking.

#include <stylecal/nncore.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>

namespace stylecal::opt {

using Vector = Eigen::VectorXd;

/// Returns the objective's terms at x; when grad is non-null, also d(total)/dx.
using Objective = std::function<nn::LossTerms(const Vector& x, Vector* grad)>;

struct LbfgsOptions {
    int iterations = 100;
    int memory = 10;
    double armijo = 1e-4;
    double shrink = 0.5;
    int max_backtracks = 30;
    int max_failures = 20;  // consecutive failed line searches before giving up
    double grad_tol = 0.0;  // stop once max |grad| <= grad_tol
};

struct LbfgsResult {
    Vector x;
    nn::LossTerms value;
    int iterations = 0;
    int evaluations = 0;
    bool stopped_on_failures = false;
};

/// Called once per iteration with the iterate kept so far.
using IterationCallback = std::function<void(int iter, const Vector& x, const nn::LossTerms& value)>;

/// Minimises from x0. The returned iterate is the best seen. A line search
/// fails when no step along the search direction satisfies the Armijo
/// condition after max_backtracks halvings; the curvature memory is then
/// cleared and the next iteration starts from steepest descent.
inline LbfgsResult lbfgs_minimize(const Objective& f, Vector x0, const LbfgsOptions& opt = {},
                                  const IterationCallback& on_iter = {}) {
    if (opt.memory < 1) throw std::invalid_argument("L-BFGS memory must be positive");
    LbfgsResult r;
    Vector g(x0.size());
    nn::LossTerms fx = f(x0, &g);
    ++r.evaluations;
    if (!std::isfinite(fx.total)) throw std::runtime_error("objective is not finite at the starting point");
    Vector x = std::move(x0);
    r.x = x;
    r.value = fx;

    std::deque<Vector> S, Y;
    std::deque<double> rho;
    int failures = 0;
    Vector gn(x.size());
    for (int it = 1; it <= opt.iterations; ++it) {
        if (opt.grad_tol > 0.0 && g.lpNorm<Eigen::Infinity>() <= opt.grad_tol) break;

        // Two-loop recursion for d = -H g.
        Vector q = g;
        std::vector<double> alpha(S.size());
        for (size_t i = S.size(); i-- > 0;) {
            alpha[i] = rho[i] * S[i].dot(q);
            q -= alpha[i] * Y[i];
        }
        double step0 = 1.0;
        if (!S.empty())
            q *= S.back().dot(Y.back()) / Y.back().squaredNorm();
        else
            step0 = 1.0 / std::max(1.0, g.lpNorm<Eigen::Infinity>());
        for (size_t i = 0; i < S.size(); ++i) {
            const double beta = rho[i] * Y[i].dot(q);
            q += (alpha[i] - beta) * S[i];
        }
        Vector d = -q;
        double slope = g.dot(d);
        if (!(slope < 0.0)) {
            S.clear();
            Y.clear();
            rho.clear();
            d = -g;
            slope = -g.squaredNorm();
            step0 = 1.0 / std::max(1.0, g.lpNorm<Eigen::Infinity>());
            if (!(slope < 0.0)) break;  // zero gradient
        }

        double t = step0;
        bool accepted = false;
        nn::LossTerms fn;
        Vector xn;
        for (int k = 0; k <= opt.max_backtracks; ++k, t *= opt.shrink) {
            xn = x + t * d;
            try {
                fn = f(xn, &gn);
            } catch (const std::runtime_error&) {
                fn.total = std::numeric_limits<double>::infinity();
            }
            ++r.evaluations;
            if (std::isfinite(fn.total) && fn.total <= fx.total + opt.armijo * t * slope) {
                accepted = true;
                break;
            }
        }
        r.iterations = it;
        if (!accepted) {
            S.clear();
            Y.clear();
            rho.clear();
            if (++failures >= opt.max_failures) {
                r.stopped_on_failures = true;
                if (on_iter) on_iter(it, r.x, r.value);
                break;
            }
            if (on_iter) on_iter(it, r.x, r.value);
            continue;
        }
        failures = 0;
        Vector s = xn - x, y = gn - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (static_cast<int>(S.size()) == opt.memory) {
                S.pop_front();
                Y.pop_front();
                rho.pop_front();
            }
            S.push_back(std::move(s));
            Y.push_back(std::move(y));
            rho.push_back(1.0 / sy);
        }
        x = std::move(xn);
        g = gn;
        fx = fn;
        if (fx.total <= r.value.total) {
            r.x = x;
            r.value = fx;
        }
        if (on_iter) on_iter(it, r.x, r.value);
    }
    return r;
}

}  // namespace stylecal::opt
