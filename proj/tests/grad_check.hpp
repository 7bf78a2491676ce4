#pragma once

// Central finite-difference oracle used by the gradient tests. It only calls
// the forward function; analytic gradients come from the autograd path.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mdup/tensor.hpp"

namespace mdup::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
};

// Norm-wise relative error of one parameter tensor's gradient:
// ||a - n|| / max(||a||, ||n||, floor).
inline double rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                        double floor = 1e-6) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// `loss` rebuilds the scalar from the current parameter values.
template <typename T>
GradCheckResult grad_check(const std::vector<std::pair<std::string, Tensor<T>>>& params,
                           const std::function<Tensor<T>()>& loss, double step = 1e-3) {
    for (auto [name, p] : params) {
        p.zero_grad();
        p.set_requires_grad(true);
    }
    auto l = loss();
    backward(l);
    GradCheckResult result;
    for (auto [name, p] : params) {
        std::vector<double> analytic(p.numel(), 0.0), numeric(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T orig = p[i];
            double plus, minus;
            {
                NoGradGuard ng;
                p[i] = orig + static_cast<T>(step);
                plus = static_cast<double>(loss().item());
                p[i] = orig - static_cast<T>(step);
                minus = static_cast<double>(loss().item());
                p[i] = orig;
            }
            numeric[i] = (plus - minus) / (2 * step);
        }
        const double err = rel_error(analytic, numeric);
        if (err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst = name + " rel_err=" + std::to_string(err);
        }
        p.zero_grad();
    }
    return result;
}

// Fixed random projection so vector-valued outputs reduce to a scalar loss.
template <typename T>
std::vector<T> random_weights(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<T> w(n);
    for (auto& x : w) x = static_cast<T>(d(rng));
    return w;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double bound = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(d(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace mdup::testing
