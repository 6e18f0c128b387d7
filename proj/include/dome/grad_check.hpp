#ifndef DOME_GRAD_CHECK_HPP
#define DOME_GRAD_CHECK_HPP

#include <cmath>
#include <vector>

#include "dome/tensor.hpp"

namespace dome {

// Central-difference check of reverse-mode gradients. loss_fn must be a pure
// function of the given parameters returning a scalar tensor; it is re-run
// once per perturbed element, so keep the inputs small. Returns the maximum
// relative error over all parameter elements.
template <typename R, typename Fn>
double grad_check(std::vector<Tensor<R>> params, Fn loss_fn, double eps = 1e-6) {
    for (auto& p : params) p.set_requires_grad(true);
    for (auto& p : params) p.zero_grad();
    auto loss = loss_fn();
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw std::runtime_error("grad_check: loss is not finite");
    loss.backward();

    std::vector<std::vector<R>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        for (R g : p.grad())
            if (!std::isfinite(static_cast<double>(g)))
                throw std::runtime_error("grad_check: non-finite analytic gradient");
        analytic.push_back(p.grad());
    }

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            R saved = vals[i];
            vals[i] = saved + static_cast<R>(eps);
            double up = static_cast<double>(loss_fn().item());
            vals[i] = saved - static_cast<R>(eps);
            double dn = static_cast<double>(loss_fn().item());
            vals[i] = saved;
            double numeric = (up - dn) / (2.0 * eps);
            double a = static_cast<double>(analytic[pi][i]);
            double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace dome

#endif  // DOME_GRAD_CHECK_HPP
