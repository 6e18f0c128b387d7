#ifndef DOME_SCHEDULE_HPP
#define DOME_SCHEDULE_HPP

#include <cmath>
#include <vector>

#include "dome/ops.hpp"
#include "dome/rng.hpp"
#include "dome/tensor.hpp"

namespace dome {

// Noise schedule tables are always double; tensors cast on use so the
// schedule math itself never loses precision.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<int> inference_steps;  // strictly decreasing, last = 0

    void check_step(int i, const char* op) const {
        if (i < 0 || i >= T)
            throw std::out_of_range(str(op, ": step ", i, " outside [0,", T, ")"));
    }
};

// Linear beta ramp, cumulative-product alpha_bar, uniformly strided
// inference steps over [0, T) (first index T-1, last 0).
inline DiffusionSchedule make_schedule(int T, double beta_start, double beta_end,
                                       int n_inference) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument(
            str("make_schedule: need 0 < beta_start <= beta_end < 1, got ", beta_start, ", ",
                beta_end));
    if (n_inference < 1 || n_inference > T)
        throw std::invalid_argument(
            str("make_schedule: n_inference ", n_inference, " outside [1,", T, "]"));

    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double acc = 1.0;
    for (int i = 0; i < T; ++i) {
        double b = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
        s.beta[static_cast<size_t>(i)] = b;
        acc *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = acc;
    }
    if (n_inference == 1) {
        s.inference_steps = {T - 1};
    } else {
        s.inference_steps.resize(static_cast<size_t>(n_inference));
        for (int j = 0; j < n_inference; ++j) {
            double pos = static_cast<double>(j) * (T - 1) / static_cast<double>(n_inference - 1);
            s.inference_steps[static_cast<size_t>(n_inference - 1 - j)] =
                static_cast<int>(std::lround(pos));
        }
    }
    return s;
}

// x_i = sqrt(alpha_bar_i) * x0 + sqrt(1 - alpha_bar_i) * eps.
template <typename R>
Tensor<R> q_sample(Tensor<R> x0, int i, Tensor<R> eps, const DiffusionSchedule& s) {
    s.check_step(i, "q_sample");
    double ab = s.alpha_bar[static_cast<size_t>(i)];
    return add(scale(x0, static_cast<R>(std::sqrt(ab))),
               scale(eps, static_cast<R>(std::sqrt(1.0 - ab))));
}

// x0_hat = (x_i - sqrt(1 - alpha_bar_i) * eps_hat) / sqrt(alpha_bar_i).
template <typename R>
Tensor<R> predict_x0(Tensor<R> x_i, Tensor<R> eps_hat, int i, const DiffusionSchedule& s) {
    s.check_step(i, "predict_x0");
    double ab = s.alpha_bar[static_cast<size_t>(i)];
    if (ab < 1e-12)
        throw std::domain_error(str("predict_x0: alpha_bar ", ab, " below division guard"));
    double inv = 1.0 / std::sqrt(ab);
    return add(scale(x_i, static_cast<R>(inv)),
               scale(eps_hat, static_cast<R>(-std::sqrt(1.0 - ab) * inv)));
}

// Deterministic strided sampler (eta = 0). All frames start from standard
// normal noise; before every denoiser call the masked frames are overwritten
// with the context latents, and after the loop they are re-injected so the
// output at masked frames is bit-identical to z_ctx. The model is
// model(x, step, cond) -> eps_hat.
template <typename R, typename Model, typename Cond>
Tensor<R> sample_loop(Model&& model, Tensor<R> z_ctx, const std::vector<bool>& mask,
                      const Cond& cond, const DiffusionSchedule& s, Rng& rng) {
    if (static_cast<int>(mask.size()) != z_ctx.dim(0))
        throw std::invalid_argument("sample_loop: mask length must equal frame count");
    Tensor<R> x = Tensor<R>::randn(z_ctx.shape(), rng);
    size_t n = s.inference_steps.size();
    for (size_t k = 0; k < n; ++k) {
        int i = s.inference_steps[k];
        x = select_frames(z_ctx, x, mask);
        Tensor<R> eps_hat = model(x, i, cond);
        if (eps_hat.shape() != x.shape())
            throw std::invalid_argument(str("sample_loop: model returned ",
                                            shape_str(eps_hat.shape()), " for input ",
                                            shape_str(x.shape())));
        Tensor<R> x0_hat = predict_x0(x, eps_hat, i, s);
        if (k + 1 < n) {
            double ab_next = s.alpha_bar[static_cast<size_t>(s.inference_steps[k + 1])];
            x = add(scale(x0_hat, static_cast<R>(std::sqrt(ab_next))),
                    scale(eps_hat, static_cast<R>(std::sqrt(1.0 - ab_next))));
        } else {
            x = x0_hat;
        }
    }
    return select_frames(z_ctx, x, mask);
}

}  // namespace dome

#endif  // DOME_SCHEDULE_HPP
