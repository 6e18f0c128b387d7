#ifndef DOME_DIT_HPP
#define DOME_DIT_HPP

#include <cmath>
#include <string>
#include <vector>

#include "dome/ops.hpp"
#include "dome/optim.hpp"
#include "dome/trajectory.hpp"

namespace dome {

struct DitConfig {
    int n_f = 11;   // frames per window
    int n_c = 4;    // context frames
    int n_h = 25;   // latent rows
    int n_w = 25;   // latent cols
    int latent_c = 16;
    int patch = 1;
    int hidden = 64;
    int heads = 4;
    int depth = 2;  // pairs of (spatial, temporal) blocks
    double p_inj = 0.1;
    int l_xy = 10;
    int l_yaw = 4;

    void validate() const {
        if (n_f < 2 || n_c < 1 || n_c >= n_f)
            throw std::invalid_argument(str("dit config: need 1 <= n_c < n_f, got n_c=", n_c,
                                            " n_f=", n_f));
        if (patch < 1 || n_h % patch != 0 || n_w % patch != 0)
            throw std::invalid_argument(str("dit config: latent ", n_h, "x", n_w,
                                            " not divisible by patch ", patch));
        if (depth < 1) throw std::invalid_argument("dit config: depth must be >= 1");
        if (p_inj < 0.0 || p_inj > 1.0)
            throw std::invalid_argument("dit config: p_inj must be in [0,1]");
        if (hidden % 4 != 0 || hidden % heads != 0)
            throw std::invalid_argument("dit config: hidden must divide by 4 and by heads");
    }

    int tokens_per_frame() const { return (n_h / patch) * (n_w / patch); }
    int patch_dim() const { return patch * patch * latent_c; }
    int traj_feature_dim() const { return n_f * (4 * l_xy + 2 * l_yaw); }
};

// Condition mask M_t = (t < n_c): true marks frozen context frames.
inline std::vector<bool> condition_mask(int n_f, int n_c) {
    if (n_c < 0 || n_c > n_f)
        throw std::invalid_argument(str("condition_mask: n_c=", n_c, " outside [0,", n_f, "]"));
    std::vector<bool> m(static_cast<size_t>(n_f));
    for (int t = 0; t < n_f; ++t) m[static_cast<size_t>(t)] = t < n_c;
    return m;
}

// z_hat = M * z_ctx + (1 - M) * z_noisy, per frame.
template <typename R>
Tensor<R> inject_context(Tensor<R> z_noisy, Tensor<R> z_ctx, const std::vector<bool>& mask) {
    return select_frames(z_ctx, z_noisy, mask);
}

// Spatio-temporal diffusion transformer predicting eps. Tokens live as
// [n_f, n_t, hidden]; spatial blocks attend over n_t with frames as the
// batch axis, temporal blocks attend over n_f with spatial positions as the
// batch axis. Every block is adaLN-zero conditioned on c (timestep +
// trajectory), so at init the residual branches are the identity.
template <typename R>
class Dit {
public:
    Dit(DitConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        int h = cfg_.hidden;
        add_linear("dit/patch_proj", cfg_.patch_dim(), h, rng, 0.02);
        add_linear("dit/time/l1", h, h, rng, 0.02);
        add_linear("dit/time/l2", h, h, rng, 0.02);
        add_linear("dit/traj/proj", cfg_.traj_feature_dim(), h, rng, 0.02);
        {
            Rng r = rng.fork(0x72616au);  // stable stream for the null embedding
            params_.add("dit/traj/null", Tensor<R>::randn({h}, r, R(0.02)));
        }
        for (int d = 0; d < cfg_.depth; ++d) {
            for (char kind : {'s', 't'}) {
                std::string base = block_name(d, kind);
                add_linear(base + "/adaln", h, 6 * h, rng, 0.0);  // adaLN-zero
                add_linear(base + "/qkv", h, 3 * h, rng, 0.02);
                add_linear(base + "/attn_out", h, h, rng, 0.02);
                add_linear(base + "/mlp1", h, 4 * h, rng, 0.02);
                add_linear(base + "/mlp2", 4 * h, h, rng, 0.02);
            }
        }
        add_linear("dit/final/adaln", h, 2 * h, rng, 0.0);
        add_linear("dit/final/head", h, cfg_.patch_dim(), rng, 0.0);
        build_positional();
    }

    const DitConfig& config() const { return cfg_; }
    ParameterStore<R>& params() { return params_; }
    const ParameterStore<R>& params() const { return params_; }

    // [n_f, n_h, n_w, C] -> [n_f, n_t, p*p*C], pure rearrangement.
    Tensor<R> patch_rearrange(Tensor<R> z) const {
        check_latent_shape(z);
        int p = cfg_.patch, gh = cfg_.n_h / p, gw = cfg_.n_w / p, c = cfg_.latent_c;
        if (p == 1) return reshape(z, {cfg_.n_f, cfg_.tokens_per_frame(), c});
        auto r = reshape(z, {cfg_.n_f, gh, p, gw, p, c});
        auto t = permute(r, {0, 1, 3, 2, 4, 5});
        return reshape(t, {cfg_.n_f, cfg_.tokens_per_frame(), p * p * c});
    }

    // Inverse of patch_rearrange.
    Tensor<R> unpatch_rearrange(Tensor<R> tokens) const {
        int p = cfg_.patch, gh = cfg_.n_h / p, gw = cfg_.n_w / p, c = cfg_.latent_c;
        Shape want = {cfg_.n_f, cfg_.tokens_per_frame(), p * p * c};
        if (tokens.shape() != want)
            throw std::invalid_argument(str("unpatch_rearrange: got ",
                                            shape_str(tokens.shape()), ", want ",
                                            shape_str(want)));
        if (p == 1) return reshape(tokens, {cfg_.n_f, cfg_.n_h, cfg_.n_w, c});
        auto r = reshape(tokens, {cfg_.n_f, gh, gw, p, p, c});
        auto t = permute(r, {0, 1, 3, 2, 4, 5});
        return reshape(t, {cfg_.n_f, cfg_.n_h, cfg_.n_w, c});
    }

    // Rearrange + linear projection to the hidden width.
    Tensor<R> patchify(Tensor<R> z) {
        return linear(patch_rearrange(z), params_.get("dit/patch_proj/w"),
                      params_.get("dit/patch_proj/b"));
    }

    // Adds the fixed spatial and temporal sin/cos embeddings.
    Tensor<R> add_positional(Tensor<R> tokens) const {
        if (tokens.shape() != pe_full_.shape())
            throw std::invalid_argument(str("add_positional: got ", shape_str(tokens.shape()),
                                            ", want ", shape_str(pe_full_.shape())));
        return add(tokens, pe_full_);
    }

    const Tensor<R>& pe_spatial() const { return pe_spatial_; }
    const Tensor<R>& pe_temporal() const { return pe_temporal_; }

    // Sinusoidal timestep embedding through a 2-layer MLP.
    Tensor<R> timestep_embedding(int step) {
        int h = cfg_.hidden;
        std::vector<R> raw(static_cast<size_t>(h));
        fill_sincos(raw.data(), h, static_cast<double>(step));
        auto t = Tensor<R>::from({h}, std::move(raw));
        auto h1 = gelu(linear(t, params_.get("dit/time/l1/w"), params_.get("dit/time/l1/b")));
        return linear(h1, params_.get("dit/time/l2/w"), params_.get("dit/time/l2/b"));
    }

    // gamma-encoded window flattened and linearly projected to hidden width.
    Tensor<R> embed_trajectory(const TrajectoryWindow& w) {
        if (w.size() != cfg_.n_f)
            throw std::invalid_argument(str("embed_trajectory: window has ", w.size(),
                                            " frames, config wants ", cfg_.n_f));
        auto feats = trajectory_features(w, cfg_.l_xy, cfg_.l_yaw);
        std::vector<R> cast(feats.size());
        for (size_t i = 0; i < feats.size(); ++i) cast[i] = static_cast<R>(feats[i]);
        auto f = Tensor<R>::from({cfg_.traj_feature_dim()}, std::move(cast));
        return linear(f, params_.get("dit/traj/proj/w"), params_.get("dit/traj/proj/b"));
    }

    Tensor<R> null_trajectory() { return params_.get("dit/traj/null"); }

    // c = timestep embedding + trajectory embedding.
    Tensor<R> build_condition(int step, Tensor<R> e_traj) {
        auto t = timestep_embedding(step);
        if (e_traj.shape() != t.shape())
            throw std::invalid_argument(str("build_condition: e_traj ",
                                            shape_str(e_traj.shape()), " vs hidden ",
                                            shape_str(t.shape())));
        return add(t, e_traj);
    }

    // Token-space forward: interleaved spatial/temporal blocks, modulated
    // final layer, linear head, unpatchify. Returns eps_hat with the
    // latent's shape.
    Tensor<R> forward(Tensor<R> tokens, Tensor<R> c) {
        Shape want = {cfg_.n_f, cfg_.tokens_per_frame(), cfg_.hidden};
        if (tokens.shape() != want)
            throw std::invalid_argument(str("dit forward: tokens ", shape_str(tokens.shape()),
                                            ", want ", shape_str(want)));
        auto x = tokens;
        int block_idx = 0;
        for (int d = 0; d < cfg_.depth; ++d) {
            x = block(x, c, block_name(d, 's'), false);
            check_finite(x, block_idx++);
            x = block(x, c, block_name(d, 't'), true);
            check_finite(x, block_idx++);
        }
        auto mods = linear(gelu(c), params_.get("dit/final/adaln/w"),
                           params_.get("dit/final/adaln/b"));
        auto shift = slice(mods, 0, 0, cfg_.hidden);
        auto scl = slice(mods, 0, cfg_.hidden, cfg_.hidden);
        auto h = modulate(layer_norm(x), shift, scl);
        auto out = linear(h, params_.get("dit/final/head/w"), params_.get("dit/final/head/b"));
        return unpatch_rearrange(out);
    }

    // Full eps prediction from a latent window.
    Tensor<R> predict_eps(Tensor<R> z, int step, Tensor<R> e_traj) {
        auto tokens = add_positional(patchify(z));
        return forward(tokens, build_condition(step, e_traj));
    }

private:
    static std::string block_name(int d, char kind) {
        return str("dit/block", d, kind);
    }

    void add_linear(const std::string& base, int in, int out, Rng& rng, double stddev) {
        if (stddev > 0) {
            params_.add(base + "/w", Tensor<R>::randn({in, out}, rng, static_cast<R>(stddev)));
        } else {
            params_.add(base + "/w", Tensor<R>::zeros({in, out}));
        }
        params_.add(base + "/b", Tensor<R>::zeros({out}));
    }

    void check_latent_shape(const Tensor<R>& z) const {
        Shape want = {cfg_.n_f, cfg_.n_h, cfg_.n_w, cfg_.latent_c};
        if (z.shape() != want)
            throw std::invalid_argument(str("dit: latent ", shape_str(z.shape()), ", want ",
                                            shape_str(want)));
    }

    static Tensor<R> modulate(Tensor<R> x, Tensor<R> shift, Tensor<R> scl) {
        return add(mul(x, add_scalar(scl, R(1))), shift);
    }

    // Pre-norm adaLN-zero transformer block. When temporal, attention runs
    // over frames at fixed spatial index (axes swapped around the core).
    Tensor<R> block(Tensor<R> x, Tensor<R> c, const std::string& base, bool temporal) {
        auto mods = linear(gelu(c), params_.get(base + "/adaln/w"),
                           params_.get(base + "/adaln/b"));
        int h = cfg_.hidden;
        auto shift_a = slice(mods, 0, 0, h);
        auto scale_a = slice(mods, 0, h, h);
        auto gate_a = slice(mods, 0, 2 * h, h);
        auto shift_m = slice(mods, 0, 3 * h, h);
        auto scale_m = slice(mods, 0, 4 * h, h);
        auto gate_m = slice(mods, 0, 5 * h, h);

        auto attend = [&](Tensor<R> inp) {
            auto qkv = linear(inp, params_.get(base + "/qkv/w"), params_.get(base + "/qkv/b"));
            auto q = slice(qkv, 2, 0, h);
            auto k = slice(qkv, 2, h, h);
            auto v = slice(qkv, 2, 2 * h, h);
            auto o = attention(q, k, v, cfg_.heads);
            return linear(o, params_.get(base + "/attn_out/w"),
                          params_.get(base + "/attn_out/b"));
        };

        auto m = modulate(layer_norm(x), shift_a, scale_a);
        Tensor<R> a;
        if (temporal) {
            a = permute(attend(permute(m, {1, 0, 2})), {1, 0, 2});
        } else {
            a = attend(m);
        }
        x = add(x, mul(a, gate_a));

        auto m2 = modulate(layer_norm(x), shift_m, scale_m);
        auto ff = linear(gelu(linear(m2, params_.get(base + "/mlp1/w"),
                                     params_.get(base + "/mlp1/b"))),
                         params_.get(base + "/mlp2/w"), params_.get(base + "/mlp2/b"));
        return add(x, mul(ff, gate_m));
    }

    static void check_finite(const Tensor<R>& x, int block_idx) {
        for (R v : x.values())
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error(
                    str("dit forward: non-finite activation in block ", block_idx));
    }

    // Interleaved sin/cos over `width` channels: ch 2k = sin(pos * w_k),
    // ch 2k+1 = cos(pos * w_k), w_k = 10000^(-2k/width).
    static void fill_sincos(R* dst, int width, double pos) {
        for (int k = 0; 2 * k < width; ++k) {
            double w = std::pow(10000.0, -2.0 * k / static_cast<double>(width));
            dst[2 * k] = static_cast<R>(std::sin(pos * w));
            dst[2 * k + 1] = static_cast<R>(std::cos(pos * w));
        }
    }

    void build_positional() {
        int h = cfg_.hidden, nt = cfg_.tokens_per_frame();
        int gw = cfg_.n_w / cfg_.patch;
        int half = h / 2;

        pe_spatial_ = Tensor<R>::zeros({nt, h});
        for (int tok = 0; tok < nt; ++tok) {
            R* row = pe_spatial_.data() + static_cast<size_t>(tok) * h;
            fill_sincos(row, half, static_cast<double>(tok / gw));
            fill_sincos(row + half, half, static_cast<double>(tok % gw));
        }
        pe_temporal_ = Tensor<R>::zeros({cfg_.n_f, h});
        for (int f = 0; f < cfg_.n_f; ++f)
            fill_sincos(pe_temporal_.data() + static_cast<size_t>(f) * h, h,
                        static_cast<double>(f));

        pe_full_ = Tensor<R>::zeros({cfg_.n_f, nt, h});
        for (int f = 0; f < cfg_.n_f; ++f)
            for (int tok = 0; tok < nt; ++tok) {
                R* dst = pe_full_.data() + (static_cast<size_t>(f) * nt + tok) * h;
                const R* sp = pe_spatial_.data() + static_cast<size_t>(tok) * h;
                const R* tp = pe_temporal_.data() + static_cast<size_t>(f) * h;
                for (int i = 0; i < h; ++i) dst[i] = sp[i] + tp[i];
            }
    }

    DitConfig cfg_;
    ParameterStore<R> params_;
    Tensor<R> pe_spatial_, pe_temporal_, pe_full_;
};

}  // namespace dome

#endif  // DOME_DIT_HPP
