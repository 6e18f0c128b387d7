#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dome/dit.hpp"
#include "dome/occupancy.hpp"
#include "dome/schedule.hpp"
#include "dome/vae.hpp"

namespace dome {

// VAE + diffusion transformer + schedule, plus the per-channel latent
// normalization the transformer was trained under. Geometry is fixed at
// construction so checkpoints load without a sample grid.
template <typename R>
class WorldModel {
public:
    WorldModel(const GridSpec& spec, const SemanticClassTable& table, const VaeConfig& vcfg,
               const DitConfig& dcfg, DiffusionSchedule sched, Rng& rng)
        : spec_(spec), vae_(vcfg, table, rng), dit_(dcfg, rng), sched_(std::move(sched)) {
        vae_.bind_geometry(spec.h, spec.w, spec.d);
        if (dcfg.n_h != vae_.n_h() || dcfg.n_w != vae_.n_w() || dcfg.latent_c != vcfg.latent_c)
            throw std::invalid_argument(
                str("world model: dit latent ", dcfg.n_h, "x", dcfg.n_w, "x", dcfg.latent_c,
                    " does not match vae output ", vae_.n_h(), "x", vae_.n_w(), "x",
                    vcfg.latent_c));
        norm_.add("norm/mean", Tensor<R>::zeros({dcfg.latent_c}));
        norm_.add("norm/std", Tensor<R>::filled({dcfg.latent_c}, R(1)));
    }

    const GridSpec& grid_spec() const { return spec_; }
    Vae<R>& vae() { return vae_; }
    Dit<R>& dit() { return dit_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    ParameterStore<R>& norm_params() { return norm_; }

    void set_normalization(const std::vector<double>& mean, const std::vector<double>& stdev) {
        const int c = dit_.config().latent_c;
        if (static_cast<int>(mean.size()) != c || static_cast<int>(stdev.size()) != c)
            throw std::invalid_argument("set_normalization: size must equal latent channels");
        for (double s : stdev)
            if (!(s > 0)) throw std::invalid_argument("set_normalization: std must be positive");
        auto& m = norm_.get("norm/mean").values();
        auto& s = norm_.get("norm/std").values();
        for (int i = 0; i < c; ++i) {
            m[static_cast<size_t>(i)] = static_cast<R>(mean[static_cast<size_t>(i)]);
            s[static_cast<size_t>(i)] = static_cast<R>(stdev[static_cast<size_t>(i)]);
        }
    }

    // Grid -> normalized posterior mean, graph detached.
    Tensor<R> encode_frame(const OccupancyGrid& grid) {
        auto lat = vae_.encode(grid);
        auto z = Tensor<R>::from(lat.mu.shape(), lat.mu.values());
        const auto& m = norm_.get("norm/mean").values();
        const auto& s = norm_.get("norm/std").values();
        const int c = dit_.config().latent_c;
        auto& v = z.values();
        for (size_t i = 0; i < v.size(); ++i) {
            const size_t ch = i % static_cast<size_t>(c);
            v[i] = (v[i] - m[ch]) / s[ch];
        }
        return z;
    }

    OccupancyGrid decode_frame(const Tensor<R>& z_norm) {
        auto z = Tensor<R>::from(z_norm.shape(), z_norm.values());
        const auto& m = norm_.get("norm/mean").values();
        const auto& s = norm_.get("norm/std").values();
        const int c = dit_.config().latent_c;
        auto& v = z.values();
        for (size_t i = 0; i < v.size(); ++i) {
            const size_t ch = i % static_cast<size_t>(c);
            v[i] = v[i] * s[ch] + m[ch];
        }
        OccupancyGrid like(spec_);
        return vae_.logits_to_grid(vae_.decode(z).detach(), like);
    }

    // One denoising pass over a window: context frames are frozen to their
    // encoded latents, the rest are sampled. Returns the n_f - n_c predicted
    // grids. poses must cover the full window (n_f poses). guidance > 1
    // weights the conditional prediction against the dropout branch
    // (re-noised context, null trajectory); weight 1 is plain sampling and
    // draws nothing extra.
    std::vector<OccupancyGrid> forecast(const std::vector<OccupancyGrid>& context,
                                        const std::vector<Pose>& poses, Rng& rng,
                                        double guidance = 1.0) {
        const DitConfig& cfg = dit_.config();
        const int n_f = cfg.n_f;
        const int n_c = static_cast<int>(context.size());
        if (n_c < 1 || n_c >= n_f)
            throw std::invalid_argument(str("forecast: ", n_c, " context frames, need 1..",
                                            n_f - 1));
        if (static_cast<int>(poses.size()) < n_f)
            throw std::invalid_argument(str("forecast: ", poses.size(), " poses, need ", n_f));

        Tensor<R> z_ctx = Tensor<R>::zeros({n_f, cfg.n_h, cfg.n_w, cfg.latent_c});
        const size_t stride = z_ctx.numel() / static_cast<size_t>(n_f);
        for (int t = 0; t < n_c; ++t) {
            auto z = encode_frame(context[static_cast<size_t>(t)]);
            std::copy(z.values().begin(), z.values().end(),
                      z_ctx.values().begin() + static_cast<long>(stride * static_cast<size_t>(t)));
        }
        const auto mask = condition_mask(n_f, n_c);
        std::vector<Pose> window(poses.begin(), poses.begin() + n_f);
        Tensor<R> e_traj = dit_.embed_trajectory(relative_motion(window)).detach();

        // The dropout branch never saw clean context frames in training, so
        // its input carries the context forward-noised to the current step.
        // The noise block is drawn only when used, keeping weight-1 sampling
        // byte-identical to the unguided path.
        Tensor<R> ctx_noise, e_null;
        if (guidance != 1.0) {
            ctx_noise = Tensor<R>::randn(z_ctx.shape(), rng);
            e_null = dit_.null_trajectory().detach();
        }
        auto model = [&](Tensor<R> x, int step, const Tensor<R>& cond) {
            Tensor<R> eps_c = dit_.predict_eps(x, step, cond).detach();
            if (guidance == 1.0) return eps_c;
            Tensor<R> x_u = Tensor<R>::from(x.shape(), x.values());
            const double ab = sched_.alpha_bar[static_cast<size_t>(step)];
            const R sa = static_cast<R>(std::sqrt(ab));
            const R sb = static_cast<R>(std::sqrt(1.0 - ab));
            for (int t = 0; t < n_f; ++t) {
                if (!mask[static_cast<size_t>(t)]) continue;
                const size_t ofs = stride * static_cast<size_t>(t);
                for (size_t j = 0; j < stride; ++j)
                    x_u.values()[ofs + j] = sa * z_ctx.values()[ofs + j] +
                                            sb * ctx_noise.values()[ofs + j];
            }
            Tensor<R> eps_n = dit_.predict_eps(x_u, step, e_null).detach();
            auto& g = eps_n.values();
            const auto& ec = eps_c.values();
            const R w = static_cast<R>(guidance);
            for (size_t j = 0; j < g.size(); ++j) g[j] += w * (ec[j] - g[j]);
            return eps_n;
        };
        Tensor<R> z = sample_loop<R>(model, z_ctx, mask, e_traj, sched_, rng);

        std::vector<OccupancyGrid> out;
        out.reserve(static_cast<size_t>(n_f - n_c));
        for (int t = n_c; t < n_f; ++t) {
            Tensor<R> frame = Tensor<R>::zeros({cfg.n_h, cfg.n_w, cfg.latent_c});
            std::copy(z.values().begin() + static_cast<long>(stride * static_cast<size_t>(t)),
                      z.values().begin() + static_cast<long>(stride * static_cast<size_t>(t + 1)),
                      frame.values().begin());
            out.push_back(decode_frame(frame));
        }
        return out;
    }

    // Pose count a rollout of total_frames consumes, including the final
    // (possibly truncated) window which still runs full width.
    int rollout_poses_required(int n_c, int total_frames) const {
        const int n_f = dit_.config().n_f;
        int emitted = n_f - n_c;
        int needed = n_f;
        while (emitted < total_frames) {
            const int offset = n_c + emitted - 1;
            needed = offset + n_f;
            emitted += n_f - 1;
        }
        return needed;
    }

    struct RolloutTrace {
        std::vector<int> window_offsets;          // pose offset per window
        std::vector<OccupancyGrid> conditioning;  // context grid of each continuation window
    };

    // Autoregressive long-horizon generation. The first window uses the
    // given context; every later window is conditioned on exactly the last
    // emitted grid (reused as-is, so it matches bit for bit). The trajectory
    // is consumed by cumulative frame offset.
    std::vector<OccupancyGrid> rollout(const std::vector<OccupancyGrid>& context,
                                       const std::vector<Pose>& poses, int total_frames,
                                       Rng& rng, RolloutTrace* trace = nullptr,
                                       double guidance = 1.0) {
        const DitConfig& cfg = dit_.config();
        const int n_f = cfg.n_f;
        const int n_c = static_cast<int>(context.size());
        if (total_frames < 1) throw std::invalid_argument("rollout: total_frames must be >= 1");
        if (n_c < 1 || n_c >= n_f)
            throw std::invalid_argument(str("rollout: ", n_c, " context frames, need 1..",
                                            n_f - 1));
        const int needed = rollout_poses_required(n_c, total_frames);
        if (static_cast<int>(poses.size()) < needed)
            throw std::invalid_argument(str("rollout: trajectory has ", poses.size(),
                                            " poses, need ", needed, " for ", total_frames,
                                            " frames"));

        std::vector<OccupancyGrid> out;
        std::vector<Pose> window(poses.begin(), poses.begin() + n_f);
        if (trace) trace->window_offsets.push_back(0);
        for (const auto& g : forecast(context, window, rng, guidance)) out.push_back(g);

        while (static_cast<int>(out.size()) < total_frames) {
            const int offset = n_c + static_cast<int>(out.size()) - 1;
            window.assign(poses.begin() + offset, poses.begin() + offset + n_f);
            std::vector<OccupancyGrid> ctx = {out.back()};
            if (trace) {
                trace->window_offsets.push_back(offset);
                trace->conditioning.push_back(out.back());
            }
            for (auto& g : forecast(ctx, window, rng, guidance)) {
                if (static_cast<int>(out.size()) >= total_frames) break;
                out.push_back(std::move(g));
            }
        }
        return out;
    }

    void save(const std::string& prefix) const {
        vae_.params().save(prefix + ".vae.ckpt");
        dit_.params().save(prefix + ".dit.ckpt");
        norm_.save(prefix + ".norm.ckpt");
    }

    void load(const std::string& prefix) {
        vae_.params().load(prefix + ".vae.ckpt");
        dit_.params().load(prefix + ".dit.ckpt");
        norm_.load(prefix + ".norm.ckpt");
    }

private:
    GridSpec spec_;
    Vae<R> vae_;
    Dit<R> dit_;
    DiffusionSchedule sched_;
    ParameterStore<R> norm_;
};

// 1-based index of the frame a horizon refers to: 2 Hz, 3 s -> frame 6.
inline int horizon_frame_index(double seconds, double frame_rate) {
    if (!(seconds > 0) || !(frame_rate > 0))
        throw std::invalid_argument("horizon_frame_index: need positive horizon and rate");
    return static_cast<int>(std::lround(seconds * frame_rate));
}

struct EvalTable {
    std::vector<double> horizons_s;
    std::vector<double> miou_h, iou_h;  // one entry per horizon
    double miou_recon = 0.0, iou_recon = 0.0;
    double miou_avg = 0.0, iou_avg = 0.0;
    int sequences = 0;
};

// Horizon table over aligned predicted/ground-truth sequences. Metrics come
// from compute_metrics per frame; the Recon column scores recon_fn's round
// trip of the ground truth at the same horizons (identity when absent).
inline EvalTable evaluate(const std::vector<std::vector<OccupancyGrid>>& pred,
                          const std::vector<std::vector<OccupancyGrid>>& gt,
                          const SemanticClassTable& table, double frame_rate,
                          const std::function<OccupancyGrid(const OccupancyGrid&)>& recon_fn = {},
                          const std::vector<double>& horizons = {1.0, 2.0, 3.0}) {
    if (pred.size() != gt.size() || pred.empty())
        throw std::invalid_argument("evaluate: need matching non-empty pred/gt sequence lists");
    if (horizons.empty()) throw std::invalid_argument("evaluate: need at least one horizon");

    EvalTable tab;
    tab.horizons_s = horizons;
    tab.sequences = static_cast<int>(pred.size());
    tab.miou_h.assign(horizons.size(), 0.0);
    tab.iou_h.assign(horizons.size(), 0.0);

    for (size_t s = 0; s < pred.size(); ++s) {
        if (pred[s].size() != gt[s].size())
            throw std::invalid_argument(str("evaluate: sequence ", s, " has ", pred[s].size(),
                                            " predictions for ", gt[s].size(), " references"));
        for (size_t h = 0; h < horizons.size(); ++h) {
            const int idx = horizon_frame_index(horizons[h], frame_rate) - 1;
            if (idx < 0 || idx >= static_cast<int>(pred[s].size()))
                throw std::invalid_argument(str("evaluate: horizon ", horizons[h],
                                                "s needs frame ", idx + 1, ", sequence has ",
                                                pred[s].size()));
            auto rep = compute_metrics(pred[s][static_cast<size_t>(idx)],
                                       gt[s][static_cast<size_t>(idx)], table);
            tab.miou_h[h] += rep.miou;
            tab.iou_h[h] += rep.iou_total;

            const auto& ref = gt[s][static_cast<size_t>(idx)];
            auto rec = recon_fn ? recon_fn(ref) : ref;
            auto rrep = compute_metrics(rec, ref, table);
            tab.miou_recon += rrep.miou;
            tab.iou_recon += rrep.iou_total;
        }
    }
    const double cells = static_cast<double>(pred.size()) * static_cast<double>(horizons.size());
    tab.miou_recon /= cells;
    tab.iou_recon /= cells;
    for (size_t h = 0; h < horizons.size(); ++h) {
        tab.miou_h[h] /= static_cast<double>(pred.size());
        tab.iou_h[h] /= static_cast<double>(pred.size());
        tab.miou_avg += tab.miou_h[h];
        tab.iou_avg += tab.iou_h[h];
    }
    tab.miou_avg /= static_cast<double>(horizons.size());
    tab.iou_avg /= static_cast<double>(horizons.size());
    return tab;
}

inline std::string format_eval_table(const EvalTable& t) {
    std::string s = "        Recon";
    for (double h : t.horizons_s) s += str("  ", h, "s");
    s += "    Avg\n";
    auto row = [&](const char* name, double recon, const std::vector<double>& hs, double avg) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%-6s %6.4f", name, recon);
        s += buf;
        for (double v : hs) {
            std::snprintf(buf, sizeof buf, " %6.4f", v);
            s += buf;
        }
        std::snprintf(buf, sizeof buf, " %6.4f\n", avg);
        s += buf;
    };
    row("mIoU", t.miou_recon, t.miou_h, t.miou_avg);
    row("IoU", t.iou_recon, t.iou_h, t.iou_avg);
    return s;
}

// Repeats the last context frame: the no-dynamics baseline.
inline std::vector<OccupancyGrid> copy_paste_baseline(const std::vector<OccupancyGrid>& context,
                                                      int horizon_frames) {
    if (context.empty()) throw std::invalid_argument("copy_paste_baseline: empty context");
    if (horizon_frames < 1)
        throw std::invalid_argument("copy_paste_baseline: horizon must be >= 1");
    return std::vector<OccupancyGrid>(static_cast<size_t>(horizon_frames), context.back());
}

struct WmTrainOptions {
    int steps = 4000;
    double lr = 1e-3;
    double min_lr = 1e-5;
    double weight_decay = 1e-4;
    double ema_decay = 0.999;
    int log_every = 200;  // also the divergence-snapshot cadence
    double wall_clock_budget_s = -1.0;
    bool verbose = false;
};

struct WmTrainStats {
    std::vector<double> loss_log;  // mean loss per log interval
    bool diverged = false;
    int steps_run = 0;
};

// Trains the transformer against cached, normalized VAE latents (the VAE is
// frozen). Context injection and the trajectory embedding share one
// Bernoulli(p_inj) dropout draw per step.
template <typename R>
WmTrainStats train_world_model(WorldModel<R>& wm, const std::vector<OccSequence>& scenes,
                               const WmTrainOptions& opt, Rng& rng) {
    const DitConfig& cfg = wm.dit().config();
    const int n_f = cfg.n_f;

    std::vector<size_t> usable;
    for (size_t s = 0; s < scenes.size(); ++s)
        if (static_cast<int>(scenes[s].frames.size()) >= n_f) usable.push_back(s);
    if (usable.empty())
        throw std::invalid_argument(str("train_world_model: no scene has >= ", n_f, " frames"));

    // Latent cache: every frame through the frozen encoder once. Channel
    // stats come from the raw latents, then the cache is normalized.
    const int c = cfg.latent_c;
    std::vector<std::vector<std::vector<R>>> cache(scenes.size());
    std::vector<double> mean(static_cast<size_t>(c), 0.0), var(static_cast<size_t>(c), 0.0);
    size_t n_per_ch = 0;
    for (size_t s : usable) {
        cache[s].reserve(scenes[s].frames.size());
        for (const auto& g : scenes[s].frames) {
            auto lat = wm.vae().encode(g);
            cache[s].push_back(lat.mu.values());
            const auto& v = cache[s].back();
            for (size_t i = 0; i < v.size(); ++i)
                mean[i % static_cast<size_t>(c)] += static_cast<double>(v[i]);
            n_per_ch += v.size() / static_cast<size_t>(c);
        }
    }
    for (auto& m : mean) m /= static_cast<double>(n_per_ch);
    for (size_t s : usable)
        for (const auto& v : cache[s])
            for (size_t i = 0; i < v.size(); ++i) {
                const double d = static_cast<double>(v[i]) - mean[i % static_cast<size_t>(c)];
                var[i % static_cast<size_t>(c)] += d * d;
            }
    std::vector<double> stdev(static_cast<size_t>(c));
    for (int k = 0; k < c; ++k)
        stdev[static_cast<size_t>(k)] =
            std::max(std::sqrt(var[static_cast<size_t>(k)] / static_cast<double>(n_per_ch)), 1e-6);
    wm.set_normalization(mean, stdev);
    for (size_t s : usable)
        for (auto& v : cache[s])
            for (size_t i = 0; i < v.size(); ++i) {
                const size_t ch = i % static_cast<size_t>(c);
                v[i] = static_cast<R>((static_cast<double>(v[i]) - mean[ch]) / stdev[ch]);
            }

    auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    ParameterStore<R>& params = wm.dit().params();
    AdamWConfig adam;
    adam.weight_decay = opt.weight_decay;

    std::vector<std::vector<R>> snapshot;
    auto take_snapshot = [&] {
        snapshot.clear();
        params.for_each([&](const std::string&, const Tensor<R>& p) {
            snapshot.push_back(p.values());
        });
    };
    auto restore_snapshot = [&] {
        size_t i = 0;
        params.for_each([&](const std::string&, Tensor<R>& p) { p.values() = snapshot[i++]; });
    };
    take_snapshot();

    WmTrainStats stats;
    const Shape zshape = {n_f, cfg.n_h, cfg.n_w, c};
    const size_t stride = static_cast<size_t>(cfg.n_h) * cfg.n_w * static_cast<size_t>(c);
    double acc = 0.0;
    int acc_n = 0;
    for (int step = 0; step < opt.steps; ++step) {
        const size_t s = usable[rng.below(usable.size())];
        const int span = static_cast<int>(scenes[s].frames.size()) - n_f;
        const int start = span > 0 ? static_cast<int>(rng.below(static_cast<uint64_t>(span + 1)))
                                   : 0;

        Tensor<R> z0 = Tensor<R>::zeros(zshape);
        for (int t = 0; t < n_f; ++t)
            std::copy(cache[s][static_cast<size_t>(start + t)].begin(),
                      cache[s][static_cast<size_t>(start + t)].end(),
                      z0.values().begin() + static_cast<long>(stride * static_cast<size_t>(t)));

        const int i = static_cast<int>(rng.below(static_cast<uint64_t>(wm.schedule().T)));
        Tensor<R> eps = Tensor<R>::randn(zshape, rng);
        Tensor<R> z_i = q_sample(z0, i, eps, wm.schedule());

        // One draw gates both context injection and trajectory conditioning.
        const bool drop = rng.bernoulli(cfg.p_inj);
        const auto mask = drop ? std::vector<bool>(static_cast<size_t>(n_f), false)
                               : condition_mask(n_f, cfg.n_c);
        Tensor<R> z_in = drop ? z_i : inject_context(z_i, z0, mask);
        Tensor<R> e_traj;
        if (drop) {
            e_traj = wm.dit().null_trajectory();
        } else {
            std::vector<Pose> window(scenes[s].poses.begin() + start,
                                     scenes[s].poses.begin() + start + n_f);
            e_traj = wm.dit().embed_trajectory(relative_motion(window));
        }

        double loss_val;
        try {
            Tensor<R> eps_hat = wm.dit().predict_eps(z_in, i, e_traj);
            Tensor<R> loss = masked_frame_mse(eps_hat, eps, mask);
            loss_val = static_cast<double>(loss.item());
            if (!std::isfinite(loss_val)) throw std::runtime_error("non-finite loss");
            params.zero_grad();
            loss.backward();
        } catch (const std::runtime_error&) {
            restore_snapshot();
            stats.diverged = true;
            return stats;
        }
        adam.lr = cosine_lr(step, opt.steps, opt.lr, opt.min_lr);
        params.adamw_step(adam);
        params.ema_update(opt.ema_decay);
        acc += loss_val;
        ++acc_n;
        ++stats.steps_run;

        if ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps) {
            stats.loss_log.push_back(acc / std::max(acc_n, 1));
            if (opt.verbose)
                std::fprintf(stderr, "[wm] step %d loss %.5f lr %.2e (%.1fs)\n", step + 1,
                             stats.loss_log.back(), adam.lr, elapsed());
            acc = 0.0;
            acc_n = 0;
            take_snapshot();
            if (opt.wall_clock_budget_s > 0 && elapsed() > opt.wall_clock_budget_s) return stats;
        }
    }
    return stats;
}

}  // namespace dome
