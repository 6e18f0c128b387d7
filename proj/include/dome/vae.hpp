#ifndef DOME_VAE_HPP
#define DOME_VAE_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "dome/occupancy.hpp"
#include "dome/ops.hpp"
#include "dome/optim.hpp"

namespace dome {

struct VaeConfig {
    int c_emb = 8;
    int latent_c = 16;
    int downsample = 8;  // per-side spatial factor H/n_h; power of two
    int base_ch = 32;    // first encoder stage width; doubles per stage
    int attn_heads = 4;
    double beta = 1e-6;         // KL weight
    double lambda_lovasz = 1.0; // Lovasz weight
    double logvar_min = -30.0;
    double logvar_max = 20.0;

    int stages() const {
        int s = 0, f = downsample;
        while (f > 1) {
            if (f % 2 != 0)
                throw std::invalid_argument(
                    str("vae config: downsample ", downsample, " must be a power of two"));
            f /= 2;
            ++s;
        }
        if (s < 1) throw std::invalid_argument("vae config: downsample must be >= 2");
        return s;
    }

    void validate_grid(int h, int w, int d) const {
        int s = stages();
        if (h % downsample != 0 || w % downsample != 0)
            throw std::invalid_argument(str("vae: grid ", h, "x", w, " not divisible by ",
                                            downsample));
        if (d % (1 << s) != 0 || d >> s < 1)
            throw std::invalid_argument(str("vae: depth ", d, " not divisible by 2^", s));
    }
};

// elements(x) / elements(z) under the element-counting convention.
inline double compression_ratio(int h, int w, int d, const VaeConfig& cfg) {
    double x_elems = static_cast<double>(h) * w * d;
    double z_elems = static_cast<double>(h / cfg.downsample) * (w / cfg.downsample) *
                     cfg.latent_c;
    return x_elems / z_elems;
}

template <typename R>
struct LatentFrame {
    Tensor<R> mu;
    Tensor<R> logvar;  // clamped
    Tensor<R> sigma;   // exp(logvar / 2), positive by construction
};

template <typename R>
struct VaeLoss {
    Tensor<R> total, ce, kl, lovasz;
};

// z = mu + sigma * eps. eps carries no gradient.
template <typename R>
Tensor<R> reparameterize(Tensor<R> mu, Tensor<R> sigma, Tensor<R> eps) {
    if (mu.shape() != sigma.shape() || mu.shape() != eps.shape())
        throw std::invalid_argument(str("reparameterize: shapes ", shape_str(mu.shape()), " ",
                                        shape_str(sigma.shape()), " ", shape_str(eps.shape())));
    return add(mu, mul(sigma, eps.detach()));
}

// Lovasz-softmax over classes present in the labels. probs rows must sum
// to 1 within 1e-6.
template <typename R>
Tensor<R> lovasz_softmax(Tensor<R> probs, const std::vector<int>& labels) {
    if (probs.rank() != 2)
        throw std::invalid_argument("lovasz_softmax: probs must be [V, K]");
    int v_count = probs.dim(0), k_count = probs.dim(1);
    if (static_cast<int>(labels.size()) != v_count)
        throw std::invalid_argument(str("lovasz_softmax: ", labels.size(), " labels for ",
                                        v_count, " rows"));
    for (int v = 0; v < v_count; ++v) {
        double row = 0.0;
        for (int k = 0; k < k_count; ++k)
            row += static_cast<double>(probs.values()[static_cast<size_t>(v) * k_count + k]);
        if (std::abs(row - 1.0) > 1e-6)
            throw std::invalid_argument(str("lovasz_softmax: row ", v, " sums to ", row));
    }
    for (int l : labels)
        if (l < 0 || l >= k_count)
            throw std::invalid_argument(str("lovasz_softmax: label ", l, " out of range"));

    std::vector<int> present;
    {
        std::vector<bool> seen(static_cast<size_t>(k_count), false);
        for (int l : labels) seen[static_cast<size_t>(l)] = true;
        for (int k = 0; k < k_count; ++k)
            if (seen[static_cast<size_t>(k)]) present.push_back(k);
    }

    // Per present class: sorted voxel order and the Lovasz-extension
    // gradient of the Jaccard loss in that order. The sort permutation is
    // piecewise constant in probs, so d(loss)/d(p_v(c)) = -+g[rank(v)].
    struct ClassPlan {
        int cls;
        std::vector<int> order;   // voxel ids, errors descending
        std::vector<double> g;    // Lovasz gradient in sorted order
    };
    auto plans = std::make_shared<std::vector<ClassPlan>>();
    double total = 0.0;
    for (int c : present) {
        std::vector<double> err(static_cast<size_t>(v_count));
        std::vector<char> fg(static_cast<size_t>(v_count));
        double gts = 0.0;
        for (int v = 0; v < v_count; ++v) {
            bool is_fg = labels[static_cast<size_t>(v)] == c;
            fg[static_cast<size_t>(v)] = is_fg ? 1 : 0;
            gts += is_fg ? 1.0 : 0.0;
            double p = static_cast<double>(probs.values()[static_cast<size_t>(v) * k_count + c]);
            err[static_cast<size_t>(v)] = is_fg ? 1.0 - p : p;
        }
        ClassPlan plan;
        plan.cls = c;
        plan.order.resize(static_cast<size_t>(v_count));
        std::iota(plan.order.begin(), plan.order.end(), 0);
        std::stable_sort(plan.order.begin(), plan.order.end(), [&](int a, int b) {
            return err[static_cast<size_t>(a)] > err[static_cast<size_t>(b)];
        });
        plan.g.resize(static_cast<size_t>(v_count));
        double cum_fg = 0.0, cum_bg = 0.0, prev_jac = 0.0;
        for (int r = 0; r < v_count; ++r) {
            int v = plan.order[static_cast<size_t>(r)];
            cum_fg += fg[static_cast<size_t>(v)];
            cum_bg += 1.0 - fg[static_cast<size_t>(v)];
            double inter = gts - cum_fg;
            double uni = gts + cum_bg;
            double jac = 1.0 - inter / uni;  // uni >= 1 here since r+1 cells counted
            plan.g[static_cast<size_t>(r)] = jac - prev_jac;
            prev_jac = jac;
            total += err[static_cast<size_t>(v)] * plan.g[static_cast<size_t>(r)];
        }
        plans->push_back(std::move(plan));
    }
    double denom = present.empty() ? 1.0 : static_cast<double>(present.size());

    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    auto out = Tensor<R>::make_op(
        "lovasz_softmax", {1}, {probs},
        [probs, plans, labels_copy, k_count, denom](typename Tensor<R>::Node& node) mutable {
            if (!probs.requires_grad()) return;
            R g0 = node.grad[0] / static_cast<R>(denom);
            auto& gp = probs.grad();
            for (const auto& plan : *plans) {
                for (size_t r = 0; r < plan.order.size(); ++r) {
                    int v = plan.order[r];
                    bool is_fg = (*labels_copy)[static_cast<size_t>(v)] == plan.cls;
                    R de_dp = is_fg ? R(-1) : R(1);
                    gp[static_cast<size_t>(v) * k_count + plan.cls] +=
                        g0 * de_dp * static_cast<R>(plan.g[r]);
                }
            }
        });
    out.values()[0] = static_cast<R>(total / denom);
    return out;
}

// Continuous occupancy VAE: class-embedding BEV flatten, strided conv2d
// encoder with one attention block at the bottleneck, gaussian latent,
// 3D-deconvolution decoder, logits via dot products with the class
// embedding.
template <typename R>
class Vae {
public:
    Vae(VaeConfig cfg, const SemanticClassTable& table, Rng& rng)
        : cfg_(cfg), table_(table) {
        table_.validate();
        int s = cfg_.stages();
        params_.add("vae/cls_emb",
                    Tensor<R>::randn({table_.num_classes, cfg_.c_emb}, rng, R(0.1)));
        enc_ch_.resize(static_cast<size_t>(s));
        for (int i = 0; i < s; ++i) enc_ch_[static_cast<size_t>(i)] = cfg_.base_ch << i;
        rng_init_ = rng.fork(0x76616531u);
        initialized_ = false;
    }

    const VaeConfig& config() const { return cfg_; }
    const SemanticClassTable& table() const { return table_; }
    ParameterStore<R>& params() { return params_; }
    const ParameterStore<R>& params() const { return params_; }

    // Weight shapes depend on the grid geometry (BEV channel count D*C_emb,
    // coarse depth D/2^s), so layers materialize on the first grid seen;
    // later grids must match.
    void bind_geometry(int h, int w, int d) {
        cfg_.validate_grid(h, w, d);
        if (initialized_) {
            if (h != h_ || w != w_ || d != d_)
                throw std::invalid_argument(str("vae: bound to ", h_, "x", w_, "x", d_,
                                                ", got ", h, "x", w, "x", d));
            return;
        }
        h_ = h; w_ = w; d_ = d;
        int s = cfg_.stages();
        int in_ch = d * cfg_.c_emb;
        Rng rng = rng_init_;
        for (int i = 0; i < s; ++i) {
            int out_ch = enc_ch_[static_cast<size_t>(i)];
            add_conv(str("vae/enc", i), 3, in_ch, out_ch, rng);
            in_ch = out_ch;
        }
        int ch = enc_ch_.back();
        add_linear("vae/attn/qkv", ch, 3 * ch, rng);
        add_linear("vae/attn/out", ch, ch, rng);
        add_conv("vae/enc_out", 1, ch, 2 * cfg_.latent_c, rng);

        int d0 = d >> s;
        dec_ch_.assign(static_cast<size_t>(s) + 1, 0);
        for (int i = 0; i < s; ++i) dec_ch_[static_cast<size_t>(i)] = cfg_.base_ch << (s - 1 - i);
        dec_ch_[static_cast<size_t>(s)] = std::max(4, cfg_.base_ch / 2);
        add_conv("vae/dec_in", 1, cfg_.latent_c, d0 * dec_ch_[0], rng);
        for (int i = 0; i < s; ++i) {
            // conv_transpose3d weight [k,k,k,Cin,Cout] maps channels
            // Cout -> Cin; stage input has dec_ch_[i], output dec_ch_[i+1].
            int cin = dec_ch_[static_cast<size_t>(i) + 1], cout = dec_ch_[static_cast<size_t>(i)];
            double stddev = std::sqrt(1.0 / (8.0 * cout));
            params_.add(str("vae/dec", i, "/w"),
                        Tensor<R>::randn({4, 4, 4, cin, cout}, rng, static_cast<R>(stddev)));
            params_.add(str("vae/dec", i, "/b"), Tensor<R>::zeros({cin}));
        }
        add_conv3d_1x1("vae/dec_out", dec_ch_.back(), cfg_.c_emb, rng);
        initialized_ = true;
    }

    int n_h() const { return h_ / cfg_.downsample; }
    int n_w() const { return w_ / cfg_.downsample; }

    LatentFrame<R> encode(const OccupancyGrid& grid) {
        if (grid.num_classes() != table_.num_classes)
            throw std::invalid_argument("vae encode: class table mismatch");
        bind_geometry(grid.h(), grid.w(), grid.d());
        auto x = flatten_bev(grid, params_.get("vae/cls_emb"));
        int s = cfg_.stages();
        for (int i = 0; i < s; ++i)
            x = gelu(conv2d(x, params_.get(str("vae/enc", i, "/w")),
                            params_.get(str("vae/enc", i, "/b")), 2, 1));
        // Bottleneck attention with residual.
        int ch = enc_ch_.back();
        auto t = reshape(x, {1, n_h() * n_w(), ch});
        auto qkv = linear(layer_norm(t), params_.get("vae/attn/qkv/w"),
                          params_.get("vae/attn/qkv/b"));
        auto att = attention(slice(qkv, 2, 0, ch), slice(qkv, 2, ch, ch),
                             slice(qkv, 2, 2 * ch, ch), cfg_.attn_heads);
        t = add(t, linear(att, params_.get("vae/attn/out/w"), params_.get("vae/attn/out/b")));
        x = reshape(t, {n_h(), n_w(), ch});

        auto out = conv2d(x, params_.get("vae/enc_out/w"), params_.get("vae/enc_out/b"), 1, 0);
        LatentFrame<R> lf;
        lf.mu = slice(out, 2, 0, cfg_.latent_c);
        lf.logvar = clamp(slice(out, 2, cfg_.latent_c, cfg_.latent_c),
                          static_cast<R>(cfg_.logvar_min), static_cast<R>(cfg_.logvar_max));
        lf.sigma = exp(scale(lf.logvar, R(0.5)));
        return lf;
    }

    // Latent -> per-voxel class logits [H, W, D, num_classes].
    Tensor<R> decode(Tensor<R> z) {
        if (!initialized_)
            throw std::invalid_argument("vae decode: geometry not bound (encode or bind first)");
        Shape want = {n_h(), n_w(), cfg_.latent_c};
        if (z.shape() != want)
            throw std::invalid_argument(str("vae decode: z ", shape_str(z.shape()), ", want ",
                                            shape_str(want)));
        int s = cfg_.stages();
        int d0 = d_ >> s;
        auto x2 = conv2d(z, params_.get("vae/dec_in/w"), params_.get("vae/dec_in/b"), 1, 0);
        auto x = reshape(x2, {n_h(), n_w(), d0, dec_ch_[0]});
        for (int i = 0; i < s; ++i)
            x = gelu(conv_transpose3d(x, params_.get(str("vae/dec", i, "/w")),
                                      params_.get(str("vae/dec", i, "/b")), 2, 1));
        auto f = conv3d(x, params_.get("vae/dec_out/w"), params_.get("vae/dec_out/b"), 1, 0);
        auto f2 = reshape(f, {h_ * w_ * d_, cfg_.c_emb});
        auto logits = matmul(f2, transpose2d(params_.get("vae/cls_emb")));
        return reshape(logits, {h_, w_, d_, table_.num_classes});
    }

    // Argmax with ties to the lowest class id.
    OccupancyGrid logits_to_grid(const Tensor<R>& logits, const OccupancyGrid& like) const {
        Shape want = {like.h(), like.w(), like.d(), table_.num_classes};
        if (logits.shape() != want)
            throw std::invalid_argument(str("logits_to_grid: ", shape_str(logits.shape()),
                                            ", want ", shape_str(want)));
        OccupancyGrid out(like.h(), like.w(), like.d(), like.resolution(), like.origin(),
                          table_.num_classes);
        int nc = table_.num_classes;
        size_t voxels = like.voxel_count();
        for (size_t v = 0; v < voxels; ++v) {
            const R* row = logits.data() + v * static_cast<size_t>(nc);
            int best = 0;
            for (int c = 1; c < nc; ++c)
                if (row[c] > row[best]) best = c;  // strict: ties keep lowest id
            out.set(static_cast<int>(v / (static_cast<size_t>(like.w()) * like.d())),
                    static_cast<int>((v / like.d()) % static_cast<size_t>(like.w())),
                    static_cast<int>(v % static_cast<size_t>(like.d())),
                    static_cast<uint8_t>(best));
        }
        return out;
    }

    // total = ce + beta * kl + lambda * lovasz. Throws on a non-finite
    // component, naming it.
    VaeLoss<R> loss(const OccupancyGrid& grid, Tensor<R> logits, const LatentFrame<R>& lat) {
        std::vector<int> labels(grid.labels().begin(), grid.labels().end());
        auto flat = reshape(logits, {static_cast<int>(grid.voxel_count()), table_.num_classes});
        VaeLoss<R> l;
        l.ce = cross_entropy(flat, labels);
        auto mu2 = mul(lat.mu, lat.mu);
        auto sig2 = mul(lat.sigma, lat.sigma);
        l.kl = scale(mean(add_scalar(sub(sub(lat.logvar, mu2), sig2), R(1))), R(-0.5));
        l.lovasz = lovasz_softmax(softmax(flat), labels);
        l.total = add(add(l.ce, scale(l.kl, static_cast<R>(cfg_.beta))),
                      scale(l.lovasz, static_cast<R>(cfg_.lambda_lovasz)));
        const char* names[] = {"ce", "kl", "lovasz", "total"};
        const Tensor<R>* parts[] = {&l.ce, &l.kl, &l.lovasz, &l.total};
        for (int i = 0; i < 4; ++i)
            if (!std::isfinite(static_cast<double>(parts[i]->item())))
                throw std::runtime_error(str("vae loss: ", names[i], " is not finite"));
        return l;
    }

    // Deterministic reconstruction (z = mu) for evaluation.
    OccupancyGrid reconstruct(const OccupancyGrid& grid) {
        auto lat = encode(grid);
        auto logits = decode(lat.mu);
        return logits_to_grid(logits, grid);
    }

private:
    void add_conv(const std::string& base, int k, int in, int out, Rng& rng) {
        double stddev = std::sqrt(1.0 / (static_cast<double>(k) * k * in));
        params_.add(base + "/w", Tensor<R>::randn({k, k, in, out}, rng, static_cast<R>(stddev)));
        params_.add(base + "/b", Tensor<R>::zeros({out}));
    }

    void add_conv3d_1x1(const std::string& base, int in, int out, Rng& rng) {
        double stddev = std::sqrt(1.0 / in);
        params_.add(base + "/w",
                    Tensor<R>::randn({1, 1, 1, in, out}, rng, static_cast<R>(stddev)));
        params_.add(base + "/b", Tensor<R>::zeros({out}));
    }

    void add_linear(const std::string& base, int in, int out, Rng& rng) {
        double stddev = std::sqrt(1.0 / in);
        params_.add(base + "/w", Tensor<R>::randn({in, out}, rng, static_cast<R>(stddev)));
        params_.add(base + "/b", Tensor<R>::zeros({out}));
    }

    VaeConfig cfg_;
    SemanticClassTable table_;
    ParameterStore<R> params_;
    std::vector<int> enc_ch_, dec_ch_;
    Rng rng_init_{0};
    bool initialized_ = false;
    int h_ = 0, w_ = 0, d_ = 0;
};

struct TrainStats {
    std::vector<double> epoch_loss;
    bool diverged = false;
    bool reached_target = false;
    double final_miou = -1.0;
    int epochs_run = 0;
};

struct VaeTrainOptions {
    int epochs = 200;
    double lr = 1e-3;
    double min_lr = 1e-5;
    double weight_decay = 1e-4;
    double ema_decay = 0.999;
    int eval_every = 10;          // epochs between train-set mIoU probes
    double target_miou = -1.0;    // early stop when reached (< 0 disables)
    double target_iou = -1.0;
    double wall_clock_budget_s = -1.0;
    bool verbose = false;
};

// Single-writer training loop over whole grids (batch = 1 grid). On a
// non-finite loss the last epoch-boundary snapshot is restored and training
// aborts with diverged set.
template <typename R>
TrainStats train_vae(Vae<R>& vae, const std::vector<OccupancyGrid>& dataset,
                     const VaeTrainOptions& opt, Rng& rng) {
    if (dataset.empty()) throw std::invalid_argument("train_vae: empty dataset");
    vae.bind_geometry(dataset[0].h(), dataset[0].w(), dataset[0].d());
    auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    TrainStats stats;
    AdamWConfig adam;
    adam.weight_decay = opt.weight_decay;
    int64_t total_steps = static_cast<int64_t>(opt.epochs) * static_cast<int64_t>(dataset.size());
    int64_t step = 0;

    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    // Divergence snapshot via in-memory EMA-less copy of parameter values.
    std::vector<std::vector<R>> snapshot;
    auto take_snapshot = [&] {
        snapshot.clear();
        vae.params().for_each([&](const std::string&, const Tensor<R>& p) {
            snapshot.push_back(p.values());
        });
    };
    auto restore_snapshot = [&] {
        size_t i = 0;
        vae.params().for_each([&](const std::string&, Tensor<R>& p) {
            p.values() = snapshot[i++];
        });
    };
    take_snapshot();

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0.0;
        for (size_t i : order) {
            const auto& grid = dataset[i];
            auto lat = vae.encode(grid);
            auto eps = Tensor<R>::randn(lat.mu.shape(), rng);
            auto z = reparameterize(lat.mu, lat.sigma, eps);
            Tensor<R> logits = vae.decode(z);
            double loss_val;
            try {
                auto l = vae.loss(grid, logits, lat);
                loss_val = static_cast<double>(l.total.item());
                vae.params().zero_grad();
                l.total.backward();
            } catch (const std::runtime_error&) {
                restore_snapshot();
                stats.diverged = true;
                stats.epochs_run = epoch;
                return stats;
            }
            adam.lr = cosine_lr(step, total_steps, opt.lr, opt.min_lr);
            vae.params().adamw_step(adam);
            vae.params().ema_update(opt.ema_decay);
            epoch_loss += loss_val;
            ++step;
        }
        stats.epoch_loss.push_back(epoch_loss / static_cast<double>(dataset.size()));
        stats.epochs_run = epoch + 1;
        take_snapshot();
        if (opt.verbose)
            std::fprintf(stderr, "[vae] epoch %d loss %.5f (%.1fs)\n", epoch + 1,
                         stats.epoch_loss.back(), elapsed());

        bool probe = (opt.target_miou >= 0.0 && (epoch + 1) % opt.eval_every == 0) ||
                     epoch + 1 == opt.epochs;
        if (probe && opt.target_miou >= 0.0) {
            double miou_acc = 0.0, iou_acc = 0.0;
            for (const auto& g : dataset) {
                auto rep = compute_metrics(vae.reconstruct(g), g, vae.table());
                miou_acc += rep.miou;
                iou_acc += rep.iou_total;
            }
            stats.final_miou = miou_acc / static_cast<double>(dataset.size());
            double iou = iou_acc / static_cast<double>(dataset.size());
            if (opt.verbose)
                std::fprintf(stderr, "[vae] epoch %d train mIoU %.4f IoU %.4f\n", epoch + 1,
                             stats.final_miou, iou);
            if (stats.final_miou >= opt.target_miou &&
                (opt.target_iou < 0.0 || iou >= opt.target_iou)) {
                stats.reached_target = true;
                return stats;
            }
        }
        if (opt.wall_clock_budget_s > 0.0 && elapsed() > opt.wall_clock_budget_s) return stats;
    }
    return stats;
}

}  // namespace dome

#endif  // DOME_VAE_HPP
