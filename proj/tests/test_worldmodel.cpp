// End-to-end world model behaviour on a deliberately tiny geometry: window
// accounting for forecasts and rollouts, the evaluation table, the copy-paste
// baseline, checkpoint round trips, and the synthetic scene generator.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "dome/synthetic.hpp"
#include "dome/worldmodel.hpp"

using namespace dome;

namespace {

GridSpec tiny_spec() {
    GridSpec s;
    s.h = 8;
    s.w = 8;
    s.d = 4;
    s.resolution = 0.5;
    s.origin = {-2.0, -2.0, 0.0};
    s.num_classes = 6;
    return s;
}

VaeConfig tiny_vae() {
    VaeConfig v;
    v.c_emb = 2;
    v.latent_c = 2;
    v.downsample = 2;
    v.base_ch = 4;
    v.attn_heads = 1;
    return v;
}

DitConfig tiny_dit() {
    DitConfig d;
    d.n_f = 3;
    d.n_c = 1;
    d.n_h = 4;
    d.n_w = 4;
    d.latent_c = 2;
    d.patch = 1;
    d.hidden = 8;
    d.heads = 2;
    d.depth = 1;
    return d;
}

WorldModel<double> tiny_wm(uint64_t seed = 90) {
    Rng rng(seed);
    return WorldModel<double>(tiny_spec(), synthetic_class_table(), tiny_vae(), tiny_dit(),
                              make_schedule(8, 1e-4, 0.02, 4), rng);
}

OccupancyGrid tiny_grid(uint64_t seed) {
    OccupancyGrid g(tiny_spec(), 0);
    Rng rng(seed);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            g.set(i, j, 0, 1);
            if (rng.below(4) == 0) g.set(i, j, 1, static_cast<uint8_t>(2 + rng.below(4)));
        }
    return g;
}

std::vector<Pose> straight_poses(int n, double step = 0.5) {
    std::vector<Pose> p;
    for (int i = 0; i < n; ++i) p.push_back(Pose::from_xy_yaw(i * step, 0.0, 0.0));
    return p;
}

}  // namespace

TEST_CASE("world model construction checks latent geometry") {
    Rng rng(91);
    auto bad_dit = tiny_dit();
    bad_dit.n_h = 5;  // vae on 8x8 at downsample 2 yields 4x4
    REQUIRE_THROWS_AS(WorldModel<double>(tiny_spec(), synthetic_class_table(), tiny_vae(),
                                         bad_dit, make_schedule(8, 1e-4, 0.02, 4), rng),
                      std::invalid_argument);
}

TEST_CASE("forecast emits the free frames of one window") {
    auto wm = tiny_wm();
    auto poses = straight_poses(3);
    std::vector<OccupancyGrid> ctx = {tiny_grid(1)};

    Rng rng(92);
    auto out = wm.forecast(ctx, poses, rng);
    REQUIRE(out.size() == 2);  // n_f - n_c
    for (const auto& g : out) {
        REQUIRE(g.h() == 8);
        REQUIRE(g.w() == 8);
        REQUIRE(g.d() == 4);
    }

    Rng again(92);
    auto rerun = wm.forecast(ctx, poses, again);
    for (size_t i = 0; i < out.size(); ++i) REQUIRE(out[i].labels() == rerun[i].labels());

    REQUIRE_THROWS_AS(wm.forecast({}, poses, rng), std::invalid_argument);
    std::vector<OccupancyGrid> full = {tiny_grid(1), tiny_grid(2), tiny_grid(3)};
    REQUIRE_THROWS_AS(wm.forecast(full, poses, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(wm.forecast(ctx, straight_poses(2), rng), std::invalid_argument);
}

TEST_CASE("guidance-weighted sampling is deterministic and defaults off") {
    auto wm = tiny_wm();
    auto poses = straight_poses(3);
    std::vector<OccupancyGrid> ctx = {tiny_grid(5)};

    // Weight 1 must be the plain path: same stream, same output as the
    // default-argument call.
    Rng a(93), b(93);
    auto plain = wm.forecast(ctx, poses, a);
    auto w1 = wm.forecast(ctx, poses, b, 1.0);
    REQUIRE(plain.size() == w1.size());
    for (size_t i = 0; i < plain.size(); ++i) REQUIRE(plain[i].labels() == w1[i].labels());

    Rng c(93), d(93);
    auto g1 = wm.forecast(ctx, poses, c, 2.5);
    auto g2 = wm.forecast(ctx, poses, d, 2.5);
    REQUIRE(g1.size() == 2);
    for (size_t i = 0; i < g1.size(); ++i) REQUIRE(g1[i].labels() == g2[i].labels());
}

TEST_CASE("rollout chains windows on the last emitted frame") {
    auto wm = tiny_wm();
    std::vector<OccupancyGrid> ctx = {tiny_grid(4)};

    // n_f=3, n_c=1: window one emits 2 frames, each continuation emits 2.
    REQUIRE(wm.rollout_poses_required(1, 2) == 3);
    REQUIRE(wm.rollout_poses_required(1, 4) == 5);
    REQUIRE(wm.rollout_poses_required(1, 5) == 7);

    Rng rng(93);
    WorldModel<double>::RolloutTrace trace;
    auto out = wm.rollout(ctx, straight_poses(7), 5, rng, &trace);
    REQUIRE(out.size() == 5);
    REQUIRE(trace.window_offsets == std::vector<int>{0, 2, 4});
    REQUIRE(trace.conditioning.size() == 2);
    // Each continuation was conditioned on exactly the frame already emitted.
    REQUIRE(trace.conditioning[0].labels() == out[1].labels());
    REQUIRE(trace.conditioning[1].labels() == out[3].labels());

    Rng rng2(94);
    REQUIRE_THROWS_AS(wm.rollout(ctx, straight_poses(6), 5, rng2), std::invalid_argument);
    try {
        wm.rollout(ctx, straight_poses(6), 5, rng2);
    } catch (const std::invalid_argument& e) {
        REQUIRE(std::string(e.what()).find("need 7") != std::string::npos);
    }
    REQUIRE_THROWS_AS(wm.rollout(ctx, straight_poses(7), 0, rng2), std::invalid_argument);
}

TEST_CASE("reference window arithmetic spans 32 seconds") {
    // 11-frame windows with 4 context frames: 7 new frames, then 10 per
    // continuation; 64 frames at 2 Hz is a 32 s horizon.
    DitConfig ref;  // n_f = 11, n_c = 4
    int emitted = ref.n_f - ref.n_c;
    std::vector<int> offsets = {0};
    int needed = ref.n_f;
    while (emitted < 64) {
        int off = ref.n_c + emitted - 1;
        offsets.push_back(off);
        needed = off + ref.n_f;
        emitted += ref.n_f - 1;
    }
    REQUIRE(offsets == std::vector<int>{0, 10, 20, 30, 40, 50, 60});
    REQUIRE(emitted == 67);  // truncated to 64 by the caller
    REQUIRE(needed == 71);
    REQUIRE(horizon_frame_index(32.0, 2.0) == 64);
}

TEST_CASE("horizon_frame_index rounds to the nearest frame") {
    REQUIRE(horizon_frame_index(1.0, 2.0) == 2);
    REQUIRE(horizon_frame_index(2.0, 2.0) == 4);
    REQUIRE(horizon_frame_index(3.0, 2.0) == 6);
    REQUIRE(horizon_frame_index(0.5, 2.0) == 1);
    REQUIRE_THROWS_AS(horizon_frame_index(0.0, 2.0), std::invalid_argument);
    REQUIRE_THROWS_AS(horizon_frame_index(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("evaluate reduces per-horizon metrics over sequences") {
    auto table = synthetic_class_table();

    SECTION("perfect predictions score one everywhere") {
        std::vector<std::vector<OccupancyGrid>> seqs(2);
        for (int s = 0; s < 2; ++s)
            for (int f = 0; f < 6; ++f) seqs[s].push_back(tiny_grid(10 + s * 6 + f));
        auto tab = evaluate(seqs, seqs, table, 2.0);
        REQUIRE(tab.sequences == 2);
        REQUIRE(tab.miou_recon == Catch::Approx(1.0));
        REQUIRE(tab.iou_recon == Catch::Approx(1.0));
        REQUIRE(tab.miou_avg == Catch::Approx(1.0));
        REQUIRE(tab.iou_avg == Catch::Approx(1.0));
        for (double v : tab.miou_h) REQUIRE(v == Catch::Approx(1.0));
    }

    SECTION("results match a direct per-frame reduction") {
        std::vector<std::vector<OccupancyGrid>> pred(2), gt(2);
        for (int s = 0; s < 2; ++s)
            for (int f = 0; f < 6; ++f) {
                pred[s].push_back(tiny_grid(20 + s * 6 + f));
                gt[s].push_back(tiny_grid(40 + s * 6 + f));
            }
        auto tab = evaluate(pred, gt, table, 2.0);
        std::vector<int> frames = {1, 3, 5};  // 1s, 2s, 3s at 2 Hz, 0-based
        for (size_t h = 0; h < frames.size(); ++h) {
            double miou = 0, iou = 0;
            for (int s = 0; s < 2; ++s) {
                auto rep = compute_metrics(pred[s][frames[h]], gt[s][frames[h]], table);
                miou += rep.miou;
                iou += rep.iou_total;
            }
            REQUIRE(tab.miou_h[h] == Catch::Approx(miou / 2.0));
            REQUIRE(tab.iou_h[h] == Catch::Approx(iou / 2.0));
        }
        double avg = (tab.miou_h[0] + tab.miou_h[1] + tab.miou_h[2]) / 3.0;
        REQUIRE(tab.miou_avg == Catch::Approx(avg));
    }

    SECTION("short sequences cannot serve long horizons") {
        std::vector<std::vector<OccupancyGrid>> four(1);
        for (int f = 0; f < 4; ++f) four[0].push_back(tiny_grid(60 + f));
        REQUIRE_THROWS_AS(evaluate(four, four, table, 2.0), std::invalid_argument);
        REQUIRE_NOTHROW(evaluate(four, four, table, 2.0, {}, {1.0, 2.0}));
        REQUIRE_THROWS_AS(evaluate({}, {}, table, 2.0), std::invalid_argument);
        std::vector<std::vector<OccupancyGrid>> five(1);
        for (int f = 0; f < 5; ++f) five[0].push_back(tiny_grid(70 + f));
        REQUIRE_THROWS_AS(evaluate(five, four, table, 2.0), std::invalid_argument);
    }

    SECTION("recon_fn is scored against ground truth") {
        std::vector<std::vector<OccupancyGrid>> seqs(1);
        for (int f = 0; f < 2; ++f) seqs[0].push_back(tiny_grid(80 + f));
        auto blank = [&](const OccupancyGrid& g) {
            return OccupancyGrid(g.h(), g.w(), g.d(), g.resolution(), g.origin(),
                                 g.num_classes());
        };
        auto tab = evaluate(seqs, seqs, table, 2.0, blank, {1.0});
        REQUIRE(tab.miou_avg == Catch::Approx(1.0));  // predictions still perfect
        REQUIRE(tab.iou_recon < 1.0);                 // blank recon is not
    }
}

TEST_CASE("format_eval_table prints every cell") {
    auto table = synthetic_class_table();
    std::vector<std::vector<OccupancyGrid>> seqs(1);
    for (int f = 0; f < 6; ++f) seqs[0].push_back(tiny_grid(100 + f));
    auto tab = evaluate(seqs, seqs, table, 2.0);
    auto text = format_eval_table(tab);
    for (const char* cell : {"Recon", "1s", "2s", "3s", "Avg", "mIoU", "IoU"})
        REQUIRE(text.find(cell) != std::string::npos);
    // Two data rows, each with 1 + 3 + 1 numeric columns.
    REQUIRE(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("copy_paste_baseline repeats the final context frame") {
    auto g0 = tiny_grid(110), g1 = tiny_grid(111);
    auto base = copy_paste_baseline({g0, g1}, 4);
    REQUIRE(base.size() == 4);
    for (const auto& g : base) REQUIRE(g.labels() == g1.labels());
    REQUIRE_THROWS_AS(copy_paste_baseline({}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(copy_paste_baseline({g0}, 0), std::invalid_argument);
}

TEST_CASE("normalization round trips through encode and decode") {
    auto wm = tiny_wm();
    auto g = tiny_grid(112);

    // Default normalization is identity, so the frame round trip must equal
    // the VAE's own deterministic reconstruction.
    auto z = wm.encode_frame(g);
    REQUIRE(z.shape() == Shape{4, 4, 2});
    auto back = wm.decode_frame(z);
    auto direct = wm.vae().reconstruct(g);
    REQUIRE(back.labels() == direct.labels());

    REQUIRE_THROWS_AS(wm.set_normalization({0.0}, {1.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(wm.set_normalization({0.0, 0.0}, {1.0, 0.0}), std::invalid_argument);
    REQUIRE_NOTHROW(wm.set_normalization({0.1, -0.2}, {0.5, 2.0}));
}

TEST_CASE("checkpoints restore the full model state") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "dome_wm_ckpt_test";
    fs::create_directories(dir);
    std::string prefix = (dir / "model").string();

    auto wm = tiny_wm(120);
    wm.set_normalization({0.3, -0.1}, {1.5, 0.7});
    // Nudge a few weights so the saved state is not the init.
    Rng nr(121);
    wm.dit().params().for_each([&](const std::string&, Tensor<double>& p) {
        for (auto& v : p.values()) v += 0.01 * nr.normal();
    });
    wm.save(prefix);

    auto wm2 = tiny_wm(999);  // different init
    wm2.load(prefix);

    // Checkpoint payloads are f32, so the restored state must equal the
    // saved state rounded to float precision.
    auto quantized_match = [](const std::vector<double>& got, const std::vector<double>& want) {
        if (got.size() != want.size()) return false;
        for (size_t i = 0; i < got.size(); ++i)
            if (got[i] != static_cast<double>(static_cast<float>(want[i]))) return false;
        return true;
    };
    bool all_equal = true;
    wm.dit().params().for_each([&](const std::string& name, const Tensor<double>& p) {
        all_equal =
            all_equal && quantized_match(wm2.dit().params().get(name).values(), p.values());
    });
    wm.vae().params().for_each([&](const std::string& name, const Tensor<double>& p) {
        all_equal =
            all_equal && quantized_match(wm2.vae().params().get(name).values(), p.values());
    });
    REQUIRE(all_equal);
    REQUIRE(quantized_match(wm2.norm_params().get("norm/mean").values(),
                            wm.norm_params().get("norm/mean").values()));

    // Two models restored from the same file are identical, so with equal
    // seeds they must forecast identically.
    wm.load(prefix);
    std::vector<OccupancyGrid> ctx = {tiny_grid(5)};
    Rng a(122), b(122);
    auto f1 = wm.forecast(ctx, straight_poses(3), a);
    auto f2 = wm2.forecast(ctx, straight_poses(3), b);
    for (size_t i = 0; i < f1.size(); ++i) REQUIRE(f1[i].labels() == f2[i].labels());

    fs::remove_all(dir);
}

TEST_CASE("train_world_model learns from cached latents") {
    auto wm = tiny_wm(130);

    std::vector<OccSequence> scenes(2);
    for (int s = 0; s < 2; ++s) {
        for (int f = 0; f < 5; ++f) {
            scenes[s].frames.push_back(tiny_grid(140 + s * 5 + f));
            scenes[s].poses.push_back(Pose::from_xy_yaw(f * 0.5, 0.0, 0.0));
        }
    }

    WmTrainOptions opt;
    opt.steps = 6;
    opt.log_every = 3;
    Rng rng(131);
    auto stats = train_world_model(wm, scenes, opt, rng);
    REQUIRE(stats.steps_run == 6);
    REQUIRE_FALSE(stats.diverged);
    REQUIRE(stats.loss_log.size() == 2);
    for (double l : stats.loss_log) REQUIRE(std::isfinite(l));
    // Training computed per-channel normalization from the latent cache.
    for (double s : wm.norm_params().get("norm/std").values()) REQUIRE(s > 0.0);

    std::vector<OccSequence> short_scenes(1);
    short_scenes[0].frames = {tiny_grid(150), tiny_grid(151)};
    short_scenes[0].poses = {Pose(), Pose()};
    Rng rng2(132);
    REQUIRE_THROWS_AS(train_world_model(wm, short_scenes, opt, rng2), std::invalid_argument);
}

TEST_CASE("synthetic scenes are deterministic lattice worlds") {
    SyntheticOptions opt;
    opt.n_frames = 8;

    Rng a(160), b(160);
    auto s1 = gen_synthetic_scene(a.fork(0), opt);
    auto s2 = gen_synthetic_scene(b.fork(0), opt);
    REQUIRE(s1 == s2);
    REQUIRE(s1.frames.size() == 8);
    REQUIRE(s1.poses.size() == 8);

    // Straight track: constant whole-voxel speed along +x.
    auto spec = synthetic_grid_spec();
    double dx0 = s1.poses[1].translation().x() - s1.poses[0].translation().x();
    for (size_t t = 1; t < s1.poses.size(); ++t) {
        double dx = s1.poses[t].translation().x() - s1.poses[t - 1].translation().x();
        REQUIRE(dx == Catch::Approx(dx0));
        REQUIRE(s1.poses[t].translation().y() == Catch::Approx(0.0).margin(1e-12));
    }
    double voxels_per_frame = dx0 / spec.resolution;
    REQUIRE(voxels_per_frame == Catch::Approx(std::round(voxels_per_frame)));
    int speed = static_cast<int>(std::round(voxels_per_frame));
    REQUIRE(speed >= 1);
    REQUIRE(speed <= 3);

    // The fused static world reproduces every frame's static voxels: the
    // scene is a pure function of world coordinates.
    auto table = synthetic_class_table();
    auto cloud = aggregate_point_cloud(s1, table);
    for (size_t t : {size_t{0}, s1.frames.size() - 1}) {
        auto rebuilt = extract_occupancy(cloud, s1.poses[t], spec);
        const auto& truth = s1.frames[t];
        for (int i = 0; i < spec.h; ++i)
            for (int j = 0; j < spec.w; ++j)
                for (int k = 0; k < spec.d; ++k) {
                    uint8_t want = truth.at(i, j, k);
                    if (want == 3) continue;  // dynamic voxels are excluded
                    // A car may occlude a static voxel in one frame; the
                    // fused map can only add the static label back there.
                    uint8_t got = rebuilt.at(i, j, k);
                    if (want != 0) REQUIRE(got == want);
                }
    }

    // Some frame contains a car for this seed.
    bool any_car = false;
    for (const auto& f : s1.frames)
        for (uint8_t l : f.labels()) any_car |= l == 3;
    REQUIRE(any_car);

    SyntheticOptions bad = opt;
    bad.n_frames = 0;
    Rng c(161);
    REQUIRE_THROWS_AS(gen_synthetic_scene(c.fork(0), bad), std::invalid_argument);
    bad = opt;
    bad.speed_min = 0;
    REQUIRE_THROWS_AS(gen_synthetic_scene(c.fork(1), bad), std::invalid_argument);
}

TEST_CASE("turn tracks pivot ninety degrees at the crossroad") {
    SyntheticOptions opt;
    opt.n_frames = 30;
    opt.track = TrackKind::Turn;
    Rng rng(162);
    auto seq = gen_synthetic_scene(rng.fork(0), opt);
    REQUIRE(seq.poses.front().yaw() == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(seq.poses.back().yaw() == Catch::Approx(kPi / 2));
    // y advances only after the turn.
    REQUIRE(seq.poses.back().translation().y() > 0.0);
}
