// Command line front end: scene generation, training, forecasting, rollout,
// trajectory resampling, evaluation and rendering over the library's file
// formats (.occs sequences, .occg grids, .ckpt parameter archives).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dome/config.hpp"
#include "dome/render.hpp"
#include "dome/resample.hpp"
#include "dome/synthetic.hpp"
#include "dome/worldmodel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using Real = float;

namespace {

struct CommonArgs {
    std::string config;
    std::string preset;
    std::string out = ".";
    std::string checkpoint;
    uint64_t seed = 0;
    bool seed_set = false;
    double guidance = 1.0;
    bool guidance_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config, "JSON config overriding preset defaults");
    cmd->add_option("--preset", a.preset, "preset name (synthetic, reference)");
    cmd->add_option("--out", a.out, "output directory");
    cmd->add_option("--checkpoint", a.checkpoint, "checkpoint path or prefix");
    cmd->add_option("--seed", a.seed, "RNG seed")->each([&](const std::string&) {
        a.seed_set = true;
    });
    cmd->add_option("--guidance", a.guidance, "conditional weight at sampling (1 = unguided)")
        ->each([&](const std::string&) { a.guidance_set = true; });
}

dome::RunConfig resolve_config(const CommonArgs& a) {
    auto cfg = dome::load_config(a.preset, a.config);
    if (a.seed_set) cfg.seed = a.seed;
    if (a.guidance_set) cfg.guidance = a.guidance;
    return cfg;
}

std::vector<std::string> list_sequences(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".occs")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .occs files in " + dir);
    return files;
}

std::vector<dome::OccSequence> load_sequences(const std::string& dir) {
    std::vector<dome::OccSequence> seqs;
    for (const auto& f : list_sequences(dir)) seqs.push_back(dome::read_sequence(f));
    return seqs;
}

dome::WorldModel<Real> make_world_model(const dome::RunConfig& cfg, dome::Rng& rng) {
    return dome::WorldModel<Real>(cfg.grid, cfg.table, cfg.vae, cfg.dit, cfg.schedule.make(),
                                  rng);
}

json eval_table_json(const dome::EvalTable& t) {
    json h;
    for (size_t i = 0; i < t.horizons_s.size(); ++i) {
        const std::string key = dome::str(t.horizons_s[i], "s");
        h["miou"][key] = t.miou_h[i];
        h["iou"][key] = t.iou_h[i];
    }
    h["miou"]["recon"] = t.miou_recon;
    h["miou"]["avg"] = t.miou_avg;
    h["iou"]["recon"] = t.iou_recon;
    h["iou"]["avg"] = t.iou_avg;
    h["sequences"] = t.sequences;
    return h;
}

int cmd_synth(const CommonArgs& a) {
    auto cfg = resolve_config(a);
    fs::create_directories(a.out);
    // Same per-scene streams as gen_synthetic, so the output is identical
    // for any worker count (DOME_THREADS).
    dome::Rng root(cfg.seed);
    std::vector<dome::OccSequence> scenes(static_cast<size_t>(cfg.n_scenes));
    dome::parallel_for(cfg.n_scenes, [&](int s) {
        scenes[static_cast<size_t>(s)] =
            dome::gen_synthetic_scene(root.fork(static_cast<uint64_t>(s)), cfg.synth, cfg.grid);
    });
    for (size_t s = 0; s < scenes.size(); ++s) {
        char name[64];
        std::snprintf(name, sizeof name, "scene_%04zu.occs", s);
        dome::write_sequence(scenes[s], (fs::path(a.out) / name).string());
    }
    std::cout << "wrote " << scenes.size() << " scenes (" << cfg.synth.n_frames
              << " frames each) to " << a.out << "\n";
    return 0;
}

int cmd_train_vae(const CommonArgs& a, const std::string& data, int max_grids) {
    auto cfg = resolve_config(a);
    fs::create_directories(a.out);
    std::vector<dome::OccupancyGrid> grids;
    for (auto& seq : load_sequences(data))
        for (auto& g : seq.frames) {
            if (max_grids > 0 && static_cast<int>(grids.size()) >= max_grids) break;
            grids.push_back(std::move(g));
        }
    std::cout << "training VAE on " << grids.size() << " grids\n";
    dome::Rng rng(cfg.seed);
    dome::Vae<Real> vae(cfg.vae, cfg.table, rng);
    dome::Rng train_rng = rng.fork(1);
    auto stats = dome::train_vae(vae, grids, cfg.train_vae, train_rng);
    const std::string path = (fs::path(a.out) / "vae.ckpt").string();
    vae.params().save(path);
    std::cout << "epochs " << stats.epochs_run << " final loss "
              << (stats.epoch_loss.empty() ? 0.0 : stats.epoch_loss.back()) << " diverged "
              << stats.diverged << "\nsaved " << path << "\n";
    return stats.diverged ? 1 : 0;
}

int cmd_train_wm(const CommonArgs& a, const std::string& data) {
    auto cfg = resolve_config(a);
    fs::create_directories(a.out);
    auto scenes = load_sequences(data);
    dome::Rng rng(cfg.seed);
    auto wm = make_world_model(cfg, rng);
    if (!a.checkpoint.empty()) wm.vae().params().load(a.checkpoint);
    std::cout << "training world model on " << scenes.size() << " scenes\n";
    dome::Rng train_rng = rng.fork(2);
    auto stats = dome::train_world_model(wm, scenes, cfg.train_wm, train_rng);
    const std::string prefix = (fs::path(a.out) / "wm").string();
    wm.save(prefix);
    std::cout << "steps " << stats.steps_run << " final loss "
              << (stats.loss_log.empty() ? 0.0 : stats.loss_log.back()) << " diverged "
              << stats.diverged << "\nsaved " << prefix << ".{vae,dit,norm}.ckpt\n";
    return stats.diverged ? 1 : 0;
}

int cmd_forecast(const CommonArgs& a, const std::string& scene_path, bool render) {
    auto cfg = resolve_config(a);
    fs::create_directories(a.out);
    auto seq = dome::read_sequence(scene_path);
    dome::Rng rng(cfg.seed);
    auto wm = make_world_model(cfg, rng);
    if (a.checkpoint.empty()) throw std::runtime_error("forecast needs --checkpoint <prefix>");
    wm.load(a.checkpoint);

    const int n_c = cfg.dit.n_c;
    if (static_cast<int>(seq.frames.size()) < n_c)
        throw std::runtime_error(dome::str("scene has ", seq.frames.size(), " frames, need ",
                                           n_c, " for context"));
    std::vector<dome::OccupancyGrid> ctx(seq.frames.begin(), seq.frames.begin() + n_c);
    dome::Rng srng = rng.fork(3);
    auto pred = wm.forecast(ctx, seq.poses, srng, cfg.guidance);

    auto pal = dome::default_palette(cfg.table);
    for (size_t t = 0; t < pred.size(); ++t) {
        char name[64];
        std::snprintf(name, sizeof name, "pred_%03zu.occg", t);
        dome::write_grid(pred[t], (fs::path(a.out) / name).string());
        if (render) {
            std::snprintf(name, sizeof name, "pred_%03zu.png", t);
            dome::write_png((fs::path(a.out) / name).string(),
                            dome::render_bev(pred[t], cfg.table, pal));
        }
    }
    std::cout << "wrote " << pred.size() << " predicted frames to " << a.out << "\n";

    // Score against ground truth when the scene is long enough, at whichever
    // of the standard horizons fit inside the predicted window.
    if (seq.frames.size() >= static_cast<size_t>(n_c) + pred.size()) {
        std::vector<double> horizons;
        for (double h : {1.0, 2.0, 3.0})
            if (dome::horizon_frame_index(h, cfg.frame_rate) <= static_cast<int>(pred.size()))
                horizons.push_back(h);
        if (!horizons.empty()) {
            std::vector<std::vector<dome::OccupancyGrid>> pp = {pred};
            std::vector<std::vector<dome::OccupancyGrid>> gg = {
                {seq.frames.begin() + n_c,
                 seq.frames.begin() + n_c + static_cast<long>(pred.size())}};
            auto tab = dome::evaluate(pp, gg, cfg.table, cfg.frame_rate,
                                      [&](const dome::OccupancyGrid& g) {
                                          return wm.vae().reconstruct(g);
                                      },
                                      horizons);
            std::cout << dome::format_eval_table(tab);
        }
    }
    return 0;
}

int cmd_rollout(const CommonArgs& a, const std::string& scene_path, int frames) {
    auto cfg = resolve_config(a);
    fs::create_directories(a.out);
    auto seq = dome::read_sequence(scene_path);
    dome::Rng rng(cfg.seed);
    auto wm = make_world_model(cfg, rng);
    if (a.checkpoint.empty()) throw std::runtime_error("rollout needs --checkpoint <prefix>");
    wm.load(a.checkpoint);

    const int n_c = cfg.dit.n_c;
    std::vector<dome::OccupancyGrid> ctx(seq.frames.begin(), seq.frames.begin() + n_c);
    dome::Rng srng = rng.fork(4);
    auto pred = wm.rollout(ctx, seq.poses, frames, srng, nullptr, cfg.guidance);

    dome::OccSequence out;
    out.frames = pred;
    out.poses.assign(seq.poses.begin() + n_c, seq.poses.begin() + n_c + frames);
    const std::string path = (fs::path(a.out) / "rollout.occs").string();
    dome::write_sequence(out, path);
    std::cout << "rolled out " << pred.size() << " frames ("
              << pred.size() / cfg.frame_rate << " s at " << cfg.frame_rate << " Hz) to "
              << path << "\n";
    return 0;
}

int cmd_resample(const CommonArgs& a, const std::string& data) {
    auto cfg = resolve_config(a);
    fs::create_directories(a.out);
    auto files = list_sequences(data);
    json manifest = json::array();
    int total = 0, skipped = 0;
    for (size_t i = 0; i < files.size(); ++i) {
        auto seq = dome::read_sequence(files[i]);
        dome::Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * (i + 1)));
        auto rep = dome::resample_scene(seq, cfg.table, cfg.grid, cfg.resample, rng);
        const std::string stem = fs::path(files[i]).stem().string();
        for (const auto& sample : rep.samples) {
            char name[128];
            std::snprintf(name, sizeof name, "%s_rs%02d.occs", stem.c_str(),
                          sample.sample_index);
            dome::write_sequence(sample.seq, (fs::path(a.out) / name).string());
            manifest.push_back({{"scene_id", stem},
                                {"sample_idx", sample.sample_index},
                                {"seed", cfg.seed},
                                {"waypoint_count", sample.waypoint_count},
                                {"frames", sample.seq.frames.size()},
                                {"file", name}});
            ++total;
        }
        skipped += rep.skipped;
    }
    std::ofstream mf(fs::path(a.out) / "resample_manifest.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "wrote " << total << " resampled sequences (" << skipped
              << " skipped) to " << a.out << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& data, bool with_baseline) {
    auto cfg = resolve_config(a);
    auto scenes = load_sequences(data);
    dome::Rng rng(cfg.seed);
    auto wm = make_world_model(cfg, rng);
    if (a.checkpoint.empty()) throw std::runtime_error("eval needs --checkpoint <prefix>");
    wm.load(a.checkpoint);

    const int n_c = cfg.dit.n_c, n_f = cfg.dit.n_f;
    std::vector<const dome::OccSequence*> usable;
    for (const auto& seq : scenes)
        if (static_cast<int>(seq.frames.size()) >= n_f) usable.push_back(&seq);
    if (usable.empty()) throw std::runtime_error("no scene has enough frames for evaluation");

    std::vector<std::vector<dome::OccupancyGrid>> pred(usable.size()), gt(usable.size()),
        base(usable.size());
    dome::parallel_for(static_cast<int>(usable.size()), [&](int idx) {
        const size_t i = static_cast<size_t>(idx);
        const auto& seq = *usable[i];
        std::vector<dome::OccupancyGrid> ctx(seq.frames.begin(), seq.frames.begin() + n_c);
        dome::Rng srng = rng.fork(100 + i);  // per-scene stream, order-independent
        pred[i] = wm.forecast(ctx, seq.poses, srng, cfg.guidance);
        gt[i].assign(seq.frames.begin() + n_c, seq.frames.begin() + n_f);
        base[i] = dome::copy_paste_baseline(ctx, n_f - n_c);
    });

    auto recon = [&](const dome::OccupancyGrid& g) { return wm.vae().reconstruct(g); };
    auto tab = dome::evaluate(pred, gt, cfg.table, cfg.frame_rate, recon);
    std::cout << "model (" << tab.sequences << " sequences)\n" << dome::format_eval_table(tab);
    json out;
    out["model"] = eval_table_json(tab);
    if (with_baseline) {
        auto btab = dome::evaluate(base, gt, cfg.table, cfg.frame_rate, recon);
        std::cout << "copy_paste baseline\n" << dome::format_eval_table(btab);
        out["copy_paste"] = eval_table_json(btab);
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_render(const CommonArgs& a, const std::string& scene_path, int frame, bool ascii) {
    auto cfg = resolve_config(a);
    auto seq = dome::read_sequence(scene_path);
    if (frame < 0 || frame >= static_cast<int>(seq.frames.size()))
        throw std::runtime_error(dome::str("frame ", frame, " outside [0,", seq.frames.size(),
                                           ")"));
    const auto& g = seq.frames[static_cast<size_t>(frame)];
    if (ascii) {
        std::cout << dome::render_bev_ascii(g, cfg.table);
        return 0;
    }
    fs::create_directories(a.out);
    char name[64];
    std::snprintf(name, sizeof name, "frame_%03d.png", frame);
    const std::string path = (fs::path(a.out) / name).string();
    dome::write_png(path, dome::render_bev(g, cfg.table, dome::default_palette(cfg.table)));
    std::cout << "wrote " << path << "\n";
    return 0;
}

int cmd_stats(const CommonArgs& a, const std::string& data, int bins) {
    auto cfg = resolve_config(a);
    (void)cfg;
    std::vector<std::vector<dome::Pose>> tracks;
    for (const auto& seq : load_sequences(data)) tracks.push_back(seq.poses);
    auto st = dome::trajectory_stats(tracks, bins);
    json out;
    out["bins"] = bins;
    out["counts"] = st.heading_counts;
    out["max_bin_fraction"] = st.max_bin_fraction;
    auto& disp = out["displacements"] = json::array();
    for (const auto& d : st.displacements) disp.push_back({d[0], d[1]});
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"occupancy world model"};
    app.require_subcommand(1);

    CommonArgs a;
    std::string data, scene;
    int max_grids = 0, frames = 16, frame = 0, bins = 16;
    bool render_flag = false, ascii = false, baseline = true;

    auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
    add_common(synth, a);

    auto* tv = app.add_subcommand("train-vae", "train the occupancy VAE");
    add_common(tv, a);
    tv->add_option("--data", data, "directory of .occs scenes")->required();
    tv->add_option("--max-grids", max_grids, "cap on training grids (0 = all)");

    auto* tw = app.add_subcommand("train-wm", "train the diffusion world model");
    add_common(tw, a);
    tw->add_option("--data", data, "directory of .occs scenes")->required();

    auto* fc = app.add_subcommand("forecast", "predict one window from a scene's context");
    add_common(fc, a);
    fc->add_option("--scene", scene, "input .occs sequence")->required();
    fc->add_flag("--render", render_flag, "also write BEV PNGs");

    auto* ro = app.add_subcommand("rollout", "autoregressive long-horizon generation");
    add_common(ro, a);
    ro->add_option("--scene", scene, "input .occs sequence")->required();
    ro->add_option("--frames", frames, "total frames to generate");

    auto* rs = app.add_subcommand("resample", "trajectory-resampling augmentation");
    add_common(rs, a);
    rs->add_option("--data", data, "directory of .occs scenes")->required();

    auto* ev = app.add_subcommand("eval", "horizon metrics on held-out scenes");
    add_common(ev, a);
    ev->add_option("--data", data, "directory of .occs scenes")->required();
    ev->add_flag("--baseline,!--no-baseline", baseline, "include copy&paste baseline");

    auto* rd = app.add_subcommand("render", "render one frame as BEV");
    add_common(rd, a);
    rd->add_option("--scene", scene, "input .occs sequence")->required();
    rd->add_option("--frame", frame, "frame index");
    rd->add_flag("--ascii", ascii, "print ASCII art instead of PNG");

    auto* st = app.add_subcommand("stats", "trajectory heading/displacement statistics");
    add_common(st, a);
    st->add_option("--data", data, "directory of .occs scenes")->required();
    st->add_option("--bins", bins, "heading histogram bins");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(a);
        if (tv->parsed()) return cmd_train_vae(a, data, max_grids);
        if (tw->parsed()) return cmd_train_wm(a, data);
        if (fc->parsed()) return cmd_forecast(a, scene, render_flag);
        if (ro->parsed()) return cmd_rollout(a, scene, frames);
        if (rs->parsed()) return cmd_resample(a, data);
        if (ev->parsed()) return cmd_eval(a, data, baseline);
        if (rd->parsed()) return cmd_render(a, scene, frame, ascii);
        if (st->parsed()) return cmd_stats(a, data, bins);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
