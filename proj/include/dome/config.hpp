#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dome/dit.hpp"
#include "dome/occupancy.hpp"
#include "dome/resample.hpp"
#include "dome/schedule.hpp"
#include "dome/synthetic.hpp"
#include "dome/vae.hpp"
#include "dome/worldmodel.hpp"

namespace dome {

struct ScheduleConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int inference_steps = 20;

    DiffusionSchedule make() const { return make_schedule(T, beta_start, beta_end, inference_steps); }
};

// Everything a CLI run needs. Latent geometry (dit.n_h/n_w/latent_c) is
// derived from the grid and VAE settings, never set directly.
struct RunConfig {
    std::string preset = "synthetic";
    uint64_t seed = 0;
    GridSpec grid;
    SemanticClassTable table;
    VaeConfig vae;
    DitConfig dit;
    ScheduleConfig schedule;
    VaeTrainOptions train_vae;
    WmTrainOptions train_wm;
    SyntheticOptions synth;
    ResampleOptions resample;
    int n_scenes = 8;
    double frame_rate = 2.0;
    double guidance = 1.0;  // conditional weight at sampling; 1 = unguided

    void derive_latent_geometry() {
        vae.validate_grid(grid.h, grid.w, grid.d);
        dit.n_h = grid.h / vae.downsample;
        dit.n_w = grid.w / vae.downsample;
        dit.latent_c = vae.latent_c;
        dit.validate();
    }
};

inline RunConfig preset_config(const std::string& name) {
    RunConfig c;
    c.preset = name;
    if (name == "synthetic") {
        c.grid = synthetic_grid_spec();
        c.table = synthetic_class_table();
        c.vae.c_emb = 8;
        c.vae.latent_c = 8;
        c.vae.downsample = 4;
        c.vae.base_ch = 32;
        c.dit.n_f = 11;
        c.dit.n_c = 4;
        c.dit.patch = 1;
        c.dit.hidden = 64;
        c.dit.heads = 4;
        c.dit.depth = 2;
        // Desk-scale corpora overfit quickly; stop at the quality bar
        // instead of burning the full epoch budget.
        c.train_vae.target_miou = 0.97;
        c.train_vae.target_iou = 0.98;
        c.train_vae.eval_every = 3;
        c.synth.n_frames = 20;
        c.resample.bev_resolution = c.grid.resolution;
        c.resample.frame_spacing = 0.8;  // 2 voxels per frame
    } else if (name == "reference") {
        c.grid = {200, 200, 16, 0.4, {-40.0, -40.0, -1.0}, 18};
        c.table = reference_class_table();
        c.vae.c_emb = 8;
        c.vae.latent_c = 16;
        c.vae.downsample = 8;
        c.vae.base_ch = 32;
        c.dit.n_f = 11;
        c.dit.n_c = 4;
        c.dit.patch = 1;
        c.dit.hidden = 128;
        c.dit.heads = 8;
        c.dit.depth = 4;
        c.synth.n_frames = 20;
        c.resample.bev_resolution = c.grid.resolution;
        c.resample.frame_spacing = 1.0;
    } else {
        throw std::invalid_argument(str("unknown preset '", name,
                                        "' (available: synthetic, reference)"));
    }
    c.derive_latent_geometry();
    return c;
}

namespace detail {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

// Overlays a JSON object onto the preset defaults. Unknown top-level keys
// are an error so typos fail loudly.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
    static const char* known[] = {"preset",    "seed",      "grid",     "vae",
                                  "dit",       "schedule",  "train_vae", "train_wm",
                                  "synth",     "resample",  "n_scenes", "frame_rate",
                                  "guidance"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw std::invalid_argument(str("config: unknown key '", it.key(), "'"));
    }
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "n_scenes", c.n_scenes);
    detail::maybe(j, "frame_rate", c.frame_rate);
    detail::maybe(j, "guidance", c.guidance);
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        detail::maybe(g, "h", c.grid.h);
        detail::maybe(g, "w", c.grid.w);
        detail::maybe(g, "d", c.grid.d);
        detail::maybe(g, "resolution", c.grid.resolution);
        if (g.contains("origin")) {
            auto o = g.at("origin").get<std::vector<double>>();
            if (o.size() != 3) throw std::invalid_argument("config: grid.origin needs 3 values");
            c.grid.origin = {o[0], o[1], o[2]};
        }
    }
    if (j.contains("vae")) {
        const auto& v = j.at("vae");
        detail::maybe(v, "c_emb", c.vae.c_emb);
        detail::maybe(v, "latent_c", c.vae.latent_c);
        detail::maybe(v, "downsample", c.vae.downsample);
        detail::maybe(v, "base_ch", c.vae.base_ch);
        detail::maybe(v, "attn_heads", c.vae.attn_heads);
        detail::maybe(v, "beta", c.vae.beta);
        detail::maybe(v, "lambda_lovasz", c.vae.lambda_lovasz);
    }
    if (j.contains("dit")) {
        const auto& d = j.at("dit");
        detail::maybe(d, "n_f", c.dit.n_f);
        detail::maybe(d, "n_c", c.dit.n_c);
        detail::maybe(d, "patch", c.dit.patch);
        detail::maybe(d, "hidden", c.dit.hidden);
        detail::maybe(d, "heads", c.dit.heads);
        detail::maybe(d, "depth", c.dit.depth);
        detail::maybe(d, "p_inj", c.dit.p_inj);
        detail::maybe(d, "l_xy", c.dit.l_xy);
        detail::maybe(d, "l_yaw", c.dit.l_yaw);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::maybe(s, "T", c.schedule.T);
        detail::maybe(s, "beta_start", c.schedule.beta_start);
        detail::maybe(s, "beta_end", c.schedule.beta_end);
        detail::maybe(s, "inference_steps", c.schedule.inference_steps);
    }
    if (j.contains("train_vae")) {
        const auto& t = j.at("train_vae");
        detail::maybe(t, "epochs", c.train_vae.epochs);
        detail::maybe(t, "lr", c.train_vae.lr);
        detail::maybe(t, "min_lr", c.train_vae.min_lr);
        detail::maybe(t, "weight_decay", c.train_vae.weight_decay);
        detail::maybe(t, "ema_decay", c.train_vae.ema_decay);
        detail::maybe(t, "eval_every", c.train_vae.eval_every);
        detail::maybe(t, "target_miou", c.train_vae.target_miou);
        detail::maybe(t, "target_iou", c.train_vae.target_iou);
        detail::maybe(t, "wall_clock_budget_s", c.train_vae.wall_clock_budget_s);
        detail::maybe(t, "verbose", c.train_vae.verbose);
    }
    if (j.contains("train_wm")) {
        const auto& t = j.at("train_wm");
        detail::maybe(t, "steps", c.train_wm.steps);
        detail::maybe(t, "lr", c.train_wm.lr);
        detail::maybe(t, "min_lr", c.train_wm.min_lr);
        detail::maybe(t, "weight_decay", c.train_wm.weight_decay);
        detail::maybe(t, "ema_decay", c.train_wm.ema_decay);
        detail::maybe(t, "log_every", c.train_wm.log_every);
        detail::maybe(t, "wall_clock_budget_s", c.train_wm.wall_clock_budget_s);
        detail::maybe(t, "verbose", c.train_wm.verbose);
    }
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        detail::maybe(s, "n_frames", c.synth.n_frames);
        detail::maybe(s, "min_cars", c.synth.min_cars);
        detail::maybe(s, "max_cars", c.synth.max_cars);
        detail::maybe(s, "speed_min", c.synth.speed_min);
        detail::maybe(s, "speed_max", c.synth.speed_max);
        detail::maybe(s, "crossroad", c.synth.crossroad);
        if (s.contains("track")) {
            const std::string t = s.at("track").get<std::string>();
            if (t == "straight")
                c.synth.track = TrackKind::Straight;
            else if (t == "turn")
                c.synth.track = TrackKind::Turn;
            else
                throw std::invalid_argument(str("config: synth.track '", t, "'"));
        }
    }
    if (j.contains("resample")) {
        const auto& r = j.at("resample");
        detail::maybe(r, "num_samples", c.resample.num_samples);
        detail::maybe(r, "bev_resolution", c.resample.bev_resolution);
        detail::maybe(r, "frame_spacing", c.resample.frame_spacing);
        detail::maybe(r, "min_frames", c.resample.min_frames);
        detail::maybe(r, "max_frames", c.resample.max_frames);
        detail::maybe(r, "min_separation", c.resample.trajectory.min_separation);
        detail::maybe(r, "retry_budget", c.resample.trajectory.retry_budget);
        detail::maybe(r, "smooth", c.resample.trajectory.smooth);
    }
    c.derive_latent_geometry();
}

// Preset, optionally overlaid with a JSON file. The file may itself pick the
// preset; an explicit preset argument wins.
inline RunConfig load_config(const std::string& preset, const std::string& config_path) {
    nlohmann::json j;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw std::runtime_error(str("cannot open config ", config_path));
        is >> j;
    }
    std::string name = preset;
    if (name.empty()) name = j.value("preset", std::string("synthetic"));
    RunConfig c = preset_config(name);
    if (!j.is_null() && !j.empty()) apply_config_json(c, j);
    return c;
}

}  // namespace dome
