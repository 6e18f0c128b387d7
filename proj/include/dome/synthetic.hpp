#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dome/geometry.hpp"
#include "dome/occupancy.hpp"
#include "dome/resample.hpp"
#include "dome/rng.hpp"

namespace dome {

// Desk-scale street scenes on an integer voxel lattice. The static world is a
// pure function of world voxel coordinates, so aggregating any subset of
// frames always reproduces the same map (duplicate voxels agree exactly).
// Ego and car motion are whole voxels per frame, keeping every frame aligned
// to the lattice.

inline GridSpec synthetic_grid_spec() {
    GridSpec s;
    s.h = 40;
    s.w = 40;
    s.d = 8;
    s.resolution = 0.4;
    s.origin = {-8.0, -8.0, 0.0};
    s.num_classes = 6;
    return s;
}

enum class TrackKind { Straight, Turn };

struct SyntheticOptions {
    int n_frames = 20;
    int min_cars = 1, max_cars = 3;
    int speed_min = 1, speed_max = 3;  // ego voxels per frame
    TrackKind track = TrackKind::Straight;
    bool crossroad = false;  // add a perpendicular road (implied by Turn)
};

namespace detail {

struct Box {
    int x0, x1, y0, y1, z0, z1;  // half-open voxel ranges
    uint8_t label;
    bool contains(int x, int y, int z) const {
        return x >= x0 && x < x1 && y >= y0 && y < y1 && z >= z0 && z < z1;
    }
};

struct Car {
    Box box;        // extent at t = 0
    int vx, vy;     // voxels per frame
    bool contains(int x, int y, int z, int t) const {
        return box.contains(x - vx * t, y - vy * t, z);
    }
};

struct SceneLayout {
    static constexpr int kRoadHalf = 5;   // |y| <= 5 -> road
    static constexpr int kWalkHalf = 7;   // 5 < |y| <= 7 -> sidewalk
    static constexpr int kVegHalf = 12;   // 7 < |y| <= 12 -> vegetation

    bool crossroad = false;
    int cross_x = 0;  // crossroad centreline when enabled
    std::vector<Box> statics;
    std::vector<Car> cars;
    std::vector<Pose> ego;

    bool on_road(int x, int y) const {
        if (std::abs(y) <= kRoadHalf) return true;
        return crossroad && std::abs(x - cross_x) <= kRoadHalf;
    }
    bool on_walk(int x, int y) const {
        if (std::abs(y) <= kWalkHalf && !on_road(x, y)) {
            if (!crossroad || std::abs(x - cross_x) > kWalkHalf) return true;
        }
        if (crossroad && std::abs(x - cross_x) <= kWalkHalf && std::abs(y) <= kVegHalf &&
            !on_road(x, y))
            return true;
        return false;
    }

    // Static label for a world voxel; 0 = empty. The verge beyond the
    // sidewalk is bare ground: vegetation appears only as discrete bushes,
    // so no static class except road/sidewalk is invariant along the track.
    uint8_t static_label(int x, int y, int z) const {
        for (const Box& b : statics)
            if (b.contains(x, y, z)) return b.label;
        if (z == 0) {
            if (on_road(x, y)) return 1;   // road
            if (on_walk(x, y)) return 2;   // sidewalk
        }
        return 0;
    }

    uint8_t label_at(int x, int y, int z, int t) const {
        for (const Car& c : cars)
            if (c.contains(x, y, z, t)) return 3;  // car
        return static_label(x, y, z);
    }
};

inline SceneLayout build_layout(Rng& rng, const SyntheticOptions& opt) {
    SceneLayout lay;
    lay.crossroad = opt.crossroad || opt.track == TrackKind::Turn;

    const int ego_speed = opt.speed_min + static_cast<int>(rng.below(
                              static_cast<uint64_t>(opt.speed_max - opt.speed_min + 1)));
    const int span = ego_speed * opt.n_frames + 60;  // world x covered by the run

    // Crossroad centreline scales with speed so the turn always lands
    // mid-sequence (frame 5..8) rather than drifting out of short windows.
    if (lay.crossroad) lay.cross_x = ego_speed * (6 + static_cast<int>(rng.below(4)));

    // Buildings flank the corridor; keep a gap near the crossroad.
    for (int side = -1; side <= 1; side += 2) {
        int x = -24 + static_cast<int>(rng.below(6));
        while (x < span) {
            const int len = 3 + static_cast<int>(rng.below(4));
            const int depth = 3 + static_cast<int>(rng.below(3));
            const int height = 3 + static_cast<int>(rng.below(4));
            const int gap = 4 + static_cast<int>(rng.below(10));
            const bool near_cross =
                lay.crossroad && x + len >= lay.cross_x - SceneLayout::kWalkHalf - 1 &&
                x <= lay.cross_x + SceneLayout::kWalkHalf + 1;
            if (!near_cross) {
                const int y0 = side > 0 ? SceneLayout::kWalkHalf + 1
                                        : -SceneLayout::kWalkHalf - depth;
                lay.statics.push_back({x, x + len, y0, y0 + depth, 0, height, 4});
            }
            x += len + gap;
        }
    }
    // Bushes in the verge: small boxes at aperiodic spacings on both sides.
    for (int side = -1; side <= 1; side += 2) {
        for (int x = -22 + static_cast<int>(rng.below(4)); x < span;
             x += 3 + static_cast<int>(rng.below(6))) {
            const int len = 2 + static_cast<int>(rng.below(2));
            const int height = 1 + static_cast<int>(rng.below(2));
            const int y0 = side > 0 ? SceneLayout::kVegHalf - 2 - static_cast<int>(rng.below(3))
                                    : -SceneLayout::kVegHalf + static_cast<int>(rng.below(3));
            if (lay.crossroad && std::abs(x - lay.cross_x) <= SceneLayout::kWalkHalf + 2) continue;
            lay.statics.push_back({x, x + len, y0, y0 + 2, 0, height, 5});
            x += len;
        }
    }

    // Ego: straight along +x, or a single 90 degree left turn at the
    // crossroad. Speeds are whole voxels so poses stay on the lattice.
    const double res = synthetic_grid_spec().resolution;
    if (opt.track == TrackKind::Straight) {
        for (int t = 0; t < opt.n_frames; ++t)
            lay.ego.push_back(Pose::from_xy_yaw(ego_speed * t * res, 0.0, 0.0));
    } else {
        int x = 0, y = 0;
        bool turned = false;
        for (int t = 0; t < opt.n_frames; ++t) {
            lay.ego.push_back(Pose::from_xy_yaw(x * res, y * res, turned ? kPi / 2 : 0.0));
            if (!turned && x + ego_speed >= lay.cross_x)
                turned = true;
            if (turned)
                y += ego_speed;
            else
                x += ego_speed;
        }
    }

    // Cars in the side lanes, constant velocity, non-overlapping at t = 0.
    const int n_cars = opt.min_cars + static_cast<int>(rng.below(
                           static_cast<uint64_t>(opt.max_cars - opt.min_cars + 1)));
    for (int c = 0; c < n_cars; ++c) {
        for (int tries = 0; tries < 20; ++tries) {
            const int lane = rng.bernoulli(0.5) ? 3 : -3;  // lane centreline
            const int vx = lane > 0 ? 1 + static_cast<int>(rng.below(2))
                                    : -1 - static_cast<int>(rng.below(2));
            const int x0 = static_cast<int>(rng.below(static_cast<uint64_t>(span / 2))) - 6;
            Car car;
            car.box = {x0, x0 + 4, lane - 1, lane + 2, 1, 3};
            car.vx = vx;
            car.vy = 0;
            bool clash = false;
            for (const Car& other : lay.cars)
                for (int t = 0; t < opt.n_frames && !clash; ++t) {
                    const Box a = {car.box.x0 + car.vx * t, car.box.x1 + car.vx * t,
                                   car.box.y0, car.box.y1, car.box.z0, car.box.z1};
                    const Box b = {other.box.x0 + other.vx * t, other.box.x1 + other.vx * t,
                                   other.box.y0, other.box.y1, other.box.z0, other.box.z1};
                    clash = a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
                }
            if (clash) continue;
            lay.cars.push_back(car);
            break;
        }
    }
    return lay;
}

}  // namespace detail

// Generates one scene. Deterministic in (seed via rng): the caller forks a
// stream per scene index.
inline OccSequence gen_synthetic_scene(Rng rng, const SyntheticOptions& opt = {},
                                       const GridSpec& spec = synthetic_grid_spec()) {
    if (opt.n_frames < 1) throw std::invalid_argument("gen_synthetic_scene: n_frames must be >= 1");
    if (opt.speed_min < 1 || opt.speed_max < opt.speed_min)
        throw std::invalid_argument("gen_synthetic_scene: bad speed range");
    const detail::SceneLayout lay = detail::build_layout(rng, opt);

    OccSequence seq;
    seq.poses = lay.ego;
    seq.frames.reserve(static_cast<size_t>(opt.n_frames));
    const double res = spec.resolution;
    for (int t = 0; t < opt.n_frames; ++t) {
        OccupancyGrid g(spec, 0);
        const Pose& pose = lay.ego[static_cast<size_t>(t)];
        // Lattice-aligned pose: recover integer world offsets and the 90
        // degree yaw count exactly.
        const int ex = static_cast<int>(std::lround(pose.matrix()(0, 3) / res));
        const int ey = static_cast<int>(std::lround(pose.matrix()(1, 3) / res));
        const int quarter = static_cast<int>(std::lround(pose.yaw() / (kPi / 2)));
        const int ox = static_cast<int>(std::lround(spec.origin[0] / res));
        const int oy = static_cast<int>(std::lround(spec.origin[1] / res));
        for (int i = 0; i < spec.h; ++i)
            for (int j = 0; j < spec.w; ++j) {
                // Ego-frame voxel (grid axis x = i, y = j) -> world voxel.
                const int lx = i + ox, ly = j + oy;
                int wx, wy;
                switch (((quarter % 4) + 4) % 4) {
                    case 0: wx = lx; wy = ly; break;
                    case 1: wx = -ly - 1; wy = lx; break;
                    case 2: wx = -lx - 1; wy = -ly - 1; break;
                    default: wx = ly; wy = -lx - 1; break;
                }
                wx += ex;
                wy += ey;
                for (int k = 0; k < spec.d; ++k)
                    g.set(i, j, k, lay.label_at(wx, wy, k, t));
            }
        seq.frames.push_back(std::move(g));
    }
    return seq;
}

// Batch generation with one rng stream per scene; scene i is identical no
// matter how many scenes are requested.
inline std::vector<OccSequence> gen_synthetic(uint64_t seed, int n_scenes,
                                              const SyntheticOptions& opt = {},
                                              const GridSpec& spec = synthetic_grid_spec()) {
    if (n_scenes < 1) throw std::invalid_argument("gen_synthetic: n_scenes must be >= 1");
    Rng root(seed);
    std::vector<OccSequence> scenes;
    scenes.reserve(static_cast<size_t>(n_scenes));
    for (int s = 0; s < n_scenes; ++s)
        scenes.push_back(gen_synthetic_scene(root.fork(static_cast<uint64_t>(s)), opt, spec));
    return scenes;
}

}  // namespace dome
