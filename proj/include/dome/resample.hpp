#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <stdexcept>
#include <vector>

#include "dome/geometry.hpp"
#include "dome/occupancy.hpp"
#include "dome/rng.hpp"
#include "dome/util.hpp"

namespace dome {

struct LabeledPointCloud {
    std::vector<Vec3> points;
    std::vector<int> labels;

    size_t size() const { return points.size(); }
};

// Fuses every occupied voxel of every frame into one world-frame cloud.
// Dynamic classes are dropped so the result describes the static scene only.
inline LabeledPointCloud aggregate_point_cloud(const OccSequence& seq,
                                               const SemanticClassTable& table) {
    if (seq.frames.size() != seq.poses.size())
        throw std::invalid_argument("aggregate_point_cloud: frame/pose count mismatch");
    std::vector<char> dynamic(static_cast<size_t>(table.num_classes), 0);
    for (int c : table.dynamic_class_ids) dynamic[static_cast<size_t>(c)] = 1;

    LabeledPointCloud cloud;
    for (size_t f = 0; f < seq.frames.size(); ++f) {
        const OccupancyGrid& g = seq.frames[f];
        const Pose& pose = seq.poses[f];
        for (int i = 0; i < g.h(); ++i)
            for (int j = 0; j < g.w(); ++j)
                for (int k = 0; k < g.d(); ++k) {
                    uint8_t lab = g.at(i, j, k);
                    if (lab == table.empty_id || dynamic[lab]) continue;
                    cloud.points.push_back(pose.apply(g.voxel_center(i, j, k)));
                    cloud.labels.push_back(lab);
                }
    }
    return cloud;
}

// 2D drivable-area raster over world (x, y). Cell (ix, iy) covers
// [origin + idx*res, origin + (idx+1)*res).
struct BevMap {
    int nx = 0, ny = 0;
    double resolution = 1.0;
    std::array<double, 2> origin = {0, 0};
    std::vector<char> drivable;  // nx * ny, x-major

    bool in_bounds(int ix, int iy) const { return ix >= 0 && ix < nx && iy >= 0 && iy < ny; }
    bool at(int ix, int iy) const { return drivable[static_cast<size_t>(ix) * ny + iy] != 0; }
    void set(int ix, int iy, bool v) { drivable[static_cast<size_t>(ix) * ny + iy] = v ? 1 : 0; }

    // Continuous cell coordinates -> world. Cell centers sit at idx + 0.5.
    std::array<double, 2> cell_to_world(double cx, double cy) const {
        return {origin[0] + cx * resolution, origin[1] + cy * resolution};
    }
    std::array<int, 2> world_to_cell(double x, double y) const {
        return {static_cast<int>(std::floor((x - origin[0]) / resolution + OccupancyGrid::kIndexSnap)),
                static_cast<int>(std::floor((y - origin[1]) / resolution + OccupancyGrid::kIndexSnap))};
    }

    // True when the continuous cell-space point lies on a drivable cell.
    bool point_free(double cx, double cy) const {
        int ix = static_cast<int>(std::floor(cx + OccupancyGrid::kIndexSnap));
        int iy = static_cast<int>(std::floor(cy + OccupancyGrid::kIndexSnap));
        return in_bounds(ix, iy) && at(ix, iy);
    }
};

// Flattens road-class points into a drivable raster. An empty cloud (or one
// without road points) yields an empty map.
inline BevMap build_bev_drivable(const LabeledPointCloud& cloud, const SemanticClassTable& table,
                                 double resolution) {
    if (!(resolution > 0) || !std::isfinite(resolution))
        throw std::invalid_argument("build_bev_drivable: resolution must be positive");
    std::vector<char> road(static_cast<size_t>(table.num_classes), 0);
    for (int c : table.road_class_ids) road[static_cast<size_t>(c)] = 1;

    double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
    double min_y = min_x, max_y = max_x;
    for (size_t p = 0; p < cloud.size(); ++p) {
        if (!road[static_cast<size_t>(cloud.labels[p])]) continue;
        min_x = std::min(min_x, cloud.points[p].x());
        max_x = std::max(max_x, cloud.points[p].x());
        min_y = std::min(min_y, cloud.points[p].y());
        max_y = std::max(max_y, cloud.points[p].y());
    }

    BevMap bev;
    bev.resolution = resolution;
    if (!std::isfinite(min_x)) return bev;  // no road anywhere

    bev.origin = {min_x - 0.5 * resolution, min_y - 0.5 * resolution};
    bev.nx = static_cast<int>(std::floor((max_x - bev.origin[0]) / resolution)) + 1;
    bev.ny = static_cast<int>(std::floor((max_y - bev.origin[1]) / resolution)) + 1;
    bev.drivable.assign(static_cast<size_t>(bev.nx) * bev.ny, 0);
    for (size_t p = 0; p < cloud.size(); ++p) {
        if (!road[static_cast<size_t>(cloud.labels[p])]) continue;
        auto c = bev.world_to_cell(cloud.points[p].x(), cloud.points[p].y());
        if (bev.in_bounds(c[0], c[1])) bev.set(c[0], c[1], true);
    }
    return bev;
}

struct NoPathError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

// A* over the drivable raster, 8-connected, axis cost 1 and diagonal sqrt(2),
// Euclidean heuristic. Returns cell indices start..goal inclusive, or empty
// when the goal is unreachable. Ties break on g then node index so runs are
// deterministic.
inline std::vector<std::array<int, 2>> astar(const BevMap& bev, std::array<int, 2> start,
                                             std::array<int, 2> goal) {
    const double kSqrt2 = std::sqrt(2.0);
    const size_t n = static_cast<size_t>(bev.nx) * bev.ny;
    auto id = [&](int ix, int iy) { return static_cast<size_t>(ix) * bev.ny + iy; };
    auto heur = [&](int ix, int iy) {
        return std::hypot(static_cast<double>(ix - goal[0]), static_cast<double>(iy - goal[1]));
    };

    std::vector<double> g(n, std::numeric_limits<double>::infinity());
    std::vector<int64_t> parent(n, -1);
    std::vector<char> closed(n, 0);

    using Item = std::tuple<double, double, size_t>;  // (f, g, node)
    std::priority_queue<Item, std::vector<Item>, std::greater<Item>> open;
    const size_t s = id(start[0], start[1]);
    g[s] = 0;
    open.emplace(heur(start[0], start[1]), 0.0, s);

    const int dx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
    const int dy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
    const size_t target = id(goal[0], goal[1]);

    while (!open.empty()) {
        auto [f, gc, v] = open.top();
        open.pop();
        (void)f;
        if (closed[v]) continue;
        closed[v] = 1;
        if (v == target) break;
        const int ix = static_cast<int>(v / bev.ny), iy = static_cast<int>(v % bev.ny);
        for (int e = 0; e < 8; ++e) {
            const int jx = ix + dx[e], jy = iy + dy[e];
            if (!bev.in_bounds(jx, jy) || !bev.at(jx, jy)) continue;
            const double step = e < 4 ? 1.0 : kSqrt2;
            const size_t u = id(jx, jy);
            if (gc + step < g[u] - 1e-12) {
                g[u] = gc + step;
                parent[u] = static_cast<int64_t>(v);
                open.emplace(g[u] + heur(jx, jy), g[u], u);
            }
        }
    }

    if (!closed[target]) return {};
    std::vector<std::array<int, 2>> path;
    for (int64_t v = static_cast<int64_t>(target); v >= 0; v = parent[static_cast<size_t>(v)]) {
        path.push_back({static_cast<int>(v / bev.ny), static_cast<int>(v % bev.ny)});
        if (static_cast<size_t>(v) == s) break;
    }
    std::reverse(path.begin(), path.end());
    return path;
}

// Samples the segment a->b every 0.1 cells; all samples must be drivable.
inline bool segment_free(const BevMap& bev, std::array<double, 2> a, std::array<double, 2> b) {
    const double len = std::hypot(b[0] - a[0], b[1] - a[1]);
    const int steps = std::max(1, static_cast<int>(std::ceil(len / 0.1)));
    for (int t = 0; t <= steps; ++t) {
        const double u = static_cast<double>(t) / steps;
        if (!bev.point_free(a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]))) return false;
    }
    return true;
}

}  // namespace detail

struct SampleTrajectoryOptions {
    double min_separation = 20.0;  // cells, straight-line distance start to goal
    int retry_budget = 32;
    bool smooth = true;
};

// Draws start/goal uniformly from drivable cells, plans with A*, then smooths.
// Waypoints are continuous cell coordinates (centers at idx + 0.5). Pairs that
// are too close or unreachable are re-drawn; budget exhaustion throws
// NoPathError.
inline std::vector<std::array<double, 2>> sample_trajectory(
    const BevMap& bev, Rng& rng, const SampleTrajectoryOptions& opt = {}) {
    std::vector<std::array<int, 2>> cells;
    for (int ix = 0; ix < bev.nx; ++ix)
        for (int iy = 0; iy < bev.ny; ++iy)
            if (bev.at(ix, iy)) cells.push_back({ix, iy});
    if (cells.empty()) throw NoPathError("sample_trajectory: no drivable cells");

    for (int attempt = 0; attempt < opt.retry_budget; ++attempt) {
        const auto a = cells[rng.below(cells.size())];
        const auto b = cells[rng.below(cells.size())];
        const double sep = std::hypot(static_cast<double>(a[0] - b[0]),
                                      static_cast<double>(a[1] - b[1]));
        if (opt.min_separation > 0 && sep < opt.min_separation) continue;
        if (a == b) return {{a[0] + 0.5, a[1] + 0.5}};

        auto path = detail::astar(bev, a, b);
        if (path.empty()) continue;

        std::vector<std::array<double, 2>> pts;
        pts.reserve(path.size());
        for (const auto& c : path) pts.push_back({c[0] + 0.5, c[1] + 0.5});
        if (!opt.smooth || pts.size() <= 2) return pts;

        // Greedy line-of-sight shortcut: keep jumping to the farthest
        // waypoint the straight segment can reach.
        std::vector<std::array<double, 2>> cut;
        cut.push_back(pts.front());
        size_t i = 0;
        while (i + 1 < pts.size()) {
            size_t j = pts.size() - 1;
            while (j > i + 1 && !detail::segment_free(bev, pts[i], pts[j])) --j;
            cut.push_back(pts[j]);
            i = j;
        }

        // One corner-rounding pass; a moved waypoint is kept only when both
        // adjacent segments stay collision-free.
        std::vector<std::array<double, 2>> out = cut;
        for (size_t k = 1; k + 1 < cut.size(); ++k) {
            std::array<double, 2> cand = {0.25 * cut[k - 1][0] + 0.5 * cut[k][0] + 0.25 * cut[k + 1][0],
                                          0.25 * cut[k - 1][1] + 0.5 * cut[k][1] + 0.25 * cut[k + 1][1]};
            if (detail::segment_free(bev, out[k - 1], cand) &&
                detail::segment_free(bev, cand, cut[k + 1]))
                out[k] = cand;
        }
        return out;
    }
    throw NoPathError(str("sample_trajectory: no path after ", opt.retry_budget, " attempts"));
}

// Resamples the waypoint polyline at fixed arc-length spacing and attaches a
// forward-facing yaw. Poses are planar (z = 0, yaw-only). The pose count is
// floor(length / spacing) + 1; a zero-length path only ever yields one pose,
// so asking for more than that is an error.
inline std::vector<Pose> path_to_poses(const std::vector<std::array<double, 2>>& waypoints,
                                       const BevMap& bev, double spacing, int min_poses = 0) {
    if (waypoints.size() < 2) throw std::invalid_argument("path_to_poses: need >= 2 waypoints");
    if (!(spacing > 0)) throw std::invalid_argument("path_to_poses: spacing must be positive");

    std::vector<std::array<double, 2>> pts;
    pts.reserve(waypoints.size());
    for (const auto& w : waypoints) pts.push_back(bev.cell_to_world(w[0], w[1]));

    std::vector<double> cum(pts.size(), 0.0);
    for (size_t i = 1; i < pts.size(); ++i)
        cum[i] = cum[i - 1] + std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
    const double total = cum.back();
    const int count = total > 0 ? static_cast<int>(std::floor(total / spacing + 1e-9)) + 1 : 1;
    if (count < min_poses)
        throw std::runtime_error(str("path_to_poses: path length ", total, " yields ", count,
                                     " poses, need ", min_poses));

    auto locate = [&](double s) -> std::array<double, 2> {
        size_t seg = 1;
        while (seg + 1 < cum.size() && cum[seg] < s) ++seg;
        const double d = cum[seg] - cum[seg - 1];
        const double u = d > 0 ? (s - cum[seg - 1]) / d : 0.0;
        return {pts[seg - 1][0] + u * (pts[seg][0] - pts[seg - 1][0]),
                pts[seg - 1][1] + u * (pts[seg][1] - pts[seg - 1][1])};
    };

    std::vector<std::array<double, 2>> samples(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) samples[static_cast<size_t>(i)] = locate(std::min(i * spacing, total));

    std::vector<Pose> poses;
    poses.reserve(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        // Heading points at the next sample; the final pose reuses the
        // previous heading.
        size_t a = i + 1 < samples.size() ? i : i - 1;
        size_t b = a + 1;
        double yaw = std::atan2(samples[b][1] - samples[a][1], samples[b][0] - samples[a][0]);
        poses.push_back(Pose::from_xy_yaw(samples[i][0], samples[i][1], yaw));
    }
    return poses;
}

// Rebuilds an ego-frame grid from the world cloud at the given pose. Voxels
// with points take the majority label (ties -> lowest class id); voxels
// without points stay empty.
inline OccupancyGrid extract_occupancy(const LabeledPointCloud& cloud, const Pose& pose,
                                       const GridSpec& spec) {
    OccupancyGrid grid(spec, 0);
    const Pose inv = pose.inverse();

    // (flat voxel, label) pairs, grouped by sorting; the vote is then a
    // single linear scan. Deterministic regardless of point order.
    std::vector<std::pair<int64_t, int>> hits;
    for (size_t p = 0; p < cloud.size(); ++p) {
        const Vec3 q = inv.apply(cloud.points[p]);
        auto idx = grid.voxel_index(q);
        if (!idx) continue;
        const int64_t flat = (static_cast<int64_t>((*idx)[0]) * spec.w + (*idx)[1]) * spec.d + (*idx)[2];
        hits.emplace_back(flat, cloud.labels[p]);
    }
    std::sort(hits.begin(), hits.end());

    size_t i = 0;
    while (i < hits.size()) {
        size_t j = i;
        while (j < hits.size() && hits[j].first == hits[i].first) ++j;
        int best = -1, best_count = 0;
        size_t a = i;
        while (a < j) {
            size_t b = a;
            while (b < j && hits[b].second == hits[a].second) ++b;
            const int count = static_cast<int>(b - a);
            if (count > best_count) {  // strict: earlier (lower) label wins ties
                best_count = count;
                best = hits[a].second;
            }
            a = b;
        }
        const int64_t flat = hits[i].first;
        const int vi = static_cast<int>(flat / (static_cast<int64_t>(spec.w) * spec.d));
        const int vj = static_cast<int>((flat / spec.d) % spec.w);
        const int vk = static_cast<int>(flat % spec.d);
        grid.set(vi, vj, vk, static_cast<uint8_t>(best));
        i = j;
    }
    return grid;
}

struct ResampleOptions {
    int num_samples = 10;
    double bev_resolution = 0.4;
    double frame_spacing = 0.8;  // metres between consecutive poses
    int min_frames = 1;          // poses required per resampled sequence
    int max_frames = 0;          // 0 = keep all, else truncate
    SampleTrajectoryOptions trajectory;
};

struct ResampledScene {
    OccSequence seq;
    int sample_index = 0;
    int waypoint_count = 0;
};

struct ResampleReport {
    std::vector<ResampledScene> samples;
    int skipped = 0;
};

// Trajectory-resampling augmentation: fuse the static world once, then render
// it along freshly planned trajectories. Samples whose planning fails are
// skipped and counted, not fatal.
inline ResampleReport resample_scene(const OccSequence& seq, const SemanticClassTable& table,
                                     const GridSpec& spec, const ResampleOptions& opt, Rng& rng) {
    if (opt.num_samples < 0) throw std::invalid_argument("resample_scene: num_samples must be >= 0");
    ResampleReport report;
    if (opt.num_samples == 0) return report;
    const LabeledPointCloud cloud = aggregate_point_cloud(seq, table);
    const BevMap bev = build_bev_drivable(cloud, table, opt.bev_resolution);

    for (int s = 0; s < opt.num_samples; ++s) {
        Rng rs = rng.fork(static_cast<uint64_t>(s) + 1);
        std::vector<Pose> poses;
        size_t waypoints = 0;
        try {
            for (int attempt = 0;; ++attempt) {
                auto path = sample_trajectory(bev, rs, opt.trajectory);
                try {
                    poses = path_to_poses(path, bev, opt.frame_spacing, opt.min_frames);
                    waypoints = path.size();
                    break;
                } catch (const std::runtime_error&) {
                    // Path too short for the requested frame count; replan.
                    if (attempt + 1 >= opt.trajectory.retry_budget)
                        throw NoPathError("resample_scene: no path long enough");
                }
            }
        } catch (const NoPathError&) {
            ++report.skipped;
            continue;
        }
        if (opt.max_frames > 0 && static_cast<int>(poses.size()) > opt.max_frames)
            poses.resize(static_cast<size_t>(opt.max_frames));

        ResampledScene out;
        out.sample_index = s;
        out.waypoint_count = static_cast<int>(waypoints);
        out.seq.poses = poses;
        out.seq.frames.reserve(poses.size());
        for (const Pose& p : poses) out.seq.frames.push_back(extract_occupancy(cloud, p, spec));
        report.samples.push_back(std::move(out));
    }
    return report;
}

struct TrajectoryStats {
    std::vector<int> heading_counts;                 // histogram over (-pi, pi]
    std::vector<std::array<double, 2>> displacements;  // endpoint in start-pose frame
    double max_bin_fraction = 0.0;
};

// Heading = direction of the endpoint displacement expressed in the first
// pose's frame. Degenerate (single-pose or zero-displacement) tracks count
// into the bin containing heading 0.
inline TrajectoryStats trajectory_stats(const std::vector<std::vector<Pose>>& tracks, int bins) {
    if (bins < 1) throw std::invalid_argument("trajectory_stats: bins must be >= 1");
    TrajectoryStats st;
    st.heading_counts.assign(static_cast<size_t>(bins), 0);
    int total = 0;
    for (const auto& track : tracks) {
        if (track.empty()) continue;
        const Pose rel = track.front().inverse() * track.back();
        const double x = rel.matrix()(0, 3), y = rel.matrix()(1, 3);
        st.displacements.push_back({x, y});
        const double heading = (x == 0 && y == 0) ? 0.0 : std::atan2(y, x);
        // Map (-pi, pi] -> [0, bins).
        double u = (heading + kPi) / (2.0 * kPi);
        int b = static_cast<int>(std::floor(u * bins));
        b = std::clamp(b, 0, bins - 1);
        ++st.heading_counts[static_cast<size_t>(b)];
        ++total;
    }
    if (total > 0) {
        const int mx = *std::max_element(st.heading_counts.begin(), st.heading_counts.end());
        st.max_bin_fraction = static_cast<double>(mx) / total;
    }
    return st;
}

}  // namespace dome
