// Trajectory resampling pipeline: static-cloud fusion, drivable rasters, the
// planner against a Dijkstra oracle, pose interpolation, grid re-extraction,
// and the heading statistics used to measure augmentation diversity.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <queue>

#include "dome/resample.hpp"

using namespace dome;

namespace {

// Uniform-cost search over the same 8-connected moves, kept deliberately
// different in structure from the planner (no heuristic, no early exit).
double dijkstra_cost(const BevMap& bev, std::array<int, 2> start, std::array<int, 2> goal) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(static_cast<size_t>(bev.nx) * bev.ny, inf);
    auto id = [&](int x, int y) { return static_cast<size_t>(x) * bev.ny + y; };
    using Item = std::pair<double, size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<Item>> q;
    dist[id(start[0], start[1])] = 0.0;
    q.emplace(0.0, id(start[0], start[1]));
    const int dx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
    const int dy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
    while (!q.empty()) {
        auto [d, v] = q.top();
        q.pop();
        if (d > dist[v] + 1e-12) continue;
        int ix = static_cast<int>(v / bev.ny), iy = static_cast<int>(v % bev.ny);
        for (int e = 0; e < 8; ++e) {
            int jx = ix + dx[e], jy = iy + dy[e];
            if (!bev.in_bounds(jx, jy) || !bev.at(jx, jy)) continue;
            double nd = d + (e < 4 ? 1.0 : std::sqrt(2.0));
            if (nd < dist[id(jx, jy)] - 1e-12) {
                dist[id(jx, jy)] = nd;
                q.emplace(nd, id(jx, jy));
            }
        }
    }
    return dist[id(goal[0], goal[1])];
}

double path_cost(const std::vector<std::array<int, 2>>& path) {
    double c = 0.0;
    for (size_t i = 1; i < path.size(); ++i) {
        int ax = std::abs(path[i][0] - path[i - 1][0]);
        int ay = std::abs(path[i][1] - path[i - 1][1]);
        REQUIRE(std::max(ax, ay) == 1);  // 8-connected single steps only
        c += (ax + ay == 2) ? std::sqrt(2.0) : 1.0;
    }
    return c;
}

BevMap make_map(int nx, int ny, double res = 1.0) {
    BevMap bev;
    bev.nx = nx;
    bev.ny = ny;
    bev.resolution = res;
    bev.origin = {0.0, 0.0};
    bev.drivable.assign(static_cast<size_t>(nx) * ny, 0);
    return bev;
}

}  // namespace

TEST_CASE("aggregate_point_cloud keeps static occupied voxels only") {
    auto table = synthetic_class_table();
    GridSpec spec{2, 2, 1, 1.0, {0.0, 0.0, 0.0}, 6};
    OccupancyGrid g(spec, 0);
    g.set(0, 0, 0, 1);  // road: kept
    g.set(0, 1, 0, 3);  // car: dynamic, dropped
    g.set(1, 0, 0, 4);  // manmade: kept

    OccSequence seq;
    seq.frames = {g};
    seq.poses = {Pose()};
    auto cloud = aggregate_point_cloud(seq, table);
    REQUIRE(cloud.size() == 2);
    REQUIRE(cloud.labels == std::vector<int>{1, 4});
    REQUIRE(cloud.points[0].x() == Catch::Approx(0.5));
    REQUIRE(cloud.points[0].y() == Catch::Approx(0.5));

    // A second frame shifted by +2 in x contributes translated points.
    seq.frames.push_back(g);
    seq.poses.push_back(Pose::from_xy_yaw(2.0, 0.0, 0.0));
    auto two = aggregate_point_cloud(seq, table);
    REQUIRE(two.size() == 4);
    REQUIRE(two.points[2].x() == Catch::Approx(2.5));

    seq.poses.pop_back();
    REQUIRE_THROWS_AS(aggregate_point_cloud(seq, table), std::invalid_argument);
}

TEST_CASE("drivable raster hugs the road extent") {
    auto table = synthetic_class_table();
    LabeledPointCloud cloud;
    cloud.points = {Vec3(0.25, 0.25, 0.0), Vec3(0.75, 0.25, 0.0), Vec3(0.25, 0.25, 1.0)};
    cloud.labels = {1, 1, 4};  // the manmade point must not widen the raster

    auto bev = build_bev_drivable(cloud, table, 0.5);
    REQUIRE(bev.nx == 2);
    REQUIRE(bev.ny == 1);
    REQUIRE(bev.origin[0] == Catch::Approx(0.0));
    REQUIRE(bev.origin[1] == Catch::Approx(0.0));
    REQUIRE(bev.at(0, 0));
    REQUIRE(bev.at(1, 0));

    LabeledPointCloud empty;
    auto none = build_bev_drivable(empty, table, 0.5);
    REQUIRE(none.nx == 0);
    REQUIRE(none.ny == 0);

    LabeledPointCloud no_road;
    no_road.points = {Vec3(1, 1, 0)};
    no_road.labels = {4};
    REQUIRE(build_bev_drivable(no_road, table, 0.5).nx == 0);

    REQUIRE_THROWS_AS(build_bev_drivable(cloud, table, 0.0), std::invalid_argument);
}

TEST_CASE("planner costs match uniform-cost search on random grids") {
    Rng rng(70);
    int reachable = 0, blocked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        int nx = 4 + static_cast<int>(rng.below(13));
        int ny = 4 + static_cast<int>(rng.below(13));
        auto bev = make_map(nx, ny);
        for (int x = 0; x < nx; ++x)
            for (int y = 0; y < ny; ++y) bev.set(x, y, rng.below(100) < 65);

        std::vector<std::array<int, 2>> cells;
        for (int x = 0; x < nx; ++x)
            for (int y = 0; y < ny; ++y)
                if (bev.at(x, y)) cells.push_back({x, y});
        if (cells.size() < 2) continue;
        auto start = cells[rng.below(cells.size())];
        auto goal = cells[rng.below(cells.size())];

        auto path = detail::astar(bev, start, goal);
        double oracle = dijkstra_cost(bev, start, goal);
        if (path.empty()) {
            REQUIRE(std::isinf(oracle));
            ++blocked;
        } else {
            REQUIRE(path.front() == start);
            REQUIRE(path.back() == goal);
            for (const auto& c : path) REQUIRE(bev.at(c[0], c[1]));
            REQUIRE(path_cost(path) == Catch::Approx(oracle).margin(1e-9));
            ++reachable;
        }
    }
    REQUIRE(reachable > 5);  // the sweep exercised real paths
    REQUIRE(blocked > 0);    // and some unreachable pairs
}

TEST_CASE("degenerate start equals goal") {
    auto bev = make_map(1, 1);
    bev.set(0, 0, true);
    SampleTrajectoryOptions opt;
    opt.min_separation = 0.0;
    Rng rng(71);
    auto path = sample_trajectory(bev, rng, opt);
    REQUIRE(path.size() == 1);
    REQUIRE(path[0][0] == Catch::Approx(0.5));
    REQUIRE(path[0][1] == Catch::Approx(0.5));
}

TEST_CASE("unreachable islands exhaust the retry budget") {
    auto bev = make_map(8, 8);
    bev.set(0, 0, true);
    bev.set(7, 7, true);  // disconnected from (0,0)
    SampleTrajectoryOptions opt;
    opt.min_separation = 2.0;
    opt.retry_budget = 8;
    Rng rng(72);
    REQUIRE_THROWS_AS(sample_trajectory(bev, rng, opt), NoPathError);

    BevMap nothing = make_map(4, 4);
    Rng rng2(73);
    REQUIRE_THROWS_AS(sample_trajectory(nothing, rng2, opt), NoPathError);
}

TEST_CASE("smoothed trajectories stay on drivable cells") {
    // L-shaped corridor, 3 cells wide.
    auto bev = make_map(20, 20);
    for (int x = 0; x < 20; ++x)
        for (int y = 0; y < 3; ++y) bev.set(x, y, true);
    for (int y = 0; y < 20; ++y)
        for (int x = 17; x < 20; ++x) bev.set(x, y, true);

    SampleTrajectoryOptions opt;
    opt.min_separation = 10.0;
    Rng rng(74);
    for (int s = 0; s < 20; ++s) {
        auto path = sample_trajectory(bev, rng, opt);
        REQUIRE(path.size() >= 2);
        for (const auto& w : path) REQUIRE(bev.point_free(w[0], w[1]));
        // Consecutive waypoints must also be connected by free segments.
        for (size_t i = 1; i < path.size(); ++i)
            REQUIRE(detail::segment_free(bev, path[i - 1], path[i]));
    }
}

TEST_CASE("poses are spaced by arc length with forward headings") {
    auto bev = make_map(16, 16);  // resolution 1, origin 0: cell == world
    for (auto& c : bev.drivable) c = 1;

    SECTION("straight 10 m at 2 m spacing gives six poses") {
        std::vector<std::array<double, 2>> wp = {{0.0, 0.0}, {10.0, 0.0}};
        auto poses = path_to_poses(wp, bev, 2.0);
        REQUIRE(poses.size() == 6);
        for (size_t i = 0; i < poses.size(); ++i) {
            REQUIRE(poses[i].translation().x() == Catch::Approx(2.0 * i));
            REQUIRE(poses[i].translation().y() == Catch::Approx(0.0).margin(1e-12));
            REQUIRE(poses[i].yaw() == Catch::Approx(0.0).margin(1e-12));
        }
    }

    SECTION("an L turn rotates the sampled headings") {
        std::vector<std::array<double, 2>> wp = {{0.0, 0.0}, {2.0, 0.0}, {2.0, 2.0}};
        auto poses = path_to_poses(wp, bev, 1.0);
        REQUIRE(poses.size() == 5);
        REQUIRE(poses[0].yaw() == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(poses[3].yaw() == Catch::Approx(kPi / 2));
        REQUIRE(poses[4].yaw() == Catch::Approx(kPi / 2));  // last reuses previous
        REQUIRE(poses[4].translation().x() == Catch::Approx(2.0));
        REQUIRE(poses[4].translation().y() == Catch::Approx(2.0));
    }

    SECTION("validation") {
        std::vector<std::array<double, 2>> one = {{0.0, 0.0}};
        REQUIRE_THROWS_AS(path_to_poses(one, bev, 1.0), std::invalid_argument);
        std::vector<std::array<double, 2>> wp = {{0.0, 0.0}, {3.0, 0.0}};
        REQUIRE_THROWS_AS(path_to_poses(wp, bev, 0.0), std::invalid_argument);
        REQUIRE_THROWS_AS(path_to_poses(wp, bev, 1.0, 100), std::runtime_error);
    }
}

TEST_CASE("extract_occupancy votes per voxel and respects the pose") {
    auto table = synthetic_class_table();
    GridSpec spec{4, 4, 2, 1.0, {0.0, 0.0, 0.0}, 6};

    SECTION("empty cloud gives an empty grid") {
        LabeledPointCloud none;
        auto g = extract_occupancy(none, Pose(), spec);
        for (uint8_t l : g.labels()) REQUIRE(l == 0);
    }

    SECTION("tied votes take the lowest class id") {
        LabeledPointCloud cloud;
        cloud.points = {Vec3(0.4, 0.5, 0.5), Vec3(0.6, 0.5, 0.5)};  // same voxel
        cloud.labels = {4, 2};
        auto g = extract_occupancy(cloud, Pose(), spec);
        REQUIRE(g.at(0, 0, 0) == 2);

        cloud.points.push_back(Vec3(0.5, 0.4, 0.5));
        cloud.labels.push_back(4);  // majority 4 now wins
        auto g2 = extract_occupancy(cloud, Pose(), spec);
        REQUIRE(g2.at(0, 0, 0) == 4);
    }

    SECTION("identity-pose round trip reproduces the static scene") {
        OccupancyGrid g(spec, 0);
        Rng rng(75);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int k = 0; k < 2; ++k) g.set(i, j, k, static_cast<uint8_t>(rng.below(6)));
        OccSequence seq;
        seq.frames = {g};
        seq.poses = {Pose()};
        auto cloud = aggregate_point_cloud(seq, table);
        auto back = extract_occupancy(cloud, Pose(), spec);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int k = 0; k < 2; ++k) {
                    uint8_t want = g.at(i, j, k);
                    if (want == 3) want = 0;  // dynamic voxels are not static scene
                    REQUIRE(back.at(i, j, k) == want);
                }
    }

    SECTION("extraction commutes with rigid motion of the cloud") {
        LabeledPointCloud cloud;
        Rng rng(76);
        for (int p = 0; p < 30; ++p) {
            cloud.points.push_back(Vec3(rng.uniform(0.0, 4.0), rng.uniform(0.0, 4.0),
                                        rng.uniform(0.0, 2.0)));
            cloud.labels.push_back(1 + static_cast<int>(rng.below(5)));
        }
        Pose ego = Pose::from_xy_yaw(1.0, -0.5, 0.7);
        auto direct = extract_occupancy(cloud, ego, spec);

        LabeledPointCloud moved;
        Pose inv = ego.inverse();
        for (const auto& q : cloud.points) moved.points.push_back(inv.apply(q));
        moved.labels = cloud.labels;
        auto via_identity = extract_occupancy(moved, Pose(), spec);
        REQUIRE(direct.labels() == via_identity.labels());
    }
}

TEST_CASE("resample_scene renders the fused world along new tracks") {
    auto table = synthetic_class_table();
    GridSpec spec{12, 12, 2, 1.0, {-6.0, -6.0, 0.0}, 6};
    OccupancyGrid g(spec, 0);
    for (int i = 0; i < 12; ++i)
        for (int j = 4; j < 8; ++j) g.set(i, j, 0, 1);  // straight road band
    OccSequence seq;
    for (int f = 0; f < 3; ++f) {
        seq.frames.push_back(g);
        seq.poses.push_back(Pose::from_xy_yaw(f * 1.0, 0.0, 0.0));
    }

    ResampleOptions opt;
    opt.num_samples = 3;
    opt.bev_resolution = 1.0;
    opt.frame_spacing = 1.0;
    opt.min_frames = 2;
    opt.trajectory.min_separation = 6.0;

    SECTION("zero samples is an empty report, negative is an error") {
        Rng rng(77);
        ResampleOptions zero = opt;
        zero.num_samples = 0;
        auto rep = resample_scene(seq, table, spec, zero, rng);
        REQUIRE(rep.samples.empty());
        REQUIRE(rep.skipped == 0);
        zero.num_samples = -1;
        REQUIRE_THROWS_AS(resample_scene(seq, table, spec, zero, rng),
                          std::invalid_argument);
    }

    SECTION("same seed reproduces every sample") {
        Rng a(78), b(78);
        auto r1 = resample_scene(seq, table, spec, opt, a);
        auto r2 = resample_scene(seq, table, spec, opt, b);
        REQUIRE(r1.samples.size() == r2.samples.size());
        REQUIRE(r1.samples.size() == 3);
        for (size_t i = 0; i < r1.samples.size(); ++i) {
            REQUIRE(r1.samples[i].seq == r2.samples[i].seq);
            REQUIRE(r1.samples[i].waypoint_count == r2.samples[i].waypoint_count);
            REQUIRE(r1.samples[i].sample_index == r2.samples[i].sample_index);
            REQUIRE(r1.samples[i].waypoint_count >= 2);
            REQUIRE(r1.samples[i].seq.size() >= 2);
        }
    }

    SECTION("impossible frame demands are skipped, not fatal") {
        ResampleOptions hard = opt;
        hard.min_frames = 10000;
        hard.trajectory.retry_budget = 4;
        Rng rng(79);
        auto rep = resample_scene(seq, table, spec, hard, rng);
        REQUIRE(rep.samples.empty());
        REQUIRE(rep.skipped == 3);
    }

    SECTION("max_frames truncates the pose list") {
        ResampleOptions cap = opt;
        cap.max_frames = 2;
        Rng rng(80);
        auto rep = resample_scene(seq, table, spec, cap, rng);
        for (const auto& s : rep.samples) REQUIRE(s.seq.size() == 2);
    }
}

TEST_CASE("trajectory_stats bins endpoint headings in the start frame") {
    REQUIRE_THROWS_AS(trajectory_stats({}, 0), std::invalid_argument);

    std::vector<std::vector<Pose>> straight;
    for (int i = 0; i < 5; ++i)
        straight.push_back({Pose::from_xy_yaw(i, 0, 0), Pose::from_xy_yaw(i + 3.0, 0, 0)});
    auto st = trajectory_stats(straight, 8);
    int total = 0;
    for (int c : st.heading_counts) total += c;
    REQUIRE(total == 5);
    REQUIRE(st.max_bin_fraction == Catch::Approx(1.0));  // all forward

    // Forward / left / right / back endpoints spread across distinct bins.
    std::vector<std::vector<Pose>> spread = {
        {Pose(), Pose::from_xy_yaw(2, 0, 0)},
        {Pose(), Pose::from_xy_yaw(0, 2, 0)},
        {Pose(), Pose::from_xy_yaw(0, -2, 0)},
        {Pose(), Pose::from_xy_yaw(-2, -0.01, 0)},
    };
    auto sp = trajectory_stats(spread, 4);
    REQUIRE(sp.max_bin_fraction == Catch::Approx(0.25));
    REQUIRE(sp.displacements.size() == 4);

    // The start pose's own orientation defines the frame: driving +y while
    // facing +y is "forward".
    std::vector<std::vector<Pose>> rotated = {
        {Pose::from_xy_yaw(0, 0, kPi / 2), Pose::from_xy_yaw(0, 3, kPi / 2)}};
    auto rot = trajectory_stats(rotated, 4);
    REQUIRE(rot.displacements[0][0] == Catch::Approx(3.0));
    REQUIRE(rot.displacements[0][1] == Catch::Approx(0.0).margin(1e-12));

    // Degenerate tracks land in the bin containing heading zero.
    std::vector<std::vector<Pose>> still = {{Pose()}, {}};
    auto dz = trajectory_stats(still, 8);
    int tz = 0;
    for (int c : dz.heading_counts) tz += c;
    REQUIRE(tz == 1);  // the empty track is ignored entirely
}
