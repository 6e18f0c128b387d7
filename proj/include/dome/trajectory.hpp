#ifndef DOME_TRAJECTORY_HPP
#define DOME_TRAJECTORY_HPP

#include <array>
#include <cmath>
#include <vector>

#include "dome/geometry.hpp"

namespace dome {

// Per-frame ego motion [x, y, theta_yaw] relative to the previous frame;
// frame 0 is [0,0,0] by convention.
struct TrajectoryWindow {
    std::vector<std::array<double, 3>> deltas;

    int size() const { return static_cast<int>(deltas.size()); }
};

// Frame-to-previous-frame relative motion: delta_t = pose_{t-1}^{-1} * pose_t,
// [x, y] from the relative translation, yaw = atan2(R[1][0], R[0][0]).
inline TrajectoryWindow relative_motion(const std::vector<Pose>& poses) {
    if (poses.empty()) throw std::invalid_argument("relative_motion: need at least one pose");
    TrajectoryWindow w;
    w.deltas.reserve(poses.size());
    w.deltas.push_back({0.0, 0.0, 0.0});
    for (size_t t = 1; t < poses.size(); ++t) {
        Pose d = poses[t - 1].inverse() * poses[t];
        const Mat4& m = d.matrix();
        w.deltas.push_back({m(0, 3), m(1, 3), std::atan2(m(1, 0), m(0, 0))});
    }
    return w;
}

// Frequency encoding gamma(p) = (sin(2^0 pi p), cos(2^0 pi p), ...,
// sin(2^{L-1} pi p), cos(2^{L-1} pi p)) per scalar, concatenated in input
// order.
inline std::vector<double> gamma_encode(const std::vector<double>& values, int L) {
    if (L < 1) throw std::invalid_argument("gamma_encode: L must be >= 1");
    constexpr double pi = 3.14159265358979323846;
    std::vector<double> out;
    out.reserve(values.size() * 2 * static_cast<size_t>(L));
    for (double p : values) {
        double freq = pi;
        for (int l = 0; l < L; ++l) {
            out.push_back(std::sin(freq * p));
            out.push_back(std::cos(freq * p));
            freq *= 2.0;
        }
    }
    return out;
}

// gamma features of a window: per frame gamma(x;L_xy) ++ gamma(y;L_xy) ++
// gamma(yaw;L_yaw), flattened over frames.
inline std::vector<double> trajectory_features(const TrajectoryWindow& w, int l_xy, int l_yaw) {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(w.size()) * (4 * l_xy + 2 * l_yaw));
    for (const auto& d : w.deltas) {
        auto xy = gamma_encode({d[0], d[1]}, l_xy);
        auto yaw = gamma_encode({d[2]}, l_yaw);
        out.insert(out.end(), xy.begin(), xy.end());
        out.insert(out.end(), yaw.begin(), yaw.end());
    }
    return out;
}

// Absolute (x, y, yaw) track recovered by cumulatively composing deltas
// from an identity start; inverse of relative_motion up to the lost global
// offset of pose 0.
inline std::vector<Pose> compose_track(const TrajectoryWindow& w) {
    std::vector<Pose> poses;
    poses.reserve(w.deltas.size());
    Pose cur;
    poses.push_back(cur);
    for (size_t t = 1; t < w.deltas.size(); ++t) {
        const auto& d = w.deltas[t];
        cur = cur * Pose::from_xy_yaw(d[0], d[1], d[2]);
        poses.push_back(cur);
    }
    return poses;
}

}  // namespace dome

#endif  // DOME_TRAJECTORY_HPP
