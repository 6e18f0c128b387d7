#ifndef DOME_GEOMETRY_HPP
#define DOME_GEOMETRY_HPP

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "dome/util.hpp"

namespace dome {

using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;

// Rigid transform (rotation + translation). Construction validates
// orthonormality, det = +1, and the homogeneous bottom row.
class Pose {
public:
    Pose() : m_(Mat4::Identity()) {}

    explicit Pose(const Mat4& m) : m_(m) {
        Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
        if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
            throw std::invalid_argument("pose: rotation block is not orthonormal");
        if (std::abs(r.determinant() - 1.0) > 1e-9)
            throw std::invalid_argument("pose: rotation determinant is not +1");
        if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
            throw std::invalid_argument("pose: bottom row must be [0,0,0,1]");
    }

    static Pose from_xy_yaw(double x, double y, double yaw) {
        Mat4 m = Mat4::Identity();
        double c = std::cos(yaw), s = std::sin(yaw);
        m(0, 0) = c; m(0, 1) = -s;
        m(1, 0) = s; m(1, 1) = c;
        m(0, 3) = x; m(1, 3) = y;
        return Pose(m);
    }

    const Mat4& matrix() const { return m_; }
    Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
    Vec3 translation() const { return m_.topRightCorner<3, 1>(); }

    double yaw() const { return std::atan2(m_(1, 0), m_(0, 0)); }

    Pose inverse() const {
        Mat4 inv = Mat4::Identity();
        Eigen::Matrix3d rt = rotation().transpose();
        inv.topLeftCorner<3, 3>() = rt;
        inv.topRightCorner<3, 1>() = -rt * translation();
        return Pose(inv);
    }

    Pose operator*(const Pose& rhs) const { return Pose(Mat4(m_ * rhs.m_)); }

    Vec3 apply(const Vec3& p) const { return rotation() * p + translation(); }

    bool operator==(const Pose& rhs) const { return m_ == rhs.m_; }

private:
    Mat4 m_;
};

inline constexpr double kPi = 3.14159265358979323846;

// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    a = std::fmod(a, 2.0 * kPi);
    if (a <= -kPi) a += 2.0 * kPi;
    if (a > kPi) a -= 2.0 * kPi;
    return a;
}

}  // namespace dome

#endif  // DOME_GEOMETRY_HPP
