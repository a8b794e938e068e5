#pragma once

// 2D primitives: vectors, poses, symmetric 2x2 matrices.

#include <cmath>

namespace clsim {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    Vec2 operator/(double s) const { return {x / s, y / s}; }
    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double norm() const { return std::hypot(x, y); }
    double norm_sq() const { return x * x + y * y; }
};

// wrap to (-pi, pi]
inline double wrap_angle(double a) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    a = std::fmod(a, two_pi);
    if (a <= -3.14159265358979323846) a += two_pi;
    if (a > 3.14159265358979323846) a -= two_pi;
    return a;
}

inline Vec2 rotate(const Vec2& v, double theta) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    return {c * v.x - s * v.y, s * v.x + c * v.y};
}

// Rigid pose (position + heading).
struct Pose {
    Vec2 pos;
    double heading = 0.0;

    // local -> world
    Vec2 to_world(const Vec2& local) const { return pos + rotate(local, heading); }
    // world -> local
    Vec2 to_local(const Vec2& world) const { return rotate(world - pos, -heading); }
};

// Symmetric 2x2 matrix, stored as (xx, xy, yy).
struct SymMat2 {
    double xx = 1.0;
    double xy = 0.0;
    double yy = 1.0;

    double det() const { return xx * yy - xy * xy; }
    double trace() const { return xx + yy; }

    // eigenvalues in ascending order
    void eigenvalues(double& lo, double& hi) const {
        const double m = 0.5 * (xx + yy);
        const double d = std::sqrt(std::max(0.0, 0.25 * (xx - yy) * (xx - yy) + xy * xy));
        lo = m - d;
        hi = m + d;
    }

    bool is_spd(double tol = 0.0) const {
        double lo, hi;
        eigenvalues(lo, hi);
        return lo > tol;
    }

    static SymMat2 identity() { return {1.0, 0.0, 1.0}; }
    static SymMat2 diag(double a, double b) { return {a, 0.0, b}; }
};

}  // namespace clsim
