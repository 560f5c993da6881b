#pragma once

// Small fixed-size vector, quaternion and 3x3 matrix types.
//
// Templated on the scalar so the same geometry code runs on plain doubles and
// on ad::Var when gradients are needed.

#include <array>
#include <cmath>
#include <numbers>

#include "gavatar/autodiff.hpp"

namespace gavatar {

template <class T>
struct Vec2 {
    T x{}, y{};
};

template <class T>
struct Vec3 {
    T x{}, y{}, z{};

    Vec3() = default;
    Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}
    template <class U>
    explicit Vec3(const Vec3<U>& o) : x(T(o.x)), y(T(o.y)), z(T(o.z))
    {
    }
    bool operator==(const Vec3&) const = default;

    T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
    const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(const T& s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(const T& s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o)
    {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    Vec3& operator-=(const Vec3& o)
    {
        x -= o.x;
        y -= o.y;
        z -= o.z;
        return *this;
    }
    Vec3& operator*=(const T& s)
    {
        x *= s;
        y *= s;
        z *= s;
        return *this;
    }
};

template <class T>
Vec3<T> operator*(const T& s, const Vec3<T>& v)
{
    return v * s;
}

using Vec3d = Vec3<double>;
using Vec2d = Vec2<double>;

template <class T>
T dot(const Vec3<T>& a, const Vec3<T>& b)
{
    return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <class T>
Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b)
{
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <class T>
Vec3<T> hadamard(const Vec3<T>& a, const Vec3<T>& b)
{
    return {a.x * b.x, a.y * b.y, a.z * b.z};
}

template <class T>
T norm(const Vec3<T>& a)
{
    using std::sqrt;
    return sqrt(dot(a, a));
}

template <class T>
Vec3<T> normalized(const Vec3<T>& a)
{
    return a / norm(a);
}

inline Vec3d value_of(const Vec3<ad::Var>& v) { return {v.x.val, v.y.val, v.z.val}; }
inline Vec3d value_of(const Vec3d& v) { return v; }

// Hamilton quaternion, scalar first.
template <class T>
struct Quat {
    T w{1.0}, x{}, y{}, z{};

    Quat() = default;
    Quat(T w_, T x_, T y_, T z_) : w(w_), x(x_), y(y_), z(z_) {}
    template <class U>
    explicit Quat(const Quat<U>& o) : w(T(o.w)), x(T(o.x)), y(T(o.y)), z(T(o.z))
    {
    }

    static Quat identity() { return {T(1.0), T(0.0), T(0.0), T(0.0)}; }
};

using Quatd = Quat<double>;

template <class T>
Quat<T> operator*(const Quat<T>& a, const Quat<T>& b)
{
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

template <class T>
T norm(const Quat<T>& q)
{
    using std::sqrt;
    return sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
}

template <class T>
Quat<T> normalized(const Quat<T>& q)
{
    const T n = norm(q);
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

inline Quatd axis_angle_quat(const Vec3d& axis, double angle)
{
    const Vec3d a = normalized(axis);
    const double h = 0.5 * angle;
    const double s = std::sin(h);
    return {std::cos(h), a.x * s, a.y * s, a.z * s};
}

// Row-major 3x3 matrix.
template <class T>
struct Mat3 {
    std::array<T, 9> m{};

    static Mat3 identity()
    {
        Mat3 r;
        r.m = {T(1.0), T(0.0), T(0.0), T(0.0), T(1.0), T(0.0), T(0.0), T(0.0), T(1.0)};
        return r;
    }
    static Mat3 from_columns(const Vec3<T>& c0, const Vec3<T>& c1, const Vec3<T>& c2)
    {
        Mat3 r;
        r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
        return r;
    }
    template <class U>
    static Mat3 cast(const Mat3<U>& o)
    {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = T(o.m[i]);
        return r;
    }

    T& operator()(int r, int c) { return m[r * 3 + c]; }
    const T& operator()(int r, int c) const { return m[r * 3 + c]; }

    Vec3<T> col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
    Vec3<T> row(int r) const { return {m[r * 3], m[r * 3 + 1], m[r * 3 + 2]}; }

    Vec3<T> operator*(const Vec3<T>& v) const
    {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3& o) const
    {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                r.m[i * 3 + j] = m[i * 3] * o.m[j] + m[i * 3 + 1] * o.m[3 + j] + m[i * 3 + 2] * o.m[6 + j];
        return r;
    }
    Mat3 transposed() const
    {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
        return r;
    }
};

using Mat3d = Mat3<double>;

template <class T>
Mat3<T> quat_to_mat(const Quat<T>& q)
{
    const T ww = q.w * q.w, xx = q.x * q.x, yy = q.y * q.y, zz = q.z * q.z;
    const T xy = q.x * q.y, xz = q.x * q.z, yz = q.y * q.z;
    const T wx = q.w * q.x, wy = q.w * q.y, wz = q.w * q.z;
    Mat3<T> r;
    r.m = {ww + xx - yy - zz,      T(2.0) * (xy - wz),      T(2.0) * (xz + wy),
           T(2.0) * (xy + wz),     ww - xx + yy - zz,       T(2.0) * (yz - wx),
           T(2.0) * (xz - wy),     T(2.0) * (yz + wx),      ww - xx - yy + zz};
    return r;
}

template <class T>
Vec3<T> rotate(const Quat<T>& q, const Vec3<T>& v)
{
    return quat_to_mat(q) * v;
}

// Shepperd's method. The branch is chosen on values, which keeps the result
// differentiable within each branch.
template <class T>
Quat<T> mat_to_quat(const Mat3<T>& r)
{
    using std::sqrt;
    const double tr = value_of(r(0, 0)) + value_of(r(1, 1)) + value_of(r(2, 2));
    Quat<T> q;
    if (tr > 0.0) {
        const T s = sqrt(r(0, 0) + r(1, 1) + r(2, 2) + T(1.0)) * T(2.0);
        q = {T(0.25) * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
    } else if (value_of(r(0, 0)) > value_of(r(1, 1)) && value_of(r(0, 0)) > value_of(r(2, 2))) {
        const T s = sqrt(T(1.0) + r(0, 0) - r(1, 1) - r(2, 2)) * T(2.0);
        q = {(r(2, 1) - r(1, 2)) / s, T(0.25) * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
    } else if (value_of(r(1, 1)) > value_of(r(2, 2))) {
        const T s = sqrt(T(1.0) + r(1, 1) - r(0, 0) - r(2, 2)) * T(2.0);
        q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, T(0.25) * s, (r(1, 2) + r(2, 1)) / s};
    } else {
        const T s = sqrt(T(1.0) + r(2, 2) - r(0, 0) - r(1, 1)) * T(2.0);
        q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, T(0.25) * s};
    }
    if (value_of(q.w) < 0.0) q = {-q.w, -q.x, -q.y, -q.z};
    return q;
}

// Axis-angle vector to rotation matrix. Uses a series expansion near zero so
// the derivative stays finite at the identity.
template <class T>
Mat3<T> rodrigues(const Vec3<T>& aa)
{
    using std::cos;
    using std::sin;
    using std::sqrt;
    const T theta2 = dot(aa, aa);
    T a, b; // R = I + a K + b K^2 with K = [aa]x
    if (value_of(theta2) < 1e-8) {
        a = T(1.0) - theta2 / T(6.0);
        b = T(0.5) - theta2 / T(24.0);
    } else {
        const T theta = sqrt(theta2);
        a = sin(theta) / theta;
        b = (T(1.0) - cos(theta)) / theta2;
    }
    const T kx = aa.x, ky = aa.y, kz = aa.z;
    Mat3<T> k;
    k.m = {T(0.0), -kz, ky, kz, T(0.0), -kx, -ky, kx, T(0.0)};
    const Mat3<T> k2 = k * k;
    Mat3<T> r = Mat3<T>::identity();
    for (int i = 0; i < 9; ++i) r.m[i] = r.m[i] + a * k.m[i] + b * k2.m[i];
    return r;
}

inline Mat3d value_of(const Mat3<ad::Var>& m)
{
    Mat3d r;
    for (int i = 0; i < 9; ++i) r.m[i] = m.m[i].val;
    return r;
}

inline Quatd value_of(const Quat<ad::Var>& q) { return {q.w.val, q.x.val, q.y.val, q.z.val}; }

// dL/dq for R = quat_to_mat(q) given dL/dR.
inline Quatd quat_to_mat_backward(const Quatd& q, const Mat3d& g)
{
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    const Mat3d& d = g;
    const double gw = w * (d.m[0] + d.m[4] + d.m[8]) + z * (d.m[3] - d.m[1]) + y * (d.m[2] - d.m[6]) +
                      x * (d.m[7] - d.m[5]);
    const double gx = x * (d.m[0] - d.m[4] - d.m[8]) + y * (d.m[1] + d.m[3]) + z * (d.m[2] + d.m[6]) +
                      w * (d.m[7] - d.m[5]);
    const double gy = y * (-d.m[0] + d.m[4] - d.m[8]) + x * (d.m[1] + d.m[3]) + w * (d.m[2] - d.m[6]) +
                      z * (d.m[5] + d.m[7]);
    const double gz = z * (-d.m[0] - d.m[4] + d.m[8]) + w * (d.m[3] - d.m[1]) + x * (d.m[2] + d.m[6]) +
                      y * (d.m[5] + d.m[7]);
    return {2.0 * gw, 2.0 * gx, 2.0 * gy, 2.0 * gz};
}

inline Mat3d outer(const Vec3d& a, const Vec3d& b)
{
    Mat3d r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = a[i] * b[j];
    return r;
}

constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

} // namespace gavatar
