#include "anchorseg/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace anchorseg {

Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 operator*(const Vec3& a, double c) { return {a[0] * c, a[1] * c, a[2] * c}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalize(const Vec3& a) {
    double n = norm(a);
    if (n == 0) throw std::runtime_error("normalize: zero vector");
    return a * (1.0 / n);
}

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
}

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 mat3_inverse(const Mat3& m) {
    double a = m[0], b = m[1], c = m[2], d = m[3], e = m[4], f = m[5], g = m[6], h = m[7], i = m[8];
    double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    if (det == 0) throw std::runtime_error("mat3_inverse: singular matrix");
    double r = 1.0 / det;
    return {(e * i - f * h) * r, (c * h - b * i) * r, (b * f - c * e) * r,
            (f * g - d * i) * r, (a * i - c * g) * r, (c * d - a * f) * r,
            (d * h - e * g) * r, (b * g - a * h) * r, (a * e - b * d) * r};
}

Vec3 Camera::world_to_cam(const Vec3& p) const {
    return {E[0] * p[0] + E[1] * p[1] + E[2] * p[2] + E[3],
            E[4] * p[0] + E[5] * p[1] + E[6] * p[2] + E[7],
            E[8] * p[0] + E[9] * p[1] + E[10] * p[2] + E[11]};
}

Vec3 Camera::cam_to_world(const Vec3& p) const {
    // E = [R | t]; inverse is R^T (p - t)
    Vec3 q = {p[0] - E[3], p[1] - E[7], p[2] - E[11]};
    return {E[0] * q[0] + E[4] * q[1] + E[8] * q[2],
            E[1] * q[0] + E[5] * q[1] + E[9] * q[2],
            E[2] * q[0] + E[6] * q[1] + E[10] * q[2]};
}

Vec3 Camera::position() const { return cam_to_world({0, 0, 0}); }

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                       double focal, int height, int width) {
    // camera axes: z forward, x right, y down (v grows downward in the image)
    Vec3 zc = normalize(target - eye);
    Vec3 xc = normalize(cross(zc, up));
    Vec3 yc = cross(zc, xc);
    Camera cam;
    cam.height = height;
    cam.width = width;
    cam.K = {focal, 0, (width - 1) / 2.0, 0, focal, (height - 1) / 2.0, 0, 0, 1};
    Vec3 t = {-dot(xc, eye), -dot(yc, eye), -dot(zc, eye)};
    cam.E = {xc[0], xc[1], xc[2], t[0],
             yc[0], yc[1], yc[2], t[1],
             zc[0], zc[1], zc[2], t[2],
             0, 0, 0, 1};
    return cam;
}

Projection project(const Vec3& point, const Camera& cam) {
    Vec3 pc = cam.world_to_cam(point);
    Vec3 h = mat3_apply(cam.K, pc);
    return {h[0], h[1], h[2]};
}

Vec3 unproject_pixel(double u, double v, double depth, const Camera& cam) {
    Mat3 Kinv = mat3_inverse(cam.K);
    Vec3 pc = mat3_apply(Kinv, {u, v, 1.0}) * depth;
    return cam.cam_to_world(pc);
}

PointMapView unproject(const std::vector<double>& depth, const Camera& cam) {
    PointMapView pm;
    pm.height = cam.height;
    pm.width = cam.width;
    pm.points.assign(static_cast<std::size_t>(cam.height) * cam.width, Vec3{0, 0, 0});
    pm.valid.assign(pm.points.size(), 0);
    if (depth.size() != pm.points.size())
        throw std::runtime_error("unproject: depth map size mismatch");
    Mat3 Kinv = mat3_inverse(cam.K);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            std::size_t i = static_cast<std::size_t>(y) * cam.width + x;
            double d = depth[i];
            if (!(d > 0)) continue;
            Vec3 pc = mat3_apply(Kinv, {static_cast<double>(x), static_cast<double>(y), 1.0}) * d;
            pm.points[i] = cam.cam_to_world(pc);
            pm.valid[i] = 1;
        }
    return pm;
}

std::vector<double> fourier_features(const Vec3& point, int n_freqs) {
    if (n_freqs < 1) throw std::runtime_error("fourier_features: n_freqs must be >= 1");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(6 * n_freqs));
    for (int axis = 0; axis < 3; ++axis) {
        double scale = M_PI;
        for (int k = 0; k < n_freqs; ++k) {
            out.push_back(std::sin(scale * point[axis]));
            out.push_back(std::cos(scale * point[axis]));
            scale *= 2.0;
        }
    }
    return out;
}

}  // namespace anchorseg
