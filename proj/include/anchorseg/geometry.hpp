#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace anchorseg {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;   // row-major
using Mat4 = std::array<double, 16>;  // row-major

Vec3 operator+(const Vec3& a, const Vec3& b);
Vec3 operator-(const Vec3& a, const Vec3& b);
Vec3 operator*(const Vec3& a, double c);
double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& a);
Vec3 normalize(const Vec3& a);
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Mat3 mat3_inverse(const Mat3& m);

// Pinhole camera. K upper-triangular intrinsics in pixels, E a 4x4 rigid
// world-to-camera transform. Pixel convention: (u,v) in pixels, (0,0) at the
// top-left pixel center, u along width, v along height.
struct Camera {
    Mat3 K{};
    Mat4 E{};
    int height = 0;
    int width = 0;

    Vec3 world_to_cam(const Vec3& p) const;
    Vec3 cam_to_world(const Vec3& p) const;
    Vec3 position() const;  // camera center in world coordinates

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                          double focal, int height, int width);
};

// Homogeneous projection [x,y,z] = K (E [p,1]); pixel = (x/z, y/z).
struct Projection {
    double x, y, z;
    double u() const { return x / z; }
    double v() const { return y / z; }
    bool in_front(double near = 1e-6) const { return z > near; }
};

Projection project(const Vec3& point, const Camera& cam);

// Per-pixel world points from a depth map (depth = camera-frame z).
// Non-positive depths are marked invalid and their point is zeroed.
struct PointMapView {
    int height = 0, width = 0;
    std::vector<Vec3> points;           // row-major H*W
    std::vector<std::uint8_t> valid;
};

PointMapView unproject(const std::vector<double>& depth, const Camera& cam);
Vec3 unproject_pixel(double u, double v, double depth, const Camera& cam);

// Raw Fourier features of a 3D point: for each axis and frequency 2^k
// (k = 0..n_freqs-1), sin(2^k pi x) then cos(2^k pi x).
// Layout: axis-major, then frequency, then (sin, cos). Length 6 * n_freqs.
std::vector<double> fourier_features(const Vec3& point, int n_freqs);

}  // namespace anchorseg
