#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "anchorseg/geometry.hpp"
#include "anchorseg/rng.hpp"

using namespace anchorseg;

namespace {

Camera identity_camera(double focal, double cx, double cy, int h, int w) {
    Camera c;
    c.K = {focal, 0, cx, 0, focal, cy, 0, 0, 1};
    c.E = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    c.height = h;
    c.width = w;
    return c;
}

Camera random_camera(RngStream& rng, int h = 16, int w = 16) {
    Vec3 eye = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.5, 3)};
    Vec3 target = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.8)};
    return Camera::look_at(eye, target, {0, 0, 1}, rng.uniform(20, 80), h, w);
}

// direct 3x4 matrix-multiply oracle for projection
Projection project_oracle(const Vec3& p, const Camera& cam) {
    double P[3][4];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            P[i][j] = 0;
            for (int k = 0; k < 3; ++k) P[i][j] += cam.K[i * 3 + k] * cam.E[k * 4 + j];
        }
    double h[3];
    for (int i = 0; i < 3; ++i)
        h[i] = P[i][0] * p[0] + P[i][1] * p[1] + P[i][2] * p[2] + P[i][3];
    return {h[0], h[1], h[2]};
}

}  // namespace

TEST_CASE("project on-axis point with identity camera") {
    auto cam = identity_camera(1.0, 0.0, 0.0, 4, 4);
    auto pr = project({0, 0, 2}, cam);
    CHECK(pr.u() == doctest::Approx(0.0));
    CHECK(pr.v() == doctest::Approx(0.0));
    CHECK(pr.z == doctest::Approx(2.0));
}

TEST_CASE("project hand case vs 3x4 oracle") {
    auto cam = identity_camera(100.0, 50.0, 50.0, 101, 101);
    auto pr = project({0.5, -0.25, 1.0}, cam);
    CHECK(pr.u() == doctest::Approx(100.0));
    CHECK(pr.v() == doctest::Approx(25.0));
    CHECK(pr.z == doctest::Approx(1.0));
    auto orc = project_oracle({0.5, -0.25, 1.0}, cam);
    CHECK(pr.x == doctest::Approx(orc.x).epsilon(1e-12));
    CHECK(pr.y == doctest::Approx(orc.y).epsilon(1e-12));
    CHECK(pr.z == doctest::Approx(orc.z).epsilon(1e-12));
}

TEST_CASE("behind-camera point has negative z") {
    auto cam = identity_camera(1.0, 0.0, 0.0, 4, 4);
    auto pr = project({0.1, 0.2, -1.5}, cam);
    CHECK(pr.z < 0);
    CHECK_FALSE(pr.in_front());
}

TEST_CASE("look_at produces orthonormal right-handed rotation") {
    RngStream rng(21, "lookat");
    for (int trial = 0; trial < 50; ++trial) {
        auto cam = random_camera(rng);
        Vec3 r0 = {cam.E[0], cam.E[1], cam.E[2]};
        Vec3 r1 = {cam.E[4], cam.E[5], cam.E[6]};
        Vec3 r2 = {cam.E[8], cam.E[9], cam.E[10]};
        CHECK(std::abs(norm(r0) - 1) < 1e-12);
        CHECK(std::abs(norm(r1) - 1) < 1e-12);
        CHECK(std::abs(norm(r2) - 1) < 1e-12);
        CHECK(std::abs(dot(r0, r1)) < 1e-12);
        CHECK(std::abs(dot(r1, r2)) < 1e-12);
        Vec3 c = cross(r0, r1);
        CHECK(norm(c - r2) < 1e-12);  // det +1
    }
}

TEST_CASE("unproject of constant depth with centered identity camera is a fronto-parallel plane") {
    auto cam = identity_camera(10.0, 1.5, 1.5, 4, 4);
    std::vector<double> depth(16, 2.5);
    auto pm = unproject(depth, cam);
    for (auto& p : pm.points) CHECK(p[2] == doctest::Approx(2.5).epsilon(1e-12));
    for (auto v : pm.valid) CHECK(v == 1);
}

TEST_CASE("non-positive depth marked invalid") {
    auto cam = identity_camera(10.0, 1.5, 1.5, 2, 2);
    std::vector<double> depth = {1.0, 0.0, -2.0, 3.0};
    auto pm = unproject(depth, cam);
    CHECK(pm.valid[0] == 1);
    CHECK(pm.valid[1] == 0);
    CHECK(pm.valid[2] == 0);
    CHECK(pm.valid[3] == 1);
}

TEST_CASE("project after unproject recovers the pixel grid") {
    RngStream rng(22, "roundtrip");
    for (int trial = 0; trial < 20; ++trial) {
        auto cam = random_camera(rng, 8, 8);
        std::vector<double> depth(64);
        for (auto& d : depth) d = rng.uniform(0.5, 5.0);
        auto pm = unproject(depth, cam);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                auto pr = project(pm.points[y * 8 + x], cam);
                CHECK(std::abs(pr.u() - x) < 1e-9);
                CHECK(std::abs(pr.v() - y) < 1e-9);
                CHECK(std::abs(pr.z - depth[y * 8 + x]) < 1e-9);
            }
    }
}

TEST_CASE("world-frame gauge invariance under a rigid transform") {
    RngStream rng(23, "gauge");
    auto cam = random_camera(rng);
    // rigid T: rotation about z by phi plus translation
    double phi = 0.7;
    Mat3 R = {std::cos(phi), -std::sin(phi), 0, std::sin(phi), std::cos(phi), 0, 0, 0, 1};
    Vec3 t = {0.3, -1.2, 0.5};
    for (int trial = 0; trial < 100; ++trial) {
        Vec3 p = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        Vec3 tp = mat3_apply(R, p) + t;
        // cam' = cam composed with T^-1: E' = E * [R|t]^-1
        Camera cam2 = cam;
        Mat3 Rc = {cam.E[0], cam.E[1], cam.E[2], cam.E[4], cam.E[5], cam.E[6], cam.E[8], cam.E[9], cam.E[10]};
        Vec3 tc = {cam.E[3], cam.E[7], cam.E[11]};
        // E' rotation = Rc R^T, translation = tc - Rc R^T t
        Mat3 Rt = {R[0], R[3], R[6], R[1], R[4], R[7], R[2], R[5], R[8]};
        Mat3 Rp = mat3_mul(Rc, Rt);
        Vec3 tshift = mat3_apply(Rp, t);
        Vec3 tp2 = {tc[0] - tshift[0], tc[1] - tshift[1], tc[2] - tshift[2]};
        cam2.E = {Rp[0], Rp[1], Rp[2], tp2[0], Rp[3], Rp[4], Rp[5], tp2[1], Rp[6], Rp[7], Rp[8], tp2[2], 0, 0, 0, 1};
        auto a = project(p, cam);
        auto b = project(tp, cam2);
        CHECK(std::abs(a.x - b.x) < 1e-9);
        CHECK(std::abs(a.y - b.y) < 1e-9);
        CHECK(std::abs(a.z - b.z) < 1e-9);
    }
}

TEST_CASE("fourier features: origin, length, distinctness") {
    auto f = fourier_features({0, 0, 0}, 8);
    CHECK(f.size() == 48);
    for (std::size_t i = 0; i < f.size(); i += 2) {
        CHECK(f[i] == 0.0);       // sin terms
        CHECK(f[i + 1] == 1.0);   // cos terms
    }

    // collision scan over a 17^3 grid within scene bounds
    std::vector<std::vector<double>> seen;
    for (int a = 0; a < 17; ++a)
        for (int b = 0; b < 17; ++b)
            for (int c = 0; c < 17; ++c) {
                Vec3 p = {-2.0 + 4.0 * a / 16.0, -2.0 + 4.0 * b / 16.0, 2.0 * c / 16.0};
                seen.push_back(fourier_features(p, 8));
            }
    std::sort(seen.begin(), seen.end());
    auto dup = std::adjacent_find(seen.begin(), seen.end());
    CHECK(dup == seen.end());
}

TEST_CASE("fourier features reject n_freqs < 1") {
    CHECK_THROWS(fourier_features({0, 0, 0}, 0));
}
