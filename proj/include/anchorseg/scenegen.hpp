#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchorseg/geometry.hpp"

namespace anchorseg {

class GenerationError : public std::runtime_error {
public:
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SceneConfig {
    int n_views = 4;
    int height = 64;
    int width = 64;
    int n_instances_min = 2;
    int n_instances_max = 6;
    // room interior: x in [-room_x, room_x], y in [-room_y, room_y], z in [0, room_z]
    double room_x = 2.0;
    double room_y = 2.0;
    double room_z = 2.0;
    double ring_radius = 1.55;
    double ring_height = 1.2;
    double touch_prob = 0.3;
    double focal_scale = 0.9;  // focal = focal_scale * width
    std::uint64_t seed = 0;
};

// Analytic scene primitives; exact ray intersections give oracle-grade depth.
struct Sphere {
    Vec3 center;
    double radius;
};
struct Box {
    Vec3 lo, hi;
};
struct Primitive {
    bool is_sphere = false;
    Sphere sphere{};
    Box box{};
    Vec3 albedo{};
};

struct SceneSample {
    int n_views = 0, height = 0, width = 0;
    std::vector<double> images;          // S x 3 x H x W, values are exact k/255
    std::vector<double> depths;          // S x H x W, camera-frame z
    std::vector<Camera> cameras;
    std::vector<std::uint16_t> instance_ids;  // S x H x W, 0 = background
    int instance_count = 0;
    std::vector<Primitive> primitives;   // ground-truth geometry (not serialized)

    std::size_t pixel_index(int s, int y, int x) const {
        return (static_cast<std::size_t>(s) * height + y) * width + x;
    }
    double depth_at(int s, int y, int x) const { return depths[pixel_index(s, y, x)]; }
    std::uint16_t id_at(int s, int y, int x) const { return instance_ids[pixel_index(s, y, x)]; }
};

SceneSample generate_scene(const SceneConfig& cfg);

void write_scene(const SceneSample& sample, const std::string& dir);
SceneSample read_scene(const std::string& dir);

// Verifies that unprojected pixels of one view reproject into other views
// onto the same instance or an occluder. Returns the violation count over
// n_checks randomly drawn foreground pixels.
int multiview_consistency_violations(const SceneSample& sample, int n_checks, std::uint64_t seed);

}  // namespace anchorseg
