#include "anchorseg/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "anchorseg/blob_io.hpp"
#include "anchorseg/rng.hpp"

namespace anchorseg {

namespace {

constexpr double kNoHit = std::numeric_limits<double>::infinity();

struct Hit {
    double t = kNoHit;
    Vec3 normal{};
};

// o + t*d against a sphere; first t > eps
Hit ray_sphere(const Vec3& o, const Vec3& d, const Sphere& s) {
    Vec3 oc = o - s.center;
    double a = dot(d, d);
    double b = dot(d, oc);
    double c = dot(oc, oc) - s.radius * s.radius;
    double disc = b * b - a * c;
    Hit h;
    if (disc < 0) return h;
    double sq = std::sqrt(disc);
    double t = (-b - sq) / a;
    if (t <= 1e-9) t = (-b + sq) / a;
    if (t <= 1e-9) return h;
    h.t = t;
    Vec3 p = o + d * t;
    h.normal = (p - s.center) * (1.0 / s.radius);
    return h;
}

Hit ray_box(const Vec3& o, const Vec3& d, const Box& b) {
    double tmin = -kNoHit, tmax = kNoHit;
    int enter_axis = -1;
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0.0) {
            if (o[a] < b.lo[a] || o[a] > b.hi[a]) return {};
            continue;
        }
        double t1 = (b.lo[a] - o[a]) / d[a];
        double t2 = (b.hi[a] - o[a]) / d[a];
        if (t1 > t2) std::swap(t1, t2);
        if (t1 > tmin) {
            tmin = t1;
            enter_axis = a;
        }
        tmax = std::min(tmax, t2);
    }
    Hit h;
    if (tmin > tmax || tmax <= 1e-9) return h;
    if (tmin > 1e-9) {
        h.t = tmin;
        h.normal = Vec3{0, 0, 0};
        h.normal[enter_axis] = d[enter_axis] > 0 ? -1.0 : 1.0;
    }
    return h;
}

// exit of the room box as seen from inside; normal points inward
Hit ray_room_exit(const Vec3& o, const Vec3& d, const SceneConfig& cfg) {
    Vec3 lo = {-cfg.room_x, -cfg.room_y, 0.0};
    Vec3 hi = {cfg.room_x, cfg.room_y, cfg.room_z};
    double texit = kNoHit;
    int axis = -1;
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0.0) continue;
        double t = (d[a] > 0 ? hi[a] - o[a] : lo[a] - o[a]) / d[a];
        if (t < texit) {
            texit = t;
            axis = a;
        }
    }
    Hit h;
    h.t = texit;
    h.normal = Vec3{0, 0, 0};
    if (axis >= 0) h.normal[axis] = d[axis] > 0 ? -1.0 : 1.0;
    return h;
}

bool boxes_overlap(const Box& a, const Box& b, double eps) {
    for (int i = 0; i < 3; ++i)
        if (a.hi[i] <= b.lo[i] + eps || b.hi[i] <= a.lo[i] + eps) return false;
    return true;
}

bool primitives_overlap(const Primitive& a, const Primitive& b) {
    const double eps = 1e-6;
    if (a.is_sphere && b.is_sphere) {
        double d = norm(a.sphere.center - b.sphere.center);
        return d < a.sphere.radius + b.sphere.radius - eps;
    }
    if (!a.is_sphere && !b.is_sphere) return boxes_overlap(a.box, b.box, eps);
    const Sphere& s = a.is_sphere ? a.sphere : b.sphere;
    const Box& bx = a.is_sphere ? b.box : a.box;
    double d2 = 0;
    for (int i = 0; i < 3; ++i) {
        double v = std::clamp(s.center[i], bx.lo[i], bx.hi[i]) - s.center[i];
        d2 += v * v;
    }
    return d2 < s.radius * s.radius - eps;
}

Vec3 instance_albedo(int k, RngStream& rng) {
    // golden-ratio hue walk keeps albedos well separated
    double h = std::fmod(0.12 + 0.61803398875 * k, 1.0);
    double s = 0.55 + 0.25 * rng.next_double();
    double v = 0.65 + 0.3 * rng.next_double();
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    double m = v - c;
    return {r + m, g + m, b + m};
}

std::vector<Primitive> place_primitives(const SceneConfig& cfg, int n, RngStream& rng) {
    std::vector<Primitive> prims;
    // keep objects in the central region so the camera ring sees them well
    double margin = 0.45;
    double px = std::min(cfg.room_x - margin, 1.0);
    double py = std::min(cfg.room_y - margin, 1.0);
    for (int k = 0; k < n; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            Primitive p;
            p.albedo = instance_albedo(k, rng);
            bool try_touch = !prims.empty() && rng.next_double() < cfg.touch_prob;
            if (try_touch) {
                // abutting box pair: share a vertical face with an earlier box
                const Primitive* base = nullptr;
                for (auto& q : prims)
                    if (!q.is_sphere) base = &q;
                if (base) {
                    p.is_sphere = false;
                    double hx = rng.uniform(0.12, 0.3), hy = rng.uniform(0.12, 0.3);
                    double hz = rng.uniform(0.25, 0.6);
                    int side = static_cast<int>(rng.next_below(4));
                    double cx, cy;
                    if (side == 0) { cx = base->box.hi[0] + hx; cy = (base->box.lo[1] + base->box.hi[1]) / 2; }
                    else if (side == 1) { cx = base->box.lo[0] - hx; cy = (base->box.lo[1] + base->box.hi[1]) / 2; }
                    else if (side == 2) { cy = base->box.hi[1] + hy; cx = (base->box.lo[0] + base->box.hi[0]) / 2; }
                    else { cy = base->box.lo[1] - hy; cx = (base->box.lo[0] + base->box.hi[0]) / 2; }
                    p.box = {{cx - hx, cy - hy, 0.0}, {cx + hx, cy + hy, hz}};
                    if (std::abs(cx) > px || std::abs(cy) > py) continue;
                } else {
                    try_touch = false;
                }
            }
            if (!try_touch) {
                if (rng.next_double() < 0.5) {
                    p.is_sphere = true;
                    double r = rng.uniform(0.18, 0.34);
                    p.sphere = {{rng.uniform(-px, px), rng.uniform(-py, py), r}, r};
                } else {
                    p.is_sphere = false;
                    double hx = rng.uniform(0.12, 0.3), hy = rng.uniform(0.12, 0.3);
                    double hz = rng.uniform(0.25, 0.6);
                    double cx = rng.uniform(-px, px), cy = rng.uniform(-py, py);
                    p.box = {{cx - hx, cy - hy, 0.0}, {cx + hx, cy + hy, hz}};
                }
            }
            bool clash = false;
            for (const auto& q : prims) clash = clash || primitives_overlap(p, q);
            if (!clash) {
                prims.push_back(p);
                placed = true;
            }
        }
        if (!placed)
            throw GenerationError("primitive placement failed after bounded retries (room too crowded)");
    }
    return prims;
}

}  // namespace

SceneSample generate_scene(const SceneConfig& cfg) {
    if (cfg.height % 32 != 0 || cfg.width % 32 != 0)
        throw GenerationError("image size must be divisible by 32");
    RngStream layout(cfg.seed, "scene-layout");
    RngStream camrng(cfg.seed, "scene-cameras");
    RngStream noise(cfg.seed, "scene-noise");

    int n_inst = cfg.n_instances_min +
                 static_cast<int>(layout.next_below(
                     static_cast<std::uint64_t>(cfg.n_instances_max - cfg.n_instances_min + 1)));

    SceneSample sm;
    sm.n_views = cfg.n_views;
    sm.height = cfg.height;
    sm.width = cfg.width;
    sm.instance_count = n_inst;
    sm.primitives = place_primitives(cfg, n_inst, layout);

    double focal = cfg.focal_scale * cfg.width;
    for (int s = 0; s < cfg.n_views; ++s) {
        double ang = 2 * M_PI * s / cfg.n_views + camrng.uniform(-0.25, 0.25);
        double rad = cfg.ring_radius + camrng.uniform(-0.12, 0.12);
        double hgt = cfg.ring_height + camrng.uniform(-0.15, 0.15);
        Vec3 eye = {rad * std::cos(ang), rad * std::sin(ang), hgt};
        Vec3 target = {camrng.uniform(-0.08, 0.08), camrng.uniform(-0.08, 0.08), 0.3};
        sm.cameras.push_back(Camera::look_at(eye, target, {0, 0, 1}, focal, cfg.height, cfg.width));
    }

    std::size_t hw = static_cast<std::size_t>(cfg.height) * cfg.width;
    sm.images.assign(static_cast<std::size_t>(cfg.n_views) * 3 * hw, 0.0);
    sm.depths.assign(static_cast<std::size_t>(cfg.n_views) * hw, 0.0);
    sm.instance_ids.assign(static_cast<std::size_t>(cfg.n_views) * hw, 0);

    Vec3 light = normalize({0.35, -0.5, 0.8});
    for (int s = 0; s < cfg.n_views; ++s) {
        const Camera& cam = sm.cameras[s];
        Mat3 Kinv = mat3_inverse(cam.K);
        Vec3 o = cam.position();
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                Vec3 dc = mat3_apply(Kinv, {static_cast<double>(x), static_cast<double>(y), 1.0});
                Vec3 d = cam.cam_to_world(dc) - o;  // R^T dc, dc.z = 1 so t equals camera depth
                Hit best = ray_room_exit(o, d, cfg);
                int best_id = 0;
                for (std::size_t k = 0; k < sm.primitives.size(); ++k) {
                    const auto& p = sm.primitives[k];
                    Hit h = p.is_sphere ? ray_sphere(o, d, p.sphere) : ray_box(o, d, p.box);
                    if (h.t < best.t) {
                        best = h;
                        best_id = static_cast<int>(k) + 1;
                    }
                }
                std::size_t pi = sm.pixel_index(s, y, x);
                sm.depths[pi] = best.t;
                sm.instance_ids[pi] = static_cast<std::uint16_t>(best_id);
                Vec3 albedo;
                if (best_id == 0) {
                    // walls and floor: neutral grays keyed to the surface orientation
                    if (best.normal[2] > 0.5) albedo = {0.42, 0.4, 0.38};         // floor
                    else if (best.normal[2] < -0.5) albedo = {0.3, 0.3, 0.32};    // ceiling
                    else albedo = {0.36, 0.37, 0.4};
                } else {
                    albedo = sm.primitives[best_id - 1].albedo;
                }
                double lambert = 0.35 + 0.65 * std::max(0.0, dot(best.normal, light));
                for (int c = 0; c < 3; ++c) {
                    double v = albedo[c] * lambert + noise.uniform(-0.02, 0.02);
                    v = std::clamp(v, 0.0, 1.0);
                    int q = static_cast<int>(std::lround(v * 255.0));
                    sm.images[(static_cast<std::size_t>(s) * 3 + c) * hw + y * cfg.width + x] = q / 255.0;
                }
            }
    }
    return sm;
}

void write_scene(const SceneSample& sm, const std::string& dir) {
    Container c;
    std::size_t hw = static_cast<std::size_t>(sm.height) * sm.width;
    std::vector<std::uint8_t> img_u8(sm.images.size());
    for (std::size_t i = 0; i < sm.images.size(); ++i)
        img_u8[i] = static_cast<std::uint8_t>(std::lround(sm.images[i] * 255.0));
    c.set("images", Field::u8({sm.n_views, 3, sm.height, sm.width}, img_u8));
    c.set("depths", Field::f64({sm.n_views, sm.height, sm.width}, sm.depths));
    std::vector<double> K, E;
    for (const auto& cam : sm.cameras) {
        K.insert(K.end(), cam.K.begin(), cam.K.end());
        E.insert(E.end(), cam.E.begin(), cam.E.end());
    }
    c.set("intrinsics", Field::f64({sm.n_views, 3, 3}, K));
    c.set("extrinsics", Field::f64({sm.n_views, 4, 4}, E));
    c.set("instance_ids", Field::u16({sm.n_views, sm.height, sm.width}, sm.instance_ids));
    c.set("instance_count", Field::u16({1}, {static_cast<std::uint16_t>(sm.instance_count)}));
    (void)hw;
    c.write(dir);
}

SceneSample read_scene(const std::string& dir) {
    Container c = Container::read(dir);
    const Field& img = c.get("images");
    if (img.shape.size() != 4 || img.shape[1] != 3) throw FormatError("field 'images': bad shape");
    SceneSample sm;
    sm.n_views = static_cast<int>(img.shape[0]);
    sm.height = static_cast<int>(img.shape[2]);
    sm.width = static_cast<int>(img.shape[3]);
    auto u8 = img.as_u8();
    sm.images.resize(u8.size());
    for (std::size_t i = 0; i < u8.size(); ++i) sm.images[i] = u8[i] / 255.0;
    sm.depths = c.get("depths").as_f64();
    sm.instance_ids = c.get("instance_ids").as_u16();
    sm.instance_count = c.get("instance_count").as_u16().at(0);
    auto K = c.get("intrinsics").as_f64();
    auto E = c.get("extrinsics").as_f64();
    if (K.size() != static_cast<std::size_t>(sm.n_views) * 9 ||
        E.size() != static_cast<std::size_t>(sm.n_views) * 16)
        throw FormatError("field 'intrinsics'/'extrinsics': bad shape");
    if (sm.depths.size() != static_cast<std::size_t>(sm.n_views) * sm.height * sm.width)
        throw FormatError("field 'depths': bad shape");
    if (sm.instance_ids.size() != sm.depths.size())
        throw FormatError("field 'instance_ids': bad shape");
    for (int s = 0; s < sm.n_views; ++s) {
        Camera cam;
        std::copy(K.begin() + s * 9, K.begin() + (s + 1) * 9, cam.K.begin());
        std::copy(E.begin() + s * 16, E.begin() + (s + 1) * 16, cam.E.begin());
        cam.height = sm.height;
        cam.width = sm.width;
        sm.cameras.push_back(cam);
    }
    return sm;
}

int multiview_consistency_violations(const SceneSample& sm, int n_checks, std::uint64_t seed) {
    RngStream rng(seed, "consistency-check");
    // gather foreground pixels
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < sm.instance_ids.size(); ++i)
        if (sm.instance_ids[i] != 0) fg.push_back(i);
    if (fg.empty()) return 0;
    int violations = 0;
    std::size_t hw = static_cast<std::size_t>(sm.height) * sm.width;
    for (int n = 0; n < n_checks; ++n) {
        std::size_t i = fg[rng.next_below(fg.size())];
        int s = static_cast<int>(i / hw);
        int y = static_cast<int>((i % hw) / sm.width);
        int x = static_cast<int>(i % sm.width);
        Vec3 p = unproject_pixel(x, y, sm.depths[i], sm.cameras[s]);
        std::uint16_t id = sm.instance_ids[i];
        for (int s2 = 0; s2 < sm.n_views; ++s2) {
            if (s2 == s) continue;
            auto pr = project(p, sm.cameras[s2]);
            if (!pr.in_front()) continue;
            int u = static_cast<int>(std::lround(pr.u()));
            int v = static_cast<int>(std::lround(pr.v()));
            if (u < 0 || u >= sm.width || v < 0 || v >= sm.height) continue;
            std::uint16_t id2 = sm.id_at(s2, v, u);
            double d2 = sm.depth_at(s2, v, u);
            // occluded if something is clearly in front of the reprojected point
            bool occluded = d2 < pr.z - 0.05;
            if (id2 != id && !occluded) {
                // allow one-pixel boundary rasterization slack
                bool near_match = false;
                for (int dv = -1; dv <= 1 && !near_match; ++dv)
                    for (int du = -1; du <= 1 && !near_match; ++du) {
                        int uu = u + du, vv = v + dv;
                        if (uu < 0 || uu >= sm.width || vv < 0 || vv >= sm.height) continue;
                        if (sm.id_at(s2, vv, uu) == id) near_match = true;
                    }
                if (!near_match) ++violations;
            }
        }
    }
    return violations;
}

}  // namespace anchorseg
