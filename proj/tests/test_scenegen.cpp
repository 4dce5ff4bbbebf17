#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "anchorseg/blob_io.hpp"
#include "anchorseg/scenegen.hpp"

using namespace anchorseg;
namespace fs = std::filesystem;

namespace {

SceneConfig small_config(std::uint64_t seed) {
    SceneConfig cfg;
    cfg.n_views = 4;
    cfg.height = 64;
    cfg.width = 64;
    cfg.seed = seed;
    return cfg;
}

struct TempDir {
    fs::path path;
    TempDir(const char* tag) : path(fs::temp_directory_path() / (std::string("anchorseg_") + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("same seed twice gives bit-identical scenes") {
    auto a = generate_scene(small_config(42));
    auto b = generate_scene(small_config(42));
    CHECK(a.images == b.images);
    CHECK(a.depths == b.depths);
    CHECK(a.instance_ids == b.instance_ids);
    for (int s = 0; s < a.n_views; ++s) {
        CHECK(a.cameras[s].K == b.cameras[s].K);
        CHECK(a.cameras[s].E == b.cameras[s].E);
    }
}

TEST_CASE("different seeds differ") {
    auto a = generate_scene(small_config(1));
    auto b = generate_scene(small_config(2));
    CHECK(a.depths != b.depths);
}

TEST_CASE("indivisible resolution rejected") {
    auto cfg = small_config(0);
    cfg.height = 60;
    CHECK_THROWS_AS(generate_scene(cfg), GenerationError);
}

TEST_CASE("empty scene: ids all zero, depth is the room distance field") {
    auto cfg = small_config(7);
    cfg.n_instances_min = cfg.n_instances_max = 0;
    auto sm = generate_scene(cfg);
    CHECK(sm.instance_count == 0);
    for (auto id : sm.instance_ids) CHECK(id == 0);
    for (auto d : sm.depths) {
        CHECK(d > 0);
        CHECK(std::isfinite(d));
    }
}

TEST_CASE("instance ids are contiguous 1..instance_count and each appears in some view") {
    for (std::uint64_t seed : {3u, 11u, 29u, 77u}) {
        auto sm = generate_scene(small_config(seed));
        std::set<int> present;
        for (auto id : sm.instance_ids)
            if (id) present.insert(id);
        CHECK(static_cast<int>(present.size()) == sm.instance_count);
        for (int k = 1; k <= sm.instance_count; ++k) CHECK(present.count(k) == 1);
    }
}

TEST_CASE("sphere depth minimum matches analytic ray-sphere distance") {
    // radial distance to the nearest visible sphere point is |cam - center| - r
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 30 && checked < 4; ++seed) {
        auto sm = generate_scene(small_config(seed));
        for (std::size_t k = 0; k < sm.primitives.size(); ++k) {
            if (!sm.primitives[k].is_sphere) continue;
            const auto& sp = sm.primitives[k].sphere;
            for (int s = 0; s < sm.n_views; ++s) {
                const Camera& cam = sm.cameras[s];
                Vec3 o = cam.position();
                double dist = norm(sp.center - o);
                // nearest sphere point must itself be visible and unoccluded
                Vec3 q = sp.center - normalize(sp.center - o) * sp.radius;
                auto pr = project(q, cam);
                if (!pr.in_front()) continue;
                int u = static_cast<int>(std::lround(pr.u())), v = static_cast<int>(std::lround(pr.v()));
                if (u < 2 || u >= sm.width - 2 || v < 2 || v >= sm.height - 2) continue;
                if (sm.id_at(s, v, u) != static_cast<int>(k) + 1) continue;
                Mat3 Kinv = mat3_inverse(cam.K);
                double rmin = 1e300;
                for (int y = 0; y < sm.height; ++y)
                    for (int x = 0; x < sm.width; ++x) {
                        if (sm.id_at(s, y, x) != static_cast<int>(k) + 1) continue;
                        Vec3 dir = mat3_apply(Kinv, {static_cast<double>(x), static_cast<double>(y), 1.0});
                        rmin = std::min(rmin, sm.depth_at(s, y, x) * norm(dir));
                    }
                CHECK(rmin == doctest::Approx(dist - sp.radius).epsilon(5e-3));
                ++checked;
            }
        }
    }
    CHECK(checked >= 4);
}

TEST_CASE("multi-view consistency on 1000 random foreground pixels") {
    for (std::uint64_t seed : {5u, 123u}) {
        auto sm = generate_scene(small_config(seed));
        CHECK(multiview_consistency_violations(sm, 1000, seed) == 0);
    }
}

TEST_CASE("scene write/read round trip is bit exact") {
    TempDir tmp("scene_rt");
    auto sm = generate_scene(small_config(17));
    write_scene(sm, tmp.path.string());
    auto back = read_scene(tmp.path.string());
    CHECK(back.n_views == sm.n_views);
    CHECK(back.height == sm.height);
    CHECK(back.width == sm.width);
    CHECK(back.images == sm.images);
    CHECK(back.depths == sm.depths);
    CHECK(back.instance_ids == sm.instance_ids);
    CHECK(back.instance_count == sm.instance_count);
    for (int s = 0; s < sm.n_views; ++s) {
        CHECK(back.cameras[s].K == sm.cameras[s].K);
        CHECK(back.cameras[s].E == sm.cameras[s].E);
    }
}

TEST_CASE("payload corruption is detected as a checksum error") {
    TempDir tmp("scene_corrupt");
    auto sm = generate_scene(small_config(23));
    write_scene(sm, tmp.path.string());
    auto blob = tmp.path / "data.bin";
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    char c;
    f.seekg(100);
    f.get(c);
    f.seekp(100);
    c = static_cast<char>(c ^ 0x40);
    f.put(c);
    f.close();
    CHECK_THROWS_WITH_AS(read_scene(tmp.path.string()),
                         doctest::Contains("checksum mismatch"), FormatError);
}

TEST_CASE("missing manifest is a format error") {
    TempDir tmp("scene_nomanifest");
    CHECK_THROWS_AS(read_scene(tmp.path.string()), FormatError);
}

TEST_CASE("truncated payload is detected and names the field") {
    TempDir tmp("scene_trunc");
    auto sm = generate_scene(small_config(31));
    write_scene(sm, tmp.path.string());
    fs::resize_file(tmp.path / "data.bin", 64);
    try {
        read_scene(tmp.path.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
}
