#include <doctest.h>

#include <fstream>

#include "sceneseg/scene_io.hpp"
#include "test_support.hpp"

using namespace sceneseg;

namespace {

std::vector<uint8_t> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelParams random_params(uint64_t seed) {
    Rng rng(seed);
    const size_t ks[] = {2, 4, 8, 12};
    const size_t rs[] = {4, 8, 16};
    const size_t bands = 1 + rng.uniform_index(4);
    ModelParams p = init_params(seed, ks[rng.uniform_index(4)], rs[rng.uniform_index(3)], bands);
    for (auto& blk : p.blocks) {
        for (auto& v : blk.bn.running_mean) v = float(rng.normal());
        for (auto& v : blk.bn.running_var) v = float(std::abs(rng.normal())) + 0.1f;
        blk.bn.initialized = true;
    }
    return p;
}

}  // namespace

TEST_SUITE("load_scene") {
    TEST_CASE("z-score of a two-point distribution") {
        testsup::TempDir tmp("scene");
        write_png8(tmp / "s.png", 2, 2, 1, {0, 0, 100, 100});
        const Scene s = load_scene(tmp / "s.png", true);
        CHECK(s.bands == 1);
        CHECK(s.data[0] == doctest::Approx(-1.0f));
        CHECK(s.data[1] == doctest::Approx(-1.0f));
        CHECK(s.data[2] == doctest::Approx(1.0f));
        CHECK(s.data[3] == doctest::Approx(1.0f));
        CHECK(s.norm_stats[0].mean == doctest::Approx(50.0));
        CHECK(s.norm_stats[0].std == doctest::Approx(50.0));
    }

    TEST_CASE("constant band becomes all zeros without dividing by zero") {
        testsup::TempDir tmp("scene");
        write_png8(tmp / "c.png", 2, 2, 1, {42, 42, 42, 42});
        const Scene s = load_scene(tmp / "c.png", true);
        for (float v : s.data) CHECK(v == 0.0f);
    }

    TEST_CASE("three-band 8-bit tile loads with bands = 3") {
        testsup::TempDir tmp("scene");
        std::vector<uint8_t> px(4 * 5 * 3);
        for (size_t i = 0; i < px.size(); ++i) px[i] = uint8_t((i * 37) % 256);
        write_png8(tmp / "t.png", 4, 5, 3, px);
        const Scene s = load_scene(tmp / "t.png", true);
        CHECK(s.bands == 3);
        CHECK(s.height == 4);
        CHECK(s.width == 5);
    }

    TEST_CASE("16-bit PNG values survive the round trip") {
        testsup::TempDir tmp("scene");
        std::vector<uint16_t> px = {0, 5000, 30000, 65535, 1, 2};
        write_png16(tmp / "w.png", 2, 3, 1, px);
        const Scene s = load_scene(tmp / "w.png", false);
        for (size_t i = 0; i < px.size(); ++i) CHECK(s.data[i] == float(px[i]));
    }

    TEST_CASE("uncompressed TIFF loads for 8- and 16-bit") {
        testsup::TempDir tmp("scene");
        std::vector<uint16_t> px(3 * 4 * 3);
        for (size_t i = 0; i < px.size(); ++i) px[i] = uint16_t(i * 999);
        write_tiff(tmp / "a.tif", 3, 4, 3, 16, px);
        const Scene s16 = load_scene(tmp / "a.tif", false);
        CHECK(s16.bands == 3);
        CHECK(s16.at(0, 0, 1) == float(px[3]));
        CHECK(s16.at(2, 2, 3) == float(px[(2 * 4 + 3) * 3 + 2]));

        std::vector<uint16_t> px8(2 * 2 * 2);
        for (size_t i = 0; i < px8.size(); ++i) px8[i] = uint16_t(i * 20);
        write_tiff(tmp / "b.tif", 2, 2, 2, 8, px8);
        const Scene s8 = load_scene(tmp / "b.tif", false);
        CHECK(s8.bands == 2);
        CHECK(s8.at(1, 1, 1) == float(px8[(1 * 2 + 1) * 2 + 1]));
    }

    TEST_CASE("denormalize recovers raw values") {
        testsup::TempDir tmp("scene");
        std::vector<uint8_t> px(6 * 6 * 3);
        Rng rng(77);
        for (auto& v : px) v = uint8_t(rng.uniform_index(256));
        write_png8(tmp / "r.png", 6, 6, 3, px);
        const Scene norm = load_scene(tmp / "r.png", true);
        const Scene raw = load_scene(tmp / "r.png", false);
        const Scene back = denormalize(norm);
        for (size_t i = 0; i < raw.data.size(); ++i)
            CHECK(std::abs(back.data[i] - raw.data[i]) <=
                  1e-4f * std::max(1.0f, std::abs(raw.data[i])));
    }

    TEST_CASE("garbage bytes are an I/O error") {
        testsup::TempDir tmp("scene");
        std::ofstream(tmp / "x.png") << "not an image";
        CHECK_THROWS_AS(load_scene(tmp / "x.png"), IoError);
        CHECK_THROWS_AS(load_scene(tmp / "missing.png"), IoError);
    }

    TEST_CASE("compressed TIFF is rejected with format detail") {
        testsup::TempDir tmp("scene");
        std::vector<uint16_t> px(4, 1);
        write_tiff(tmp / "c.tif", 2, 2, 1, 8, px);
        auto bytes = slurp(tmp / "c.tif");
        // patch the Compression tag value (type SHORT) from 1 to 5 (LZW)
        bool patched = false;
        for (size_t i = 8; i + 12 <= bytes.size(); ++i) {
            if (bytes[i] == 0x03 && bytes[i + 1] == 0x01 && bytes[i + 2] == 0x03) {
                bytes[i + 8] = 5;
                patched = true;
                break;
            }
        }
        REQUIRE(patched);
        std::ofstream(tmp / "c2.tif", std::ios::binary)
            .write(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
        CHECK_THROWS_WITH_AS(load_scene(tmp / "c2.tif"), doctest::Contains("compress"), IoError);
    }
}

TEST_SUITE("model files") {
    TEST_CASE("save -> load -> save is byte-identical for 20 random parameter sets") {
        testsup::TempDir tmp("model");
        for (uint64_t seed = 1; seed <= 20; ++seed) {
            const ModelParams p = random_params(seed);
            save_model(p, tmp / "a.bin");
            const ModelParams q = load_model(tmp / "a.bin");
            save_model(q, tmp / "b.bin");
            CHECK(slurp(tmp / "a.bin") == slurp(tmp / "b.bin"));
            CHECK(q.feature_count == p.feature_count);
            CHECK(q.input_bands == p.input_bands);
            CHECK(q.stats_initialized() == p.stats_initialized());
        }
    }

    TEST_CASE("file header starts with magic, version, K, r") {
        testsup::TempDir tmp("model");
        save_model(init_params(1, 8, 8, 3), tmp / "m.bin");
        const auto bytes = slurp(tmp / "m.bin");
        const std::vector<uint8_t> want = {0x53, 0x53, 0x45, 0x47, 1, 0, 0, 0,
                                           8,    0,    0,    0,    8, 0, 0, 0};
        REQUIRE(bytes.size() > want.size());
        CHECK(std::equal(want.begin(), want.end(), bytes.begin()));
    }

    TEST_CASE("corrupting byte 0 is a magic error") {
        testsup::TempDir tmp("model");
        save_model(init_params(2, 8, 8, 3), tmp / "m.bin");
        auto bytes = slurp(tmp / "m.bin");
        bytes[0] ^= 0xFF;
        std::ofstream(tmp / "bad.bin", std::ios::binary)
            .write(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
        CHECK_THROWS_WITH_AS(load_model(tmp / "bad.bin"), doctest::Contains("magic"), FormatError);
    }

    TEST_CASE("truncation reports the byte offset") {
        testsup::TempDir tmp("model");
        save_model(init_params(3, 8, 8, 3), tmp / "m.bin");
        auto bytes = slurp(tmp / "m.bin");
        bytes.resize(bytes.size() / 2);
        std::ofstream(tmp / "cut.bin", std::ios::binary)
            .write(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
        try {
            load_model(tmp / "cut.bin");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset > 0);
            CHECK(std::string(e.what()).find("truncated") != std::string::npos);
        }
    }
}

TEST_SUITE("palettes") {
    TEST_CASE("JSON palette round trip") {
        testsup::TempDir tmp("pal");
        std::ofstream(tmp / "p.json")
            << R"([{"name":"water","rgb":[0,0,128]},{"name":"land","rgb":[0,128,0]}])";
        const Palette p = load_palette(tmp / "p.json");
        REQUIRE(p.size() == 2);
        CHECK(p.entries[0].name == "water");
        CHECK(p.entries[1].rgb == std::array<uint8_t, 3>{0, 128, 0});
        CHECK(p.find_color(0, 0, 128) == 0);
        CHECK(p.find_name("land") == 1);
    }

    TEST_CASE("duplicate colors are rejected") {
        Palette p{{{"a", {1, 2, 3}}, {"b", {1, 2, 3}}}};
        CHECK_THROWS_AS(p.validate(), ConfigError);
    }

    TEST_CASE("default palette matches the reference legend") {
        const Palette p = default_palette();
        CHECK(p.entries[0].rgb == std::array<uint8_t, 3>{255, 255, 255});  // impervious
        CHECK(p.entries[1].rgb == std::array<uint8_t, 3>{0, 0, 255});      // buildings
        CHECK(p.entries[3].rgb == std::array<uint8_t, 3>{0, 255, 0});      // trees
        p.validate();
        fallback_palette().validate();
    }
}

TEST_SUITE("segmentation maps") {
    TEST_CASE("class-mapped pixels use the palette legend colors") {
        testsup::TempDir tmp("seg");
        SegmentationMap map{1, 2, 2, {0, 1}};
        // cluster 0 -> buildings (class 1), cluster 1 -> trees (class 3)
        write_segmentation(map, default_palette(), std::vector<int32_t>{1, 3}, tmp / "m.png");
        const RawImage img = read_image(tmp / "m.png");
        CHECK(img.at(0, 0, 0) == 0);
        CHECK(img.at(0, 0, 1) == 0);
        CHECK(img.at(0, 0, 2) == 255);  // buildings are blue
        CHECK(img.at(0, 1, 0) == 0);
        CHECK(img.at(0, 1, 1) == 255);
        CHECK(img.at(0, 1, 2) == 0);  // trees are green
    }

    TEST_CASE("single cluster renders a single color") {
        testsup::TempDir tmp("seg");
        SegmentationMap map{3, 3, 8, std::vector<int32_t>(9, 5)};
        write_segmentation(map, default_palette(), std::nullopt, tmp / "one.png");
        const RawImage img = read_image(tmp / "one.png");
        for (size_t i = 1; i < 9; ++i) {
            CHECK(img.pixels[i * 3] == img.pixels[0]);
            CHECK(img.pixels[i * 3 + 1] == img.pixels[1]);
            CHECK(img.pixels[i * 3 + 2] == img.pixels[2]);
        }
    }

    TEST_CASE("write then read back preserves every label") {
        testsup::TempDir tmp("seg");
        SegmentationMap map{4, 6, 8, {}};
        Rng rng(13);
        for (size_t i = 0; i < 24; ++i)
            map.labels.push_back(int32_t(rng.uniform_index(8)));
        write_segmentation(map, default_palette(), std::nullopt, tmp / "rt.png");
        const ReferenceMap back = read_reference(tmp / "rt.png", fallback_palette());
        CHECK_FALSE(back.palette_warning);
        for (size_t i = 0; i < 24; ++i) CHECK(back.labels[i] == map.labels[i]);
    }

    TEST_CASE("unmapped cluster present in the map is a contract error") {
        testsup::TempDir tmp("seg");
        SegmentationMap map{1, 2, 2, {0, 1}};
        CHECK_THROWS_AS(
            write_segmentation(map, default_palette(), std::vector<int32_t>{1, -1}, tmp / "x.png"),
            ContractError);
    }
}

TEST_SUITE("read_reference") {
    TEST_CASE("exact palette colors decode, everything else is ignored") {
        testsup::TempDir tmp("ref");
        // white (impervious, class 0), then an off-palette (1,1,1)
        write_png8(tmp / "r.png", 1, 2, 3, {255, 255, 255, 1, 1, 1});
        const ReferenceMap ref = read_reference(tmp / "r.png", default_palette());
        CHECK(ref.labels[0] == 0);
        CHECK(ref.labels[1] == ReferenceMap::kIgnore);
        CHECK_FALSE(ref.palette_warning);  // exactly half ignored is not "> 50%"
    }

    TEST_CASE("all-white image is all class zero with nothing ignored") {
        testsup::TempDir tmp("ref");
        write_png8(tmp / "w.png", 2, 2, 3, std::vector<uint8_t>(12, 255));
        const ReferenceMap ref = read_reference(tmp / "w.png", default_palette());
        CHECK_FALSE(ref.palette_warning);
        for (int32_t l : ref.labels) CHECK(l == 0);
    }

    TEST_CASE("mostly off-palette pixels set the warning flag") {
        testsup::TempDir tmp("ref");
        std::vector<uint8_t> px(4 * 3, 7);  // 4 pixels, none on palette
        px[0] = px[1] = px[2] = 255;        // one white pixel
        write_png8(tmp / "o.png", 1, 4, 3, px);
        const ReferenceMap ref = read_reference(tmp / "o.png", default_palette());
        CHECK(ref.palette_warning);
    }
}
