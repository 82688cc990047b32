#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sagekeep/io.hpp"
#include "support.hpp"

using namespace sagekeep;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const char* name) {
    return (fs::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("kct1 round trip is bit exact") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::size_t> shape;
        const std::size_t rank = 1 + rng.uniform_int(4);
        for (std::size_t i = 0; i < rank; ++i) shape.push_back(1 + rng.uniform_int(5));
        const Tensor t = sktest::random_tensor(shape, rng);
        const auto bytes = encode_kct1(t);
        const Tensor back = decode_kct1(bytes);
        CHECK(back.shape() == t.shape());
        CHECK(back.values() == t.values());
    }
}

TEST_CASE("kct1 corruption reports an offset") {
    const Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto bytes = encode_kct1(t);

    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_WITH_AS(decode_kct1(bytes), doctest::Contains("offset 0"), DataError);
    }
    SUBCASE("truncated payload") {
        bytes.resize(bytes.size() - 8);
        CHECK_THROWS_WITH_AS(decode_kct1(bytes), doctest::Contains("payload"), DataError);
    }
    SUBCASE("zero extent") {
        bytes[5] = 0;
        bytes[6] = 0;
        bytes[7] = 0;
        bytes[8] = 0;
        CHECK_THROWS_AS(decode_kct1(bytes), DataError);
    }
}

TEST_CASE("kct1 file io") {
    const std::string path = temp_path("sagekeep_t.kct1");
    const Tensor t = Tensor::from_data({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    write_kct1(t, path);
    CHECK(read_kct1(path).values() == t.values());
    CHECK_THROWS_AS(read_kct1(temp_path("does_not_exist.kct1")), DataError);
    fs::remove(path);
}

TEST_CASE("kcw1 round trip preserves ids and grid") {
    ImportanceMap map;
    map.grid = Tensor::from_data({2, 3}, {0.0, 0.25, 0.5, 0.75, 1.0, 0.125});
    map.token_size = 4;
    map.source_image_id = "sample-007";
    map.oracle_id = "oracle-A";
    const std::string path = temp_path("sagekeep_t.kcw1");
    write_kcw1(map, path);
    const ImportanceMap back = read_kcw1(path);
    CHECK(back.grid.values() == map.grid.values());
    CHECK(back.token_size == 4);
    CHECK(back.source_image_id == "sample-007");
    CHECK(back.oracle_id == "oracle-A");
    CHECK(back.image_h() == 8);
    CHECK(back.image_w() == 12);
    fs::remove(path);
}

TEST_CASE("kcw1 rejects out-of-range values and bad geometry") {
    ImportanceMap map;
    map.grid = Tensor::from_data({1, 2}, {0.5, 1.5});
    map.token_size = 2;
    CHECK_THROWS_AS(validate_map(map), DataError);
    CHECK_THROWS_AS(write_kcw1(map, temp_path("bad.kcw1")), DataError);

    // tamper with the token size so the grid no longer tiles the image
    map.grid = Tensor::from_data({1, 2}, {0.5, 0.5});
    const std::string path = temp_path("sagekeep_t2.kcw1");
    write_kcw1(map, path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(12);
    const char bad[4] = {3, 0, 0, 0};
    f.write(bad, 4);
    f.close();
    CHECK_THROWS_AS(read_kcw1(path), DataError);
    fs::remove(path);
}

TEST_CASE("pgm round trip and header parsing") {
    PgmImage img;
    img.height = 3;
    img.width = 2;
    img.pixels = {0, 64, 128, 192, 255, 7};
    const std::string path = temp_path("sagekeep_t.pgm");
    write_pgm(img, path);
    const PgmImage back = read_pgm(path);
    CHECK(back.height == 3);
    CHECK(back.width == 2);
    CHECK(back.pixels == img.pixels);

    // comments between header tokens are legal
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "P5\n# a comment\n2 1\n255\n";
    out.put(static_cast<char>(9));
    out.put(static_cast<char>(200));
    out.close();
    const PgmImage commented = read_pgm(path);
    CHECK(commented.pixels == std::vector<std::uint8_t>{9, 200});

    // truncation is an error, not a short read
    std::ofstream bad(path, std::ios::binary | std::ios::trunc);
    bad << "P5\n4 4\n255\n";
    bad.put(static_cast<char>(1));
    bad.close();
    CHECK_THROWS_WITH_AS(read_pgm(path), doctest::Contains("truncated"), DataError);
    fs::remove(path);
}

TEST_CASE("pgm tensor conversions") {
    PgmImage img;
    img.height = 1;
    img.width = 3;
    img.pixels = {0, 51, 255};
    const Tensor image = pgm_to_image(img);
    CHECK(image.shape() == std::vector<std::size_t>{1, 1, 3});
    CHECK(image[0] == 0.0);
    CHECK(image[1] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(image[2] == 1.0);
    const Tensor labels = pgm_to_labels(img);
    CHECK(labels.shape() == std::vector<std::size_t>{1, 3});
    CHECK(labels[1] == 51.0);
}
