#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sagekeep/tensor.hpp"

namespace sagekeep {

// ---- KCT1: raw tensor container ----
// magic "KCT1", u8 rank, rank x u32 little-endian dims, row-major f64 payload.

void write_kct1(const Tensor& t, const std::string& path);
Tensor read_kct1(const std::string& path);

std::vector<std::uint8_t> encode_kct1(const Tensor& t);
Tensor decode_kct1(const std::vector<std::uint8_t>& bytes);

// ---- KCW1: token importance map ----
// magic "KCW1", u32 image H, W, u32 token_size, u32 H_t, W_t, length-prefixed
// UTF-8 image_id and oracle_id, payload H_t x W_t f64 little-endian.

struct ImportanceMap {
    Tensor grid;  // H_t x W_t, values in [0, 1]
    std::size_t token_size = 1;
    std::string source_image_id;
    std::string oracle_id;

    std::size_t grid_h() const { return grid.shape()[0]; }
    std::size_t grid_w() const { return grid.shape()[1]; }
    std::size_t image_h() const { return grid_h() * token_size; }
    std::size_t image_w() const { return grid_w() * token_size; }
};

/// Validates the [0,1] range and grid/token consistency invariants.
void validate_map(const ImportanceMap& map);

void write_kcw1(const ImportanceMap& map, const std::string& path);
ImportanceMap read_kcw1(const std::string& path);

// ---- PGM (P5) / PPM (P6), 8-bit binary ----

struct PgmImage {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

PgmImage read_pgm(const std::string& path);
void write_pgm(const PgmImage& img, const std::string& path);

/// RGB interleaved, row-major.
void write_ppm(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& rgb,
               const std::string& path);

/// PGM bytes / 255 -> 1xHxW tensor in [0, 1].
Tensor pgm_to_image(const PgmImage& img);

/// PGM bytes taken as integer class ids -> HxW label tensor.
Tensor pgm_to_labels(const PgmImage& img);

}  // namespace sagekeep
