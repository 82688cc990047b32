#include "sagekeep/io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace sagekeep {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

// Reader that reports the byte offset of any structural problem.
class ByteReader {
  public:
    ByteReader(const std::uint8_t* data, std::size_t size, std::string origin)
        : data_(data), size_(size), origin_(std::move(origin)) {}

    std::size_t offset() const { return pos_; }

    void expect_magic(const char magic[4]) {
        if (pos_ + 4 > size_) fail("truncated before magic");
        if (std::memcmp(data_ + pos_, magic, 4) != 0) fail("bad magic");
        pos_ += 4;
    }

    std::uint8_t u8() {
        if (pos_ + 1 > size_) fail("truncated u8");
        return data_[pos_++];
    }

    std::uint32_t u32() {
        if (pos_ + 4 > size_) fail("truncated u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        if (pos_ + 8 > size_) fail("truncated f64");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string str(std::size_t n) {
        if (pos_ + n > size_) fail("truncated string");
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return size_ - pos_; }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError(origin_ + ": " + what + " at offset " + std::to_string(pos_));
    }

  private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string origin_;
};

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw DataError("read failed: " + path);
    return bytes;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + path);
}

}  // namespace

// ---- KCT1 ----

std::vector<std::uint8_t> encode_kct1(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(5 + 4 * t.rank() + 8 * t.size());
    out.insert(out.end(), {'K', 'C', 'T', '1'});
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_f64(out, v);
    return out;
}

Tensor decode_kct1(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes.data(), bytes.size(), "KCT1");
    r.expect_magic("KCT1");
    const std::uint8_t rank = r.u8();
    if (rank < 1 || rank > 4) r.fail("rank " + std::to_string(rank) + " outside 1..4");
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
        const std::uint32_t v = r.u32();
        if (v == 0) r.fail("zero extent");
        d = v;
        numel *= v;
    }
    if (r.remaining() != 8 * numel)
        r.fail("payload has " + std::to_string(r.remaining()) + " bytes, expected " +
               std::to_string(8 * numel));
    std::vector<double> data(numel);
    for (auto& v : data) {
        v = r.f64();
        if (!std::isfinite(v)) r.fail("non-finite payload value");
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

void write_kct1(const Tensor& t, const std::string& path) { write_file(path, encode_kct1(t)); }

Tensor read_kct1(const std::string& path) { return decode_kct1(read_file(path)); }

// ---- KCW1 ----

void validate_map(const ImportanceMap& map) {
    if (map.grid.rank() != 2)
        throw DataError("importance map grid must be rank 2, got " + map.grid.shape_str());
    if (map.token_size < 1) throw DataError("importance map token_size must be >= 1");
    for (std::size_t i = 0; i < map.grid.size(); ++i)
        if (map.grid[i] < 0.0 || map.grid[i] > 1.0)
            throw DataError("importance map value " + std::to_string(map.grid[i]) +
                            " outside [0, 1] at index " + std::to_string(i));
}

void write_kcw1(const ImportanceMap& map, const std::string& path) {
    validate_map(map);
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'K', 'C', 'W', '1'});
    put_u32(out, static_cast<std::uint32_t>(map.image_h()));
    put_u32(out, static_cast<std::uint32_t>(map.image_w()));
    put_u32(out, static_cast<std::uint32_t>(map.token_size));
    put_u32(out, static_cast<std::uint32_t>(map.grid_h()));
    put_u32(out, static_cast<std::uint32_t>(map.grid_w()));
    put_u32(out, static_cast<std::uint32_t>(map.source_image_id.size()));
    out.insert(out.end(), map.source_image_id.begin(), map.source_image_id.end());
    put_u32(out, static_cast<std::uint32_t>(map.oracle_id.size()));
    out.insert(out.end(), map.oracle_id.begin(), map.oracle_id.end());
    for (double v : map.grid.values()) put_f64(out, v);
    write_file(path, out);
}

ImportanceMap read_kcw1(const std::string& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size(), "KCW1 " + path);
    r.expect_magic("KCW1");
    const std::uint32_t h = r.u32(), w = r.u32();
    const std::uint32_t token = r.u32();
    const std::uint32_t ht = r.u32(), wt = r.u32();
    if (token == 0) r.fail("zero token size");
    if (ht * token != h || wt * token != w)
        r.fail("grid " + std::to_string(ht) + "x" + std::to_string(wt) + " with token " +
               std::to_string(token) + " does not tile image " + std::to_string(h) + "x" +
               std::to_string(w));
    ImportanceMap map;
    map.token_size = token;
    map.source_image_id = r.str(r.u32());
    map.oracle_id = r.str(r.u32());
    if (r.remaining() != 8ull * ht * wt) r.fail("payload size mismatch");
    std::vector<double> grid(static_cast<std::size_t>(ht) * wt);
    for (auto& v : grid) v = r.f64();
    map.grid = Tensor::from_data({ht, wt}, std::move(grid));
    validate_map(map);
    return map;
}

// ---- PGM / PPM ----

namespace {

// Skips whitespace and '#' comments between header tokens.
std::size_t next_header_token(const std::vector<std::uint8_t>& bytes, std::size_t pos,
                              std::string& token, const std::string& path) {
    token.clear();
    while (pos < bytes.size()) {
        const char c = static_cast<char>(bytes[pos]);
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++pos;
        } else {
            break;
        }
    }
    while (pos < bytes.size()) {
        const char c = static_cast<char>(bytes[pos]);
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') break;
        token.push_back(c);
        ++pos;
    }
    if (token.empty()) throw DataError("PGM " + path + ": truncated header");
    return pos;
}

}  // namespace

PgmImage read_pgm(const std::string& path) {
    const auto bytes = read_file(path);
    std::string tok;
    std::size_t pos = next_header_token(bytes, 0, tok, path);
    if (tok != "P5") throw DataError("PGM " + path + ": expected P5, got '" + tok + "'");
    pos = next_header_token(bytes, pos, tok, path);
    const std::size_t width = std::stoul(tok);
    pos = next_header_token(bytes, pos, tok, path);
    const std::size_t height = std::stoul(tok);
    pos = next_header_token(bytes, pos, tok, path);
    const unsigned long maxval = std::stoul(tok);
    if (maxval != 255) throw DataError("PGM " + path + ": only maxval 255 supported");
    pos += 1;  // single whitespace after maxval
    if (width == 0 || height == 0) throw DataError("PGM " + path + ": zero dimensions");
    if (bytes.size() < pos + width * height)
        throw DataError("PGM " + path + ": truncated payload at offset " + std::to_string(pos));
    PgmImage img;
    img.height = height;
    img.width = width;
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + width * height));
    return img;
}

void write_pgm(const PgmImage& img, const std::string& path) {
    if (img.pixels.size() != img.height * img.width)
        throw DataError("write_pgm: pixel count does not match dimensions");
    std::vector<std::uint8_t> out;
    const std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_file(path, out);
}

void write_ppm(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& rgb,
               const std::string& path) {
    if (rgb.size() != height * width * 3)
        throw DataError("write_ppm: pixel count does not match dimensions");
    std::vector<std::uint8_t> out;
    const std::string header =
        "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), rgb.begin(), rgb.end());
    write_file(path, out);
}

Tensor pgm_to_image(const PgmImage& img) {
    std::vector<double> data(img.pixels.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = img.pixels[i] / 255.0;
    return Tensor::from_data({1, img.height, img.width}, std::move(data));
}

Tensor pgm_to_labels(const PgmImage& img) {
    std::vector<double> data(img.pixels.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(img.pixels[i]);
    return Tensor::from_data({img.height, img.width}, std::move(data));
}

}  // namespace sagekeep
