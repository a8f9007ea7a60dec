#include "avafit/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace avafit::io {

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t crc32_of(const uint8_t* data, size_t n) {
    return static_cast<uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
    put_u32_be(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32_be(out, crc32_of(out.data() + start, out.size() - start));
}

std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> z(bound);
    if (compress2(z.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("zlib compression failed");
    z.resize(bound);
    return z;
}

std::vector<uint8_t> inflate_bytes(const uint8_t* data, size_t n, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf len = static_cast<uLongf>(expected);
    if (uncompress(out.data(), &len, data, static_cast<uLong>(n)) != Z_OK || len != expected)
        throw IoError("zlib decompression failed");
    return out;
}

std::vector<uint8_t> encode_png(const uint8_t* pixels, int h, int w, int channels) {
    // filter 0 (None) on every scanline
    const size_t stride = static_cast<size_t>(w) * channels;
    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * h);
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels + y * stride, pixels + (y + 1) * stride);
    }
    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(w));
    put_u32_be(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(channels == 3 ? 2 : 0);               // color type: RGB or gray
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", deflate_bytes(raw));
    append_chunk(out, "IEND", {});
    return out;
}

uint32_t get_u32_be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

struct DecodedPng {
    int h = 0, w = 0, channels = 0;
    std::vector<uint8_t> pixels;
};

uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
    if (pb <= pc) return static_cast<uint8_t>(b);
    return static_cast<uint8_t>(c);
}

DecodedPng decode_png(const std::vector<uint8_t>& file) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0) throw IoError("not a PNG file");
    DecodedPng d;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    int bit_depth = 0, color_type = 0, interlace = 0;
    while (pos + 8 <= file.size()) {
        const uint32_t len = get_u32_be(&file[pos]);
        const std::string type(reinterpret_cast<const char*>(&file[pos + 4]), 4);
        const uint8_t* payload = &file[pos + 8];
        if (type == "IHDR") {
            d.w = static_cast<int>(get_u32_be(payload));
            d.h = static_cast<int>(get_u32_be(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            interlace = payload[12];
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12ull + len;
    }
    if (bit_depth != 8 || interlace != 0) throw IoError("unsupported PNG variant (need 8-bit non-interlaced)");
    if (color_type == 2) d.channels = 3;
    else if (color_type == 0) d.channels = 1;
    else if (color_type == 6) d.channels = 4;
    else throw IoError("unsupported PNG color type");

    const size_t stride = static_cast<size_t>(d.w) * d.channels;
    const size_t raw_size = (stride + 1) * d.h;
    std::vector<uint8_t> raw = inflate_bytes(idat.data(), idat.size(), raw_size);

    d.pixels.resize(stride * d.h);
    const int bpp = d.channels;
    for (int y = 0; y < d.h; ++y) {
        const uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* src = &raw[y * (stride + 1) + 1];
        uint8_t* dst = &d.pixels[y * stride];
        const uint8_t* up = y > 0 ? &d.pixels[(y - 1) * stride] : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("bad PNG filter");
            }
            dst[x] = static_cast<uint8_t>(v);
        }
    }
    return d;
}

uint8_t to_byte(real v) {
    const real c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

std::vector<uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

std::vector<uint8_t> encode_png_rgb(const Image& img) {
    std::vector<uint8_t> pixels(img.pixels() * 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                pixels[(static_cast<size_t>(y) * img.w + x) * 3 + c] = to_byte(img.at(c, y, x));
    return encode_png(pixels.data(), img.h, img.w, 3);
}

void write_png(const std::string& path, const Image& img) { write_bytes(path, encode_png_rgb(img)); }

void write_png_gray(const std::string& path, const SegMap& seg) {
    write_bytes(path, encode_png(seg.labels.data(), seg.h, seg.w, 1));
}

Image read_png(const std::string& path) {
    const DecodedPng d = decode_png(read_bytes(path));
    Image img(d.h, d.w);
    for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src_c = d.channels == 1 ? 0 : c;
                img.at(c, y, x) =
                    d.pixels[(static_cast<size_t>(y) * d.w + x) * d.channels + src_c] / 255.0;
            }
    return img;
}

SegMap read_png_gray(const std::string& path) {
    const DecodedPng d = decode_png(read_bytes(path));
    if (d.channels != 1) throw IoError("expected grayscale PNG: " + path);
    SegMap seg(d.h, d.w);
    seg.labels = d.pixels;
    return seg;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << text;
    if (!f) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

struct CsvWriter::Impl {
    std::ofstream f;
};

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& columns) : impl_(new Impl) {
    impl_->f.open(path, std::ios::binary);
    if (!impl_->f) throw IoError("cannot open CSV for writing: " + path);
    for (size_t i = 0; i < columns.size(); ++i) impl_->f << (i ? "," : "") << columns[i];
    impl_->f << "\n";
}

CsvWriter::~CsvWriter() { delete impl_; }

void CsvWriter::row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) impl_->f << (i ? "," : "") << cells[i];
    impl_->f << "\n";
}

std::string CsvWriter::num(real v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

namespace {
constexpr char kCkptMagic[8] = {'A', 'V', 'F', 'T', 'C', 'K', 'P', '1'};
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(kCkptMagic, 8);
    const uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&schema_hash), 8);
    const uint32_t n = static_cast<uint32_t>(tensors.size());
    f.write(reinterpret_cast<const char*>(&n), 4);
    for (const auto& [name, vals] : tensors) {
        const uint32_t name_len = static_cast<uint32_t>(name.size());
        const uint64_t len = vals.size();
        f.write(reinterpret_cast<const char*>(&name_len), 4);
        f.write(name.data(), name_len);
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(reinterpret_cast<const char*>(vals.data()), static_cast<std::streamsize>(len * sizeof(real)));
    }
    if (!f) throw IoError("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0) throw IoError("not an avafit checkpoint: " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw IoError("unsupported checkpoint version");
    Checkpoint c;
    f.read(reinterpret_cast<char*>(&c.schema_hash), 8);
    uint32_t n = 0;
    f.read(reinterpret_cast<char*>(&n), 4);
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), 4);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        uint64_t len = 0;
        f.read(reinterpret_cast<char*>(&len), 8);
        std::vector<real> vals(len);
        f.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(len * sizeof(real)));
        if (!f) throw IoError("truncated checkpoint: " + path);
        c.tensors.emplace(std::move(name), std::move(vals));
    }
    return c;
}

}  // namespace avafit::io
