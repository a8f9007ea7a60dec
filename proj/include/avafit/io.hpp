#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "avafit/common.hpp"

namespace avafit::io {

/// 8-bit RGB PNG. Values are clamped to [0,1] and rounded to the nearest
/// byte level on write.
void write_png(const std::string& path, const Image& img);
/// 8-bit grayscale PNG (used for segmentation labels).
void write_png_gray(const std::string& path, const SegMap& seg);
Image read_png(const std::string& path);
SegMap read_png_gray(const std::string& path);

std::vector<uint8_t> encode_png_rgb(const Image& img);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

/// Append-style CSV writer: header fixed at construction, one row per call.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns);
    ~CsvWriter();
    void row(const std::vector<std::string>& cells);
    static std::string num(real v);

private:
    struct Impl;
    Impl* impl_;
};

/// Versioned binary checkpoint container: magic, format version, schema
/// hash, then named double-precision tensors.
class Checkpoint {
public:
    uint64_t schema_hash = 0;
    std::map<std::string, std::vector<real>> tensors;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace avafit::io
