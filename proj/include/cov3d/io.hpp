#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cov3d/common.hpp"

namespace cov3d::io {

namespace fs = std::filesystem;

struct ImageSize {
    std::int64_t height = 0;
    std::int64_t width = 0;
    bool operator==(const ImageSize&) const = default;
};

/// Decodes a PNG as grayscale and maps [0, max] to [0, 1]. Colour and 16-bit
/// inputs are converted by libpng.
Image read_png_gray(const fs::path& path);

/// Reads only the IHDR chunk.
ImageSize read_png_size(const fs::path& path);

/// Writes an 8-bit grayscale PNG; pixels are clamped to [0,1] and rounded.
void write_png_gray(const fs::path& path, const Image& image);

/// Writes a {0,255} mask PNG.
void write_png_mask(const fs::path& path, const BinaryMask& mask);

/// Reads a mask PNG; any nonzero pixel is foreground.
BinaryMask read_png_mask(const fs::path& path);

std::string read_text(const fs::path& path);

/// Writes through a temporary sibling file and renames it into place.
void write_text_atomic(const fs::path& path, const std::string& content);

/// Minimal CSV splitting for the unquoted formats used by this project.
std::vector<std::string> split_csv_line(const std::string& line);
std::vector<std::string> read_lines(const fs::path& path);

}  // namespace cov3d::io

namespace cov3d::digest {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Digest over the relative paths and contents of every regular file under
/// `dir`, visited in sorted order.
std::string sha256_tree(const std::filesystem::path& dir);

}  // namespace cov3d::digest
