#include "cov3d/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

namespace cov3d {

double Image::mean() const {
    if (pixels.empty()) return 0.0;
    double sum = 0.0;
    for (float v : pixels) sum += v;
    return sum / static_cast<double>(pixels.size());
}

std::size_t BinaryMask::count() const noexcept {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

}  // namespace cov3d

namespace cov3d::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode, std::string_view stage) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw Error(stage, "cannot open '" + path.string() + "'");
    return f;
}

[[noreturn]] void png_error_fn(png_structp, png_const_charp msg) { throw Error("png", msg); }
void png_warning_fn(png_structp, png_const_charp) {}

class PngReader {
public:
    explicit PngReader(const fs::path& path) : file_(open_file(path, "rb", "png")), path_(path) {
        std::array<unsigned char, 8> sig{};
        if (std::fread(sig.data(), 1, sig.size(), file_.get()) != sig.size() || png_sig_cmp(sig.data(), 0, 8) != 0)
            throw Error("png", "not a PNG file: '" + path.string() + "'");
        png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
        info_ = png_create_info_struct(png_);
        png_init_io(png_, file_.get());
        png_set_sig_bytes(png_, 8);
        png_read_info(png_, info_);
    }
    ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
    PngReader(const PngReader&) = delete;
    PngReader& operator=(const PngReader&) = delete;

    ImageSize size() const {
        return {static_cast<std::int64_t>(png_get_image_height(png_, info_)),
                static_cast<std::int64_t>(png_get_image_width(png_, info_))};
    }

    Image decode() {
        const int color = png_get_color_type(png_, info_);
        const int depth = png_get_bit_depth(png_, info_);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png_);
        if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png_);
        if (depth == 16) png_set_strip_16(png_);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png_);
        if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
            png_set_rgb_to_gray_fixed(png_, 1, -1, -1);
        png_read_update_info(png_, info_);

        const auto [h, w] = size();
        const std::size_t rowbytes = png_get_rowbytes(png_, info_);
        if (rowbytes != static_cast<std::size_t>(w))
            throw Error("png", "unsupported pixel layout in '" + path_.string() + "'");
        std::vector<unsigned char> buffer(rowbytes * static_cast<std::size_t>(h));
        std::vector<png_bytep> rows(static_cast<std::size_t>(h));
        for (std::int64_t r = 0; r < h; ++r) rows[static_cast<std::size_t>(r)] = buffer.data() + r * rowbytes;
        png_read_image(png_, rows.data());

        Image img(h, w);
        for (std::size_t i = 0; i < buffer.size(); ++i) img.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
        return img;
    }

private:
    FilePtr file_;
    fs::path path_;
    png_structp png_ = nullptr;
    png_infop info_ = nullptr;
};

void write_png_bytes(const fs::path& path, std::int64_t h, std::int64_t w, const std::vector<unsigned char>& bytes) {
    FilePtr file = open_file(path, "wb", "png");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
    png_infop info = png_create_info_struct(png);
    try {
        png_init_io(png, file.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::int64_t r = 0; r < h; ++r)
            png_write_row(png, const_cast<png_bytep>(bytes.data() + r * w));
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    if (std::fflush(file.get()) != 0) throw Error("png", "write failed: '" + path.string() + "'");
}

}  // namespace

Image read_png_gray(const fs::path& path) { return PngReader(path).decode(); }

ImageSize read_png_size(const fs::path& path) { return PngReader(path).size(); }

void write_png_gray(const fs::path& path, const Image& image) {
    std::vector<unsigned char> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    write_png_bytes(path, image.height, image.width, bytes);
}

void write_png_mask(const fs::path& path, const BinaryMask& mask) {
    std::vector<unsigned char> bytes(mask.bits.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.bits[i] ? 255 : 0;
    write_png_bytes(path, mask.height, mask.width, bytes);
}

BinaryMask read_png_mask(const fs::path& path) {
    const Image img = read_png_gray(path);
    BinaryMask mask(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) mask.bits[i] = img.pixels[i] > 0.0f ? 1 : 0;
    return mask;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_atomic(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("io", "cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) throw Error("io", "write failed: '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error("io", "cannot rename into '" + path.string() + "': " + ec.message());
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string current;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(ch);
        }
    }
    fields.push_back(std::move(current));
    return fields;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open '" + path.string() + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    return lines;
}

}  // namespace cov3d::io

namespace cov3d::digest {

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::string_view bytes) { EVP_DigestUpdate(ctx_, bytes.data(), bytes.size()); }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md.data(), &len);
        static constexpr char kHex[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(kHex[md[i] >> 4]);
            out.push_back(kHex[md[i] & 0xF]);
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes);
    return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(io::read_text(path)); }

std::string sha256_tree(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& rel : files) {
        const std::string name = rel.generic_string();
        h.update(name);
        h.update(std::string_view("\0", 1));
        h.update(sha256_file(dir / rel));
    }
    return h.hex();
}

}  // namespace cov3d::digest
