#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cov3d/common.hpp"
#include "cov3d/rng.hpp"

namespace cov3d::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        const auto base = fs::temp_directory_path();
        std::random_device rd;
        for (;;) {
            path_ = base / ("cov3d-" + tag + "-" + std::to_string(rd()));
            if (fs::create_directory(path_)) break;
        }
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

inline Image random_image(Rng& rng, std::int64_t h, std::int64_t w, double lo = 0.0, double hi = 1.0) {
    Image img(h, w);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform(lo, hi));
    return img;
}

inline Image constant_image(std::int64_t h, std::int64_t w, float v) { return Image(h, w, v); }

inline BinaryMask random_mask(Rng& rng, std::int64_t h, std::int64_t w, double p = 0.5) {
    BinaryMask m(h, w);
    for (auto& b : m.bits) b = rng.uniform() < p ? 1 : 0;
    return m;
}

/// Expects `body` to throw cov3d::Error whose message contains `needle`.
template <class F>
void expect_error(F&& body, const std::string& needle) {
    try {
        body();
        ADD_FAILURE() << "expected an error containing '" << needle << "'";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << "message: " << e.what();
    }
}

}  // namespace cov3d::testing
