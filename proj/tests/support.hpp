#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "zal3d/data.hpp"
#include "zal3d/geometry.hpp"

namespace zal3d::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("zal3d_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Map with uniform random coordinates and roughly `sentinel_share` zero cells.
inline OrderedPointMap random_map(std::size_t h, std::size_t w, std::mt19937_64& rng, double sentinel_share = 0.1) {
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::bernoulli_distribution hole(sentinel_share);
    std::vector<Point> pts(h * w);
    for (auto& p : pts) p = hole(rng) ? Point{0, 0, 0} : Point{u(rng), u(rng), u(rng) + 2.0f};
    return OrderedPointMap(h, w, std::move(pts));
}

inline std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<Vec3> out(n);
    for (auto& p : out) p = Vec3(g(rng), g(rng), g(rng));
    return out;
}

}  // namespace zal3d::test
