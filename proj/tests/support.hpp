#pragma once

// Shared helpers for the unit and acceptance suites: scratch directories,
// random tensors, and the brute-force simplex-grid unmixing oracle that the
// projected-gradient solver is checked against.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "karma/cube.hpp"
#include "karma/rng.hpp"
#include "karma/tensor.hpp"

namespace testsupport {

// Unique scratch directory, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        auto base = std::filesystem::temp_directory_path() / "karma_tests";
        std::filesystem::create_directories(base);
        static std::atomic<unsigned> counter{0};
        path_ = base / (tag + "_" + std::to_string(::getpid()) + "_" +
                        std::to_string(counter.fetch_add(1)));
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

inline karma::nd::Tensor random_tensor(karma::nd::Shape shape, std::uint64_t key, double lo = -2.0,
                                       double hi = 2.0, bool rg = false) {
    karma::rng::Stream st(key);
    std::vector<double> data(static_cast<std::size_t>(karma::nd::numel(shape)));
    for (auto& v : data) v = st.uniform(lo, hi);
    return karma::nd::Tensor::from_vector(std::move(shape), std::move(data), rg);
}

inline karma::synth::HyperCube random_cube(std::int64_t h, std::int64_t w, std::int64_t c,
                                           std::uint64_t key) {
    auto cube = karma::synth::HyperCube::zeros(h, w, c);
    karma::rng::Stream st(key);
    for (auto& v : cube.values) v = static_cast<float>(st.next_unit());
    return cube;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
}

// Minimum of ||r - A x||^2 over the M=3 simplex grid with the given
// resolution; the independent oracle for the FCLS solver.
inline double brute_force_simplex_objective(std::span<const double> r,
                                            const karma::synth::EndmemberMatrix& em,
                                            int resolution = 100) {
    if (em.count != 3) throw std::runtime_error("brute force oracle is written for M=3");
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> ax(r.size());
    for (int i = 0; i <= resolution; ++i) {
        for (int j = 0; j + i <= resolution; ++j) {
            int k = resolution - i - j;
            double x0 = static_cast<double>(i) / resolution;
            double x1 = static_cast<double>(j) / resolution;
            double x2 = static_cast<double>(k) / resolution;
            double obj = 0.0;
            for (std::size_t c = 0; c < r.size(); ++c) {
                double v = em.at(static_cast<std::int64_t>(c), 0) * x0 +
                           em.at(static_cast<std::int64_t>(c), 1) * x1 +
                           em.at(static_cast<std::int64_t>(c), 2) * x2;
                double d = r[c] - v;
                obj += d * d;
            }
            best = std::min(best, obj);
        }
    }
    return best;
}

}  // namespace testsupport
