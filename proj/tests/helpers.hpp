#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>

#include "treemtl/autodiff.hpp"
#include "treemtl/random.hpp"
#include "treemtl/tensor.hpp"

namespace testutil {

inline treemtl::Tensor random_tensor(treemtl::Shape shape, treemtl::Rng& rng, double lo = -1.0,
                                     double hi = 1.0) {
  treemtl::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline std::size_t random_dim(treemtl::Rng& rng, std::size_t max = 8) {
  return std::uniform_int_distribution<std::size_t>(1, max)(rng);
}

// Random linear functional of a tensor: keeps every component's gradient
// distinct, unlike a plain sum.
inline treemtl::Var weighted_sum(treemtl::Tape& tape, treemtl::Var x, const treemtl::Tensor& w) {
  return treemtl::sum(tape, treemtl::mul_constant(tape, x, w));
}

// Four-point central difference of g at zero.
inline double central_difference(const std::function<double(double)>& g, double h) {
  const double near = (g(h) - g(-h)) / (2 * h);
  const double far = (g(2 * h) - g(-2 * h)) / (4 * h);
  return (4 * near - far) / 3;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("treemtl_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
