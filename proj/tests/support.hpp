#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "bqkit/bqkit.hpp"

namespace bqkit::test {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "bqkit_" + tag;
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::filesystem::path operator/(const std::string& f) const { return path_ / f; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Dataset blobs(std::size_t n, Split split, std::size_t classes = 4, std::size_t dims = 8) {
  return make_blobs(n, classes, dims, 1.5, 1, split, 1);
}

// Small MLP trained on 4-class blobs; shared across tests.
inline const Model& trained_mlp() {
  static const Model m = [] {
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.learning_rate = 0.02;
    cfg.seed = 7;
    return train(make_mlp(8, 32, 4, 7), blobs(800, Split::Train), cfg).model;
  }();
  return m;
}

inline std::vector<double> as_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace bqkit::test
