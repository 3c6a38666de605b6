#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "fieldsynth/rng.hpp"
#include "fieldsynth/volume.hpp"

namespace testing {

inline fieldsynth::Volume random_volume(fieldsynth::Dims dims, std::uint64_t seed, float lo = 0.0f,
                                        float hi = 1.0f) {
  fieldsynth::SeqRng rng(seed);
  std::vector<float> data(dims.count());
  for (float& v : data) v = static_cast<float>(rng.uniform(lo, hi));
  return fieldsynth::Volume(dims, std::move(data));
}

inline fieldsynth::Segmentation random_labels(fieldsynth::Dims dims, std::uint64_t seed) {
  fieldsynth::SeqRng rng(seed);
  std::vector<std::uint8_t> labels(dims.count());
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(fieldsynth::kNumClasses));
  return fieldsynth::Segmentation::hard(dims, std::move(labels));
}

// Owning copy, safe to iterate over a temporary volume.
inline std::vector<float> values(const fieldsynth::Volume& v) { return {v.data().begin(), v.data().end()}; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fieldsynth_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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

}  // namespace testing
