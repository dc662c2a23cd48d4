#pragma once

#include "doctest_torch.hpp"
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>

#include "smd/datagen.hpp"

namespace test {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "smd_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename E>
void check_throws_with(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
    FAIL("expected an exception containing '" << needle << "'");
  } catch (const E& e) {
    CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
  }
}

// Small standard-site dataset used across suites.
inline smd::datagen::GeneratedDataset small_dataset(int sites = 4, int subjects = 3,
                                                    std::uint64_t seed = 1, bool traveling = false) {
  smd::datagen::DatasetOptions opts;
  opts.sites.resize(static_cast<std::size_t>(sites));
  opts.subjects_per_site = subjects;
  opts.seed = seed;
  opts.traveling = traveling;
  return smd::datagen::generate_dataset(opts);
}

}  // namespace test
