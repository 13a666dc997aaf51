#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace testing {

inline std::string data_path(const std::string& rel) { return std::string(USCD_DATA_DIR) + "/" + rel; }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Logits of varied shape: gaussian with a random scale, sometimes with a
// single dominant entry so that both flat and peaked distributions occur.
inline std::vector<double> random_logits(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 6.0);
  double s = scale(rng);
  std::vector<double> logits(n);
  for (double& x : logits) x = s * gauss(rng);
  if (rng() % 3 == 0) logits[rng() % n] += 8.0;
  return logits;
}

// Probability vector with some exact zeros.
inline std::vector<double> random_probs(std::mt19937_64& rng, std::size_t n, bool allow_zeros = true) {
  std::vector<double> logits = random_logits(rng, n);
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i]);
    if (allow_zeros && n > 2 && rng() % 7 == 0) p[i] = 0.0;
    z += p[i];
  }
  if (z == 0.0) {
    p[0] = 1.0;
    z = 1.0;
  }
  for (double& x : p) x /= z;
  return p;
}

// Scratch directory removed when the object goes out of scope.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("uscd_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace testing
