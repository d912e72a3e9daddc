#pragma once

// Test plumbing: scratch directories, file digests, CLI invocation and a few
// seeded data builders.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "aeromon/aeromon.hpp"

namespace aeromon::test {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("aeromon_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::uint64_t digest(const fs::path& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : read_file(p)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Runs the CLI with `args` (already shell-quoted where needed); returns its exit status.
inline int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + AEROMON_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::string quote(const fs::path& p) { return "\"" + p.string() + "\""; }

/// A = B^T B + I with B filled from N(0,1).
inline Matrix random_spd(std::size_t d, Rng& rng) {
  Matrix b(d, d);
  for (double& v : b.data()) v = rng.normal();
  Matrix a = matmul(transpose(b), b);
  for (std::size_t i = 0; i < d; ++i) a(i, i) += 1.0;
  return a;
}

inline Dataset labeled_points(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels) {
  Dataset d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    TelemetrySample s;
    for (std::size_t j = 0; j < rows[i].size() && j < kChannels; ++j) s.features[j] = rows[i][j];
    s.label = labels[i] ? Label::Anomalous : Label::Normal;
    d.samples.push_back(s);
  }
  return d;
}

inline SynthConfig small_synth(std::size_t n, std::uint64_t seed) {
  SynthConfig c;
  c.n_samples = n;
  c.seed = seed;
  return c;
}

}  // namespace aeromon::test
