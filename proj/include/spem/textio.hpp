#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>

namespace spem {

// Shortest round-trip decimal form of a double (to_chars default).
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const char* context) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error(std::string("malformed number '") + std::string(s) +
                             "' in " + context);
  return v;
}

// Writes via a temp file in the same directory, then renames into place, so
// readers never observe a partially written artifact.
class AtomicFileWriter {
 public:
  explicit AtomicFileWriter(const std::filesystem::path& target,
                            std::ios::openmode mode = std::ios::out)
      : target_(target), tmp_(target.string() + ".tmp") {
    stream_.open(tmp_, mode);
    if (!stream_)
      throw std::runtime_error("cannot open for writing: " + tmp_.string());
  }

  std::ofstream& stream() { return stream_; }

  void commit() {
    stream_.flush();
    if (!stream_) throw std::runtime_error("write failed: " + tmp_.string());
    stream_.close();
    std::filesystem::rename(tmp_, target_);
    committed_ = true;
  }

  ~AtomicFileWriter() {
    if (!committed_) {
      stream_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

 private:
  std::filesystem::path target_;
  std::filesystem::path tmp_;
  std::ofstream stream_;
  bool committed_ = false;
};

}  // namespace spem
