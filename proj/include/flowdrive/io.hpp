#pragma once

// Little-endian binary record IO shared by datasets, cluster models and
// checkpoints. Every file starts with a 4-byte magic and a u32 version.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "flowdrive/autodiff.hpp"
#include "flowdrive/error.hpp"

namespace flowdrive::io {

class Writer {
 public:
  Writer(const std::string& path, std::string_view magic, std::uint32_t version);

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_string(std::string_view s);
  void put_doubles(const std::vector<double>& v);
  void put_tensor(const ad::Tensor& t);
  void finish();

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  /// Throws if the magic differs or the version is not `version`.
  Reader(const std::string& path, std::string_view magic, std::uint32_t version);

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    FD_CHECK(in_.good(), "{}: truncated file", path_);
    return v;
  }
  std::string get_string();
  std::vector<double> get_doubles();
  ad::Tensor get_tensor();
  bool at_end();

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace flowdrive::io
