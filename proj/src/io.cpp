#include "flowdrive/io.hpp"

namespace flowdrive::io {

namespace {
constexpr std::uint64_t kMaxLength = 1ULL << 34;
}

Writer::Writer(const std::string& path, std::string_view magic, std::uint32_t version)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  FD_CHECK(out_.is_open(), "cannot open '{}' for writing", path);
  FD_CHECK(magic.size() == 4, "magic must be 4 bytes");
  out_.write(magic.data(), 4);
  put(version);
}

void Writer::put_string(std::string_view s) {
  put<std::uint64_t>(s.size());
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void Writer::put_doubles(const std::vector<double>& v) {
  put<std::uint64_t>(v.size());
  out_.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void Writer::put_tensor(const ad::Tensor& t) {
  put<std::uint64_t>(t.shape.size());
  for (std::size_t d : t.shape) put<std::uint64_t>(d);
  put_doubles(t.data);
}

void Writer::finish() {
  out_.flush();
  FD_CHECK(out_.good(), "write to '{}' failed", path_);
}

Reader::Reader(const std::string& path, std::string_view magic, std::uint32_t version)
    : path_(path), in_(path, std::ios::binary) {
  FD_CHECK(in_.is_open(), "cannot open '{}'", path);
  char m[4] = {};
  in_.read(m, 4);
  FD_CHECK(in_.good() && std::string_view(m, 4) == magic, "{}: not a {} file", path,
           std::string(magic));
  const auto v = get<std::uint32_t>();
  FD_CHECK(v == version, "{}: unsupported version {} (expected {})", path, v, version);
}

std::string Reader::get_string() {
  const auto n = get<std::uint64_t>();
  FD_CHECK(n < kMaxLength, "{}: corrupt string length", path_);
  std::string s(n, '\0');
  in_.read(s.data(), static_cast<std::streamsize>(n));
  FD_CHECK(in_.good(), "{}: truncated file", path_);
  return s;
}

std::vector<double> Reader::get_doubles() {
  const auto n = get<std::uint64_t>();
  FD_CHECK(n < kMaxLength, "{}: corrupt array length", path_);
  std::vector<double> v(n);
  in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  FD_CHECK(in_.good() || n == 0, "{}: truncated file", path_);
  return v;
}

ad::Tensor Reader::get_tensor() {
  const auto rank = get<std::uint64_t>();
  FD_CHECK(rank < 16, "{}: corrupt tensor rank", path_);
  ad::Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>();
  std::vector<double> data = get_doubles();
  FD_CHECK(data.size() == ad::shape_numel(shape), "{}: tensor size mismatch", path_);
  return ad::Tensor(std::move(shape), std::move(data));
}

bool Reader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

}  // namespace flowdrive::io
