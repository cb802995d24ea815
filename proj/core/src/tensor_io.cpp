#include "mmm/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "mmm/common.hpp"

namespace mmm::io {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_matrix(std::ostream& out, const ad::Mat<float>& m) {
  write_u32(out, static_cast<std::uint32_t>(m.rows()));
  write_u32(out, static_cast<std::uint32_t>(m.cols()));
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      buf[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void write_named_matrix(std::ostream& out, const std::string& name, const ad::Mat<float>& m) {
  write_string(out, name);
  write_matrix(out, m);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw LoadError("unexpected end of file while reading u32");
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw LoadError("unexpected end of file while reading u64");
  return v;
}

std::string read_string(std::istream& in) {
  std::uint32_t len = read_u32(in);
  if (len > (1u << 24)) throw LoadError("implausible string length in file");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw LoadError("unexpected end of file while reading string");
  return s;
}

ad::Mat<float> read_matrix(std::istream& in) {
  std::uint32_t rows = read_u32(in), cols = read_u32(in);
  if (static_cast<std::uint64_t>(rows) * cols > (1ull << 30)) {
    throw LoadError("implausible tensor shape in file");
  }
  std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw LoadError("unexpected end of file while reading tensor data");
  ad::Mat<float> m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = buf[static_cast<std::size_t>(i) * cols + j];
  }
  return m;
}

std::pair<std::string, ad::Mat<float>> read_named_matrix(std::istream& in) {
  std::string name = read_string(in);
  return {std::move(name), read_matrix(in)};
}

void write_magic(std::ostream& out, const char magic[4]) { out.write(magic, 4); }

void expect_magic(std::istream& in, const char magic[4], const std::string& what) {
  char buf[4] = {};
  in.read(buf, 4);
  if (!in || std::memcmp(buf, magic, 4) != 0) {
    throw LoadError("bad magic in " + what + " (expected '" + std::string(magic, 4) + "')");
  }
}

void write_u16_array(std::ostream& out, const std::vector<std::uint16_t>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(std::uint16_t)));
}

std::vector<std::uint16_t> read_u16_array(std::istream& in, std::size_t count) {
  std::vector<std::uint16_t> v(count);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(count * sizeof(std::uint16_t)));
  if (!in) throw LoadError("unexpected end of file while reading token payload");
  return v;
}

}  // namespace mmm::io
