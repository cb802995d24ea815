#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mmm/autodiff.hpp"

namespace mmm::io {

// All on-disk integers and floats are little-endian. Matrices are written
// row-major as 32-bit floats regardless of the in-memory scalar type.

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_string(std::ostream& out, const std::string& s);
void write_matrix(std::ostream& out, const ad::Mat<float>& m);
void write_named_matrix(std::ostream& out, const std::string& name, const ad::Mat<float>& m);

std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::string read_string(std::istream& in);
ad::Mat<float> read_matrix(std::istream& in);
std::pair<std::string, ad::Mat<float>> read_named_matrix(std::istream& in);

void write_magic(std::ostream& out, const char magic[4]);
void expect_magic(std::istream& in, const char magic[4], const std::string& what);

void write_u16_array(std::ostream& out, const std::vector<std::uint16_t>& v);
std::vector<std::uint16_t> read_u16_array(std::istream& in, std::size_t count);

}  // namespace mmm::io
