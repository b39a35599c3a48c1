#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>

#include "vitplast/tensor.hpp"

// "VTEN" tensor files:
//   bytes 0..3  magic "VTEN"
//   byte  4     version (1)
//   byte  5     dtype (0 = f32, 1 = f64, 2 = u8)
//   byte  6     ndim
//   byte  7     reserved, written as 0
//   ndim little-endian u64 extents, then the row-major payload (little-endian).
// A rank-0 tensor has ndim 0 and one payload element.

namespace vitplast {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

std::string_view dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);

/// Encodes `t` as `dtype`. Throws FormatError when a value cannot be stored
/// exactly (non-integer or out-of-range for u8, not representable in f32).
void write_tensor(std::ostream& out, const Tensor& t, DType dtype = DType::F64);

/// Decodes one tensor; f32 and u8 payloads widen exactly to double. When
/// `expect` is set a different stored dtype is a FormatError. The stored
/// dtype is reported through `stored` if non-null.
Tensor read_tensor(std::istream& in, std::optional<DType> expect = std::nullopt,
                   DType* stored = nullptr);

void write_tensor_file(const std::filesystem::path& path, const Tensor& t,
                       DType dtype = DType::F64);
Tensor read_tensor_file(const std::filesystem::path& path,
                        std::optional<DType> expect = std::nullopt, DType* stored = nullptr);

/// Writes to a sibling temporary and renames it over `path`, so readers see
/// either the old file or the complete new one.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace vitplast
