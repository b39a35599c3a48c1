#include "vitplast/tensor_io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include "vitplast/errors.hpp"

namespace vitplast {

namespace {

constexpr std::array<char, 4> kMagic = {'V', 'T', 'E', 'N'};
constexpr std::uint8_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  }
  out.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError(std::string("truncated tensor file while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

DType checked_dtype(std::uint8_t raw) {
  if (raw > 2) throw FormatError("unknown tensor dtype code " + std::to_string(raw));
  return static_cast<DType>(raw);
}

}  // namespace

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::U8: return "u8";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
  }
  return 0;
}

void write_tensor(std::ostream& out, const Tensor& t, DType dtype) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, kVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  put_le<std::uint8_t>(out, 0);
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);

  for (double v : t.values()) {
    switch (dtype) {
      case DType::F64:
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        break;
      case DType::F32: {
        const auto f = static_cast<float>(v);
        if (static_cast<double>(f) != v && !(std::isnan(v) && std::isnan(f))) {
          throw FormatError("value " + std::to_string(v) + " is not representable as f32");
        }
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
        break;
      }
      case DType::U8: {
        if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) {
          throw FormatError("value " + std::to_string(v) + " is not a u8");
        }
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(v));
        break;
      }
    }
  }
  if (!out) throw FormatError("failed writing tensor payload");
}

Tensor read_tensor(std::istream& in, std::optional<DType> expect, DType* stored) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size())) throw FormatError("truncated tensor file (magic)");
  if (magic != kMagic) throw FormatError("bad tensor magic, expected VTEN");
  const auto version = get_le<std::uint8_t>(in, "version");
  if (version != kVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  const DType dtype = checked_dtype(get_le<std::uint8_t>(in, "dtype"));
  if (expect && *expect != dtype) {
    throw FormatError("tensor dtype mismatch: stored " + std::string(dtype_name(dtype)) +
                      ", expected " + std::string(dtype_name(*expect)));
  }
  const auto ndim = get_le<std::uint8_t>(in, "ndim");
  get_le<std::uint8_t>(in, "reserved");

  Shape shape(ndim);
  std::size_t count = 1;
  for (auto& e : shape) {
    const auto extent = get_le<std::uint64_t>(in, "extent");
    if (extent == 0) throw FormatError("tensor extent 0 is not allowed");
    if (count > (std::size_t{1} << 40) / extent) throw FormatError("tensor extents too large");
    e = extent;
    count *= extent;
  }

  std::vector<double> data(count);
  const std::size_t width = dtype_size(dtype);
  std::vector<unsigned char> raw(count * width);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("truncated tensor payload: expected " + std::to_string(raw.size()) +
                      " bytes");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* p = raw.data() + i * width;
    switch (dtype) {
      case DType::F64: {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(p[b]) << (8 * b);
        data[i] = std::bit_cast<double>(u);
        break;
      }
      case DType::F32: {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[b]) << (8 * b);
        data[i] = static_cast<double>(std::bit_cast<float>(u));
        break;
      }
      case DType::U8:
        data[i] = p[0];
        break;
    }
  }
  if (stored) *stored = dtype;
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  std::ostringstream buf(std::ios::binary);
  write_tensor(buf, t, dtype);
  write_file_atomic(path, buf.str());
}

Tensor read_tensor_file(const std::filesystem::path& path, std::optional<DType> expect,
                        DType* stored) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open tensor file " + path.string());
  Tensor t = read_tensor(in, expect, stored);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after tensor payload in " + path.string());
  }
  return t;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const std::filesystem::path tmp =
      path.string() + ".tmp." + std::to_string(static_cast<long>(::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FormatError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw FormatError("cannot move " + tmp.string() + " to " + path.string() + ": " +
                      ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace vitplast
