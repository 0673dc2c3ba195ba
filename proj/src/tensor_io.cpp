#include "dseq/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

DSEQ_BEGIN_NAMESPACE

namespace {

constexpr char kMagic[4] = {'D', 'S', 'Q', 'T'};
constexpr std::uint8_t kVersion = 1;

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

void put_header(std::vector<std::uint8_t>& out, DType dtype, const Shape& shape) {
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  if (shape.size() > 255) throw ShapeError("DSQT supports rank <= 255");
  out.push_back(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) put_le<std::uint64_t>(out, d);
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  return 0;
}

DType native_dtype() { return sizeof(Real) == 8 ? DType::kF64 : DType::kF32; }

std::vector<double> DsqtArray::to_doubles() const {
  const std::size_t n = numel();
  std::vector<double> out(n);
  const std::uint8_t* p = payload.data();
  for (std::size_t i = 0; i < n; ++i) {
    switch (dtype) {
      case DType::kF32: out[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i)); break;
      case DType::kF64: out[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i)); break;
      case DType::kU8: out[i] = p[i]; break;
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_dsqt(const Tensor& tensor, DType dtype) {
  std::vector<std::uint8_t> out;
  put_header(out, dtype, tensor.shape());
  out.reserve(out.size() + tensor.numel() * dtype_size(dtype));
  for (Real v : tensor.data()) {
    switch (dtype) {
      case DType::kF32: put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
      case DType::kF64: put_le(out, std::bit_cast<std::uint64_t>(static_cast<double>(v))); break;
      case DType::kU8: out.push_back(static_cast<std::uint8_t>(v)); break;
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_dsqt_u8(const Shape& shape, std::span<const std::uint8_t> values) {
  if (numel(shape) != values.size()) throw ShapeError("encode_dsqt_u8: shape/value count mismatch");
  std::vector<std::uint8_t> out;
  put_header(out, DType::kU8, shape);
  out.insert(out.end(), values.begin(), values.end());
  return out;
}

DsqtArray decode_dsqt(std::span<const std::uint8_t> bytes, std::size_t base_offset, std::size_t* consumed,
                      const std::string& source) {
  auto corrupt = [&](std::size_t at, const std::string& what) {
    return FormatError(source + ": corrupt DSQT record at offset " + std::to_string(base_offset + at) + ": " + what);
  };
  if (bytes.size() < 7) throw corrupt(bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw corrupt(0, "bad magic");
  if (bytes[4] != kVersion) throw corrupt(4, "unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] > 2) throw corrupt(5, "unknown dtype " + std::to_string(bytes[5]));
  DsqtArray array;
  array.dtype = static_cast<DType>(bytes[5]);
  const std::size_t rank = bytes[6];
  std::size_t pos = 7;
  if (bytes.size() < pos + 8 * rank) throw corrupt(bytes.size(), "truncated dimensions");
  array.shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i, pos += 8) array.shape[i] = get_le<std::uint64_t>(bytes.data() + pos);
  const std::size_t payload = array.numel() * dtype_size(array.dtype);
  if (bytes.size() < pos + payload) {
    throw corrupt(bytes.size(), "truncated payload, expected " + std::to_string(payload) + " bytes from offset " +
                                    std::to_string(base_offset + pos));
  }
  array.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + payload));
  if (consumed) *consumed = pos + payload;
  return array;
}

Tensor to_tensor(const DsqtArray& array) {
  auto values = array.to_doubles();
  return Tensor::from(array.shape, std::vector<Real>(values.begin(), values.end()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open file");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open file for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path.string() + ": write failed");
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor, DType dtype) {
  write_file_bytes(path, encode_dsqt(tensor, dtype));
}

DsqtArray load_array(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  std::size_t used = 0;
  auto array = decode_dsqt(bytes, 0, &used, path.string());
  if (used != bytes.size()) {
    throw FormatError(path.string() + ": corrupt DSQT file, trailing bytes at offset " + std::to_string(used));
  }
  return array;
}

Tensor load_tensor(const std::filesystem::path& path) { return to_tensor(load_array(path)); }

DSEQ_END_NAMESPACE
