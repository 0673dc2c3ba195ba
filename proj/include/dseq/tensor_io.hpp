#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dseq/tensor.hpp"

DSEQ_BEGIN_NAMESPACE

// DSQT binary array format:
//   "DSQT" | u8 version (1) | u8 dtype | u8 rank | u64 dims[rank] | payload
// All integers and payload values are little-endian.

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

std::size_t dtype_size(DType dtype);

/// A decoded DSQT record; payload kept as raw little-endian bytes.
struct DsqtArray {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const { return dseq::numel(shape); }
  std::vector<double> to_doubles() const;
};

/// Native dtype of Real in this build.
DType native_dtype();

std::vector<std::uint8_t> encode_dsqt(const Tensor& tensor, DType dtype = native_dtype());
std::vector<std::uint8_t> encode_dsqt_u8(const Shape& shape, std::span<const std::uint8_t> values);

/// Decodes one record starting at `bytes[0]`. `base_offset` is only used to
/// report absolute positions in error messages. `consumed` receives the
/// record length.
DsqtArray decode_dsqt(std::span<const std::uint8_t> bytes, std::size_t base_offset, std::size_t* consumed,
                      const std::string& source);

Tensor to_tensor(const DsqtArray& array);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor, DType dtype = native_dtype());
Tensor load_tensor(const std::filesystem::path& path);
DsqtArray load_array(const std::filesystem::path& path);

DSEQ_END_NAMESPACE
