#pragma once

#include "fsfl/data.hpp"

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <vector>

namespace fsfl {

inline constexpr std::uint32_t kIdxImagesMagic = 2051;  // 0x00000803
inline constexpr std::uint32_t kIdxLabelsMagic = 2049;  // 0x00000801

/// Unsigned-byte IDX array: big-endian magic 0x0000 08 <ndim>, big-endian
/// dimension sizes, raw bytes.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  std::uint32_t magic() const { return 0x0800u | static_cast<std::uint32_t>(dims.size()); }
};

/// Throws FormatError with the byte offset of the fault.
IdxArray read_idx(std::istream& in);
IdxArray read_idx(const std::filesystem::path& path);
void write_idx(std::ostream& out, const IdxArray& a);
void write_idx(const std::filesystem::path& path, const IdxArray& a);

/// Pixels scaled to [0, 1] and flattened row-major.
LabeledDataset mnist_load(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Inverse of mnist_load for datasets whose inputs are multiples of 1/255.
void mnist_save(const LabeledDataset& ds, std::uint32_t rows, std::uint32_t cols,
                const std::filesystem::path& images, const std::filesystem::path& labels);

}  // namespace fsfl
