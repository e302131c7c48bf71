#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "regmae/volume.hpp"

namespace regmae::nifti {

enum class DataType : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
  Int8 = 256,
  UInt16 = 512,
};

bool is_supported(std::int16_t code);
int bytes_per_voxel(DataType type);
bool is_integer(DataType type);

/// Parsed NIfTI-1 header in host byte order. Only the fields this library
/// reads or writes are kept; everything else is zero on output.
struct NiftiHeader {
  std::array<std::int16_t, 8> dims{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  std::int64_t vox_offset = 352;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::uint8_t xyzt_units = 0;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 3> quatern{};  // b, c, d
  std::array<float, 3> qoffset{};
  std::array<std::array<float, 4>, 3> srow{};
  std::array<char, 80> descrip{};
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool big_endian = false;

  int rank() const { return dims[0]; }
  std::int64_t voxel_total() const;
};

inline constexpr std::size_t kHeaderSize = 348;

/// Full image: header, scaled voxel values (column-major), and the raw bytes
/// between the header and the payload (extension flag + extensions).
struct NiftiImage {
  NiftiHeader header;
  std::vector<double> data;
  std::vector<std::uint8_t> extensions;
};

NiftiHeader parse_header(std::span<const std::uint8_t> bytes);

/// voxel -> mm: sform when sform_code > 0, else qform, else pixdim diagonal.
Affine header_affine(const NiftiHeader& header);

NiftiImage read_nifti(const std::filesystem::path& path);
void write_nifti(const NiftiImage& image, const std::filesystem::path& path);

Volume4D read_volume(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);

void write_volume(const Volume4D& vol, const std::filesystem::path& path);
void write_labels(const LabelVolume& labels, const std::filesystem::path& path);

/// Raw file contents, transparently gunzipped when the gzip magic is present.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace regmae::nifti
