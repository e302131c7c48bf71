#include "regmae/nifti_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include <zlib.h>

namespace regmae::nifti {
namespace {

template <class T>
T byteswap_value(T v) {
  std::array<std::uint8_t, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

/// Little-endian or big-endian field access over a byte buffer.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  bool swap_;
};

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  template <class T>
  void put(std::size_t offset, T v) {
    static_assert(std::endian::native == std::endian::little);
    std::memcpy(out_.data() + offset, &v, sizeof(T));
  }

 private:
  std::vector<std::uint8_t>& out_;
};

bool has_gz_suffix(const std::filesystem::path& path) {
  return path.extension() == ".gz";
}

template <class Raw>
void decode_as(const std::uint8_t* src, std::int64_t n, bool swap, double slope, double inter,
               auto&& sink) {
  for (std::int64_t i = 0; i < n; ++i) {
    Raw v;
    std::memcpy(&v, src + i * sizeof(Raw), sizeof(Raw));
    if (swap) v = byteswap_value(v);
    sink(i, double(v) * slope + inter);
  }
}

/// Decodes the payload of `bytes` into `sink(i, value)` with scaling applied.
template <class Sink>
void decode_payload(const NiftiHeader& h, std::span<const std::uint8_t> bytes, Sink&& sink) {
  const std::int64_t n = h.voxel_total();
  const auto type = DataType(h.datatype);
  const std::int64_t need = h.vox_offset + n * bytes_per_voxel(type);
  require(std::int64_t(bytes.size()) >= need, ErrorKind::Io,
          "truncated payload: expected " + std::to_string(need) + " bytes, file has " +
              std::to_string(bytes.size()));
  double slope = 1.0, inter = 0.0;
  if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope)) {
    slope = h.scl_slope;
    inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  }
  const std::uint8_t* src = bytes.data() + h.vox_offset;
  const bool swap = h.big_endian;
  switch (type) {
    case DataType::UInt8: decode_as<std::uint8_t>(src, n, swap, slope, inter, sink); break;
    case DataType::Int8: decode_as<std::int8_t>(src, n, swap, slope, inter, sink); break;
    case DataType::Int16: decode_as<std::int16_t>(src, n, swap, slope, inter, sink); break;
    case DataType::UInt16: decode_as<std::uint16_t>(src, n, swap, slope, inter, sink); break;
    case DataType::Int32: decode_as<std::int32_t>(src, n, swap, slope, inter, sink); break;
    case DataType::Float32: decode_as<float>(src, n, swap, slope, inter, sink); break;
    case DataType::Float64: decode_as<double>(src, n, swap, slope, inter, sink); break;
  }
}

template <class Raw>
void encode_as(std::uint8_t* dst, std::span<const double> values, double slope, double inter) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = (values[i] - inter) / slope;
    if constexpr (std::is_integral_v<Raw>) {
      v = std::nearbyint(v);
      v = std::clamp(v, double(std::numeric_limits<Raw>::lowest()),
                     double(std::numeric_limits<Raw>::max()));
    }
    const Raw r = static_cast<Raw>(v);
    std::memcpy(dst + i * sizeof(Raw), &r, sizeof(Raw));
  }
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  const std::string mode = has_gz_suffix(path) ? "wb6" : "wbT";
  gzFile f = gzopen(path.string().c_str(), mode.c_str());
  require(f != nullptr, ErrorKind::Io, "cannot open for writing: " + path.string());
  std::size_t written = 0;
  while (written < bytes.size()) {
    const unsigned chunk = unsigned(std::min<std::size_t>(bytes.size() - written, 1u << 30));
    const int w = gzwrite(f, bytes.data() + written, chunk);
    if (w <= 0) {
      gzclose(f);
      fail(ErrorKind::Io, "write failed: " + path.string());
    }
    written += std::size_t(w);
  }
  require(gzclose(f) == Z_OK, ErrorKind::Io, "close failed: " + path.string());
}

std::array<float, 8> pixdim_from_affine(const Affine& a, double tr) {
  std::array<float, 8> p{};
  p[0] = 1.0f;
  for (int c = 0; c < 3; ++c) p[c + 1] = float(a.block<3, 1>(0, c).norm());
  p[4] = float(tr);
  p[5] = p[6] = p[7] = 1.0f;
  return p;
}

void set_sform(NiftiHeader& h, const Affine& a) {
  h.sform_code = 2;
  h.qform_code = 0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) h.srow[r][c] = float(a(r, c));
}

void check_dims_fit(std::span<const std::int64_t> sizes) {
  for (auto s : sizes)
    require(s > 0 && s <= std::numeric_limits<std::int16_t>::max(), ErrorKind::Size,
            "dimension " + std::to_string(s) + " does not fit a 16-bit header field");
}

}  // namespace

bool is_supported(std::int16_t code) {
  switch (DataType(code)) {
    case DataType::UInt8:
    case DataType::Int16:
    case DataType::Int32:
    case DataType::Float32:
    case DataType::Float64:
    case DataType::Int8:
    case DataType::UInt16: return true;
  }
  return false;
}

int bytes_per_voxel(DataType type) {
  switch (type) {
    case DataType::UInt8:
    case DataType::Int8: return 1;
    case DataType::Int16:
    case DataType::UInt16: return 2;
    case DataType::Int32:
    case DataType::Float32: return 4;
    case DataType::Float64: return 8;
  }
  fail(ErrorKind::Unsupported, "datatype " + std::to_string(int(type)));
}

bool is_integer(DataType type) {
  return type != DataType::Float32 && type != DataType::Float64;
}

std::int64_t NiftiHeader::voxel_total() const {
  std::int64_t n = 1;
  for (int i = 1; i <= dims[0]; ++i) n *= dims[i];
  return n;
}

NiftiHeader parse_header(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= kHeaderSize, ErrorKind::Io,
          "file shorter than the 348-byte header (" + std::to_string(bytes.size()) + " bytes)");

  // Byte order: dims[0] must be a plausible rank.
  std::int16_t rank;
  std::memcpy(&rank, bytes.data() + 40, 2);
  bool swap = false;
  if (rank < 1 || rank > 7) {
    swap = true;
    rank = byteswap_value(rank);
    require(rank >= 1 && rank <= 7, ErrorKind::Format, "implausible dims[0] in either byte order");
  }
  const ByteReader in(bytes, swap);

  NiftiHeader h;
  h.big_endian = (std::endian::native == std::endian::little) == swap;
  std::memcpy(h.magic.data(), bytes.data() + 344, 4);
  const bool single = std::memcmp(h.magic.data(), "n+1\0", 4) == 0;
  const bool pair = std::memcmp(h.magic.data(), "ni1\0", 4) == 0;
  require(single || pair, ErrorKind::Format, "bad magic string");
  require(in.get<std::int32_t>(0) == 348, ErrorKind::Format, "sizeof_hdr is not 348");

  for (int i = 0; i < 8; ++i) h.dims[i] = in.get<std::int16_t>(40 + 2 * i);
  for (int i = 1; i <= h.dims[0]; ++i)
    require(h.dims[i] > 0, ErrorKind::Format, "non-positive size in dims[" + std::to_string(i) + "]");
  h.datatype = in.get<std::int16_t>(70);
  h.bitpix = in.get<std::int16_t>(72);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = in.get<float>(76 + 4 * i);
  h.vox_offset = std::int64_t(in.get<float>(108));
  h.scl_slope = in.get<float>(112);
  h.scl_inter = in.get<float>(116);
  h.xyzt_units = bytes[123];
  std::memcpy(h.descrip.data(), bytes.data() + 148, 80);
  h.qform_code = in.get<std::int16_t>(252);
  h.sform_code = in.get<std::int16_t>(254);
  for (int i = 0; i < 3; ++i) h.quatern[i] = in.get<float>(256 + 4 * i);
  for (int i = 0; i < 3; ++i) h.qoffset[i] = in.get<float>(268 + 4 * i);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) h.srow[r][c] = in.get<float>(280 + 16 * r + 4 * c);

  require(is_supported(h.datatype), ErrorKind::Unsupported,
          "datatype code " + std::to_string(h.datatype));
  if (single)
    require(h.vox_offset >= std::int64_t(kHeaderSize), ErrorKind::Format, "vox_offset inside header");
  return h;
}

Affine header_affine(const NiftiHeader& h) {
  Affine a = Affine::Identity();
  if (h.sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) a(r, c) = h.srow[r][c];
    return a;
  }
  auto spacing = [&](int i) { return h.pixdim[i] > 0 ? double(h.pixdim[i]) : 1.0; };
  if (h.qform_code > 0) {
    const double b = h.quatern[0], c = h.quatern[1], d = h.quatern[2];
    double w = 1.0 - (b * b + c * c + d * d);
    const double aq = w > 0 ? std::sqrt(w) : 0.0;
    Eigen::Matrix3d R;
    R << aq * aq + b * b - c * c - d * d, 2 * (b * c - aq * d), 2 * (b * d + aq * c),
        2 * (b * c + aq * d), aq * aq + c * c - b * b - d * d, 2 * (c * d - aq * b),
        2 * (b * d - aq * c), 2 * (c * d + aq * b), aq * aq + d * d - c * c - b * b;
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    a.block<3, 3>(0, 0) = R * Eigen::Vector3d(spacing(1), spacing(2), qfac * spacing(3)).asDiagonal();
    a.block<3, 1>(0, 3) = Eigen::Vector3d(h.qoffset[0], h.qoffset[1], h.qoffset[2]);
    return a;
  }
  return diagonal_affine(spacing(1), spacing(2), spacing(3));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::Io, "no such file: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  require(f != nullptr, ErrorKind::Io, "cannot open: " + path.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf;
  for (;;) {
    const int n = gzread(f, buf.data(), unsigned(buf.size()));
    if (n < 0) {
      gzclose(f);
      fail(ErrorKind::Io, "read failed (corrupt gzip stream?): " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

NiftiImage read_nifti(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  NiftiImage img;
  img.header = parse_header(bytes);
  require(img.header.magic[1] == '+', ErrorKind::Unsupported,
          "two-file (.hdr/.img) NIfTI pairs are not supported");
  const auto off = std::size_t(img.header.vox_offset);
  if (off > kHeaderSize && bytes.size() >= off)
    img.extensions.assign(bytes.begin() + kHeaderSize, bytes.begin() + off);
  img.data.resize(std::size_t(img.header.voxel_total()));
  decode_payload(img.header, bytes, [&](std::int64_t i, double v) { img.data[i] = v; });
  return img;
}

void write_nifti(const NiftiImage& image, const std::filesystem::path& path) {
  const NiftiHeader& h = image.header;
  require(h.dims[0] >= 1 && h.dims[0] <= 7, ErrorKind::Validation, "rank must be in [1,7]");
  require(is_supported(h.datatype), ErrorKind::Unsupported, "datatype code " + std::to_string(h.datatype));
  require(std::int64_t(image.data.size()) == h.voxel_total(), ErrorKind::Validation,
          "data length does not match header dims");
  const auto type = DataType(h.datatype);
  const int bpv = bytes_per_voxel(type);

  std::vector<std::uint8_t> ext = image.extensions;
  if (ext.size() < 4) ext.assign(4, 0);
  const std::size_t vox_offset = (kHeaderSize + ext.size() + 15) / 16 * 16;
  ext.resize(vox_offset - kHeaderSize, 0);

  std::vector<std::uint8_t> out(vox_offset + image.data.size() * bpv, 0);
  ByteWriter w(out);
  w.put<std::int32_t>(0, 348);
  out[38] = 'r';
  for (int i = 0; i < 8; ++i) w.put<std::int16_t>(40 + 2 * i, i <= h.dims[0] ? h.dims[i] : 0);
  w.put<std::int16_t>(70, h.datatype);
  w.put<std::int16_t>(72, std::int16_t(bpv * 8));
  for (int i = 0; i < 8; ++i) w.put<float>(76 + 4 * i, h.pixdim[i]);
  w.put<float>(108, float(vox_offset));
  w.put<float>(112, h.scl_slope);
  w.put<float>(116, h.scl_inter);
  out[123] = h.xyzt_units;
  std::memcpy(out.data() + 148, h.descrip.data(), 80);
  w.put<std::int16_t>(252, h.qform_code);
  w.put<std::int16_t>(254, h.sform_code);
  for (int i = 0; i < 3; ++i) w.put<float>(256 + 4 * i, h.quatern[i]);
  for (int i = 0; i < 3; ++i) w.put<float>(268 + 4 * i, h.qoffset[i]);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) w.put<float>(280 + 16 * r + 4 * c, h.srow[r][c]);
  std::memcpy(out.data() + 344, "n+1\0", 4);
  std::copy(ext.begin(), ext.end(), out.begin() + kHeaderSize);

  double slope = 1.0, inter = 0.0;
  if (h.scl_slope != 0.0f) {
    slope = h.scl_slope;
    inter = h.scl_inter;
  }
  std::uint8_t* dst = out.data() + vox_offset;
  const std::span<const double> values(image.data);
  switch (type) {
    case DataType::UInt8: encode_as<std::uint8_t>(dst, values, slope, inter); break;
    case DataType::Int8: encode_as<std::int8_t>(dst, values, slope, inter); break;
    case DataType::Int16: encode_as<std::int16_t>(dst, values, slope, inter); break;
    case DataType::UInt16: encode_as<std::uint16_t>(dst, values, slope, inter); break;
    case DataType::Int32: encode_as<std::int32_t>(dst, values, slope, inter); break;
    case DataType::Float32: encode_as<float>(dst, values, slope, inter); break;
    case DataType::Float64: encode_as<double>(dst, values, slope, inter); break;
  }
  write_bytes(out, path);
}

Volume4D read_volume(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const NiftiHeader h = parse_header(bytes);
  Index4 dims{1, 1, 1, 1};
  for (int i = 1; i <= std::min(3, h.rank()); ++i) dims[i - 1] = h.dims[i];
  for (int i = 4; i <= h.rank(); ++i) dims[3] *= h.dims[i];

  double tr = h.rank() >= 4 ? double(h.pixdim[4]) : 0.0;
  switch (h.xyzt_units & 0x38) {
    case 16: tr *= 1e-3; break;
    case 24: tr *= 1e-6; break;
    default: break;
  }
  Volume4D vol(dims, header_affine(h), tr > 0 ? tr : 1.0);
  decode_payload(h, bytes, [&](std::int64_t i, double v) { vol.data[i] = float(v); });
  return vol;
}

LabelVolume read_labels(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const NiftiHeader h = parse_header(bytes);
  Index3 dims{1, 1, 1};
  for (int i = 1; i <= std::min(3, h.rank()); ++i) dims[i - 1] = h.dims[i];
  for (int i = 4; i <= h.rank(); ++i)
    require(h.dims[i] == 1, ErrorKind::Format, "label volume must be 3D");
  LabelVolume lv(dims, header_affine(h));
  decode_payload(h, bytes, [&](std::int64_t i, double v) {
    require(v >= 0 && v == std::floor(v) && v <= std::numeric_limits<std::int32_t>::max(),
            ErrorKind::Format, "label volume holds a non-integer or negative value");
    lv.labels[i] = std::int32_t(v);
  });
  return lv;
}

void write_volume(const Volume4D& vol, const std::filesystem::path& path) {
  const std::array<std::int64_t, 4> sizes{vol.dims[0], vol.dims[1], vol.dims[2], vol.dims[3]};
  check_dims_fit(sizes);
  require(vol.affine.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1)), ErrorKind::Geometry,
          "affine last row must be (0,0,0,1)");
  NiftiImage img;
  auto& h = img.header;
  h.dims = {4, std::int16_t(vol.dims[0]), std::int16_t(vol.dims[1]), std::int16_t(vol.dims[2]),
            std::int16_t(vol.dims[3]), 1, 1, 1};
  h.datatype = std::int16_t(DataType::Float32);
  h.pixdim = pixdim_from_affine(vol.affine, vol.tr_seconds);
  h.xyzt_units = 2 | 8;  // mm, seconds
  set_sform(h, vol.affine);
  img.data.assign(vol.data.begin(), vol.data.end());
  write_nifti(img, path);
}

void write_labels(const LabelVolume& lv, const std::filesystem::path& path) {
  const std::array<std::int64_t, 3> sizes{lv.dims[0], lv.dims[1], lv.dims[2]};
  check_dims_fit(sizes);
  NiftiImage img;
  auto& h = img.header;
  h.dims = {3, std::int16_t(lv.dims[0]), std::int16_t(lv.dims[1]), std::int16_t(lv.dims[2]), 1, 1, 1, 1};
  const std::int32_t max_label = lv.labels.size() ? lv.labels.maxCoeff() : 0;
  h.datatype = std::int16_t(max_label <= std::numeric_limits<std::int16_t>::max() ? DataType::Int16
                                                                                   : DataType::Int32);
  h.pixdim = pixdim_from_affine(lv.affine, 1.0);
  h.xyzt_units = 2;
  set_sform(h, lv.affine);
  img.data.assign(lv.labels.begin(), lv.labels.end());
  write_nifti(img, path);
}

}  // namespace regmae::nifti
