#include "fieldsynth/nifti.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "fieldsynth/error.hpp"

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

namespace fieldsynth {
namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

// NIfTI-1 header byte offsets.
namespace off {
constexpr std::size_t sizeof_hdr = 0;
constexpr std::size_t dim = 40;
constexpr std::size_t datatype = 70;
constexpr std::size_t bitpix = 72;
constexpr std::size_t pixdim = 76;
constexpr std::size_t vox_offset = 108;
constexpr std::size_t scl_slope = 112;
constexpr std::size_t scl_inter = 116;
constexpr std::size_t xyzt_units = 123;
constexpr std::size_t descrip = 148;
constexpr std::size_t qform_code = 252;
constexpr std::size_t sform_code = 254;
constexpr std::size_t quatern_b = 256;
constexpr std::size_t qoffset_x = 268;
constexpr std::size_t srow_x = 280;
constexpr std::size_t magic = 344;
}  // namespace off

enum DataType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
  kUint32 = 768,
};

template <typename T>
T get(const std::vector<char>& buf, std::size_t offset) {
  T v;
  std::memcpy(&v, buf.data() + offset, sizeof(T));
  return v;
}

template <typename T>
void put(std::vector<char>& buf, std::size_t offset, T v) {
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8:
    case kInt8: return 1;
    case kInt16:
    case kUint16: return 2;
    case kInt32:
    case kUint32:
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

template <typename T>
double decode(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return static_cast<double>(v);
}

Affine quaternion_affine(float b, float c, float d, float qx, float qy, float qz,
                         const std::array<float, 8>& pixdim) {
  double a2 = 1.0 - (double(b) * b + double(c) * c + double(d) * d);
  double a = a2 > 1e-7 ? std::sqrt(a2) : 0.0;
  double bb = b, cc = c, dd = d;
  if (a == 0.0) {
    const double n = std::sqrt(bb * bb + cc * cc + dd * dd);
    bb /= n;
    cc /= n;
    dd /= n;
  }
  const double qfac = pixdim[0] < 0.0f ? -1.0 : 1.0;
  const double dx = pixdim[1], dy = pixdim[2], dz = pixdim[3] * qfac;
  Affine m{};
  m[0] = {(a * a + bb * bb - cc * cc - dd * dd) * dx, 2.0 * (bb * cc - a * dd) * dy,
          2.0 * (bb * dd + a * cc) * dz, qx};
  m[1] = {2.0 * (bb * cc + a * dd) * dx, (a * a + cc * cc - bb * bb - dd * dd) * dy,
          2.0 * (cc * dd - a * bb) * dz, qy};
  m[2] = {2.0 * (bb * dd - a * cc) * dx, 2.0 * (cc * dd + a * bb) * dy,
          (a * a + dd * dd - cc * cc - bb * bb) * dz, qz};
  m[3] = {0.0, 0.0, 0.0, 1.0};
  return m;
}

}  // namespace

NiftiImage load_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> hdr(kHeaderSize);
  if (!in.read(hdr.data(), static_cast<std::streamsize>(kHeaderSize)))
    throw IoError("truncated NIfTI header in " + path.string());

  const auto sizeof_hdr = get<std::int32_t>(hdr, off::sizeof_hdr);
  if (sizeof_hdr != 348) {
    if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == 348u)
      throw UnsupportedError("big-endian NIfTI is not supported: " + path.string());
    throw FormatError("not a NIfTI-1 header (sizeof_hdr=" + std::to_string(sizeof_hdr) + ")");
  }
  const char* magic = hdr.data() + off::magic;
  if (std::memcmp(magic, "ni1\0", 4) == 0)
    throw UnsupportedError("detached-header NIfTI (ni1) is not supported: " + path.string());
  if (std::memcmp(magic, "n+1\0", 4) != 0) throw FormatError("bad NIfTI magic in " + path.string());

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = get<std::int16_t>(hdr, off::dim + 2 * i);
  if (dim[0] < 3 || dim[0] > 7) throw UnsupportedError("only 3D NIfTI volumes are supported");
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw UnsupportedError("only 3D NIfTI volumes are supported");
  const Dims dims{dim[1], dim[2], dim[3]};
  if (!dims.valid()) throw FormatError("non-positive NIfTI dimensions");

  NiftiInfo info;
  info.datatype = get<std::int16_t>(hdr, off::datatype);
  info.bitpix = get<std::int16_t>(hdr, off::bitpix);
  info.scl_slope = get<float>(hdr, off::scl_slope);
  info.scl_inter = get<float>(hdr, off::scl_inter);
  info.qform_code = get<std::int16_t>(hdr, off::qform_code);
  info.sform_code = get<std::int16_t>(hdr, off::sform_code);
  info.vox_offset = get<float>(hdr, off::vox_offset);
  {
    const char* d = hdr.data() + off::descrip;
    info.description.assign(d, strnlen(d, 80));
  }

  const int bpv = bytes_per_voxel(info.datatype);
  if (bpv == 0) throw UnsupportedError("unsupported NIfTI datatype " + std::to_string(info.datatype));

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = get<float>(hdr, off::pixdim + 4 * i);
  Spacing spacing{};
  for (int i = 0; i < 3; ++i) {
    const double s = std::abs(pixdim[i + 1]);
    spacing[i] = s > 0.0 && std::isfinite(s) ? s : 1.0;
  }

  Affine affine;
  if (info.sform_code > 0) {
    affine = Affine{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) affine[r][c] = get<float>(hdr, off::srow_x + 16 * r + 4 * c);
    affine[3] = {0.0, 0.0, 0.0, 1.0};
  } else if (info.qform_code > 0) {
    affine = quaternion_affine(get<float>(hdr, off::quatern_b), get<float>(hdr, off::quatern_b + 4),
                               get<float>(hdr, off::quatern_b + 8), get<float>(hdr, off::qoffset_x),
                               get<float>(hdr, off::qoffset_x + 4), get<float>(hdr, off::qoffset_x + 8),
                               pixdim);
  } else {
    affine = diagonal_affine(spacing);
  }

  const auto data_offset = static_cast<std::streamoff>(info.vox_offset);
  if (data_offset < static_cast<std::streamoff>(kHeaderSize))
    throw FormatError("vox_offset points inside the header");
  in.seekg(data_offset);
  const std::size_t n = dims.count();
  std::vector<char> raw(n * static_cast<std::size_t>(bpv));
  if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size())))
    throw IoError("truncated NIfTI data section in " + path.string());

  const bool scale = info.scl_slope != 0.0f && std::isfinite(info.scl_slope);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const char* p = raw.data() + i * static_cast<std::size_t>(bpv);
    if (info.datatype == kFloat32 && !scale) {
      std::memcpy(&data[i], p, 4);
      continue;
    }
    double v = 0.0;
    switch (info.datatype) {
      case kUint8: v = decode<std::uint8_t>(p); break;
      case kInt8: v = decode<std::int8_t>(p); break;
      case kInt16: v = decode<std::int16_t>(p); break;
      case kUint16: v = decode<std::uint16_t>(p); break;
      case kInt32: v = decode<std::int32_t>(p); break;
      case kUint32: v = decode<std::uint32_t>(p); break;
      case kFloat32: v = decode<float>(p); break;
      case kFloat64: v = decode<double>(p); break;
    }
    if (scale) v = static_cast<double>(info.scl_slope) * v + static_cast<double>(info.scl_inter);
    data[i] = static_cast<float>(v);
  }
  return {Volume(dims, spacing, affine, std::move(data)), std::move(info)};
}

void save_nifti(const Volume& volume, const std::filesystem::path& path,
                const std::string& description) {
  const Dims& d = volume.dims();
  if (d.nx > INT16_MAX || d.ny > INT16_MAX || d.nz > INT16_MAX)
    throw ArgumentError("volume too large for NIfTI-1");

  std::vector<char> hdr(kDataOffset, 0);
  put<std::int32_t>(hdr, off::sizeof_hdr, 348);
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(d.nx), static_cast<std::int16_t>(d.ny),
                                        static_cast<std::int16_t>(d.nz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<std::int16_t>(hdr, off::dim + 2 * i, dim[i]);
  put<std::int16_t>(hdr, off::datatype, kFloat32);
  put<std::int16_t>(hdr, off::bitpix, 32);
  const std::array<float, 8> pixdim{1.0f,
                                    static_cast<float>(volume.spacing()[0]),
                                    static_cast<float>(volume.spacing()[1]),
                                    static_cast<float>(volume.spacing()[2]),
                                    1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) put<float>(hdr, off::pixdim + 4 * i, pixdim[i]);
  put<float>(hdr, off::vox_offset, static_cast<float>(kDataOffset));
  // slope 0 means "no scaling", which keeps float32 data bit-exact.
  put<float>(hdr, off::scl_slope, 0.0f);
  put<float>(hdr, off::scl_inter, 0.0f);
  hdr[off::xyzt_units] = 2;  // mm
  std::memcpy(hdr.data() + off::descrip, description.data(), std::min<std::size_t>(description.size(), 79));
  put<std::int16_t>(hdr, off::qform_code, 0);
  put<std::int16_t>(hdr, off::sform_code, 1);
  const Affine& a = volume.affine();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(hdr, off::srow_x + 16 * r + 4 * c, static_cast<float>(a[r][c]));
  std::memcpy(hdr.data() + off::magic, "n+1\0", 4);
  // Bytes 348..351 are the zero extension flag.

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  const auto bytes = std::as_bytes(volume.data());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace fieldsynth
