#include "vbiopsy/imaging/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace vbiopsy::imaging {
namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum DataType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
};

int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8:
    case kInt8: return 1;
    case kInt16:
    case kUint16: return 2;
    case kInt32:
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: fail(ErrorCode::Io, "unsupported NIfTI datatype " + std::to_string(datatype));
  }
}

bool is_gzip(const std::filesystem::path& path) { return path.extension() == ".gz"; }

Nifti1Header make_header(const Dims& dims, const Geometry& g, std::int16_t datatype) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(dims.x);
  h.dim[2] = static_cast<std::int16_t>(dims.y);
  h.dim[3] = static_cast<std::int16_t>(dims.z);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = datatype;
  h.bitpix = static_cast<std::int16_t>(8 * bytes_per_voxel(datatype));
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(g.spacing[i]);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.qform_code = 1;
  h.sform_code = 1;
  h.qoffset_x = static_cast<float>(g.origin[0]);
  h.qoffset_y = static_cast<float>(g.origin[1]);
  h.qoffset_z = static_cast<float>(g.origin[2]);
  h.srow_x[0] = h.pixdim[1];
  h.srow_x[3] = h.qoffset_x;
  h.srow_y[1] = h.pixdim[2];
  h.srow_y[3] = h.qoffset_y;
  h.srow_z[2] = h.pixdim[3];
  h.srow_z[3] = h.qoffset_z;
  std::memcpy(h.magic, "n+1\0", 4);
  return h;
}

void write_file(const std::filesystem::path& path, const Nifti1Header& h, const void* data, std::size_t bytes) {
  const char extension[4] = {0, 0, 0, 0};
  if (is_gzip(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    require(f != nullptr, ErrorCode::Io, "cannot open " + path.string() + " for writing");
    const bool ok = gzwrite(f, &h, sizeof(h)) == static_cast<int>(sizeof(h)) &&
                    gzwrite(f, extension, 4) == 4 &&
                    (bytes == 0 || gzwrite(f, data, static_cast<unsigned>(bytes)) == static_cast<int>(bytes));
    gzclose(f);
    require(ok, ErrorCode::Io, "failed writing " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(&h), sizeof(h));
  out.write(extension, 4);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  require(out.good(), ErrorCode::Io, "failed writing " + path.string());
}

struct RawImage {
  Nifti1Header header{};
  std::vector<double> values;
  Dims dims;
  Geometry geometry;
};

RawImage read_file(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::NotFound, "no such NIfTI file: " + path.string());
  // gzread passes uncompressed files through unchanged.
  gzFile f = gzopen(path.string().c_str(), "rb");
  require(f != nullptr, ErrorCode::Io, "cannot open " + path.string());
  RawImage img;
  auto read_exact = [&](void* dst, std::size_t n) {
    if (n == 0) return true;
    return gzread(f, dst, static_cast<unsigned>(n)) == static_cast<int>(n);
  };
  if (!read_exact(&img.header, sizeof(Nifti1Header))) {
    gzclose(f);
    fail(ErrorCode::Io, "truncated NIfTI header in " + path.string());
  }
  const auto& h = img.header;
  if (h.sizeof_hdr != 348 || std::memcmp(h.magic, "n+1", 3) != 0) {
    gzclose(f);
    fail(ErrorCode::Io, path.string() + " is not a little-endian single-file NIfTI-1 image");
  }
  require(h.dim[0] >= 1 && h.dim[0] <= 7, ErrorCode::Io, "invalid NIfTI dim[0]");
  img.dims = {h.dim[1], h.dim[0] >= 2 ? h.dim[2] : 1, h.dim[0] >= 3 ? h.dim[3] : 1};
  for (int i = 4; i <= h.dim[0]; ++i) {
    require(h.dim[i] == 1, ErrorCode::Io, "only 3D NIfTI images are supported");
  }
  for (int i = 0; i < 3; ++i) {
    img.geometry.spacing[i] = i < h.dim[0] ? static_cast<double>(std::abs(h.pixdim[i + 1])) : 1.0;
  }
  if (h.qform_code > 0) {
    img.geometry.origin = {h.qoffset_x, h.qoffset_y, h.qoffset_z};
  } else if (h.sform_code > 0) {
    img.geometry.origin = {h.srow_x[3], h.srow_y[3], h.srow_z[3]};
  }
  const auto skip = static_cast<std::size_t>(h.vox_offset) - sizeof(Nifti1Header);
  std::vector<char> pad(skip);
  const int bpv = bytes_per_voxel(h.datatype);
  const std::size_t n = img.dims.count();
  std::vector<char> raw(n * static_cast<std::size_t>(bpv));
  const bool ok = read_exact(pad.data(), skip) && read_exact(raw.data(), raw.size());
  gzclose(f);
  require(ok, ErrorCode::Io, "truncated NIfTI voxel data in " + path.string());

  img.values.resize(n);
  auto convert = [&]<typename T>(T) {
    for (std::size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
      img.values[i] = static_cast<double>(v);
    }
  };
  switch (h.datatype) {
    case kUint8: convert(std::uint8_t{}); break;
    case kInt8: convert(std::int8_t{}); break;
    case kInt16: convert(std::int16_t{}); break;
    case kUint16: convert(std::uint16_t{}); break;
    case kInt32: convert(std::int32_t{}); break;
    case kFloat32: convert(float{}); break;
    case kFloat64: convert(double{}); break;
    default: break;
  }
  if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f)) {
    for (auto& v : img.values) v = v * h.scl_slope + h.scl_inter;
  }
  return img;
}

}  // namespace

void write_nifti(const std::filesystem::path& path, const Volume3D& vol, bool as_double) {
  vol.validate();
  const auto& v = vol.data.storage();
  if (as_double) {
    write_file(path, make_header(vol.dims(), vol.geometry, kFloat64), v.data(), v.size() * sizeof(double));
    return;
  }
  std::vector<float> f(v.begin(), v.end());
  write_file(path, make_header(vol.dims(), vol.geometry, kFloat32), f.data(), f.size() * sizeof(float));
}

void write_nifti(const std::filesystem::path& path, const LabelMask& mask) {
  const auto& v = mask.labels.storage();
  write_file(path, make_header(mask.dims(), mask.geometry, kInt16), v.data(), v.size() * sizeof(std::int16_t));
}

Volume3D read_volume(const std::filesystem::path& path) {
  auto raw = read_file(path);
  Volume3D vol{ScalarGrid(raw.dims, std::move(raw.values)), raw.geometry};
  vol.validate();
  return vol;
}

LabelMask read_mask(const std::filesystem::path& path, LabelScheme scheme) {
  auto raw = read_file(path);
  LabelGrid labels(raw.dims);
  for (std::size_t i = 0; i < raw.values.size(); ++i) {
    labels[i] = static_cast<std::int16_t>(std::lround(raw.values[i]));
  }
  LabelMask mask{std::move(labels), scheme, raw.geometry};
  mask.validate();
  return mask;
}

void write_patch_stack(const std::filesystem::path& directory, const std::string& stem, const PatchStack& patch) {
  patch.validate();
  std::filesystem::create_directories(directory);
  nlohmann::json sidecar;
  sidecar["channel_roles"] = nlohmann::json::array();
  sidecar["files"] = nlohmann::json::array();
  for (std::size_t c = 0; c < patch.channels.size(); ++c) {
    const std::string file = stem + "_c" + std::to_string(c) + ".nii.gz";
    write_nifti(directory / file, Volume3D{patch.channels[c], patch.geometry});
    sidecar["channel_roles"].push_back(std::string(to_string(patch.roles[c])));
    sidecar["files"].push_back(file);
  }
  sidecar["spacing"] = patch.geometry.spacing;
  sidecar["origin"] = patch.geometry.origin;
  std::ofstream out(directory / (stem + ".json"));
  out << sidecar.dump(2) << '\n';
  require(out.good(), ErrorCode::Io, "failed writing patch sidecar for " + stem);
}

PatchStack read_patch_stack(const std::filesystem::path& directory, const std::string& stem) {
  const auto sidecar_path = directory / (stem + ".json");
  std::ifstream in(sidecar_path);
  require(in.good(), ErrorCode::NotFound, "missing patch sidecar " + sidecar_path.string());
  const auto sidecar = nlohmann::json::parse(in);
  PatchStack patch;
  const auto& roles = sidecar.at("channel_roles");
  const auto& files = sidecar.at("files");
  require(roles.size() == files.size(), ErrorCode::Io, "patch sidecar lists mismatched roles/files");
  for (std::size_t c = 0; c < roles.size(); ++c) {
    auto vol = read_volume(directory / files[c].get<std::string>());
    patch.geometry = vol.geometry;
    patch.channels.push_back(std::move(vol.data));
    patch.roles.push_back(channel_role_from_string(roles[c].get<std::string>()));
  }
  patch.validate();
  return patch;
}

}  // namespace vbiopsy::imaging
