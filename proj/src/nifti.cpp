#include "hdseg/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace hdseg::nifti {

namespace {

#pragma pack(push, 1)
struct Header {
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
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

enum DataType : std::int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_INT8 = 256,
  DT_UINT16 = 512,
  DT_UINT32 = 768,
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::vector<unsigned char> out;
  if (ends_with(p, ".gz")) {
    gzFile f = gzopen(p.c_str(), "rb");
    if (!f) throw IngestionError("cannot open " + p);
    unsigned char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
    int err = 0;
    const char* msg = gzerror(f, &err);
    gzclose(f);
    if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) throw IngestionError("gzip error reading " + p + ": " + msg);
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + p);
    out.assign(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

template <class T>
T swap_bytes(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  std::reverse(b, b + sizeof(T));
  std::memcpy(&v, b, sizeof(T));
  return v;
}

template <class T>
void convert(const unsigned char* src, std::size_t n, bool swap, std::vector<float>& dst) {
  dst.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    if (swap) v = swap_bytes(v);
    dst[i] = static_cast<float>(v);
  }
}

}  // namespace

Volume read(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < sizeof(Header)) throw IngestionError("file too small for a NIfTI header: " + path.string());
  Header h;
  std::memcpy(&h, bytes.data(), sizeof(Header));
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    if (swap_bytes(h.sizeof_hdr) != 348) throw IngestionError("not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0) throw IngestionError("only single-file NIfTI-1 is supported: " + path.string());
  auto s16 = [&](std::int16_t v) { return swap ? swap_bytes(v) : v; };
  auto f32 = [&](float v) { return swap ? swap_bytes(v) : v; };

  const int rank = s16(h.dim[0]);
  if (rank < 3 || rank > 7) throw IngestionError("unsupported NIfTI rank in " + path.string());
  for (int i = 4; i <= rank; ++i) {
    if (s16(h.dim[i]) > 1) throw IngestionError("only scalar 3D volumes are supported: " + path.string());
  }
  Volume v;
  v.shape = {s16(h.dim[3]), s16(h.dim[2]), s16(h.dim[1])};
  if (v.shape.d <= 0 || v.shape.h <= 0 || v.shape.w <= 0) throw IngestionError("bad NIfTI dims in " + path.string());
  for (int i = 0; i < 3; ++i) v.pixdim[i] = f32(h.pixdim[i + 1]);
  v.description.assign(h.descrip, strnlen(h.descrip, sizeof(h.descrip)));

  const std::size_t n = v.shape.voxels();
  const std::size_t offset = static_cast<std::size_t>(f32(h.vox_offset));
  const std::int16_t dt = s16(h.datatype);
  std::size_t width = 0;
  switch (dt) {
    case DT_UINT8: case DT_INT8: width = 1; break;
    case DT_INT16: case DT_UINT16: width = 2; break;
    case DT_INT32: case DT_UINT32: case DT_FLOAT32: width = 4; break;
    case DT_FLOAT64: width = 8; break;
    default: throw IngestionError("unsupported NIfTI datatype " + std::to_string(dt) + " in " + path.string());
  }
  if (offset < sizeof(Header) || bytes.size() < offset + n * width) {
    throw IngestionError("NIfTI voxel data truncated: " + path.string());
  }
  const unsigned char* src = bytes.data() + offset;
  switch (dt) {
    case DT_UINT8: convert<std::uint8_t>(src, n, false, v.data); break;
    case DT_INT8: convert<std::int8_t>(src, n, false, v.data); break;
    case DT_INT16: convert<std::int16_t>(src, n, swap, v.data); break;
    case DT_UINT16: convert<std::uint16_t>(src, n, swap, v.data); break;
    case DT_INT32: convert<std::int32_t>(src, n, swap, v.data); break;
    case DT_UINT32: convert<std::uint32_t>(src, n, swap, v.data); break;
    case DT_FLOAT32: convert<float>(src, n, swap, v.data); break;
    case DT_FLOAT64: convert<double>(src, n, swap, v.data); break;
  }
  const float slope = f32(h.scl_slope);
  const float inter = f32(h.scl_inter);
  if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f)) {
    for (float& x : v.data) x = x * slope + inter;
  }
  return v;
}

void write(const std::filesystem::path& path, const Volume& vol) {
  if (vol.data.size() != vol.shape.voxels()) throw DimensionError("NIfTI write: data does not match shape");
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(vol.shape.w);
  h.dim[2] = static_cast<std::int16_t>(vol.shape.h);
  h.dim[3] = static_cast<std::int16_t>(vol.shape.d);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = DT_FLOAT32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = vol.pixdim[i];
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  std::strncpy(h.descrip, vol.description.c_str(), sizeof(h.descrip) - 1);
  std::memcpy(h.magic, "n+1", 4);

  std::vector<unsigned char> buf(352 + vol.data.size() * sizeof(float), 0);
  std::memcpy(buf.data(), &h, sizeof(h));
  std::memcpy(buf.data() + 352, vol.data.data(), vol.data.size() * sizeof(float));

  const std::string p = path.string();
  if (ends_with(p, ".gz")) {
    gzFile f = gzopen(p.c_str(), "wb6");
    if (!f) throw Error("cannot open for writing: " + p);
    const int wrote = gzwrite(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (gzclose(f) != Z_OK || wrote != static_cast<int>(buf.size())) throw Error("gzip write failed: " + p);
  } else {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("write failed: " + p);
  }
}

}  // namespace hdseg::nifti
