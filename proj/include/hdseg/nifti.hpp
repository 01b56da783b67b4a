#pragma once
// NIfTI-1 single-file (.nii / .nii.gz) reading and float32 writing.

#include <filesystem>
#include <string>
#include <vector>

#include "hdseg/grid.hpp"

namespace hdseg::nifti {

struct Volume {
  Shape3 shape;              // d = nz, h = ny, w = nx
  std::vector<float> data;   // x fastest, scl_slope/scl_inter applied
  float pixdim[3] = {1.0f, 1.0f, 1.0f};
  std::string description;   // header descrip field
};

/// Reads uint8/int8/int16/uint16/int32/uint32/float32/float64 scalar
/// volumes. Throws IngestionError on anything else or on truncation.
Volume read(const std::filesystem::path& path);

/// Writes a float32 volume; gzip-compressed when the path ends in ".gz".
void write(const std::filesystem::path& path, const Volume& vol);

}  // namespace hdseg::nifti
