// nifti.hpp - single-file NIfTI-1 reader/writer with transparent gzip.
#pragma once

#include <string>

#include "ctpipe/volume.hpp"

namespace ctpipe {

enum class NiftiDatatype : short {
    uint8 = 2,
    int16 = 4,
    int32 = 8,
    float32 = 16,
    float64 = 64,
};

/// Read a scalar volume. Intensities are mapped to float32 via
/// scl_slope * v + scl_inter (slope 0 treated as 1). The voxel_to_world affine
/// follows the sform > qform > pixdim-diagonal precedence. Files may be
/// gzip-compressed (detected by magic) and may be big-endian (byte-swapped on
/// read). Throws std::runtime_error naming the offending header field.
Volume3 read_nifti(const std::string& path);

/// Read a label volume, preserving exact integer values. Integer files must
/// carry a trivial rescale (slope in {0,1}, inter 0); float files are accepted
/// when every value is integral.
LabelVolume read_nifti_labels(const std::string& path);

/// Write a scalar volume, always little-endian, sform_code=1 with srow rows
/// equal to voxel_to_world; qform is written too when the rotation part is
/// orthogonal. Gzip iff the path ends in ".gz". Integer datatypes require
/// integer-valued data within the type's range.
void write_nifti(const Volume3& vol, const std::string& path, NiftiDatatype dt = NiftiDatatype::float32);

void write_nifti_labels(const LabelVolume& vol, const std::string& path,
                        NiftiDatatype dt = NiftiDatatype::int16);

/// 3-component vector fields (displacements, velocities) are stored as one
/// NIfTI with dim[0]=4, dim[4]=3: three scalar volumes concatenated in the
/// data section, always float32.
VectorField read_nifti_field(const std::string& path);
void write_nifti_field(const VectorField& field, const std::string& path);

}  // namespace ctpipe
