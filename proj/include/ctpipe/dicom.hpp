// dicom.hpp - minimal CT DICOM reader: Part 10 single-frame slices,
// explicit/implicit VR little endian, uncompressed pixel data.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ctpipe/volume.hpp"

namespace ctpipe {

struct DicomSlice {
    int rows = 0;
    int columns = 0;
    std::array<double, 2> pixel_spacing{1.0, 1.0};  // [row spacing, column spacing] mm
    Vec3 image_position = Vec3::Zero();             // (0020,0032)
    std::array<double, 6> image_orientation{1, 0, 0, 0, 1, 0};  // (0020,0037) row then column cosines
    double rescale_slope = 1.0;
    double rescale_intercept = 0.0;
    std::string series_uid;
    int bits_allocated = 16;
    int bits_stored = 16;
    int high_bit = 15;
    bool pixel_rep_signed = false;
    std::vector<std::int32_t> pixels;  // sign-extended stored values, row-major
    std::string source_name;           // used in error messages

    Vec3 row_cosine() const { return Vec3(image_orientation[0], image_orientation[1], image_orientation[2]); }
    Vec3 col_cosine() const { return Vec3(image_orientation[3], image_orientation[4], image_orientation[5]); }
    Vec3 normal() const { return row_cosine().cross(col_cosine()); }
};

/// Parse one Part 10 file. Throws std::runtime_error naming the missing tag
/// or the offending transfer syntax.
DicomSlice parse_dicom_file(const std::vector<unsigned char>& bytes, const std::string& name = "");

/// Sort slices along the slice normal and stack them into a Volume3 in
/// Hounsfield units. Throws on mixed series, non-uniform spacing, duplicate
/// positions, inconsistent orientation, or gantry tilt.
Volume3 assemble_series(std::vector<DicomSlice> slices);

/// Parse every DICOM file in a directory (non-DICOM files are ignored) and
/// assemble the series.
Volume3 read_dicom_dir(const std::string& dir);

}  // namespace ctpipe
