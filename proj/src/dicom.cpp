#include "ctpipe/dicom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ctpipe {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("dicom: " + what); }

constexpr std::uint32_t kUndefinedLength = 0xFFFFFFFFu;

struct Cursor {
    const unsigned char* p;
    std::size_t size;
    std::size_t pos = 0;
    std::string name;

    bool eof() const { return pos >= size; }
    std::size_t remaining() const { return size - pos; }
    void need(std::size_t n, const char* what) const {
        if (pos + n > size) fail(std::string("truncated file while reading ") + what + " in '" + name + "'");
    }
    std::uint16_t u16() {
        need(2, "u16");
        std::uint16_t v;
        std::memcpy(&v, p + pos, 2);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v;
        std::memcpy(&v, p + pos, 4);
        pos += 4;
        return v;
    }
    void skip(std::size_t n, const char* what) {
        need(n, what);
        pos += n;
    }
};

struct Element {
    std::uint16_t group = 0;
    std::uint16_t elem = 0;
    std::string vr;           // empty in implicit VR
    std::uint32_t length = 0;
    std::size_t value_pos = 0;

    std::uint32_t tag() const { return (static_cast<std::uint32_t>(group) << 16) | elem; }
};

bool vr_has_long_length(const std::string& vr) {
    return vr == "OB" || vr == "OW" || vr == "OF" || vr == "SQ" || vr == "UT" || vr == "UN";
}

// Reads the element header at the cursor. Does not consume the value.
Element read_element_header(Cursor& c, bool explicit_vr) {
    Element e;
    e.group = c.u16();
    e.elem = c.u16();
    const bool is_delim_tag = (e.group == 0xFFFE);
    if (explicit_vr && !is_delim_tag) {
        c.need(2, "VR");
        e.vr.assign(reinterpret_cast<const char*>(c.p + c.pos), 2);
        c.pos += 2;
        if (vr_has_long_length(e.vr)) {
            c.skip(2, "VR reserved bytes");
            e.length = c.u32();
        } else {
            e.length = c.u16();
        }
    } else {
        e.length = c.u32();
    }
    e.value_pos = c.pos;
    return e;
}

void skip_sequence_undefined(Cursor& c, bool explicit_vr);

// Skips the value of an element whose header has been read.
void skip_element_value(Cursor& c, const Element& e, bool explicit_vr) {
    if (e.length != kUndefinedLength) {
        c.skip(e.length, "element value");
        return;
    }
    // Undefined length: legal for sequences (and for encapsulated pixel data,
    // which we reject earlier via the transfer syntax).
    skip_sequence_undefined(c, explicit_vr);
}

// Cursor is positioned just after an undefined-length SQ header; consume
// items until the sequence delimitation item.
void skip_sequence_undefined(Cursor& c, bool explicit_vr) {
    for (;;) {
        const std::uint16_t group = c.u16();
        const std::uint16_t elem = c.u16();
        const std::uint32_t len = c.u32();
        if (group == 0xFFFE && elem == 0xE0DD) return;  // sequence delimiter
        if (group != 0xFFFE || elem != 0xE000) fail("malformed sequence item in '" + c.name + "'");
        if (len != kUndefinedLength) {
            c.skip(len, "sequence item");
            continue;
        }
        // Undefined-length item: walk nested elements until the item delimiter.
        for (;;) {
            c.need(4, "item element tag");
            std::uint16_t g2, e2;
            std::memcpy(&g2, c.p + c.pos, 2);
            std::memcpy(&e2, c.p + c.pos + 2, 2);
            if (g2 == 0xFFFE && e2 == 0xE00D) {
                c.pos += 4;
                c.u32();  // delimiter length (zero)
                break;
            }
            const Element nested = read_element_header(c, explicit_vr);
            skip_element_value(c, nested, explicit_vr);
        }
    }
}

std::string ascii_value(const Cursor& c, const Element& e) {
    std::string s(reinterpret_cast<const char*>(c.p + e.value_pos), e.length);
    while (!s.empty() && (s.back() == '\0' || s.back() == ' ')) s.pop_back();
    std::size_t start = 0;
    while (start < s.size() && s[start] == ' ') ++start;
    return s.substr(start);
}

std::vector<double> decimal_values(const Cursor& c, const Element& e, const char* tagname) {
    const std::string s = ascii_value(c, e);
    std::vector<double> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, '\\')) {
        try {
            out.push_back(std::stod(part));
        } catch (const std::exception&) {
            fail(std::string("bad decimal string in ") + tagname + " in '" + c.name + "'");
        }
    }
    return out;
}

std::uint16_t ushort_value(const Cursor& c, const Element& e, const char* tagname) {
    if (e.length < 2) fail(std::string("short US value in ") + tagname);
    std::uint16_t v;
    std::memcpy(&v, c.p + e.value_pos, 2);
    return v;
}

constexpr std::uint32_t make_tag(std::uint16_t g, std::uint16_t e) {
    return (static_cast<std::uint32_t>(g) << 16) | e;
}

const char* tag_name(std::uint32_t tag) {
    switch (tag) {
        case make_tag(0x0020, 0x000E): return "SeriesInstanceUID (0020,000E)";
        case make_tag(0x0020, 0x0032): return "ImagePositionPatient (0020,0032)";
        case make_tag(0x0020, 0x0037): return "ImageOrientationPatient (0020,0037)";
        case make_tag(0x0028, 0x0010): return "Rows (0028,0010)";
        case make_tag(0x0028, 0x0011): return "Columns (0028,0011)";
        case make_tag(0x0028, 0x0030): return "PixelSpacing (0028,0030)";
        case make_tag(0x0028, 0x0100): return "BitsAllocated (0028,0100)";
        case make_tag(0x7FE0, 0x0010): return "PixelData (7FE0,0010)";
        default: return "unknown tag";
    }
}

}  // namespace

DicomSlice parse_dicom_file(const std::vector<unsigned char>& bytes, const std::string& name) {
    if (bytes.size() < 132 || std::memcmp(bytes.data() + 128, "DICM", 4) != 0) {
        fail("missing \"DICM\" marker in '" + name + "'");
    }
    Cursor c{bytes.data(), bytes.size(), 132, name};

    // File meta group (0002,xxxx) is always explicit VR little endian.
    std::string transfer_syntax = "1.2.840.10008.1.2.1";
    while (!c.eof() && c.remaining() >= 8) {
        std::uint16_t group;
        std::memcpy(&group, c.p + c.pos, 2);
        if (group != 0x0002) break;
        const Element e = read_element_header(c, true);
        if (e.tag() == make_tag(0x0002, 0x0010)) {
            transfer_syntax = ascii_value(c, e);
        }
        skip_element_value(c, e, true);
    }

    bool explicit_vr;
    if (transfer_syntax == "1.2.840.10008.1.2.1") {
        explicit_vr = true;
    } else if (transfer_syntax == "1.2.840.10008.1.2") {
        explicit_vr = false;
    } else if (transfer_syntax.rfind("1.2.840.10008.1.2.4", 0) == 0 || transfer_syntax == "1.2.840.10008.1.2.5" ||
               transfer_syntax == "1.2.840.10008.1.2.1.99") {
        fail("compressed transfer syntax " + transfer_syntax + " is not supported ('" + name + "')");
    } else {
        fail("unsupported transfer syntax " + transfer_syntax + " ('" + name + "')");
    }

    DicomSlice s;
    s.source_name = name;
    bool have_rows = false, have_cols = false, have_spacing = false, have_pos = false, have_orient = false,
         have_uid = false, have_pixels = false;
    const unsigned char* pixel_bytes = nullptr;
    std::uint32_t pixel_len = 0;

    while (!c.eof() && c.remaining() >= 8) {
        const Element e = read_element_header(c, explicit_vr);
        switch (e.tag()) {
            case make_tag(0x0020, 0x000E):
                s.series_uid = ascii_value(c, e);
                have_uid = true;
                break;
            case make_tag(0x0020, 0x0032): {
                const auto v = decimal_values(c, e, "ImagePositionPatient");
                if (v.size() != 3) fail("ImagePositionPatient needs 3 values in '" + name + "'");
                s.image_position = Vec3(v[0], v[1], v[2]);
                have_pos = true;
                break;
            }
            case make_tag(0x0020, 0x0037): {
                const auto v = decimal_values(c, e, "ImageOrientationPatient");
                if (v.size() != 6) fail("ImageOrientationPatient needs 6 values in '" + name + "'");
                for (int i = 0; i < 6; ++i) s.image_orientation[static_cast<std::size_t>(i)] = v[i];
                have_orient = true;
                break;
            }
            case make_tag(0x0028, 0x0010):
                s.rows = ushort_value(c, e, "Rows");
                have_rows = true;
                break;
            case make_tag(0x0028, 0x0011):
                s.columns = ushort_value(c, e, "Columns");
                have_cols = true;
                break;
            case make_tag(0x0028, 0x0030): {
                const auto v = decimal_values(c, e, "PixelSpacing");
                if (v.size() != 2) fail("PixelSpacing needs 2 values in '" + name + "'");
                s.pixel_spacing = {v[0], v[1]};
                have_spacing = true;
                break;
            }
            case make_tag(0x0028, 0x0100): s.bits_allocated = ushort_value(c, e, "BitsAllocated"); break;
            case make_tag(0x0028, 0x0101): s.bits_stored = ushort_value(c, e, "BitsStored"); break;
            case make_tag(0x0028, 0x0102): s.high_bit = ushort_value(c, e, "HighBit"); break;
            case make_tag(0x0028, 0x0103): s.pixel_rep_signed = ushort_value(c, e, "PixelRepresentation") == 1; break;
            case make_tag(0x0028, 0x1052): {
                const auto v = decimal_values(c, e, "RescaleIntercept");
                if (!v.empty()) s.rescale_intercept = v[0];
                break;
            }
            case make_tag(0x0028, 0x1053): {
                const auto v = decimal_values(c, e, "RescaleSlope");
                if (!v.empty()) s.rescale_slope = v[0];
                break;
            }
            case make_tag(0x7FE0, 0x0010):
                if (e.length == kUndefinedLength) {
                    fail("encapsulated (compressed) pixel data is not supported ('" + name + "')");
                }
                pixel_bytes = c.p + e.value_pos;
                pixel_len = e.length;
                have_pixels = true;
                break;
            default: break;
        }
        skip_element_value(c, e, explicit_vr);
    }

    struct Req {
        bool have;
        std::uint32_t tag;
    };
    const Req required[] = {
        {have_rows, make_tag(0x0028, 0x0010)},   {have_cols, make_tag(0x0028, 0x0011)},
        {have_spacing, make_tag(0x0028, 0x0030)}, {have_pos, make_tag(0x0020, 0x0032)},
        {have_orient, make_tag(0x0020, 0x0037)},  {have_uid, make_tag(0x0020, 0x000E)},
        {have_pixels, make_tag(0x7FE0, 0x0010)},
    };
    for (const auto& r : required) {
        if (!r.have) fail(std::string("missing required tag ") + tag_name(r.tag) + " in '" + name + "'");
    }

    if (s.bits_allocated != 16) {
        fail("BitsAllocated " + std::to_string(s.bits_allocated) + " not supported (expected 16) in '" + name + "'");
    }
    if (s.bits_stored <= 0 || s.bits_stored > 16) s.bits_stored = 16;

    const std::size_t n = static_cast<std::size_t>(s.rows) * static_cast<std::size_t>(s.columns);
    if (pixel_len < n * 2) fail("PixelData shorter than Rows*Columns*2 in '" + name + "'");

    const int shift = std::max(0, s.high_bit + 1 - s.bits_stored);  // lowest used bit
    const std::uint32_t mask = (s.bits_stored >= 16) ? 0xFFFFu : ((1u << s.bits_stored) - 1u);
    const std::int32_t sign_bit = 1 << (s.bits_stored - 1);
    s.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t w;
        std::memcpy(&w, pixel_bytes + 2 * i, 2);
        std::int32_t v = static_cast<std::int32_t>((static_cast<std::uint32_t>(w) >> shift) & mask);
        if (s.pixel_rep_signed && (v & sign_bit)) v -= (1 << s.bits_stored);
        s.pixels[i] = v;
    }

    // Geometry sanity on the direction cosines.
    const Vec3 r = s.row_cosine(), col = s.col_cosine();
    if (std::abs(r.norm() - 1.0) > 1e-3 || std::abs(col.norm() - 1.0) > 1e-3) {
        fail("ImageOrientationPatient cosines are not unit length in '" + name + "'");
    }
    if (std::abs(r.dot(col)) > 1e-3) {
        fail("ImageOrientationPatient cosines are not orthogonal in '" + name + "'");
    }
    return s;
}

Volume3 assemble_series(std::vector<DicomSlice> slices) {
    if (slices.size() < 2) fail("a series needs at least 2 slices");

    const DicomSlice& ref = slices.front();
    for (const auto& s : slices) {
        if (s.series_uid != ref.series_uid) {
            fail("mixed series_uid: '" + ref.series_uid + "' vs '" + s.series_uid + "' ('" + s.source_name + "')");
        }
        if (s.rows != ref.rows || s.columns != ref.columns) fail("inconsistent Rows/Columns across slices");
        for (int i = 0; i < 6; ++i) {
            if (std::abs(s.image_orientation[static_cast<std::size_t>(i)] -
                         ref.image_orientation[static_cast<std::size_t>(i)]) > 1e-3) {
                fail("inconsistent ImageOrientationPatient across slices ('" + s.source_name + "')");
            }
        }
        if (std::abs(s.pixel_spacing[0] - ref.pixel_spacing[0]) > 1e-3 ||
            std::abs(s.pixel_spacing[1] - ref.pixel_spacing[1]) > 1e-3) {
            fail("inconsistent PixelSpacing across slices ('" + s.source_name + "')");
        }
    }

    const Vec3 normal = ref.normal();
    std::sort(slices.begin(), slices.end(), [&](const DicomSlice& a, const DicomSlice& b) {
        return a.image_position.dot(normal) < b.image_position.dot(normal);
    });

    std::vector<double> proj(slices.size());
    for (std::size_t i = 0; i < slices.size(); ++i) proj[i] = slices[i].image_position.dot(normal);
    for (std::size_t i = 1; i < slices.size(); ++i) {
        if (std::abs(proj[i] - proj[i - 1]) < 1e-3) {
            fail("duplicate slice positions: '" + slices[i - 1].source_name + "' and '" + slices[i].source_name +
                 "'");
        }
    }
    const double dz = (proj.back() - proj.front()) / static_cast<double>(slices.size() - 1);
    for (std::size_t i = 1; i < slices.size(); ++i) {
        if (std::abs((proj[i] - proj[i - 1]) - dz) > 1e-2) {
            fail("non-uniform inter-slice spacing (got " + std::to_string(proj[i] - proj[i - 1]) + " vs mean " +
                 std::to_string(dz) + " mm)");
        }
    }
    // Positions must advance along the normal only; anything else is gantry
    // tilt, which we refuse rather than silently shear.
    for (std::size_t i = 1; i < slices.size(); ++i) {
        const Vec3 step = slices[i].image_position - slices[i - 1].image_position;
        const Vec3 residual = step - step.dot(normal) * normal;
        if (residual.norm() > 1e-2) {
            fail("slice positions are not collinear with the slice normal (gantry tilt?)");
        }
    }

    Volume3 vol;
    vol.dims = {ref.columns, ref.rows, static_cast<int>(slices.size())};
    vol.spacing = Vec3(ref.pixel_spacing[1], ref.pixel_spacing[0], std::abs(dz));
    Mat4 A = Mat4::Identity();
    A.block<3, 1>(0, 0) = ref.row_cosine() * ref.pixel_spacing[1];
    A.block<3, 1>(0, 1) = ref.col_cosine() * ref.pixel_spacing[0];
    A.block<3, 1>(0, 2) = normal * dz;
    A.block<3, 1>(0, 3) = slices.front().image_position;
    vol.voxel_to_world = A;

    vol.data.resize(vol.voxel_count());
    std::size_t f = 0;
    for (const auto& s : slices) {
        const double slope = s.rescale_slope, inter = s.rescale_intercept;
        for (const std::int32_t v : s.pixels) {
            vol.data[f++] = static_cast<float>(slope * v + inter);
        }
    }
    vol.validate();
    return vol;
}

Volume3 read_dicom_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) fail("'" + dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<DicomSlice> slices;
    for (const auto& path : files) {
        std::ifstream in(path, std::ios::binary);
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (bytes.size() < 132 || std::memcmp(bytes.data() + 128, "DICM", 4) != 0) continue;  // not DICOM
        slices.push_back(parse_dicom_file(bytes, path.filename().string()));
    }
    if (slices.size() < 2) fail("found " + std::to_string(slices.size()) + " DICOM slice(s) in '" + dir + "'");
    return assemble_series(std::move(slices));
}

}  // namespace ctpipe
