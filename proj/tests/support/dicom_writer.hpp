// dicom_writer.hpp - independent byte-level DICOM emitter used as a test
// oracle against the parser (kept deliberately separate from src/dicom.cpp).
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace testdicom {

struct SliceSpec {
    int rows = 2;
    int columns = 2;
    std::array<double, 2> pixel_spacing{1.0, 1.0};  // [row, col]
    std::array<double, 3> position{0.0, 0.0, 0.0};
    std::array<double, 6> orientation{1, 0, 0, 0, 1, 0};
    double slope = 1.0;
    double intercept = -1024.0;
    std::string series_uid = "1.2.3.4";
    bool pixel_rep_signed = true;
    std::vector<std::int16_t> pixels;  // row-major
    bool implicit_vr = false;
    bool add_padding_elements = false;  // private tags, OB blob, undefined-length SQ
    bool omit_position = false;
};

class Writer {
public:
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void tag(std::uint16_t g, std::uint16_t e) {
        u16(g);
        u16(e);
    }
    std::vector<unsigned char> bytes;
};

inline std::string pad_even(std::string s) {
    if (s.size() % 2) s += ' ';
    return s;
}

inline void explicit_element(Writer& w, std::uint16_t g, std::uint16_t e, const char* vr, const std::string& value) {
    const std::string v = pad_even(value);
    w.tag(g, e);
    w.raw(vr, 2);
    w.u16(static_cast<std::uint16_t>(v.size()));
    w.raw(v.data(), v.size());
}

inline void implicit_element(Writer& w, std::uint16_t g, std::uint16_t e, const std::string& value) {
    const std::string v = pad_even(value);
    w.tag(g, e);
    w.u32(static_cast<std::uint32_t>(v.size()));
    w.raw(v.data(), v.size());
}

inline void element_us(Writer& w, std::uint16_t g, std::uint16_t e, std::uint16_t value, bool implicit) {
    w.tag(g, e);
    if (implicit) {
        w.u32(2);
    } else {
        w.raw("US", 2);
        w.u16(2);
    }
    w.u16(value);
}

inline void element_str(Writer& w, std::uint16_t g, std::uint16_t e, const char* vr, const std::string& value,
                        bool implicit) {
    if (implicit) implicit_element(w, g, e, value);
    else explicit_element(w, g, e, vr, value);
}

inline std::string ds(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

inline std::string ds3(const std::array<double, 3>& v) { return ds(v[0]) + "\\" + ds(v[1]) + "\\" + ds(v[2]); }

/// Emit a complete Part 10 file for one slice.
inline std::vector<unsigned char> make_slice(const SliceSpec& s) {
    Writer w;
    w.bytes.assign(128, 0);
    w.raw("DICM", 4);

    // File meta group: always explicit VR little endian.
    const std::string syntax = s.implicit_vr ? "1.2.840.10008.1.2" : "1.2.840.10008.1.2.1";
    {
        // (0002,0010) transfer syntax UID; group length element first.
        Writer meta;
        explicit_element(meta, 0x0002, 0x0010, "UI", syntax);
        Writer gl;
        gl.tag(0x0002, 0x0000);
        gl.raw("UL", 2);
        gl.u16(4);
        gl.u32(static_cast<std::uint32_t>(meta.bytes.size()));
        w.raw(gl.bytes.data(), gl.bytes.size());
        w.raw(meta.bytes.data(), meta.bytes.size());
    }

    const bool imp = s.implicit_vr;
    element_str(w, 0x0008, 0x0060, "CS", "CT", imp);
    element_str(w, 0x0020, 0x000E, "UI", s.series_uid, imp);
    if (!s.omit_position) element_str(w, 0x0020, 0x0032, "DS", ds3(s.position), imp);
    {
        std::string iop;
        for (int i = 0; i < 6; ++i) iop += (i ? "\\" : "") + ds(s.orientation[static_cast<std::size_t>(i)]);
        element_str(w, 0x0020, 0x0037, "DS", iop, imp);
    }
    element_us(w, 0x0028, 0x0010, static_cast<std::uint16_t>(s.rows), imp);
    element_us(w, 0x0028, 0x0011, static_cast<std::uint16_t>(s.columns), imp);

    if (s.add_padding_elements) {
        // Unknown private tag with a string payload.
        element_str(w, 0x0009, 0x0010, "LO", "private creator block", imp);
        // OB blob (explicit long-length VR form).
        if (!imp) {
            w.tag(0x0009, 0x0011);
            w.raw("OB", 2);
            w.u16(0);  // reserved
            w.u32(6);
            w.raw("\x01\x02\x03\x04\x05\x06", 6);
        }
        // Undefined-length sequence containing one undefined-length item with
        // a nested element, exercising the delimiter walk.
        w.tag(0x0008, 0x1140);
        if (imp) {
            w.u32(0xFFFFFFFFu);
        } else {
            w.raw("SQ", 2);
            w.u16(0);
            w.u32(0xFFFFFFFFu);
        }
        w.tag(0xFFFE, 0xE000);
        w.u32(0xFFFFFFFFu);
        element_str(w, 0x0008, 0x1150, "UI", "1.2.840.10008.5.1.4.1.1.2", imp);
        w.tag(0xFFFE, 0xE00D);
        w.u32(0);
        w.tag(0xFFFE, 0xE0DD);
        w.u32(0);
    }

    element_str(w, 0x0028, 0x0030, "DS", ds(s.pixel_spacing[0]) + "\\" + ds(s.pixel_spacing[1]), imp);
    element_us(w, 0x0028, 0x0100, 16, imp);
    element_us(w, 0x0028, 0x0101, 16, imp);
    element_us(w, 0x0028, 0x0102, 15, imp);
    element_us(w, 0x0028, 0x0103, s.pixel_rep_signed ? 1 : 0, imp);
    element_str(w, 0x0028, 0x1052, "DS", ds(s.intercept), imp);
    element_str(w, 0x0028, 0x1053, "DS", ds(s.slope), imp);

    const std::uint32_t npix = static_cast<std::uint32_t>(s.pixels.size() * 2);
    w.tag(0x7FE0, 0x0010);
    if (imp) {
        w.u32(npix);
    } else {
        w.raw("OW", 2);
        w.u16(0);  // reserved
        w.u32(npix);
    }
    w.raw(s.pixels.data(), npix);
    return w.bytes;
}

}  // namespace testdicom
