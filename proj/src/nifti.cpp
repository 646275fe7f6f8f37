#include "ctpipe/nifti.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include <Eigen/Geometry>

namespace ctpipe {

namespace {

static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");

#pragma pack(push, 1)
struct NiftiHeader {
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
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("nifti: " + what); }

void swap_bytes(void* p, std::size_t width) {
    auto* b = static_cast<unsigned char*>(p);
    for (std::size_t i = 0; i < width / 2; ++i) std::swap(b[i], b[width - 1 - i]);
}

template <typename T>
void swap_field(T& v) {
    swap_bytes(&v, sizeof(T));
}

void swap_header(NiftiHeader& h) {
    swap_field(h.sizeof_hdr);
    swap_field(h.extents);
    swap_field(h.session_error);
    for (auto& d : h.dim) swap_field(d);
    swap_field(h.intent_p1);
    swap_field(h.intent_p2);
    swap_field(h.intent_p3);
    swap_field(h.intent_code);
    swap_field(h.datatype);
    swap_field(h.bitpix);
    swap_field(h.slice_start);
    for (auto& d : h.pixdim) swap_field(d);
    swap_field(h.vox_offset);
    swap_field(h.scl_slope);
    swap_field(h.scl_inter);
    swap_field(h.slice_end);
    swap_field(h.cal_max);
    swap_field(h.cal_min);
    swap_field(h.slice_duration);
    swap_field(h.toffset);
    swap_field(h.glmax);
    swap_field(h.glmin);
    swap_field(h.qform_code);
    swap_field(h.sform_code);
    swap_field(h.quatern_b);
    swap_field(h.quatern_c);
    swap_field(h.quatern_d);
    swap_field(h.qoffset_x);
    swap_field(h.qoffset_y);
    swap_field(h.qoffset_z);
    for (auto& v : h.srow_x) swap_field(v);
    for (auto& v : h.srow_y) swap_field(v);
    for (auto& v : h.srow_z) swap_field(v);
}

int datatype_bytes(std::int16_t code) {
    switch (static_cast<NiftiDatatype>(code)) {
        case NiftiDatatype::uint8: return 1;
        case NiftiDatatype::int16: return 2;
        case NiftiDatatype::int32: return 4;
        case NiftiDatatype::float32: return 4;
        case NiftiDatatype::float64: return 8;
    }
    return 0;
}

std::vector<unsigned char> read_all_bytes(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) fail("cannot open '" + path + "'");
    std::vector<unsigned char> out;
    unsigned char buf[1 << 16];
    int got = 0;
    while ((got = gzread(f, buf, sizeof(buf))) > 0) {
        out.insert(out.end(), buf, buf + got);
    }
    const bool bad = (got < 0);
    gzclose(f);
    if (bad) fail("gzip read error in '" + path + "'");
    return out;
}

struct ParsedFile {
    NiftiHeader hdr;
    bool swapped = false;
    std::vector<unsigned char> bytes;  // whole file
    std::size_t data_offset = 0;
};

ParsedFile parse_file(const std::string& path) {
    ParsedFile p;
    p.bytes = read_all_bytes(path);
    if (p.bytes.size() < sizeof(NiftiHeader)) fail("truncated header in '" + path + "'");
    std::memcpy(&p.hdr, p.bytes.data(), sizeof(NiftiHeader));
    if (p.hdr.sizeof_hdr != 348) {
        std::int32_t sw = p.hdr.sizeof_hdr;
        swap_field(sw);
        if (sw != 348) fail("bad sizeof_hdr (expected 348)");
        swap_header(p.hdr);
        p.swapped = true;
    }
    if (std::memcmp(p.hdr.magic, "n+1\0", 4) != 0) fail("bad magic (expected \"n+1\")");
    if (datatype_bytes(p.hdr.datatype) == 0) {
        fail("unsupported datatype code " + std::to_string(p.hdr.datatype));
    }
    if (p.hdr.bitpix != 8 * datatype_bytes(p.hdr.datatype)) {
        fail("bitpix inconsistent with datatype");
    }
    p.data_offset = static_cast<std::size_t>(p.hdr.vox_offset);
    if (p.data_offset < 352) fail("bad vox_offset");
    return p;
}

Mat4 affine_from_header(const NiftiHeader& h) {
    Mat4 A = Mat4::Identity();
    if (h.sform_code > 0) {
        for (int c = 0; c < 4; ++c) {
            A(0, c) = h.srow_x[c];
            A(1, c) = h.srow_y[c];
            A(2, c) = h.srow_z[c];
        }
        return A;
    }
    if (h.qform_code > 0) {
        const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        const double aa = std::max(0.0, 1.0 - b * b - c * c - d * d);
        const double a = std::sqrt(aa);
        Eigen::Quaterniond q(a, b, c, d);
        Mat3 R = q.toRotationMatrix();
        const double qfac = (h.pixdim[0] < 0.0f) ? -1.0 : 1.0;
        for (int col = 0; col < 3; ++col) {
            double s = static_cast<double>(h.pixdim[col + 1]);
            if (s == 0.0) s = 1.0;
            if (col == 2) s *= qfac;
            A.block<3, 1>(0, col) = R.col(col) * s;
        }
        A(0, 3) = h.qoffset_x;
        A(1, 3) = h.qoffset_y;
        A(2, 3) = h.qoffset_z;
        return A;
    }
    for (int a = 0; a < 3; ++a) {
        double s = static_cast<double>(h.pixdim[a + 1]);
        if (s == 0.0) s = 1.0;
        A(a, a) = s;
    }
    return A;
}

GridGeom grid_from_header(const NiftiHeader& h, int expected_dim0, const std::string& what) {
    if (h.dim[0] != expected_dim0) {
        fail("dim[0] is " + std::to_string(h.dim[0]) + ", expected " + std::to_string(expected_dim0) + " for " +
             what);
    }
    GridGeom g;
    for (int a = 0; a < 3; ++a) {
        if (h.dim[a + 1] <= 0) fail("non-positive dim[" + std::to_string(a + 1) + "]");
        g.dims[a] = h.dim[a + 1];
    }
    g.voxel_to_world = affine_from_header(h);
    for (int a = 0; a < 3; ++a) g.spacing[a] = g.voxel_to_world.block<3, 1>(0, a).norm();
    g.validate_geometry();
    return g;
}

template <typename Out, typename Raw>
void decode_values(const unsigned char* src, std::size_t n, bool swapped, double slope, double inter,
                   std::vector<Out>& out) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Raw r;
        std::memcpy(&r, src + i * sizeof(Raw), sizeof(Raw));
        if (swapped) swap_field(r);
        out[i] = static_cast<Out>(slope * static_cast<double>(r) + inter);
    }
}

template <typename Out>
void decode_data(const ParsedFile& p, std::size_t n, double slope, double inter, std::vector<Out>& out) {
    const std::size_t need = n * static_cast<std::size_t>(datatype_bytes(p.hdr.datatype));
    if (p.bytes.size() < p.data_offset + need) fail("truncated data section");
    const unsigned char* src = p.bytes.data() + p.data_offset;
    switch (static_cast<NiftiDatatype>(p.hdr.datatype)) {
        case NiftiDatatype::uint8: decode_values<Out, std::uint8_t>(src, n, p.swapped, slope, inter, out); break;
        case NiftiDatatype::int16: decode_values<Out, std::int16_t>(src, n, p.swapped, slope, inter, out); break;
        case NiftiDatatype::int32: decode_values<Out, std::int32_t>(src, n, p.swapped, slope, inter, out); break;
        case NiftiDatatype::float32: decode_values<Out, float>(src, n, p.swapped, slope, inter, out); break;
        case NiftiDatatype::float64: decode_values<Out, double>(src, n, p.swapped, slope, inter, out); break;
    }
}

}  // namespace

Volume3 read_nifti(const std::string& path) {
    const ParsedFile p = parse_file(path);
    Volume3 vol;
    static_cast<GridGeom&>(vol) = grid_from_header(p.hdr, 3, "a scalar volume");
    double slope = p.hdr.scl_slope;
    if (slope == 0.0) slope = 1.0;
    decode_data<float>(p, vol.voxel_count(), slope, p.hdr.scl_inter, vol.data);
    return vol;
}

LabelVolume read_nifti_labels(const std::string& path) {
    const ParsedFile p = parse_file(path);
    LabelVolume vol;
    static_cast<GridGeom&>(vol) = grid_from_header(p.hdr, 3, "a label volume");

    const auto dt = static_cast<NiftiDatatype>(p.hdr.datatype);
    const bool is_float = (dt == NiftiDatatype::float32 || dt == NiftiDatatype::float64);
    const bool trivial_scl = (p.hdr.scl_slope == 0.0f || p.hdr.scl_slope == 1.0f) && p.hdr.scl_inter == 0.0f;
    if (!is_float && !trivial_scl) {
        fail("label file has non-trivial scl_slope/scl_inter rescale");
    }

    std::vector<double> raw;
    decode_data<double>(p, vol.voxel_count(), 1.0, 0.0, raw);
    vol.data.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double v = raw[i];
        const double r = std::round(v);
        if (is_float && std::abs(v - r) > 1e-6) fail("label file contains non-integer values");
        vol.data[i] = static_cast<std::int32_t>(r);
    }
    return vol;
}

namespace {

NiftiHeader blank_header() {
    NiftiHeader h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.scl_slope = 1.0f;
    h.xyzt_units = 2;  // millimetres
    std::snprintf(h.descrip, sizeof(h.descrip), "ctpipe");
    std::memcpy(h.magic, "n+1\0", 4);
    h.vox_offset = 352.0f;
    return h;
}

void set_geometry(NiftiHeader& h, const GridGeom& g) {
    const Mat4& A = g.voxel_to_world;
    for (int c = 0; c < 4; ++c) {
        h.srow_x[c] = static_cast<float>(A(0, c));
        h.srow_y[c] = static_cast<float>(A(1, c));
        h.srow_z[c] = static_cast<float>(A(2, c));
    }
    h.sform_code = 1;
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(g.spacing[a]);

    // qform only when the rotation is orthogonal; shears cannot be encoded as
    // a quaternion without loss.
    Mat3 R = g.linear();
    for (int c = 0; c < 3; ++c) R.col(c) /= g.spacing[c];
    if ((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-5) {
        double qfac = 1.0;
        if (R.determinant() < 0.0) {
            qfac = -1.0;
            R.col(2) *= -1.0;
        }
        Eigen::Quaterniond q(R);
        if (q.w() < 0.0) q.coeffs() *= -1.0;
        h.qform_code = 1;
        h.pixdim[0] = static_cast<float>(qfac);
        h.quatern_b = static_cast<float>(q.x());
        h.quatern_c = static_cast<float>(q.y());
        h.quatern_d = static_cast<float>(q.z());
        h.qoffset_x = static_cast<float>(A(0, 3));
        h.qoffset_y = static_cast<float>(A(1, 3));
        h.qoffset_z = static_cast<float>(A(2, 3));
    }
}

void write_bytes(const std::string& path, const NiftiHeader& h, const void* payload, std::size_t payload_bytes) {
    const bool gz = path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    gzFile f = gzopen(path.c_str(), gz ? "wb" : "wbT");
    if (f == nullptr) fail("cannot open '" + path + "' for writing");
    const char extender[4] = {0, 0, 0, 0};
    bool ok = gzwrite(f, &h, sizeof(h)) == static_cast<int>(sizeof(h));
    ok = ok && gzwrite(f, extender, 4) == 4;
    std::size_t written = 0;
    const auto* src = static_cast<const unsigned char*>(payload);
    while (ok && written < payload_bytes) {
        const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(payload_bytes - written, 1u << 24));
        ok = gzwrite(f, src + written, chunk) == static_cast<int>(chunk);
        written += chunk;
    }
    const int rc = gzclose(f);
    if (!ok || rc != Z_OK) fail("write failed for '" + path + "'");
}

template <typename Raw, typename In>
std::vector<unsigned char> encode_values(const std::vector<In>& data, const char* typname) {
    std::vector<unsigned char> out(data.size() * sizeof(Raw));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double v = static_cast<double>(data[i]);
        if constexpr (std::numeric_limits<Raw>::is_integer) {
            const double r = std::round(v);
            if (std::abs(v - r) > 1e-6 || r < static_cast<double>(std::numeric_limits<Raw>::min()) ||
                r > static_cast<double>(std::numeric_limits<Raw>::max())) {
                fail(std::string("value not representable as ") + typname);
            }
            const Raw raw = static_cast<Raw>(r);
            std::memcpy(out.data() + i * sizeof(Raw), &raw, sizeof(Raw));
        } else {
            const Raw raw = static_cast<Raw>(v);
            std::memcpy(out.data() + i * sizeof(Raw), &raw, sizeof(Raw));
        }
    }
    return out;
}

template <typename In>
void write_typed(const GridGeom& g, const std::vector<In>& data, const std::string& path, NiftiDatatype dt) {
    NiftiHeader h = blank_header();
    h.dim[0] = 3;
    for (int a = 0; a < 3; ++a) h.dim[a + 1] = static_cast<std::int16_t>(g.dims[a]);
    for (int a = 4; a < 8; ++a) h.dim[a] = 1;
    h.datatype = static_cast<std::int16_t>(dt);
    h.bitpix = static_cast<std::int16_t>(8 * datatype_bytes(h.datatype));
    set_geometry(h, g);

    std::vector<unsigned char> payload;
    switch (dt) {
        case NiftiDatatype::uint8: payload = encode_values<std::uint8_t>(data, "uint8"); break;
        case NiftiDatatype::int16: payload = encode_values<std::int16_t>(data, "int16"); break;
        case NiftiDatatype::int32: payload = encode_values<std::int32_t>(data, "int32"); break;
        case NiftiDatatype::float32: payload = encode_values<float>(data, "float32"); break;
        case NiftiDatatype::float64: payload = encode_values<double>(data, "float64"); break;
    }
    write_bytes(path, h, payload.data(), payload.size());
}

}  // namespace

void write_nifti(const Volume3& vol, const std::string& path, NiftiDatatype dt) {
    vol.validate();
    if (dt == NiftiDatatype::float32) {
        // Fast path, bit-exact round trip.
        NiftiHeader h = blank_header();
        h.dim[0] = 3;
        for (int a = 0; a < 3; ++a) h.dim[a + 1] = static_cast<std::int16_t>(vol.dims[a]);
        for (int a = 4; a < 8; ++a) h.dim[a] = 1;
        h.datatype = static_cast<std::int16_t>(dt);
        h.bitpix = 32;
        set_geometry(h, vol);
        write_bytes(path, h, vol.data.data(), vol.data.size() * sizeof(float));
        return;
    }
    write_typed(vol, vol.data, path, dt);
}

void write_nifti_labels(const LabelVolume& vol, const std::string& path, NiftiDatatype dt) {
    vol.validate();
    write_typed(vol, vol.data, path, dt);
}

VectorField read_nifti_field(const std::string& path) {
    const ParsedFile p = parse_file(path);
    if (p.hdr.dim[0] != 4 || p.hdr.dim[4] != 3) {
        fail("field file must have dim[0]=4 and dim[4]=3");
    }
    VectorField f;
    GridGeom g;
    for (int a = 0; a < 3; ++a) {
        if (p.hdr.dim[a + 1] <= 0) fail("non-positive dim[" + std::to_string(a + 1) + "]");
        g.dims[a] = p.hdr.dim[a + 1];
    }
    g.voxel_to_world = affine_from_header(p.hdr);
    for (int a = 0; a < 3; ++a) g.spacing[a] = g.voxel_to_world.block<3, 1>(0, a).norm();
    g.validate_geometry();
    static_cast<GridGeom&>(f) = g;
    decode_data<float>(p, 3 * f.voxel_count(), 1.0, 0.0, f.data);
    return f;
}

void write_nifti_field(const VectorField& field, const std::string& path) {
    field.validate_geometry();
    if (field.data.size() != 3 * field.voxel_count()) {
        fail("field data length does not match 3 * dims product");
    }
    NiftiHeader h = blank_header();
    h.dim[0] = 4;
    for (int a = 0; a < 3; ++a) h.dim[a + 1] = static_cast<std::int16_t>(field.dims[a]);
    h.dim[4] = 3;
    for (int a = 5; a < 8; ++a) h.dim[a] = 1;
    h.datatype = static_cast<std::int16_t>(NiftiDatatype::float32);
    h.bitpix = 32;
    h.intent_code = 1007;  // vector per voxel
    set_geometry(h, field);
    write_bytes(path, h, field.data.data(), field.data.size() * sizeof(float));
}

}  // namespace ctpipe
