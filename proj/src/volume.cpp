#include "ctpipe/volume.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace ctpipe {

namespace {

void check_finite_point(const Vec3& p) {
    if (!p.allFinite()) {
        throw std::invalid_argument("sample: world_point is not finite");
    }
}

}  // namespace

Vec3 GridGeom::world_to_index(const Vec3& w) const {
    const Mat3 inv = linear().inverse();
    return inv * (w - origin());
}

bool GridGeom::same_grid(const GridGeom& o, double tol) const {
    if (dims != o.dims) return false;
    return (voxel_to_world - o.voxel_to_world).cwiseAbs().maxCoeff() <= tol;
}

void GridGeom::validate_geometry() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] <= 0) {
            throw std::invalid_argument("grid: dims must be positive");
        }
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
            throw std::invalid_argument("grid: spacing must be positive");
        }
    }
    const Mat3 lin = linear();
    if (std::abs(lin.determinant()) < 1e-12) {
        throw std::invalid_argument("grid: voxel_to_world 3x3 block is singular");
    }
    for (int a = 0; a < 3; ++a) {
        const double cn = lin.col(a).norm();
        if (std::abs(cn - spacing[a]) > 1e-4 * std::max(1.0, spacing[a])) {
            throw std::invalid_argument("grid: spacing disagrees with affine column norm");
        }
    }
}

GridGeom make_grid(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin) {
    GridGeom g;
    g.dims = dims;
    g.spacing = spacing;
    g.voxel_to_world = Mat4::Identity();
    for (int a = 0; a < 3; ++a) g.voxel_to_world(a, a) = spacing[a];
    g.voxel_to_world.block<3, 1>(0, 3) = origin;
    return g;
}

void Volume3::validate() const {
    validate_geometry();
    if (data.size() != voxel_count()) {
        throw std::invalid_argument("volume: data length does not match dims product");
    }
}

void LabelVolume::validate() const {
    validate_geometry();
    if (data.size() != voxel_count()) {
        throw std::invalid_argument("labels: data length does not match dims product");
    }
}

double VectorField::max_norm() const {
    const std::size_t n = voxel_count();
    double m = 0.0;
    for (std::size_t f = 0; f < n; ++f) {
        const double x = data[f];
        const double y = data[n + f];
        const double z = data[2 * n + f];
        m = std::max(m, x * x + y * y + z * z);
    }
    return std::sqrt(m);
}

Volume3 make_volume(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin, float fill) {
    Volume3 v;
    static_cast<GridGeom&>(v) = make_grid(dims, spacing, origin);
    v.data.assign(v.voxel_count(), fill);
    return v;
}

LabelVolume make_labels(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin, std::int32_t fill) {
    LabelVolume v;
    static_cast<GridGeom&>(v) = make_grid(dims, spacing, origin);
    v.data.assign(v.voxel_count(), fill);
    return v;
}

VectorField make_field(const GridGeom& grid, const Vec3& fill) {
    VectorField f;
    static_cast<GridGeom&>(f) = grid;
    const std::size_t n = f.voxel_count();
    f.data.resize(3 * n);
    for (int c = 0; c < 3; ++c) {
        std::fill(f.data.begin() + static_cast<std::ptrdiff_t>(c * n),
                  f.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * n), static_cast<float>(fill[c]));
    }
    return f;
}

AffineTransform AffineTransform::inverse() const {
    AffineTransform out;
    out.matrix = matrix.inverse();
    out.source_space = target_space;
    out.target_space = source_space;
    return out;
}

void AffineTransform::validate() const {
    if (matrix(3, 0) != 0.0 || matrix(3, 1) != 0.0 || matrix(3, 2) != 0.0 || matrix(3, 3) != 1.0) {
        throw std::invalid_argument("affine: bottom row must be (0,0,0,1)");
    }
    if (std::abs(matrix.block<3, 3>(0, 0).determinant()) < 1e-12) {
        throw std::invalid_argument("affine: singular 3x3 block");
    }
    const Mat4 prod = matrix * matrix.inverse();
    if ((prod - Mat4::Identity()).cwiseAbs().maxCoeff() >= 1e-8) {
        throw std::invalid_argument("affine: inverse check failed");
    }
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

struct InverseMap {
    Mat3 lin;
    Vec3 off;
    static InverseMap of(const GridGeom& g) {
        InverseMap m;
        m.lin = g.linear().inverse();
        m.off = -(m.lin * g.origin());
        return m;
    }
    Vec3 to_voxel(const Vec3& w) const { return lin * w + off; }
};

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Round half away from zero, matching std::round; spelled out so the label
// determinism rule is explicit at the call site.
inline int round_away(double x) { return static_cast<int>(std::round(x)); }

template <typename Fetch>
double trilinear_gather(const Vec3& p, Fetch&& fetch) {
    int i0[3];
    double fr[3];
    for (int a = 0; a < 3; ++a) {
        const double fl = std::floor(p[a]);
        i0[a] = static_cast<int>(fl);
        fr[a] = p[a] - fl;
    }
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        const double wz = dz ? fr[2] : 1.0 - fr[2];
        if (wz == 0.0) continue;
        for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? fr[1] : 1.0 - fr[1];
            if (wy == 0.0) continue;
            for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? fr[0] : 1.0 - fr[0];
                if (wx == 0.0) continue;
                acc += wx * wy * wz * static_cast<double>(fetch(i0[0] + dx, i0[1] + dy, i0[2] + dz));
            }
        }
    }
    return acc;
}

}  // namespace

Sampler::Sampler(const Volume3& vol, InterpolationMode mode) : vol_(&vol), mode_(mode) {
    const InverseMap m = InverseMap::of(vol);
    inv_linear_ = m.lin;
    inv_offset_ = m.off;
}

float Sampler::at_voxel(const Vec3& p, bool& in_bounds) const {
    const auto& d = vol_->dims;
    in_bounds = true;
    for (int a = 0; a < 3; ++a) {
        if (!(p[a] >= 0.0 && p[a] <= static_cast<double>(d[a] - 1))) {
            in_bounds = false;
            break;
        }
    }

    if (mode_.interp == Interp::nearest) {
        int idx[3];
        for (int a = 0; a < 3; ++a) {
            int r = round_away(p[a]);
            if (r < 0 || r >= d[a]) {
                if (mode_.oob == OobPolicy::constant) return mode_.constant_value;
                r = clampi(r, 0, d[a] - 1);
            }
            idx[a] = r;
        }
        return vol_->at(idx[0], idx[1], idx[2]);
    }

    const auto& data = vol_->data;
    const auto dims = d;
    if (mode_.oob == OobPolicy::clamp) {
        const double v = trilinear_gather(p, [&](int i, int j, int k) {
            return data[vol_->index(clampi(i, 0, dims[0] - 1), clampi(j, 0, dims[1] - 1), clampi(k, 0, dims[2] - 1))];
        });
        return static_cast<float>(v);
    }
    const float cv = mode_.constant_value;
    const double v = trilinear_gather(p, [&](int i, int j, int k) {
        if (i < 0 || j < 0 || k < 0 || i >= dims[0] || j >= dims[1] || k >= dims[2]) return cv;
        return data[vol_->index(i, j, k)];
    });
    return static_cast<float>(v);
}

float Sampler::at_world(const Vec3& world, bool& in_bounds) const {
    return at_voxel(inv_linear_ * world + inv_offset_, in_bounds);
}

float Sampler::at_world(const Vec3& world) const {
    bool ib = false;
    return at_world(world, ib);
}

LabelSampler::LabelSampler(const LabelVolume& vol, std::int32_t background)
    : vol_(&vol), background_(background) {
    const InverseMap m = InverseMap::of(vol);
    inv_linear_ = m.lin;
    inv_offset_ = m.off;
}

std::int32_t LabelSampler::at_world(const Vec3& world) const {
    const Vec3 p = inv_linear_ * world + inv_offset_;
    int idx[3];
    for (int a = 0; a < 3; ++a) {
        const int r = round_away(p[a]);
        if (r < 0 || r >= vol_->dims[a]) return background_;
        idx[a] = r;
    }
    return vol_->at(idx[0], idx[1], idx[2]);
}

FieldSampler::FieldSampler(const VectorField& f) : field_(&f) {
    const InverseMap m = InverseMap::of(f);
    inv_linear_ = m.lin;
    inv_offset_ = m.off;
}

Vec3 FieldSampler::at_world(const Vec3& world) const {
    const Vec3 p = inv_linear_ * world + inv_offset_;
    const auto& dims = field_->dims;
    const std::size_t n = field_->voxel_count();
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
        const float* comp = field_->data.data() + static_cast<std::size_t>(c) * n;
        out[c] = trilinear_gather(p, [&](int i, int j, int k) {
            return comp[field_->index(clampi(i, 0, dims[0] - 1), clampi(j, 0, dims[1] - 1),
                                      clampi(k, 0, dims[2] - 1))];
        });
    }
    return out;
}

float sample(const Volume3& vol, const Vec3& world_point, InterpolationMode mode) {
    check_finite_point(world_point);
    vol.validate();
    return Sampler(vol, mode).at_world(world_point);
}

Volume3 resample(const Volume3& vol, const std::array<int, 3>& target_dims, const Vec3& target_spacing,
                 const Mat4& target_affine, InterpolationMode mode) {
    GridGeom target;
    target.dims = target_dims;
    target.spacing = target_spacing;
    target.voxel_to_world = target_affine;
    return resample(vol, target, mode);
}

Volume3 resample(const Volume3& vol, const GridGeom& target, InterpolationMode mode) {
    target.validate_geometry();
    vol.validate();
    Volume3 out;
    static_cast<GridGeom&>(out) = target;
    out.data.resize(out.voxel_count());

    const Sampler s(vol, mode);
    const Mat3 lin = target.linear();
    const Vec3 orig = target.origin();
    std::size_t f = 0;
    for (int k = 0; k < target.dims[2]; ++k) {
        for (int j = 0; j < target.dims[1]; ++j) {
            const Vec3 row0 = lin * Vec3(0.0, j, k) + orig;
            for (int i = 0; i < target.dims[0]; ++i, ++f) {
                const Vec3 w = row0 + lin.col(0) * static_cast<double>(i);
                bool ib;
                out.data[f] = s.at_world(w, ib);
            }
        }
    }
    return out;
}

LabelVolume resample_labels(const LabelVolume& vol, const GridGeom& target) {
    target.validate_geometry();
    vol.validate();
    LabelVolume out;
    static_cast<GridGeom&>(out) = target;
    out.data.resize(out.voxel_count());
    out.label_table = vol.label_table;

    const LabelSampler s(vol, 0);
    const Mat3 lin = target.linear();
    const Vec3 orig = target.origin();
    std::size_t f = 0;
    for (int k = 0; k < target.dims[2]; ++k) {
        for (int j = 0; j < target.dims[1]; ++j) {
            const Vec3 row0 = lin * Vec3(0.0, j, k) + orig;
            for (int i = 0; i < target.dims[0]; ++i, ++f) {
                out.data[f] = s.at_world(row0 + lin.col(0) * static_cast<double>(i));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian smoothing and pyramids

namespace {

std::vector<double> gaussian_kernel(double sigma_vox) {
    const int r = static_cast<int>(std::floor(3.0 * sigma_vox));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int t = -r; t <= r; ++t) {
        const double w = std::exp(-0.5 * (t * t) / (sigma_vox * sigma_vox));
        k[static_cast<std::size_t>(t + r)] = w;
        sum += w;
    }
    for (auto& w : k) w /= sum;
    return k;
}

void convolve_axis(const std::vector<float>& in, std::vector<float>& out, const std::array<int, 3>& dims, int axis,
                   const std::vector<double>& kernel) {
    const int r = static_cast<int>(kernel.size() / 2);
    const int n = dims[axis];
    const std::size_t strides[3] = {1ull, static_cast<std::size_t>(dims[0]),
                                    static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1])};
    const std::size_t stride = strides[axis];

    // Iterate lines along `axis`.
    const int oa1 = (axis + 1) % 3;
    const int oa2 = (axis + 2) % 3;
    for (int b = 0; b < dims[oa2]; ++b) {
        for (int a = 0; a < dims[oa1]; ++a) {
            std::size_t base = static_cast<std::size_t>(a) * strides[oa1] + static_cast<std::size_t>(b) * strides[oa2];
            for (int t = 0; t < n; ++t) {
                double acc = 0.0;
                for (int u = -r; u <= r; ++u) {
                    const int src = clampi(t + u, 0, n - 1);
                    acc += kernel[static_cast<std::size_t>(u + r)] *
                           static_cast<double>(in[base + static_cast<std::size_t>(src) * stride]);
                }
                out[base + static_cast<std::size_t>(t) * stride] = static_cast<float>(acc);
            }
        }
    }
}

}  // namespace

Volume3 gaussian_smooth(const Volume3& vol, const Vec3& sigma_mm) {
    vol.validate();
    for (int a = 0; a < 3; ++a) {
        if (sigma_mm[a] < 0.0 || !std::isfinite(sigma_mm[a])) {
            throw std::invalid_argument("gaussian_smooth: sigma must be >= 0");
        }
    }
    Volume3 out = vol;
    std::vector<float> tmp(vol.data.size());
    for (int axis = 0; axis < 3; ++axis) {
        if (sigma_mm[axis] <= 0.0) continue;
        const double sigma_vox = sigma_mm[axis] / vol.spacing[axis];
        if (static_cast<int>(std::floor(3.0 * sigma_vox)) < 1) continue;  // kernel degenerates to identity
        const auto kernel = gaussian_kernel(sigma_vox);
        convolve_axis(out.data, tmp, vol.dims, axis, kernel);
        out.data.swap(tmp);
    }
    return out;
}

std::vector<Volume3> build_pyramid(const Volume3& vol, int levels) {
    if (levels < 1) {
        throw std::invalid_argument("build_pyramid: levels must be >= 1");
    }
    vol.validate();
    std::vector<Volume3> pyr;
    pyr.push_back(vol);
    for (int l = 1; l < levels; ++l) {
        const Volume3& prev = pyr.back();
        std::array<int, 3> nd;
        bool ok = true;
        for (int a = 0; a < 3; ++a) {
            nd[a] = (prev.dims[a] + 1) / 2;
            if (nd[a] < 4) ok = false;
        }
        if (!ok) break;
        const Volume3 sm = gaussian_smooth(prev, prev.spacing);  // sigma = 1 voxel per axis
        GridGeom target;
        target.dims = nd;
        target.spacing = prev.spacing * 2.0;
        target.voxel_to_world = prev.voxel_to_world;
        target.voxel_to_world.block<3, 3>(0, 0) *= 2.0;  // new index n lands on old index 2n
        pyr.push_back(resample(sm, target, {Interp::trilinear, OobPolicy::clamp, 0.0f}));
    }
    return pyr;
}

}  // namespace ctpipe
