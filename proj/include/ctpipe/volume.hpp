// volume.hpp - dense 3D grids, voxel/world geometry, interpolation, resampling.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ctpipe {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Shared grid geometry: dims (voxels per axis), spacing (mm/voxel) and the
/// homogeneous voxel-index -> world-mm map. Data layout for everything built
/// on this is x-fastest (index = i + dims[0]*(j + dims[1]*k)).
struct GridGeom {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Mat4 voxel_to_world = Mat4::Identity();

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
    }
    Mat3 linear() const { return voxel_to_world.block<3, 3>(0, 0); }
    Vec3 origin() const { return voxel_to_world.block<3, 1>(0, 3); }

    Vec3 index_to_world(double i, double j, double k) const {
        return linear() * Vec3(i, j, k) + origin();
    }
    /// Continuous voxel coordinate of a world point.
    Vec3 world_to_index(const Vec3& w) const;

    bool same_grid(const GridGeom& o, double tol = 1e-5) const;

    /// Throws std::invalid_argument when dims are non-positive, the affine is
    /// singular, or spacing disagrees with the affine column norms (1e-4 rel).
    void validate_geometry() const;
};

/// Build an axis-aligned geometry with the given origin (world position of voxel (0,0,0)).
GridGeom make_grid(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin = Vec3::Zero());

/// Scalar volume. Intensities are float32; HU for CT inputs.
struct Volume3 : GridGeom {
    std::vector<float> data;

    float at(int i, int j, int k) const { return data[index(i, j, k)]; }
    float& at(int i, int j, int k) { return data[index(i, j, k)]; }

    void validate() const;
};

/// Integer-labeled volume. 0 is background.
struct LabelVolume : GridGeom {
    std::vector<std::int32_t> data;
    std::map<std::int32_t, std::string> label_table;

    std::int32_t at(int i, int j, int k) const { return data[index(i, j, k)]; }
    std::int32_t& at(int i, int j, int k) { return data[index(i, j, k)]; }

    void validate() const;
};

/// Per-voxel 3-vector field (world-frame mm). Components are stored as three
/// concatenated scalar volumes: all of x, then all of y, then all of z.
struct VectorField : GridGeom {
    std::vector<float> data;

    std::size_t component_offset(int c) const { return static_cast<std::size_t>(c) * voxel_count(); }
    float comp(int c, std::size_t flat) const { return data[component_offset(c) + flat]; }
    float& comp(int c, std::size_t flat) { return data[component_offset(c) + flat]; }
    Vec3 at(int i, int j, int k) const {
        const std::size_t f = index(i, j, k);
        return Vec3(comp(0, f), comp(1, f), comp(2, f));
    }
    void set(int i, int j, int k, const Vec3& v) {
        const std::size_t f = index(i, j, k);
        comp(0, f) = static_cast<float>(v[0]);
        comp(1, f) = static_cast<float>(v[1]);
        comp(2, f) = static_cast<float>(v[2]);
    }
    double max_norm() const;
};

Volume3 make_volume(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin = Vec3::Zero(),
                    float fill = 0.0f);
LabelVolume make_labels(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin = Vec3::Zero(),
                        std::int32_t fill = 0);
VectorField make_field(const GridGeom& grid, const Vec3& fill = Vec3::Zero());

/// Invertible world-to-world homogeneous map.
struct AffineTransform {
    Mat4 matrix = Mat4::Identity();
    std::string source_space;  // optional tags, checked when both sides are set
    std::string target_space;

    Vec3 apply(const Vec3& p) const {
        return matrix.block<3, 3>(0, 0) * p + matrix.block<3, 1>(0, 3);
    }
    AffineTransform inverse() const;
    /// Throws when the bottom row is not (0,0,0,1) or the map is not invertible
    /// to max-norm 1e-8.
    void validate() const;
};

enum class Interp { trilinear, nearest };
enum class OobPolicy { constant, clamp };

struct InterpolationMode {
    Interp interp = Interp::trilinear;
    OobPolicy oob = OobPolicy::constant;
    float constant_value = 0.0f;
};

/// Precomputed world->voxel map plus interpolation over one volume. Hot loops
/// should build one of these instead of calling sample() per point.
class Sampler {
public:
    Sampler(const Volume3& vol, InterpolationMode mode);

    float at_world(const Vec3& world) const;
    /// Same, but reports whether the continuous voxel coordinate fell inside
    /// [0, n-1] on every axis (the metric-overlap definition).
    float at_world(const Vec3& world, bool& in_bounds) const;
    float at_voxel(const Vec3& voxel, bool& in_bounds) const;

private:
    const Volume3* vol_;
    InterpolationMode mode_;
    Mat3 inv_linear_;
    Vec3 inv_offset_;
};

/// Nearest-neighbor label lookup; out-of-bounds yields `background`.
class LabelSampler {
public:
    LabelSampler(const LabelVolume& vol, std::int32_t background = 0);
    std::int32_t at_world(const Vec3& world) const;

private:
    const LabelVolume* vol_;
    std::int32_t background_;
    Mat3 inv_linear_;
    Vec3 inv_offset_;
};

/// Trilinear clamp-to-edge vector field interpolation.
class FieldSampler {
public:
    explicit FieldSampler(const VectorField& f);
    Vec3 at_world(const Vec3& world) const;

private:
    const VectorField* field_;
    Mat3 inv_linear_;
    Vec3 inv_offset_;
};

/// Interpolate one volume at a world point. Non-finite points are rejected.
float sample(const Volume3& vol, const Vec3& world_point, InterpolationMode mode);

/// Pull `vol` onto the target grid: out(i,j,k) = sample(vol, target_affine*(i,j,k,1), mode).
Volume3 resample(const Volume3& vol, const std::array<int, 3>& target_dims, const Vec3& target_spacing,
                 const Mat4& target_affine, InterpolationMode mode);
Volume3 resample(const Volume3& vol, const GridGeom& target, InterpolationMode mode);

/// Nearest-only resampling for labels (trilinear makes no sense on label ids).
LabelVolume resample_labels(const LabelVolume& vol, const GridGeom& target);

/// Separable Gaussian smoothing, per-axis sigma in mm (converted to voxels via
/// spacing). Kernel truncated at 3 sigma and renormalized; clamp-to-edge.
/// sigma 0 on an axis leaves that axis untouched.
Volume3 gaussian_smooth(const Volume3& vol, const Vec3& sigma_mm);

/// Multiresolution pyramid. Level 0 is the input; each next level is smoothed
/// with 1 voxel sigma and resampled at 2x spacing, dims halved (ceiling).
/// Levels that would shrink an axis below 4 voxels are dropped.
std::vector<Volume3> build_pyramid(const Volume3& vol, int levels);

}  // namespace ctpipe
