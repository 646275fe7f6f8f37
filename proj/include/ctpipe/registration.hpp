// registration.hpp - affine and diffeomorphic (stationary-velocity log-demons)
// registration between a moving volume and a fixed template.
#pragma once

#include <string>
#include <variant>
#include <vector>

#include "ctpipe/volume.hpp"

namespace ctpipe {

enum class Metric { msd, ncc, mi };

Metric metric_from_string(const std::string& s);
std::string to_string(Metric m);

/// Multiresolution derivative-free affine registration. Returns the
/// moving-world -> fixed-world transform. dof selects rigid (6),
/// rigid+scale (9) or full affine (12).
AffineTransform affine_register(const Volume3& moving, const Volume3& fixed, Metric metric, int dof);

/// A stationary velocity field lives on the fixed/template grid; vectors are
/// world-frame mm displacement-rates.
using StationaryVelocityField = VectorField;

/// Forward and inverse displacement pair obtained by exponentiating one
/// stationary velocity field. forward: phi(x) = x + u_plus(x) maps fixed-grid
/// points to moving sample points (it warps the moving image onto the fixed
/// grid). inverse: phi^-1(x) = x + u_minus(x) maps (pre-aligned) subject
/// points to their template correspondents.
struct Diffeomorphism {
    VectorField forward;
    VectorField inverse;
    StationaryVelocityField velocity;  // provenance
    int exp_steps = 0;
};

struct DiffeoParams {
    int levels = 3;
    std::vector<int> iters_per_level{100, 75, 50};
    double sigma_fluid_mm = 2.0;      // smoothing of each update
    double sigma_diffusion_mm = 1.5;  // smoothing of the velocity
    double step_scale_mm = 0.0;       // cap on update magnitude; 0 = 0.9 * min spacing
    int ss_min_steps = 2;             // floor on scaling-and-squaring steps
    double converge_tol = 1e-4;       // relative metric improvement over a 10-iteration window

    void validate() const;
};

/// Scaling-and-squaring exponential of a velocity field: the step count N
/// satisfies max|v| / 2^N < 0.4 * min spacing (with `min_steps` as a floor),
/// the halved field is composed with itself N times (trilinear clamp-to-edge).
/// direction is +1 or -1. Optionally reports N through `steps_out`.
VectorField exp_velocity(const StationaryVelocityField& v, int direction, int min_steps = 2,
                         int* steps_out = nullptr);

/// Log-demons registration. The moving volume is resampled through `init`
/// (a moving-world -> fixed-world affine) onto the fixed grid first. The
/// result satisfies the inverse-consistency and positive-Jacobian invariants
/// or the call throws.
Diffeomorphism diffeo_register(const Volume3& moving, const Volume3& fixed, const AffineTransform& init,
                               const DiffeoParams& params);

/// Ordered transform chain for pull-back resampling. Steps are applied to the
/// output-grid world point in the order they were added; the final point
/// samples the source volume. Space tags, when set on consecutive steps, must
/// match or adding throws.
class TransformChain {
public:
    /// Affine step: x -> matrix * x.
    void add_affine(const AffineTransform& a);
    /// Displacement step: x -> x + u(x), trilinear clamp-to-edge sampling of u.
    void add_displacement(const VectorField& u, const std::string& from_space = "",
                          const std::string& to_space = "");

    Vec3 apply(const Vec3& x) const;
    bool empty() const { return steps_.empty(); }

private:
    struct AffineStep {
        Mat3 lin;
        Vec3 off;
    };
    struct FieldStep {
        const VectorField* field;
    };
    std::vector<std::variant<AffineStep, FieldStep>> steps_;
    std::string chain_from_, chain_to_;
    void check_spaces(const std::string& from, const std::string& to);
};

/// output(x) = vol(T(x)) on the target grid.
Volume3 apply_transform(const Volume3& vol, const TransformChain& chain, const GridGeom& target,
                        InterpolationMode mode);
LabelVolume apply_transform_labels(const LabelVolume& labels, const TransformChain& chain, const GridGeom& target);

// --- on-disk transform formats ---

/// 4x4 row-major plain text with a one-line header naming the source and
/// target spaces.
void write_affine(const AffineTransform& a, const std::string& path);
AffineTransform read_affine(const std::string& path);

/// Displacement/velocity NIfTI plus a small plain-text sidecar manifest
/// (grid tag, direction, step count) at `path + ".manifest"`.
void write_field(const VectorField& f, const std::string& path, const std::string& grid_tag,
                 const std::string& direction, int steps);
VectorField read_field(const std::string& path);

}  // namespace ctpipe
