// preprocess.hpp - orientation standardization, isotropic resampling,
// homomorphic bias correction, affine pre-alignment to a template.
#pragma once

#include "ctpipe/registration.hpp"
#include "ctpipe/volume.hpp"

namespace ctpipe {

struct PreprocessParams {
    double target_spacing = 1.0;   // mm, isotropic
    double bias_sigma_mm = 50.0;
    int bias_max_iters = 20;
    double bias_tol = 1e-3;        // max-abs log-field update
    Metric prealign_metric = Metric::mi;
    bool bias_enabled = true;

    void validate() const;
};

/// Permute/flip axes (pure data shuffle, no interpolation) so the affine's
/// 3x3 block is closest to a positive diagonal (RAS). World positions of all
/// voxels are unchanged; idempotent.
Volume3 reorient_canonical(const Volume3& vol);

/// Resample onto an axis-aligned isotropic grid covering the volume's world
/// bounding box. Out-of-field voxels get `fill` (air for CT).
Volume3 resample_isotropic(const Volume3& vol, double spacing_mm, float fill = -1024.0f);

struct BiasResult {
    Volume3 corrected;
    Volume3 bias_field;  // multiplicative, ~1 where nothing to correct
};

/// Iterative log-domain homomorphic correction inside `mask` (normalized
/// Gaussian smoothing of the log image, the smooth part accumulating into the
/// log-bias estimate). The corrected volume's mask mean matches the input's.
BiasResult correct_bias(const Volume3& vol, const LabelVolume& mask, const PreprocessParams& params);

struct PrealignResult {
    Volume3 resampled;             // subject on the template grid
    AffineTransform subject_to_template;
};

/// 12-dof affine registration onto the template, returning the subject
/// resampled on the template grid plus the world-to-world transform (kept
/// because segmentation needs its inverse).
PrealignResult prealign(const Volume3& vol, const Volume3& tmpl, const PreprocessParams& params);

}  // namespace ctpipe
