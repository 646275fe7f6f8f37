// bonestrip.hpp - soft-tissue extraction: threshold, largest component,
// hole filling, mask smoothing.
#pragma once

#include "ctpipe/volume.hpp"

namespace ctpipe {

struct StripParams {
    double tissue_low_hu = 0.0;
    double tissue_high_hu = 100.0;
    int fill_connectivity = 6;  // 6 or 26
    double mask_smooth_sigma_mm = 1.0;
    double mask_rebinarize_level = 0.5;
};

struct StripResult {
    Volume3 stripped;
    LabelVolume mask;
    bool empty_component_warning = false;
};

/// Binary mask: 1 where low <= I <= high (inclusive both ends).
LabelVolume threshold_mask(const Volume3& vol, double low, double high);

/// Keep only the largest foreground component (ties broken by the smallest
/// minimum linear voxel index). An empty mask comes back empty with the
/// warning flag set.
LabelVolume largest_component(const LabelVolume& mask, int connectivity, bool* empty_warning = nullptr);

/// Fill cavities: background is flood-filled from all boundary faces with the
/// given connectivity; unreached background voxels become foreground.
LabelVolume fill_holes(const LabelVolume& mask, int connectivity);

/// Full recipe: threshold -> largest component -> fill holes -> Gaussian
/// smooth -> rebinarize -> apply (background set to -1024 HU).
/// Throws when the final mask is empty.
StripResult strip(const Volume3& vol, const StripParams& params);

}  // namespace ctpipe
