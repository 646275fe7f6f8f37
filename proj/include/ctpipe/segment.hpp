// segment.hpp - atlas pull-back through the registration inverse and the
// pre-alignment inverse.
#pragma once

#include <map>
#include <string>

#include "ctpipe/registration.hpp"
#include "ctpipe/volume.hpp"

namespace ctpipe {

struct SegmentationResult {
    LabelVolume labels_normalized;  // template grid
    LabelVolume labels_physical;    // native subject grid
};

/// Labels in the normalized space: for each template-grid voxel x,
/// L(x) = atlas(x + u_minus(x)) with nearest sampling - the pull-back through
/// the subject->template map, i.e. the atlas warped by the registration's
/// inverse exponential. The atlas is nearest-resampled to the template grid
/// first when it lives elsewhere.
LabelVolume segment_normalized(const LabelVolume& atlas, const Diffeomorphism& diffeo);

/// Labels in the subject's physical space: for each native voxel world
/// position y, L(y) = labels_normalized(prealign(y)) with nearest sampling,
/// where prealign maps subject world to template world.
LabelVolume segment_physical(const LabelVolume& labels_normalized, const AffineTransform& prealign,
                             const GridGeom& native_grid);

/// Plain text `index<TAB>name` per line; indices must be unique.
std::map<std::int32_t, std::string> read_label_table(const std::string& path);

/// Labels present in `labels` but missing from `table` (reported, not fatal).
std::vector<std::int32_t> unknown_labels(const LabelVolume& labels, const std::map<std::int32_t, std::string>& table);

}  // namespace ctpipe
