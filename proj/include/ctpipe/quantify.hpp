// quantify.hpp - Jacobian-based warp statistics and per-region geometry.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctpipe/volume.hpp"

namespace ctpipe {

struct WarpStats {
    double jac_mean = 0.0;
    double jac_std = 0.0;          // population standard deviation
    double jac_entropy_bits = 0.0;
    std::int64_t n_voxels = 0;
    int bins = 64;
    double jac_min = 0.0;
    double jac_max = 0.0;
};

struct RegionMeasures {
    std::int32_t label = 0;
    std::string name;
    std::int64_t voxel_count = 0;
    double volume_mm3 = 0.0;
    double surface_area_mm2 = 0.0;
    Vec3 centroid_world = Vec3::Zero();
    std::string space;  // "physical" or "normalized"
};

/// det(I + grad u) of a world-frame displacement field: central differences at
/// interior voxels, one-sided at the boundary, with the voxel->world change
/// of basis applied.
Volume3 jacobian_determinant(const VectorField& u);

/// Mean / population std / Shannon entropy (bits, equal-width histogram over
/// [min,max] of the masked values) of a Jacobian map over a nonempty mask.
WarpStats warp_stats(const Volume3& jac, const LabelVolume& mask, int bins = 64);

/// Per nonzero label: voxel count, exact voxel volume, marching-cubes surface
/// area, world centroid. Rows in ascending label order; `space` left empty.
/// Names come from `table` entries, falling back to labels.label_table.
std::vector<RegionMeasures> geo_measures(const LabelVolume& labels,
                                         const std::map<std::int32_t, std::string>& table = {});

/// Marching-cubes surface area of one label's binary indicator (level 0.5).
double label_surface_area(const LabelVolume& labels, std::int32_t label);

struct WarpStatsRow {
    std::string subject;
    std::string space;
    WarpStats stats;
};

/// CSV emitters with the fixed header rows.
void write_warp_stats_csv(const std::string& path, const std::vector<WarpStatsRow>& rows);
void write_region_measures_csv(const std::string& path, const std::string& subject,
                               const std::vector<RegionMeasures>& rows);

}  // namespace ctpipe
