#include "ctpipe/quantify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mc_tables.hpp"

namespace ctpipe {

Volume3 jacobian_determinant(const VectorField& u) {
    u.validate_geometry();
    if (u.data.size() != 3 * u.voxel_count()) {
        throw std::invalid_argument("jacobian_determinant: malformed field");
    }
    Volume3 out;
    static_cast<GridGeom&>(out) = u;
    out.data.resize(out.voxel_count());

    const Mat3 ainv = u.linear().inverse();  // d(voxel)/d(world)
    const auto& d = u.dims;
    const std::size_t n = u.voxel_count();

    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const int ip = std::min(i + 1, d[0] - 1), im = std::max(i - 1, 0);
                const int jp = std::min(j + 1, d[1] - 1), jm = std::max(j - 1, 0);
                const int kp = std::min(k + 1, d[2] - 1), km = std::max(k - 1, 0);
                Mat3 dvox;  // row = component, column = voxel axis
                for (int c = 0; c < 3; ++c) {
                    const float* comp = u.data.data() + static_cast<std::size_t>(c) * n;
                    dvox(c, 0) = (comp[u.index(ip, j, k)] - comp[u.index(im, j, k)]) / std::max(1, ip - im);
                    dvox(c, 1) = (comp[u.index(i, jp, k)] - comp[u.index(i, jm, k)]) / std::max(1, jp - jm);
                    dvox(c, 2) = (comp[u.index(i, j, kp)] - comp[u.index(i, j, km)]) / std::max(1, kp - km);
                }
                const Mat3 grad_world = dvox * ainv;
                out.data[u.index(i, j, k)] = static_cast<float>((Mat3::Identity() + grad_world).determinant());
            }
    return out;
}

WarpStats warp_stats(const Volume3& jac, const LabelVolume& mask, int bins) {
    jac.validate();
    mask.validate();
    if (jac.dims != mask.dims) throw std::invalid_argument("warp_stats: jacobian and mask grids differ");
    if (bins < 1) throw std::invalid_argument("warp_stats: bins must be >= 1");

    WarpStats s;
    s.bins = bins;
    double sum = 0.0, sum2 = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < jac.data.size(); ++f) {
        if (mask.data[f] == 0) continue;
        const double v = jac.data[f];
        sum += v;
        sum2 += v * v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        ++s.n_voxels;
    }
    if (s.n_voxels == 0) throw std::runtime_error("warp_stats: empty mask");

    const double n = static_cast<double>(s.n_voxels);
    s.jac_mean = sum / n;
    s.jac_std = std::sqrt(std::max(0.0, sum2 / n - s.jac_mean * s.jac_mean));
    s.jac_min = lo;
    s.jac_max = hi;

    if (hi > lo) {
        std::vector<std::int64_t> hist(static_cast<std::size_t>(bins), 0);
        const double scale = bins / (hi - lo);
        for (std::size_t f = 0; f < jac.data.size(); ++f) {
            if (mask.data[f] == 0) continue;
            int b = static_cast<int>((jac.data[f] - lo) * scale);
            b = std::clamp(b, 0, bins - 1);
            ++hist[static_cast<std::size_t>(b)];
        }
        double entropy = 0.0;
        for (const auto c : hist) {
            if (c == 0) continue;
            const double p = static_cast<double>(c) / n;
            entropy -= p * std::log2(p);
        }
        s.jac_entropy_bits = entropy;
    }
    return s;
}

double label_surface_area(const LabelVolume& labels, std::int32_t label) {
    const auto& d = labels.dims;
    const Mat3 lin = labels.linear();

    // Cells span voxel centers; one layer of virtual background outside the
    // grid closes surfaces cut by the volume boundary.
    auto inside = [&](int i, int j, int k) -> int {
        if (i < 0 || j < 0 || k < 0 || i >= d[0] || j >= d[1] || k >= d[2]) return 0;
        return labels.at(i, j, k) == label ? 1 : 0;
    };

    double area = 0.0;
    for (int k = -1; k < d[2]; ++k)
        for (int j = -1; j < d[1]; ++j)
            for (int i = -1; i < d[0]; ++i) {
                int cube = 0;
                for (int c = 0; c < 8; ++c) {
                    if (inside(i + mc::kCornerOffsets[c][0], j + mc::kCornerOffsets[c][1],
                               k + mc::kCornerOffsets[c][2])) {
                        cube |= (1 << c);
                    }
                }
                if (cube == 0 || cube == 255) continue;
                const int* tris = mc::kTriTable[cube];
                for (int t = 0; tris[t] != -1; t += 3) {
                    Vec3 p[3];
                    for (int v = 0; v < 3; ++v) {
                        const int e = tris[t + v];
                        const int* c0 = mc::kCornerOffsets[mc::kEdgeCorners[e][0]];
                        const int* c1 = mc::kCornerOffsets[mc::kEdgeCorners[e][1]];
                        // Binary values at level 0.5: crossings sit at edge
                        // midpoints (the general linear interpolation formula
                        // degenerates to t = 0.5).
                        const Vec3 a(i + c0[0], j + c0[1], k + c0[2]);
                        const Vec3 b(i + c1[0], j + c1[1], k + c1[2]);
                        p[v] = lin * (0.5 * (a + b));
                    }
                    area += 0.5 * ((p[1] - p[0]).cross(p[2] - p[0])).norm();
                }
            }
    return area;
}

std::vector<RegionMeasures> geo_measures(const LabelVolume& labels,
                                         const std::map<std::int32_t, std::string>& table) {
    labels.validate();
    const double voxel_volume = std::abs(labels.linear().determinant());
    const Mat3 lin = labels.linear();
    const Vec3 orig = labels.origin();

    std::map<std::int32_t, RegionMeasures> acc;
    std::size_t f = 0;
    for (int k = 0; k < labels.dims[2]; ++k)
        for (int j = 0; j < labels.dims[1]; ++j)
            for (int i = 0; i < labels.dims[0]; ++i, ++f) {
                const std::int32_t lab = labels.data[f];
                if (lab == 0) continue;
                auto& r = acc[lab];
                r.label = lab;
                r.voxel_count += 1;
                r.centroid_world += lin * Vec3(i, j, k) + orig;
            }

    std::vector<RegionMeasures> out;
    out.reserve(acc.size());
    for (auto& [lab, r] : acc) {
        r.volume_mm3 = static_cast<double>(r.voxel_count) * voxel_volume;
        r.centroid_world /= static_cast<double>(r.voxel_count);
        r.surface_area_mm2 = label_surface_area(labels, lab);
        if (auto it = table.find(lab); it != table.end()) {
            r.name = it->second;
        } else if (auto it2 = labels.label_table.find(lab); it2 != labels.label_table.end()) {
            r.name = it2->second;
        }
        out.push_back(std::move(r));
    }
    return out;  // std::map iteration gives ascending label order
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

// Commas and quotes are not expected in region names, but keep the CSV valid
// if they do appear.
std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

}  // namespace

void write_warp_stats_csv(const std::string& path, const std::vector<WarpStatsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "subject,space,n_voxels,bins,jac_mean,jac_std,jac_entropy_bits,jac_min,jac_max\n";
    for (const auto& r : rows) {
        out << csv_escape(r.subject) << ',' << r.space << ',' << r.stats.n_voxels << ',' << r.stats.bins << ','
            << fmt(r.stats.jac_mean) << ',' << fmt(r.stats.jac_std) << ',' << fmt(r.stats.jac_entropy_bits) << ','
            << fmt(r.stats.jac_min) << ',' << fmt(r.stats.jac_max) << '\n';
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

void write_region_measures_csv(const std::string& path, const std::string& subject,
                               const std::vector<RegionMeasures>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "subject,space,label,name,voxel_count,volume_mm3,surface_area_mm2,centroid_x,centroid_y,centroid_z\n";
    for (const auto& r : rows) {
        out << csv_escape(subject) << ',' << r.space << ',' << r.label << ',' << csv_escape(r.name) << ','
            << r.voxel_count << ',' << fmt(r.volume_mm3) << ',' << fmt(r.surface_area_mm2) << ','
            << fmt(r.centroid_world[0]) << ',' << fmt(r.centroid_world[1]) << ',' << fmt(r.centroid_world[2])
            << '\n';
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace ctpipe
