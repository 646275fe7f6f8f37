// phantoms.hpp - synthetic volumes, atlases and fields for tests.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctpipe/volume.hpp"

namespace phantoms {

using ctpipe::GridGeom;
using ctpipe::LabelVolume;
using ctpipe::Mat4;
using ctpipe::Vec3;
using ctpipe::VectorField;
using ctpipe::Volume3;

// Deterministic 64-bit xorshift; independent of libstdc++ distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed ? seed : 1) {}
    std::uint64_t next() {
        state_ ^= state_ << 13;
        state_ ^= state_ >> 7;
        state_ ^= state_ << 17;
        return state_;
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        return lo + (hi - lo) * (static_cast<double>(next() >> 11) / 9007199254740992.0);
    }
    int uniform_int(int lo, int hi) {  // inclusive
        return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1));
    }

private:
    std::uint64_t state_;
};

inline Volume3 uniform_volume(const std::array<int, 3>& dims, const Vec3& spacing, float value) {
    return ctpipe::make_volume(dims, spacing, Vec3::Zero(), value);
}

/// I(world) = g . world + offset; trilinear interpolation reproduces this
/// exactly, which several oracles rely on.
inline Volume3 ramp_volume(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& g, double offset) {
    Volume3 v = ctpipe::make_volume(dims, spacing, Vec3::Zero(), 0.0f);
    std::size_t f = 0;
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i, ++f) {
                const Vec3 w = v.index_to_world(i, j, k);
                v.data[f] = static_cast<float>(g.dot(w) + offset);
            }
    return v;
}

inline Volume3 random_volume(const std::array<int, 3>& dims, const Vec3& spacing, Rng& rng, float lo = 0.0f,
                             float hi = 100.0f) {
    Volume3 v = ctpipe::make_volume(dims, spacing, Vec3::Zero(), 0.0f);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

/// Two smooth spheres of different size/intensity; asymmetric so rigid
/// registration has no spurious optima.
inline Volume3 two_sphere_phantom(int n = 64, double spacing = 1.0) {
    Volume3 v = ctpipe::make_volume({n, n, n}, Vec3::Constant(spacing), Vec3::Zero(), 0.0f);
    const Vec3 c1 = v.index_to_world(0.38 * n, 0.42 * n, 0.5 * n);
    const Vec3 c2 = v.index_to_world(0.68 * n, 0.6 * n, 0.45 * n);
    const double r1 = 0.18 * n * spacing, r2 = 0.10 * n * spacing;
    std::size_t f = 0;
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i, ++f) {
                const Vec3 w = v.index_to_world(i, j, k);
                const double d1 = (w - c1).norm() / r1;
                const double d2 = (w - c2).norm() / r2;
                const double s1 = 100.0 / (1.0 + std::exp((d1 - 1.0) * 8.0));
                const double s2 = 60.0 / (1.0 + std::exp((d2 - 1.0) * 8.0));
                v.data[f] = static_cast<float>(s1 + s2);
            }
    return v;
}

/// Smooth texture with gradients everywhere; good demons fodder.
inline Volume3 textured_phantom(int n = 64, double spacing = 1.0, double period_mm = 16.0) {
    Volume3 v = ctpipe::make_volume({n, n, n}, Vec3::Constant(spacing), Vec3::Zero(), 0.0f);
    const double w0 = 2.0 * M_PI / period_mm;
    const Vec3 center = v.index_to_world((n - 1) / 2.0, (n - 1) / 2.0, (n - 1) / 2.0);
    const double extent = 0.42 * n * spacing;
    std::size_t f = 0;
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i, ++f) {
                const Vec3 w = v.index_to_world(i, j, k);
                const double r = (w - center).norm();
                const double envelope = 1.0 / (1.0 + std::exp((r - extent) / (2.0 * spacing)));
                const double tex = std::sin(w0 * w[0]) * std::sin(w0 * w[1]) * std::sin(w0 * w[2]);
                v.data[f] = static_cast<float>(envelope * (60.0 + 40.0 * tex));
            }
    return v;
}

/// Air (-1000), soft-tissue sphere (40) inside a bone shell (1200).
inline Volume3 head_phantom(int n = 48, double spacing = 1.0) {
    Volume3 v = ctpipe::make_volume({n, n, n}, Vec3::Constant(spacing), Vec3::Zero(), -1000.0f);
    const Vec3 c = v.index_to_world((n - 1) / 2.0, (n - 1) / 2.0, (n - 1) / 2.0);
    const double r_tissue = 0.28 * n * spacing;
    const double r_bone = 0.36 * n * spacing;
    std::size_t f = 0;
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i, ++f) {
                const double r = (v.index_to_world(i, j, k) - c).norm();
                if (r <= r_tissue) v.data[f] = 40.0f;
                else if (r <= r_bone) v.data[f] = 1200.0f;
            }
    return v;
}

inline LabelVolume sphere_label(const GridGeom& grid, const Vec3& center_world, double radius_mm,
                                std::int32_t label = 1) {
    LabelVolume lv;
    static_cast<GridGeom&>(lv) = grid;
    lv.data.assign(lv.voxel_count(), 0);
    std::size_t f = 0;
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i, ++f) {
                const Vec3 w = grid.linear() * Vec3(i, j, k) + grid.origin();
                if ((w - center_world).norm() <= radius_mm) lv.data[f] = label;
            }
    return lv;
}

/// N nearest-seed parcels inside a sphere (deterministic).
inline LabelVolume parcel_atlas(const GridGeom& grid, int n_labels, double sphere_radius_mm, std::uint64_t seed) {
    Rng rng(seed);
    const Vec3 center = grid.linear() * Vec3((grid.dims[0] - 1) / 2.0, (grid.dims[1] - 1) / 2.0,
                                             (grid.dims[2] - 1) / 2.0) +
                        grid.origin();
    std::vector<Vec3> seeds;
    while (static_cast<int>(seeds.size()) < n_labels) {
        const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        if (p.norm() <= 1.0) seeds.push_back(center + p * sphere_radius_mm);
    }
    LabelVolume lv;
    static_cast<GridGeom&>(lv) = grid;
    lv.data.assign(lv.voxel_count(), 0);
    std::size_t f = 0;
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i, ++f) {
                const Vec3 w = grid.linear() * Vec3(i, j, k) + grid.origin();
                if ((w - center).norm() > sphere_radius_mm) continue;
                int best = 0;
                double best_d = std::numeric_limits<double>::infinity();
                for (int s = 0; s < n_labels; ++s) {
                    const double d = (w - seeds[static_cast<std::size_t>(s)]).squaredNorm();
                    if (d < best_d) {
                        best_d = d;
                        best = s + 1;
                    }
                }
                lv.data[f] = best;
            }
    return lv;
}

/// Gaussian-bump velocity field: v(x) = peak * exp(-|x-c|^2 / (2 sigma^2)).
inline VectorField gaussian_bump_velocity(const GridGeom& grid, const Vec3& center_world, const Vec3& peak_mm,
                                          double sigma_mm) {
    VectorField v = ctpipe::make_field(grid);
    const std::size_t n = v.voxel_count();
    std::size_t f = 0;
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i, ++f) {
                const Vec3 w = grid.linear() * Vec3(i, j, k) + grid.origin();
                const double g = std::exp(-(w - center_world).squaredNorm() / (2.0 * sigma_mm * sigma_mm));
                v.data[f] = static_cast<float>(peak_mm[0] * g);
                v.data[n + f] = static_cast<float>(peak_mm[1] * g);
                v.data[2 * n + f] = static_cast<float>(peak_mm[2] * g);
            }
    return v;
}

inline double dice(const LabelVolume& a, const LabelVolume& b, std::int32_t label) {
    std::size_t na = 0, nb = 0, nab = 0;
    for (std::size_t f = 0; f < a.data.size(); ++f) {
        const bool ia = a.data[f] == label;
        const bool ib = b.data[f] == label;
        na += ia;
        nb += ib;
        nab += (ia && ib);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(nab) / static_cast<double>(na + nb);
}

}  // namespace phantoms
