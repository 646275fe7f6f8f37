#include "ctpipe/bonestrip.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace ctpipe {

namespace {

// Offsets for 6- and 26-connectivity.
std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
    if (connectivity == 6) {
        return {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    }
    if (connectivity != 26) throw std::invalid_argument("connectivity must be 6 or 26");
    std::vector<std::array<int, 3>> out;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
                if (dx || dy || dz) out.push_back({dx, dy, dz});
    return out;
}

}  // namespace

LabelVolume threshold_mask(const Volume3& vol, double low, double high) {
    vol.validate();
    if (!(low < high)) throw std::invalid_argument("threshold_mask: low must be < high");
    LabelVolume mask;
    static_cast<GridGeom&>(mask) = vol;
    mask.data.resize(vol.data.size());
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
        const double v = vol.data[i];
        mask.data[i] = (v >= low && v <= high) ? 1 : 0;
    }
    return mask;
}

LabelVolume largest_component(const LabelVolume& mask, int connectivity, bool* empty_warning) {
    mask.validate();
    const auto offsets = neighbor_offsets(connectivity);
    const auto& dims = mask.dims;
    const std::size_t n = mask.voxel_count();

    std::vector<std::int32_t> comp(n, 0);
    std::vector<std::size_t> stack;
    std::int32_t next_id = 0;
    std::size_t best_size = 0;
    std::int32_t best_id = 0;
    std::size_t best_min_index = n;

    for (std::size_t seed = 0; seed < n; ++seed) {
        if (mask.data[seed] == 0 || comp[seed] != 0) continue;
        ++next_id;
        std::size_t size = 0;
        const std::size_t min_index = seed;  // scan order makes the seed the minimum linear index
        comp[seed] = next_id;
        stack.assign(1, seed);
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            ++size;
            const int k = static_cast<int>(cur / (static_cast<std::size_t>(dims[0]) * dims[1]));
            const std::size_t rem = cur % (static_cast<std::size_t>(dims[0]) * dims[1]);
            const int j = static_cast<int>(rem / static_cast<std::size_t>(dims[0]));
            const int i = static_cast<int>(rem % static_cast<std::size_t>(dims[0]));
            for (const auto& o : offsets) {
                const int ni = i + o[0], nj = j + o[1], nk = k + o[2];
                if (ni < 0 || nj < 0 || nk < 0 || ni >= dims[0] || nj >= dims[1] || nk >= dims[2]) continue;
                const std::size_t ni_flat = mask.index(ni, nj, nk);
                if (mask.data[ni_flat] != 0 && comp[ni_flat] == 0) {
                    comp[ni_flat] = next_id;
                    stack.push_back(ni_flat);
                }
            }
        }
        if (size > best_size || (size == best_size && min_index < best_min_index)) {
            best_size = size;
            best_id = next_id;
            best_min_index = min_index;
        }
    }

    LabelVolume out;
    static_cast<GridGeom&>(out) = mask;
    out.data.assign(n, 0);
    if (best_id == 0) {
        if (empty_warning != nullptr) *empty_warning = true;
        return out;
    }
    if (empty_warning != nullptr) *empty_warning = false;
    for (std::size_t i = 0; i < n; ++i) out.data[i] = (comp[i] == best_id) ? 1 : 0;
    return out;
}

LabelVolume fill_holes(const LabelVolume& mask, int connectivity) {
    mask.validate();
    const auto offsets = neighbor_offsets(connectivity);
    const auto& dims = mask.dims;
    const std::size_t n = mask.voxel_count();

    std::vector<std::uint8_t> outside(n, 0);
    std::vector<std::size_t> stack;

    auto try_seed = [&](int i, int j, int k) {
        const std::size_t f = mask.index(i, j, k);
        if (mask.data[f] == 0 && !outside[f]) {
            outside[f] = 1;
            stack.push_back(f);
        }
    };
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j) {
            try_seed(0, j, k);
            try_seed(dims[0] - 1, j, k);
        }
    for (int k = 0; k < dims[2]; ++k)
        for (int i = 0; i < dims[0]; ++i) {
            try_seed(i, 0, k);
            try_seed(i, dims[1] - 1, k);
        }
    for (int j = 0; j < dims[1]; ++j)
        for (int i = 0; i < dims[0]; ++i) {
            try_seed(i, j, 0);
            try_seed(i, j, dims[2] - 1);
        }

    while (!stack.empty()) {
        const std::size_t cur = stack.back();
        stack.pop_back();
        const int k = static_cast<int>(cur / (static_cast<std::size_t>(dims[0]) * dims[1]));
        const std::size_t rem = cur % (static_cast<std::size_t>(dims[0]) * dims[1]);
        const int j = static_cast<int>(rem / static_cast<std::size_t>(dims[0]));
        const int i = static_cast<int>(rem % static_cast<std::size_t>(dims[0]));
        for (const auto& o : offsets) {
            const int ni = i + o[0], nj = j + o[1], nk = k + o[2];
            if (ni < 0 || nj < 0 || nk < 0 || ni >= dims[0] || nj >= dims[1] || nk >= dims[2]) continue;
            const std::size_t f = mask.index(ni, nj, nk);
            if (mask.data[f] == 0 && !outside[f]) {
                outside[f] = 1;
                stack.push_back(f);
            }
        }
    }

    LabelVolume out;
    static_cast<GridGeom&>(out) = mask;
    out.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.data[i] = (mask.data[i] != 0 || !outside[i]) ? 1 : 0;
    }
    return out;
}

StripResult strip(const Volume3& vol, const StripParams& params) {
    vol.validate();
    if (!(params.tissue_low_hu < params.tissue_high_hu)) {
        throw std::invalid_argument("strip: tissue_low_hu must be < tissue_high_hu");
    }

    StripResult res;
    LabelVolume mask = threshold_mask(vol, params.tissue_low_hu, params.tissue_high_hu);
    mask = largest_component(mask, 26, &res.empty_component_warning);
    mask = fill_holes(mask, params.fill_connectivity);

    if (params.mask_smooth_sigma_mm > 0.0) {
        Volume3 soft;
        static_cast<GridGeom&>(soft) = mask;
        soft.data.resize(mask.data.size());
        for (std::size_t i = 0; i < mask.data.size(); ++i) soft.data[i] = mask.data[i] ? 1.0f : 0.0f;
        soft = gaussian_smooth(soft, Vec3::Constant(params.mask_smooth_sigma_mm));
        for (std::size_t i = 0; i < mask.data.size(); ++i) {
            mask.data[i] = (soft.data[i] >= params.mask_rebinarize_level) ? 1 : 0;
        }
    }

    bool any = false;
    for (const auto v : mask.data) {
        if (v != 0) {
            any = true;
            break;
        }
    }
    if (!any) throw std::runtime_error("strip: empty mask (is the input HU-calibrated?)");

    res.stripped = vol;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (mask.data[i] == 0) res.stripped.data[i] = -1024.0f;
    }
    res.mask = std::move(mask);
    return res;
}

}  // namespace ctpipe
