#include "ctpipe/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ctpipe {

void PreprocessParams::validate() const {
    if (!(target_spacing > 0.0)) throw std::invalid_argument("preprocess: target_spacing must be positive");
    if (!(bias_sigma_mm > 0.0)) throw std::invalid_argument("preprocess: bias_sigma_mm must be positive");
    if (bias_max_iters < 1) throw std::invalid_argument("preprocess: bias_max_iters must be >= 1");
    if (!(bias_tol > 0.0)) throw std::invalid_argument("preprocess: bias_tol must be positive");
}

Volume3 reorient_canonical(const Volume3& vol) {
    vol.validate();
    const Mat3 lin = vol.linear();
    if (std::abs(lin.determinant()) < 1e-12) throw std::invalid_argument("reorient: degenerate affine");

    // Assign each voxel axis to its dominant world axis, greedily by
    // magnitude so near-oblique volumes still get a full permutation.
    Mat3 mag = lin.cwiseAbs();
    int world_of_voxel[3] = {-1, -1, -1};
    bool world_used[3] = {false, false, false};
    for (int pick = 0; pick < 3; ++pick) {
        double best = -1.0;
        int bw = 0, bv = 0;
        for (int w = 0; w < 3; ++w) {
            if (world_used[w]) continue;
            for (int v = 0; v < 3; ++v) {
                if (world_of_voxel[v] != -1) continue;
                if (mag(w, v) > best) {
                    best = mag(w, v);
                    bw = w;
                    bv = v;
                }
            }
        }
        world_of_voxel[bv] = bw;
        world_used[bw] = true;
    }
    bool flip[3];
    for (int v = 0; v < 3; ++v) flip[v] = lin(world_of_voxel[v], v) < 0.0;

    bool identity = true;
    for (int v = 0; v < 3; ++v) {
        if (world_of_voxel[v] != v || flip[v]) identity = false;
    }
    if (identity) return vol;

    Volume3 out;
    for (int v = 0; v < 3; ++v) out.dims[world_of_voxel[v]] = vol.dims[v];
    out.data.resize(vol.voxel_count());

    // New affine: permute/sign the columns, shifting the origin across each
    // flipped axis so world positions are untouched.
    Mat4 A = Mat4::Identity();
    Vec3 origin = vol.origin();
    for (int v = 0; v < 3; ++v) {
        Vec3 col = lin.col(v);
        if (flip[v]) {
            origin += col * static_cast<double>(vol.dims[v] - 1);
            col = -col;
        }
        A.block<3, 1>(0, world_of_voxel[v]) = col;
    }
    A.block<3, 1>(0, 3) = origin;
    out.voxel_to_world = A;
    for (int a = 0; a < 3; ++a) out.spacing[a] = A.block<3, 1>(0, a).norm();

    int n[3];
    for (n[2] = 0; n[2] < out.dims[2]; ++n[2])
        for (n[1] = 0; n[1] < out.dims[1]; ++n[1])
            for (n[0] = 0; n[0] < out.dims[0]; ++n[0]) {
                int o[3];
                for (int v = 0; v < 3; ++v) {
                    const int pos = n[world_of_voxel[v]];
                    o[v] = flip[v] ? vol.dims[v] - 1 - pos : pos;
                }
                out.at(n[0], n[1], n[2]) = vol.at(o[0], o[1], o[2]);
            }
    return out;
}

Volume3 resample_isotropic(const Volume3& vol, double spacing_mm, float fill) {
    vol.validate();
    if (!(spacing_mm > 0.0)) throw std::invalid_argument("resample_isotropic: spacing must be positive");

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (int c = 0; c < 8; ++c) {
        const Vec3 idx((c & 1) ? vol.dims[0] - 1 : 0, (c & 2) ? vol.dims[1] - 1 : 0, (c & 4) ? vol.dims[2] - 1 : 0);
        const Vec3 w = vol.linear() * idx + vol.origin();
        lo = lo.cwiseMin(w);
        hi = hi.cwiseMax(w);
    }
    std::array<int, 3> dims;
    for (int a = 0; a < 3; ++a) {
        dims[a] = std::max(1, static_cast<int>(std::floor((hi[a] - lo[a]) / spacing_mm)) + 1);
    }
    const GridGeom target = make_grid(dims, Vec3::Constant(spacing_mm), lo);
    return resample(vol, target, {Interp::trilinear, OobPolicy::constant, fill});
}

BiasResult correct_bias(const Volume3& vol, const LabelVolume& mask, const PreprocessParams& params) {
    vol.validate();
    mask.validate();
    params.validate();
    if (vol.dims != mask.dims) throw std::invalid_argument("correct_bias: volume and mask grids differ");

    std::size_t mask_count = 0;
    double mask_min = std::numeric_limits<double>::infinity();
    double mask_sum = 0.0;
    for (std::size_t f = 0; f < vol.data.size(); ++f) {
        if (mask.data[f] == 0) continue;
        ++mask_count;
        mask_min = std::min(mask_min, static_cast<double>(vol.data[f]));
        mask_sum += vol.data[f];
    }
    if (mask_count == 0) throw std::runtime_error("correct_bias: empty mask");

    // Shift so the masked intensities are >= 1 and the log is safe; undone on
    // the way out.
    const double shift = mask_min < 1.0 ? 1.0 - mask_min : 0.0;
    const double input_mask_mean = mask_sum / static_cast<double>(mask_count) + shift;

    Volume3 log_masked, weight;
    static_cast<GridGeom&>(log_masked) = vol;
    static_cast<GridGeom&>(weight) = vol;
    log_masked.data.assign(vol.data.size(), 0.0f);
    weight.data.assign(vol.data.size(), 0.0f);
    for (std::size_t f = 0; f < vol.data.size(); ++f) {
        if (mask.data[f] == 0) continue;
        weight.data[f] = 1.0f;
        log_masked.data[f] = static_cast<float>(std::log(static_cast<double>(vol.data[f]) + shift));
    }

    const Vec3 sigma = Vec3::Constant(params.bias_sigma_mm);
    const Volume3 smooth_weight = gaussian_smooth(weight, sigma);

    std::vector<double> log_bias(vol.data.size(), 0.0);
    Volume3 current = log_masked;

    for (int iter = 0; iter < params.bias_max_iters; ++iter) {
        const Volume3 smooth_log = gaussian_smooth(current, sigma);

        // Normalized convolution: the smoothed log intensity where the mask
        // has support, demeaned over the mask so the bias stays DC-free.
        std::vector<double> smooth_part(vol.data.size(), 0.0);
        double mean = 0.0;
        for (std::size_t f = 0; f < vol.data.size(); ++f) {
            const double w = smooth_weight.data[f];
            smooth_part[f] = w > 1e-6 ? smooth_log.data[f] / w : 0.0;
            if (mask.data[f] != 0) mean += smooth_part[f];
        }
        mean /= static_cast<double>(mask_count);

        double delta = 0.0;
        for (std::size_t f = 0; f < vol.data.size(); ++f) {
            const double step = smooth_part[f] - mean;
            log_bias[f] += step;
            if (mask.data[f] != 0) delta = std::max(delta, std::abs(step));
            if (mask.data[f] != 0) {
                current.data[f] = static_cast<float>(log_masked.data[f] - log_bias[f]);
            }
        }
        if (delta < params.bias_tol) break;
    }

    BiasResult res;
    res.bias_field = vol;
    res.corrected = vol;
    double corrected_mask_sum = 0.0;
    for (std::size_t f = 0; f < vol.data.size(); ++f) {
        const double b = std::exp(log_bias[f]);
        res.bias_field.data[f] = static_cast<float>(b);
        const double c = (static_cast<double>(vol.data[f]) + shift) / b;
        res.corrected.data[f] = static_cast<float>(c);
        if (mask.data[f] != 0) corrected_mask_sum += c;
    }
    const double corrected_mean = corrected_mask_sum / static_cast<double>(mask_count);
    const double rescale = corrected_mean > 0.0 ? input_mask_mean / corrected_mean : 1.0;
    for (std::size_t f = 0; f < vol.data.size(); ++f) {
        res.corrected.data[f] = static_cast<float>(res.corrected.data[f] * rescale - shift);
    }
    return res;
}

PrealignResult prealign(const Volume3& vol, const Volume3& tmpl, const PreprocessParams& params) {
    params.validate();
    PrealignResult res;
    res.subject_to_template = affine_register(vol, tmpl, params.prealign_metric, 12);
    res.subject_to_template.source_space = "subject";
    res.subject_to_template.target_space = "template";

    TransformChain chain;
    chain.add_affine(res.subject_to_template.inverse());
    res.resampled = apply_transform(vol, chain, tmpl, {Interp::trilinear, OobPolicy::constant, -1024.0f});
    return res;
}

}  // namespace ctpipe
