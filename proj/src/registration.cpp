#include "ctpipe/registration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "ctpipe/nifti.hpp"
#include "ctpipe/quantify.hpp"

namespace ctpipe {

Metric metric_from_string(const std::string& s) {
    if (s == "msd") return Metric::msd;
    if (s == "ncc") return Metric::ncc;
    if (s == "mi" || s == "mutual-information") return Metric::mi;
    if (s == "normalized-cross-correlation") return Metric::ncc;
    throw std::invalid_argument("unknown metric '" + s + "' (expected msd, ncc or mi)");
}

std::string to_string(Metric m) {
    switch (m) {
        case Metric::msd: return "msd";
        case Metric::ncc: return "ncc";
        case Metric::mi: return "mi";
    }
    return "?";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double finite_min(const std::vector<float>& d) {
    double m = kInf;
    for (const float v : d)
        if (std::isfinite(v)) m = std::min(m, static_cast<double>(v));
    return m;
}
double finite_max(const std::vector<float>& d) {
    double m = -kInf;
    for (const float v : d)
        if (std::isfinite(v)) m = std::max(m, static_cast<double>(v));
    return m;
}

// Dissimilarity between a fixed volume and a moving volume pulled through an
// affine map (fixed world -> moving world). Lower is better for every metric
// (msd, 1-ncc, -mi). Poses with under 1% overlap evaluate to +inf.
class MetricEval {
public:
    MetricEval(const Volume3& fixed, const Volume3& moving, Metric kind, int bins = 32)
        : fixed_(fixed), moving_(moving), kind_(kind), bins_(bins),
          sampler_(moving, {Interp::trilinear, OobPolicy::constant, 0.0f}) {
        fixed_min_ = finite_min(fixed.data);
        moving_min_ = finite_min(moving.data);
        const double fr = finite_max(fixed.data) - fixed_min_;
        const double mr = finite_max(moving.data) - moving_min_;
        fixed_scale_ = fr > 0.0 ? bins_ / fr : 0.0;
        moving_scale_ = mr > 0.0 ? bins_ / mr : 0.0;
    }

    double eval(const Mat4& pull) const {
        const Mat3 L = pull.block<3, 3>(0, 0) * fixed_.linear();
        const Vec3 o = pull.block<3, 3>(0, 0) * fixed_.origin() + pull.block<3, 1>(0, 3);

        const std::size_t total = fixed_.voxel_count();
        std::size_t count = 0;
        double sum_f = 0.0, sum_m = 0.0, sum_ff = 0.0, sum_mm = 0.0, sum_fm = 0.0, sum_d2 = 0.0;
        std::vector<int> joint;
        if (kind_ == Metric::mi) joint.assign(static_cast<std::size_t>(bins_) * bins_, 0);

        std::size_t flat = 0;
        for (int k = 0; k < fixed_.dims[2]; ++k) {
            for (int j = 0; j < fixed_.dims[1]; ++j) {
                Vec3 w = L * Vec3(0.0, j, k) + o;
                for (int i = 0; i < fixed_.dims[0]; ++i, ++flat, w += L.col(0)) {
                    bool ib;
                    const double m = sampler_.at_world(w, ib);
                    if (!ib) continue;
                    const double f = fixed_.data[flat];
                    ++count;
                    switch (kind_) {
                        case Metric::msd: {
                            const double d = f - m;
                            sum_d2 += d * d;
                            break;
                        }
                        case Metric::ncc:
                            sum_f += f;
                            sum_m += m;
                            sum_ff += f * f;
                            sum_mm += m * m;
                            sum_fm += f * m;
                            break;
                        case Metric::mi: {
                            int bf = static_cast<int>((f - fixed_min_) * fixed_scale_);
                            int bm = static_cast<int>((m - moving_min_) * moving_scale_);
                            bf = std::clamp(bf, 0, bins_ - 1);
                            bm = std::clamp(bm, 0, bins_ - 1);
                            ++joint[static_cast<std::size_t>(bf) * bins_ + bm];
                            break;
                        }
                    }
                }
            }
        }

        if (count < std::max<std::size_t>(1, total / 100)) return kInf;
        const double n = static_cast<double>(count);
        switch (kind_) {
            case Metric::msd: return sum_d2 / n;
            case Metric::ncc: {
                const double var_f = sum_ff - sum_f * sum_f / n;
                const double var_m = sum_mm - sum_m * sum_m / n;
                if (var_f <= 0.0 || var_m <= 0.0) return 1.0;
                const double cov = sum_fm - sum_f * sum_m / n;
                return 1.0 - cov / std::sqrt(var_f * var_m);
            }
            case Metric::mi: {
                std::vector<double> pf(static_cast<std::size_t>(bins_), 0.0), pm(static_cast<std::size_t>(bins_), 0.0);
                for (int a = 0; a < bins_; ++a)
                    for (int b = 0; b < bins_; ++b) {
                        const double p = joint[static_cast<std::size_t>(a) * bins_ + b] / n;
                        pf[static_cast<std::size_t>(a)] += p;
                        pm[static_cast<std::size_t>(b)] += p;
                    }
                double mi = 0.0;
                for (int a = 0; a < bins_; ++a)
                    for (int b = 0; b < bins_; ++b) {
                        const double p = joint[static_cast<std::size_t>(a) * bins_ + b] / n;
                        if (p > 0.0) mi += p * std::log(p / (pf[static_cast<std::size_t>(a)] * pm[static_cast<std::size_t>(b)]));
                    }
                return -mi;
            }
        }
        return kInf;
    }

private:
    const Volume3& fixed_;
    const Volume3& moving_;
    Metric kind_;
    int bins_;
    Sampler sampler_;
    double fixed_min_ = 0.0, fixed_scale_ = 0.0;
    double moving_min_ = 0.0, moving_scale_ = 0.0;
};

// T(x) = C + R(theta) * S * H * (x - C) + t, rotations intrinsic ZYX.
struct AffineParams {
    Vec3 t = Vec3::Zero();
    Vec3 rot = Vec3::Zero();          // (rz, ry, rx) applied as Rz*Ry*Rx
    Vec3 scale = Vec3::Ones();
    Vec3 shear = Vec3::Zero();        // hxy, hxz, hyz

    Mat4 matrix(const Vec3& center) const {
        const double cz = std::cos(rot[0]), sz = std::sin(rot[0]);
        const double cy = std::cos(rot[1]), sy = std::sin(rot[1]);
        const double cx = std::cos(rot[2]), sx = std::sin(rot[2]);
        Mat3 Rz, Ry, Rx;
        Rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
        Ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
        Rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
        Mat3 H = Mat3::Identity();
        H(0, 1) = shear[0];
        H(0, 2) = shear[1];
        H(1, 2) = shear[2];
        const Mat3 M = Rz * Ry * Rx * scale.asDiagonal() * H;
        Mat4 out = Mat4::Identity();
        out.block<3, 3>(0, 0) = M;
        out.block<3, 1>(0, 3) = center - M * center + t;
        return out;
    }
};

Vec3 intensity_centroid(const Volume3& v) {
    const double lo = finite_min(v.data);
    double wsum = 0.0;
    Vec3 acc = Vec3::Zero();
    const Mat3 lin = v.linear();
    const Vec3 orig = v.origin();
    std::size_t flat = 0;
    for (int k = 0; k < v.dims[2]; ++k)
        for (int j = 0; j < v.dims[1]; ++j)
            for (int i = 0; i < v.dims[0]; ++i, ++flat) {
                const double w = static_cast<double>(v.data[flat]) - lo;
                if (w <= 0.0) continue;
                acc += w * (lin * Vec3(i, j, k) + orig);
                wsum += w;
            }
    if (wsum <= 0.0) return orig + lin * Vec3((v.dims[0] - 1) / 2.0, (v.dims[1] - 1) / 2.0, (v.dims[2] - 1) / 2.0);
    return acc / wsum;
}

Vec3 world_center(const GridGeom& g) {
    return g.linear() * Vec3((g.dims[0] - 1) / 2.0, (g.dims[1] - 1) / 2.0, (g.dims[2] - 1) / 2.0) + g.origin();
}

struct ParamSlot {
    double* value;
    int cls;  // 0 translation, 1 rotation, 2 scale, 3 shear
};

}  // namespace

AffineTransform affine_register(const Volume3& moving, const Volume3& fixed, Metric metric, int dof) {
    if (dof != 6 && dof != 9 && dof != 12) throw std::invalid_argument("affine_register: dof must be 6, 9 or 12");
    moving.validate();
    fixed.validate();

    const auto fpyr = build_pyramid(fixed, 3);
    const auto mpyr = build_pyramid(moving, 3);
    const int levels = static_cast<int>(std::min(fpyr.size(), mpyr.size()));

    const Vec3 center = world_center(fixed);
    AffineParams params;

    // Center-of-mass pre-shift, kept only if it beats the identity start.
    {
        const Vec3 t_com = intensity_centroid(moving) - intensity_centroid(fixed);
        const MetricEval eval(fpyr[static_cast<std::size_t>(levels - 1)], mpyr[static_cast<std::size_t>(levels - 1)],
                              metric);
        AffineParams shifted;
        shifted.t = t_com;
        const double m_id = eval.eval(params.matrix(center));
        const double m_com = eval.eval(shifted.matrix(center));
        if (m_com < m_id) params = shifted;
        if (!std::isfinite(std::min(m_id, m_com))) {
            throw std::runtime_error(
                "affine_register: volumes do not overlap (under 1% of fixed voxels) even after the automatic "
                "center-of-mass pre-shift");
        }
    }

    const int n_params = dof;
    ParamSlot slots[12] = {
        {&params.t[0], 0},     {&params.t[1], 0},     {&params.t[2], 0},
        {&params.rot[0], 1},   {&params.rot[1], 1},   {&params.rot[2], 1},
        {&params.scale[0], 2}, {&params.scale[1], 2}, {&params.scale[2], 2},
        {&params.shear[0], 3}, {&params.shear[1], 3}, {&params.shear[2], 3},
    };
    const double init_step[4] = {5.0, 0.1, 0.05, 0.05};
    const double stop_step[4] = {0.01, 1e-4, 1e-4, 1e-4};
    const int max_cycles = 100;

    for (int level = levels - 1; level >= 0; --level) {
        const MetricEval eval(fpyr[static_cast<std::size_t>(level)], mpyr[static_cast<std::size_t>(level)], metric);
        double current = eval.eval(params.matrix(center));

        double step[12];
        for (int p = 0; p < n_params; ++p) step[p] = init_step[slots[p].cls];

        for (int cycle = 0; cycle < max_cycles; ++cycle) {
            bool all_converged = true;
            for (int p = 0; p < n_params; ++p) {
                if (step[p] >= stop_step[slots[p].cls]) all_converged = false;
            }
            if (all_converged) break;

            for (int p = 0; p < n_params; ++p) {
                if (step[p] < stop_step[slots[p].cls]) continue;
                double& value = *slots[p].value;
                const double saved = value;
                bool improved = false;
                for (const double sign : {+1.0, -1.0}) {
                    double candidate = saved + sign * step[p];
                    if (slots[p].cls == 2) candidate = std::max(candidate, 0.05);  // keep scales positive
                    value = candidate;
                    const double m = eval.eval(params.matrix(center));
                    if (m < current - 1e-12 * std::max(1.0, std::abs(current))) {
                        current = m;
                        improved = true;
                        break;
                    }
                    value = saved;
                }
                step[p] *= improved ? 1.2 : 0.5;
            }
        }
    }

    // The optimizer works with the pull map (fixed -> moving); report the
    // moving -> fixed transform.
    AffineTransform out;
    out.matrix = params.matrix(center).inverse();
    out.matrix.row(3) << 0, 0, 0, 1;
    out.source_space = "moving";
    out.target_space = "fixed";
    return out;
}

// ---------------------------------------------------------------------------
// Velocity-field machinery

namespace {

VectorField smooth_field(const VectorField& f, double sigma_mm) {
    if (sigma_mm <= 0.0) return f;
    VectorField out = f;
    const std::size_t n = f.voxel_count();
    Volume3 comp;
    static_cast<GridGeom&>(comp) = f;
    comp.data.resize(n);
    for (int c = 0; c < 3; ++c) {
        std::copy(f.data.begin() + static_cast<std::ptrdiff_t>(c * n),
                  f.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * n), comp.data.begin());
        const Volume3 sm = gaussian_smooth(comp, Vec3::Constant(sigma_mm));
        std::copy(sm.data.begin(), sm.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * n));
    }
    return out;
}

VectorField resample_field(const VectorField& f, const GridGeom& target) {
    VectorField out = make_field(target);
    const FieldSampler s(f);
    const Mat3 lin = target.linear();
    const Vec3 orig = target.origin();
    const std::size_t n = out.voxel_count();
    std::size_t flat = 0;
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j) {
            Vec3 w = lin * Vec3(0.0, j, k) + orig;
            for (int i = 0; i < target.dims[0]; ++i, ++flat, w += lin.col(0)) {
                const Vec3 v = s.at_world(w);
                out.data[flat] = static_cast<float>(v[0]);
                out.data[n + flat] = static_cast<float>(v[1]);
                out.data[2 * n + flat] = static_cast<float>(v[2]);
            }
        }
    return out;
}

// One squaring: out(x) = u(x + u(x)) + u(x).
VectorField self_compose(const VectorField& u) {
    VectorField out = u;
    const FieldSampler s(u);
    const Mat3 lin = u.linear();
    const Vec3 orig = u.origin();
    const std::size_t n = u.voxel_count();
    std::size_t flat = 0;
    for (int k = 0; k < u.dims[2]; ++k)
        for (int j = 0; j < u.dims[1]; ++j) {
            Vec3 w = lin * Vec3(0.0, j, k) + orig;
            for (int i = 0; i < u.dims[0]; ++i, ++flat, w += lin.col(0)) {
                const Vec3 a(u.data[flat], u.data[n + flat], u.data[2 * n + flat]);
                const Vec3 b = s.at_world(w + a);
                out.data[flat] = static_cast<float>(a[0] + b[0]);
                out.data[n + flat] = static_cast<float>(a[1] + b[1]);
                out.data[2 * n + flat] = static_cast<float>(a[2] + b[2]);
            }
        }
    return out;
}

}  // namespace

void DiffeoParams::validate() const {
    if (levels < 1) throw std::invalid_argument("diffeo: levels must be >= 1");
    if (static_cast<int>(iters_per_level.size()) != levels) {
        throw std::invalid_argument("diffeo: iters_per_level must have one entry per level");
    }
    for (const int it : iters_per_level)
        if (it < 0) throw std::invalid_argument("diffeo: negative iteration count");
    if (sigma_fluid_mm < 0 || sigma_diffusion_mm < 0 || step_scale_mm < 0 || converge_tol < 0 || ss_min_steps < 0) {
        throw std::invalid_argument("diffeo: parameters must be non-negative");
    }
}

VectorField exp_velocity(const StationaryVelocityField& v, int direction, int min_steps, int* steps_out) {
    if (direction != 1 && direction != -1) throw std::invalid_argument("exp_velocity: direction must be +1 or -1");
    const double vmax = v.max_norm();
    const double min_sp = v.spacing.minCoeff();
    int n_steps = std::max(0, min_steps);
    if (vmax > 0.0) {
        const double needed = std::log2(vmax / (0.4 * min_sp));
        n_steps = std::max(n_steps, static_cast<int>(std::ceil(needed)));
    }
    n_steps = std::clamp(n_steps, 0, 30);
    if (steps_out != nullptr) *steps_out = n_steps;

    VectorField u = v;
    const double scale = static_cast<double>(direction) / std::pow(2.0, n_steps);
    for (auto& x : u.data) x = static_cast<float>(x * scale);
    for (int s = 0; s < n_steps; ++s) u = self_compose(u);
    return u;
}

namespace {

// World-frame gradient of a scalar volume: central differences in voxel space
// pushed through the inverse voxel->world linear map.
VectorField world_gradient(const Volume3& vol) {
    VectorField g = make_field(vol);
    const Mat3 ainv_t = vol.linear().inverse().transpose();
    const auto& d = vol.dims;
    const std::size_t n = vol.voxel_count();
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                Vec3 gv;
                const int ip = std::min(i + 1, d[0] - 1), im = std::max(i - 1, 0);
                const int jp = std::min(j + 1, d[1] - 1), jm = std::max(j - 1, 0);
                const int kp = std::min(k + 1, d[2] - 1), km = std::max(k - 1, 0);
                gv[0] = (vol.at(ip, j, k) - vol.at(im, j, k)) / std::max(1, ip - im);
                gv[1] = (vol.at(i, jp, k) - vol.at(i, jm, k)) / std::max(1, jp - jm);
                gv[2] = (vol.at(i, j, kp) - vol.at(i, j, km)) / std::max(1, kp - km);
                const Vec3 gw = ainv_t * gv;
                const std::size_t flat = vol.index(i, j, k);
                g.data[flat] = static_cast<float>(gw[0]);
                g.data[n + flat] = static_cast<float>(gw[1]);
                g.data[2 * n + flat] = static_cast<float>(gw[2]);
            }
    return g;
}

struct DemonsLevelResult {
    VectorField velocity;
    bool saw_overlap = false;
};

// Runs the demons iterations for one pyramid level, updating `v` in place.
void run_demons_level(const Volume3& fixed, const Volume3& moving, VectorField& v, int iters,
                      const DiffeoParams& params) {
    const double min_sp = fixed.spacing.minCoeff();
    const double sigma_x = min_sp;
    const double step_cap = params.step_scale_mm > 0.0 ? params.step_scale_mm : 0.9 * min_sp;
    const VectorField grad_m = world_gradient(moving);
    const Sampler m_sampler(moving, {Interp::trilinear, OobPolicy::constant, 0.0f});
    const FieldSampler g_sampler(grad_m);

    const Mat3 lin = fixed.linear();
    const Vec3 orig = fixed.origin();
    const std::size_t n = fixed.voxel_count();
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(std::max(0, iters)));

    VectorField update = make_field(fixed);

    for (int iter = 0; iter < iters; ++iter) {
        const VectorField u_plus = exp_velocity(v, +1, params.ss_min_steps);

        double sum_d2 = 0.0;
        std::size_t count = 0;
        std::size_t flat = 0;
        for (int k = 0; k < fixed.dims[2]; ++k)
            for (int j = 0; j < fixed.dims[1]; ++j) {
                Vec3 w = lin * Vec3(0.0, j, k) + orig;
                for (int i = 0; i < fixed.dims[0]; ++i, ++flat, w += lin.col(0)) {
                    const Vec3 disp(u_plus.data[flat], u_plus.data[n + flat], u_plus.data[2 * n + flat]);
                    const Vec3 phi = w + disp;
                    bool ib;
                    const double m = m_sampler.at_world(phi, ib);
                    Vec3 force = Vec3::Zero();
                    if (ib) {
                        const double f = fixed.data[flat];
                        const double diff = f - m;
                        sum_d2 += diff * diff;
                        ++count;
                        const Vec3 g = g_sampler.at_world(phi);
                        const double denom = g.squaredNorm() + diff * diff / (sigma_x * sigma_x);
                        if (denom > 1e-12) {
                            force = (diff / denom) * g;
                            const double mag = force.norm();
                            if (mag > step_cap) force *= step_cap / mag;
                        }
                    }
                    update.data[flat] = static_cast<float>(force[0]);
                    update.data[n + flat] = static_cast<float>(force[1]);
                    update.data[2 * n + flat] = static_cast<float>(force[2]);
                }
            }

        if (count == 0) throw std::runtime_error("diffeo_register: empty overlap between the images");
        const double msd = sum_d2 / static_cast<double>(count);
        history.push_back(msd);

        const VectorField smoothed_update = smooth_field(update, params.sigma_fluid_mm);
        for (std::size_t x = 0; x < v.data.size(); ++x) v.data[x] += smoothed_update.data[x];
        v = smooth_field(v, params.sigma_diffusion_mm);

        if (history.size() > 10) {
            const double before = history[history.size() - 11];
            if (before - msd < params.converge_tol * std::max(before, 1e-12)) break;
        }
    }
}

struct InvariantReport {
    double max_inverse_error = 0.0;
    double min_jacobian = kInf;
    bool ok(double min_spacing) const { return max_inverse_error < 0.5 * min_spacing && min_jacobian > 0.0; }
};

InvariantReport check_diffeo(const VectorField& u_plus, const VectorField& u_minus) {
    InvariantReport rep;
    const FieldSampler inv_sampler(u_minus);
    const Mat3 lin = u_plus.linear();
    const Vec3 orig = u_plus.origin();
    const auto& d = u_plus.dims;
    const std::size_t n = u_plus.voxel_count();
    for (int k = 1; k + 1 < d[2]; ++k)
        for (int j = 1; j + 1 < d[1]; ++j)
            for (int i = 1; i + 1 < d[0]; ++i) {
                const std::size_t flat = u_plus.index(i, j, k);
                const Vec3 w = lin * Vec3(i, j, k) + orig;
                const Vec3 a(u_plus.data[flat], u_plus.data[n + flat], u_plus.data[2 * n + flat]);
                const Vec3 err = a + inv_sampler.at_world(w + a);
                rep.max_inverse_error = std::max(rep.max_inverse_error, err.norm());
            }
    const Volume3 jac = jacobian_determinant(u_plus);
    for (int k = 1; k + 1 < d[2]; ++k)
        for (int j = 1; j + 1 < d[1]; ++j)
            for (int i = 1; i + 1 < d[0]; ++i)
                rep.min_jacobian = std::min(rep.min_jacobian, static_cast<double>(jac.at(i, j, k)));
    return rep;
}

}  // namespace

Diffeomorphism diffeo_register(const Volume3& moving, const Volume3& fixed, const AffineTransform& init,
                               const DiffeoParams& params) {
    params.validate();
    moving.validate();
    fixed.validate();
    init.validate();

    // Resample the moving image through the init affine onto the fixed grid.
    TransformChain chain;
    chain.add_affine(init.inverse());
    const Volume3 moving_on_fixed =
        apply_transform(moving, chain, fixed, {Interp::trilinear, OobPolicy::constant, 0.0f});

    auto fpyr = build_pyramid(fixed, params.levels);
    auto mpyr = build_pyramid(moving_on_fixed, params.levels);
    const int levels = static_cast<int>(std::min(fpyr.size(), mpyr.size()));

    DiffeoParams level_params = params;
    VectorField v = make_field(fpyr[static_cast<std::size_t>(levels - 1)]);
    for (int step = 0; step < levels; ++step) {
        const int level = levels - 1 - step;  // coarse to fine
        const Volume3& f = fpyr[static_cast<std::size_t>(level)];
        const Volume3& m = mpyr[static_cast<std::size_t>(level)];
        if (!v.same_grid(f)) v = resample_field(v, f);
        run_demons_level(f, m, v, params.iters_per_level[static_cast<std::size_t>(step)], level_params);
    }

    Diffeomorphism out;
    out.forward = exp_velocity(v, +1, params.ss_min_steps, &out.exp_steps);
    out.inverse = exp_velocity(v, -1, params.ss_min_steps);
    InvariantReport rep = check_diffeo(out.forward, out.inverse);
    if (!rep.ok(fixed.spacing.minCoeff())) {
        // One retry with stronger velocity regularization before giving up.
        level_params.sigma_diffusion_mm = params.sigma_diffusion_mm * 1.5;
        v = smooth_field(v, level_params.sigma_diffusion_mm);
        run_demons_level(fpyr[0], mpyr[0], v, params.iters_per_level.back(), level_params);
        out.forward = exp_velocity(v, +1, params.ss_min_steps, &out.exp_steps);
        out.inverse = exp_velocity(v, -1, params.ss_min_steps);
        rep = check_diffeo(out.forward, out.inverse);
        if (!rep.ok(fixed.spacing.minCoeff())) {
            throw std::runtime_error("diffeo_register: field not diffeomorphic (inverse error " +
                                     std::to_string(rep.max_inverse_error) + " mm, min Jacobian " +
                                     std::to_string(rep.min_jacobian) + ")");
        }
    }
    out.velocity = std::move(v);
    return out;
}

// ---------------------------------------------------------------------------
// Transform chains

void TransformChain::check_spaces(const std::string& from, const std::string& to) {
    if (!chain_to_.empty() && !from.empty() && chain_to_ != from) {
        throw std::runtime_error("transform chain space mismatch: '" + chain_to_ + "' vs '" + from + "'");
    }
    if (chain_from_.empty()) chain_from_ = from;
    if (!to.empty()) chain_to_ = to;
}

void TransformChain::add_affine(const AffineTransform& a) {
    a.validate();
    check_spaces(a.source_space, a.target_space);
    AffineStep s;
    s.lin = a.matrix.block<3, 3>(0, 0);
    s.off = a.matrix.block<3, 1>(0, 3);
    steps_.push_back(s);
}

void TransformChain::add_displacement(const VectorField& u, const std::string& from_space,
                                      const std::string& to_space) {
    check_spaces(from_space, to_space);
    steps_.push_back(FieldStep{&u});
}

Vec3 TransformChain::apply(const Vec3& x) const {
    Vec3 p = x;
    for (const auto& step : steps_) {
        if (std::holds_alternative<AffineStep>(step)) {
            const auto& a = std::get<AffineStep>(step);
            p = a.lin * p + a.off;
        } else {
            const auto& f = std::get<FieldStep>(step);
            p += FieldSampler(*f.field).at_world(p);
        }
    }
    return p;
}

Volume3 apply_transform(const Volume3& vol, const TransformChain& chain, const GridGeom& target,
                        InterpolationMode mode) {
    target.validate_geometry();
    vol.validate();
    Volume3 out;
    static_cast<GridGeom&>(out) = target;
    out.data.resize(out.voxel_count());

    const Sampler s(vol, mode);
    const Mat3 lin = target.linear();
    const Vec3 orig = target.origin();
    std::size_t flat = 0;
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j) {
            Vec3 w = lin * Vec3(0.0, j, k) + orig;
            for (int i = 0; i < target.dims[0]; ++i, ++flat, w += lin.col(0)) {
                bool ib;
                out.data[flat] = s.at_world(chain.apply(w), ib);
            }
        }
    return out;
}

LabelVolume apply_transform_labels(const LabelVolume& labels, const TransformChain& chain, const GridGeom& target) {
    target.validate_geometry();
    labels.validate();
    LabelVolume out;
    static_cast<GridGeom&>(out) = target;
    out.data.resize(out.voxel_count());
    out.label_table = labels.label_table;

    const LabelSampler s(labels, 0);
    const Mat3 lin = target.linear();
    const Vec3 orig = target.origin();
    std::size_t flat = 0;
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j) {
            Vec3 w = lin * Vec3(0.0, j, k) + orig;
            for (int i = 0; i < target.dims[0]; ++i, ++flat, w += lin.col(0)) {
                out.data[flat] = s.at_world(chain.apply(w));
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk formats

void write_affine(const AffineTransform& a, const std::string& path) {
    a.validate();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    const std::string src = a.source_space.empty() ? "source" : a.source_space;
    const std::string dst = a.target_space.empty() ? "target" : a.target_space;
    out << "# affine " << src << " -> " << dst << "\n";
    char buf[64];
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", a.matrix(r, c));
            out << buf << (c == 3 ? "\n" : " ");
        }
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

AffineTransform read_affine(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    AffineTransform a;
    std::string line;
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream hs(line.substr(1));
            std::string word, src, arrow, dst;
            hs >> word >> src >> arrow >> dst;
            if (word == "affine" && arrow == "->") {
                a.source_space = src;
                a.target_space = dst;
            }
            continue;
        }
        std::istringstream ls(line);
        double v;
        while (ls >> v) values.push_back(v);
    }
    if (values.size() != 16) {
        throw std::runtime_error("'" + path + "' does not contain a 4x4 matrix (got " +
                                 std::to_string(values.size()) + " numbers)");
    }
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) a.matrix(r, c) = values[static_cast<std::size_t>(r * 4 + c)];
    a.validate();
    return a;
}

void write_field(const VectorField& f, const std::string& path, const std::string& grid_tag,
                 const std::string& direction, int steps) {
    write_nifti_field(f, path);
    std::ofstream out(path + ".manifest");
    if (!out) throw std::runtime_error("cannot open '" + path + ".manifest' for writing");
    out << "grid: " << grid_tag << "\n";
    out << "direction: " << direction << "\n";
    out << "steps: " << steps << "\n";
}

VectorField read_field(const std::string& path) { return read_nifti_field(path); }

}  // namespace ctpipe
