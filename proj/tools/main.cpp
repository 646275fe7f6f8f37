// ctpipe - CT registration/segmentation/quantification pipeline CLI.
#include <CLI11.hpp>

#include <iostream>
#include <set>

#include "ctpipe/bonestrip.hpp"
#include "ctpipe/dicom.hpp"
#include "ctpipe/nifti.hpp"
#include "ctpipe/pipeline.hpp"
#include "ctpipe/preprocess.hpp"
#include "ctpipe/quantify.hpp"
#include "ctpipe/registration.hpp"
#include "ctpipe/segment.hpp"
#include "ctpipe/version.hpp"

using namespace ctpipe;

namespace {

std::set<std::string> comma_set(const std::string& csv) {
    std::set<std::string> out;
    std::string cur;
    for (const char c : csv) {
        if (c == ',') {
            if (!cur.empty()) out.insert(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.insert(cur);
    return out;
}

std::string sibling_with_suffix(const std::string& path, const std::string& suffix) {
    // pre.nii.gz + "_native" -> pre_native.nii.gz
    std::string stem = path;
    std::string ext;
    for (const std::string candidate : {".nii.gz", ".nii"}) {
        if (stem.size() > candidate.size() &&
            stem.compare(stem.size() - candidate.size(), candidate.size(), candidate) == 0) {
            ext = candidate;
            stem = stem.substr(0, stem.size() - candidate.size());
            break;
        }
    }
    return stem + suffix + (ext.empty() ? ".nii.gz" : ext);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CT pipeline: convert, preprocess, bone-strip, register, segment, quantify"};
    app.set_version_flag("--version", std::string("ctpipe ") + CTPIPE_VERSION);
    app.require_subcommand(1);

    int exit_code = 0;

    // convert
    {
        auto* cmd = app.add_subcommand("convert", "Assemble a DICOM series directory into a NIfTI volume");
        auto dir = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        cmd->add_option("dicom_dir", *dir, "Directory of DICOM slice files")->required();
        cmd->add_option("-o,--output", *out, "Output NIfTI path")->required();
        cmd->callback([dir, out]() { stages::convert(*dir, SubjectSpec::Kind::dicom_dir, *out); });
    }

    // preprocess
    {
        auto* cmd = app.add_subcommand("preprocess", "Reorient, resample, bias-correct and pre-align to a template");
        auto in = std::make_shared<std::string>();
        auto tpl = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto affine_out = std::make_shared<std::string>();
        auto native_out = std::make_shared<std::string>();
        auto bias_out = std::make_shared<std::string>();
        auto params = std::make_shared<PreprocessParams>();
        auto metric = std::make_shared<std::string>("mi");
        auto no_bias = std::make_shared<bool>(false);
        cmd->add_option("input", *in, "Input NIfTI volume")->required();
        cmd->add_option("--template", *tpl, "Template NIfTI volume")->required();
        cmd->add_option("-o,--output", *out, "Pre-aligned output (template grid)")->required();
        cmd->add_option("--affine-out", *affine_out, "Subject-to-template affine text file")->required();
        cmd->add_option("--native-out", *native_out, "Native-space preprocessed output");
        cmd->add_option("--bias-out", *bias_out, "Estimated bias field output");
        cmd->add_option("--target-spacing", params->target_spacing, "Isotropic spacing, mm");
        cmd->add_option("--bias-sigma", params->bias_sigma_mm, "Bias smoothing sigma, mm");
        cmd->add_option("--bias-iters", params->bias_max_iters, "Max bias iterations");
        cmd->add_option("--bias-tol", params->bias_tol, "Bias convergence tolerance");
        cmd->add_option("--metric", *metric, "Pre-alignment metric (mi, ncc, msd)");
        cmd->add_flag("--no-bias", *no_bias, "Skip bias correction");
        cmd->callback([=]() {
            params->prealign_metric = metric_from_string(*metric);
            params->bias_enabled = !*no_bias;
            const std::string native = native_out->empty() ? sibling_with_suffix(*out, "_native") : *native_out;
            const std::string bias = bias_out->empty() ? sibling_with_suffix(*out, "_bias") : *bias_out;
            stages::preprocess(*in, *tpl, *params, StripParams{}, *out, native, *affine_out, bias);
        });
    }

    // bone-strip
    {
        auto* cmd = app.add_subcommand("bone-strip", "Mask out bone and background, keep soft tissue");
        auto in = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto mask_out = std::make_shared<std::string>();
        auto params = std::make_shared<StripParams>();
        cmd->add_option("input", *in, "Input NIfTI volume (HU)")->required();
        cmd->add_option("-o,--output", *out, "Stripped output")->required();
        cmd->add_option("--mask-out", *mask_out, "Binary mask output")->required();
        cmd->add_option("--low", params->tissue_low_hu, "Soft-tissue window low, HU");
        cmd->add_option("--high", params->tissue_high_hu, "Soft-tissue window high, HU");
        cmd->add_option("--connectivity", params->fill_connectivity, "Hole-fill connectivity (6 or 26)");
        cmd->add_option("--smooth-sigma", params->mask_smooth_sigma_mm, "Mask smoothing sigma, mm");
        cmd->add_option("--rebinarize", params->mask_rebinarize_level, "Rebinarization level in (0,1)");
        cmd->callback([=]() {
            const StripResult r = strip(read_nifti(*in), *params);
            if (r.empty_component_warning) std::cerr << "bone-strip: threshold produced an empty mask\n";
            write_nifti(r.stripped, *out, NiftiDatatype::float32);
            write_nifti_labels(r.mask, *mask_out);
        });
    }

    // register
    {
        auto* cmd = app.add_subcommand("register", "Diffeomorphic registration to a template");
        auto in = std::make_shared<std::string>();
        auto tpl = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto fwd = std::make_shared<std::string>();
        auto inv = std::make_shared<std::string>();
        auto vel = std::make_shared<std::string>();
        auto params = std::make_shared<DiffeoParams>();
        auto iters = std::make_shared<std::string>();
        cmd->add_option("input", *in, "Moving NIfTI volume (pre-aligned, stripped)")->required();
        cmd->add_option("--template", *tpl, "Fixed template volume")->required();
        cmd->add_option("-o,--output", *out, "Warped output on the template grid")->required();
        cmd->add_option("--warp-out", *fwd, "Forward displacement field")->required();
        cmd->add_option("--inv-warp-out", *inv, "Inverse displacement field")->required();
        cmd->add_option("--velocity-out", *vel, "Stationary velocity field")->required();
        cmd->add_option("--levels", params->levels, "Pyramid levels");
        cmd->add_option("--iters", *iters, "Iterations per level, coarse to fine (e.g. 100,75,50)");
        cmd->add_option("--sigma-fluid", params->sigma_fluid_mm, "Update smoothing sigma, mm");
        cmd->add_option("--sigma-diffusion", params->sigma_diffusion_mm, "Velocity smoothing sigma, mm");
        cmd->add_option("--step-scale", params->step_scale_mm, "Update magnitude cap, mm (0 = auto)");
        cmd->add_option("--ss-min-steps", params->ss_min_steps, "Scaling-and-squaring step floor");
        cmd->add_option("--converge-tol", params->converge_tol, "Relative improvement tolerance");
        cmd->callback([=]() {
            if (!iters->empty()) {
                params->iters_per_level.clear();
                std::string cur;
                for (const char c : *iters + ",") {
                    if (c == ',') {
                        if (!cur.empty()) params->iters_per_level.push_back(std::stoi(cur));
                        cur.clear();
                    } else {
                        cur += c;
                    }
                }
                params->levels = static_cast<int>(params->iters_per_level.size());
            }
            stages::register_diffeo(*in, *tpl, *params, *out, *fwd, *inv, *vel);
        });
    }

    // segment
    {
        auto* cmd = app.add_subcommand("segment", "Pull the atlas back onto the subject");
        auto atlas = std::make_shared<std::string>();
        auto fwd = std::make_shared<std::string>();
        auto inv = std::make_shared<std::string>();
        auto affine = std::make_shared<std::string>();
        auto native = std::make_shared<std::string>();
        auto out_phys = std::make_shared<std::string>();
        auto out_norm = std::make_shared<std::string>();
        auto labels = std::make_shared<std::string>();
        cmd->add_option("--atlas", *atlas, "Atlas label volume (template space)")->required();
        cmd->add_option("--warp", *fwd, "Forward displacement field")->required();
        cmd->add_option("--inv-warp", *inv, "Inverse displacement field")->required();
        cmd->add_option("--affine", *affine, "Subject-to-template affine from preprocess")->required();
        cmd->add_option("--native", *native, "Native-space reference volume")->required();
        cmd->add_option("-o,--output", *out_phys, "Physical-space segmentation")->required();
        cmd->add_option("--normalized-out", *out_norm, "Normalized-space segmentation")->required();
        cmd->add_option("--labels", *labels, "Label table (index<TAB>name)");
        cmd->callback([=]() { stages::segment(*atlas, *fwd, *inv, *affine, *native, *labels, *out_norm, *out_phys); });
    }

    // warp-stats
    {
        auto* cmd = app.add_subcommand("warp-stats", "Jacobian statistics of the deformation");
        auto fwd = std::make_shared<std::string>();
        auto inv = std::make_shared<std::string>();
        auto mask = std::make_shared<std::string>();
        auto subject = std::make_shared<std::string>("subject");
        auto out = std::make_shared<std::string>();
        auto bins = std::make_shared<int>(64);
        cmd->add_option("--warp", *fwd, "Forward displacement field")->required();
        cmd->add_option("--inv-warp", *inv, "Inverse displacement field")->required();
        cmd->add_option("--mask", *mask, "Strip mask on the template grid")->required();
        cmd->add_option("--subject", *subject, "Subject id for the CSV");
        cmd->add_option("--bins", *bins, "Histogram bins for the entropy");
        cmd->add_option("-o,--output", *out, "Output CSV")->required();
        cmd->callback([=]() { stages::warp_stats(*fwd, *inv, *mask, *subject, *bins, *out); });
    }

    // geo-measures
    {
        auto* cmd = app.add_subcommand("geo-measures", "Per-region volume, surface area and centroid");
        auto norm = std::make_shared<std::string>();
        auto phys = std::make_shared<std::string>();
        auto labels = std::make_shared<std::string>();
        auto subject = std::make_shared<std::string>("subject");
        auto out = std::make_shared<std::string>();
        cmd->add_option("--normalized", *norm, "Normalized-space segmentation")->required();
        cmd->add_option("--physical", *phys, "Physical-space segmentation")->required();
        cmd->add_option("--labels", *labels, "Label table (index<TAB>name)");
        cmd->add_option("--subject", *subject, "Subject id for the CSV");
        cmd->add_option("-o,--output", *out, "Output CSV")->required();
        cmd->callback([=]() { stages::geo_measures(*norm, *phys, *labels, *subject, *out); });
    }

    // validate / run
    auto add_config_commands = [&]() {
        auto* vcmd = app.add_subcommand("validate", "Validate a pipeline config");
        auto vcfg = std::make_shared<std::string>();
        auto vprint = std::make_shared<bool>(false);
        vcmd->add_option("--config", *vcfg, "Config file")->required();
        vcmd->add_flag("--print-config", *vprint, "Echo the fully-resolved config");
        vcmd->callback([=]() {
            const PipelineConfig cfg = validate_config(*vcfg);
            if (*vprint) std::cout << print_config(cfg);
            else std::cout << "config ok: " << cfg.subjects.size() << " subject(s)\n";
        });

        auto* rcmd = app.add_subcommand("run", "Run the full pipeline over all subjects");
        auto rcfg = std::make_shared<std::string>();
        auto subjects = std::make_shared<std::string>();
        auto stages_csv = std::make_shared<std::string>();
        auto resume = std::make_shared<bool>(false);
        auto jobs = std::make_shared<int>(0);
        auto rprint = std::make_shared<bool>(false);
        rcmd->add_option("--config", *rcfg, "Config file")->required();
        rcmd->add_option("--subjects", *subjects, "Comma-separated subject ids to run");
        rcmd->add_option("--stages", *stages_csv, "Comma-separated stage names to run");
        rcmd->add_flag("--resume", *resume, "Skip stages whose outputs are up to date");
        rcmd->add_option("--jobs", *jobs, "Concurrent subjects (overrides parallel_subjects)");
        rcmd->add_flag("--print-config", *rprint, "Echo the fully-resolved config before running");
        rcmd->callback([=, &exit_code]() {
            const PipelineConfig cfg = validate_config(*rcfg);
            if (*rprint) std::cout << print_config(cfg);
            RunOptions opt;
            opt.subject_filter = comma_set(*subjects);
            opt.stage_filter = comma_set(*stages_csv);
            opt.resume = *resume;
            opt.jobs_override = *jobs;
            const RunManifest manifest = run_pipeline(cfg, opt);
            for (const auto& r : manifest.records) {
                std::cout << r.subject << "/" << r.stage << ": " << r.status;
                if (!r.message.empty()) std::cout << " (" << r.message << ")";
                std::cout << "\n";
            }
            if (manifest.any_failed()) exit_code = 1;
        });
    };
    add_config_commands();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
