// pipeline.hpp - config-driven multi-subject orchestration with a staged
// output tree, a run manifest, and resumability.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ctpipe/bonestrip.hpp"
#include "ctpipe/preprocess.hpp"
#include "ctpipe/registration.hpp"

namespace ctpipe {

struct SubjectSpec {
    std::string id;
    std::string input;
    enum class Kind { dicom_dir, nifti } kind = Kind::nifti;
};

struct PipelineConfig {
    std::string template_path;
    std::string atlas_path;
    std::string label_table_path;  // optional
    std::string output_root;
    int parallel_subjects = 1;
    PreprocessParams preprocess;
    StripParams bonestrip;
    DiffeoParams diffeo;
    int quantify_bins = 64;
    std::vector<SubjectSpec> subjects;
};

/// All validation problems joined into one message.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Parse + validate a flat key/value config file (stage-prefixed keys,
/// `key = value` lines, `#` comments). Unknown keys are errors with a
/// nearest-key suggestion; every problem is reported at once.
PipelineConfig validate_config(const std::string& path);

/// Canonical echo of a fully-resolved config, defaults materialized.
std::string print_config(const PipelineConfig& cfg);

struct StageRecord {
    std::string subject;
    std::string stage;
    std::string status;  // done | failed | skipped
    double wall_ms = 0.0;
    std::string param_digest;
    std::vector<std::pair<std::string, std::string>> inputs;   // path, digest
    std::vector<std::pair<std::string, std::string>> outputs;  // path, digest
    std::string version;
    std::string message;
};

struct RunManifest {
    std::vector<StageRecord> records;

    const StageRecord* find(const std::string& subject, const std::string& stage) const;
    bool any_failed() const;
    void save(const std::string& path) const;  // atomic write-then-rename
    static RunManifest load(const std::string& path);
};

struct RunOptions {
    std::set<std::string> stage_filter;    // empty = all
    std::set<std::string> subject_filter;  // empty = all
    bool resume = false;
    int jobs_override = 0;  // 0 = config parallel_subjects
};

extern const std::vector<std::string> kStageNames;  // dependency order

/// Execute the staged pipeline over all (filtered) subjects. Per-stage errors
/// are recorded in the returned manifest, not thrown; pipeline-level problems
/// (unwritable output root, bad filters) throw.
RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& options);

/// FNV-1a 64-bit content digest of a file (or of a directory's files),
/// rendered as 16 hex chars.
std::string digest_path(const std::string& path);
std::string digest_string(const std::string& text);

namespace stages {

// Path-level stage entry points shared by `run` and the one-shot CLI
// subcommands. Each writes its outputs via temp names + rename.

void convert(const std::string& input, SubjectSpec::Kind kind, const std::string& out_volume);

void preprocess(const std::string& in_volume, const std::string& template_path, const PreprocessParams& params,
                const StripParams& mask_params, const std::string& out_pre, const std::string& out_native,
                const std::string& out_affine, const std::string& out_bias);

void bonestrip(const std::string& in_pre, const std::string& in_native, const StripParams& params,
               const std::string& out_stripped, const std::string& out_mask,
               const std::string& out_stripped_native, const std::string& out_mask_native);

void register_diffeo(const std::string& in_stripped, const std::string& template_path, const DiffeoParams& params,
                     const std::string& out_warped, const std::string& out_fwd, const std::string& out_inv,
                     const std::string& out_velocity);

void segment(const std::string& atlas_path, const std::string& fwd_path, const std::string& inv_path,
             const std::string& affine_path, const std::string& native_path, const std::string& label_table_path,
             const std::string& out_norm, const std::string& out_phys);

void warp_stats(const std::string& fwd_path, const std::string& inv_path, const std::string& mask_path,
                const std::string& subject, int bins, const std::string& out_csv);

void geo_measures(const std::string& norm_path, const std::string& phys_path,
                  const std::string& label_table_path, const std::string& subject, const std::string& out_csv);

}  // namespace stages

}  // namespace ctpipe
