#include "ctpipe/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "ctpipe/dicom.hpp"
#include "ctpipe/nifti.hpp"
#include "ctpipe/quantify.hpp"
#include "ctpipe/segment.hpp"
#include "ctpipe/version.hpp"

namespace fs = std::filesystem;

namespace ctpipe {

const std::vector<std::string> kStageNames = {
    "convert", "preprocess", "bone-strip", "register", "segment", "warp-stats", "geo-measures",
};

// ---------------------------------------------------------------------------
// Digests

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path, std::uint64_t h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for digest");
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

std::string digest_string(const std::string& text) { return hex64(fnv1a(text.data(), text.size(), kFnvOffset)); }

std::string digest_path(const std::string& path) {
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(path)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        std::uint64_t h = kFnvOffset;
        for (const auto& f : files) {
            const std::string name = f.filename().string();
            h = fnv1a(name.data(), name.size() + 1, h);
            h = fnv1a_file(f.string(), h);
        }
        return hex64(h);
    }
    return hex64(fnv1a_file(path, kFnvOffset));
}

// ---------------------------------------------------------------------------
// Config

namespace {

struct RawEntry {
    std::string value;
    int line = 0;
};

int edit_distance(const std::string& a, const std::string& b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

const std::vector<std::string>& canonical_keys() {
    static const std::vector<std::string> keys = {
        "template", "atlas", "label_table", "output_root", "parallel_subjects",
        "preprocess.target_spacing", "preprocess.bias_sigma_mm", "preprocess.bias_max_iters",
        "preprocess.bias_tol", "preprocess.prealign_metric", "preprocess.bias_enabled",
        "bonestrip.tissue_low_hu", "bonestrip.tissue_high_hu", "bonestrip.fill_connectivity",
        "bonestrip.mask_smooth_sigma_mm", "bonestrip.mask_rebinarize_level",
        "register.levels", "register.iters_per_level", "register.sigma_fluid_mm",
        "register.sigma_diffusion_mm", "register.step_scale_mm", "register.ss_min_steps",
        "register.converge_tol", "quantify.bins",
    };
    return keys;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) out.push_back(part);
    return out;
}

bool subject_id_ok(const std::string& id) {
    if (id.empty()) return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    });
}

}  // namespace

PipelineConfig validate_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");

    std::vector<std::string> errors;
    std::map<std::string, RawEntry> entries;
    std::vector<std::string> order;  // subject discovery order

    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            errors.push_back("line " + std::to_string(lineno) + ": expected 'key = value'");
            continue;
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        auto [it, inserted] = entries.emplace(key, RawEntry{value, lineno});
        if (!inserted) {
            errors.push_back("duplicate key '" + key + "' (lines " + std::to_string(it->second.line) + " and " +
                             std::to_string(lineno) + ")");
            continue;
        }
        order.push_back(key);
    }

    PipelineConfig cfg;
    std::map<std::string, SubjectSpec> subjects;  // by id
    std::vector<std::string> subject_order;

    auto parse_double = [&](const std::string& key, const std::string& v, double& out) {
        try {
            std::size_t used = 0;
            out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            errors.push_back("key '" + key + "': '" + v + "' is not a number");
        }
    };
    auto parse_int = [&](const std::string& key, const std::string& v, int& out) {
        try {
            std::size_t used = 0;
            out = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            errors.push_back("key '" + key + "': '" + v + "' is not an integer");
        }
    };
    auto parse_bool = [&](const std::string& key, const std::string& v, bool& out) {
        if (v == "true" || v == "1") out = true;
        else if (v == "false" || v == "0") out = false;
        else errors.push_back("key '" + key + "': '" + v + "' is not a boolean (true/false)");
    };

    for (const auto& key : order) {
        const std::string& v = entries[key].value;
        if (key == "template") cfg.template_path = v;
        else if (key == "atlas") cfg.atlas_path = v;
        else if (key == "label_table") cfg.label_table_path = v;
        else if (key == "output_root") cfg.output_root = v;
        else if (key == "parallel_subjects") parse_int(key, v, cfg.parallel_subjects);
        else if (key == "preprocess.target_spacing") parse_double(key, v, cfg.preprocess.target_spacing);
        else if (key == "preprocess.bias_sigma_mm") parse_double(key, v, cfg.preprocess.bias_sigma_mm);
        else if (key == "preprocess.bias_max_iters") parse_int(key, v, cfg.preprocess.bias_max_iters);
        else if (key == "preprocess.bias_tol") parse_double(key, v, cfg.preprocess.bias_tol);
        else if (key == "preprocess.prealign_metric") {
            try {
                cfg.preprocess.prealign_metric = metric_from_string(v);
            } catch (const std::exception& e) {
                errors.push_back("key '" + key + "': " + e.what());
            }
        } else if (key == "preprocess.bias_enabled") parse_bool(key, v, cfg.preprocess.bias_enabled);
        else if (key == "bonestrip.tissue_low_hu") parse_double(key, v, cfg.bonestrip.tissue_low_hu);
        else if (key == "bonestrip.tissue_high_hu") parse_double(key, v, cfg.bonestrip.tissue_high_hu);
        else if (key == "bonestrip.fill_connectivity") parse_int(key, v, cfg.bonestrip.fill_connectivity);
        else if (key == "bonestrip.mask_smooth_sigma_mm") parse_double(key, v, cfg.bonestrip.mask_smooth_sigma_mm);
        else if (key == "bonestrip.mask_rebinarize_level") parse_double(key, v, cfg.bonestrip.mask_rebinarize_level);
        else if (key == "register.levels") parse_int(key, v, cfg.diffeo.levels);
        else if (key == "register.iters_per_level") {
            cfg.diffeo.iters_per_level.clear();
            for (const auto& part : split(v, ',')) {
                int iters = 0;
                parse_int(key, trim(part), iters);
                cfg.diffeo.iters_per_level.push_back(iters);
            }
        } else if (key == "register.sigma_fluid_mm") parse_double(key, v, cfg.diffeo.sigma_fluid_mm);
        else if (key == "register.sigma_diffusion_mm") parse_double(key, v, cfg.diffeo.sigma_diffusion_mm);
        else if (key == "register.step_scale_mm") parse_double(key, v, cfg.diffeo.step_scale_mm);
        else if (key == "register.ss_min_steps") parse_int(key, v, cfg.diffeo.ss_min_steps);
        else if (key == "register.converge_tol") parse_double(key, v, cfg.diffeo.converge_tol);
        else if (key == "quantify.bins") parse_int(key, v, cfg.quantify_bins);
        else if (key.rfind("subject.", 0) == 0) {
            const auto parts = split(key, '.');
            if (parts.size() != 3 || (parts[2] != "input" && parts[2] != "kind")) {
                errors.push_back("unknown key '" + key + "' (did you mean 'subject.<id>.input' or "
                                 "'subject.<id>.kind'?)");
                continue;
            }
            const std::string& id = parts[1];
            if (subjects.find(id) == subjects.end()) {
                subjects[id].id = id;
                subject_order.push_back(id);
            }
            if (parts[2] == "input") subjects[id].input = v;
            else {
                if (v == "dicom-dir") subjects[id].kind = SubjectSpec::Kind::dicom_dir;
                else if (v == "nifti") subjects[id].kind = SubjectSpec::Kind::nifti;
                else errors.push_back("key '" + key + "': '" + v + "' is not an input kind (dicom-dir/nifti)");
            }
        } else {
            int best = std::numeric_limits<int>::max();
            std::string suggestion;
            for (const auto& cand : canonical_keys()) {
                const int d = edit_distance(key, cand);
                if (d < best) {
                    best = d;
                    suggestion = cand;
                }
            }
            std::string msg = "unknown key '" + key + "'";
            if (best <= static_cast<int>(std::max<std::size_t>(3, key.size() / 3))) {
                msg += " (did you mean '" + suggestion + "'?)";
            }
            errors.push_back(msg);
        }
    }

    if (cfg.template_path.empty()) errors.push_back("missing required key 'template'");
    if (cfg.atlas_path.empty()) errors.push_back("missing required key 'atlas'");
    if (cfg.output_root.empty()) errors.push_back("missing required key 'output_root'");
    if (cfg.parallel_subjects < 1) errors.push_back("parallel_subjects must be >= 1");
    if (subjects.empty()) errors.push_back("no subjects declared (subject.<id>.input = ...)");

    for (const auto& id : subject_order) {
        const auto& s = subjects[id];
        if (!subject_id_ok(id)) {
            errors.push_back("subject id '" + id + "' is not filesystem-safe ([A-Za-z0-9._-])");
        }
        if (s.input.empty()) {
            errors.push_back("subject '" + id + "' has no input path");
        } else if (!fs::exists(s.input)) {
            errors.push_back("subject '" + id + "' input '" + s.input + "' does not exist");
        }
        cfg.subjects.push_back(s);
    }

    if (!cfg.template_path.empty() && !fs::exists(cfg.template_path)) {
        errors.push_back("template '" + cfg.template_path + "' does not exist");
    }
    if (!cfg.atlas_path.empty() && !fs::exists(cfg.atlas_path)) {
        errors.push_back("atlas '" + cfg.atlas_path + "' does not exist");
    }
    if (!cfg.label_table_path.empty() && !fs::exists(cfg.label_table_path)) {
        errors.push_back("label_table '" + cfg.label_table_path + "' does not exist");
    }

    try {
        cfg.preprocess.validate();
    } catch (const std::exception& e) {
        errors.push_back(e.what());
    }
    try {
        cfg.diffeo.validate();
    } catch (const std::exception& e) {
        errors.push_back(e.what());
    }
    if (cfg.bonestrip.fill_connectivity != 6 && cfg.bonestrip.fill_connectivity != 26) {
        errors.push_back("bonestrip.fill_connectivity must be 6 or 26");
    }
    if (!(cfg.bonestrip.tissue_low_hu < cfg.bonestrip.tissue_high_hu)) {
        errors.push_back("bonestrip.tissue_low_hu must be < bonestrip.tissue_high_hu");
    }
    if (cfg.quantify_bins < 1) errors.push_back("quantify.bins must be >= 1");

    if (!errors.empty()) {
        std::string msg = "config validation failed:";
        for (const auto& e : errors) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
    return cfg;
}

std::string print_config(const PipelineConfig& cfg) {
    std::ostringstream out;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%g", v);
        return std::string(buf);
    };
    out << "template = " << cfg.template_path << "\n";
    out << "atlas = " << cfg.atlas_path << "\n";
    if (!cfg.label_table_path.empty()) out << "label_table = " << cfg.label_table_path << "\n";
    out << "output_root = " << cfg.output_root << "\n";
    out << "parallel_subjects = " << cfg.parallel_subjects << "\n";
    out << "preprocess.target_spacing = " << num(cfg.preprocess.target_spacing) << "\n";
    out << "preprocess.bias_sigma_mm = " << num(cfg.preprocess.bias_sigma_mm) << "\n";
    out << "preprocess.bias_max_iters = " << cfg.preprocess.bias_max_iters << "\n";
    out << "preprocess.bias_tol = " << num(cfg.preprocess.bias_tol) << "\n";
    out << "preprocess.prealign_metric = " << to_string(cfg.preprocess.prealign_metric) << "\n";
    out << "preprocess.bias_enabled = " << (cfg.preprocess.bias_enabled ? "true" : "false") << "\n";
    out << "bonestrip.tissue_low_hu = " << num(cfg.bonestrip.tissue_low_hu) << "\n";
    out << "bonestrip.tissue_high_hu = " << num(cfg.bonestrip.tissue_high_hu) << "\n";
    out << "bonestrip.fill_connectivity = " << cfg.bonestrip.fill_connectivity << "\n";
    out << "bonestrip.mask_smooth_sigma_mm = " << num(cfg.bonestrip.mask_smooth_sigma_mm) << "\n";
    out << "bonestrip.mask_rebinarize_level = " << num(cfg.bonestrip.mask_rebinarize_level) << "\n";
    out << "register.levels = " << cfg.diffeo.levels << "\n";
    out << "register.iters_per_level = ";
    for (std::size_t i = 0; i < cfg.diffeo.iters_per_level.size(); ++i) {
        out << (i ? "," : "") << cfg.diffeo.iters_per_level[i];
    }
    out << "\n";
    out << "register.sigma_fluid_mm = " << num(cfg.diffeo.sigma_fluid_mm) << "\n";
    out << "register.sigma_diffusion_mm = " << num(cfg.diffeo.sigma_diffusion_mm) << "\n";
    out << "register.step_scale_mm = " << num(cfg.diffeo.step_scale_mm) << "\n";
    out << "register.ss_min_steps = " << cfg.diffeo.ss_min_steps << "\n";
    out << "register.converge_tol = " << num(cfg.diffeo.converge_tol) << "\n";
    out << "quantify.bins = " << cfg.quantify_bins << "\n";
    for (const auto& s : cfg.subjects) {
        out << "subject." << s.id << ".input = " << s.input << "\n";
        out << "subject." << s.id << ".kind = "
            << (s.kind == SubjectSpec::Kind::dicom_dir ? "dicom-dir" : "nifti") << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::string sanitize_field(std::string s) {
    for (auto& c : s) {
        if (c == '\t' || c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

std::string join_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::string out;
    for (const auto& [p, d] : pairs) {
        if (!out.empty()) out += ';';
        out += p + "=" + d;
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> split_pairs(const std::string& s) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& item : split(s, ';')) {
        const auto eq = item.rfind('=');
        if (eq == std::string::npos) continue;
        out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
    return out;
}

void atomic_write_text(const std::string& path, const std::string& content) {
    const fs::path p(path);
    const fs::path tmp = p.parent_path() / (".tmp-" + p.filename().string());
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        out << content;
        if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, p);
}

}  // namespace

const StageRecord* RunManifest::find(const std::string& subject, const std::string& stage) const {
    for (const auto& r : records) {
        if (r.subject == subject && r.stage == stage) return &r;
    }
    return nullptr;
}

bool RunManifest::any_failed() const {
    return std::any_of(records.begin(), records.end(), [](const StageRecord& r) { return r.status == "failed"; });
}

void RunManifest::save(const std::string& path) const {
    std::ostringstream out;
    out << "subject\tstage\tstatus\twall_ms\tparam_digest\tinputs\toutputs\tversion\tmessage\n";
    char buf[32];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.1f", r.wall_ms);
        out << r.subject << '\t' << r.stage << '\t' << r.status << '\t' << buf << '\t' << r.param_digest << '\t'
            << join_pairs(r.inputs) << '\t' << join_pairs(r.outputs) << '\t' << r.version << '\t'
            << sanitize_field(r.message) << '\n';
    }
    atomic_write_text(path, out.str());
}

RunManifest RunManifest::load(const std::string& path) {
    RunManifest m;
    std::ifstream in(path);
    if (!in) return m;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;  // header
        }
        const auto f = split(line, '\t');
        if (f.size() < 9) continue;
        StageRecord r;
        r.subject = f[0];
        r.stage = f[1];
        r.status = f[2];
        r.wall_ms = std::atof(f[3].c_str());
        r.param_digest = f[4];
        r.inputs = split_pairs(f[5]);
        r.outputs = split_pairs(f[6]);
        r.version = f[7];
        r.message = f[8];
        m.records.push_back(std::move(r));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Stage implementations

namespace {

// Collects tmp -> final renames so a stage's outputs appear atomically (a
// crash mid-stage leaves only .tmp- files behind).
class PendingWrites {
public:
    std::string stage_file(const std::string& final_path) {
        const fs::path p(final_path);
        const std::string tmp = (p.parent_path() / (".tmp-" + p.filename().string())).string();
        moves_.emplace_back(tmp, final_path);
        return tmp;
    }
    void alias(const std::string& tmp, const std::string& final_path) { moves_.emplace_back(tmp, final_path); }
    void commit() {
        for (const auto& [tmp, final_path] : moves_) fs::rename(tmp, final_path);
        moves_.clear();
    }

private:
    std::vector<std::pair<std::string, std::string>> moves_;
};

void write_labels_auto(const LabelVolume& labels, const std::string& path) {
    std::int32_t max_label = 0;
    for (const auto v : labels.data) max_label = std::max(max_label, v);
    write_nifti_labels(labels, path, max_label <= 32767 ? NiftiDatatype::int16 : NiftiDatatype::int32);
}

}  // namespace

namespace stages {

void convert(const std::string& input, SubjectSpec::Kind kind, const std::string& out_volume) {
    const Volume3 vol =
        kind == SubjectSpec::Kind::dicom_dir ? read_dicom_dir(input) : read_nifti(input);
    PendingWrites pw;
    write_nifti(vol, pw.stage_file(out_volume), NiftiDatatype::float32);
    pw.commit();
}

void preprocess(const std::string& in_volume, const std::string& template_path, const PreprocessParams& params,
                const StripParams& mask_params, const std::string& out_pre, const std::string& out_native,
                const std::string& out_affine, const std::string& out_bias) {
    params.validate();
    const Volume3 tmpl = read_nifti(template_path);
    Volume3 vol = read_nifti(in_volume);
    vol = reorient_canonical(vol);
    vol = resample_isotropic(vol, params.target_spacing);

    Volume3 bias;
    if (params.bias_enabled) {
        const LabelVolume mask = threshold_mask(vol, mask_params.tissue_low_hu, mask_params.tissue_high_hu);
        const bool mask_empty = std::all_of(mask.data.begin(), mask.data.end(), [](std::int32_t v) { return v == 0; });
        if (!mask_empty) {
            BiasResult br = correct_bias(vol, mask, params);
            vol = std::move(br.corrected);
            bias = std::move(br.bias_field);
        }
    }
    if (bias.data.empty()) {
        static_cast<GridGeom&>(bias) = vol;
        bias.data.assign(vol.voxel_count(), 1.0f);
    }

    const PrealignResult pre = prealign(vol, tmpl, params);

    PendingWrites pw;
    write_nifti(pre.resampled, pw.stage_file(out_pre), NiftiDatatype::float32);
    write_nifti(vol, pw.stage_file(out_native), NiftiDatatype::float32);
    write_affine(pre.subject_to_template, pw.stage_file(out_affine));
    write_nifti(bias, pw.stage_file(out_bias), NiftiDatatype::float32);
    pw.commit();
}

void bonestrip(const std::string& in_pre, const std::string& in_native, const StripParams& params,
               const std::string& out_stripped, const std::string& out_mask,
               const std::string& out_stripped_native, const std::string& out_mask_native) {
    const Volume3 pre = read_nifti(in_pre);
    const Volume3 native = read_nifti(in_native);
    const StripResult r_pre = strip(pre, params);
    const StripResult r_native = strip(native, params);

    PendingWrites pw;
    write_nifti(r_pre.stripped, pw.stage_file(out_stripped), NiftiDatatype::float32);
    write_labels_auto(r_pre.mask, pw.stage_file(out_mask));
    write_nifti(r_native.stripped, pw.stage_file(out_stripped_native), NiftiDatatype::float32);
    write_labels_auto(r_native.mask, pw.stage_file(out_mask_native));
    pw.commit();
}

void register_diffeo(const std::string& in_stripped, const std::string& template_path, const DiffeoParams& params,
                     const std::string& out_warped, const std::string& out_fwd, const std::string& out_inv,
                     const std::string& out_velocity) {
    const Volume3 moving = read_nifti(in_stripped);
    const Volume3 fixed = read_nifti(template_path);
    const Diffeomorphism diffeo = diffeo_register(moving, fixed, AffineTransform{}, params);

    TransformChain warp;
    warp.add_displacement(diffeo.forward);
    const Volume3 warped = apply_transform(moving, warp, fixed, {Interp::trilinear, OobPolicy::constant, -1024.0f});

    PendingWrites pw;
    write_nifti(warped, pw.stage_file(out_warped), NiftiDatatype::float32);
    const std::string tmp_fwd = pw.stage_file(out_fwd);
    write_field(diffeo.forward, tmp_fwd, "template", "forward", diffeo.exp_steps);
    pw.alias(tmp_fwd + ".manifest", out_fwd + ".manifest");
    const std::string tmp_inv = pw.stage_file(out_inv);
    write_field(diffeo.inverse, tmp_inv, "template", "inverse", diffeo.exp_steps);
    pw.alias(tmp_inv + ".manifest", out_inv + ".manifest");
    const std::string tmp_vel = pw.stage_file(out_velocity);
    write_field(diffeo.velocity, tmp_vel, "template", "velocity", diffeo.exp_steps);
    pw.alias(tmp_vel + ".manifest", out_velocity + ".manifest");
    pw.commit();
}

void segment(const std::string& atlas_path, const std::string& fwd_path, const std::string& inv_path,
             const std::string& affine_path, const std::string& native_path, const std::string& label_table_path,
             const std::string& out_norm, const std::string& out_phys) {
    LabelVolume atlas = read_nifti_labels(atlas_path);
    if (!label_table_path.empty()) {
        atlas.label_table = read_label_table(label_table_path);
        const auto missing = unknown_labels(atlas, atlas.label_table);
        if (!missing.empty()) {
            std::ostringstream msg;
            msg << "segment: " << missing.size() << " label(s) missing from the label table:";
            for (const auto lab : missing) msg << ' ' << lab;
            std::cerr << msg.str() << "\n";
        }
    }
    Diffeomorphism diffeo;
    diffeo.forward = read_field(fwd_path);
    diffeo.inverse = read_field(inv_path);
    const AffineTransform pre_affine = read_affine(affine_path);
    const Volume3 native = read_nifti(native_path);

    const LabelVolume norm = segment_normalized(atlas, diffeo);
    const LabelVolume phys = segment_physical(norm, pre_affine, native);

    PendingWrites pw;
    write_labels_auto(norm, pw.stage_file(out_norm));
    write_labels_auto(phys, pw.stage_file(out_phys));
    pw.commit();
}

void warp_stats(const std::string& fwd_path, const std::string& inv_path, const std::string& mask_path,
                const std::string& subject, int bins, const std::string& out_csv) {
    const VectorField fwd = read_field(fwd_path);
    const VectorField inv = read_field(inv_path);
    const LabelVolume mask = read_nifti_labels(mask_path);

    // Physical-space stats: inverse-map Jacobian over the subject's own
    // (pre-aligned) strip mask. Normalized-space stats: forward-map Jacobian
    // over that mask warped into template space alongside the image.
    const Volume3 jac_inv = jacobian_determinant(inv);
    const WarpStats phys = ctpipe::warp_stats(jac_inv, mask, bins);

    TransformChain warp;
    warp.add_displacement(fwd);
    const LabelVolume warped_mask = apply_transform_labels(mask, warp, fwd);
    const Volume3 jac_fwd = jacobian_determinant(fwd);
    const WarpStats norm = ctpipe::warp_stats(jac_fwd, warped_mask, bins);

    PendingWrites pw;
    write_warp_stats_csv(pw.stage_file(out_csv), {{subject, "physical", phys}, {subject, "normalized", norm}});
    pw.commit();
}

void geo_measures(const std::string& norm_path, const std::string& phys_path,
                  const std::string& label_table_path, const std::string& subject, const std::string& out_csv) {
    LabelVolume norm = read_nifti_labels(norm_path);
    LabelVolume phys = read_nifti_labels(phys_path);
    std::map<std::int32_t, std::string> table;
    if (!label_table_path.empty()) table = read_label_table(label_table_path);

    auto phys_rows = ctpipe::geo_measures(phys, table);
    for (auto& r : phys_rows) r.space = "physical";
    auto norm_rows = ctpipe::geo_measures(norm, table);
    for (auto& r : norm_rows) r.space = "normalized";
    phys_rows.insert(phys_rows.end(), norm_rows.begin(), norm_rows.end());

    PendingWrites pw;
    write_region_measures_csv(pw.stage_file(out_csv), subject, phys_rows);
    pw.commit();
}

}  // namespace stages

// ---------------------------------------------------------------------------
// Runner

namespace {

struct StagePlan {
    std::string name;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string param_digest;
    std::function<void()> run;
};

std::vector<StagePlan> plan_subject(const PipelineConfig& cfg, const SubjectSpec& subject) {
    const fs::path root = fs::path(cfg.output_root) / subject.id;
    const auto dir = [&](const std::string& stage) { return (root / stage).string(); };
    const auto file = [&](const std::string& stage, const std::string& name) {
        return (root / stage / name).string();
    };

    const std::string volume = file("convert", "volume.nii.gz");
    const std::string pre = file("preprocess", "pre.nii.gz");
    const std::string native = file("preprocess", "native.nii.gz");
    const std::string affine = file("preprocess", "pre_affine.txt");
    const std::string bias = file("preprocess", "bias.nii.gz");
    const std::string stripped = file("bone-strip", "stripped.nii.gz");
    const std::string mask = file("bone-strip", "mask.nii.gz");
    const std::string stripped_native = file("bone-strip", "stripped_native.nii.gz");
    const std::string mask_native = file("bone-strip", "mask_native.nii.gz");
    const std::string warped = file("register", "warped.nii.gz");
    const std::string fwd = file("register", "fwd.nii.gz");
    const std::string inv = file("register", "inv.nii.gz");
    const std::string vel = file("register", "vel.nii.gz");
    const std::string seg_norm = file("segment", "seg_norm.nii.gz");
    const std::string seg_phys = file("segment", "seg_phys.nii.gz");
    const std::string warpstats_csv = file("warp-stats", "warpstats.csv");
    const std::string geo_csv = file("geo-measures", "geomeasures.csv");

    // The bias mask uses the stock soft-tissue window rather than the
    // configured bone-strip window, so bone-strip tuning never invalidates
    // the preprocess stage on resume.
    const StripParams bias_mask_params{};

    std::vector<StagePlan> plans;

    {
        StagePlan p;
        p.name = "convert";
        p.inputs = {subject.input};
        p.outputs = {volume};
        p.param_digest = digest_string(subject.kind == SubjectSpec::Kind::dicom_dir ? "dicom-dir" : "nifti");
        p.run = [=]() { stages::convert(subject.input, subject.kind, volume); };
        plans.push_back(std::move(p));
    }
    {
        StagePlan p;
        p.name = "preprocess";
        p.inputs = {volume, cfg.template_path};
        p.outputs = {pre, native, affine, bias};
        std::ostringstream ps;
        ps << cfg.preprocess.target_spacing << '|' << cfg.preprocess.bias_sigma_mm << '|'
           << cfg.preprocess.bias_max_iters << '|' << cfg.preprocess.bias_tol << '|'
           << to_string(cfg.preprocess.prealign_metric) << '|' << cfg.preprocess.bias_enabled << '|'
           << bias_mask_params.tissue_low_hu << '|' << bias_mask_params.tissue_high_hu;
        p.param_digest = digest_string(ps.str());
        const PreprocessParams params = cfg.preprocess;
        const std::string tpl = cfg.template_path;
        p.run = [=]() { stages::preprocess(volume, tpl, params, bias_mask_params, pre, native, affine, bias); };
        plans.push_back(std::move(p));
    }
    {
        StagePlan p;
        p.name = "bone-strip";
        p.inputs = {pre, native};
        p.outputs = {stripped, mask, stripped_native, mask_native};
        std::ostringstream ps;
        ps << cfg.bonestrip.tissue_low_hu << '|' << cfg.bonestrip.tissue_high_hu << '|'
           << cfg.bonestrip.fill_connectivity << '|' << cfg.bonestrip.mask_smooth_sigma_mm << '|'
           << cfg.bonestrip.mask_rebinarize_level;
        p.param_digest = digest_string(ps.str());
        const StripParams params = cfg.bonestrip;
        p.run = [=]() { stages::bonestrip(pre, native, params, stripped, mask, stripped_native, mask_native); };
        plans.push_back(std::move(p));
    }
    {
        StagePlan p;
        p.name = "register";
        p.inputs = {stripped, cfg.template_path};
        p.outputs = {warped, fwd, fwd + ".manifest", inv, inv + ".manifest", vel, vel + ".manifest"};
        std::ostringstream ps;
        ps << cfg.diffeo.levels << '|';
        for (const int it : cfg.diffeo.iters_per_level) ps << it << ',';
        ps << '|' << cfg.diffeo.sigma_fluid_mm << '|' << cfg.diffeo.sigma_diffusion_mm << '|'
           << cfg.diffeo.step_scale_mm << '|' << cfg.diffeo.ss_min_steps << '|' << cfg.diffeo.converge_tol;
        p.param_digest = digest_string(ps.str());
        const DiffeoParams params = cfg.diffeo;
        const std::string tpl = cfg.template_path;
        p.run = [=]() { stages::register_diffeo(stripped, tpl, params, warped, fwd, inv, vel); };
        plans.push_back(std::move(p));
    }
    {
        StagePlan p;
        p.name = "segment";
        p.inputs = {cfg.atlas_path, fwd, inv, affine, stripped_native};
        if (!cfg.label_table_path.empty()) p.inputs.push_back(cfg.label_table_path);
        p.outputs = {seg_norm, seg_phys};
        p.param_digest = digest_string("segment");
        const std::string atlas = cfg.atlas_path, table = cfg.label_table_path;
        p.run = [=]() { stages::segment(atlas, fwd, inv, affine, stripped_native, table, seg_norm, seg_phys); };
        plans.push_back(std::move(p));
    }
    {
        StagePlan p;
        p.name = "warp-stats";
        p.inputs = {fwd, inv, mask};
        p.outputs = {warpstats_csv};
        p.param_digest = digest_string("bins=" + std::to_string(cfg.quantify_bins));
        const int bins = cfg.quantify_bins;
        const std::string id = subject.id;
        p.run = [=]() { stages::warp_stats(fwd, inv, mask, id, bins, warpstats_csv); };
        plans.push_back(std::move(p));
    }
    {
        StagePlan p;
        p.name = "geo-measures";
        p.inputs = {seg_norm, seg_phys};
        if (!cfg.label_table_path.empty()) p.inputs.push_back(cfg.label_table_path);
        p.outputs = {geo_csv};
        p.param_digest = digest_string("geo");
        const std::string table = cfg.label_table_path;
        const std::string id = subject.id;
        p.run = [=]() { stages::geo_measures(seg_norm, seg_phys, table, id, geo_csv); };
        plans.push_back(std::move(p));
    }

    // Make sure stage directories exist up front.
    for (const auto& stage : kStageNames) fs::create_directories(dir(stage));
    return plans;
}

bool record_matches(const StageRecord& old, const StagePlan& plan,
                    const std::vector<std::pair<std::string, std::string>>& fresh_inputs) {
    if (old.status != "done" && old.status != "skipped") return false;
    if (old.param_digest != plan.param_digest) return false;
    if (old.inputs != fresh_inputs) return false;
    if (old.outputs.size() != plan.outputs.size()) return false;
    for (std::size_t i = 0; i < plan.outputs.size(); ++i) {
        if (old.outputs[i].first != plan.outputs[i]) return false;
        if (!fs::exists(plan.outputs[i])) return false;
        if (digest_path(plan.outputs[i]) != old.outputs[i].second) return false;
    }
    return true;
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& options) {
    for (const auto& s : options.stage_filter) {
        if (std::find(kStageNames.begin(), kStageNames.end(), s) == kStageNames.end()) {
            throw ConfigError("unknown stage '" + s + "' in --stages");
        }
    }
    for (const auto& s : options.subject_filter) {
        if (std::none_of(cfg.subjects.begin(), cfg.subjects.end(),
                         [&](const SubjectSpec& sub) { return sub.id == s; })) {
            throw ConfigError("unknown subject '" + s + "' in --subjects");
        }
    }

    std::error_code ec;
    fs::create_directories(cfg.output_root, ec);
    if (ec || !fs::is_directory(cfg.output_root)) {
        throw std::runtime_error("cannot create output root '" + cfg.output_root + "'");
    }
    const std::string manifest_path = (fs::path(cfg.output_root) / "manifest.tsv").string();
    const RunManifest previous = options.resume ? RunManifest::load(manifest_path) : RunManifest{};

    std::vector<const SubjectSpec*> todo;
    for (const auto& s : cfg.subjects) {
        if (options.subject_filter.empty() || options.subject_filter.count(s.id)) todo.push_back(&s);
    }

    RunManifest manifest;
    std::mutex mtx;

    auto run_subject = [&](const SubjectSpec& subject) {
        const auto plans = plan_subject(cfg, subject);
        for (const auto& plan : plans) {
            if (!options.stage_filter.empty() && options.stage_filter.count(plan.name) == 0) continue;

            StageRecord rec;
            rec.subject = subject.id;
            rec.stage = plan.name;
            rec.param_digest = plan.param_digest;
            rec.version = CTPIPE_VERSION;

            const auto t0 = std::chrono::steady_clock::now();
            bool stop_subject = false;
            try {
                for (const auto& in : plan.inputs) {
                    if (!fs::exists(in)) throw std::runtime_error("missing input '" + in + "'");
                    rec.inputs.emplace_back(in, digest_path(in));
                }
                const StageRecord* old = previous.find(subject.id, plan.name);
                if (options.resume && old != nullptr && record_matches(*old, plan, rec.inputs)) {
                    rec.status = "skipped";
                    rec.outputs = old->outputs;
                } else {
                    plan.run();
                    rec.status = "done";
                    for (const auto& out : plan.outputs) rec.outputs.emplace_back(out, digest_path(out));
                }
            } catch (const std::exception& e) {
                rec.status = "failed";
                rec.message = e.what();
                stop_subject = true;
            }
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

            {
                std::lock_guard<std::mutex> lock(mtx);
                manifest.records.push_back(rec);
                manifest.save(manifest_path);
            }
            if (stop_subject) break;
        }
    };

    int jobs = options.jobs_override > 0 ? options.jobs_override : cfg.parallel_subjects;
    jobs = std::clamp<int>(jobs, 1, static_cast<int>(todo.size()) > 0 ? static_cast<int>(todo.size()) : 1);

    if (jobs <= 1) {
        for (const auto* s : todo) run_subject(*s);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        workers.reserve(static_cast<std::size_t>(jobs));
        for (int w = 0; w < jobs; ++w) {
            workers.emplace_back([&]() {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= todo.size()) return;
                    run_subject(*todo[i]);
                }
            });
        }
        for (auto& t : workers) t.join();
    }

    // Stable manifest order regardless of scheduling.
    std::stable_sort(manifest.records.begin(), manifest.records.end(),
                     [&](const StageRecord& a, const StageRecord& b) {
                         if (a.subject != b.subject) return a.subject < b.subject;
                         const auto ia = std::find(kStageNames.begin(), kStageNames.end(), a.stage);
                         const auto ib = std::find(kStageNames.begin(), kStageNames.end(), b.stage);
                         return ia < ib;
                     });
    manifest.save(manifest_path);
    return manifest;
}

}  // namespace ctpipe
