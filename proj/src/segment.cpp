#include "ctpipe/segment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ctpipe {

LabelVolume segment_normalized(const LabelVolume& atlas, const Diffeomorphism& diffeo) {
    atlas.validate();
    const GridGeom& tgrid = diffeo.inverse;
    LabelVolume atlas_on_grid = atlas.same_grid(tgrid) ? atlas : resample_labels(atlas, tgrid);

    TransformChain chain;
    chain.add_displacement(diffeo.inverse);
    return apply_transform_labels(atlas_on_grid, chain, tgrid);
}

LabelVolume segment_physical(const LabelVolume& labels_normalized, const AffineTransform& prealign,
                             const GridGeom& native_grid) {
    labels_normalized.validate();
    native_grid.validate_geometry();
    prealign.validate();  // rejects singular affines

    TransformChain chain;
    AffineTransform step = prealign;
    step.source_space.clear();  // tags irrelevant here; the caller fixes spaces
    step.target_space.clear();
    chain.add_affine(step);
    return apply_transform_labels(labels_normalized, chain, native_grid);
}

std::map<std::int32_t, std::string> read_label_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open label table '" + path + "'");
    std::map<std::int32_t, std::string> table;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error("label table '" + path + "' line " + std::to_string(lineno) +
                                     ": expected index<TAB>name");
        }
        std::int32_t index;
        try {
            index = std::stoi(line.substr(0, tab));
        } catch (const std::exception&) {
            throw std::runtime_error("label table '" + path + "' line " + std::to_string(lineno) + ": bad index");
        }
        std::string name = line.substr(tab + 1);
        while (!name.empty() && (name.back() == '\r' || name.back() == ' ')) name.pop_back();
        if (!table.emplace(index, name).second) {
            throw std::runtime_error("label table '" + path + "' line " + std::to_string(lineno) +
                                     ": duplicate index " + std::to_string(index));
        }
    }
    return table;
}

std::vector<std::int32_t> unknown_labels(const LabelVolume& labels,
                                         const std::map<std::int32_t, std::string>& table) {
    std::set<std::int32_t> present(labels.data.begin(), labels.data.end());
    std::vector<std::int32_t> missing;
    for (const auto lab : present) {
        if (lab != 0 && table.find(lab) == table.end()) missing.push_back(lab);
    }
    return missing;
}

}  // namespace ctpipe
