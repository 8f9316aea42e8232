#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctreason/data.hpp"

namespace ctreason::synth {

/// Procedural abdomen-like slices: a body ellipse with organ blobs whose size
/// follows an onset/peak/offset profile along the slice axis.
struct SynthConfig {
    int subjects = 10;
    int slices = 12;
    int size = 64;
    /// Preset applied before the explicit fields: "standard", "small" or "fragmented".
    std::string profile = "standard";
    std::vector<std::string> organs;  ///< empty = all template organs
    double size_scale = 1.0;
    double noise = 0.03;
    double p_seg = 0.4, p_det = 0.3;  ///< remainder is "both"
    int fragments_min = 4, fragments_max = 5;
    int min_object_area = 6;
    int max_objects_per_slice = 0;  ///< 0 keeps every present organ
    double train_frac = 0.6, val_frac = 0.2;
    std::uint64_t seed = 0;
};

/// Fills profile-dependent defaults ("small" shrinks radii, "fragmented" keeps only the fragmented organ).
SynthConfig apply_profile(SynthConfig cfg);

struct Subject {
    std::string id;
    std::vector<data::MultimodalSample> slices;  ///< every slice, including object-free ones
    /// Per organ and slice, the tight box of each separately drawn instance.
    std::map<std::string, std::vector<std::vector<PixelRegion>>> instance_boxes;
};

struct Dataset {
    std::vector<Subject> subjects;
    std::map<std::string, std::vector<std::string>> splits;  ///< "train"/"val"/"test" -> subject ids

    std::vector<data::MultimodalSample> samples(const std::string& split) const;
};

Dataset generate(const SynthConfig& cfg);
void write(const std::filesystem::path& root, const Dataset& ds);

/// Per-organ masks over slices of one subject, for the curation filter.
std::map<std::string, std::vector<Mask>> organ_series(const Subject& s, int size);

}  // namespace ctreason::synth
